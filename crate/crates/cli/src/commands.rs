use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use phc_core::algebra::sparsity;
use phc_core::autodiff::GradCheckOptions;
use phc_core::config::RunConfig;
use phc_core::data::{bundled_graph, generate, write_graphs, Dataset, SyntheticKind};
use phc_core::graph::{GraphBatch, InputSchema, PhcModel, Readout};
use phc_core::layers::Mode;
use phc_core::params::{grad_check_store, ParamStore};
use phc_core::training::{
    contribution_reg, contribution_reg_value, predict, restore_model, weight_reg, Checkpoint, Metric, TaskKind,
    Trainer,
};
use phc_core::{Error, Tensor};

/// Writes a line to stdout, ignoring a closed pipe.
macro_rules! emit {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// A command failure: a short kind tag and a one-line detail.
#[derive(Debug)]
pub struct Failure {
    kind: &'static str,
    detail: String,
}

impl Failure {
    fn new(kind: &'static str, detail: impl Into<String>) -> Self {
        Failure {
            kind,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.detail)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let text = e.to_string();
        let detail = text.split_once(": ").map_or(text.as_str(), |(_, d)| d).to_string();
        Failure::new(e.kind(), detail)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new("io", e.to_string())
    }
}

type Result<T> = std::result::Result<T, Failure>;

/// Relative dataset paths are taken relative to the config file.
fn data_path(config: &RunConfig, config_file: &Path) -> Result<PathBuf> {
    let path = config
        .data
        .path
        .clone()
        .ok_or_else(|| Failure::new("config", "data.path is not set"))?;
    if path.is_relative() {
        Ok(config_file.parent().unwrap_or(Path::new("")).join(path))
    } else {
        Ok(path)
    }
}

pub fn train(config_file: &Path, seed: Option<u64>, out: Option<PathBuf>, resume: bool) -> Result<()> {
    let mut config = RunConfig::load(config_file)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(o) = out {
        config.output_dir = o;
    }
    config.validate()?;
    let dataset = Dataset::load(&data_path(&config, config_file)?)?;
    for line in dataset.report().lines() {
        info!("{line}");
    }
    let dir = config.output_dir.clone();
    let mut trainer = if resume {
        let path = dir.join("last.ckpt");
        if !path.exists() {
            return Err(Failure::new("checkpoint", format!("nothing to resume: {} is missing", path.display())));
        }
        let trainer = Trainer::resume(&Checkpoint::load(&path)?, &dataset)?;
        if trainer.config() != &config {
            return Err(Failure::new("config", "the checkpoint was written with a different configuration"));
        }
        info!("resuming after epoch {}", trainer.history().len());
        trainer
    } else {
        Trainer::new(config, &dataset)?
    };
    info!(
        "{} trainable parameters, {} training / {} validation graphs",
        trainer.model().count_parameters(trainer.store()),
        trainer.train_graphs().len(),
        trainer.val_graphs().len()
    );
    trainer.fit(Some(&dir), None)?;
    let metric = trainer.metric();
    emit!("epochs = {}", trainer.history().len());
    if let Some(last) = trainer.history().last() {
        emit!("train_loss = {}", last.train_loss);
        emit!("train_{metric} = {}", last.train_metric);
        if let Some(v) = last.val_metric {
            emit!("val_{metric} = {v}");
        }
    }
    emit!("parameters = {}", trainer.model().count_parameters(trainer.store()));
    emit!("output = {}", dir.display());
    Ok(())
}

pub fn eval(config_file: &Path, checkpoint: &Path, data: &Path) -> Result<()> {
    let config = RunConfig::load(config_file)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (saved, model, store) = restore_model(&ckpt)?;
    let out_dim = model.config().out_dim;
    if config.model_config(out_dim) != saved.model_config(out_dim) {
        return Err(Failure::new("config", "model section differs from the checkpoint"));
    }
    if config.data.task != saved.data.task {
        return Err(Failure::new(
            "config",
            format!("task {} differs from the checkpoint's {}", config.data.task, saved.data.task),
        ));
    }
    let dataset = Dataset::load(data)?;
    for (i, g) in dataset.graphs.iter().enumerate() {
        model
            .schema()
            .check(g)
            .map_err(|e| Failure::new("schema", format!("graph {}: {}", i + 1, Failure::from(e).detail)))?;
    }
    let (logits, targets) = predict(&model, &store, &dataset.graphs, config.train.batch_size)?;
    let task = config.data.task;
    emit!("graphs = {}", dataset.graphs.len());
    for &metric in Metric::applicable(task) {
        match metric.evaluate(&logits, &targets, task) {
            Ok(v) => emit!("{metric} = {v}"),
            Err(e) => emit!("{metric} = undefined ({})", Failure::from(e).detail),
        }
    }
    Ok(())
}

pub fn gradcheck(config_file: &Path, coords: usize) -> Result<()> {
    let config = RunConfig::load(config_file)?;
    let mut graph = bundled_graph();
    let node_level = config.model.readout == Readout::Node;
    if node_level {
        graph.target = vec![0.0; graph.num_nodes];
    }
    let out_dim = config.out_dim.unwrap_or(match config.data.task {
        TaskKind::Multiclass => 2,
        _ => 1,
    });
    let schema = InputSchema::infer([&graph])?;
    let mut store = ParamStore::new();
    let model = PhcModel::new(&mut store, &config.model_config(out_dim), &schema, config.seed)?;
    let batch = GraphBatch::collate(&[&graph], node_level)?;
    let layers: Vec<_> = model.phm_layers().collect();
    let t = &config.train;
    let opts = GradCheckOptions {
        max_coords_per_param: (coords > 0).then_some(coords),
        seed: config.seed,
        ..GradCheckOptions::default()
    };
    // Batch norm uses batch statistics; dropout is off.
    let report = grad_check_store(
        &store,
        |tape, bind| {
            let out = model.forward(tape, bind, &store, &batch, Mode::Train, None)?;
            let sq = tape.mul(out.logits, out.logits)?;
            let mut total = tape.sum(sq)?;
            if t.lambda1 > 0.0 {
                if let Some(r) = weight_reg(tape, bind, layers.iter().copied(), t.p)? {
                    let r = tape.scale(r, t.lambda1)?;
                    total = tape.add(total, r)?;
                }
            }
            if t.lambda2 > 0.0 {
                if let Some(r) = contribution_reg(tape, bind, layers.iter().copied())? {
                    let r = tape.scale(r, t.lambda2)?;
                    total = tape.add(total, r)?;
                }
            }
            Ok(total)
        },
        &opts,
    )?;
    let pass = report.max_rel_error < GRADCHECK_TOLERANCE;
    emit!("coordinates = {}", report.coords_checked);
    emit!("kink_margin = {:e}", report.kink_margin);
    emit!(
        "max rel err {:e} < 1e-4: {}",
        report.max_rel_error,
        if pass { "PASS" } else { "FAIL" }
    );
    if pass {
        Ok(())
    } else {
        Err(Failure::new(
            "gradcheck",
            format!("max relative error {:e} exceeds {GRADCHECK_TOLERANCE:e}", report.max_rel_error),
        ))
    }
}

fn matrix_csv(t: &Tensor) -> Result<String> {
    let (rows, cols) = t.dims2()?;
    let mut s = String::new();
    for r in 0..rows {
        let line: Vec<String> = (0..cols).map(|c| format!("{}", t.at2(r, c))).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    Ok(s)
}

pub fn inspect(checkpoint: &Path, out: &Path) -> Result<()> {
    let (_, model, store) = restore_model(&Checkpoint::load(checkpoint)?)?;
    fs::create_dir_all(out)?;
    let mut summary = String::from("layer,n,k,d,sparsity,contribution_reg\n");
    let mut contributions = String::from("layer,index,nonzeros,abs_sum\n");
    let mut lines = Vec::new();
    for layer in model.phm_layers() {
        let name = store.get(layer.weights_id()).name.trim_end_matches(".weight").to_string();
        let u = layer.assembled(&store)?;
        let s = sparsity(u.matrix())?;
        fs::write(out.join(format!("{name}.U.csv")), matrix_csv(u.matrix())?)?;
        let set = layer.contributions(&store)?;
        let mut nonzeros = Vec::new();
        for (i, c) in set.matrices().iter().enumerate() {
            fs::write(out.join(format!("{name}.C{i}.csv")), matrix_csv(c)?)?;
            let nnz = c.data().iter().filter(|&&v| v != 0.0).count();
            let abs: f64 = c.data().iter().map(|v| v.abs()).sum();
            contributions.push_str(&format!("{name},{i},{nnz},{abs}\n"));
            nonzeros.push(nnz.to_string());
        }
        let reg = contribution_reg_value(&store, [layer]);
        summary.push_str(&format!("{name},{},{},{},{s},{reg}\n", layer.n(), u.k(), u.d()));
        lines.push(format!("{name}: sparsity = {s}, nonzeros per C_i = [{}]", nonzeros.join(", ")));
    }
    fs::write(out.join("summary.csv"), summary)?;
    fs::write(out.join("contributions.csv"), contributions)?;
    for line in lines {
        emit!("{line}");
    }
    Ok(())
}

pub fn gen(kind: &str, size: usize, seed: u64, out: &Path) -> Result<()> {
    let kind: SyntheticKind = kind.parse()?;
    if size == 0 {
        return Err(Failure::new("invalid-argument", "--size must be at least 1"));
    }
    let graphs = generate(kind, size, seed);
    write_graphs(&graphs, out)?;
    info!("wrote {size} {kind} graphs to {}", out.display());
    Ok(())
}
