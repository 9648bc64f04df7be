use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;

use crate::algebra::keyed_rng;
use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::data::{split_indices, Dataset};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBatch, InputSchema, PhcModel, Readout};
use crate::layers::{Mode, PhmLinear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::loss::{class_labels, contribution_reg_value, total_loss, weight_reg_value, Penalties, TaskKind};
use super::metrics::Metric;
use super::optim::Adam;
use super::schedule::{Direction, Plateau};

pub const LOG_HEADER: &str =
    "epoch,train_loss,train_metric,val_metric,lr,weight_reg,contribution_reg,improved,seconds";

/// Stream key for the per-epoch shuffling and dropout generator.
const EPOCH_STREAM: u64 = 0xE90C;

/// One row of the training log. `lr` is the rate used during the epoch;
/// the metrics are eval-mode scores after it.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss (task plus penalties) over training batches.
    pub train_loss: f64,
    pub train_metric: f64,
    pub val_metric: Option<f64>,
    pub lr: f64,
    pub weight_reg: f64,
    pub contribution_reg: f64,
    /// The scheduler saw a new best value.
    pub improved: bool,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.train_loss,
            self.train_metric,
            self.val_metric.map_or(String::new(), |v| v.to_string()),
            self.lr,
            self.weight_reg,
            self.contribution_reg,
            u8::from(self.improved),
            self.seconds
        )
    }

    pub fn from_csv(line: &str) -> Result<EpochRecord> {
        let bad = || Error::Checkpoint(format!("malformed log line `{line}`"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(EpochRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            train_loss: num(f[1])?,
            train_metric: num(f[2])?,
            val_metric: if f[3].is_empty() { None } else { Some(num(f[3])?) },
            lr: num(f[4])?,
            weight_reg: num(f[5])?,
            contribution_reg: num(f[6])?,
            improved: f[7] == "1",
            seconds: num(f[8])?,
        })
    }
}

/// Logit width needed for `task` on `graphs`.
pub fn infer_out_dim(task: TaskKind, graphs: &[Graph], readout: Readout) -> Result<usize> {
    if readout == Readout::Node {
        return match task {
            TaskKind::Multiclass => max_class(graphs.iter().flat_map(|g| g.target.iter())),
            _ => Ok(1),
        };
    }
    match task {
        TaskKind::Multiclass => max_class(graphs.iter().filter_map(|g| g.target.first())),
        _ => graphs
            .first()
            .map(|g| g.target.len())
            .ok_or_else(|| Error::Dataset("empty dataset".into())),
    }
}

fn max_class<'a>(targets: impl Iterator<Item = &'a f64>) -> Result<usize> {
    let mut classes = 0;
    for &t in targets {
        if !(t >= 0.0 && t.fract() == 0.0) {
            return Err(Error::Dataset(format!("class target {t} is not a non-negative integer")));
        }
        classes = classes.max(t as usize + 1);
    }
    Ok(classes.max(2))
}

/// Eval-mode logits and targets for `graphs`, evaluated in chunks.
pub fn predict(model: &PhcModel, store: &ParamStore, graphs: &[Graph], batch_size: usize) -> Result<(Tensor, Tensor)> {
    let node_level = model.config().readout == Readout::Node;
    let batches = graphs
        .chunks(batch_size.max(1))
        .map(|c| GraphBatch::collate(&c.iter().collect::<Vec<_>>(), node_level))
        .collect::<Result<Vec<_>>>()?;
    predict_batches(model, store, &batches)
}

fn predict_batches(model: &PhcModel, store: &ParamStore, batches: &[GraphBatch]) -> Result<(Tensor, Tensor)> {
    let (mut logits, mut targets) = (Vec::new(), Vec::new());
    let (mut rows, mut cols, mut tcols) = (0, model.config().out_dim, 0);
    for b in batches {
        let out = model.infer(store, b)?;
        let (r, c) = out.dims2()?;
        rows += r;
        cols = c;
        tcols = b.targets.shape()[1];
        logits.extend_from_slice(out.data());
        targets.extend_from_slice(b.targets.data());
    }
    Ok((Tensor::new(&[rows, cols], logits)?, Tensor::new(&[rows, tcols], targets)?))
}

/// Scores a model on `graphs`.
pub fn evaluate_model(
    model: &PhcModel,
    store: &ParamStore,
    graphs: &[Graph],
    task: TaskKind,
    metric: Metric,
    batch_size: usize,
) -> Result<f64> {
    let (logits, targets) = predict(model, store, graphs, batch_size)?;
    metric.evaluate(&logits, &targets, task)
}

/// Rebuilds the run configuration, model, and parameters stored in a
/// checkpoint written by [`Trainer`].
pub fn restore_model(ckpt: &Checkpoint) -> Result<(RunConfig, PhcModel, ParamStore)> {
    let config = RunConfig::parse(ckpt.text("config")?)?;
    let schema = InputSchema::from_text(ckpt.text("schema")?)?;
    let out_dim = ckpt.scalar("meta.out_dim")? as usize;
    let mut store = ParamStore::new();
    let model = PhcModel::new(&mut store, &config.model_config(out_dim), &schema, config.seed)?;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = format!("param.{}", store.get(id).name);
        let saved = ckpt.tensor(&name)?;
        if saved.shape() != store.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                saved.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = saved.clone();
    }
    Ok((config, model, store))
}

/// Mini-batch training loop with reduce-on-plateau scheduling and
/// checkpoints that allow exact resumption.
pub struct Trainer {
    config: RunConfig,
    task: TaskKind,
    metric: Metric,
    model: PhcModel,
    store: ParamStore,
    trainable: Vec<ParamId>,
    adam: Adam,
    plateau: Plateau,
    node_level: bool,
    train: Vec<Graph>,
    val: Vec<Graph>,
    train_eval: Vec<GraphBatch>,
    val_eval: Vec<GraphBatch>,
    history: Vec<EpochRecord>,
    finished: bool,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: RunConfig, dataset: &Dataset) -> Result<Trainer> {
        config.validate()?;
        let out_dim = infer_out_dim(config.data.task, &dataset.graphs, config.model.readout)?;
        let mut store = ParamStore::new();
        let model = PhcModel::new(&mut store, &config.model_config(out_dim), &dataset.schema, config.seed)?;
        Trainer::assemble(config, dataset, model, store)
    }

    /// Continues the run saved in `ckpt`; the training trace continues
    /// exactly as if it had not been interrupted.
    pub fn resume(ckpt: &Checkpoint, dataset: &Dataset) -> Result<Trainer> {
        let (config, model, store) = restore_model(ckpt)?;
        let mut t = Trainer::assemble(config, dataset, model, store)?;
        let mut moments = Vec::new();
        for &id in &t.trainable {
            let name = &t.store.get(id).name;
            let m = ckpt.tensor(&format!("adam.m.{name}"))?.clone();
            let v = ckpt.tensor(&format!("adam.v.{name}"))?.clone();
            moments.push((id, m, v));
        }
        t.adam.restore(ckpt.scalar("meta.adam_step")? as u64, moments)?;
        let best = ckpt.scalar("meta.best")?;
        t.plateau.restore(
            ckpt.scalar("meta.lr")?,
            (!best.is_nan()).then_some(best),
            ckpt.scalar("meta.bad_epochs")? as usize,
            ckpt.scalar("meta.sched_epochs")? as usize,
        );
        t.history = ckpt
            .text("history")?
            .lines()
            .skip(1)
            .map(EpochRecord::from_csv)
            .collect::<Result<_>>()?;
        t.finished = ckpt.scalar("meta.finished")? != 0.0;
        Ok(t)
    }

    fn assemble(config: RunConfig, dataset: &Dataset, model: PhcModel, store: ParamStore) -> Result<Trainer> {
        let task = config.data.task;
        let metric = config.train.metric_for(task);
        let node_level = model.config().readout == Readout::Node;
        for (i, g) in dataset.graphs.iter().enumerate() {
            model
                .schema()
                .check(g)
                .map_err(|e| Error::Dataset(format!("graph {}: does not match the model schema: {e}", i + 1)))?;
            check_targets(g, task, model.config().out_dim, node_level)
                .map_err(|e| Error::Dataset(format!("graph {}: {e}", i + 1)))?;
        }
        let [train_idx, val_idx, _] = split_indices(dataset.graphs.len(), config.data.split, config.seed);
        let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.graphs[i].clone()).collect::<Vec<_>>();
        let (train, val) = (pick(&train_idx), pick(&val_idx));
        if train.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        let batches = |graphs: &[Graph]| {
            graphs
                .chunks(config.train.batch_size)
                .map(|c| GraphBatch::collate(&c.iter().collect::<Vec<_>>(), node_level))
                .collect::<Result<Vec<_>>>()
        };
        let (train_eval, val_eval) = (batches(&train)?, batches(&val)?);
        let trainable = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        let t = &config.train;
        let plateau = Plateau::new(t.lr, t.decay, t.patience, t.min_lr, t.epochs, metric.direction());
        Ok(Trainer {
            adam: Adam::new(&store, t.clip),
            finished: t.epochs == 0,
            task,
            metric,
            model,
            store,
            trainable,
            plateau,
            node_level,
            train,
            val,
            train_eval,
            val_eval,
            history: Vec::new(),
            config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &PhcModel {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn train_graphs(&self) -> &[Graph] {
        &self.train
    }

    pub fn val_graphs(&self) -> &[Graph] {
        &self.val
    }

    fn phm_layers(&self) -> Vec<&PhmLinear> {
        self.model.phm_layers().collect()
    }

    /// One pass over the shuffled training split followed by evaluation
    /// and a scheduler step.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.history.len();
        let mut rng = keyed_rng(self.config.seed, EPOCH_STREAM, epoch as u64);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        let lr = self.plateau.lr();
        let t = &self.config.train;
        let penalties = Penalties {
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            p: t.p,
        };
        let (mut loss_sum, mut rows_seen) = (0.0, 0usize);
        for chunk in order.chunks(t.batch_size) {
            let graphs: Vec<&Graph> = chunk.iter().map(|&i| &self.train[i]).collect();
            let nodes: usize = graphs.iter().map(|g| g.num_nodes).sum();
            if self.model.config().batch_norm && nodes < 2 {
                debug!("skipping a batch with {nodes} node(s): batch norm needs two");
                continue;
            }
            let batch = GraphBatch::collate(&graphs, self.node_level)?;
            let mut tape = Tape::new();
            let bind = self.store.bind(&mut tape);
            let out = self
                .model
                .forward(&mut tape, &bind, &self.store, &batch, Mode::Train, Some(&mut rng))?;
            let layers: Vec<&PhmLinear> = self.model.phm_layers().collect();
            let terms = total_loss(
                &mut tape,
                &bind,
                out.logits,
                &batch.targets,
                self.task,
                layers.iter().copied(),
                &penalties,
            )?;
            let rows = batch.targets.shape()[0];
            loss_sum += tape.value(terms.total).item()? * rows as f64;
            rows_seen += rows;
            let mut grads = tape.backward(terms.total)?;
            let mut list: Vec<(ParamId, Tensor)> = self
                .trainable
                .iter()
                .map(|&id| {
                    let g = grads
                        .take(bind.var(id))
                        .unwrap_or_else(|| Tensor::zeros(self.store.value(id).shape()));
                    (id, g)
                })
                .collect();
            self.adam.step(&mut self.store, &mut list, lr)?;
            for update in out.bn_updates {
                update.apply(&mut self.store);
            }
        }
        if rows_seen == 0 {
            return Err(Error::Dataset("no usable training batch".into()));
        }
        let train_metric = self.score(&self.train_eval)?;
        let val_metric = if self.val_eval.is_empty() {
            None
        } else {
            Some(self.score(&self.val_eval)?)
        };
        let step = self.plateau.step(val_metric.unwrap_or(train_metric));
        let layers = self.phm_layers();
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / rows_seen as f64,
            train_metric,
            val_metric,
            lr,
            weight_reg: weight_reg_value(&self.store, layers.iter().copied(), self.config.train.p),
            contribution_reg: contribution_reg_value(&self.store, layers.iter().copied()),
            improved: step.improved,
            seconds: start.elapsed().as_secs_f64(),
        };
        let reached = self.config.train.target_metric.is_some_and(|target| match self.metric.direction() {
            Direction::Minimize => train_metric <= target,
            Direction::Maximize => train_metric >= target,
        });
        self.finished = step.stop || reached;
        self.history.push(record.clone());
        Ok(record)
    }

    fn score(&self, batches: &[GraphBatch]) -> Result<f64> {
        let (logits, targets) = predict_batches(&self.model, &self.store, batches)?;
        self.metric.evaluate(&logits, &targets, self.task)
    }

    /// Trains until the scheduler or the target metric stops the run, or
    /// until `max_epochs` further epochs have run. With `out`, writes
    /// `config.txt`, `log.csv`, `last.ckpt` (every epoch, and once before
    /// the first), and `best.ckpt` (on scheduler improvement).
    pub fn fit(&mut self, out: Option<&Path>, max_epochs: Option<usize>) -> Result<&[EpochRecord]> {
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.txt"), self.config.serialize())?;
            fs::write(dir.join("log.csv"), self.log_text())?;
            if self.history.is_empty() {
                self.checkpoint().save(&dir.join("last.ckpt"))?;
            }
        }
        let mut ran = 0;
        while !self.finished && max_epochs.is_none_or(|m| ran < m) {
            let r = self.train_epoch()?;
            ran += 1;
            info!(
                "epoch {} loss {:.6} train {} {:.6}{} lr {:e} ({:.2}s)",
                r.epoch,
                r.train_loss,
                self.metric,
                r.train_metric,
                r.val_metric.map_or(String::new(), |v| format!(" val {v:.6}")),
                r.lr,
                r.seconds
            );
            if let Some(dir) = out {
                let ckpt = self.checkpoint();
                if r.improved {
                    ckpt.save(&dir.join("best.ckpt"))?;
                }
                ckpt.save(&dir.join("last.ckpt"))?;
                fs::write(dir.join("log.csv"), self.log_text())?;
            }
        }
        Ok(&self.history)
    }

    pub fn log_text(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.history {
            let _ = writeln!(s, "{}", r.to_csv());
        }
        s
    }

    /// Parameters, optimizer moments, scheduler state, configuration,
    /// schema, and history.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put_text("config", self.config.serialize());
        c.put_text("schema", self.model.schema().to_text());
        c.put_text("history", self.log_text());
        let scalar = |c: &mut Checkpoint, name: &str, v: f64| c.put_tensor(name, Tensor::scalar(v));
        scalar(&mut c, "meta.out_dim", self.model.config().out_dim as f64);
        scalar(&mut c, "meta.adam_step", self.adam.steps() as f64);
        scalar(&mut c, "meta.lr", self.plateau.lr());
        scalar(&mut c, "meta.best", self.plateau.best().unwrap_or(f64::NAN));
        scalar(&mut c, "meta.bad_epochs", self.plateau.bad_epochs() as f64);
        scalar(&mut c, "meta.sched_epochs", self.plateau.epochs() as f64);
        scalar(&mut c, "meta.finished", f64::from(u8::from(self.finished)));
        for (id, p) in self.store.iter() {
            c.put_tensor(format!("param.{}", p.name), p.value.clone());
            if let Some((m, v)) = self.adam.moments(id) {
                c.put_tensor(format!("adam.m.{}", p.name), m.clone());
                c.put_tensor(format!("adam.v.{}", p.name), v.clone());
            }
        }
        c
    }
}

fn check_targets(g: &Graph, task: TaskKind, out_dim: usize, node_level: bool) -> Result<()> {
    let want = if node_level { g.num_nodes } else if task == TaskKind::Multiclass { 1 } else { out_dim };
    if g.target.len() != want {
        return Err(Error::Dataset(format!("target length {} (expected {want})", g.target.len())));
    }
    match task {
        TaskKind::Binary | TaskKind::Multilabel => {
            if let Some(t) = g.target.iter().find(|t| !(t.is_nan() || **t == 0.0 || **t == 1.0)) {
                return Err(Error::Dataset(format!("binary target {t} is not 0, 1, or missing")));
            }
        }
        TaskKind::Multiclass => {
            class_labels(&Tensor::vector(g.target.clone()), out_dim)?;
        }
        TaskKind::Regression => {
            if g.target.iter().any(|t| !t.is_finite()) {
                return Err(Error::Dataset("regression target is not finite".into()));
            }
        }
    }
    Ok(())
}
