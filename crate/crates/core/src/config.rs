//! Run configuration as a flat `key = value` text file.
//!
//! Keys are dotted (`model.n`, `train.lr`, `data.path`, `output.dir`,
//! `seed`); `#` starts a comment; blank lines are ignored. Lists are
//! comma-separated. Optional values accept `none` or `auto`. Unspecified
//! keys keep their defaults, which describe a 14-layer width-104 model
//! with sum aggregation trained on a regression task.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::algebra::ContributionInit;
use crate::error::{Error, Result};
use crate::graph::ModelConfig;
use crate::training::{Metric, TaskKind};

/// Optimization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Weight-regularizer coefficient.
    pub lambda1: f64,
    /// Contribution-sparsity coefficient.
    pub lambda2: f64,
    /// Norm order of the weight regularizer.
    pub p: f64,
    /// Plateau decay factor.
    pub decay: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub epochs: usize,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip: Option<f64>,
    pub batch_size: usize,
    /// Model-selection metric; `None` uses the task default.
    pub metric: Option<Metric>,
    /// Stop as soon as the training-set metric reaches this value.
    pub target_metric: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            lambda1: 1e-2,
            lambda2: 0.0,
            p: 2.0,
            decay: 0.5,
            patience: 10,
            min_lr: 1e-6,
            epochs: 1000,
            clip: None,
            batch_size: 128,
            metric: None,
            target_metric: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0) {
            return fail("train.lr must be positive");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return fail("train.lambda1 and train.lambda2 must be non-negative");
        }
        if !(self.p >= 1.0) {
            return fail("train.p must be at least 1");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return fail("train.decay must lie in (0, 1)");
        }
        if self.patience == 0 {
            return fail("train.patience must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be positive");
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return fail("train.clip must be positive");
        }
        Ok(())
    }

    pub fn metric_for(&self, task: TaskKind) -> Metric {
        self.metric.unwrap_or(Metric::default_for(task))
    }
}

/// Dataset location and task.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub task: TaskKind,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            task: TaskKind::Regression,
            split: [1.0, 0.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// `model.out_dim` is ignored in favour of [`RunConfig::out_dim`].
    pub model: ModelConfig,
    /// Logit width; `None` derives it from the dataset.
    pub out_dim: Option<usize>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            out_dim: None,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_with<T>(key: &str, v: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<T> {
    f(v).map_err(|e| Error::Config(format!("`{key}`: {e}")))
}

fn optional<T>(key: &str, v: &str, keyword: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if v == keyword {
        Ok(None)
    } else {
        parse_with(key, v, f).map(Some)
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn opt<T: ToString>(v: &Option<T>, keyword: &str) -> String {
    v.as_ref().map_or_else(|| keyword.to_string(), T::to_string)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            c.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_kind(&e))))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "model.n" => m.n = parse(key, v)?,
            "model.hidden" => m.hidden = parse(key, v)?,
            "model.layers" => m.layers = parse(key, v)?,
            "model.mp_mlp" => m.two_layer_mlp = parse(key, v)?,
            "model.aggregator" => m.aggregator = parse_with(key, v, str::parse)?,
            "model.skip" => m.skip = parse_with(key, v, str::parse)?,
            "model.mp_dropout" => m.mp_dropout = parse(key, v)?,
            "model.dropout_mode" => m.dropout_mode = parse_with(key, v, str::parse)?,
            "model.batch_norm" => m.batch_norm = parse(key, v)?,
            "model.downstream" => m.downstream = list(key, v)?,
            "model.downstream_dropout" => m.downstream_dropout = list(key, v)?,
            "model.contribution_init" => {
                m.contribution_init = optional(key, v, "auto", str::parse::<ContributionInit>)?
            }
            "model.weight_init" => m.weight_init = parse_with(key, v, str::parse)?,
            "model.freeze_contributions" => m.freeze_contributions = parse(key, v)?,
            "model.readout" => m.readout = parse_with(key, v, str::parse)?,
            "model.out_dim" => self.out_dim = optional(key, v, "auto", |s| parse(key, s))?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.lambda1" => t.lambda1 = parse(key, v)?,
            "train.lambda2" => t.lambda2 = parse(key, v)?,
            "train.p" => t.p = parse(key, v)?,
            "train.decay" => t.decay = parse(key, v)?,
            "train.patience" => t.patience = parse(key, v)?,
            "train.min_lr" => t.min_lr = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.clip" => t.clip = optional(key, v, "none", |s| parse(key, s))?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.metric" => t.metric = optional(key, v, "auto", str::parse::<Metric>)?,
            "train.target_metric" => t.target_metric = optional(key, v, "none", |s| parse(key, s))?,
            "data.path" => self.data.path = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "data.task" => self.data.task = parse_with(key, v, str::parse)?,
            "data.split" => {
                let parts: Vec<f64> = list(key, v)?;
                self.data.split = parts
                    .try_into()
                    .map_err(|_| Error::Config("`data.split` needs three fractions".into()))?;
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        model.out_dim = self.out_dim.unwrap_or(1);
        model.validate()?;
        self.train.validate()?;
        let split = self.data.split;
        if split.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("data.split {split:?} must be fractions summing to 1")));
        }
        if split[0] == 0.0 {
            return Err(Error::Config("data.split leaves no training graphs".into()));
        }
        let metric = self.train.metric_for(self.data.task);
        if !Metric::applicable(self.data.task).contains(&metric) {
            return Err(Error::Config(format!("metric {metric} does not apply to task {}", self.data.task)));
        }
        Ok(())
    }

    /// Every key with its current value, one per line, in a fixed order.
    pub fn serialize(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
            ("model.n", m.n.to_string()),
            ("model.hidden", m.hidden.to_string()),
            ("model.layers", m.layers.to_string()),
            ("model.mp_mlp", m.two_layer_mlp.to_string()),
            ("model.aggregator", m.aggregator.to_string()),
            ("model.skip", m.skip.to_string()),
            ("model.mp_dropout", m.mp_dropout.to_string()),
            ("model.dropout_mode", m.dropout_mode.to_string()),
            ("model.batch_norm", m.batch_norm.to_string()),
            ("model.downstream", join(&m.downstream)),
            ("model.downstream_dropout", join(&m.downstream_dropout)),
            ("model.contribution_init", opt(&m.contribution_init, "auto")),
            ("model.weight_init", m.weight_init.to_string()),
            ("model.freeze_contributions", m.freeze_contributions.to_string()),
            ("model.readout", m.readout.to_string()),
            ("model.out_dim", opt(&self.out_dim, "auto")),
            ("train.lr", t.lr.to_string()),
            ("train.lambda1", t.lambda1.to_string()),
            ("train.lambda2", t.lambda2.to_string()),
            ("train.p", t.p.to_string()),
            ("train.decay", t.decay.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.min_lr", t.min_lr.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.clip", opt(&t.clip, "none")),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.metric", opt(&t.metric, "auto")),
            ("train.target_metric", opt(&t.target_metric, "none")),
            ("data.path", self.data.path.as_ref().map_or(String::new(), |p| p.display().to_string())),
            ("data.task", self.data.task.to_string()),
            ("data.split", join(&self.data.split)),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// The model configuration with the logit width filled in.
    pub fn model_config(&self, out_dim: usize) -> ModelConfig {
        ModelConfig {
            out_dim: self.out_dim.unwrap_or(out_dim),
            ..self.model.clone()
        }
    }
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::Config(s) => s.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Aggregator, Readout, SkipMode};
    use crate::layers::{DropoutMode, WeightInit};

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = c.serialize();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert!(text.contains("model.hidden = 104\n"));
        assert!(text.contains("train.min_lr = 0.000001\n"));
    }

    #[test]
    fn every_field_round_trips() {
        let text = "\
            # comment line
            seed = 42
            output.dir = out/run 1
            model.n = 4
            model.hidden = 64   # trailing comment
            model.layers = 3
            model.mp_mlp = false
            model.aggregator = softmax
            model.skip = initial
            model.mp_dropout = 0.25
            model.dropout_mode = flat
            model.batch_norm = false
            model.downstream = 32, 16, 8
            model.downstream_dropout = 0.3, 0.2, 0.1
            model.contribution_init = uniform
            model.weight_init = glorot
            model.freeze_contributions = true
            model.readout = node
            model.out_dim = 7
            train.lr = 0.0005
            train.lambda1 = 0.1
            train.lambda2 = 1e-3
            train.p = 1
            train.decay = 0.75
            train.patience = 5
            train.min_lr = 1e-7
            train.epochs = 50
            train.clip = 2.0
            train.batch_size = 32
            train.metric = ap
            train.target_metric = 0.9
            data.path = data/x.jsonl
            data.task = multilabel-binary
            data.split = 0.8, 0.1, 0.1
        ";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.output_dir, PathBuf::from("out/run 1"));
        assert_eq!(c.model.aggregator, Aggregator::Softmax);
        assert_eq!(c.model.skip, SkipMode::Initial);
        assert_eq!(c.model.dropout_mode, DropoutMode::Flat);
        assert_eq!(c.model.weight_init, WeightInit::Glorot);
        assert_eq!(c.model.readout, Readout::Node);
        assert_eq!(c.model.downstream, vec![32, 16, 8]);
        assert_eq!(c.train.clip, Some(2.0));
        assert_eq!(c.train.metric, Some(Metric::AveragePrecision));
        assert_eq!(c.data.task, TaskKind::Multilabel);
        assert_eq!(c.out_dim, Some(7));
        assert_eq!(RunConfig::parse(&c.serialize()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_line() {
        let e = RunConfig::parse("seed = 1\nmodel.colour = red\n").unwrap_err();
        assert!(e.to_string().contains("line 2") && e.to_string().contains("model.colour"), "{e}");
        assert!(RunConfig::parse("model.n 4").unwrap_err().to_string().contains("line 1"));
        assert!(RunConfig::parse("model.n = four").is_err());
        assert!(RunConfig::parse("model.aggregator = median").is_err());
    }

    #[test]
    fn invariants_are_enforced() {
        for bad in [
            "model.n = 3",
            "model.mp_dropout = 1.0",
            "data.split = 0.5, 0.2, 0.2",
            "data.split = 0.5, 0.5",
            "train.decay = 1.0",
            "train.patience = 0",
            "data.task = regression-mae\ntrain.metric = roc-auc",
        ] {
            assert!(RunConfig::parse(bad).is_err(), "{bad}");
        }
    }
}
