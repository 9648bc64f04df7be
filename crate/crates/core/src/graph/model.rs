use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::algebra::ContributionInit;
use crate::autodiff::{SegmentReduce, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{hc_dropout, ComponentBatchNorm, Dense, DropoutMode, Mode, PhmLinear, PhmSpec, RunningStatsUpdate, WeightInit};
use crate::params::{Bindings, ParamId, ParamRole, ParamStore};
use crate::tensor::Tensor;

use super::aggregate::{aggregate, Aggregator};
use super::batch::{GraphBatch, InputSchema};
use super::encode::FeatureEncoder;

/// Which embedding is added back after every message-passing layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipMode {
    /// `h⁽ˡ⁾ = h⁽⁰⁾ + h̃⁽ˡ⁾`
    Initial,
    /// `h⁽ˡ⁾ = h⁽ˡ⁻¹⁾ + h̃⁽ˡ⁾`
    Previous,
}

/// Graph-level prediction (pooling + downstream MLP) or per-node logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    Graph,
    Node,
}

macro_rules! string_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }, $what:literal) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$variant => $name,)*
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)*
                    other => Err(Error::invalid(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
    };
}

string_enum!(SkipMode { Initial => "initial", Previous => "previous" }, "skip mode");
string_enum!(Readout { Graph => "graph", Node => "node" }, "readout");

/// Architecture of a [`PhcModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Algebra dimension.
    pub n: usize,
    /// Width of every message-passing layer (a multiple of `n`).
    pub hidden: usize,
    pub layers: usize,
    /// Two PHM layers per message-passing MLP instead of one.
    pub two_layer_mlp: bool,
    pub aggregator: Aggregator,
    pub skip: SkipMode,
    pub mp_dropout: f64,
    pub dropout_mode: DropoutMode,
    /// Component batch norm after every message-passing PHM layer.
    pub batch_norm: bool,
    /// Widths of the downstream PHM layers (multiples of `n`).
    pub downstream: Vec<usize>,
    /// One dropout rate per downstream layer.
    pub downstream_dropout: Vec<f64>,
    /// `None` picks complex for `n = 2`, quaternion for `n = 4`, and
    /// shifted-identity otherwise.
    pub contribution_init: Option<ContributionInit>,
    pub weight_init: WeightInit,
    pub freeze_contributions: bool,
    pub readout: Readout,
    /// Logit width.
    pub out_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 1,
            hidden: 104,
            layers: 14,
            two_layer_mlp: true,
            aggregator: Aggregator::Sum,
            skip: SkipMode::Previous,
            mp_dropout: 0.0,
            dropout_mode: DropoutMode::Component,
            batch_norm: true,
            downstream: vec![100, 50],
            downstream_dropout: vec![0.2, 0.1],
            contribution_init: None,
            weight_init: WeightInit::PhcNormal,
            freeze_contributions: false,
            readout: Readout::Graph,
            out_dim: 1,
        }
    }
}

impl ModelConfig {
    pub fn resolved_contribution_init(&self) -> ContributionInit {
        self.contribution_init.unwrap_or(match self.n {
            2 => ContributionInit::Complex,
            4 => ContributionInit::Quaternion,
            _ => ContributionInit::ShiftedIdentity,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n == 0 {
            return fail("model.n must be positive".into());
        }
        if self.hidden == 0 || self.hidden % self.n != 0 {
            return fail(format!("model.hidden={} must be a positive multiple of n={}", self.hidden, self.n));
        }
        if let Some(&w) = self.downstream.iter().find(|&&w| w == 0 || w % self.n != 0) {
            return fail(format!("downstream width {w} must be a positive multiple of n={}", self.n));
        }
        if self.downstream.len() != self.downstream_dropout.len() {
            return fail(format!(
                "{} downstream widths but {} downstream dropout rates",
                self.downstream.len(),
                self.downstream_dropout.len()
            ));
        }
        let rates = std::iter::once(self.mp_dropout).chain(self.downstream_dropout.iter().copied());
        if let Some(p) = rates.into_iter().find(|p| !(0.0..1.0).contains(p)) {
            return fail(format!("dropout rate {p} outside [0, 1)"));
        }
        if self.out_dim == 0 {
            return fail("model.out_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct MpLayer {
    edge_encoder: Option<FeatureEncoder>,
    mlp: Vec<(PhmLinear, Option<ComponentBatchNorm>)>,
    tau: Option<ParamId>,
}

/// Result of one forward pass.
#[derive(Debug)]
pub struct ModelOutput {
    /// `num_graphs × out_dim` (graph readout) or `num_nodes × out_dim`.
    pub logits: Var,
    /// Running-statistics updates from train-mode batch norm; apply them
    /// to the store after the optimizer step.
    pub bn_updates: Vec<RunningStatsUpdate>,
}

/// Hypercomplex message-passing network.
#[derive(Clone, Debug)]
pub struct PhcModel {
    config: ModelConfig,
    schema: InputSchema,
    node_encoder: FeatureEncoder,
    layers: Vec<MpLayer>,
    attention: Option<Dense>,
    head: Vec<PhmLinear>,
    output: Dense,
}

impl PhcModel {
    /// Registers every parameter in `store`. `seed` fixes all initial values.
    pub fn new(store: &mut ParamStore, config: &ModelConfig, schema: &InputSchema, seed: u64) -> Result<PhcModel> {
        config.validate()?;
        let (n, k) = (config.n, config.hidden);
        let mut key = 0u64;
        let mut next_key = || {
            key += 1;
            key
        };
        let node_encoder =
            FeatureEncoder::new(store, "encoder.node", &schema.node_vocab, schema.node_cont, k, seed, next_key())?
                .ok_or_else(|| Error::Config("dataset has no node features".into()))?;
        let spec = |k_out: usize, d_in: usize| PhmSpec {
            n,
            k: k_out,
            d: d_in,
            bias: true,
            weight_init: config.weight_init,
            contribution_init: config.resolved_contribution_init(),
            freeze_contributions: config.freeze_contributions,
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let edge_encoder = FeatureEncoder::new(
                store,
                &format!("mp{l}.edge"),
                &schema.edge_vocab,
                schema.edge_cont,
                k,
                seed,
                next_key(),
            )?;
            let depth = if config.two_layer_mlp { 2 } else { 1 };
            let mut mlp = Vec::with_capacity(depth);
            for j in 0..depth {
                let name = format!("mp{l}.phm{j}");
                let phm = PhmLinear::new(store, &name, &spec(k, k), seed, next_key())?;
                let bn = if config.batch_norm {
                    Some(ComponentBatchNorm::new(store, &format!("mp{l}.bn{j}"), n, k / n)?)
                } else {
                    None
                };
                mlp.push((phm, bn));
            }
            let tau = if config.aggregator == Aggregator::Softmax {
                Some(store.add(format!("mp{l}.tau"), Tensor::scalar(1.0), ParamRole::Temperature, true)?)
            } else {
                None
            };
            layers.push(MpLayer { edge_encoder, mlp, tau });
        }
        let (attention, head, output) = match config.readout {
            Readout::Node => (None, Vec::new(), Dense::new(store, "output", k, config.out_dim, seed, next_key())?),
            Readout::Graph => {
                let attention = Dense::new(store, "pool.attention", k, k / n, seed, next_key())?;
                let mut head = Vec::new();
                let mut width = k;
                for (j, &w) in config.downstream.iter().enumerate() {
                    head.push(PhmLinear::new(store, &format!("head.phm{j}"), &spec(w, width), seed, next_key())?);
                    width = w;
                }
                let output = Dense::new(store, "output", width, config.out_dim, seed, next_key())?;
                (Some(attention), head, output)
            }
        };
        Ok(PhcModel {
            config: config.clone(),
            schema: schema.clone(),
            node_encoder,
            layers,
            attention,
            head,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &InputSchema {
        &self.schema
    }

    /// Every PHM layer, message passing first, then the downstream head.
    pub fn phm_layers(&self) -> impl Iterator<Item = &PhmLinear> {
        self.layers
            .iter()
            .flat_map(|l| l.mlp.iter().map(|(phm, _)| phm))
            .chain(self.head.iter())
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self, store: &ParamStore) -> usize {
        store.count_trainable()
    }

    /// Node embeddings after the last message-passing layer (`|V| × k`).
    pub fn embed(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        store: &ParamStore,
        batch: &GraphBatch,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
        bn_updates: &mut Vec<RunningStatsUpdate>,
    ) -> Result<Var> {
        let h0 = self
            .node_encoder
            .forward(tape, bind, &batch.node_cat, batch.node_cont.as_ref(), batch.num_nodes)?;
        let mut h = h0;
        for layer in &self.layers {
            let e = match &layer.edge_encoder {
                Some(enc) if batch.num_edges() > 0 => {
                    Some(enc.forward(tape, bind, &batch.edge_cat, batch.edge_cont.as_ref(), batch.num_edges())?)
                }
                _ => None,
            };
            let tau = layer.tau.map(|id| bind.var(id));
            let m = aggregate(tape, h, e, &batch.src, &batch.dst, batch.num_nodes, self.config.aggregator, tau)?;
            let mut x = tape.add(h, m)?;
            for (phm, bn) in &layer.mlp {
                x = phm.forward(tape, bind, x)?;
                if let Some(bn) = bn {
                    let (y, update) = bn.forward(tape, bind, store, x, mode)?;
                    bn_updates.extend(update);
                    x = y;
                }
                x = tape.relu(x)?;
                x = self.dropout(tape, x, self.config.mp_dropout, mode, rng.as_deref_mut())?;
            }
            let anchor = match self.config.skip {
                SkipMode::Initial => h0,
                SkipMode::Previous => h,
            };
            h = tape.add(anchor, x)?;
        }
        Ok(h)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, p: f64, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let rng = if mode == Mode::Train { rng } else { None };
        hc_dropout(tape, x, self.config.n, p, self.config.dropout_mode, rng)
    }

    /// Soft-attention pooling of node embeddings into `num_graphs × k`.
    pub fn pool(&self, tape: &mut Tape, bind: &Bindings, batch: &GraphBatch, h: Var) -> Result<Var> {
        let attention = self
            .attention
            .as_ref()
            .ok_or_else(|| Error::invalid("node-level model has no pooling head"))?;
        let scores = attention.forward(tape, bind, h)?;
        let w = tape.sigmoid(scores)?;
        let w = tape.tile_cols(w, self.config.n)?;
        let weighted = tape.mul(h, w)?;
        tape.segment_reduce(weighted, batch.graph_id.clone(), batch.num_graphs, SegmentReduce::Sum)
    }

    /// Downstream MLP and output layer applied to pooled embeddings.
    pub fn predict(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        pooled: Var,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut x = pooled;
        for (phm, &p) in self.head.iter().zip(&self.config.downstream_dropout) {
            x = phm.forward(tape, bind, x)?;
            x = tape.relu(x)?;
            x = self.dropout(tape, x, p, mode, rng.as_deref_mut())?;
        }
        self.output.forward(tape, bind, x)
    }

    /// Full forward pass. In train mode, `rng` drives dropout; without it
    /// dropout is skipped.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        store: &ParamStore,
        batch: &GraphBatch,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ModelOutput> {
        self.check_batch(batch)?;
        let mut bn_updates = Vec::new();
        let h = self.embed(tape, bind, store, batch, mode, rng.as_deref_mut(), &mut bn_updates)?;
        let logits = match self.config.readout {
            Readout::Node => self.output.forward(tape, bind, h)?,
            Readout::Graph => {
                let pooled = self.pool(tape, bind, batch, h)?;
                self.predict(tape, bind, pooled, mode, rng)?
            }
        };
        Ok(ModelOutput { logits, bn_updates })
    }

    /// Eval-mode logits as a plain tensor.
    pub fn infer(&self, store: &ParamStore, batch: &GraphBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bind, store, batch, Mode::Eval, None)?;
        Ok(tape.value(out.logits).clone())
    }

    fn check_batch(&self, batch: &GraphBatch) -> Result<()> {
        if batch.node_level != (self.config.readout == Readout::Node) {
            return Err(Error::invalid("batch target level does not match the model readout"));
        }
        let fields = |cols: usize, want: usize, what: &str| {
            if cols == want {
                Ok(())
            } else {
                Err(Error::shape(format!("{what}: model expects {want} fields, batch has {cols}")))
            }
        };
        fields(batch.node_cat.len(), self.schema.node_vocab.len(), "categorical node features")?;
        fields(batch.node_cont.as_ref().map_or(0, |t| t.shape()[1]), self.schema.node_cont, "continuous node features")?;
        if batch.num_edges() > 0 {
            fields(batch.edge_cat.len(), self.schema.edge_vocab.len(), "categorical edge features")?;
            fields(batch.edge_cont.as_ref().map_or(0, |t| t.shape()[1]), self.schema.edge_cont, "continuous edge features")?;
        }
        Ok(())
    }
}
