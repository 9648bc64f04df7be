use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::algebra::{assemble, init_contributions_for_layer, keyed_rng, AssembledWeight, ContributionInit, ContributionSet};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamRole, ParamStore};
use crate::tensor::Tensor;

/// Distribution for the component weight matrices `Wᵢ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightInit {
    /// `N(0, σ²)` with `σ = sqrt(2 / (n·(d + k)))` for the whole layer.
    PhcNormal,
    /// Glorot/Xavier uniform on each `Wᵢ` with its own fans `(d/n, k/n)`.
    Glorot,
    /// He normal on each `Wᵢ`: `σ = sqrt(2 / (d/n))`.
    He,
}

impl WeightInit {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightInit::PhcNormal => "phc-normal",
            WeightInit::Glorot => "glorot",
            WeightInit::He => "he",
        }
    }
}

impl fmt::Display for WeightInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phc-normal" => Ok(WeightInit::PhcNormal),
            "glorot" => Ok(WeightInit::Glorot),
            "he" => Ok(WeightInit::He),
            other => Err(Error::invalid(format!("unknown weight scheme `{other}`"))),
        }
    }
}

/// Standard deviation of the `phc-normal` scheme.
pub fn phc_normal_sigma(n: usize, k: usize, d: usize) -> f64 {
    (2.0 / (n as f64 * (d + k) as f64)).sqrt()
}

/// Shape and initialization of one PHM layer.
#[derive(Clone, Debug)]
pub struct PhmSpec {
    pub n: usize,
    /// output width
    pub k: usize,
    /// input width
    pub d: usize,
    pub bias: bool,
    pub weight_init: WeightInit,
    pub contribution_init: ContributionInit,
    pub freeze_contributions: bool,
}

/// Affine layer `y = U x + b` with `U = Σᵢ Cᵢ ⊗ Wᵢ`.
#[derive(Clone, Debug)]
pub struct PhmLinear {
    n: usize,
    k: usize,
    d: usize,
    contributions: ParamId,
    weights: ParamId,
    bias: Option<ParamId>,
}

impl PhmLinear {
    /// Registers the layer's tensors in `store` under `name.*`.
    /// `layer` keys the random streams so each layer draws independently.
    pub fn new(store: &mut ParamStore, name: &str, spec: &PhmSpec, seed: u64, layer: u64) -> Result<Self> {
        let PhmSpec { n, k, d, .. } = *spec;
        if n == 0 || k % n != 0 || d % n != 0 || k == 0 || d == 0 {
            return Err(Error::invalid(format!(
                "PHM layer `{name}`: widths k={k}, d={d} must be positive multiples of n={n}"
            )));
        }
        let contributions = init_contributions_for_layer(n, spec.contribution_init, seed, layer)?;
        let (r, c) = (k / n, d / n);
        // Contribution streams use indices < n; weights take a disjoint range.
        let mut rng = keyed_rng(seed, layer, 1 << 31);
        let sample: Vec<f64> = match spec.weight_init {
            WeightInit::PhcNormal => {
                let normal = Normal::new(0.0, phc_normal_sigma(n, k, d)).expect("positive sigma");
                (0..n * r * c).map(|_| normal.sample(&mut rng)).collect()
            }
            WeightInit::Glorot => {
                let a = (6.0 / (r + c) as f64).sqrt();
                (0..n * r * c).map(|_| rng.random_range(-a..a)).collect()
            }
            WeightInit::He => {
                let normal = Normal::new(0.0, (2.0 / c as f64).sqrt()).expect("positive sigma");
                (0..n * r * c).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        let weights = store.add(
            format!("{name}.weight"),
            Tensor::new(&[n, r, c], sample)?,
            ParamRole::PhmWeight,
            true,
        )?;
        let contributions = store.add(
            format!("{name}.contrib"),
            contributions.stacked(),
            ParamRole::Contribution,
            !spec.freeze_contributions,
        )?;
        let bias = if spec.bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[k]), ParamRole::Bias, true)?)
        } else {
            None
        };
        Ok(PhmLinear {
            n,
            k,
            d,
            contributions,
            weights,
            bias,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn out_width(&self) -> usize {
        self.k
    }

    pub fn in_width(&self) -> usize {
        self.d
    }

    pub fn contributions_id(&self) -> ParamId {
        self.contributions
    }

    pub fn weights_id(&self) -> ParamId {
        self.weights
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn contributions(&self, store: &ParamStore) -> Result<ContributionSet> {
        ContributionSet::from_stacked(store.value(self.contributions))
    }

    pub fn component_weights(&self, store: &ParamStore) -> Result<Vec<Tensor>> {
        let w = store.value(self.weights);
        (0..self.n).map(|i| w.select(i)).collect()
    }

    pub fn assembled(&self, store: &ParamStore) -> Result<AssembledWeight> {
        assemble(&self.contributions(store)?, &self.component_weights(store)?)
    }

    /// Stored scalars: contributions, component weights, bias.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.value(self.contributions).numel()
            + store.value(self.weights).numel()
            + self.bias.map_or(0, |b| store.value(b).numel())
    }

    /// `U` recorded on the tape, differentiable in every `Cᵢ` and `Wᵢ`.
    pub fn assemble_on(&self, tape: &mut Tape, bind: &Bindings) -> Result<Var> {
        let c = bind.var(self.contributions);
        let w = bind.var(self.weights);
        let mut u: Option<Var> = None;
        for i in 0..self.n {
            let ci = tape.select(c, i)?;
            let wi = tape.select(w, i)?;
            let term = tape.kron(ci, wi)?;
            u = Some(match u {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        Ok(u.expect("n >= 1"))
    }

    /// Applies the layer to the rows of `x` (`b × d`), giving `b × k`.
    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<Var> {
        let (_, width) = tape.value(x).dims2()?;
        if width != self.d {
            return Err(Error::shape(format!(
                "PHM layer expects width {}, got {width}",
                self.d
            )));
        }
        let u = self.assemble_on(tape, bind)?;
        let ut = tape.transpose(u)?;
        let y = tape.matmul(x, ut)?;
        match self.bias {
            Some(b) => tape.add_row_vec(y, bind.var(b)),
            None => Ok(y),
        }
    }
}

/// A standalone PHM layer with bias in its own store.
pub fn init_phm(
    n: usize,
    k: usize,
    d: usize,
    weight_init: WeightInit,
    contribution_init: ContributionInit,
    seed: u64,
) -> Result<(ParamStore, PhmLinear)> {
    let mut store = ParamStore::new();
    let layer = PhmLinear::new(
        &mut store,
        "phm",
        &PhmSpec {
            n,
            k,
            d,
            bias: true,
            weight_init,
            contribution_init,
            freeze_contributions: false,
        },
        seed,
        0,
    )?;
    Ok((store, layer))
}
