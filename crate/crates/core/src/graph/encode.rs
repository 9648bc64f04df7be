use std::sync::Arc;

use rand::Rng;

use crate::algebra::keyed_rng;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::Dense;
use crate::params::{Bindings, ParamId, ParamRole, ParamStore};
use crate::tensor::Tensor;

/// Maps raw node or edge features to `width`-dimensional embeddings: one
/// lookup table per categorical field (summed) plus a dense encoder for
/// continuous features.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    width: usize,
    tables: Vec<ParamId>,
    dense: Option<Dense>,
}

impl FeatureEncoder {
    /// Returns `None` when there are no features to encode.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: &[usize],
        cont: usize,
        width: usize,
        seed: u64,
        layer: u64,
    ) -> Result<Option<FeatureEncoder>> {
        if vocab.is_empty() && cont == 0 {
            return Ok(None);
        }
        let mut tables = Vec::with_capacity(vocab.len());
        for (f, &size) in vocab.iter().enumerate() {
            if size == 0 {
                return Err(Error::invalid(format!("`{name}` field {f} has an empty vocabulary")));
            }
            let a = (6.0 / (size + width) as f64).sqrt();
            let mut rng = keyed_rng(seed, layer, (1 << 29) + f as u64);
            let data = (0..size * width).map(|_| rng.random_range(-a..a)).collect();
            tables.push(store.add(
                format!("{name}.table{f}"),
                Tensor::new(&[size, width], data)?,
                ParamRole::Embedding,
                true,
            )?);
        }
        let dense = if cont > 0 {
            Some(Dense::new(store, &format!("{name}.dense"), cont, width, seed, layer)?)
        } else {
            None
        };
        Ok(Some(FeatureEncoder { width, tables, dense }))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn table_ids(&self) -> &[ParamId] {
        &self.tables
    }

    pub fn dense(&self) -> Option<&Dense> {
        self.dense.as_ref()
    }

    /// `cat` holds one index column per field; `cont` is `rows × c`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        cat: &[Arc<[usize]>],
        cont: Option<&Tensor>,
        rows: usize,
    ) -> Result<Var> {
        if cat.len() != self.tables.len() {
            return Err(Error::shape(format!(
                "encoder has {} categorical fields, input has {}",
                self.tables.len(),
                cat.len()
            )));
        }
        let mut acc: Option<Var> = None;
        for (&table, idx) in self.tables.iter().zip(cat) {
            let rows_f = tape.gather(bind.var(table), idx.clone())?;
            acc = Some(match acc {
                None => rows_f,
                Some(a) => tape.add(a, rows_f)?,
            });
        }
        match (&self.dense, cont) {
            (Some(dense), Some(x)) => {
                let xv = tape.constant(x.clone());
                let y = dense.forward(tape, bind, xv)?;
                acc = Some(match acc {
                    None => y,
                    Some(a) => tape.add(a, y)?,
                });
            }
            (None, None) => {}
            _ => return Err(Error::shape("continuous features do not match the encoder")),
        }
        match acc {
            Some(v) => Ok(v),
            // only reachable for zero rows with no categorical fields
            None => Ok(tape.constant(Tensor::zeros(&[rows, self.width]))),
        }
    }
}
