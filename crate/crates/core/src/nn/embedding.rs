//! Per-field embedding tables for categorical features.
//!
//! Each field owns a `vocab x dim` matrix; a lookup concatenates the selected
//! rows across fields. The backward pass scatters gradients only into the
//! rows that were actually looked up, accumulating across repeats.

use ndarray::Array2;
use rand::rngs::StdRng;
use rand::Rng;

use super::params::{GradientBundle, ParamSet};
use crate::error::{Error, Result};

/// Structure of the embedding block: one table per categorical field.
#[derive(Debug, Clone)]
pub struct EmbeddingSpec {
    prefix: String,
    vocab_sizes: Vec<usize>,
    dim: usize,
}

impl EmbeddingSpec {
    pub fn new(prefix: impl Into<String>, vocab_sizes: Vec<usize>, dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            vocab_sizes,
            dim,
        }
    }

    pub fn num_fields(&self) -> usize {
        self.vocab_sizes.len()
    }

    /// Width of the concatenated output: `num_fields * dim`.
    pub fn output_width(&self) -> usize {
        self.vocab_sizes.len() * self.dim
    }

    pub fn table_key(&self, field: usize) -> String {
        format!("{}.f{field}", self.prefix)
    }

    /// Register tables drawn uniformly from ±0.01.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut StdRng) {
        for (f, &vocab) in self.vocab_sizes.iter().enumerate() {
            let t = Array2::from_shape_simple_fn((vocab, self.dim), || rng.gen_range(-0.01..0.01));
            params.insert(self.table_key(f), t);
        }
    }

    pub fn zero_params(&self, params: &mut ParamSet) {
        for (f, &vocab) in self.vocab_sizes.iter().enumerate() {
            params.insert(self.table_key(f), Array2::zeros((vocab, self.dim)));
        }
    }

    /// Gather and concatenate one row per field for each sample.
    /// `ids` is `n x num_fields`.
    pub fn forward(&self, params: &ParamSet, ids: &[Vec<usize>]) -> Result<Array2<f64>> {
        let n = ids.len();
        let mut out = Array2::zeros((n, self.output_width()));
        for (f, &vocab) in self.vocab_sizes.iter().enumerate() {
            let table = params.get(&self.table_key(f))?;
            for (i, row) in ids.iter().enumerate() {
                let id = *row.get(f).ok_or_else(|| {
                    Error::Shape(format!("sample has {} feature ids, field {f} missing", row.len()))
                })?;
                if id >= vocab {
                    return Err(Error::Domain(format!(
                        "embedding lookup: id {id} out of range for field {f} (vocabulary {vocab})"
                    )));
                }
                out.row_mut(i)
                    .slice_mut(ndarray::s![f * self.dim..(f + 1) * self.dim])
                    .assign(&table.row(id));
            }
        }
        Ok(out)
    }

    /// Scatter `upstream` (`n x output_width`) back into the looked-up rows.
    pub fn backward(
        &self,
        ids: &[Vec<usize>],
        upstream: &Array2<f64>,
        grads: &mut GradientBundle,
    ) -> Result<()> {
        if upstream.ncols() != self.output_width() || upstream.nrows() != ids.len() {
            return Err(Error::Shape(format!(
                "embedding backward: upstream {:?} does not match {} samples x width {}",
                upstream.dim(),
                ids.len(),
                self.output_width()
            )));
        }
        for (f, &vocab) in self.vocab_sizes.iter().enumerate() {
            let mut table_grad = Array2::zeros((vocab, self.dim));
            for (i, row) in ids.iter().enumerate() {
                let id = row[f];
                let mut dst = table_grad.row_mut(id);
                dst += &upstream
                    .row(i)
                    .slice(ndarray::s![f * self.dim..(f + 1) * self.dim]);
            }
            grads.accumulate(&self.table_key(f), &table_grad);
        }
        Ok(())
    }
}
