//! Dense feed-forward networks with explicit reverse-mode gradients.
//!
//! An [`MlpSpec`] owns no weights; it names them inside a [`ParamSet`] via a
//! key prefix (`{prefix}.w{l}` / `{prefix}.b{l}`). Hidden layers use ELU,
//! the output layer is linear.

use ndarray::{Array2, Axis};
use rand::rngs::StdRng;
use rand::Rng;

use super::activations::elu;
use super::params::{GradientBundle, ParamSet};
use crate::error::{Error, Result};

/// Structure of one MLP: layer widths plus the parameter key prefix.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    prefix: String,
    dims: Vec<usize>,
}

/// Post-activation values kept from a forward pass, one per layer plus the
/// input itself. Enough to run the exact backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// `activations[0]` is the input; `activations[l+1]` is layer `l` output.
    pub activations: Vec<Array2<f64>>,
}

impl MlpSpec {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: &[usize], output: usize) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        Self {
            prefix: prefix.into(),
            dims,
        }
    }

    pub fn input_width(&self) -> usize {
        self.dims[0]
    }

    /// Layer widths, input first, output last.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn output_width(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weight_key(&self, layer: usize) -> String {
        format!("{}.w{layer}", self.prefix)
    }

    pub fn bias_key(&self, layer: usize) -> String {
        format!("{}.b{layer}", self.prefix)
    }

    /// Register weights drawn uniformly from ±sqrt(6 / (fan_in + fan_out))
    /// and zero biases.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut StdRng) {
        for l in 0..self.layer_count() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                rng.gen_range(-bound..bound)
            });
            params.insert(self.weight_key(l), w);
            params.insert(self.bias_key(l), Array2::zeros((1, fan_out)));
        }
    }

    /// Register all-zero weights and biases (identity-behaviour start for the
    /// calibrator).
    pub fn zero_params(&self, params: &mut ParamSet) {
        for l in 0..self.layer_count() {
            params.insert(self.weight_key(l), Array2::zeros((self.dims[l], self.dims[l + 1])));
            params.insert(self.bias_key(l), Array2::zeros((1, self.dims[l + 1])));
        }
    }

    /// Row-wise affine-then-ELU composition; the final layer is linear.
    pub fn forward(&self, params: &ParamSet, input: Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        if input.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "mlp '{}' expects input width {}, got {}",
                self.prefix,
                self.input_width(),
                input.ncols()
            )));
        }
        let layers = self.layer_count();
        let mut activations = Vec::with_capacity(layers + 1);
        activations.push(input);
        for l in 0..layers {
            let w = params.get(&self.weight_key(l))?;
            let b = params.get(&self.bias_key(l))?;
            let mut z = activations[l].dot(w);
            z += b;
            if l + 1 < layers {
                z.mapv_inplace(elu);
            }
            activations.push(z);
        }
        let output = activations.last().unwrap().clone();
        Ok((output, MlpCache { activations }))
    }

    /// Exact gradients of the forward composition. Parameter gradients are
    /// accumulated into `grads`; the return value is the gradient w.r.t. the
    /// input rows.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &MlpCache,
        upstream: &Array2<f64>,
        grads: &mut GradientBundle,
    ) -> Result<Array2<f64>> {
        let layers = self.layer_count();
        if cache.activations.len() != layers + 1 {
            return Err(Error::Shape(format!(
                "mlp '{}' cache has {} activations, expected {}",
                self.prefix,
                cache.activations.len(),
                layers + 1
            )));
        }
        if upstream.dim() != cache.activations[layers].dim() {
            return Err(Error::Shape(format!(
                "mlp '{}' upstream gradient shape {:?} does not match output {:?}",
                self.prefix,
                upstream.dim(),
                cache.activations[layers].dim()
            )));
        }
        let mut d_act = upstream.clone();
        for l in (0..layers).rev() {
            // Post-activation value a determines elu'(z): 1 for a >= 0, a + 1 below.
            let d_z = if l + 1 < layers {
                let a = &cache.activations[l + 1];
                let mut d = d_act;
                d.zip_mut_with(a, |g, &a| {
                    *g *= if a >= 0.0 { 1.0 } else { a + 1.0 };
                });
                d
            } else {
                d_act
            };
            let a_prev = &cache.activations[l];
            grads.accumulate(&self.weight_key(l), &a_prev.t().dot(&d_z));
            grads.accumulate(
                &self.bias_key(l),
                &d_z.sum_axis(Axis(0)).insert_axis(Axis(0)),
            );
            let w = params.get(&self.weight_key(l))?;
            d_act = d_z.dot(&w.t());
        }
        Ok(d_act)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn params_for(spec: &MlpSpec, seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        let mut rng = StdRng::seed_from_u64(seed);
        spec.init_params(&mut p, &mut rng);
        p
    }

    #[test]
    fn zero_net_maps_everything_to_zero() {
        let spec = MlpSpec::new("m", 3, &[4], 2);
        let mut p = ParamSet::new();
        spec.zero_params(&mut p);
        let input = array![[1.0, -2.0, 3.0], [0.0, 0.5, -0.5]];
        let (out, _) = spec.forward(&p, input).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_weight_passes_nonnegative_input_through() {
        let spec = MlpSpec::new("m", 2, &[], 2);
        let mut p = ParamSet::new();
        p.insert("m.w0", Array2::eye(2));
        p.insert("m.b0", Array2::zeros((1, 2)));
        let input = array![[0.3, 1.7]];
        let (out, _) = spec.forward(&p, input.clone()).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn hand_computed_one_hidden_layer() {
        // input (1,2), hidden ELU of width 2, linear scalar output.
        let spec = MlpSpec::new("m", 2, &[2], 1);
        let mut p = ParamSet::new();
        p.insert("m.w0", array![[0.1, -0.2], [0.3, 0.4]]);
        p.insert("m.b0", array![[0.5, -0.6]]);
        p.insert("m.w1", array![[1.0], [-1.0]]);
        p.insert("m.b1", array![[0.25]]);
        let (out, _) = spec.forward(&p, array![[1.0, 2.0]]).unwrap();
        // z0 = [1.2, 0.0] -> elu -> [1.2, 0.0]; out = 1.2 - 0.0 + 0.25.
        assert!((out[[0, 0]] - 1.45).abs() < 1e-15);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let spec = MlpSpec::new("m", 3, &[2], 1);
        let p = params_for(&spec, 1);
        let err = spec.forward(&p, Array2::zeros((2, 4))).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = MlpSpec::new("m", 3, &[4, 4], 2);
        let p = params_for(&spec, 7);
        let input = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let (out, cache) = spec.forward(&p, input).unwrap();
        let mut grads = GradientBundle::new();
        let d_in = spec
            .backward(&p, &cache, &Array2::zeros(out.raw_dim()), &mut grads)
            .unwrap();
        assert_eq!(grads.max_abs(), 0.0);
        assert!(d_in.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_one_by_one_input_gradient_is_weight_times_upstream() {
        let spec = MlpSpec::new("m", 1, &[], 1);
        let mut p = ParamSet::new();
        p.insert("m.w0", array![[2.5]]);
        p.insert("m.b0", array![[0.0]]);
        let (_, cache) = spec.forward(&p, array![[3.0]]).unwrap();
        let mut grads = GradientBundle::new();
        let d_in = spec
            .backward(&p, &cache, &array![[4.0]], &mut grads)
            .unwrap();
        assert_eq!(d_in[[0, 0]], 2.5 * 4.0);
    }

    /// Central finite differences of a scalar objective, the independent
    /// oracle for every analytic gradient in this module.
    fn finite_diff_check(spec: &MlpSpec, seed: u64, rows: usize) {
        let mut p = params_for(spec, seed);
        let input = Array2::from_shape_fn((rows, spec.input_width()), |(i, j)| {
            ((i * 31 + j * 17 + seed as usize) % 13) as f64 * 0.11 - 0.7
        });

        // Objective: sum of outputs.
        let (out, cache) = spec.forward(&p, input.clone()).unwrap();
        let mut grads = GradientBundle::new();
        let upstream = Array2::ones(out.raw_dim());
        spec.backward(&p, &cache, &upstream, &mut grads).unwrap();

        let h = 1e-5;
        let keys: Vec<String> = p.keys().map(str::to_string).collect();
        for key in keys {
            let shape = p.get(&key).unwrap().raw_dim();
            for r in 0..shape[0] {
                for c in 0..shape[1] {
                    let orig = p.get(&key).unwrap()[[r, c]];
                    p.get_mut(&key).unwrap()[[r, c]] = orig + h;
                    let (out_p, _) = spec.forward(&p, input.clone()).unwrap();
                    p.get_mut(&key).unwrap()[[r, c]] = orig - h;
                    let (out_m, _) = spec.forward(&p, input.clone()).unwrap();
                    p.get_mut(&key).unwrap()[[r, c]] = orig;
                    let fd = (out_p.sum() - out_m.sum()) / (2.0 * h);
                    let an = grads.get(&key).unwrap()[[r, c]];
                    let denom = fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        (fd - an).abs() / denom < 1e-4,
                        "grad mismatch at {key}[{r},{c}]: fd={fd}, analytic={an}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_diff_check(&MlpSpec::new("a", 2, &[3], 1), 11, 4);
        finite_diff_check(&MlpSpec::new("b", 4, &[8, 5], 2), 23, 6);
        finite_diff_check(&MlpSpec::new("c", 3, &[6, 6, 4], 1), 37, 5);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = MlpSpec::new("m", 5, &[7], 2);
        let p1 = params_for(&spec, 99);
        let p2 = params_for(&spec, 99);
        for (k, v) in p1.iter() {
            assert_eq!(v, p2.get(k).unwrap());
        }
    }
}
