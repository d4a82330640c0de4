//! The monotonic calibrator: a strictly positive derivative network
//! integrated over [0, logit(s)] with a fixed Clenshaw–Curtis rule, plus a
//! feature-dependent rescaling head, and the exact backward pass for all of
//! it.
//!
//! Forward, per sample with score `s` and features `x`:
//!
//! ```text
//! h(t, x)  = 1 + ELU(MLP_h([t; x]))            (> 0 for all finite inputs)
//! U(s, x)  = integral_0^{logit(s)} h(t, x) dt + beta
//! s'       = sigmoid(e^{w(x)} * U(s, x) + b(x))
//! ```
//!
//! `w` and `b` are two scalar heads of a shared rescaling MLP trunk. With
//! rescaling disabled `s' = sigmoid(U)`; with features disabled both
//! networks see a fixed zero vector in place of the embeddings.
//!
//! Gradients are taken by differentiating under the integral at the same
//! quadrature nodes as the forward pass, so the analytic gradients are the
//! exact gradients of the discretized forward. The gradient w.r.t. the raw
//! score is available for diagnostics but is never propagated: the upstream
//! ranking model is frozen.

use ndarray::{s, Array2, Axis};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, Dataset, FieldSchema};
use crate::error::{Error, Result};
use crate::nn::activations::{logit_deriv, logit_unchecked, one_plus_elu, sigmoid};
use crate::nn::{EmbeddingSpec, GradientBundle, MlpCache, MlpSpec, ParamSet};
use crate::quadrature::QuadratureRule;

/// Parameter key of the scalar integration offset.
pub const BETA_KEY: &str = "beta";

/// Rows processed per internal chunk. Keeps transient activation buffers
/// small regardless of batch size.
const CHUNK_ROWS: usize = 512;

/// Pre-sigmoid values pass through unchanged up to this magnitude.
const PRE_SIGMOID_LINEAR: f64 = 30.0;
/// Scale of the saturating tail; caps |z| below 36, where f64 sigmoid still
/// returns values strictly inside (0, 1).
const PRE_SIGMOID_TAIL: f64 = 6.0;

/// Soft cap on the pre-sigmoid value: identity on [-30, 30], a strictly
/// increasing tanh tail beyond, bounded by ±36. Keeps every output strictly
/// inside (0, 1) in floating point for any parameter values, without
/// touching the operating range (|logit| <= ~13.8 for clamped scores).
#[inline]
fn soft_cap(z: f64) -> f64 {
    if z.abs() <= PRE_SIGMOID_LINEAR {
        z
    } else {
        let excess = (z.abs() - PRE_SIGMOID_LINEAR) / PRE_SIGMOID_TAIL;
        (PRE_SIGMOID_LINEAR + PRE_SIGMOID_TAIL * excess.tanh()).copysign(z)
    }
}

/// Slope of [`soft_cap`] recovered from the capped value:
/// `1 - tanh^2 = 1 - ((|zc| - 30) / 6)^2` in the tail.
#[inline]
fn soft_cap_slope(capped: f64) -> f64 {
    if capped.abs() <= PRE_SIGMOID_LINEAR {
        1.0
    } else {
        let t = (capped.abs() - PRE_SIGMOID_LINEAR) / PRE_SIGMOID_TAIL;
        1.0 - t * t
    }
}

/// Structural hyper-parameters of the calibrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorConfig {
    /// Embedding width per categorical field.
    pub embed_dim: usize,
    /// Hidden widths of the derivative network.
    pub hnet_hidden: Vec<usize>,
    /// Hidden widths of the rescaling trunk.
    pub rescale_hidden: Vec<usize>,
    /// Clenshaw–Curtis node count.
    pub quadrature_steps: usize,
    /// Score clamp applied at ingestion; scores must lie in [eps, 1 - eps].
    pub clamp_eps: f64,
    /// Apply the `e^{w(x)} U + b(x)` head before the sigmoid.
    pub use_rescaling: bool,
    /// Feed embeddings to both networks; when false they see zeros.
    pub use_features: bool,
}

impl Default for CalibratorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hnet_hidden: vec![50, 50],
            rescale_hidden: vec![200, 200],
            quadrature_steps: 50,
            clamp_eps: 1e-6,
            use_rescaling: true,
            use_features: true,
        }
    }
}

/// All learnable state plus structural config of the monotonic calibrator.
#[derive(Debug, Clone)]
pub struct UmnnCalibrator {
    config: CalibratorConfig,
    schema: FieldSchema,
    embedding: EmbeddingSpec,
    hnet: MlpSpec,
    rescale: MlpSpec,
    rule: QuadratureRule,
    params: ParamSet,
}

/// Everything the backward pass needs from one `calibrate_batch` call.
/// Derivative-net hidden activations are deliberately not retained; the
/// backward pass recomputes them chunk-by-chunk from the stored node
/// positions and embeddings, trading a partial forward re-evaluation for a
/// flat memory profile at large batch sizes.
#[derive(Debug)]
pub struct ForwardCache {
    params_version: u64,
    n_rows: usize,
    chunks: Vec<ChunkCache>,
}

#[derive(Debug)]
struct ChunkCache {
    features: Vec<Vec<usize>>,
    x_embed: Array2<f64>,
    /// logit(s) per row: the upper integration limit.
    limits: Vec<f64>,
    /// Quadrature node positions, `rows x T`.
    node_t: Array2<f64>,
    /// Derivative-net values at the nodes, `rows x T`.
    h_vals: Array2<f64>,
    /// Integral value including the offset, per row.
    u_vals: Vec<f64>,
    w_vals: Vec<f64>,
    b_vals: Vec<f64>,
    rescale_cache: Option<MlpCache>,
    /// Pre-sigmoid value per row.
    z_vals: Vec<f64>,
    s_prime: Vec<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.n_rows
    }

    pub fn is_empty(&self) -> bool {
        self.n_rows == 0
    }

    /// Calibrated outputs stored by the forward pass.
    pub fn outputs(&self) -> Vec<f64> {
        self.chunks
            .iter()
            .flat_map(|c| c.s_prime.iter().copied())
            .collect()
    }

    /// Pre-sigmoid values per row.
    pub fn pre_sigmoid(&self) -> Vec<f64> {
        self.chunks
            .iter()
            .flat_map(|c| c.z_vals.iter().copied())
            .collect()
    }

    /// Rescaling head outputs `(w, b)` per row; zeros when rescaling is off.
    pub fn rescale_heads(&self) -> (Vec<f64>, Vec<f64>) {
        let w = self
            .chunks
            .iter()
            .flat_map(|c| c.w_vals.iter().copied())
            .collect();
        let b = self
            .chunks
            .iter()
            .flat_map(|c| c.b_vals.iter().copied())
            .collect();
        (w, b)
    }
}

impl UmnnCalibrator {
    fn build(schema: FieldSchema, config: CalibratorConfig) -> Result<Self> {
        if config.embed_dim < 1 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        if !(config.clamp_eps > 0.0 && config.clamp_eps < 0.5) {
            return Err(Error::Config(format!(
                "clamp_eps must lie in (0, 0.5), got {}",
                config.clamp_eps
            )));
        }
        let rule = QuadratureRule::clenshaw_curtis(config.quadrature_steps)?;
        let embedding = EmbeddingSpec::new("embed", schema.vocab_sizes(), config.embed_dim);
        let embed_width = embedding.output_width();
        let hnet = MlpSpec::new("hnet", 1 + embed_width, &config.hnet_hidden, 1);
        let rescale = MlpSpec::new("rescale", embed_width, &config.rescale_hidden, 2);
        Ok(Self {
            config,
            schema,
            embedding,
            hnet,
            rescale,
            rule,
            params: ParamSet::new(),
        })
    }

    /// Calibrator with seeded random initialization.
    pub fn seeded(schema: FieldSchema, config: CalibratorConfig, seed: u64) -> Result<Self> {
        let mut cal = Self::build(schema, config)?;
        let mut rng = StdRng::seed_from_u64(seed);
        cal.embedding.init_params(&mut cal.params, &mut rng);
        cal.hnet.init_params(&mut cal.params, &mut rng);
        if cal.config.use_rescaling {
            cal.rescale.init_params(&mut cal.params, &mut rng);
        }
        cal.params.insert(BETA_KEY, Array2::zeros((1, 1)));
        Ok(cal)
    }

    /// Calibrator with every weight, bias, and the offset at zero: an exact
    /// identity mapping.
    pub fn zeroed(schema: FieldSchema, config: CalibratorConfig) -> Result<Self> {
        let mut cal = Self::build(schema, config)?;
        cal.embedding.zero_params(&mut cal.params);
        cal.hnet.zero_params(&mut cal.params);
        if cal.config.use_rescaling {
            cal.rescale.zero_params(&mut cal.params);
        }
        cal.params.insert(BETA_KEY, Array2::zeros((1, 1)));
        Ok(cal)
    }

    /// Rebuild from checkpointed structure plus parameters.
    pub fn from_parts(
        schema: FieldSchema,
        config: CalibratorConfig,
        params: ParamSet,
    ) -> Result<Self> {
        let mut cal = Self::build(schema, config)?;
        cal.params = params;
        cal.params.get(BETA_KEY)?;
        for l in 0..cal.hnet.dims().len() - 1 {
            cal.params.get(&cal.hnet.weight_key(l))?;
        }
        Ok(cal)
    }

    pub fn config(&self) -> &CalibratorConfig {
        &self.config
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Swap in a parameter snapshot (e.g. the best checkpoint found during
    /// training). Invalidates outstanding forward caches.
    pub fn set_params(&mut self, params: ParamSet) {
        let old_version = self.params.version();
        self.params = params;
        while self.params.version() <= old_version {
            self.params.bump_version();
        }
    }

    pub fn quadrature_rule(&self) -> &QuadratureRule {
        &self.rule
    }

    fn embed_width(&self) -> usize {
        self.embedding.output_width()
    }

    fn embed_chunk(&self, features: &[Vec<usize>]) -> Result<Array2<f64>> {
        if self.config.use_features {
            self.embedding.forward(&self.params, features)
        } else {
            Ok(Array2::zeros((features.len(), self.embed_width())))
        }
    }

    /// Derivative network `h(t, x) = 1 + ELU(MLP([t; x])) > 0`, one value per
    /// row of `(t, features)`.
    pub fn derivative_net(&self, t: &[f64], features: &[Vec<usize>]) -> Result<Vec<f64>> {
        if t.len() != features.len() {
            return Err(Error::Shape(format!(
                "derivative_net: {} t values vs {} feature rows",
                t.len(),
                features.len()
            )));
        }
        let x_embed = self.embed_chunk(features)?;
        let node_t = Array2::from_shape_vec((t.len(), 1), t.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (h, _) = self.hnet_nodes_forward(&x_embed, &node_t)?;
        Ok(h)
    }

    /// `U(s, x)`: the quadrature integral of `h` over [0, logit(s)] plus the
    /// offset, one value per row.
    pub fn umnn_integral(&self, scores: &[f64], features: &[Vec<usize>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(scores.len());
        for (sc, fc) in chunk_pairs(scores, features, CHUNK_ROWS) {
            let chunk = self.forward_chunk(sc, fc, false)?;
            out.extend(chunk.u_vals);
        }
        Ok(out)
    }

    /// Calibrate one mini-batch, returning the outputs and the cache needed
    /// by [`calibrate_backward`](Self::calibrate_backward).
    pub fn calibrate_batch(
        &self,
        dataset: &Dataset,
        batch: &Batch,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let scores = batch.scores(dataset);
        let features = batch.features(dataset);
        self.calibrate_rows(&scores, &features)
    }

    /// Calibrate raw (score, features) rows with cache retention.
    pub fn calibrate_rows(
        &self,
        scores: &[f64],
        features: &[Vec<usize>],
    ) -> Result<(Vec<f64>, ForwardCache)> {
        if scores.len() != features.len() {
            return Err(Error::Shape(format!(
                "calibrate: {} scores vs {} feature rows",
                scores.len(),
                features.len()
            )));
        }
        let mut chunks = Vec::new();
        let mut outputs = Vec::with_capacity(scores.len());
        for (sc, fc) in chunk_pairs(scores, features, CHUNK_ROWS) {
            let chunk = self.forward_chunk(sc, fc, true)?;
            outputs.extend_from_slice(&chunk.s_prime);
            chunks.push(chunk);
        }
        Ok((
            outputs,
            ForwardCache {
                params_version: self.params.version(),
                n_rows: scores.len(),
                chunks,
            },
        ))
    }

    /// Inference-only path: no cache survives the call.
    pub fn calibrate_scores(&self, scores: &[f64], features: &[Vec<usize>]) -> Result<Vec<f64>> {
        if scores.len() != features.len() {
            return Err(Error::Shape(format!(
                "calibrate: {} scores vs {} feature rows",
                scores.len(),
                features.len()
            )));
        }
        let mut outputs = Vec::with_capacity(scores.len());
        for (sc, fc) in chunk_pairs(scores, features, CHUNK_ROWS) {
            let chunk = self.forward_chunk(sc, fc, false)?;
            outputs.extend(chunk.s_prime);
        }
        Ok(outputs)
    }

    /// Apply the calibrator to a whole dataset in row order.
    pub fn calibrate_dataset(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        let scores = dataset.scores();
        let features: Vec<Vec<usize>> = dataset
            .samples()
            .iter()
            .map(|s| s.features.clone())
            .collect();
        self.calibrate_scores(&scores, &features)
    }

    /// Exact parameter gradients given `d loss / d s'` per row. Gradients of
    /// the integral's parameters are the quadrature sum applied to
    /// `dh/dtheta` at the forward nodes (differentiation under the
    /// integral). The raw score receives no gradient.
    pub fn calibrate_backward(
        &self,
        cache: &ForwardCache,
        grad_s_prime: &[f64],
    ) -> Result<GradientBundle> {
        if cache.params_version != self.params.version() {
            return Err(Error::Contract(
                "forward cache is stale: parameters changed since calibrate_batch".into(),
            ));
        }
        if grad_s_prime.len() != cache.n_rows {
            return Err(Error::Shape(format!(
                "backward: {} upstream gradients vs {} cached rows",
                grad_s_prime.len(),
                cache.n_rows
            )));
        }
        let mut grads = GradientBundle::new();
        let mut offset = 0usize;
        for chunk in &cache.chunks {
            let rows = chunk.s_prime.len();
            self.backward_chunk(chunk, &grad_s_prime[offset..offset + rows], &mut grads)?;
            offset += rows;
        }
        Ok(grads)
    }

    /// Analytic `d s' / d s` at one sample: the chain
    /// `sigmoid'(z) * e^{w(x)} * h(logit(s), x) * logit'(s)`.
    pub fn score_derivative(&self, score: f64, features: &[usize]) -> Result<f64> {
        let feats = vec![features.to_vec()];
        let chunk = self.forward_chunk(&[score], &feats, false)?;
        let h = self.derivative_net(&[chunk.limits[0]], &feats)?[0];
        let sp = chunk.s_prime[0];
        let scale = if self.config.use_rescaling {
            chunk.w_vals[0].exp()
        } else {
            1.0
        };
        let cap = soft_cap_slope(chunk.z_vals[0]);
        Ok(sp * (1.0 - sp) * cap * scale * h * logit_deriv(score))
    }

    /// Forward pass over one chunk of rows.
    fn forward_chunk(
        &self,
        scores: &[f64],
        features: &[Vec<usize>],
        keep_features: bool,
    ) -> Result<ChunkCache> {
        let n = scores.len();
        let t_nodes = self.rule.len();
        let eps = self.config.clamp_eps;
        for &s in scores {
            if !(s >= eps && s <= 1.0 - eps) {
                return Err(Error::Domain(format!(
                    "score {s} outside clamp range [{eps}, {}]",
                    1.0 - eps
                )));
            }
        }
        let x_embed = self.embed_chunk(features)?;

        let limits: Vec<f64> = scores.iter().map(|&s| logit_unchecked(s)).collect();
        let mut node_t = Array2::zeros((n, t_nodes));
        for i in 0..n {
            let half = 0.5 * limits[i];
            for (j, &x) in self.rule.nodes().iter().enumerate() {
                node_t[[i, j]] = half * (x + 1.0);
            }
        }

        let (h_flat, _) = self.hnet_nodes_forward(&x_embed, &node_t)?;
        let h_vals = Array2::from_shape_vec((n, t_nodes), h_flat)
            .map_err(|e| Error::Shape(e.to_string()))?;

        let beta = self.params.get(BETA_KEY)?[[0, 0]];
        let weights = self.rule.weights();
        let mut u_vals = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..t_nodes {
                acc += weights[j] * h_vals[[i, j]];
            }
            u_vals.push(0.5 * limits[i] * acc + beta);
        }
        if u_vals.iter().any(|u| !u.is_finite()) {
            return Err(Error::Numeric {
                stage: "umnn_integral".into(),
                msg: "non-finite integral value".into(),
            });
        }

        let (w_vals, b_vals, rescale_cache) = if self.config.use_rescaling {
            let (out, rc) = self.rescale.forward(&self.params, x_embed.clone())?;
            let w: Vec<f64> = out.column(0).to_vec();
            let b: Vec<f64> = out.column(1).to_vec();
            (w, b, Some(rc))
        } else {
            (vec![0.0; n], vec![0.0; n], None)
        };

        let mut z_vals = Vec::with_capacity(n);
        let mut s_prime = Vec::with_capacity(n);
        for i in 0..n {
            let z = if self.config.use_rescaling {
                w_vals[i].exp() * u_vals[i] + b_vals[i]
            } else {
                u_vals[i]
            };
            if !z.is_finite() {
                return Err(Error::Numeric {
                    stage: "rescale".into(),
                    msg: format!("non-finite pre-sigmoid value at row {i}"),
                });
            }
            let zc = soft_cap(z);
            z_vals.push(zc);
            s_prime.push(sigmoid(zc));
        }

        Ok(ChunkCache {
            features: if keep_features {
                features.to_vec()
            } else {
                Vec::new()
            },
            x_embed,
            limits,
            node_t,
            h_vals,
            u_vals,
            w_vals,
            b_vals,
            rescale_cache,
            z_vals,
            s_prime,
        })
    }

    /// Derivative-net evaluation at per-row node positions.
    ///
    /// The first affine layer is split so the feature contribution is
    /// computed once per row and reused across all node positions of that
    /// row. Returns flat `h` values (row-major, rows x nodes) and the hidden
    /// post-activations needed by the backward pass.
    fn hnet_nodes_forward(
        &self,
        x_embed: &Array2<f64>,
        node_t: &Array2<f64>,
    ) -> Result<(Vec<f64>, Vec<Array2<f64>>)> {
        let n = node_t.nrows();
        let t_nodes = node_t.ncols();
        let dims = self.hnet.dims();
        let layers = dims.len() - 1;

        let w0 = self.params.get(&self.hnet.weight_key(0))?;
        let b0 = self.params.get(&self.hnet.bias_key(0))?;
        let h0 = dims[1];
        let w_t = w0.row(0);
        let w_x = w0.slice(s![1.., ..]);
        // Feature contribution to the first layer, shared across nodes.
        let mut xpart = x_embed.dot(&w_x);
        xpart += b0;

        let last_is_hidden = layers > 1;
        let mut act = Array2::zeros((n * t_nodes, h0));
        for i in 0..n {
            let xrow = xpart.row(i);
            for j in 0..t_nodes {
                let t = node_t[[i, j]];
                let mut out = act.row_mut(i * t_nodes + j);
                for k in 0..h0 {
                    let z = t * w_t[k] + xrow[k];
                    out[k] = if last_is_hidden {
                        if z >= 0.0 {
                            z
                        } else {
                            z.exp_m1()
                        }
                    } else {
                        z
                    };
                }
            }
        }

        let mut acts = vec![act];
        for l in 1..layers {
            let w = self.params.get(&self.hnet.weight_key(l))?;
            let b = self.params.get(&self.hnet.bias_key(l))?;
            let mut z = acts.last().unwrap().dot(w);
            z += b;
            if l + 1 < layers {
                z.mapv_inplace(|v| if v >= 0.0 { v } else { v.exp_m1() });
            }
            acts.push(z);
        }

        // The last entry of `acts` is the linear output; h applies 1 + ELU.
        let h: Vec<f64> = acts
            .last()
            .unwrap()
            .column(0)
            .iter()
            .map(|&z| one_plus_elu(z))
            .collect();
        acts.pop();
        Ok((h, acts))
    }

    /// Backward over one chunk, accumulating into `grads`.
    fn backward_chunk(
        &self,
        chunk: &ChunkCache,
        grad_s_prime: &[f64],
        grads: &mut GradientBundle,
    ) -> Result<()> {
        let n = chunk.s_prime.len();
        let t_nodes = self.rule.len();
        let weights = self.rule.weights();

        // Through the sigmoid and the pre-sigmoid soft cap.
        let dz: Vec<f64> = (0..n)
            .map(|i| {
                grad_s_prime[i]
                    * chunk.s_prime[i]
                    * (1.0 - chunk.s_prime[i])
                    * soft_cap_slope(chunk.z_vals[i])
            })
            .collect();

        // Through the rescaling head.
        let mut d_xembed = Array2::zeros(chunk.x_embed.raw_dim());
        let d_u: Vec<f64> = if self.config.use_rescaling {
            let cache = chunk
                .rescale_cache
                .as_ref()
                .ok_or_else(|| Error::Contract("rescale cache missing from forward chunk".into()))?;
            let mut upstream = Array2::zeros((n, 2));
            let mut du = Vec::with_capacity(n);
            for i in 0..n {
                let ew = chunk.w_vals[i].exp();
                du.push(dz[i] * ew);
                upstream[[i, 0]] = dz[i] * ew * chunk.u_vals[i];
                upstream[[i, 1]] = dz[i];
            }
            let d_in = self.rescale.backward(&self.params, cache, &upstream, grads)?;
            d_xembed += &d_in;
            du
        } else {
            dz
        };

        // Offset: dU/dbeta = 1 per row.
        let beta_grad: f64 = d_u.iter().sum();
        grads.accumulate(BETA_KEY, &ndarray::array![[beta_grad]]);

        // Through the quadrature sum: dh[i, j] = dU_i * (limit_i / 2) * w_j.
        let mut d_h = Array2::zeros((n, t_nodes));
        for i in 0..n {
            let scale = 0.5 * chunk.limits[i] * d_u[i];
            for j in 0..t_nodes {
                d_h[[i, j]] = scale * weights[j];
            }
        }

        self.hnet_nodes_backward(chunk, &d_h, &mut d_xembed, grads)?;

        if self.config.use_features {
            self.embedding.backward(&chunk.features, &d_xembed, grads)?;
        }
        Ok(())
    }

    /// Backward through the derivative network, recomputing this chunk's
    /// hidden activations first.
    fn hnet_nodes_backward(
        &self,
        chunk: &ChunkCache,
        d_h: &Array2<f64>,
        d_xembed: &mut Array2<f64>,
        grads: &mut GradientBundle,
    ) -> Result<()> {
        let n = chunk.node_t.nrows();
        let t_nodes = chunk.node_t.ncols();
        let dims = self.hnet.dims();
        let layers = dims.len() - 1;

        let (_, acts) = self.hnet_nodes_forward(&chunk.x_embed, &chunk.node_t)?;

        // d(linear output): 1 + ELU has slope 1 where h >= 1, slope h below.
        let mut d_act = Array2::zeros((n * t_nodes, 1));
        for i in 0..n {
            for j in 0..t_nodes {
                let h = chunk.h_vals[[i, j]];
                let slope = if h >= 1.0 { 1.0 } else { h };
                d_act[[i * t_nodes + j, 0]] = d_h[[i, j]] * slope;
            }
        }

        // Matmul layers from the output down to layer 1. acts[l] is the
        // post-activation input of layer l+1 (acts has `layers - 1` entries).
        for l in (1..layers).rev() {
            let d_z = if l + 1 < layers {
                let a = &acts[l];
                let mut d = d_act;
                d.zip_mut_with(a, |g, &av| {
                    *g *= if av >= 0.0 { 1.0 } else { av + 1.0 };
                });
                d
            } else {
                d_act
            };
            grads.accumulate(&self.hnet.weight_key(l), &acts[l - 1].t().dot(&d_z));
            grads.accumulate(
                &self.hnet.bias_key(l),
                &d_z.sum_axis(Axis(0)).insert_axis(Axis(0)),
            );
            let w = self.params.get(&self.hnet.weight_key(l))?;
            d_act = d_z.dot(&w.t());
        }

        // First layer with the [t; x] split undone.
        let h0 = dims[1];
        let mut d_z0 = d_act;
        if layers > 1 {
            let a0 = &acts[0];
            d_z0.zip_mut_with(a0, |g, &av| {
                *g *= if av >= 0.0 { 1.0 } else { av + 1.0 };
            });
        }
        let mut db0 = vec![0.0; h0];
        let mut dw0_t = vec![0.0; h0];
        let mut node_sums = Array2::zeros((n, h0));
        for i in 0..n {
            for j in 0..t_nodes {
                let t = chunk.node_t[[i, j]];
                let row = d_z0.row(i * t_nodes + j);
                let mut sums = node_sums.row_mut(i);
                for k in 0..h0 {
                    let g = row[k];
                    db0[k] += g;
                    dw0_t[k] += t * g;
                    sums[k] += g;
                }
            }
        }
        let w0 = self.params.get(&self.hnet.weight_key(0))?;
        let w_x = w0.slice(s![1.., ..]);
        let dw0_x = chunk.x_embed.t().dot(&node_sums);
        let embed_width = self.embed_width();
        let mut dw0 = Array2::zeros((1 + embed_width, h0));
        for k in 0..h0 {
            dw0[[0, k]] = dw0_t[k];
        }
        dw0.slice_mut(s![1.., ..]).assign(&dw0_x);
        grads.accumulate(&self.hnet.weight_key(0), &dw0);
        grads.accumulate(
            &self.hnet.bias_key(0),
            &Array2::from_shape_vec((1, h0), db0).map_err(|e| Error::Shape(e.to_string()))?,
        );
        *d_xembed += &node_sums.dot(&w_x.t());
        Ok(())
    }
}

/// Split parallel slices into fixed-size chunks.
fn chunk_pairs<'a>(
    scores: &'a [f64],
    features: &'a [Vec<usize>],
    size: usize,
) -> impl Iterator<Item = (&'a [f64], &'a [Vec<usize>])> {
    scores.chunks(size).zip(features.chunks(size))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema2() -> FieldSchema {
        FieldSchema::new(vec![("a".into(), 4), ("b".into(), 3)]).unwrap()
    }

    fn small_config() -> CalibratorConfig {
        CalibratorConfig {
            embed_dim: 3,
            hnet_hidden: vec![6, 5],
            rescale_hidden: vec![7],
            quadrature_steps: 12,
            clamp_eps: 1e-6,
            use_rescaling: true,
            use_features: true,
        }
    }

    #[test]
    fn zero_init_h_is_one_everywhere() {
        let cal = UmnnCalibrator::zeroed(schema2(), small_config()).unwrap();
        let t = vec![-3.0, 0.0, 2.5];
        let feats = vec![vec![0, 0], vec![1, 2], vec![3, 1]];
        let h = cal.derivative_net(&t, &feats).unwrap();
        for v in h {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn forced_negative_output_keeps_h_positive() {
        let mut cal = UmnnCalibrator::zeroed(schema2(), small_config()).unwrap();
        cal.params_mut().get_mut("hnet.b2").unwrap()[[0, 0]] = -1e6;
        let h = cal.derivative_net(&[0.3], &[vec![0, 0]]).unwrap()[0];
        assert!(h > 0.0);
    }

    #[test]
    fn hand_set_single_layer_derivative_net() {
        // No hidden layers: h = 1 + ELU(w_t t + w_x . x + b).
        let config = CalibratorConfig {
            embed_dim: 1,
            hnet_hidden: vec![],
            rescale_hidden: vec![],
            quadrature_steps: 4,
            clamp_eps: 1e-6,
            use_rescaling: false,
            use_features: true,
        };
        let schema = FieldSchema::new(vec![("a".into(), 2), ("b".into(), 2)]).unwrap();
        let mut cal = UmnnCalibrator::zeroed(schema, config).unwrap();
        cal.params_mut().get_mut("hnet.w0").unwrap()[[0, 0]] = 0.5; // t weight
        cal.params_mut().get_mut("hnet.w0").unwrap()[[1, 0]] = 2.0; // first embed dim
        cal.params_mut().get_mut("hnet.b0").unwrap()[[0, 0]] = 0.1;
        cal.params_mut().get_mut("embed.f0").unwrap()[[1, 0]] = 0.3;
        // t = 1, features (1, 0): z = 0.5 + 2.0 * 0.3 + 0.1 = 1.2 -> h = 2.2.
        let h = cal.derivative_net(&[1.0], &[vec![1, 0]]).unwrap()[0];
        assert!((h - 2.2).abs() < 1e-12);
    }

    #[test]
    fn zero_init_integral_is_logit() {
        let cal = UmnnCalibrator::zeroed(schema2(), small_config()).unwrap();
        let feats = vec![vec![0, 0], vec![2, 1], vec![3, 2]];
        let scores = vec![0.5, 0.12, 0.987];
        let u = cal.umnn_integral(&scores, &feats).unwrap();
        assert_eq!(u[0], 0.0);
        for (ui, si) in u.iter().zip(&scores) {
            assert!((ui - logit_unchecked(*si)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_init_calibrator_is_identity() {
        let cal = UmnnCalibrator::zeroed(schema2(), small_config()).unwrap();
        let scores = vec![1e-6, 0.01, 0.3, 0.5, 0.77, 1.0 - 1e-6];
        let feats = vec![vec![1, 1]; scores.len()];
        let (out, _) = cal.calibrate_rows(&scores, &feats).unwrap();
        for (o, s) in out.iter().zip(&scores) {
            assert!((o - s).abs() < 1e-9, "got {o}, want {s}");
        }
    }

    #[test]
    fn zero_init_identity_without_rescaling() {
        let mut config = small_config();
        config.use_rescaling = false;
        let cal = UmnnCalibrator::zeroed(schema2(), config).unwrap();
        let scores = vec![0.2, 0.5, 0.9];
        let feats = vec![vec![0, 0]; 3];
        let (out, _) = cal.calibrate_rows(&scores, &feats).unwrap();
        for (o, s) in out.iter().zip(&scores) {
            assert!((o - s).abs() < 1e-9);
        }
    }

    #[test]
    fn outputs_are_strictly_increasing_in_score() {
        for seed in 0..20 {
            let cal = UmnnCalibrator::seeded(schema2(), small_config(), seed).unwrap();
            let feats = vec![vec![(seed % 4) as usize, (seed % 3) as usize]; 100];
            let scores: Vec<f64> = (0..100)
                .map(|i| 1e-4 + (i as f64) * (1.0 - 2e-4) / 99.0)
                .collect();
            let out = cal.calibrate_scores(&scores, &feats).unwrap();
            for w in out.windows(2) {
                assert!(w[1] > w[0], "seed {seed}: not strictly increasing");
            }
        }
    }

    #[test]
    fn outputs_stay_in_open_unit_interval() {
        let cal = UmnnCalibrator::seeded(schema2(), small_config(), 3).unwrap();
        let scores = vec![1e-6, 0.5, 1.0 - 1e-6];
        let feats = vec![vec![3, 2]; 3];
        let out = cal.calibrate_scores(&scores, &feats).unwrap();
        for o in out {
            assert!(o > 0.0 && o < 1.0);
        }
    }

    #[test]
    fn no_features_makes_output_feature_independent() {
        let mut config = small_config();
        config.use_features = false;
        let cal = UmnnCalibrator::seeded(schema2(), config, 11).unwrap();
        let scores = vec![0.3, 0.3, 0.3];
        let feats = vec![vec![0, 0], vec![3, 2], vec![1, 1]];
        let out = cal.calibrate_scores(&scores, &feats).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[1], out[2]);
    }

    #[test]
    fn score_outside_clamp_range_is_domain_error() {
        let cal = UmnnCalibrator::zeroed(schema2(), small_config()).unwrap();
        let err = cal.calibrate_scores(&[1e-9], &[vec![0, 0]]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut cal = UmnnCalibrator::seeded(schema2(), small_config(), 5).unwrap();
        let (_, cache) = cal.calibrate_rows(&[0.4], &[vec![1, 2]]).unwrap();
        cal.params_mut().bump_version();
        let err = cal.calibrate_backward(&cache, &[1.0]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_bundle() {
        let cal = UmnnCalibrator::seeded(schema2(), small_config(), 5).unwrap();
        let scores = vec![0.2, 0.6, 0.9];
        let feats = vec![vec![1, 0], vec![0, 2], vec![3, 1]];
        let (_, cache) = cal.calibrate_rows(&scores, &feats).unwrap();
        let grads = cal.calibrate_backward(&cache, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn integral_derivative_matches_central_difference() {
        // dU/ds at s0 should equal h(logit(s0), x) * logit'(s0).
        let cal = UmnnCalibrator::seeded(schema2(), small_config(), 21).unwrap();
        let feats = vec![vec![2, 1]];
        for &s0 in &[0.2, 0.5, 0.83] {
            let h = 1e-6;
            let up = cal.umnn_integral(&[s0 + h], &feats).unwrap()[0];
            let dn = cal.umnn_integral(&[s0 - h], &feats).unwrap()[0];
            let fd = (up - dn) / (2.0 * h);
            let analytic =
                cal.derivative_net(&[logit_unchecked(s0)], &feats).unwrap()[0] * logit_deriv(s0);
            let rel = (fd - analytic).abs() / analytic.abs().max(1e-12);
            assert!(rel < 1e-4, "s0={s0}: fd={fd} analytic={analytic}");
        }
    }

    #[test]
    fn score_derivative_matches_central_difference() {
        let cal = UmnnCalibrator::seeded(schema2(), small_config(), 8).unwrap();
        let feats = [3usize, 2];
        for &s0 in &[0.15, 0.5, 0.9] {
            let h = 1e-6;
            let up = cal.calibrate_scores(&[s0 + h], &[feats.to_vec()]).unwrap()[0];
            let dn = cal.calibrate_scores(&[s0 - h], &[feats.to_vec()]).unwrap()[0];
            let fd = (up - dn) / (2.0 * h);
            let analytic = cal.score_derivative(s0, &feats).unwrap();
            let rel = (fd - analytic).abs() / analytic.abs().max(1e-12);
            assert!(rel < 1e-4, "s0={s0}: fd={fd} analytic={analytic}");
            assert!(analytic > 0.0);
        }
    }

    /// Central-difference oracle over every parameter of a small calibrator,
    /// objective = mean of calibrated outputs.
    fn finite_difference_all_params(mut cal: UmnnCalibrator, tol: f64) {
        let scores = vec![0.1, 0.35, 0.6, 0.92];
        let feats = vec![vec![0, 0], vec![1, 2], vec![3, 1], vec![2, 2]];
        let n = scores.len() as f64;

        let (out, cache) = cal.calibrate_rows(&scores, &feats).unwrap();
        assert_eq!(out.len(), scores.len());
        let upstream = vec![1.0 / n; scores.len()];
        let grads = cal.calibrate_backward(&cache, &upstream).unwrap();

        let step = 1e-4;
        let keys: Vec<String> = cal.params().keys().map(str::to_string).collect();
        for key in keys {
            let dim = cal.params().get(&key).unwrap().raw_dim();
            for r in 0..dim[0] {
                for c in 0..dim[1] {
                    let orig = cal.params().get(&key).unwrap()[[r, c]];
                    cal.params_mut().get_mut(&key).unwrap()[[r, c]] = orig + step;
                    let up: f64 =
                        cal.calibrate_scores(&scores, &feats).unwrap().iter().sum::<f64>() / n;
                    cal.params_mut().get_mut(&key).unwrap()[[r, c]] = orig - step;
                    let dn: f64 =
                        cal.calibrate_scores(&scores, &feats).unwrap().iter().sum::<f64>() / n;
                    cal.params_mut().get_mut(&key).unwrap()[[r, c]] = orig;
                    let fd = (up - dn) / (2.0 * step);
                    let an = grads.get(&key).map_or(0.0, |g| g[[r, c]]);
                    let denom = fd.abs().max(an.abs()).max(1e-6);
                    assert!(
                        (fd - an).abs() / denom < tol,
                        "{key}[{r},{c}]: fd={fd} analytic={an}"
                    );
                }
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        finite_difference_all_params(
            UmnnCalibrator::seeded(schema2(), small_config(), 13).unwrap(),
            1e-3,
        );
    }

    #[test]
    fn parameter_gradients_match_without_rescaling() {
        let mut config = small_config();
        config.use_rescaling = false;
        finite_difference_all_params(UmnnCalibrator::seeded(schema2(), config, 14).unwrap(), 1e-3);
    }

    #[test]
    fn parameter_gradients_match_without_features() {
        let mut config = small_config();
        config.use_features = false;
        finite_difference_all_params(UmnnCalibrator::seeded(schema2(), config, 15).unwrap(), 1e-3);
    }

    #[test]
    fn beta_gradient_closed_form() {
        // d(sum s') / d beta = sum sigmoid'(z) * e^{w}.
        let cal = UmnnCalibrator::seeded(schema2(), small_config(), 30).unwrap();
        let scores = vec![0.25, 0.5, 0.8];
        let feats = vec![vec![1, 1], vec![0, 2], vec![3, 0]];
        let (out, cache) = cal.calibrate_rows(&scores, &feats).unwrap();
        let grads = cal.calibrate_backward(&cache, &[1.0; 3]).unwrap();
        let expected: f64 = (0..3)
            .map(|i| {
                let sp = out[i];
                let w = cache.chunks[0].w_vals[i];
                sp * (1.0 - sp) * w.exp()
            })
            .sum();
        let got = grads.get(BETA_KEY).unwrap()[[0, 0]];
        assert!((got - expected).abs() < 1e-12 * expected.abs().max(1.0));
    }
}
