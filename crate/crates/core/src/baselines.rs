//! Classical calibration baselines, each producing a reusable univariate
//! score mapping: equal-frequency histogram binning, least-squares isotonic
//! regression via pool-adjacent-violators, its linearly interpolated
//! smoothing, and Platt scaling fit on logits.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::activations::{logit_unchecked, sigmoid};

/// A fitted univariate calibration mapping. Defined for every `s` in [0, 1]
/// and always mapping into [0, 1]; the isotonic, smoothed-isotonic, and
/// positive-slope Platt kinds are non-decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreMapping {
    /// Equal-frequency bins; `boundaries` has one entry fewer than `values`.
    HistogramBinning {
        boundaries: Vec<f64>,
        values: Vec<f64>,
    },
    /// Non-decreasing step function from pool-adjacent-violators; blocks are
    /// `(score_lo, score_hi, value)` in score order, right-continuous lookup.
    Isotonic { blocks: Vec<(f64, f64, f64)> },
    /// Piece-wise linear interpolation through isotonic block midpoints,
    /// constant beyond the outermost knots.
    Sir { knots_x: Vec<f64>, knots_y: Vec<f64> },
    /// `s' = sigmoid(a * logit(s) + b)`; monotone iff `a > 0`.
    Platt { a: f64, b: f64 },
}

impl ScoreMapping {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::HistogramBinning { .. } => "histbin",
            Self::Isotonic { .. } => "isotonic",
            Self::Sir { .. } => "sir",
            Self::Platt { .. } => "platt",
        }
    }

    /// Map one raw score.
    pub fn apply(&self, s: f64) -> f64 {
        match self {
            Self::HistogramBinning { boundaries, values } => {
                let idx = boundaries.partition_point(|&b| b <= s);
                values[idx]
            }
            Self::Isotonic { blocks } => {
                // Last block whose range starts at or below s.
                let idx = blocks.partition_point(|&(lo, _, _)| lo <= s);
                if idx == 0 {
                    blocks[0].2
                } else {
                    blocks[idx - 1].2
                }
            }
            Self::Sir { knots_x, knots_y } => {
                if s <= knots_x[0] {
                    return knots_y[0];
                }
                if s >= *knots_x.last().unwrap() {
                    return *knots_y.last().unwrap();
                }
                let idx = knots_x.partition_point(|&x| x <= s);
                let (x0, x1) = (knots_x[idx - 1], knots_x[idx]);
                let (y0, y1) = (knots_y[idx - 1], knots_y[idx]);
                y0 + (s - x0) / (x1 - x0) * (y1 - y0)
            }
            Self::Platt { a, b } => {
                let clamped = s.clamp(1e-12, 1.0 - 1e-12);
                sigmoid(a * logit_unchecked(clamped) + b)
            }
        }
    }

    pub fn apply_all(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.apply(s)).collect()
    }
}

/// Equal-frequency histogram binning; each bin maps to its empirical
/// positive rate.
pub fn fit_histogram_binning(calib: &Dataset, num_bins: usize) -> Result<ScoreMapping> {
    fit_histogram_from_pairs(&calib.scores(), &calib.labels(), num_bins)
}

pub fn fit_histogram_from_pairs(
    scores: &[f64],
    labels: &[f64],
    num_bins: usize,
) -> Result<ScoreMapping> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::Fit("histogram binning needs data".into()));
    }
    if num_bins < 1 || num_bins > n {
        return Err(Error::Config(format!(
            "bin count must lie in [1, {n}], got {num_bins}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));

    // Equal-frequency split: the first n % bins bins take one extra row.
    let base = n / num_bins;
    let extra = n % num_bins;
    let mut values = Vec::with_capacity(num_bins);
    let mut boundaries = Vec::with_capacity(num_bins - 1);
    let mut start = 0usize;
    for b in 0..num_bins {
        let size = base + usize::from(b < extra);
        let rows = &order[start..start + size];
        let pos: f64 = rows.iter().map(|&i| labels[i]).sum();
        values.push(pos / size as f64);
        if b + 1 < num_bins {
            let last = scores[rows[rows.len() - 1]];
            let next = scores[order[start + size]];
            boundaries.push(0.5 * (last + next));
        }
        start += size;
    }
    Ok(ScoreMapping::HistogramBinning { boundaries, values })
}

/// Least-squares isotonic regression by pool-adjacent-violators. Tied scores
/// are pre-averaged into single count-weighted points.
pub fn fit_isotonic(calib: &Dataset) -> Result<ScoreMapping> {
    fit_isotonic_from_pairs(&calib.scores(), &calib.labels())
}

pub fn fit_isotonic_from_pairs(scores: &[f64], labels: &[f64]) -> Result<ScoreMapping> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::Fit("isotonic regression needs data".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));

    // Collapse ties into weighted points.
    let mut points: Vec<(f64, f64, f64)> = Vec::new(); // (score, label_sum, weight)
    for &i in &order {
        match points.last_mut() {
            Some(p) if p.0 == scores[i] => {
                p.1 += labels[i];
                p.2 += 1.0;
            }
            _ => points.push((scores[i], labels[i], 1.0)),
        }
    }

    // PAV: merge adjacent blocks while the mean sequence decreases.
    // Block: (label_sum, weight, score_lo, score_hi).
    let mut blocks: Vec<(f64, f64, f64, f64)> = Vec::new();
    for (s, ysum, w) in points {
        blocks.push((ysum, w, s, s));
        while blocks.len() >= 2 {
            let last = blocks[blocks.len() - 1];
            let prev = blocks[blocks.len() - 2];
            if prev.0 / prev.1 > last.0 / last.1 {
                blocks.pop();
                let merged = (prev.0 + last.0, prev.1 + last.1, prev.2, last.3);
                *blocks.last_mut().unwrap() = merged;
            } else {
                break;
            }
        }
    }
    let blocks = blocks
        .into_iter()
        .map(|(ysum, w, lo, hi)| (lo, hi, (ysum / w).clamp(0.0, 1.0)))
        .collect();
    Ok(ScoreMapping::Isotonic { blocks })
}

/// Smoothed isotonic regression: linear interpolation through the isotonic
/// blocks' score-midpoint knots, constant outside the knot range.
pub fn fit_sir(calib: &Dataset) -> Result<ScoreMapping> {
    fit_sir_from_pairs(&calib.scores(), &calib.labels())
}

pub fn fit_sir_from_pairs(scores: &[f64], labels: &[f64]) -> Result<ScoreMapping> {
    let iso = fit_isotonic_from_pairs(scores, labels)?;
    let ScoreMapping::Isotonic { blocks } = iso else {
        unreachable!("fit_isotonic_from_pairs returns the isotonic kind");
    };
    let knots_x: Vec<f64> = blocks.iter().map(|&(lo, hi, _)| 0.5 * (lo + hi)).collect();
    let knots_y: Vec<f64> = blocks.iter().map(|&(_, _, v)| v).collect();
    Ok(ScoreMapping::Sir { knots_x, knots_y })
}

/// Platt scaling on logits: fit `sigmoid(a * logit(s) + b)` by Newton
/// iteration on the mean BCE. Operating on logits lets already-calibrated
/// data admit the exact solution (a, b) = (1, 0).
pub fn fit_platt(calib: &Dataset, max_iters: usize, tol: f64) -> Result<ScoreMapping> {
    fit_platt_from_pairs(&calib.scores(), &calib.labels(), max_iters, tol)
}

pub fn fit_platt_from_pairs(
    scores: &[f64],
    labels: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<ScoreMapping> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::Fit("platt scaling needs data".into()));
    }
    let pos = labels.iter().filter(|&&v| v > 0.5).count();
    if pos == 0 || pos == n {
        return Err(Error::Fit(
            "platt scaling needs both classes present".into(),
        ));
    }
    let u: Vec<f64> = scores
        .iter()
        .map(|&s| logit_unchecked(s.clamp(1e-12, 1.0 - 1e-12)))
        .collect();
    let nf = n as f64;
    let (mut a, mut b) = (1.0, 0.0);
    for _ in 0..max_iters {
        let mut g_a = 0.0;
        let mut g_b = 0.0;
        let (mut h_aa, mut h_ab, mut h_bb) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let p = sigmoid(a * u[i] + b);
            let d = p - labels[i];
            g_a += d * u[i];
            g_b += d;
            let w = p * (1.0 - p);
            h_aa += w * u[i] * u[i];
            h_ab += w * u[i];
            h_bb += w;
        }
        g_a /= nf;
        g_b /= nf;
        h_aa /= nf;
        h_ab /= nf;
        h_bb /= nf;
        if g_a.abs().max(g_b.abs()) < tol {
            break;
        }
        let det = h_aa * h_bb - h_ab * h_ab;
        if det.abs() < 1e-18 {
            return Err(Error::Fit("platt scaling: singular Hessian".into()));
        }
        a -= (h_bb * g_a - h_ab * g_b) / det;
        b -= (h_aa * g_b - h_ab * g_a) / det;
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::Fit("platt scaling diverged".into()));
        }
    }
    Ok(ScoreMapping::Platt { a, b })
}
