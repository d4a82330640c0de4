//! Calibration metrics (ECE, per-field relative calibration error and its
//! multi-field average) and ranking metrics (AUC, group-wise AUC).
//!
//! ECE sums absolute within-bin residuals over equal-width bins:
//! `(1/|D|) sum_k |sum_{bin k} (s' - y)|`, top bin edge closed. The
//! field-conditioned error replaces bins by field values and normalizes each
//! residual by that value's positive count; values with no positives are
//! skipped and reported. All metrics are pure: identical inputs give
//! bit-identical outputs (field values and groups are walked in sorted
//! order).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// How group AUCs are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GaucWeighting {
    /// Weight each group by its sample count.
    GroupSize,
    /// Weight each group by its positive count.
    PositiveCount,
}

/// Options shared by every report computation.
#[derive(Debug, Clone)]
pub struct MetricConfig {
    /// Equal-width bin count for ECE.
    pub ece_bins: usize,
    /// Field whose conditioned error is reported as headline FRCE;
    /// defaults to the first schema field.
    pub frce_field: Option<String>,
    pub gauc_weighting: GaucWeighting,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            ece_bins: 100,
            frce_field: None,
            gauc_weighting: GaucWeighting::GroupSize,
        }
    }
}

/// All metrics for one (dataset, score vector) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ece: f64,
    /// Field-conditioned error of the designated field.
    pub frce: f64,
    /// Unweighted mean of per-field errors across all schema fields.
    pub mfrce: f64,
    pub auc: f64,
    /// Group-wise AUC; absent when the data carries no group information.
    pub gauc: Option<f64>,
    pub per_field_frce: Vec<(String, f64)>,
    /// Field values skipped for having no positive labels, summed over fields.
    pub skipped_field_values: usize,
    /// Mean |s' - true_p|; synthetic data only.
    pub oracle_mae: Option<f64>,
}

impl MetricsReport {
    /// Machine-readable `key=value` lines, one metric per line.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("ece={}\n", self.ece));
        out.push_str(&format!("frce={}\n", self.frce));
        out.push_str(&format!("mfrce={}\n", self.mfrce));
        out.push_str(&format!("auc={}\n", self.auc));
        match self.gauc {
            Some(g) => out.push_str(&format!("gauc={g}\n")),
            None => out.push_str("gauc=na\n"),
        }
        for (name, v) in &self.per_field_frce {
            out.push_str(&format!("frce.{name}={v}\n"));
        }
        out.push_str(&format!(
            "skipped_field_values={}\n",
            self.skipped_field_values
        ));
        if let Some(m) = self.oracle_mae {
            out.push_str(&format!("oracle_mae={m}\n"));
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>12}", "metric", "value")?;
        writeln!(f, "{:<12} {:>12.6}", "ece", self.ece)?;
        writeln!(f, "{:<12} {:>12.6}", "frce", self.frce)?;
        writeln!(f, "{:<12} {:>12.6}", "mfrce", self.mfrce)?;
        writeln!(f, "{:<12} {:>12.6}", "auc", self.auc)?;
        match self.gauc {
            Some(g) => writeln!(f, "{:<12} {:>12.6}", "gauc", g)?,
            None => writeln!(f, "{:<12} {:>12}", "gauc", "na")?,
        }
        if let Some(m) = self.oracle_mae {
            writeln!(f, "{:<12} {:>12.6}", "oracle_mae", m)?;
        }
        Ok(())
    }
}

/// Expected calibration error over `bins` equal-width bins.
pub fn ece(s_prime: &[f64], y: &[f64], bins: usize) -> Result<f64> {
    if s_prime.is_empty() || s_prime.len() != y.len() {
        return Err(Error::Metric(format!(
            "ece needs matching non-empty inputs, got {} outputs / {} labels",
            s_prime.len(),
            y.len()
        )));
    }
    if bins < 1 {
        return Err(Error::Metric("ece needs at least one bin".into()));
    }
    let mut residual = vec![0.0; bins];
    for (&s, &yv) in s_prime.iter().zip(y) {
        let k = ((s * bins as f64).floor() as usize).min(bins - 1);
        residual[k] += s - yv;
    }
    Ok(residual.iter().map(|r| r.abs()).sum::<f64>() / s_prime.len() as f64)
}

/// Field-conditioned relative calibration error. Returns the error plus the
/// number of field values skipped for lacking positives.
pub fn frce(s_prime: &[f64], y: &[f64], field_values: &[usize]) -> Result<(f64, usize)> {
    if s_prime.is_empty() || s_prime.len() != y.len() || s_prime.len() != field_values.len() {
        return Err(Error::Metric(
            "frce needs matching non-empty outputs, labels, and field values".into(),
        ));
    }
    let mut residual: BTreeMap<usize, f64> = BTreeMap::new();
    let mut positives: BTreeMap<usize, f64> = BTreeMap::new();
    for i in 0..s_prime.len() {
        *residual.entry(field_values[i]).or_default() += s_prime[i] - y[i];
        *positives.entry(field_values[i]).or_default() += y[i];
    }
    let mut total = 0.0;
    let mut skipped = 0usize;
    let mut used = 0usize;
    for (z, r) in &residual {
        let pos = positives[z];
        if pos == 0.0 {
            skipped += 1;
            continue;
        }
        total += r.abs() / pos.abs();
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric(
            "frce: every field value lacked positive labels".into(),
        ));
    }
    Ok((total / s_prime.len() as f64, skipped))
}

/// Unweighted mean of [`frce`] across field columns. Returns the mean, the
/// per-field values, and the total skipped count.
pub fn mfrce(
    s_prime: &[f64],
    y: &[f64],
    field_columns: &[Vec<usize>],
) -> Result<(f64, Vec<f64>, usize)> {
    if field_columns.is_empty() {
        return Err(Error::Metric("mfrce needs at least one field".into()));
    }
    let mut per_field = Vec::with_capacity(field_columns.len());
    let mut skipped = 0usize;
    for col in field_columns {
        let (v, sk) = frce(s_prime, y, col)?;
        per_field.push(v);
        skipped += sk;
    }
    let mean = per_field.iter().sum::<f64>() / per_field.len() as f64;
    Ok((mean, per_field, skipped))
}

/// Probability that a random positive outranks a random negative, ties
/// counted half (rank-sum formulation).
pub fn auc(s_prime: &[f64], y: &[f64]) -> Result<f64> {
    if s_prime.is_empty() || s_prime.len() != y.len() {
        return Err(Error::Metric(
            "auc needs matching non-empty inputs".into(),
        ));
    }
    let n = s_prime.len();
    let n_pos = y.iter().filter(|&&v| v > 0.5).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "auc undefined: only one class present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s_prime[a].total_cmp(&s_prime[b]));
    // Average ranks across tied scores.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && s_prime[order[j + 1]] == s_prime[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // 1-based ranks i+1 ..= j+1
        for &idx in &order[i..=j] {
            if y[idx] > 0.5 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Weighted mean of per-group AUC over groups containing both classes.
pub fn gauc(
    s_prime: &[f64],
    y: &[f64],
    group_ids: &[String],
    weighting: GaucWeighting,
) -> Result<f64> {
    if s_prime.is_empty() || s_prime.len() != y.len() || s_prime.len() != group_ids.len() {
        return Err(Error::Metric(
            "gauc needs matching non-empty outputs, labels, and group ids".into(),
        ));
    }
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in group_ids.iter().enumerate() {
        by_group.entry(g.as_str()).or_default().push(i);
    }
    let mut weighted = 0.0;
    let mut weight_sum = 0.0;
    for rows in by_group.values() {
        let gs: Vec<f64> = rows.iter().map(|&i| s_prime[i]).collect();
        let gy: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let pos = gy.iter().filter(|&&v| v > 0.5).count();
        if pos == 0 || pos == rows.len() {
            continue;
        }
        let a = auc(&gs, &gy)?;
        let w = match weighting {
            GaucWeighting::GroupSize => rows.len() as f64,
            GaucWeighting::PositiveCount => pos as f64,
        };
        weighted += w * a;
        weight_sum += w;
    }
    if weight_sum == 0.0 {
        return Err(Error::Metric(
            "gauc undefined: no group contains both classes".into(),
        ));
    }
    Ok(weighted / weight_sum)
}

/// Compute the full report for calibrated outputs over a dataset.
pub fn compute_report(
    s_prime: &[f64],
    dataset: &Dataset,
    config: &MetricConfig,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Metric("cannot evaluate an empty dataset".into()));
    }
    if s_prime.len() != dataset.len() {
        return Err(Error::Metric(format!(
            "{} outputs for {} samples",
            s_prime.len(),
            dataset.len()
        )));
    }
    let y = dataset.labels();
    let ece_v = ece(s_prime, &y, config.ece_bins)?;

    let field_columns: Vec<Vec<usize>> = (0..dataset.schema.num_fields())
        .map(|f| dataset.field_column(f))
        .collect();
    let (mfrce_v, per_field, skipped) = mfrce(s_prime, &y, &field_columns)?;

    let designated = match &config.frce_field {
        Some(name) => dataset.schema.field_index(name).ok_or_else(|| {
            Error::Metric(format!("designated frce field '{name}' not in schema"))
        })?,
        None => 0,
    };
    let frce_v = per_field[designated];

    let auc_v = auc(s_prime, &y)?;
    let gauc_v = match dataset.group_tokens() {
        Some(tokens) => Some(gauc(s_prime, &y, &tokens, config.gauc_weighting)?),
        None => None,
    };
    let oracle_mae = dataset
        .true_ps()
        .map(|tp| {
            s_prime
                .iter()
                .zip(&tp)
                .map(|(&a, &b)| (a - b).abs())
                .sum::<f64>()
                / tp.len() as f64
        });

    let names: Vec<String> = dataset.schema.field_names().map(str::to_string).collect();
    Ok(MetricsReport {
        ece: ece_v,
        frce: frce_v,
        mfrce: mfrce_v,
        auc: auc_v,
        gauc: gauc_v,
        per_field_frce: names.into_iter().zip(per_field).collect(),
        skipped_field_values: skipped,
        oracle_mae,
    })
}
