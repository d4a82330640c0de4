//! Prediction-log data model: schema, ingestion, chronological splitting,
//! and seeded mini-batching.
//!
//! Input files are delimiter-separated text (comma or tab, auto-detected
//! from the header) with a mandatory header row:
//!
//! ```text
//! label,score,<field...>[,group][,true_p]
//! ```
//!
//! `label` is 0/1, `score` a decimal in [0, 1], field columns non-negative
//! integer ids. Row order is treated as time order. Ids at or beyond a
//! field's vocabulary are mapped to the reserved "unknown" id 0 so that
//! unseen values at evaluation time never crash.

use std::fmt::Write as _;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};

pub const LABEL_COLUMN: &str = "label";
pub const SCORE_COLUMN: &str = "score";
pub const GROUP_COLUMN: &str = "group";
pub const TRUE_P_COLUMN: &str = "true_p";

/// Ordered categorical fields with their vocabulary sizes, plus an optional
/// field designated for GAUC grouping when no explicit group column exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSchema {
    fields: Vec<(String, usize)>,
    group_field: Option<String>,
}

impl FieldSchema {
    pub fn new(fields: Vec<(String, usize)>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for (name, vocab) in &fields {
            if [LABEL_COLUMN, SCORE_COLUMN, GROUP_COLUMN, TRUE_P_COLUMN].contains(&name.as_str()) {
                return Err(Error::Schema(format!("field name '{name}' is reserved")));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Schema(format!("duplicate field name '{name}'")));
            }
            if *vocab < 1 {
                return Err(Error::Schema(format!(
                    "field '{name}' needs vocabulary size >= 1"
                )));
            }
        }
        Ok(Self {
            fields,
            group_field: None,
        })
    }

    /// Designate a schema field to supply group ids for GAUC when the data
    /// file has no explicit `group` column.
    pub fn with_group_field(mut self, name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if self.field_index(&name).is_none() {
            return Err(Error::Schema(format!("group field '{name}' not in schema")));
        }
        self.group_field = Some(name);
        Ok(self)
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn fields(&self) -> &[(String, usize)] {
        &self.fields
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|(n, _)| n.as_str())
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.fields.iter().map(|&(_, v)| v).collect()
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|(n, _)| n == name)
    }

    pub fn group_field(&self) -> Option<&str> {
        self.group_field.as_deref()
    }
}

/// One logged prediction event.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// One id per schema field, each within its field's vocabulary.
    pub features: Vec<usize>,
    /// Binary outcome.
    pub label: u8,
    /// Raw model score, clamped into (0, 1) at ingestion.
    pub score: f64,
    /// Opaque grouping token for GAUC, when logged.
    pub group_id: Option<String>,
    /// Ground-truth probability; synthetic data only.
    pub true_p: Option<f64>,
    /// Row order in the source file, used as time.
    pub timestamp_index: usize,
}

/// An immutable, order-preserving collection of samples under one schema.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: FieldSchema,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(schema: FieldSchema, samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != schema.num_fields() {
                return Err(Error::Schema(format!(
                    "sample {i} has {} features, schema has {}",
                    s.features.len(),
                    schema.num_fields()
                )));
            }
            if s.label > 1 {
                return Err(Error::Schema(format!("sample {i} has non-binary label")));
            }
        }
        Ok(Self { schema, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn scores(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.score).collect()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| f64::from(s.label)).collect()
    }

    /// Ids of one field across all samples.
    pub fn field_column(&self, field: usize) -> Vec<usize> {
        self.samples.iter().map(|s| s.features[field]).collect()
    }

    /// Ground-truth probabilities, if every sample carries one.
    pub fn true_ps(&self) -> Option<Vec<f64>> {
        self.samples.iter().map(|s| s.true_p).collect()
    }

    /// Group tokens for GAUC: the explicit `group` column when present,
    /// otherwise the schema's designated group field, otherwise none.
    pub fn group_tokens(&self) -> Option<Vec<String>> {
        if self.samples.iter().all(|s| s.group_id.is_some()) && !self.samples.is_empty() {
            return Some(
                self.samples
                    .iter()
                    .map(|s| s.group_id.clone().unwrap())
                    .collect(),
            );
        }
        let field = self.schema.group_field()?;
        let idx = self.schema.field_index(field)?;
        Some(
            self.samples
                .iter()
                .map(|s| s.features[idx].to_string())
                .collect(),
        )
    }
}

/// A raw parsed table: header names plus string cells, delimiter preserved.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub delimiter: char,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Read a delimiter-separated file, auto-detecting tab vs comma from the
/// header line.
pub fn read_table(path: impl AsRef<Path>) -> Result<RawTable> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Schema(format!("{}: empty file, header required", path.display())))?;
    let delimiter = if header_line.contains('\t') { '\t' } else { ',' };
    let header: Vec<String> = header_line
        .split(delimiter)
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split(delimiter).map(|s| s.trim().to_string()).collect();
        if cells.len() != header.len() {
            return Err(Error::Parse {
                row: i + 1,
                msg: format!("expected {} cells, found {}", header.len(), cells.len()),
            });
        }
        rows.push(cells);
    }
    Ok(RawTable {
        delimiter,
        header,
        rows,
    })
}

/// Load a prediction log against `schema`, clamping every score into
/// `[clamp_eps, 1 - clamp_eps]` and mapping out-of-vocabulary ids to 0.
pub fn load_dataset(
    path: impl AsRef<Path>,
    schema: &FieldSchema,
    clamp_eps: f64,
) -> Result<Dataset> {
    if !(clamp_eps > 0.0 && clamp_eps < 0.5) {
        return Err(Error::Config(format!(
            "clamp epsilon must lie in (0, 0.5), got {clamp_eps}"
        )));
    }
    let table = read_table(path)?;
    dataset_from_table(&table, schema, clamp_eps)
}

/// Interpret an already-parsed table against `schema`.
pub fn dataset_from_table(
    table: &RawTable,
    schema: &FieldSchema,
    clamp_eps: f64,
) -> Result<Dataset> {
    let col = |name: &str| -> Result<usize> {
        table
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let label_col = col(LABEL_COLUMN)?;
    let score_col = col(SCORE_COLUMN)?;
    let field_cols: Vec<usize> = schema
        .field_names()
        .map(col)
        .collect::<Result<Vec<_>>>()?;
    let group_col = table.header.iter().position(|h| h == GROUP_COLUMN);
    let true_p_col = table.header.iter().position(|h| h == TRUE_P_COLUMN);

    let mut samples = Vec::with_capacity(table.rows.len());
    for (i, cells) in table.rows.iter().enumerate() {
        let row = i + 1;
        let label: i64 = cells[label_col]
            .parse()
            .map_err(|_| Error::Parse {
                row,
                msg: format!("label '{}' is not an integer", cells[label_col]),
            })?;
        if label != 0 && label != 1 {
            return Err(Error::Parse {
                row,
                msg: format!("label {label} is not binary"),
            });
        }
        let score: f64 = cells[score_col].parse().map_err(|_| Error::Parse {
            row,
            msg: format!("score '{}' is not a number", cells[score_col]),
        })?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Parse {
                row,
                msg: format!("score {score} outside [0, 1]"),
            });
        }
        let mut features = Vec::with_capacity(schema.num_fields());
        for (f, &c) in field_cols.iter().enumerate() {
            let id: usize = cells[c].parse().map_err(|_| Error::Parse {
                row,
                msg: format!(
                    "field '{}' value '{}' is not a non-negative integer",
                    schema.fields()[f].0,
                    cells[c]
                ),
            })?;
            let vocab = schema.fields()[f].1;
            features.push(if id < vocab { id } else { 0 });
        }
        let group_id = group_col.map(|c| cells[c].clone());
        let true_p = match true_p_col {
            Some(c) => {
                let p: f64 = cells[c].parse().map_err(|_| Error::Parse {
                    row,
                    msg: format!("true_p '{}' is not a number", cells[c]),
                })?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Parse {
                        row,
                        msg: format!("true_p {p} outside [0, 1]"),
                    });
                }
                Some(p)
            }
            None => None,
        };
        samples.push(Sample {
            features,
            label: label as u8,
            score: score.clamp(clamp_eps, 1.0 - clamp_eps),
            group_id,
            true_p,
            timestamp_index: i,
        });
    }
    Dataset::new(schema.clone(), samples)
}

/// Infer a schema from a file: every non-reserved header column becomes a
/// field, with vocabulary `max id + 1`.
pub fn infer_schema(path: impl AsRef<Path>) -> Result<FieldSchema> {
    let table = read_table(path)?;
    let reserved = [LABEL_COLUMN, SCORE_COLUMN, GROUP_COLUMN, TRUE_P_COLUMN];
    let mut fields = Vec::new();
    for (c, name) in table.header.iter().enumerate() {
        if reserved.contains(&name.as_str()) {
            continue;
        }
        let mut max_id = 0usize;
        for (i, cells) in table.rows.iter().enumerate() {
            let id: usize = cells[c].parse().map_err(|_| Error::Parse {
                row: i + 1,
                msg: format!("field '{name}' value '{}' is not a non-negative integer", cells[c]),
            })?;
            max_id = max_id.max(id);
        }
        fields.push((name.clone(), max_id + 1));
    }
    if fields.is_empty() {
        return Err(Error::Schema(
            "no categorical field columns found in header".into(),
        ));
    }
    FieldSchema::new(fields)
}

/// Write a dataset in the canonical column order
/// `label,score,<fields...>[,group][,true_p]`. Floats use the shortest
/// representation that round-trips exactly.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let has_group = dataset.samples().iter().any(|s| s.group_id.is_some());
    let has_true_p = dataset.samples().iter().any(|s| s.true_p.is_some());
    let mut out = String::new();
    out.push_str(LABEL_COLUMN);
    out.push(',');
    out.push_str(SCORE_COLUMN);
    for name in dataset.schema.field_names() {
        out.push(',');
        out.push_str(name);
    }
    if has_group {
        out.push(',');
        out.push_str(GROUP_COLUMN);
    }
    if has_true_p {
        out.push(',');
        out.push_str(TRUE_P_COLUMN);
    }
    out.push('\n');
    for s in dataset.samples() {
        let _ = write!(out, "{},{}", s.label, s.score);
        for &id in &s.features {
            let _ = write!(out, ",{id}");
        }
        if has_group {
            let _ = write!(out, ",{}", s.group_id.as_deref().unwrap_or(""));
        }
        if has_true_p {
            match s.true_p {
                Some(p) => {
                    let _ = write!(out, ",{p}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Contiguous prefix/middle/suffix split by row order. Boundary indices are
/// floors of the cumulative proportions; the remainder goes to the last part.
pub fn chronological_split(
    dataset: &Dataset,
    ratios: (f64, f64, f64),
) -> Result<(Dataset, Dataset, Dataset)> {
    let (r1, r2, r3) = ratios;
    if r1 <= 0.0 || r2 <= 0.0 || r3 <= 0.0 {
        return Err(Error::Config(format!(
            "split ratios must all be positive, got {r1}:{r2}:{r3}"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    let total = r1 + r2 + r3;
    let n = dataset.len();
    let c1 = ((n as f64) * r1 / total).floor() as usize;
    let c2 = ((n as f64) * (r1 + r2) / total).floor() as usize;
    let take = |range: std::ops::Range<usize>| -> Dataset {
        Dataset {
            schema: dataset.schema.clone(),
            samples: dataset.samples[range].to_vec(),
        }
    };
    Ok((take(0..c1), take(c1..c2), take(c2..n)))
}

/// A mini-batch: indices into a dataset plus dense gather helpers.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn labels(&self, dataset: &Dataset) -> Vec<f64> {
        self.indices
            .iter()
            .map(|&i| f64::from(dataset.samples()[i].label))
            .collect()
    }

    pub fn scores(&self, dataset: &Dataset) -> Vec<f64> {
        self.indices
            .iter()
            .map(|&i| dataset.samples()[i].score)
            .collect()
    }

    pub fn features(&self, dataset: &Dataset) -> Vec<Vec<usize>> {
        self.indices
            .iter()
            .map(|&i| dataset.samples()[i].features.clone())
            .collect()
    }
}

/// Partition a seeded permutation of all indices into consecutive batches.
/// The final batch may be smaller. Same seed, same sequence.
pub fn iterate_batches(dataset: &Dataset, batch_size: usize, shuffle_seed: u64) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = StdRng::seed_from_u64(shuffle_seed);
    indices.shuffle(&mut rng);
    indices
        .chunks(batch_size)
        .map(|c| Batch {
            indices: c.to_vec(),
        })
        .collect()
}
