//! Panel data containers, validation, and CSV ingestion.
//!
//! A [`PanelDataset`] holds one time-ordered block of observation vectors per
//! individual. Blocks are immutable after construction and safe to share
//! across workers; every per-individual computation in this crate walks one
//! block at a time.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::MomentModel;

/// One raw record z_it. Component meaning is defined by the moment model in
/// use (see the model-authoring notes in [`crate::model`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: Vec<f64>,
}

impl Observation {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("observation contains a non-finite value".into()));
        }
        Ok(Self { values })
    }

    pub fn arity(&self) -> usize {
        self.values.len()
    }
}

/// Time series of observations for one individual.
#[derive(Debug, Clone)]
pub struct IndividualBlock {
    pub id: String,
    /// Strictly increasing time stamps; gaps are treated as contiguous.
    pub times: Vec<i64>,
    pub obs: Vec<Observation>,
}

impl IndividualBlock {
    pub fn new(id: impl Into<String>, times: Vec<i64>, obs: Vec<Observation>) -> Result<Self> {
        let id = id.into();
        if obs.is_empty() {
            return Err(Error::Data(format!("individual {id} has no observations")));
        }
        if times.len() != obs.len() {
            return Err(Error::Data(format!(
                "individual {id}: {} times vs {} observations",
                times.len(),
                obs.len()
            )));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!(
                "individual {id}: time indices are not strictly increasing"
            )));
        }
        Ok(Self { id, times, obs })
    }

    /// Number of time periods T_i.
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.obs[t].values
    }
}

/// A panel: one block per individual, in input order.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    pub blocks: Vec<IndividualBlock>,
    pub balanced: bool,
}

impl PanelDataset {
    pub fn new(blocks: Vec<IndividualBlock>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Data("panel has no individuals".into()));
        }
        let mut seen = HashMap::new();
        for b in &blocks {
            if seen.insert(b.id.clone(), ()).is_some() {
                return Err(Error::Data(format!("duplicate individual id {}", b.id)));
            }
        }
        let t0 = blocks[0].len();
        let balanced = blocks.iter().all(|b| b.len() == t0);
        Ok(Self { blocks, balanced })
    }

    /// Number of individuals n.
    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    /// Mean T_i over individuals.
    pub fn mean_t(&self) -> f64 {
        let total: usize = self.blocks.iter().map(|b| b.len()).sum();
        total as f64 / self.blocks.len() as f64
    }

    /// Total number of observations.
    pub fn total_obs(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }
}

/// Column mapping for CSV ingestion. The id column is read as text, the time
/// column as an integer, and every value column as IEEE-754 decimal text.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub id_col: String,
    pub time_col: String,
    pub value_cols: Vec<String>,
    pub delimiter: u8,
}

impl CsvSchema {
    pub fn new(
        id_col: impl Into<String>,
        time_col: impl Into<String>,
        value_cols: Vec<String>,
    ) -> Self {
        Self {
            id_col: id_col.into(),
            time_col: time_col.into(),
            value_cols,
            delimiter: b',',
        }
    }

    pub fn with_delimiter(mut self, delimiter: u8) -> Self {
        self.delimiter = delimiter;
        self
    }
}

/// Load a panel from CSV, grouping rows by id and sorting each group by time.
/// Individuals appear in order of first appearance in the file.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<PanelDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .from_path(path.as_ref())?;

    let headers = reader.headers()?.clone();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let id_idx = col_index(&schema.id_col)?;
    let time_idx = col_index(&schema.time_col)?;
    if schema.value_cols.is_empty() {
        return Err(Error::Schema("schema names no value columns".into()));
    }
    let value_idx: Vec<usize> = schema
        .value_cols
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;

    // id -> (first-appearance order, rows)
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(i64, Vec<f64>)>> = HashMap::new();

    for (row_no, record) in reader.records().enumerate() {
        // +2: one for the header line, one for 1-based numbering.
        let line = row_no + 2;
        let record = record?;
        let id = record
            .get(id_idx)
            .ok_or_else(|| Error::Parse { row: line, message: "short record".into() })?
            .to_string();
        let time_txt = record.get(time_idx).unwrap_or("");
        let time: i64 = time_txt.trim().parse().map_err(|_| Error::Parse {
            row: line,
            message: format!("non-integer time '{}' in column '{}'", time_txt, schema.time_col),
        })?;
        let mut values = Vec::with_capacity(value_idx.len());
        for (&vi, name) in value_idx.iter().zip(&schema.value_cols) {
            let txt = record.get(vi).unwrap_or("");
            let v: f64 = txt.trim().parse().map_err(|_| Error::Parse {
                row: line,
                message: format!("non-numeric cell '{}' in column '{}'", txt, name),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    message: format!("non-finite value in column '{name}'"),
                });
            }
            values.push(v);
        }
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push((time, values));
    }

    let mut blocks = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap();
        rows.sort_by_key(|(t, _)| *t);
        for w in rows.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::DuplicateObservation { id, time: w[0].0 });
            }
        }
        let (times, obs): (Vec<i64>, Vec<Observation>) = rows
            .into_iter()
            .map(|(t, v)| (t, Observation { values: v }))
            .unzip();
        blocks.push(IndividualBlock::new(id, times, obs)?);
    }
    PanelDataset::new(blocks)
}

/// Write a panel back to CSV using the given schema. Values are printed with
/// Rust's shortest round-trip formatting, so `load_csv ∘ write_csv` is the
/// identity on the numeric content.
pub fn write_csv(panel: &PanelDataset, path: impl AsRef<Path>, schema: &CsvSchema) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    let delim = schema.delimiter as char;
    let mut header = vec![schema.id_col.clone(), schema.time_col.clone()];
    header.extend(schema.value_cols.iter().cloned());
    writeln!(out, "{}", header.join(&delim.to_string()))?;
    for block in &panel.blocks {
        for (t, obs) in block.times.iter().zip(&block.obs) {
            if obs.arity() != schema.value_cols.len() {
                return Err(Error::Schema(format!(
                    "observation arity {} does not match {} value columns",
                    obs.arity(),
                    schema.value_cols.len()
                )));
            }
            let mut fields = vec![block.id.clone(), t.to_string()];
            fields.extend(obs.values.iter().map(|v| format!("{v}")));
            writeln!(out, "{}", fields.join(&delim.to_string()))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Check that every observation has the arity the model requires and that
/// each individual has enough periods to identify its effect (T_i > d_alpha).
pub fn validate(panel: &PanelDataset, model: &dyn MomentModel) -> Result<()> {
    let arity = model.arity();
    let d_alpha = model.dims().d_alpha;
    for block in &panel.blocks {
        if block.len() < d_alpha + 1 {
            return Err(Error::Validation {
                id: block.id.clone(),
                message: format!(
                    "under-identified individual: T_i = {} but d_alpha = {d_alpha} requires T_i >= {}",
                    block.len(),
                    d_alpha + 1
                ),
            });
        }
        for (t, obs) in block.obs.iter().enumerate() {
            if obs.arity() != arity {
                return Err(Error::Validation {
                    id: block.id.clone(),
                    message: format!(
                        "observation at time index {t} has arity {} but the model requires {arity}",
                        obs.arity()
                    ),
                });
            }
        }
    }
    Ok(())
}
