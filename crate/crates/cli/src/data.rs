use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use creakbench::flow::{AttributeVector, ATTR_DIM};
use serde::{Deserialize, Serialize};

/// One embedding line. Attributes come from `attrs`, or from `creak_prob`
/// with every other attribute zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attrs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub creak_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

impl EmbeddingRow {
    pub fn attributes(&self) -> Result<AttributeVector> {
        match (&self.attrs, self.creak_prob) {
            (Some(a), _) => Ok(AttributeVector::from_slice(a)?),
            (None, Some(c)) => Ok(AttributeVector::creak_only(c)),
            (None, None) => bail!("row '{}' has neither attrs nor creak_prob", self.id),
        }
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: EmbeddingRow =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if let Some(a) = &row.attrs {
            if a.len() != ATTR_DIM {
                bail!("{}:{}: attrs has {} values, expected {ATTR_DIM}", path.display(), i + 1, a.len());
            }
        }
        rows.push(row);
    }
    if let Some(first) = rows.first() {
        let d = first.embedding.len();
        if let Some(bad) = rows.iter().find(|r| r.embedding.len() != d) {
            bail!("row '{}' has dimension {}, expected {d}", bad.id, bad.embedding.len());
        }
    }
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    crate::ensure_parent(path)?;
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
