//! Append-only results table and the artifact manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::hex;
use super::files::{append_file, read_file, write_file};
use crate::error::{LabError, Result};

pub const RESULTS_FILE: &str = "results.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULTS_COLUMNS: [&str; 6] = ["run_id", "phase", "metric", "value", "slack", "inputs_digest"];

/// One metric value with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub run_id: String,
    pub phase: String,
    pub metric: String,
    pub value: f64,
    pub slack: Option<f64>,
    pub inputs_digest: String,
}

/// Short hex digest of arbitrary input descriptors.
pub fn inputs_digest(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex(&h.finalize()[..8])
}

fn csv_err(e: csv::Error) -> LabError {
    LabError::Serde(format!("results csv: {e}"))
}

/// Appends rows, writing the header first when the file is new.
pub fn append_rows(path: &Path, rows: &[ResultsRow]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let fresh = !path.exists();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    if fresh {
        w.write_record(RESULTS_COLUMNS).map_err(csv_err)?;
    }
    for r in rows {
        let slack = r.slack.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([
            r.run_id.as_str(),
            r.phase.as_str(),
            r.metric.as_str(),
            &r.value.to_string(),
            &slack,
            r.inputs_digest.as_str(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::Serde(e.to_string()))?;
    append_file(path, &String::from_utf8(bytes).map_err(|e| LabError::Serde(e.to_string()))?)
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultsRow>> {
    let text = read_file(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header != RESULTS_COLUMNS {
        return Err(LabError::Serde(format!("unexpected results header {header:?}")));
    }
    let parse = |s: &str| s.parse::<f64>().map_err(|_| LabError::Serde(format!("bad number `{s}` in results")));
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            Ok(ResultsRow {
                run_id: rec[0].into(),
                phase: rec[1].into(),
                metric: rec[2].into(),
                value: parse(&rec[3])?,
                slack: if rec[4].is_empty() { None } else { Some(parse(&rec[4])?) },
                inputs_digest: rec[5].into(),
            })
        })
        .collect()
}

/// Collects rows for one phase under a fixed run id and inputs digest.
#[derive(Debug, Clone)]
pub struct RowSink {
    pub run_id: String,
    pub phase: String,
    pub inputs_digest: String,
    pub rows: Vec<ResultsRow>,
}

impl RowSink {
    pub fn new(run_id: &str, phase: &str, inputs_digest: &str) -> Self {
        Self {
            run_id: run_id.into(),
            phase: phase.into(),
            inputs_digest: inputs_digest.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, metric: impl Into<String>, value: f64, slack: Option<f64>) {
        self.rows.push(ResultsRow {
            run_id: self.run_id.clone(),
            phase: self.phase.clone(),
            metric: metric.into(),
            value,
            slack,
            inputs_digest: self.inputs_digest.clone(),
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub phase: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub config_digest: String,
    /// Paths relative to the output directory.
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

impl Manifest {
    pub fn load_or_new(out: &Path, run_id: &str, config_digest: &str) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        if path.exists() {
            let m: Manifest = serde_json::from_str(&read_file(&path)?).map_err(|e| LabError::Serde(e.to_string()))?;
            if m.config_digest == config_digest {
                return Ok(m);
            }
        }
        Ok(Self {
            run_id: run_id.into(),
            config_digest: config_digest.into(),
            artifacts: BTreeMap::new(),
        })
    }

    /// Records the current contents of each file under `phase`.
    pub fn record(&mut self, out: &Path, phase: &str, files: &[PathBuf]) -> Result<()> {
        for f in files {
            let bytes = std::fs::read(f).map_err(|e| LabError::io(f, e))?;
            let rel = f.strip_prefix(out).unwrap_or(f).to_string_lossy().replace('\\', "/");
            self.artifacts.insert(
                rel,
                ArtifactEntry {
                    phase: phase.into(),
                    sha256: hex(&Sha256::digest(&bytes)),
                    bytes: bytes.len() as u64,
                },
            );
        }
        Ok(())
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| LabError::Serde(e.to_string()))?;
        s.push('\n');
        write_file(&out.join(MANIFEST_FILE), s.as_bytes())
    }
}
