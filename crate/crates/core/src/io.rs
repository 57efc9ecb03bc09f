//! CSV artifacts: per-sample scores, label files, stage labels and search
//! trial logs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::Trial;
use crate::data::write_atomic;
use crate::error::{Error, Result};

pub const SCORES_HEADER: &str = "sample_id,ood_proba,ood_label";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: String,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

/// `sample_id,ood_proba,ood_label` rows.
pub fn format_scores(rows: &[ScoreRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 32);
    out.push_str(SCORES_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.sample_id, r.score, r.label.unwrap_or(0));
    }
    out
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    write_atomic(path, format_scores(rows).as_bytes())
}

/// Raw (non-probability) scores: `sample_id,<column>`.
pub fn write_raw_scores(path: &Path, column: &str, ids: &[String], scores: &[f64]) -> Result<()> {
    let mut out = format!("sample_id,{column}\n");
    for (id, s) in ids.iter().zip(scores) {
        let _ = writeln!(out, "{id},{s}");
    }
    write_atomic(path, out.as_bytes())
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::HeaderMismatch(format!("{}: {e}", path.display())))
}

/// Read a scores CSV. The second column is the score whatever its name; a
/// third column, if present, is a 0/1 label.
pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut rdr = reader(path)?;
    let header = rdr
        .headers()
        .map_err(|e| Error::HeaderMismatch(e.to_string()))?
        .clone();
    if header.get(0) != Some("sample_id") || header.len() < 2 {
        return Err(Error::HeaderMismatch(format!(
            "{}: expected sample_id,<score>[,<label>]",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::HeaderMismatch(e.to_string()))?;
        let bad = |what: &str| Error::HeaderMismatch(format!("{} line {}: bad {what}", path.display(), i + 2));
        let score: f64 = rec[1].trim().parse().map_err(|_| bad("score"))?;
        let label = match rec.get(2) {
            Some(l) => Some(parse_label(l).ok_or_else(|| bad("label"))?),
            None => None,
        };
        rows.push(ScoreRow {
            sample_id: rec[0].to_string(),
            score,
            label,
        });
    }
    Ok(rows)
}

fn parse_label(s: &str) -> Option<u8> {
    match s.trim() {
        "0" => Some(0),
        "1" => Some(1),
        _ => None,
    }
}

/// `sample_id,label` with 0 = ID and 1 = OOD.
pub fn read_labels(path: &Path) -> Result<HashMap<String, u8>> {
    let mut rdr = reader(path)?;
    let mut out = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::HeaderMismatch(e.to_string()))?;
        if rec.len() < 2 {
            return Err(Error::RaggedRow {
                line: i + 2,
                expected: 2,
                found: rec.len(),
            });
        }
        let l = parse_label(&rec[1]).ok_or_else(|| {
            Error::HeaderMismatch(format!("{} line {}: label must be 0 or 1", path.display(), i + 2))
        })?;
        out.insert(rec[0].to_string(), l);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, ids: &[String], labels: &[u8]) -> Result<()> {
    let mut out = String::from("sample_id,label\n");
    for (id, l) in ids.iter().zip(labels) {
        let _ = writeln!(out, "{id},{l}");
    }
    write_atomic(path, out.as_bytes())
}

/// `sample_id,stage,label` rows, one per (stage, sample).
pub fn write_stage_labels(path: &Path, stages: &[(&str, Vec<(String, u8)>)]) -> Result<()> {
    let mut out = String::from("sample_id,stage,label\n");
    for (stage, rows) in stages {
        for (id, l) in rows {
            let _ = writeln!(out, "{id},{stage},{l}");
        }
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_stage_labels(path: &Path) -> Result<Vec<(String, String, u8)>> {
    let mut rdr = reader(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::HeaderMismatch(e.to_string()))?;
        let l = parse_label(&rec[2]).ok_or_else(|| Error::HeaderMismatch("bad stage label".into()))?;
        out.push((rec[0].to_string(), rec[1].to_string(), l));
    }
    Ok(out)
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut out = String::from("trial,k,t,entropy_h,p_mis_id,p_corr_id,total,error\n");
    for tr in trials {
        match &tr.objective {
            Some(o) => {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},",
                    tr.index, tr.k, tr.t, o.entropy_h, o.p_mis_id, o.p_corr_id, o.total
                );
            }
            None => {
                let msg = tr.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
                let _ = writeln!(out, "{},{},{},,,,,{msg}", tr.index, tr.k, tr.t);
            }
        }
    }
    write_atomic(path, out.as_bytes())
}
