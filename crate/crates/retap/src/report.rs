//! JSON artifacts and CSV tables.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use retap_core::probes::{ProbeDetails, ProbeReport};
use retap_core::EvalResult;
use serde::{Deserialize, Serialize};

/// A failure that did not stop the command. Any of these makes the exit
/// status nonzero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub stage: String,
    pub id: String,
    pub message: String,
}

impl ErrorRecord {
    pub fn new(stage: &str, id: impl Into<String>, message: impl ToString) -> Self {
        Self { stage: stage.into(), id: id.into(), message: message.to_string() }
    }
}

/// Top-level shape of every JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub command: String,
    pub config: serde_json::Value,
    pub result: T,
    pub errors: Vec<ErrorRecord>,
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json_bytes(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn csv_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("csv")
}

pub fn eval_csv(w: impl Write, cells: &[EvalResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "backend",
        "tap",
        "flags",
        "framing",
        "K",
        "M",
        "fusion_weight",
        "precision_at_1",
        "hits",
        "evaluated",
        "excluded",
    ])?;
    for c in cells {
        let cfg = &c.config;
        out.write_record([
            cfg.backend_id.clone(),
            cfg.tap.clone(),
            cfg.flags.to_string(),
            cfg.framing.clone(),
            cfg.k.to_string(),
            cfg.m.to_string(),
            cfg.fusion_weight.to_string(),
            c.precision_at_1.to_string(),
            c.hits.to_string(),
            c.evaluated.to_string(),
            c.excluded.len().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// One plot-ready table for any probe report list. Per-layer probes give
/// `layer, sublayer, mean, std` rows; the others list their scalars.
pub fn probe_csv(w: impl Write, reports: &[ProbeReport]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().flexible(true).from_writer(w);
    let kind = reports.first().map(|r| r.kind);
    use retap_core::probes::ProbeKind::*;
    match kind {
        None => {}
        Some(Alpha | Beta | Synonym) => {
            out.write_record(["kind", "backend", "layer", "sublayer", "mean", "std", "samples"])?;
            for r in reports {
                for s in &r.per_layer {
                    out.serialize((
                        r.kind,
                        &r.backend_id,
                        s.layer,
                        s.sublayer.to_string(),
                        s.mean,
                        s.std,
                        r.sample_count,
                    ))?;
                }
            }
        }
        Some(Framing) => {
            out.write_record(["framing", "first", "second", "logit_first", "logit_second", "p_first", "bias"])?;
            for r in reports {
                if let ProbeDetails::Framing { framings } = &r.details {
                    for f in framings {
                        out.serialize((
                            &f.framing,
                            &f.labels[0],
                            &f.labels[1],
                            f.averaged_logits[0],
                            f.averaged_logits[1],
                            f.p_first,
                            f.bias,
                        ))?;
                    }
                }
            }
        }
        Some(WordProb) => {
            out.write_record(["input", "rank", "token", "text", "probability"])?;
            for (i, r) in reports.iter().enumerate() {
                if let ProbeDetails::WordProb { table } = &r.details {
                    for (rank, e) in table.entries.iter().enumerate() {
                        out.serialize((i, rank + 1, e.token, &e.text, e.probability))?;
                    }
                }
            }
        }
        Some(Gradient) => {
            out.write_record(["sample", "target", "loss", "max_abs_diff", "span_residual"])?;
            for r in reports {
                if let ProbeDetails::Gradient { checks, .. } = &r.details {
                    for (i, c) in checks.iter().enumerate() {
                        out.serialize((i, c.target, c.loss, c.max_abs_diff, c.span_residual))?;
                    }
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    fill(&mut buf)?;
    std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}
