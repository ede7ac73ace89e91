//! Embedding store: one JSON header line, then `count * d` little-endian
//! `f32` values, row-major in header id order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use retap_core::{EmbeddingRecord, SubLayerTap, TokenId};
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "retap-embeddings/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub format: String,
    pub backend_id: String,
    pub d: usize,
    pub count: usize,
    pub tap: SubLayerTap,
    pub ids: Vec<String>,
    pub prompt_hashes: Vec<String>,
    pub predicted_tokens: Vec<TokenId>,
    /// Resolved run configuration.
    pub config: serde_json::Value,
    /// Inputs that could not be embedded.
    #[serde(default)]
    pub errors: Vec<crate::report::ErrorRecord>,
}

impl StoreHeader {
    pub fn new(
        backend_id: &str,
        d: usize,
        tap: SubLayerTap,
        records: &[EmbeddingRecord],
        config: serde_json::Value,
        errors: Vec<crate::report::ErrorRecord>,
    ) -> Self {
        Self {
            format: FORMAT.into(),
            backend_id: backend_id.into(),
            d,
            count: records.len(),
            tap,
            ids: records.iter().map(|r| r.input_id.clone()).collect(),
            prompt_hashes: records.iter().map(|r| r.prompt_hash.clone()).collect(),
            predicted_tokens: records.iter().map(|r| r.predicted_token).collect(),
            config,
            errors,
        }
    }
}

pub fn write_store(mut w: impl Write, header: &StoreHeader, records: &[EmbeddingRecord]) -> Result<()> {
    ensure!(header.count == records.len(), "header count {} != {} records", header.count, records.len());
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for r in records {
        ensure!(r.vector.len() == header.d, "record '{}' has dimension {}", r.input_id, r.vector.len());
        for x in &r.vector {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_store(path: &Path, header: &StoreHeader, records: &[EmbeddingRecord]) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    write_store(&mut w, header, records)?;
    w.flush()?;
    Ok(())
}

pub fn read_store(r: impl Read) -> Result<(StoreHeader, Vec<EmbeddingRecord>)> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: StoreHeader = serde_json::from_str(line.trim_end()).context("store header")?;
    if header.format != FORMAT {
        bail!("unsupported store format '{}'", header.format);
    }
    ensure!(
        header.ids.len() == header.count
            && header.prompt_hashes.len() == header.count
            && header.predicted_tokens.len() == header.count,
        "store header lists do not match count {}",
        header.count
    );
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    ensure!(
        body.len() == header.count * header.d * 4,
        "store body has {} bytes, expected {}",
        body.len(),
        header.count * header.d * 4
    );
    let mut floats = body.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let records = (0..header.count)
        .map(|i| EmbeddingRecord {
            input_id: header.ids[i].clone(),
            vector: floats.by_ref().take(header.d).collect(),
            backend_id: header.backend_id.clone(),
            tap: header.tap,
            prompt_hash: header.prompt_hashes[i].clone(),
            predicted_token: header.predicted_tokens[i],
        })
        .collect();
    Ok((header, records))
}

pub fn load_store(path: &Path) -> Result<(StoreHeader, Vec<EmbeddingRecord>)> {
    let file = std::fs::File::open(path).with_context(|| format!("opening store {}", path.display()))?;
    read_store(file).with_context(|| format!("reading store {}", path.display()))
}
