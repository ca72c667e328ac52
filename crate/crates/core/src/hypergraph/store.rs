//! On-disk graph directory.
//!
//! ```text
//! manifest.json        format version, dimension, counts, encoder id, sha256 per file
//! entities.jsonl       one Entity per line
//! hyperedges.jsonl     one Hyperedge per line
//! emb_entities.bin     row-major little-endian f32, entities × dim
//! emb_hyperedges.bin   row-major little-endian f32, hyperedges × dim
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Entity, GraphError, Hyperedge, KnowledgeHypergraph};
use crate::embed::EmbeddingMatrix;

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const ENTITIES: &str = "entities.jsonl";
const HYPEREDGES: &str = "hyperedges.jsonl";
const EMB_ENTITIES: &str = "emb_entities.bin";
const EMB_HYPEREDGES: &str = "emb_hyperedges.bin";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("graph format version {found} is not supported (expected {expected})")]
    IncompatibleVersion { found: u32, expected: u32 },
    #[error("checksum mismatch for {file}: manifest says {expected}, file hashes to {actual}")]
    Checksum {
        file: String,
        expected: String,
        actual: String,
    },
    #[error("malformed {file}: {reason}")]
    Malformed { file: String, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dim: usize,
    pub entity_count: usize,
    pub hyperedge_count: usize,
    pub encoder: String,
    pub checksums: BTreeMap<String, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("graph records serialize");
        out.push(b'\n');
    }
    out
}

fn f32_bytes(m: &EmbeddingMatrix) -> Vec<u8> {
    m.raw().iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Writes `graph` into `dir`, creating it if needed.
pub fn save(graph: &KnowledgeHypergraph, dir: &Path) -> Result<Manifest, StoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files: [(&str, Vec<u8>); 4] = [
        (ENTITIES, jsonl(graph.entities())),
        (HYPEREDGES, jsonl(graph.hyperedges())),
        (EMB_ENTITIES, f32_bytes(graph.entity_embeddings())),
        (EMB_HYPEREDGES, f32_bytes(graph.hyperedge_embeddings())),
    ];
    let mut checksums = BTreeMap::new();
    for (name, bytes) in &files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        checksums.insert(name.to_string(), sha256_hex(bytes));
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dim: graph.dimension(),
        entity_count: graph.entities().len(),
        hyperedge_count: graph.hyperedges().len(),
        encoder: graph.encoder_id().to_string(),
        checksums,
    };
    let path = dir.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(|e| StoreError::Malformed {
        file: MANIFEST.into(),
        reason: e.to_string(),
    })?;
    f.write_all(b"\n").map_err(io_err(&path))?;
    Ok(manifest)
}

fn read_checked(dir: &Path, name: &str, manifest: &Manifest) -> Result<Vec<u8>, StoreError> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let expected = manifest.checksums.get(name).ok_or_else(|| StoreError::Malformed {
        file: MANIFEST.into(),
        reason: format!("no checksum recorded for {name}"),
    })?;
    let actual = sha256_hex(&bytes);
    if &actual != expected {
        return Err(StoreError::Checksum {
            file: name.into(),
            expected: expected.clone(),
            actual,
        });
    }
    Ok(bytes)
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(name: &str, bytes: &[u8]) -> Result<Vec<T>, StoreError> {
    let mut out = Vec::new();
    for (i, line) in bytes.lines().enumerate() {
        let line = line.map_err(|e| StoreError::Malformed {
            file: name.into(),
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StoreError::Malformed {
            file: name.into(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

fn parse_matrix(name: &str, bytes: &[u8], dim: usize, rows: usize) -> Result<EmbeddingMatrix, StoreError> {
    if bytes.len() != rows * dim * 4 {
        return Err(StoreError::Malformed {
            file: name.into(),
            reason: format!("expected {} bytes, found {}", rows * dim * 4, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    EmbeddingMatrix::from_raw(dim, data).map_err(|e| StoreError::Malformed {
        file: name.into(),
        reason: e.to_string(),
    })
}

/// Reads a graph directory written by [`save`].
pub fn load(dir: &Path) -> Result<KnowledgeHypergraph, StoreError> {
    let path = dir.join(MANIFEST);
    let raw = fs::read(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| StoreError::Malformed {
        file: MANIFEST.into(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(StoreError::IncompatibleVersion {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let entities: Vec<Entity> = parse_jsonl(ENTITIES, &read_checked(dir, ENTITIES, &manifest)?)?;
    let hyperedges: Vec<Hyperedge> = parse_jsonl(HYPEREDGES, &read_checked(dir, HYPEREDGES, &manifest)?)?;
    if entities.len() != manifest.entity_count || hyperedges.len() != manifest.hyperedge_count {
        return Err(StoreError::Malformed {
            file: MANIFEST.into(),
            reason: format!(
                "counts say {}/{} but files hold {}/{}",
                manifest.entity_count,
                manifest.hyperedge_count,
                entities.len(),
                hyperedges.len()
            ),
        });
    }
    let ent = parse_matrix(EMB_ENTITIES, &read_checked(dir, EMB_ENTITIES, &manifest)?, manifest.dim, entities.len())?;
    let hyp = parse_matrix(EMB_HYPEREDGES, &read_checked(dir, EMB_HYPEREDGES, &manifest)?, manifest.dim, hyperedges.len())?;
    Ok(KnowledgeHypergraph::from_parts(entities, hyperedges, ent, hyp, manifest.encoder)?)
}
