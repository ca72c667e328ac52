//! The n-ary knowledge hypergraph.
//!
//! Every extracted fact becomes one hyperedge: a text segment plus the ordered
//! set of entities it connects. Entities are deduplicated by their normalized
//! name (case-folded, whitespace-collapsed). Entity names and hyperedge texts
//! are embedded with the same [`Encoder`], and the graph is immutable once
//! [`ingest_facts`] returns it.

mod extract;
mod store;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embed::{canonical_text, EmbedError, EmbeddingMatrix, Encoder};

pub use extract::{extract_facts, Document, ExtractError, ExtractionOptions, ExtractionOutcome, SkippedChunk, EXTRACTION_PROMPT};
pub use store::{load, save, Manifest, StoreError, FORMAT_VERSION};

pub type EntityId = u32;
pub type HyperedgeId = u32;

/// Embedding rows may deviate from unit norm by at most this much.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("encoder failure while building the graph: {0}")]
    Embed(#[from] EmbedError),
    #[error("encoder returned {actual}-dimensional vectors, expected {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("graph invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub name: String,
    pub embedding_ref: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperedge {
    pub id: HyperedgeId,
    pub text: String,
    pub entity_ids: Vec<EntityId>,
    pub source_doc: String,
    pub embedding_ref: usize,
}

/// A fact as produced by the extractor or read from a facts file
/// (`{"text", "entities", "doc_id"}` per line).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedFact {
    pub text: String,
    #[serde(rename = "entities")]
    pub entity_names: Vec<String>,
    #[serde(rename = "doc_id")]
    pub source_doc: String,
}

impl ExtractedFact {
    pub fn new(text: impl Into<String>, entities: &[&str], source_doc: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            entity_names: entities.iter().map(|s| s.to_string()).collect(),
            source_doc: source_doc.into(),
        }
    }
}

/// Facts rejected during ingestion. Rejections are not fatal.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BuildReport {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub fact_index: usize,
    pub reason: String,
}

/// Case-folded, whitespace-collapsed entity key.
pub fn normalize_name(name: &str) -> String {
    canonical_text(name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeHypergraph {
    entities: Vec<Entity>,
    hyperedges: Vec<Hyperedge>,
    entity_embeddings: EmbeddingMatrix,
    hyperedge_embeddings: EmbeddingMatrix,
    incidence: Vec<Vec<HyperedgeId>>,
    by_name: HashMap<String, EntityId>,
    encoder_id: String,
}

/// Builds a finalized hypergraph from extracted facts.
pub fn ingest_facts(facts: &[ExtractedFact], encoder: &dyn Encoder) -> Result<(KnowledgeHypergraph, BuildReport), GraphError> {
    let mut report = BuildReport::default();
    let mut names: Vec<String> = Vec::new();
    let mut by_name: HashMap<String, EntityId> = HashMap::new();
    let mut edges: Vec<(String, Vec<EntityId>, String)> = Vec::new();

    for (i, fact) in facts.iter().enumerate() {
        let text = fact.text.trim();
        if text.is_empty() {
            report.rejected.push(Rejection {
                fact_index: i,
                reason: "empty text".into(),
            });
            continue;
        }
        let mut members: Vec<EntityId> = Vec::new();
        for raw in &fact.entity_names {
            let key = normalize_name(raw);
            if key.is_empty() {
                continue;
            }
            let id = *by_name.entry(key.clone()).or_insert_with(|| {
                names.push(key);
                (names.len() - 1) as EntityId
            });
            if !members.contains(&id) {
                members.push(id);
            }
        }
        if members.is_empty() {
            report.rejected.push(Rejection {
                fact_index: i,
                reason: "no entities".into(),
            });
            continue;
        }
        edges.push((text.to_string(), members, fact.source_doc.clone()));
    }
    report.accepted = edges.len();

    let dim = encoder.dimension();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let text_refs: Vec<&str> = edges.iter().map(|e| e.0.as_str()).collect();
    let entity_vecs = encode_batched(encoder, &name_refs)?;
    let edge_vecs = encode_batched(encoder, &text_refs)?;

    let mut entity_embeddings = EmbeddingMatrix::new(dim);
    for v in &entity_vecs {
        if v.dim() != dim {
            return Err(GraphError::DimensionMismatch {
                expected: dim,
                actual: v.dim(),
            });
        }
        entity_embeddings.push(v)?;
    }
    let mut hyperedge_embeddings = EmbeddingMatrix::new(dim);
    for v in &edge_vecs {
        if v.dim() != dim {
            return Err(GraphError::DimensionMismatch {
                expected: dim,
                actual: v.dim(),
            });
        }
        hyperedge_embeddings.push(v)?;
    }

    let entities = names
        .into_iter()
        .enumerate()
        .map(|(i, name)| Entity {
            id: i as EntityId,
            name,
            embedding_ref: i,
        })
        .collect();
    let hyperedges = edges
        .into_iter()
        .enumerate()
        .map(|(i, (text, entity_ids, source_doc))| Hyperedge {
            id: i as HyperedgeId,
            text,
            entity_ids,
            source_doc,
            embedding_ref: i,
        })
        .collect();

    let graph = KnowledgeHypergraph::from_parts(entities, hyperedges, entity_embeddings, hyperedge_embeddings, encoder.model_id())?;
    Ok((graph, report))
}

fn encode_batched(encoder: &dyn Encoder, texts: &[&str]) -> Result<Vec<crate::embed::Vector>, EmbedError> {
    const BATCH: usize = 64;
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(BATCH) {
        out.extend(encoder.encode(chunk)?);
    }
    Ok(out)
}

impl KnowledgeHypergraph {
    /// Assembles a graph from stored tables, rebuilding the incidence map and
    /// checking every invariant.
    pub(crate) fn from_parts(
        entities: Vec<Entity>,
        hyperedges: Vec<Hyperedge>,
        entity_embeddings: EmbeddingMatrix,
        hyperedge_embeddings: EmbeddingMatrix,
        encoder_id: String,
    ) -> Result<Self, GraphError> {
        let by_name = entities.iter().map(|e| (e.name.clone(), e.id)).collect();
        let mut graph = Self {
            entities,
            hyperedges,
            entity_embeddings,
            hyperedge_embeddings,
            incidence: Vec::new(),
            by_name,
            encoder_id,
        };
        graph.incidence = graph.rebuild_incidence();
        graph.validate()?;
        Ok(graph)
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn hyperedges(&self) -> &[Hyperedge] {
        &self.hyperedges
    }

    pub fn entity(&self, id: EntityId) -> Option<&Entity> {
        self.entities.get(id as usize)
    }

    pub fn hyperedge(&self, id: HyperedgeId) -> Option<&Hyperedge> {
        self.hyperedges.get(id as usize)
    }

    /// Looks an entity up by any surface form that normalizes to its name.
    pub fn entity_by_name(&self, name: &str) -> Option<&Entity> {
        self.by_name.get(&normalize_name(name)).and_then(|&id| self.entity(id))
    }

    /// Hyperedges incident to `id`, ascending.
    pub fn incidence(&self, id: EntityId) -> &[HyperedgeId] {
        self.incidence.get(id as usize).map_or(&[], Vec::as_slice)
    }

    pub fn entity_embeddings(&self) -> &EmbeddingMatrix {
        &self.entity_embeddings
    }

    pub fn hyperedge_embeddings(&self) -> &EmbeddingMatrix {
        &self.hyperedge_embeddings
    }

    pub fn dimension(&self) -> usize {
        self.entity_embeddings.dim()
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn is_empty(&self) -> bool {
        self.hyperedges.is_empty()
    }

    /// Entity names of a hyperedge, in membership order.
    pub fn member_names(&self, edge: &Hyperedge) -> Vec<&str> {
        edge.entity_ids
            .iter()
            .filter_map(|&id| self.entity(id).map(|e| e.name.as_str()))
            .collect()
    }

    /// Incidence recomputed from hyperedge membership.
    pub fn rebuild_incidence(&self) -> Vec<Vec<HyperedgeId>> {
        let mut inc = vec![Vec::new(); self.entities.len()];
        for edge in &self.hyperedges {
            for &eid in &edge.entity_ids {
                if let Some(list) = inc.get_mut(eid as usize) {
                    list.push(edge.id);
                }
            }
        }
        inc
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |msg: String| Err(GraphError::Invariant(msg));
        if self.entity_embeddings.dim() != self.hyperedge_embeddings.dim() {
            return bad("entity and hyperedge embeddings differ in dimension".into());
        }
        if self.entity_embeddings.rows() != self.entities.len() {
            return bad(format!(
                "{} entities but {} entity embeddings",
                self.entities.len(),
                self.entity_embeddings.rows()
            ));
        }
        if self.hyperedge_embeddings.rows() != self.hyperedges.len() {
            return bad(format!(
                "{} hyperedges but {} hyperedge embeddings",
                self.hyperedges.len(),
                self.hyperedge_embeddings.rows()
            ));
        }
        if self.by_name.len() != self.entities.len() {
            return bad("entity names are not unique".into());
        }
        for (i, e) in self.entities.iter().enumerate() {
            if e.id as usize != i || e.embedding_ref != i {
                return bad(format!("entity {i} has id {} / embedding_ref {}", e.id, e.embedding_ref));
            }
            if e.name.is_empty() || normalize_name(&e.name) != e.name {
                return bad(format!("entity {i} name {:?} is not normalized", e.name));
            }
        }
        for (i, h) in self.hyperedges.iter().enumerate() {
            if h.id as usize != i || h.embedding_ref != i {
                return bad(format!("hyperedge {i} has id {} / embedding_ref {}", h.id, h.embedding_ref));
            }
            if h.entity_ids.is_empty() {
                return bad(format!("hyperedge {i} has no entities"));
            }
            for (j, &eid) in h.entity_ids.iter().enumerate() {
                if eid as usize >= self.entities.len() {
                    return bad(format!("hyperedge {i} references missing entity {eid}"));
                }
                if h.entity_ids[..j].contains(&eid) {
                    return bad(format!("hyperedge {i} lists entity {eid} twice"));
                }
            }
        }
        if self.incidence != self.rebuild_incidence() {
            return bad("incidence is not the inverse of hyperedge membership".into());
        }
        if let Some(i) = self.incidence.iter().position(Vec::is_empty) {
            return bad(format!("entity {i} participates in no hyperedge"));
        }
        for (what, m) in [("entity", &self.entity_embeddings), ("hyperedge", &self.hyperedge_embeddings)] {
            for r in 0..m.rows() {
                let n = crate::embed::dot(m.row(r), m.row(r)).sqrt();
                if (n - 1.0).abs() > NORM_TOLERANCE {
                    return bad(format!("{what} embedding {r} has norm {n}"));
                }
            }
        }
        Ok(())
    }
}
