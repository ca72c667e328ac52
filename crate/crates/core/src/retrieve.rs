//! Dual-path retrieval with reciprocal-rank fusion.
//!
//! The entity path ranks entities against the query, then collects every
//! hyperedge incident to the top `k_v` of them. The edge path ranks hyperedges
//! against the query text directly. Both ranked lists are merged with
//! `score = 1/r_v + 1/r_h`, where a fact missing from one list contributes 0
//! for that list.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embed::{dot, top_k, EmbedError, Encoder, Vector};
use crate::hypergraph::{HyperedgeId, KnowledgeHypergraph};

#[derive(Debug, thiserror::Error)]
pub enum RetrieveError {
    #[error("query text is empty")]
    EmptyQuery,
    #[error("retrieval depth must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub text: String,
    #[serde(default)]
    pub extracted_entities: Vec<String>,
}

impl RetrievalQuery {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            extracted_entities: Vec::new(),
        }
    }

    pub fn with_entities(text: impl Into<String>, entities: &[&str]) -> Self {
        Self {
            text: text.into(),
            extracted_entities: entities.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalParams {
    pub k_v: usize,
    pub k_h: usize,
    pub k: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self { k_v: 5, k_h: 5, k: 5 }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<(), RetrieveError> {
        if self.k_v == 0 || self.k_h == 0 || self.k == 0 {
            return Err(RetrieveError::ZeroK);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFact {
    pub hyperedge_id: HyperedgeId,
    pub rank_entity_path: Option<u32>,
    pub rank_edge_path: Option<u32>,
    pub fused_score: f64,
}

/// `1/r` for a present rank, 0 for an absent one.
pub fn reciprocal(rank: Option<u32>) -> f64 {
    rank.map_or(0.0, |r| 1.0 / f64::from(r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedFact {
    pub hyperedge_id: HyperedgeId,
    pub text: String,
    pub entities: Vec<String>,
    pub entity_ids: Vec<u32>,
    pub rank_entity_path: Option<u32>,
    pub rank_edge_path: Option<u32>,
    pub fused_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBlock {
    pub facts: Vec<RetrievedFact>,
}

impl KnowledgeBlock {
    /// One `text | entities: a, b` line per fact, in fused order.
    pub fn render(&self) -> String {
        self.facts
            .iter()
            .map(|f| format!("{} | entities: {}", f.text, f.entities.join(", ")))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn entity_ids(&self) -> Vec<u32> {
        self.facts.iter().flat_map(|f| f.entity_ids.iter().copied()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }
}

/// Embeddings a query contributes to both paths.
#[derive(Debug, Clone)]
pub struct QueryVectors {
    pub text: Vector,
    pub entities: Vector,
}

pub fn embed_query(encoder: &dyn Encoder, query: &RetrievalQuery) -> Result<QueryVectors, RetrieveError> {
    if query.text.trim().is_empty() {
        return Err(RetrieveError::EmptyQuery);
    }
    let text = encoder.encode_one(&query.text)?;
    let names: Vec<&str> = query
        .extracted_entities
        .iter()
        .map(String::as_str)
        .filter(|s| !s.trim().is_empty())
        .collect();
    let entities = if names.is_empty() {
        None
    } else {
        Vector::mean_normalized(&encoder.encode(&names)?)
    };
    let entities = entities.unwrap_or_else(|| text.clone());
    Ok(QueryVectors { text, entities })
}

/// Hyperedges incident to the `k_v` entities nearest to `q.entities`, ordered
/// by best incident-entity rank, then similarity to `q.text`, then id.
pub fn entity_path(graph: &KnowledgeHypergraph, q: &QueryVectors, k_v: usize) -> Result<Vec<HyperedgeId>, RetrieveError> {
    if k_v == 0 {
        return Err(RetrieveError::ZeroK);
    }
    if graph.entities().is_empty() {
        return Ok(Vec::new());
    }
    let top = top_k(&q.entities, graph.entity_embeddings(), k_v)?;
    let mut best: HashMap<HyperedgeId, usize> = HashMap::new();
    for (rank, &(ent, _)) in top.iter().enumerate() {
        for &h in graph.incidence(ent as u32) {
            best.entry(h).or_insert(rank);
        }
    }
    let edges = graph.hyperedge_embeddings();
    let mut scored: Vec<(usize, f64, HyperedgeId)> = best
        .into_iter()
        .map(|(h, r)| (r, dot(edges.row(h as usize), q.text.as_slice()), h))
        .collect();
    scored.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    Ok(scored.into_iter().map(|(_, _, h)| h).collect())
}

/// The `k_h` hyperedges nearest to `q.text`.
pub fn edge_path(graph: &KnowledgeHypergraph, q: &QueryVectors, k_h: usize) -> Result<Vec<HyperedgeId>, RetrieveError> {
    if k_h == 0 {
        return Err(RetrieveError::ZeroK);
    }
    if graph.hyperedges().is_empty() {
        return Ok(Vec::new());
    }
    Ok(top_k(&q.text, graph.hyperedge_embeddings(), k_h)?
        .into_iter()
        .map(|(i, _)| i as HyperedgeId)
        .collect())
}

/// Reciprocal-rank fusion of two rank-ordered lists; ranks are 1-based
/// positions, and a repeated id keeps its first position.
pub fn fuse(fv: &[HyperedgeId], fh: &[HyperedgeId], k: usize) -> Vec<RankedFact> {
    let mut ranks: HashMap<HyperedgeId, (Option<u32>, Option<u32>)> = HashMap::new();
    for (i, &h) in fv.iter().enumerate() {
        let e = ranks.entry(h).or_default();
        e.0.get_or_insert(i as u32 + 1);
    }
    for (i, &h) in fh.iter().enumerate() {
        let e = ranks.entry(h).or_default();
        e.1.get_or_insert(i as u32 + 1);
    }
    let mut out: Vec<RankedFact> = ranks
        .into_iter()
        .map(|(h, (rv, rh))| RankedFact {
            hyperedge_id: h,
            rank_entity_path: rv,
            rank_edge_path: rh,
            fused_score: reciprocal(rv) + reciprocal(rh),
        })
        .collect();
    out.sort_by(|a, b| b.fused_score.total_cmp(&a.fused_score).then(a.hyperedge_id.cmp(&b.hyperedge_id)));
    out.truncate(k);
    out
}

/// Fused ranking for `query`.
pub fn rank(
    graph: &KnowledgeHypergraph,
    encoder: &dyn Encoder,
    query: &RetrievalQuery,
    params: &RetrievalParams,
) -> Result<Vec<RankedFact>, RetrieveError> {
    params.validate()?;
    let q = embed_query(encoder, query)?;
    let fv = entity_path(graph, &q, params.k_v)?;
    let fh = edge_path(graph, &q, params.k_h)?;
    Ok(fuse(&fv, &fh, params.k))
}

/// Attaches text and entity names to ranked facts.
pub fn materialize(graph: &KnowledgeHypergraph, ranked: &[RankedFact]) -> KnowledgeBlock {
    let facts = ranked
        .iter()
        .filter_map(|r| {
            let edge = graph.hyperedge(r.hyperedge_id)?;
            Some(RetrievedFact {
                hyperedge_id: r.hyperedge_id,
                text: edge.text.clone(),
                entities: graph.member_names(edge).into_iter().map(String::from).collect(),
                entity_ids: edge.entity_ids.clone(),
                rank_entity_path: r.rank_entity_path,
                rank_edge_path: r.rank_edge_path,
                fused_score: r.fused_score,
            })
        })
        .collect();
    KnowledgeBlock { facts }
}

pub fn retrieve(
    graph: &KnowledgeHypergraph,
    encoder: &dyn Encoder,
    query: &RetrievalQuery,
    params: &RetrievalParams,
) -> Result<KnowledgeBlock, RetrieveError> {
    Ok(materialize(graph, &rank(graph, encoder, query, params)?))
}
