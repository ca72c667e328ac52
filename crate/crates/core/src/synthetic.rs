//! Seeded synthetic QA task over a small generated hypergraph.
//!
//! Entities are pronounceable pseudo-words. Each hyperedge states
//! `"{a} {relation} {b}"`, optionally `"... with {c}"`, and a subject never has
//! the same relation twice, so `(subject, relation)` identifies one object.
//! One-hop questions ask for that object; two-hop questions chain two
//! relations through an intermediate entity.
//!
//! Candidate questions are kept only if the toy policy can actually reach the
//! gold: it must appear among the answer candidates after retrieving on the
//! question (one hop), or after a follow-up query on one of the first
//! candidates (two hops). The states along each such path must also fall in
//! distinct policy buckets, so that a tabular policy can tell them apart.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::Encoder;
use crate::env::{parse_turn, AgentState, EnvParams, Environment};
use crate::evalkit::QAInstance;
use crate::grpo::ToySettings;
use crate::hypergraph::{ingest_facts, normalize_name, ExtractedFact, GraphError, KnowledgeHypergraph};
use crate::policy::ActionMenu;
use crate::retrieve::RetrieveError;

const RELATIONS: [(&str, &str); 12] = [
    ("guards", "guard"),
    ("trains", "train"),
    ("paints", "paint"),
    ("follows", "follow"),
    ("feeds", "feed"),
    ("visits", "visit"),
    ("hires", "hire"),
    ("admires", "admire"),
    ("teaches", "teach"),
    ("rescues", "rescue"),
    ("warns", "warn"),
    ("shelters", "shelter"),
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const MAX_GRAPH_ATTEMPTS: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum SyntheticError {
    #[error("invalid synthetic sizes: {0}")]
    Sizes(String),
    #[error("no graph with {0} answerable questions found within {MAX_GRAPH_ATTEMPTS} attempts")]
    Exhausted(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub entities: usize,
    pub hyperedges: usize,
    pub questions: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            entities: 20,
            hyperedges: 30,
            questions: 16,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        if self.entities < 5 {
            return Err(SyntheticError::Sizes("at least 5 entities are required".into()));
        }
        if self.hyperedges < self.entities / 2 {
            return Err(SyntheticError::Sizes("too few hyperedges to cover every entity".into()));
        }
        if self.hyperedges > self.entities * RELATIONS.len() {
            return Err(SyntheticError::Sizes("more hyperedges than distinct (subject, relation) pairs".into()));
        }
        if self.questions == 0 {
            return Err(SyntheticError::Sizes("at least one question is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticSpec,
    pub facts: Vec<ExtractedFact>,
    pub tasks: Vec<QAInstance>,
}

#[derive(Debug, Clone)]
struct Triple {
    subject: usize,
    relation: usize,
    object: usize,
    text: String,
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut s = String::new();
    for _ in 0..syllables {
        s.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
        s.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
    }
    if rng.random_bool(0.5) {
        s.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
    }
    s
}

fn names(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let reserved: HashSet<&str> = ["whom", "does", "the", "one", "with"]
        .into_iter()
        .chain(RELATIONS.iter().flat_map(|(a, b)| [*a, *b]))
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng);
        if !reserved.contains(w.as_str()) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn facts_for(rng: &mut ChaCha8Rng, names: &[String], count: usize) -> Option<(Vec<ExtractedFact>, Vec<Triple>)> {
    let mut used_pairs = HashSet::new();
    let mut covered = vec![false; names.len()];
    let mut facts = Vec::with_capacity(count);
    let mut triples = Vec::with_capacity(count);
    let mut guard = 0;
    while facts.len() < count {
        guard += 1;
        if guard > count * 50 {
            return None;
        }
        // Steer subjects towards uncovered entities so every name appears.
        let uncovered: Vec<usize> = (0..names.len()).filter(|&i| !covered[i]).collect();
        let a = if !uncovered.is_empty() && rng.random_bool(0.5) {
            uncovered[rng.random_range(0..uncovered.len())]
        } else {
            rng.random_range(0..names.len())
        };
        let r = rng.random_range(0..RELATIONS.len());
        if !used_pairs.insert((a, r)) {
            continue;
        }
        let b = loop {
            let b = rng.random_range(0..names.len());
            if b != a {
                break b;
            }
        };
        let mut members = vec![a, b];
        let mut text = format!("{} {} {}", names[a], RELATIONS[r].0, names[b]);
        if rng.random_bool(0.3) {
            let c = rng.random_range(0..names.len());
            if c != a && c != b {
                text.push_str(&format!(" with {}", names[c]));
                members.push(c);
            }
        }
        for &m in &members {
            covered[m] = true;
        }
        let refs: Vec<&str> = members.iter().map(|&m| names[m].as_str()).collect();
        facts.push(ExtractedFact::new(text.clone(), &refs, format!("syn-{}", facts.len())));
        triples.push(Triple {
            subject: a,
            relation: r,
            object: b,
            text,
        });
    }
    covered.iter().all(|&c| c).then_some((facts, triples))
}

struct Probe<'a> {
    env: Environment<'a>,
    menu: ActionMenu,
    toy: ToySettings,
    fallback: Vec<String>,
    rank_turns: usize,
}

impl Probe<'_> {
    fn advance(&self, state: &mut AgentState, action: usize) -> Result<(), SyntheticError> {
        let text = self.menu.render(action, state, &self.fallback);
        self.env.step(state, parse_turn(&text)).map_err(|e| match e {
            crate::env::EnvError::Retrieve(r) => SyntheticError::Retrieve(r),
            other => SyntheticError::Sizes(other.to_string()),
        })?;
        Ok(())
    }

    fn bucket(&self, state: &AgentState) -> (usize, usize) {
        let mut ids = state.retrieved_entity_ids();
        ids.sort_unstable();
        ids.dedup();
        let p = crate::policy::ToyPolicyParams::new(self.rank_turns, self.toy.hash_buckets, 1);
        (state.turn_index, p.bucket_for(state.turn_index, &ids))
    }

    fn answerable(&self, state: &AgentState, gold: &str) -> bool {
        let cands = self.menu.candidates(state);
        cands.iter().take(self.menu.answer_candidates).any(|c| c == gold)
    }

    fn in_candidates(&self, state: &AgentState, gold: &str) -> bool {
        self.menu.candidates(state).iter().any(|c| c == gold)
    }
}

/// A reachable question with the policy states along its intended path.
struct Accepted {
    instance: QAInstance,
    states: Vec<(usize, usize)>,
}

fn one_hop(probe: &Probe<'_>, names: &[String], t: &Triple, id: usize) -> Result<Option<Accepted>, SyntheticError> {
    let question = format!("Whom does {} {}?", names[t.subject], RELATIONS[t.relation].1);
    let gold = &names[t.object];
    let mut s = AgentState::new(question.clone());
    probe.advance(&mut s, 0)?;
    if !probe.answerable(&s, gold) {
        return Ok(None);
    }
    Ok(Some(Accepted {
        states: vec![probe.bucket(&s)],
        instance: QAInstance {
            id: format!("q{id}"),
            question,
            golden_answers: vec![gold.clone()],
            gold_knowledge: Some(t.text.clone()),
            anchor: Some(names[t.subject].clone()),
            hops: Some(1),
        },
    }))
}

fn two_hop(probe: &Probe<'_>, names: &[String], first: &Triple, second: &Triple, id: usize) -> Result<Option<Accepted>, SyntheticError> {
    let question = format!(
        "Whom does the one {} {} {}?",
        names[first.subject], RELATIONS[first.relation].0, RELATIONS[second.relation].1
    );
    let gold = &names[second.object];
    let mut s = AgentState::new(question.clone());
    probe.advance(&mut s, 0)?;
    if probe.in_candidates(&s, gold) {
        return Ok(None);
    }
    let after_first = probe.bucket(&s);
    for j in 1..probe.menu.query_templates {
        let mut s2 = s.clone();
        probe.advance(&mut s2, j)?;
        if probe.answerable(&s2, gold) {
            return Ok(Some(Accepted {
                states: vec![after_first, probe.bucket(&s2)],
                instance: QAInstance {
                    id: format!("q{id}"),
                    question,
                    golden_answers: vec![gold.clone()],
                    gold_knowledge: Some(format!("{}\n{}", first.text, second.text)),
                    anchor: Some(names[first.subject].clone()),
                    hops: Some(2),
                },
            }));
        }
    }
    Ok(None)
}

fn select(
    probe: &Probe<'_>,
    names: &[String],
    triples: &[Triple],
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<QAInstance>>, SyntheticError> {
    let want_two = spec.questions / 2;
    let mut singles: Vec<usize> = (0..triples.len()).collect();
    singles.shuffle(rng);
    let mut chains: Vec<(usize, usize)> = Vec::new();
    for (i, a) in triples.iter().enumerate() {
        for (j, b) in triples.iter().enumerate() {
            let questioned = HashSet::from([a.subject, a.object]);
            if i != j && a.object == b.subject && !questioned.contains(&b.object) && a.relation != b.relation {
                chains.push((i, j));
            }
        }
    }
    chains.shuffle(rng);

    let mut taken_states: HashSet<(usize, usize)> = HashSet::new();
    let mut questions: HashSet<String> = HashSet::new();
    let mut chosen: Vec<Accepted> = Vec::new();
    let mut accept = |acc: Accepted, chosen: &mut Vec<Accepted>| {
        let distinct: HashSet<_> = acc.states.iter().collect();
        if distinct.len() != acc.states.len()
            || acc.states.iter().any(|s| taken_states.contains(s))
            || !questions.insert(acc.instance.question.clone())
        {
            return false;
        }
        taken_states.extend(acc.states.iter().copied());
        chosen.push(acc);
        true
    };

    let mut two = 0;
    for &(i, j) in &chains {
        if two == want_two {
            break;
        }
        if let Some(acc) = two_hop(probe, names, &triples[i], &triples[j], 0)? {
            if accept(acc, &mut chosen) {
                two += 1;
            }
        }
    }
    for &i in &singles {
        if chosen.len() == spec.questions {
            break;
        }
        if let Some(acc) = one_hop(probe, names, &triples[i], 0)? {
            accept(acc, &mut chosen);
        }
    }
    if chosen.len() < spec.questions || two < want_two {
        return Ok(None);
    }
    // Interleave hop counts so any prefix of the task list is mixed.
    let (mut twos, mut ones): (Vec<_>, Vec<_>) = chosen.into_iter().partition(|a| a.instance.hops == Some(2));
    let mut out = Vec::with_capacity(spec.questions);
    while !twos.is_empty() || !ones.is_empty() {
        if !ones.is_empty() {
            out.push(ones.remove(0).instance);
        }
        if !twos.is_empty() {
            out.push(twos.remove(0).instance);
        }
    }
    for (k, inst) in out.iter_mut().enumerate() {
        inst.id = format!("q{k:02}");
    }
    Ok(Some(out))
}

/// Generates a task; identical inputs give identical output.
pub fn generate(
    spec: &SyntheticSpec,
    encoder: &dyn Encoder,
    env_params: &EnvParams,
    toy: &ToySettings,
) -> Result<SyntheticTask, SyntheticError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..MAX_GRAPH_ATTEMPTS {
        let names = names(&mut rng, spec.entities);
        let Some((facts, triples)) = facts_for(&mut rng, &names, spec.hyperedges) else {
            continue;
        };
        let (graph, _) = ingest_facts(&facts, encoder)?;
        let probe = Probe {
            env: Environment::new(&graph, encoder, *env_params),
            menu: toy.menu(),
            toy: *toy,
            fallback: graph.entities().iter().map(|e| e.name.clone()).collect(),
            rank_turns: env_params.max_turns.max(1),
        };
        if let Some(tasks) = select(&probe, &names, &triples, spec, &mut rng)? {
            return Ok(SyntheticTask {
                spec: *spec,
                facts,
                tasks,
            });
        }
    }
    Err(SyntheticError::Exhausted(spec.questions))
}

/// Structural answerability: the gold shares a hyperedge with the anchor, or
/// with an entity that shares a hyperedge with the anchor.
pub fn is_answerable(graph: &KnowledgeHypergraph, task: &QAInstance) -> bool {
    let Some(anchor) = task.anchor.as_deref().and_then(|a| graph.entity_by_name(a)) else {
        return false;
    };
    let neighbours = |id: u32| -> BTreeSet<u32> {
        graph
            .incidence(id)
            .iter()
            .filter_map(|&h| graph.hyperedge(h))
            .flat_map(|h| h.entity_ids.iter().copied())
            .collect()
    };
    let one = neighbours(anchor.id);
    let two: BTreeSet<u32> = one.iter().flat_map(|&e| neighbours(e)).collect();
    task.golden_answers.iter().any(|g| {
        let key = normalize_name(g);
        graph
            .entity_by_name(&key)
            .is_some_and(|e| e.id != anchor.id && (one.contains(&e.id) || two.contains(&e.id)))
    })
}

pub fn facts_jsonl(facts: &[ExtractedFact]) -> String {
    facts
        .iter()
        .map(|f| serde_json::to_string(f).expect("facts serialize") + "\n")
        .collect()
}

pub fn tasks_jsonl(tasks: &[QAInstance]) -> String {
    tasks
        .iter()
        .map(|t| serde_json::to_string(t).expect("tasks serialize") + "\n")
        .collect()
}
