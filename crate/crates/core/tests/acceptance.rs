//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use hyperrag::embed::Encoder;
use hyperrag::env::grammar::{serialize, TAG_MARKERS};
use hyperrag::env::{parse_turn, Environment};
use hyperrag::evalkit::{evaluate_run, exact_match, f1_best, normalize_answer, QAInstance, Run};
use hyperrag::grpo::{advantages, objective_and_grad, toy_runs, train_toy, GroupBatch, GrpoConfig, NormKind, ToySettings, TrainReport};
use hyperrag::hypergraph::{self, ingest_facts, ExtractedFact, KnowledgeHypergraph};
use hyperrag::policy::{ActionMenu, Emission, Policy, PolicyError, ToyPolicy, ToyPolicyParams};
use hyperrag::retrieve::{fuse, rank, reciprocal, RankedFact};
use hyperrag::reward::{combine, format_reward, token_f1, total_reward};
use hyperrag::synthetic::{facts_jsonl, generate, tasks_jsonl, SyntheticSpec, SyntheticTask};
use hyperrag::{ActionKind, AgentState, EnvParams, HashEncoder, RetrievalParams, RetrievalQuery, Trajectory};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- retrieval

const WORDS: [&str; 16] = [
    "river", "stone", "north", "lamp", "quiet", "harbor", "seven", "glass", "ember", "field", "copper", "wind",
    "orchard", "signal", "winter", "marble",
];

fn pseudo_name(rng: &mut ChaCha8Rng) -> String {
    let c = b"bdfgklmnprstvz";
    let v = b"aeiou";
    (0..rng.random_range(2..4))
        .map(|_| format!("{}{}", c[rng.random_range(0..c.len())] as char, v[rng.random_range(0..v.len())] as char))
        .collect()
}

fn random_graph(rng: &mut ChaCha8Rng, enc: &HashEncoder) -> (KnowledgeHypergraph, Vec<String>) {
    let n_names = rng.random_range(1..=50);
    let names: Vec<String> = (0..n_names).map(|_| pseudo_name(rng)).collect();
    let n_facts = rng.random_range(1..=50);
    let mut facts = Vec::with_capacity(n_facts);
    for i in 0..n_facts {
        let members: Vec<&str> = (0..rng.random_range(1..=4)).map(|_| names.choose(rng).unwrap().as_str()).collect();
        let mut words: Vec<String> = members.iter().map(|s| s.to_string()).collect();
        for _ in 0..rng.random_range(0..5) {
            words.push(WORDS.choose(rng).unwrap().to_string());
        }
        if rng.random_bool(0.1) {
            words.truncate(1);
        }
        facts.push(ExtractedFact::new(words.join(" "), &members, format!("d{i}")));
    }
    let (g, _) = ingest_facts(&facts, enc).expect("random graph ingests");
    (g, names)
}

fn oracle_dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += f64::from(a[i]) * f64::from(b[i]);
    }
    s
}

fn oracle_rank(graph: &KnowledgeHypergraph, enc: &HashEncoder, q: &RetrievalQuery, p: &RetrievalParams) -> Vec<RankedFact> {
    let text = enc.encode_one(&q.text).unwrap().0;
    let names: Vec<&String> = q.extracted_entities.iter().filter(|s| !s.trim().is_empty()).collect();
    let mut ent_vec = text.clone();
    if !names.is_empty() {
        let mut acc = vec![0f64; text.len()];
        for n in &names {
            let v = enc.encode_one(n).unwrap().0;
            for (a, x) in acc.iter_mut().zip(v) {
                *a += f64::from(x);
            }
        }
        let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 {
            ent_vec = acc.iter().map(|a| (a / norm) as f32).collect();
        }
    }

    let ents = graph.entity_embeddings();
    let mut e_scores: Vec<(f64, usize)> = (0..ents.rows()).map(|i| (oracle_dot(&ent_vec, ents.row(i)), i)).collect();
    e_scores.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    e_scores.truncate(p.k_v);
    let ent_rank: HashMap<u32, usize> = e_scores.iter().enumerate().map(|(r, &(_, i))| (i as u32, r)).collect();

    let edges = graph.hyperedge_embeddings();
    let mut fv: Vec<(usize, f64, u32)> = Vec::new();
    for h in graph.hyperedges() {
        if let Some(best) = h.entity_ids.iter().filter_map(|e| ent_rank.get(e)).min() {
            fv.push((*best, oracle_dot(&text, edges.row(h.id as usize)), h.id));
        }
    }
    fv.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.partial_cmp(&a.1).unwrap()).then(a.2.cmp(&b.2)));

    let mut fh: Vec<(f64, u32)> = graph.hyperedges().iter().map(|h| (oracle_dot(&text, edges.row(h.id as usize)), h.id)).collect();
    fh.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    fh.truncate(p.k_h);

    let mut ranks: BTreeMap<u32, (Option<u32>, Option<u32>)> = BTreeMap::new();
    for (i, &(_, _, h)) in fv.iter().enumerate() {
        ranks.entry(h).or_default().0 = Some(i as u32 + 1);
    }
    for (i, &(_, h)) in fh.iter().enumerate() {
        ranks.entry(h).or_default().1 = Some(i as u32 + 1);
    }
    let mut out: Vec<RankedFact> = ranks
        .into_iter()
        .map(|(h, (rv, rh))| RankedFact {
            hyperedge_id: h,
            rank_entity_path: rv,
            rank_edge_path: rh,
            fused_score: rv.map_or(0.0, |r| 1.0 / f64::from(r)) + rh.map_or(0.0, |r| 1.0 / f64::from(r)),
        })
        .collect();
    out.sort_by(|a, b| b.fused_score.partial_cmp(&a.fused_score).unwrap().then(a.hyperedge_id.cmp(&b.hyperedge_id)));
    out.truncate(p.k);
    out
}

fn random_query(rng: &mut ChaCha8Rng, names: &[String]) -> RetrievalQuery {
    let mut words: Vec<String> = (0..rng.random_range(1..5)).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
    if rng.random_bool(0.6) {
        words.insert(rng.random_range(0..=words.len()), names.choose(rng).unwrap().clone());
    }
    let mut q = RetrievalQuery::new(words.join(" "));
    match rng.random_range(0..4) {
        0 => {}
        1 => q.extracted_entities = vec!["  ".into()],
        2 => q.extracted_entities = vec![pseudo_name(rng)],
        _ => {
            q.extracted_entities = (0..rng.random_range(1..4)).map(|_| names.choose(rng).unwrap().clone()).collect();
        }
    }
    q
}

fn random_params(rng: &mut ChaCha8Rng) -> RetrievalParams {
    RetrievalParams {
        k_v: rng.random_range(1..=8),
        k_h: rng.random_range(1..=8),
        k: rng.random_range(1..=10),
    }
}

fn criterion_1() -> Outcome {
    let enc = HashEncoder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut queries = 0usize;
    for g_i in 0..200 {
        let (graph, names) = random_graph(&mut rng, &enc);
        for _ in 0..5 {
            let q = random_query(&mut rng, &names);
            let p = random_params(&mut rng);
            let got = rank(&graph, &enc, &q, &p).map_err(|e| e.to_string())?;
            let want = oracle_rank(&graph, &enc, &q, &p);
            check(got == want, || format!("graph {g_i}, query {:?} {p:?}: got {got:?}, oracle {want:?}", q.text))?;
            queries += 1;
        }
    }
    let took = start.elapsed();
    check(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!("200 graphs, {queries} queries match the brute-force oracle in {:.1}s", took.as_secs_f64()))
}

// ---------------------------------------------------------------- fusion

fn criterion_2() -> Outcome {
    let enc = HashEncoder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (graph, names) = random_graph(&mut rng, &enc);
        let q = random_query(&mut rng, &names);
        let p = random_params(&mut rng);
        for f in rank(&graph, &enc, &q, &p).map_err(|e| e.to_string())? {
            let mut expect = 0.0;
            if let Some(r) = f.rank_entity_path {
                expect += 1.0 / f64::from(r);
            }
            if let Some(r) = f.rank_edge_path {
                expect += 1.0 / f64::from(r);
            }
            check(f.rank_entity_path.is_some() || f.rank_edge_path.is_some(), || format!("{f:?} has no rank"))?;
            worst = worst.max((f.fused_score - expect).abs());
            checked += 1;
        }
    }
    check(worst <= 1e-12, || format!("max deviation {worst:e}"))?;

    let only_h = fuse(&[], &[7, 3], 5);
    check(
        only_h.iter().map(|f| (f.hyperedge_id, f.fused_score)).collect::<Vec<_>>() == vec![(7, 1.0), (3, 0.5)],
        || format!("edge-only fusion {only_h:?}"),
    )?;
    let only_v = fuse(&[4], &[], 5);
    check(only_v.len() == 1 && only_v[0].rank_edge_path.is_none() && only_v[0].fused_score == 1.0, || format!("{only_v:?}"))?;
    let mixed = fuse(&[1, 2, 3], &[3, 9, 1], 10);
    let table: Vec<(u32, f64)> = mixed.iter().map(|f| (f.hyperedge_id, f.fused_score)).collect();
    let want = [(1, 1.0 + 1.0 / 3.0), (3, 1.0 / 3.0 + 1.0), (2, 0.5), (9, 0.5)];
    for ((gi, gs), (wi, ws)) in table.iter().zip(want.iter()) {
        check(gi == wi && (gs - ws).abs() <= 1e-12, || format!("mixed fusion {table:?}"))?;
    }
    check(reciprocal(None) == 0.0 && reciprocal(Some(4)) == 0.25, || "reciprocal".into())?;
    check(fuse(&[1, 2], &[3], 1).len() == 1, || "truncation".into())?;
    Ok(format!("{checked} fused scores within {worst:e} of 1/r_v + 1/r_h; absent-rank cases exact"))
}

// ---------------------------------------------------------------- reward

fn trajectory(turns: &[&str]) -> Trajectory {
    let mut state = AgentState::new("q");
    for t in turns {
        state.history.push(parse_turn(t));
        state.turn_index += 1;
    }
    state.terminated = true;
    Trajectory::from_state(state)
}

fn random_answer(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..5);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn criterion_3() -> Outcome {
    let five = ["<think>a</think><query>x</query>"; 4]
        .into_iter()
        .chain(["<think>a</think><answer>paris</answer>"])
        .collect::<Vec<_>>();
    let t = trajectory(&five);
    check(format_reward(&t) == 1.0, || format!("five well-formed turns gave format {}", format_reward(&t)))?;
    let two = trajectory(&["<think>a</think><query>x</query>", "<think>a</think><answer>paris</answer>"]);
    check(format_reward(&two) == 1.0, || format!("two well-formed turns gave format {}", format_reward(&two)))?;
    let one = trajectory(&["<think>a</think><answer>paris</answer>"]);
    check(format_reward(&one) == 0.5, || "one turn".into())?;
    let none = trajectory(&["no tags at all"]);
    check(format_reward(&none) == 0.0, || "zero turns".into())?;

    let f1 = token_f1("Paris France", "paris").map_err(|e| e.to_string())?;
    check((f1 - 2.0 / 3.0).abs() < 1e-9 && format!("{f1:.4}") == "0.6667", || format!("f1 {f1}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for i in 0..1000 {
        let ans = random_answer(&mut rng);
        let gold = random_answer(&mut rng);
        let golds = vec![gold.clone()];
        let ans_turn = format!("<think>t</think><answer>{ans}</answer>");
        let half = trajectory(&[ans_turn.as_str()]);
        let r = total_reward(&half, &golds).map_err(|e| e.to_string())?;
        check(r.total == -0.5 && r.format == 0.5, || format!("case {i}: gated total {r:?}"))?;
        let full = trajectory(&["<think>t</think><query>x</query>", ans_turn.as_str()]);
        let r = total_reward(&full, &golds).map_err(|e| e.to_string())?;
        let f = token_f1(&ans, &gold).map_err(|e| e.to_string())?;
        check((r.total - f).abs() < 1e-12 && r.answer == f, || format!("case {i}: open gate {r:?} vs f1 {f}"))?;
        let bare = trajectory(&[format!("<answer>{ans}</answer>").as_str()]);
        let r = total_reward(&bare, &golds).map_err(|e| e.to_string())?;
        check(r.total == -1.0, || format!("case {i}: malformed {r:?}"))?;
    }
    check(combine(0.5, 1.0).total == -0.5 && combine(1.0, 1.0).total == 1.0, || "combine".into())?;
    Ok("format capped at 1 from two turns, F1 0.6667, answer term gated off for 1000 random answers".into())
}

// ---------------------------------------------------------------- advantages

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_mean = 0.0f64;
    let mut worst_shift = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=16);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = advantages(&rewards, NormKind::StdEps).map_err(|e| e.to_string())?;
        worst_mean = worst_mean.max((a.iter().sum::<f64>() / n as f64).abs());
        let c = rng.random_range(-5.0..5.0);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
        let b = advantages(&shifted, NormKind::StdEps).map_err(|e| e.to_string())?;
        for (x, y) in a.iter().zip(&b) {
            worst_shift = worst_shift.max((x - y).abs());
        }
    }
    check(worst_mean <= 1e-9, || format!("group mean {worst_mean:e}"))?;
    check(worst_shift <= 1e-9, || format!("shift difference {worst_shift:e}"))?;
    for norm in [NormKind::Std, NormKind::StdEps] {
        let z = advantages(&[0.3; 8], norm).map_err(|e| e.to_string())?;
        check(z.iter().all(|&x| x == 0.0), || format!("degenerate group {z:?}"))?;
    }
    Ok(format!("1000 groups: |mean| <= {worst_mean:.1e}, shift delta <= {worst_shift:.1e}, constant groups give zeros"))
}

// ---------------------------------------------------------------- gradient

struct Fixture {
    task: SyntheticTask,
    graph: KnowledgeHypergraph,
}

fn fixture(seed: u64) -> Fixture {
    let enc = HashEncoder::default();
    let task = generate(
        &SyntheticSpec { seed, ..Default::default() },
        &enc,
        &EnvParams::default(),
        &ToySettings::default(),
    )
    .expect("synthetic task");
    let (graph, _) = ingest_facts(&task.facts, &enc).expect("graph");
    Fixture { task, graph }
}

fn random_table(rng: &mut ChaCha8Rng, turns: usize, buckets: usize, actions: usize, scale: f64) -> ToyPolicyParams {
    let logits = (0..turns * buckets * actions).map(|_| rng.random_range(-scale..scale)).collect();
    ToyPolicyParams::from_logits(turns, buckets, actions, logits).unwrap()
}

fn criterion_5() -> Outcome {
    let fx = fixture(5);
    let enc = HashEncoder::default();
    let env = Environment::new(&fx.graph, &enc, EnvParams::default());
    let menu = ActionMenu::default();
    let actions = menu.num_actions();
    let fallback: Vec<String> = fx.graph.entities().iter().map(|e| e.name.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    let mut instances = 0;
    let mut skipped = 0;
    'instances: while instances < 50 {
        let old = random_table(&mut rng, 1, 3, actions, 1.0);
        let temperature = *[1.0, 0.7].choose(&mut rng).unwrap();
        let mut groups = Vec::new();
        for task in fx.task.tasks.choose_multiple(&mut rng, 2) {
            let mut trajs = Vec::new();
            let mut rewards = Vec::new();
            for _ in 0..4 {
                let mut pol = ToyPolicy::new(&old, &menu, &fallback, &mut rng);
                pol.temperature = temperature;
                let t = env.rollout(&mut pol, &task.question).map_err(|e| e.to_string())?;
                rewards.push(total_reward(&t, &task.golden_answers).map_err(|e| e.to_string())?.total);
                trajs.push(t);
            }
            groups.push(GroupBatch::new(task.id.clone(), trajs, rewards, NormKind::StdEps).map_err(|e| e.to_string())?);
        }
        if groups.iter().all(|g| g.advantages.iter().all(|&a| a == 0.0)) {
            continue;
        }
        let mut current = old.clone();
        for l in current.logits_mut() {
            *l += rng.random_range(-0.3..0.3);
        }
        let reference = random_table(&mut rng, 1, 3, actions, 0.5);
        for beta in [0.0, 1e-3] {
            let cfg = GrpoConfig {
                kl_beta: beta,
                temperature,
                ..Default::default()
            };
            let analytic = objective_and_grad(&current, &reference, &groups, &cfg)
                .map_err(|e| e.to_string())?
                .grad
                .to_dense(current.rows());
            let h = 1e-6;
            let mut numeric = vec![0.0; analytic.len()];
            for i in 0..analytic.len() {
                let mut plus = current.clone();
                plus.logits_mut()[i] += h;
                let mut minus = current.clone();
                minus.logits_mut()[i] -= h;
                let jp = objective_and_grad(&plus, &reference, &groups, &cfg).map_err(|e| e.to_string())?.value;
                let jm = objective_and_grad(&minus, &reference, &groups, &cfg).map_err(|e| e.to_string())?.value;
                numeric[i] = (jp - jm) / (2.0 * h);
            }
            let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
            let scale = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max);
            let rel = diff / scale;
            if beta == 0.0 && scale < 1e-6 {
                skipped += 1;
                continue 'instances;
            }
            check(rel < 1e-4, || format!("instance {instances}, beta {beta}: relative error {rel:e}"))?;
            worst = worst.max(rel);
        }
        instances += 1;
    }
    Ok(format!(
        "50 instances x beta in {{0, 1e-3}}: worst relative error {worst:.2e} ({skipped} fully clipped draws resampled)"
    ))
}

// ---------------------------------------------------------------- learning

fn criterion_6(report: &TrainReport, took: Duration) -> Outcome {
    let base = report.baseline();
    let tail = report.tail_mean(50);
    check(took < Duration::from_secs(300), || format!("training took {took:?}"))?;
    check(tail >= 0.8, || format!("last-50 mean {tail:.4} < 0.8 (baseline {base:.4})"))?;
    check(tail >= base + 0.5, || format!("last-50 mean {tail:.4} < baseline {base:.4} + 0.5"))?;
    Ok(format!(
        "baseline {base:.4} -> last-50 mean {tail:.4} in {:.1}s over {} iterations",
        took.as_secs_f64(),
        report.records.len() - 1
    ))
}

struct ImmediateAnswer {
    names: Vec<String>,
    rng: ChaCha8Rng,
}

impl Policy for ImmediateAnswer {
    fn emit(&mut self, _: &AgentState) -> Result<Emission, PolicyError> {
        let name = self.names.choose(&mut self.rng).unwrap();
        Ok(Emission {
            text: format!("<think>guess</think>\n<answer>{name}</answer>"),
            choice: None,
        })
    }
}

fn criterion_7(fx: &Fixture, report: &TrainReport) -> Outcome {
    let enc = HashEncoder::default();
    let env = Environment::new(&fx.graph, &enc, EnvParams::default());
    let two_hop: Vec<QAInstance> = fx.task.tasks.iter().filter(|t| t.hops == Some(2)).cloned().collect();
    check(!two_hop.is_empty(), || "no two-hop questions".into())?;
    let menu = ToySettings::default().menu();
    let runs = toy_runs(&env, &report.params, &menu, &two_hop, 1.0, true, 0).map_err(|e| e.to_string())?;
    let mean = |f: &dyn Fn(&Trajectory) -> usize| {
        runs.iter().map(|r| r.trajectory.as_ref().map_or(0, f) as f64).sum::<f64>() / runs.len() as f64
    };
    let trained = mean(&Trajectory::retrieval_turns);
    let trained_total = mean(&|t: &Trajectory| t.turns.len());

    let mut baseline = ImmediateAnswer {
        names: fx.graph.entities().iter().map(|e| e.name.clone()).collect(),
        rng: ChaCha8Rng::seed_from_u64(7),
    };
    let (mut base_sum, mut base_total) = (0.0, 0.0);
    for t in &two_hop {
        let traj = env.rollout(&mut baseline, &t.question).map_err(|e| e.to_string())?;
        base_sum += traj.retrieval_turns() as f64;
        base_total += traj.turns.len() as f64;
    }
    let n = two_hop.len() as f64;
    let (base, base_total) = (base_sum / n, base_total / n);
    check(trained >= 1.5, || format!("trained mean retrieval turns {trained:.3} < 1.5"))?;
    check(trained > base, || format!("trained {trained:.3} not above baseline {base:.3}"))?;
    check(trained_total > base_total, || format!("trained turns {trained_total:.3} not above {base_total:.3}"))?;
    Ok(format!(
        "{} two-hop questions: greedy trained policy {trained:.3} retrieval turns ({trained_total:.3} total) vs immediate-answer baseline {base:.3} ({base_total:.3})",
        two_hop.len()
    ))
}

// ---------------------------------------------------------------- grammar

fn oracle_well_formed(re: &Regex, text: &str) -> bool {
    let Some(c) = re.captures(text) else { return false };
    let ok = |s: &str| !s.trim().is_empty() && !TAG_MARKERS.iter().any(|m| s.contains(m));
    let think = c.get(1).map_or("", |m| m.as_str());
    let body = c.get(2).or_else(|| c.get(3)).map_or("", |m| m.as_str());
    ok(think) && ok(body)
}

const PIECES: [&str; 18] = [
    "a", "Z", "7", " ", "\n", "\t", "<", ">", "/", "é", "query", "think>", "</thin", "<answe", "knowledge", "<x>", "&", "?",
];

fn random_content(rng: &mut ChaCha8Rng) -> String {
    loop {
        let s: String = (0..rng.random_range(1..12)).map(|_| *PIECES.choose(rng).unwrap()).collect();
        if !s.trim().is_empty() && !TAG_MARKERS.iter().any(|m| s.contains(m)) {
            return s;
        }
    }
}

fn ws(rng: &mut ChaCha8Rng) -> String {
    (0..rng.random_range(0..3)).map(|_| *[" ", "\n", "\t", "\r\n"].choose(rng).unwrap()).collect()
}

fn random_turn(rng: &mut ChaCha8Rng) -> (String, String, String, bool) {
    let think = random_content(rng);
    let body = random_content(rng);
    let is_query = rng.random_bool(0.5);
    let tag = if is_query { "query" } else { "answer" };
    let text = format!("{}<think>{think}</think>{}<{tag}>{body}</{tag}>{}", ws(rng), ws(rng), ws(rng));
    (text, think, body, is_query)
}

fn boundaries(s: &str) -> Vec<usize> {
    s.char_indices().map(|(i, _)| i).chain([s.len()]).collect()
}

fn mutate(rng: &mut ChaCha8Rng, text: &str) -> String {
    let mut s = text.to_string();
    match rng.random_range(0..10) {
        0 => {
            let b = boundaries(&s);
            let i = rng.random_range(0..b.len() - 1);
            s.replace_range(b[i]..b[i + 1], "");
        }
        1 => {
            let b = boundaries(&s);
            s.insert_str(*b.choose(rng).unwrap(), TAG_MARKERS.choose(rng).unwrap());
        }
        2 => {
            let present: Vec<&str> = TAG_MARKERS.iter().copied().filter(|m| s.contains(m)).collect();
            if let Some(m) = present.choose(rng) {
                s = s.replacen(m, "", 1);
            }
        }
        3 => {
            let (open, close) = *[("<think>", "</think>"), ("<query>", "</query>"), ("<answer>", "</answer>")].choose(rng).unwrap();
            if let (Some(a), Some(b)) = (s.find(open), s.find(close)) {
                if a + open.len() <= b {
                    s.replace_range(a + open.len()..b, *[" ", "", "\n\t"].choose(rng).unwrap());
                }
            }
        }
        4 => s.push_str(*["x", "<answer>y</answer>", " trailing", "</query>"].choose(rng).unwrap()),
        5 => s.insert_str(0, *["x", "<think>z</think>", "pre "].choose(rng).unwrap()),
        6 => {
            if let Some(i) = s.find("</think>") {
                let tail = s[i + 8..].to_string();
                s.push_str(&tail);
            }
        }
        7 => {
            if let Some(i) = s.find("</think>") {
                let (head, tail) = s.split_at(i + 8);
                s = format!("{tail}{head}");
            }
        }
        8 => s = s.replace("<query>", "<search>").replace("<answer>", "<reply>"),
        _ => s = s.replacen("<think>", "<THINK>", 1),
    }
    s
}

fn criterion_8() -> Outcome {
    let re = Regex::new(r"(?s)^\s*<think>(.*?)</think>\s*(?:<query>(.*?)</query>|<answer>(.*?)</answer>)\s*$").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for i in 0..10_000 {
        let (text, think, body, is_query) = random_turn(&mut rng);
        let turn = parse_turn(&text);
        check(turn.well_formed && oracle_well_formed(&re, &text), || format!("case {i}: {text:?} rejected"))?;
        let tag = if is_query { "query" } else { "answer" };
        let canonical = format!("<think>{}</think>\n<{tag}>{}</{tag}>", think.trim(), body.trim());
        let out = serialize(&turn);
        check(out == canonical, || format!("case {i}: serialized {out:?}, expected {canonical:?}"))?;
        let again = parse_turn(&out);
        check(
            again.think == turn.think && again.query == turn.query && again.answer == turn.answer && again.well_formed,
            || format!("case {i}: re-parse of {out:?} differs"),
        )?;
        let kind = if is_query { ActionKind::QueryRetrieve } else { ActionKind::Answer };
        check(turn.action_kind == kind, || format!("case {i}: kind {:?}", turn.action_kind))?;
    }
    let mut rejected = 0;
    for i in 0..10_000 {
        let (text, ..) = random_turn(&mut rng);
        let m = mutate(&mut rng, &text);
        let ours = parse_turn(&m).well_formed;
        let theirs = oracle_well_formed(&re, &m);
        check(ours == theirs, || format!("mutant {i}: {m:?} parser={ours} oracle={theirs}"))?;
        if !ours {
            rejected += 1;
        }
    }
    Ok(format!("10000 round trips exact; 10000 mutants agree with the regex oracle ({rejected} malformed)"))
}

// ---------------------------------------------------------------- metrics

struct Labeled {
    pred: Option<&'static str>,
    golds: &'static [&'static str],
    em: f64,
    /// Best (overlap, prediction tokens, gold tokens); `None` means F1 = 0.
    f1: Option<(f64, f64, f64)>,
}

const FIXTURE: [Labeled; 20] = [
    Labeled { pred: Some("Paris"), golds: &["paris."], em: 1.0, f1: Some((1.0, 1.0, 1.0)) },
    Labeled { pred: Some("The Paris"), golds: &["Paris"], em: 1.0, f1: Some((1.0, 2.0, 1.0)) },
    Labeled { pred: Some("London"), golds: &["Paris"], em: 0.0, f1: None },
    Labeled { pred: Some("the quick fox"), golds: &["quick brown fox"], em: 0.0, f1: Some((2.0, 3.0, 3.0)) },
    Labeled { pred: Some("Barack Obama"), golds: &["barack obama", "obama"], em: 1.0, f1: Some((2.0, 2.0, 2.0)) },
    Labeled { pred: Some("Obama"), golds: &["Barack Obama"], em: 0.0, f1: Some((1.0, 1.0, 2.0)) },
    Labeled { pred: Some("1994"), golds: &["1994"], em: 1.0, f1: Some((1.0, 1.0, 1.0)) },
    Labeled { pred: Some("in 1994"), golds: &["1994"], em: 0.0, f1: Some((1.0, 2.0, 1.0)) },
    Labeled { pred: Some("New York City"), golds: &["New York"], em: 0.0, f1: Some((2.0, 3.0, 2.0)) },
    Labeled { pred: Some("an apple"), golds: &["apple"], em: 1.0, f1: Some((1.0, 2.0, 1.0)) },
    Labeled { pred: Some("U.S.A."), golds: &["USA"], em: 1.0, f1: None },
    Labeled { pred: None, golds: &["Rome"], em: 0.0, f1: None },
    Labeled { pred: Some("rock and roll"), golds: &["Rock & Roll"], em: 0.0, f1: Some((2.0, 3.0, 2.0)) },
    Labeled { pred: Some("Marie Curie"), golds: &["Pierre Curie", "Marie Sklodowska Curie"], em: 0.0, f1: Some((2.0, 2.0, 3.0)) },
    Labeled { pred: Some("dog dog cat"), golds: &["dog cat cat"], em: 0.0, f1: Some((2.0, 3.0, 3.0)) },
    Labeled { pred: Some("Mount Everest"), golds: &["Everest"], em: 0.0, f1: Some((1.0, 2.0, 1.0)) },
    Labeled { pred: Some("everest!"), golds: &["Mount Everest", "Everest"], em: 1.0, f1: Some((1.0, 1.0, 1.0)) },
    Labeled { pred: Some("Shakespeare"), golds: &["William Shakespeare"], em: 0.0, f1: Some((1.0, 1.0, 2.0)) },
    Labeled { pred: Some("the beatles"), golds: &["The Beatles"], em: 1.0, f1: Some((2.0, 2.0, 2.0)) },
    Labeled { pred: Some("42"), golds: &["forty-two", "42"], em: 1.0, f1: Some((1.0, 1.0, 1.0)) },
];

fn criterion_9() -> Outcome {
    let enc = HashEncoder::default();
    let mut instances = Vec::new();
    let mut runs = Vec::new();
    for (i, l) in FIXTURE.iter().enumerate() {
        let id = format!("m{i:02}");
        instances.push(QAInstance::new(&id, "q", l.golds));
        let traj = match l.pred {
            Some(p) => trajectory(&[format!("<think>t</think><answer>{p}</answer>").as_str()]),
            None => trajectory(&["<think>stuck</think>"]),
        };
        runs.push(Run { id, trajectory: Some(traj) });
    }
    let report = evaluate_run(&instances, &runs, &enc).map_err(|e| e.to_string())?;
    let (mut em_sum, mut f1_sum) = (0.0, 0.0);
    for (i, (l, rec)) in FIXTURE.iter().zip(&report.instances).enumerate() {
        let f1 = l.f1.map_or(0.0, |(o, p, g)| 2.0 * o / (p + g));
        check(rec.em == l.em, || format!("item {i}: em {} expected {}", rec.em, l.em))?;
        check(rec.f1 == f1, || format!("item {i}: f1 {} expected {f1}", rec.f1))?;
        em_sum += l.em;
        f1_sum += f1;
        if let (Some(p), 1.0) = (l.pred, rec.em) {
            let normed_pred = normalize_answer(p);
            let normed: Vec<String> = l.golds.iter().map(|g| normalize_answer(g)).collect();
            check(f1_best(&normed_pred, &normed) == 1.0, || format!("item {i}: EM=1 but normalized F1 < 1"))?;
            check(exact_match(&normed_pred, &normed) == 1.0, || format!("item {i}: normalization not idempotent"))?;
        }
    }
    let agg = &report.aggregates;
    check((agg.em - em_sum / 20.0).abs() < 1e-12, || format!("aggregate em {}", agg.em))?;
    check((agg.f1 - f1_sum / 20.0).abs() < 1e-12, || format!("aggregate f1 {}", agg.f1))?;
    check(agg.rs.is_none() && agg.rs_skipped == 20, || "rs should be skipped without gold knowledge".into())?;
    Ok(format!("20 labeled items exact; EM {:.2}, F1 {:.4}; EM=1 implies F1=1 on normalized strings", agg.em, agg.f1))
}

// ---------------------------------------------------------------- determinism

fn pipeline(seed: u64) -> Result<Vec<(String, Vec<u8>)>, String> {
    let start = Instant::now();
    let enc = HashEncoder::default();
    let env_params = EnvParams::default();
    let toy = ToySettings::default();
    let task = generate(&SyntheticSpec { seed, ..Default::default() }, &enc, &env_params, &toy).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (built, _) = ingest_facts(&task.facts, &enc).map_err(|e| e.to_string())?;
    hypergraph::save(&built, dir.path()).map_err(|e| e.to_string())?;
    let graph = hypergraph::load(dir.path()).map_err(|e| e.to_string())?;
    let env = Environment::new(&graph, &enc, env_params);
    let cfg = GrpoConfig {
        seed,
        iterations: 60,
        ..Default::default()
    };
    let report = train_toy(&env, &task.tasks, &toy, &cfg).map_err(|e| e.to_string())?;
    let runs = toy_runs(&env, &report.params, &toy.menu(), &task.tasks, 1.0, false, seed).map_err(|e| e.to_string())?;
    let mut eval = evaluate_run(&task.tasks, &runs, &enc).map_err(|e| e.to_string())?;
    eval.timings = Some(hyperrag::evalkit::Timings {
        total_ms: start.elapsed().as_secs_f64() * 1000.0,
        per_instance_ms: 0.0,
    });
    let mut traces = String::new();
    for r in &runs {
        for rec in r.trajectory.as_ref().map(Trajectory::trace).unwrap_or_default() {
            traces.push_str(&serde_json::to_string(&rec).map_err(|e| e.to_string())?);
            traces.push('\n');
        }
    }
    let mut out = vec![
        ("facts.jsonl".to_string(), facts_jsonl(&task.facts).into_bytes()),
        ("tasks.jsonl".to_string(), tasks_jsonl(&task.tasks).into_bytes()),
    ];
    let mut files: Vec<_> = std::fs::read_dir(dir.path())
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    for f in files {
        let name = f.file_name().unwrap().to_string_lossy().into_owned();
        out.push((format!("graph/{name}"), std::fs::read(&f).map_err(|e| e.to_string())?));
    }
    out.push(("train.jsonl".into(), report.to_jsonl().into_bytes()));
    out.push((
        "params.json".into(),
        serde_json::to_vec(&report.params.to_sparse()).map_err(|e| e.to_string())?,
    ));
    out.push(("trace.jsonl".into(), traces.into_bytes()));
    out.push(("eval.json".into(), eval.deterministic_json().into_bytes()));
    Ok(out)
}

fn criterion_10() -> Outcome {
    let a = pipeline(11)?;
    let b = pipeline(11)?;
    check(a.len() == b.len(), || "artifact sets differ".into())?;
    let mut bytes = 0;
    for ((na, da), (nb, db)) in a.iter().zip(&b) {
        check(na == nb && da == db, || format!("artifact {na} differs between runs"))?;
        bytes += da.len();
    }
    Ok(format!("{} artifacts ({bytes} bytes) identical across two seeded runs", a.len()))
}

// ---------------------------------------------------------------- driver

fn run(n: usize, f: impl FnOnce() -> Outcome) -> bool {
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    match result {
        Ok(msg) => {
            println!("criterion {n} PASS: {msg}");
            true
        }
        Err(msg) => {
            println!("criterion {n} FAIL: {msg}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= run(1, criterion_1);
    ok &= run(2, criterion_2);
    ok &= run(3, criterion_3);
    ok &= run(4, criterion_4);
    ok &= run(5, criterion_5);

    let fx = fixture(0);
    let enc = HashEncoder::default();
    let env = Environment::new(&fx.graph, &enc, EnvParams::default());
    let start = Instant::now();
    let trained = train_toy(&env, &fx.task.tasks, &ToySettings::default(), &GrpoConfig::default());
    let took = start.elapsed();
    match trained {
        Ok(report) => {
            ok &= run(6, || criterion_6(&report, took));
            ok &= run(7, || criterion_7(&fx, &report));
        }
        Err(e) => {
            println!("criterion 6 FAIL: training error {e}");
            println!("criterion 7 FAIL: no trained policy");
            ok = false;
        }
    }

    ok &= run(8, criterion_8);
    ok &= run(9, criterion_9);
    ok &= run(10, criterion_10);
    if !ok {
        std::process::exit(1);
    }
}
