//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use agentsynth::curator::{
    bucket, committee_check, dedup_states, filter_corpus, subsample_to_budget, CommitteeConfig,
    Granularity,
};
use agentsynth::datastore::{export_sft, read_jsonl};
use agentsynth::env::{Environment, WorldRegistry};
use agentsynth::gateway::{MockRule, ScriptedMock, ScriptedMockTable};
use agentsynth::prompts::parse_reason_action;
use agentsynth::retrieval::{
    agentic_retrieve, indexed_text, DenseIndex, Embedder, MockEmbedder, QueryWriter,
    RetrievalContext, SparseIndex, SparseOptions, DEFAULT_MODEL_HITS, DEFAULT_OBSERVATION_HITS,
};
use agentsynth::runtime::{Agent, RuntimeConfig};
use agentsynth::synth::{RawRollout, SynthesisConfig, Synthesizer};
use agentsynth::{
    Action, Example, InstructionKind, Provenance, RetrievalSource, Termination, Trajectory,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(), String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn mock(rules: Vec<MockRule>, default: &str) -> ScriptedMock {
    ScriptedMock::new(ScriptedMockTable {
        rules,
        default_response: default.into(),
    })
    .expect("valid mock table")
}

const VOCAB: [&str; 16] = [
    "home", "cart", "kettle", "mug", "search", "price", "page", "button", "link", "order", "wifi",
    "privacy", "display", "dark", "save", "back",
];

fn words(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = rng.random_range(lo..=hi);
    (0..n).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn random_trajectory(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
    let actions = ["click [search]", "click [back]", "type [q] kettle", "scroll down", "click [save]"];
    let observations: Vec<String> = (0..=n).map(|_| words(rng, 1, 12)).collect();
    let taken: Vec<String> = (0..n).map(|_| actions.choose(rng).unwrap().to_string()).collect();
    Trajectory::from_parts(observations, taken).unwrap()
}

fn random_example(rng: &mut ChaCha8Rng, id: String, n: usize) -> Example {
    let traj = random_trajectory(rng, n);
    Example::new(
        id,
        words(rng, 1, 5),
        traj,
        Provenance {
            doc_id: "doc".into(),
            parent_trajectory_id: "doc#0".into(),
            span_start: 0,
            span_end: n.max(1),
            kind: InstructionKind::Abstraction,
        },
    )
    .unwrap()
}

// 1
fn backward_construction_count_law() -> Outcome {
    let m = mock(
        vec![
            MockRule::contains("Please summarize", "```\nsummary\n```"),
            MockRule::contains("Please write a reasonable task", "```\nnew task\n```"),
        ],
        "",
    );
    let kind_sets = [
        vec![InstructionKind::Summary],
        vec![InstructionKind::Abstraction],
        vec![InstructionKind::Summary, InstructionKind::Abstraction],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..48 {
        let n = if trial < 12 { trial + 1 } else { rng.random_range(1..=12) };
        let kinds = kind_sets[trial % 3].clone();
        let config = SynthesisConfig { kinds: kinds.clone(), ..Default::default() };
        let s = Synthesizer { gateway: &m, model_id: "gen", system_message: "sys", config: &config };
        let rollout = RawRollout {
            id: format!("d#{trial}"),
            doc_id: "d".into(),
            env_id: "sim".into(),
            instruction: "x".into(),
            trajectory: random_trajectory(&mut rng, n),
            termination: Termination::StopPredicted,
            failure: None,
        };
        let (examples, events) = s.backward_construct(&rollout).map_err(|e| e.to_string())?;
        let expected = n * (n + 1) / 2 * kinds.len();
        ensure!(events.is_empty(), "unexpected relabel failures: {events:?}");
        ensure!(examples.len() == expected, "n={n} kinds={kinds:?}: {} examples, expected {expected}", examples.len());
        for e in &examples {
            let p = &e.provenance;
            let sub = rollout.trajectory.sub_trajectory(p.span_start, p.span_end).unwrap();
            ensure!(e.trajectory == sub, "{} does not match its span", e.id);
        }
    }
    Ok(())
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_agentsynth"));
    c.env("SOURCE_DATE_EPOCH", "1700000000").env("RUST_LOG", "error");
    c
}

fn init_demo(dir: &Path) -> Result<PathBuf, String> {
    let st = bin().arg("init-demo").arg(dir).status().map_err(|e| e.to_string())?;
    ensure!(st.success(), "init-demo failed");
    Ok(dir.join("agentsynth.toml"))
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

// 2
fn end_to_end_determinism() -> Outcome {
    let mut artifacts = Vec::new();
    for jobs in ["1", "4"] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config = init_demo(dir.path())?;
        for stage in ["synth", "filter", "index", "export"] {
            let o = bin()
                .args(["--config", config.to_str().unwrap(), "--seed", "11", "--jobs", jobs, stage])
                .output()
                .map_err(|e| e.to_string())?;
            ensure!(o.status.success(), "{stage} failed: {}", String::from_utf8_lossy(&o.stderr));
        }
        let examples: Vec<Example> = read_jsonl(&dir.path().join("out/examples.jsonl")).map_err(|e| e.to_string())?;
        ensure!(examples.len() == 72, "{} pre-filter examples, expected 72", examples.len());
        artifacts.push(files_under(&dir.path().join("out")));
    }
    ensure!(artifacts[0].len() >= 8, "expected all artifacts, got {:?}", artifacts[0].keys().collect::<Vec<_>>());
    for (path, bytes) in &artifacts[0] {
        ensure!(artifacts[1].get(path) == Some(bytes), "{} differs between runs", path.display());
    }
    ensure!(artifacts[0].len() == artifacts[1].len(), "runs produced different file sets");
    Ok(())
}

// 3
fn duplicate_state_filter() -> Outcome {
    let hand = Trajectory::from_parts(["o0", "o1", "o1"], ["a", "a"]).unwrap();
    let want = Trajectory::from_parts(["o0", "o1"], ["a"]).unwrap();
    ensure!(dedup_states(&hand) == want, "[o0,a,o1,a,o1] did not reduce to [o0,a,o1]");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let len = rng.random_range(1..=10);
        let mut base: Vec<(String, String)> = Vec::new();
        while base.len() < len {
            let pair = (format!("act{}", rng.random_range(0..3)), format!("obs{}", rng.random_range(0..3)));
            if base.last() != Some(&pair) {
                base.push(pair);
            }
        }
        let k = rng.random_range(0..=8);
        let mut pairs = base.clone();
        for _ in 0..k {
            let at = rng.random_range(0..pairs.len());
            let copy = pairs[at].clone();
            pairs.insert(at, copy);
        }
        let adjacent = pairs.windows(2).filter(|w| w[0] == w[1]).count();
        ensure!(adjacent == k, "construction produced {adjacent} duplicates, wanted {k}");
        let traj = Trajectory::from_parts(
            std::iter::once("o0".to_string()).chain(pairs.iter().map(|p| p.1.clone())),
            pairs.iter().map(|p| p.0.clone()),
        )
        .unwrap();
        let once = dedup_states(&traj);
        ensure!(
            once.action_count() == traj.action_count() - adjacent,
            "length {} -> {}, expected shrink by {adjacent}",
            traj.action_count(),
            once.action_count()
        );
        ensure!(dedup_states(&once) == once, "second pass changed the trajectory");
    }
    Ok(())
}

// 4
fn committee_unanimity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let examples: Vec<Example> = (0..3).map(|k| random_example(&mut rng, format!("e{k}"), 2)).collect();
    for size in 1..=3usize {
        let members: Vec<String> = (0..size).map(|k| format!("judge-{k}")).collect();
        let committee = CommitteeConfig::new(members.clone()).map_err(|e| e.to_string())?;
        for mask in 0..(1u32 << size) {
            let rules = members
                .iter()
                .enumerate()
                .filter(|(k, _)| mask & (1 << k) == 0)
                .map(|(_, m)| MockRule::contains("Please answer yes", "No.").for_model(m.as_str()))
                .collect();
            let m = mock(rules, "Yes.");
            let all_yes = mask == (1 << size) - 1;
            for e in &examples {
                let v = committee_check(e, &committee, &m).map_err(|e| e.to_string())?;
                ensure!(v.approved == all_yes, "size {size} votes {mask:0size$b}: approved={}", v.approved);
            }
            let kept = filter_corpus(examples.clone(), &committee, &m).map_err(|e| e.to_string())?.kept;
            let expected = if all_yes { examples.len() } else { 0 };
            ensure!(kept.len() == expected, "size {size} votes {mask:0size$b}: kept {}", kept.len());
        }
    }
    Ok(())
}

/// Okapi BM25 recomputed from raw text, plus the verbatim-observation boost.
fn bm25_oracle(corpus: &[Example], query: &str, k1: f64, b: f64) -> Vec<(String, f64)> {
    let docs: Vec<Vec<String>> = corpus
        .iter()
        .map(|e| {
            let mut t: Vec<String> = e.instruction.split_whitespace().map(str::to_lowercase).collect();
            for o in e.trajectory.observations() {
                t.extend(o.text.split_whitespace().map(str::to_lowercase));
            }
            t
        })
        .collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.len() as f64).sum::<f64>() / n;
    let mut terms: Vec<String> = query.split_whitespace().map(str::to_lowercase).collect();
    terms.sort();
    terms.dedup();
    let mut scored = Vec::new();
    for (d, e) in docs.iter().zip(corpus) {
        let mut score = 0.0;
        for t in &terms {
            let tf = d.iter().filter(|w| *w == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = docs.iter().filter(|d| d.contains(t)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            let norm = tf + k1 * (1.0 - b + b * d.len() as f64 / avgdl);
            score += idf * tf * (k1 + 1.0) / norm;
        }
        if !query.trim().is_empty() && e.trajectory.observations().iter().any(|o| o.text.contains(query)) {
            score += 1.0e6;
        }
        if score > 0.0 {
            scored.push((e.id.clone(), score));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
}

// 5
fn bm25_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..50 {
        let size = rng.random_range(1..=20);
        let corpus: Vec<Example> = (0..size)
            .map(|k| {
                let n = rng.random_range(1..=3);
                random_example(&mut rng, format!("doc-{:02}", (k * 7) % 20), n)
            })
            .collect();
        let opts = SparseOptions::default();
        let idx = SparseIndex::build(&corpus, opts).map_err(|e| e.to_string())?;
        for q in 0..4 {
            let query = if q == 0 {
                let obs = &corpus[rng.random_range(0..size)].trajectory.observations()[0].text;
                obs.split_whitespace().take(10).collect::<Vec<_>>().join(" ")
            } else {
                words(&mut rng, 1, 10)
            };
            let got = idx.query(&query, size);
            let want = bm25_oracle(&corpus, &query, opts.params.k1, opts.params.b);
            let got_ids: Vec<&str> = got.iter().map(|h| h.example_id.as_str()).collect();
            let want_ids: Vec<&str> = want.iter().map(|w| w.0.as_str()).collect();
            ensure!(got_ids == want_ids, "trial {trial} query {query:?}: ranking {got_ids:?} != {want_ids:?}");
            for (h, (_, s)) in got.iter().zip(&want) {
                ensure!((h.score - s).abs() <= 1e-9, "trial {trial}: score {} vs oracle {s}", h.score);
            }
        }
    }
    Ok(())
}

// 6
fn dense_exclusion_and_cap() -> Outcome {
    ensure!(DEFAULT_OBSERVATION_HITS == 5 && DEFAULT_MODEL_HITS == 5, "default caps are not 5/5");
    let rc = RuntimeConfig::default();
    ensure!(rc.m1 == 5 && rc.m2 == 5, "runtime defaults m1={} m2={}", rc.m1, rc.m2);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let embedder = MockEmbedder;
    for trial in 0..100 {
        let size = rng.random_range(1..=15);
        let corpus: Vec<Example> = (0..size).map(|k| random_example(&mut rng, format!("e{k}"), 1)).collect();
        let opts = SparseOptions::default();
        let sparse = SparseIndex::build(&corpus, opts).unwrap();
        let dense = DenseIndex::build(&corpus, &embedder, |e| indexed_text(e, false)).unwrap();
        let (m1, m2) = (rng.random_range(0..=7), rng.random_range(0..=7));

        let exclude: HashSet<String> = corpus
            .iter()
            .filter(|_| rng.random_bool(0.4))
            .map(|e| e.id.clone())
            .collect();
        let q = embedder.embed(&words(&mut rng, 1, 8)).unwrap();
        let direct = dense.query_vector(&q, m2, &exclude).unwrap();
        ensure!(direct.len() <= m2, "trial {trial}: {} dense hits over cap {m2}", direct.len());
        ensure!(
            direct.iter().all(|h| !exclude.contains(&h.example_id)),
            "trial {trial}: excluded id returned"
        );

        let query_text = words(&mut rng, 1, 6);
        let writer_mock = mock(vec![], &query_text);
        let writer = QueryWriter { gateway: &writer_mock, model_id: "q", system_message: "sys" };
        let observation = words(&mut rng, 1, 10);
        let ctx = RetrievalContext { instruction: "goal", history: &[], observation: &observation };
        let out = agentic_retrieve(&ctx, m1, m2, &sparse, &dense, &embedder, &writer);
        ensure!(out.hits.len() <= m1 + m2, "trial {trial}: {} hits over m1+m2={}", out.hits.len(), m1 + m2);
        let ids: HashSet<&str> = out.hits.iter().map(|h| h.example_id.as_str()).collect();
        ensure!(ids.len() == out.hits.len(), "trial {trial}: duplicate ids");
        let sparse_ids: HashSet<&str> = out
            .hits
            .iter()
            .filter(|h| h.source == RetrievalSource::ObservationBased)
            .map(|h| h.example_id.as_str())
            .collect();
        let dense_hits: Vec<_> = out.hits.iter().filter(|h| h.source == RetrievalSource::ModelBased).collect();
        ensure!(sparse_ids.len() <= m1 && dense_hits.len() <= m2, "trial {trial}: channel over cap");
        ensure!(
            dense_hits.iter().all(|h| !sparse_ids.contains(h.example_id.as_str())),
            "trial {trial}: dense channel returned an observation-channel id"
        );
    }
    Ok(())
}

// 7
fn granularity_boundaries() -> Outcome {
    let expected = [
        (4, Granularity::Short),
        (5, Granularity::Medium),
        (9, Granularity::Medium),
        (10, Granularity::Long),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let examples: Vec<Example> = expected
        .iter()
        .map(|(n, _)| random_example(&mut rng, format!("n{n}"), *n))
        .collect();
    let buckets = bucket(&examples);
    for (n, g) in expected {
        ensure!(Granularity::of(n) == g, "{n} actions -> {:?}, expected {g:?}", Granularity::of(n));
        ensure!(buckets[&g].iter().any(|e| e.id == format!("n{n}")), "n{n} not in {g:?} bucket");
    }
    Ok(())
}

// 8
fn token_budget_subsample() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..100 {
        let n = rng.random_range(0..30);
        let examples: Vec<Example> = (0..n)
            .map(|k| {
                let mut e = random_example(&mut rng, format!("e{k:02}"), 1);
                e.token_count = rng.random_range(1..200);
                e
            })
            .collect();
        let total: usize = examples.iter().map(|e| e.token_count).sum();
        let budget = rng.random_range(0..=total + total / 5 + 1);
        let seed = rng.random();
        let picked = subsample_to_budget(&examples, budget, seed);
        let used: usize = picked.iter().map(|e| e.token_count).sum();
        ensure!(used <= budget, "trial {trial}: {used} tokens over budget {budget}");
        if budget >= total {
            ensure!(picked == examples, "trial {trial}: budget >= total but input changed");
        }
        let mut pos = picked.iter().map(|p| examples.iter().position(|e| e.id == p.id).unwrap());
        let mut last = None;
        for p in pos.by_ref() {
            ensure!(last.is_none_or(|l| l < p), "trial {trial}: selection out of input order");
            last = Some(p);
        }
    }
    Ok(())
}

// 9
fn episode_contract() -> Outcome {
    let registry = WorldRegistry::builtin();
    let never = mock(vec![], "REASON:\nkeep going\nACTION:\nclick [nowhere]");
    let config = RuntimeConfig::zero_shot(7);
    let agent = Agent { gateway: &never, model_id: "a", system_message: "sys", retriever: None, config: &config };
    let mut env = registry.env_for("shop").unwrap();
    env.reset().unwrap();
    let run = agent.run_episode(&mut env, "wander");
    ensure!(run.result.termination == Termination::MaxSteps, "got {:?}", run.result.termination);
    ensure!(run.turns.len() == 7, "{} turns, expected 7", run.turns.len());

    let stop_at_3 = mock(
        vec![MockRule::contains("Action 2:", "REASON:\ndone\nACTION:\nstop: finished")],
        "REASON:\nkeep going\nACTION:\nclick [nowhere]",
    );
    let config = RuntimeConfig::zero_shot(20);
    let agent = Agent { gateway: &stop_at_3, config: &config, ..agent };
    let mut env = registry.env_for("shop").unwrap();
    env.reset().unwrap();
    let run = agent.run_episode(&mut env, "stop soon");
    ensure!(run.result.termination == Termination::StopPredicted, "got {:?}", run.result.termination);
    ensure!(run.turns.len() == 3, "stopped after {} turns, expected 3", run.turns.len());
    ensure!(run.turns[2].action.is_stop() && run.turns[..2].iter().all(|t| !t.action.is_stop()), "stop not at turn 3");
    Ok(())
}

// 10
fn sft_export() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for trial in 0..50 {
        let examples: Vec<Example> = (0..rng.random_range(0..12))
            .map(|k| {
                let n = rng.random_range(0..=4);
                let mut e = random_example(&mut rng, format!("e{k}"), n.max(1));
                if n == 0 {
                    e.trajectory = Trajectory::new("alone");
                }
                e
            })
            .collect();
        let export = export_sft(&examples, "sys");
        let expected: usize = examples.iter().map(|e| e.action_count()).sum();
        ensure!(export.pairs.len() == expected, "trial {trial}: {} pairs, expected {expected}", export.pairs.len());
        let sources: Vec<&Action> = examples.iter().flat_map(|e| e.trajectory.actions()).collect();
        for (pair, action) in export.pairs.iter().zip(sources) {
            let (_, parsed) = parse_reason_action(&pair.output).map_err(|e| format!("trial {trial}: {e}"))?;
            ensure!(&parsed == action, "trial {trial}: {parsed:?} != {action:?}");
        }
    }
    Ok(())
}

// 11
fn stats_fidelity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = init_demo(dir.path())?;
    let lines = |n: usize| "{}\n".repeat(n);
    let out = dir.path().join("out");
    fs::create_dir_all(&out).unwrap();
    fs::write(dir.path().join("documents.jsonl"), lines(6464)).unwrap();
    fs::write(out.join("raw_trajectories.jsonl"), lines(4568)).unwrap();
    fs::write(out.join("examples.jsonl"), lines(41237)).unwrap();
    fs::write(out.join("examples.filtered.jsonl"), lines(10232)).unwrap();
    let o = bin()
        .args(["--config", config.to_str().unwrap(), "--set", "dataset_name=SWE-bench", "stats"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(o.status.success(), "stats failed");
    let text = String::from_utf8_lossy(&o.stdout);
    let rows: Vec<&str> = text.lines().collect();
    ensure!(
        rows.first() == Some(&"| Dataset | Documents | Raw trajectories | Examples | Filtered examples |"),
        "header {:?}",
        rows.first()
    );
    ensure!(rows.contains(&"| SWE-bench | 6,464 | 4,568 | 41,237 | 10,232 |"), "table was:\n{text}");
    Ok(())
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("backward-construction count law", backward_construction_count_law),
        ("end-to-end determinism", end_to_end_determinism),
        ("duplicate-state filter", duplicate_state_filter),
        ("committee unanimity truth table", committee_unanimity),
        ("BM25 oracle equivalence", bm25_oracle_equivalence),
        ("dense retrieval exclusion and cap", dense_exclusion_and_cap),
        ("granularity boundaries", granularity_boundaries),
        ("token-budget subsample", token_budget_subsample),
        ("episode contract", episode_contract),
        ("SFT export", sft_export),
        ("stats fidelity", stats_fidelity),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(()) => println!("PASS {:>2} {name}", k + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", k + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
