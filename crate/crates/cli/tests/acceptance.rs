//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use kbrefine_cli::{build_gateway, RunConfig};
use kbrefine_core::corrupt::load_benchmark;
use kbrefine_core::coverage::{greedy_select, CoverageConfig, QueryCoverage};
use kbrefine_core::dsl::{apply_actions, parse_actions, render_actions, ApplyOptions};
use kbrefine_core::embed::{cosine, EmbeddingProvider, HashEmbedder};
use kbrefine_core::gateway::{ChatRequest, FnClient, Gateway, GatewayError, Role};
use kbrefine_core::kb::{KnowledgeBase, ReplaceMode, Triple};
use kbrefine_core::pipeline::{refine_query, run_judgement_loop, QuerySample, RefineConfig};
use kbrefine_core::retrieval::{collect_candidates, prune_candidates, top_k_triples, triple_text, RetrievalConfig};
use kbrefine_core::reward::{group_advantages, shaped_reward, RewardRecord};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Check = Result<(), String>;
type Criterion = (&'static str, Duration, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn reward_matrix() -> Check {
    let cells = [((false, true), 1.0), ((true, false), -0.3), ((true, true), 0.2), ((false, false), 0.0)];
    for ((d, r), want) in cells {
        let got = shaped_reward(d, r);
        ensure(got == want, || format!("cell ({d}, {r}) gave {got}, want {want}"))?;
        let rec = RewardRecord::from_accuracies("q", d, r, 0.0, 0.0);
        ensure(rec.shaped == want, || format!("record cell ({d}, {r}) gave {}", rec.shaped))?;
    }
    Ok(())
}

fn gbd_identity() -> Check {
    let mut rng = StdRng::seed_from_u64(1);
    for _ in 0..1000 {
        let (d, r) = (rng.random_bool(0.5), rng.random_bool(0.5));
        let rec = RewardRecord::from_accuracies("q", d, r, 0.0, 0.0);
        ensure(i32::from(rec.gbd) == i32::from(rec.refined_acc) - i32::from(rec.draft_acc), || format!("gbd mismatch on {rec:?}"))?;
        ensure([-1, 0, 1].contains(&rec.gbd), || format!("gbd out of range: {}", rec.gbd))?;
        ensure(rec.draft_acc == u8::from(d) && rec.refined_acc == u8::from(r), || "accuracy flags altered".into())?;
    }
    Ok(())
}

const WORDS: &[&str] = &["alpha", "beta", "gamma", "delta", "river", "city", "film", "born", "located", "capital", "star", "north"];

fn random_kb(rng: &mut StdRng, max: usize) -> KnowledgeBase {
    let items: Vec<String> = (0..rng.random_range(2..16)).map(|i| format!("{} {i}", WORDS[rng.random_range(0..WORDS.len())])).collect();
    let rels = ["near", "part of", "born in", "capital of", "film by"];
    let n = rng.random_range(1..=max);
    KnowledgeBase::from_triples((0..n).map(|_| {
        let h = &items[rng.random_range(0..items.len())];
        let t = &items[rng.random_range(0..items.len())];
        Triple::new(h, rels[rng.random_range(0..rels.len())], t).unwrap()
    }))
    .unwrap()
}

fn random_query(rng: &mut StdRng) -> String {
    (0..rng.random_range(1..5)).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// Exhaustive ranking: cosine descending, then (head, relation, tail).
fn oracle_rank(query: &str, triples: Vec<Triple>, e: &HashEmbedder, take: usize) -> Vec<(Triple, f64)> {
    let q = e.embed_one(query).unwrap();
    let mut scored: Vec<(Triple, f64)> = triples
        .into_iter()
        .map(|t| {
            let s = cosine(&q, &e.embed_one(&triple_text(&t)).unwrap());
            (t, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.key().cmp(&b.0.key())));
    scored.truncate(take);
    scored
}

fn entries(sg: &[kbrefine_core::retrieval::ScoredTriple]) -> Vec<(Triple, f64)> {
    sg.iter().map(|s| (s.triple.clone(), s.score)).collect()
}

fn retrieval_oracle() -> Check {
    let mut rng = StdRng::seed_from_u64(2);
    let e = HashEmbedder::new(64, 3);
    for case in 0..200 {
        let kb = random_kb(&mut rng, 100);
        let q = random_query(&mut rng);
        let n = rng.random_range(1..12);
        let sg = top_k_triples("q", &q, &kb, n, &e).map_err(|e| e.to_string())?;
        let want = oracle_rank(&q, kb.triples().cloned().collect(), &e, n);
        ensure(entries(sg.entries()) == want, || format!("case {case}: top_k differs from exhaustive sort"))?;
        let m = rng.random_range(1..12);
        let cands = collect_candidates(&kb, &sg);
        let pruned = prune_candidates(&q, cands.clone(), m, &e).map_err(|e| e.to_string())?;
        ensure(entries(&pruned) == oracle_rank(&q, cands, &e, m), || format!("case {case}: pruning differs from exhaustive sort"))?;
    }
    Ok(())
}

fn loop_invariants() -> Check {
    let mut rng = StdRng::seed_from_u64(4);
    let e = HashEmbedder::default();
    for case in 0..100 {
        let kb = random_kb(&mut rng, 60);
        let (n, m, max_hops) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(0..4));
        let yes_at = rng.random_range(0..5usize);
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let gw = Gateway::uniform(FnClient::new(move |_: &ChatRequest| {
            let i = calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(format!("<judge>{}</judge>", if i == yes_at { "Yes" } else { "No" }))
        }));
        let cfg = RefineConfig { retrieval: RetrievalConfig { n, m, max_hops }, ..RefineConfig::default() };
        let sample = QuerySample { id: format!("q{case}"), question: random_query(&mut rng), golden_answers: vec![], source_text: None };
        let h = run_judgement_loop(&sample, &kb, &cfg, &e, &gw).map_err(|e| e.to_string())?;
        ensure(h.records.len() <= max_hops + 1, || format!("case {case}: {} records for max_hops {max_hops}", h.records.len()))?;
        for (i, rec) in h.records.iter().enumerate() {
            ensure(rec.hop == i, || format!("case {case}: hop numbering"))?;
            ensure(rec.subgraph.len() <= n + i * m, || format!("case {case}: |G{i}| = {} > N + i*M", rec.subgraph.len()))?;
        }
        for w in h.records.windows(2) {
            let (a, b): (BTreeSet<&Triple>, BTreeSet<&Triple>) = (w[0].subgraph.triple_set(), w[1].subgraph.triple_set());
            ensure(a.is_subset(&b), || format!("case {case}: subgraph shrank"))?;
        }
    }
    Ok(())
}

const COREFERENCE_BLOCK: &str = "replace_node(`the girl's phone number', `Samantha's phone number')|insert_edge(`James', `received', `Samantha's phone number')|";
const INCORRECTNESS_BLOCK: &str = "delete_edge(`American Idol (season 3)', `runner-up', `Kree Harrison') | insert_edge(`American Idol (season 3)', `runner-up', `Diana DeGarmo') | insert_edge(`Diana DeGarmo', `runner-up of', `American Idol (season 3)')";
const DISAMBIGUATION_BLOCK: &str = "insert_edge(`Modern Husbands', `directed-by', `Luis Bayón Herrera')|insert_edge(`The Fighting Vigilantes', `directed-by', `Ray Taylor')|insert_edge(`Modern Husbands', `released-on', `1948-01-01')|insert_edge(`The Fighting Vigilantes', `released-on', `1947-11-15')|replace_node(`Ray Taylor', `Ray Taylor (1888-12-01 to 1952-02-15)')|";

fn dsl_round_trip() -> Check {
    for (block, want) in [(COREFERENCE_BLOCK, 2), (INCORRECTNESS_BLOCK, 3), (DISAMBIGUATION_BLOCK, 5)] {
        let actions = parse_actions(block).map_err(|e| e.to_string())?;
        ensure(actions.len() == want, || format!("parsed {} actions, want {want}", actions.len()))?;
        let text = render_actions(&actions);
        let again = parse_actions(&text).map_err(|e| e.to_string())?;
        ensure(again == actions && render_actions(&again) == text, || format!("render/parse not a fixpoint for {text}"))?;
    }
    let kb = KnowledgeBase::from_triples(
        [
            ("\"Fighting with Buffalo Bill\"", "was directed by", "Ray Taylor"),
            ("Modern Husbands", "starring", "Olinda Bozán"),
            ("Ray Taylor", "debut film", "\"Fighting with Buffalo Bill\""),
            ("Ray Taylor", "directed", "159 films"),
            ("Ray Taylor", "lived from", "1888-12-01 to 1952-02-15"),
            ("Ray Taylor", "was a", "American film director"),
        ]
        .map(|(h, r, t)| Triple::new(h, r, t).unwrap()),
    )
    .unwrap();
    let actions = parse_actions(DISAMBIGUATION_BLOCK).map_err(|e| e.to_string())?;
    let (refined, _) = apply_actions(&kb, &actions, &ApplyOptions::default()).map_err(|e| e.to_string())?;
    ensure(!refined.triples().any(|t| t.head == "Ray Taylor" || t.tail == "Ray Taylor"), || "a triple still uses item `Ray Taylor`".into())?;
    ensure(refined.neighbors("Ray Taylor (1888-12-01 to 1952-02-15)").len() == 6, || "renamed item lost edges".into())
}

fn best_coverage(covs: &[QueryCoverage<u32>], budget: usize) -> usize {
    (0u32..1 << covs.len())
        .filter(|mask| mask.count_ones() as usize <= budget)
        .map(|mask| {
            (0..covs.len()).filter(|i| mask & (1 << i) != 0).flat_map(|i| covs[i].elements.iter()).collect::<BTreeSet<_>>().len()
        })
        .max()
        .unwrap_or(0)
}

fn greedy_quality() -> Check {
    let mut rng = StdRng::seed_from_u64(5);
    let bound = 1.0 - (-1.0f64).exp();
    for case in 0..500 {
        let covs: Vec<QueryCoverage<u32>> = (0..rng.random_range(1..=12))
            .map(|i| QueryCoverage::new(format!("q{i:02}"), (0..rng.random_range(0..8)).map(|_| rng.random_range(0..24u32))))
            .collect();
        let budget = rng.random_range(1..=4);
        let cfg = CoverageConfig { budget, rho: 1.0, ..CoverageConfig::default() };
        let sel = greedy_select(&covs, &cfg);
        let got = covs
            .iter()
            .filter(|c| sel.iter().any(|s| s.query_id == c.query_id))
            .flat_map(|c| c.elements.iter())
            .collect::<BTreeSet<_>>()
            .len();
        let opt = best_coverage(&covs, budget);
        ensure(got as f64 >= bound * opt as f64, || format!("case {case}: greedy {got} < (1-1/e) * {opt}"))?;
    }
    let dflt = RunConfig::from_toml("").map_err(|e| e.to_string())?.coverage_config().map_err(|e| e.to_string())?;
    ensure((dflt.k, dflt.budget, dflt.rho) == (10, 1000, 0.8), || format!("defaults {dflt:?}"))?;
    let locomo = RunConfig::from_toml("[coverage]\npreset = \"locomo\"\n").map_err(|e| e.to_string())?.coverage_config().map_err(|e| e.to_string())?;
    ensure((locomo.k, locomo.m, locomo.budget, locomo.rho) == (10, 100, 1000, 1.0), || format!("locomo preset {locomo:?}"))?;
    let explicit = RunConfig::from_toml("[coverage]\nk = 10\nm = 500\nbudget = 1000\nrho = 0.8\n")
        .map_err(|e| e.to_string())?
        .coverage_config()
        .map_err(|e| e.to_string())?;
    ensure(explicit == CoverageConfig::large_corpus(), || format!("explicit config {explicit:?}"))
}

fn corruption_thresholds() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = build_mini_benchmark(dir.path());
    ensure(manifest.accepted == 3, || format!("{} samples accepted, want 3", manifest.accepted))?;
    for s in load_benchmark(dir.path()).map_err(|e| e.to_string())? {
        let md = &s.record.metadata;
        ensure(md.pre_f1 > 0.95 && md.post_f1 < 0.6, || format!("{}: pre {} post {}", s.record.id, md.pre_f1, md.post_f1))?;
        ensure(s.record.corruption_actions.len() <= 5, || format!("{}: too many actions", s.record.id))?;
        let clean = KnowledgeBase::load(dir.path().join(&s.record.clean_kb)).map_err(|e| e.to_string())?;
        let actions = parse_actions(&s.record.corruption_actions.join("|")).map_err(|e| e.to_string())?;
        let (replayed, _) = apply_actions(&clean, &actions, &ApplyOptions::default()).map_err(|e| e.to_string())?;
        let on_disk = fs::read(dir.path().join(&s.record.corrupted_kb)).map_err(|e| e.to_string())?;
        ensure(replayed.to_jsonl_string().into_bytes() == on_disk, || format!("{}: replay is not byte-identical", s.record.id))?;
    }
    Ok(())
}

fn failing_gateways() -> Vec<(&'static str, Gateway, RefineConfig)> {
    let base = RefineConfig::default();
    let script = |judge: &'static str, abduction: Option<&'static str>, actions: &'static str| {
        Gateway::uniform(FnClient::new(move |r: &ChatRequest| match r.role {
            Role::RefinerJudge => Ok(format!("<judge>{judge}</judge>")),
            Role::RefinerAbduction => abduction.map(|a| format!("<abduction>{a}</abduction>")).ok_or_else(|| GatewayError::Transport("abduction down".into())),
            _ => Ok(format!("<refinement>{actions}</refinement>")),
        }))
    };
    let strict = RefineConfig { apply: ApplyOptions { replace_mode: ReplaceMode::Strict, ..ApplyOptions::default() }, ..base };
    vec![
        ("judge parse", script("unsure", Some("x"), ""), base),
        ("abduction", script("No", None, ""), base),
        ("generation parse", script("No", Some("x"), "insert_edge(\"a\")"), base),
        ("apply", script("No", Some("x"), "insert_edge(\"a\", \"b\", \"c\")|replace_node(\"no such item\", \"y\")"), strict),
    ]
}

fn end_to_end() -> Check {
    let cfg = replay_config();
    let gw = build_gateway(&cfg).map_err(|e| e.to_string())?;
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs = run_mini(&mini_dir().join("benchmark"), &cfg, &gw, work.path());
    ensure(runs.len() == 3, || format!("{} samples ran", runs.len()))?;
    let mut gbd_sum = 0.0;
    for run in &runs {
        let r = &run.rewards[0];
        ensure(r.draft_acc == 0 && r.refined_acc == 1 && r.shaped == 1.0, || format!("{}: {r:?}", run.sample.record.id))?;
        gbd_sum += f64::from(r.gbd);
    }
    ensure(gbd_sum / 3.0 == 1.0, || format!("mean GBD {}", gbd_sum / 3.0))?;

    let e = HashEmbedder::new(cfg.embedding.dim, cfg.seed);
    for run in &runs {
        let sample = QuerySample {
            id: run.sample.record.id.clone(),
            question: run.sample.record.question.clone(),
            golden_answers: run.sample.record.golds.clone(),
            source_text: None,
        };
        for (point, gw, rcfg) in failing_gateways() {
            let mut kb = run.sample.corrupted_kb.clone();
            let before = kb.to_jsonl_string();
            let out = refine_query(&sample, &mut kb, &rcfg, &e, &gw);
            ensure(out.status() == "failed", || format!("{point}: outcome {}", out.status()))?;
            ensure(kb.to_jsonl_string() == before && kb.revision() == 0, || format!("{point}: KB changed"))?;
        }
    }
    Ok(())
}

fn group_standardization() -> Check {
    let mut rng = StdRng::seed_from_u64(6);
    let cells = [1.0, -0.3, 0.2, 0.0];
    let mut checked = 0;
    while checked < 1000 {
        let g = rng.random_range(2..17);
        let rewards: Vec<f64> = (0..g).map(|_| cells[rng.random_range(0..4)]).collect();
        let adv = group_advantages(&rewards).map_err(|e| e.to_string())?;
        if adv.std == 0.0 {
            ensure(adv.advantages.iter().all(|&a| a == 0.0), || "constant group got non-zero advantages".into())?;
            continue;
        }
        let n = adv.advantages.len() as f64;
        let mean = adv.advantages.iter().sum::<f64>() / n;
        let std = (adv.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        ensure(mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-9, || format!("{rewards:?}: mean {mean} std {std}"))?;
        checked += 1;
    }
    for r in [vec![1.0, 1.0], vec![0.2; 7], vec![-0.3]] {
        let adv = group_advantages(&r).map_err(|e| e.to_string())?;
        ensure(adv.advantages.iter().all(|&a| a == 0.0), || format!("constant group {r:?}"))?;
    }
    Ok(())
}

fn determinism() -> Check {
    let cfg = replay_config();
    let gw = build_gateway(&cfg).map_err(|e| e.to_string())?;
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let bench = mini_dir().join("benchmark");
    run_mini(&bench, &cfg, &gw, a.path());
    run_mini(&bench, &cfg, &gw, b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let names: Vec<&str> = ta.iter().map(|(n, _)| n.as_str()).collect();
    for f in ["refined_kb.jsonl", "stream_report.jsonl", "rollouts.jsonl"] {
        ensure(names.iter().filter(|n| n.ends_with(f)).count() == 3, || format!("missing {f} outputs"))?;
    }
    ensure(ta == tb, || "two identical runs produced different bytes".into())?;
    let (c, d) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    build_mini_benchmark(c.path());
    build_mini_benchmark(d.path());
    ensure(tree(c.path()) == tree(d.path()), || "corruption output differs between runs".into())
}

fn main() -> ExitCode {
    let checks: [Criterion; 10] = [
        ("reward matrix exactness", Duration::from_secs(1), reward_matrix),
        ("GBD identity over 1000 pairs", Duration::from_secs(1), gbd_identity),
        ("retrieval matches exhaustive cosine sort on 200 KBs", Duration::from_secs(10), retrieval_oracle),
        ("subgraph loop invariants over 100 runs", Duration::from_secs(10), loop_invariants),
        ("DSL round trip on the case-study blocks", Duration::from_secs(1), dsl_round_trip),
        ("greedy coverage quality and preset defaults", Duration::from_secs(30), greedy_quality),
        ("corruption thresholds and byte replay", Duration::from_secs(10), corruption_thresholds),
        ("end-to-end mocked refine and eval", Duration::from_secs(30), end_to_end),
        ("group advantage standardization", Duration::from_secs(5), group_standardization),
        ("determinism of the mocked pipeline", Duration::from_secs(30), determinism),
    ];
    let mut failed = 0;
    for (name, limit, check) in checks {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let result = result.and_then(|()| ensure(took <= limit, || format!("took {took:?}, limit {limit:?}")));
        match result {
            Ok(()) => println!("PASS  {name} ({:.3}s)", took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({:.3}s): {why}", took.as_secs_f64());
            }
        }
    }
    println!("{} of {} acceptance checks passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
