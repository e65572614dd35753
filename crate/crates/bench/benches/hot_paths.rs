use criterion::{black_box, criterion_group, criterion_main, Criterion};
use kbrefine_core::coverage::{greedy_select, CoverageConfig, QueryCoverage};
use kbrefine_core::dsl::parse_actions;
use kbrefine_core::embed::{CachedEmbedder, HashEmbedder};
use kbrefine_core::kb::{KnowledgeBase, Triple};
use kbrefine_core::retrieval::top_k_triples;

fn synthetic_kb(n: usize) -> KnowledgeBase {
    KnowledgeBase::from_triples((0..n).map(|i| {
        Triple::new(format!("entity {}", i % 997), format!("relation {}", i % 31), format!("entity {}", (i * 7) % 991)).unwrap()
    }))
    .unwrap()
}

fn retrieval(c: &mut Criterion) {
    let kb = synthetic_kb(5_000);
    let cold = HashEmbedder::default();
    c.bench_function("top_k over 5k triples, uncached", |b| {
        b.iter(|| top_k_triples("q", black_box("entity 42 relation 7"), &kb, 5, &cold).unwrap())
    });
    let warm = CachedEmbedder::new(HashEmbedder::default());
    top_k_triples("q", "entity 42 relation 7", &kb, 5, &warm).unwrap();
    c.bench_function("top_k over 5k triples, cached", |b| {
        b.iter(|| top_k_triples("q", black_box("entity 42 relation 7"), &kb, 5, &warm).unwrap())
    });
}

fn dsl(c: &mut Criterion) {
    let block = "insert_edge(`Modern Husbands', `directed-by', `Luis Bayón Herrera')|insert_edge(`The Fighting Vigilantes', `directed-by', `Ray Taylor')|replace_node(`Ray Taylor', `Ray Taylor (1888-12-01 to 1952-02-15)')|".repeat(20);
    c.bench_function("parse 60 actions", |b| b.iter(|| parse_actions(black_box(&block)).unwrap()));
}

fn coverage(c: &mut Criterion) {
    let covs: Vec<QueryCoverage<u32>> = (0..2_000u32)
        .map(|i| QueryCoverage::new(format!("q{i:05}"), (0..40).map(|j| (i * 31 + j * 17) % 20_000)))
        .collect();
    let cfg = CoverageConfig { budget: 1_000, rho: 0.8, ..CoverageConfig::default() };
    c.bench_function("greedy select over 2k queries", |b| b.iter(|| greedy_select(black_box(&covs), &cfg)));
}

criterion_group!(benches, retrieval, dsl, coverage);
criterion_main!(benches);
