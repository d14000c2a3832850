use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId as Id, Criterion, Throughput};
use lexprep_core::endpoint::CompletionClient;
use lexprep_core::evalharness::{evaluate, evaluate_sequential, BenchmarkId, BenchmarkItem, EvalConfig, EvalTemplate};
use lexprep_core::ingest::{RawDocument, WordCount};
use lexprep_core::mock::MockEndpoint;
use lexprep_core::packer::{pack_shards, pack_shards_sequential, PackItem, PackerConfig};
use lexprep_core::transform::{PromptDb, TransformInput, TransformSettings, Transformer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

const PARAGRAPH: &str = "The court reviewed the denial of the motion for summary judgment de novo and considered whether any genuine dispute of material fact remained for trial. The defendant argued that the claim was barred by estoppel because the plaintiff had accepted payment under the settlement agreement. The court rejected that argument and held that the plaintiff retained standing to pursue the negligence claim.";

fn documents(n: usize) -> Vec<TransformInput> {
    (0..n)
        .map(|i| {
            let text = format!("{PARAGRAPH}\n\nDocket entry {i}. {PARAGRAPH}");
            RawDocument {
                id: format!("doc-{i}"),
                token_estimate: text.split_whitespace().count(),
                text,
                source: "freelaw".into(),
                token_method: "word-count".into(),
                meta: Default::default(),
            }
        })
        .map(|doc| TransformInput { doc, general: false })
        .collect()
}

fn shards(count: usize, per_shard: usize) -> Vec<Vec<PackItem>> {
    let d = LogNormal::new(350f64.ln(), 0.8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    (0..count)
        .map(|s| {
            (0..per_shard)
                .map(|i| PackItem::new(format!("{s}:{i}"), (d.sample(&mut rng) as u64).clamp(1, 2048)))
                .collect()
        })
        .collect()
}

fn bench_items(n: usize) -> Vec<BenchmarkItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..n)
        .map(|i| {
            let labels = (0..4).map(|j| format!("holding {j} of case {i}")).collect();
            BenchmarkItem::from_labels(
                format!("mmlu-professional-law:{i}"),
                BenchmarkId::MmluProfessionalLaw,
                format!("{PARAGRAPH} Which holding follows?"),
                labels,
                rng.random_range(0..4),
            )
            .unwrap()
        })
        .collect()
}

fn transform(c: &mut Criterion) {
    let db = PromptDb::builtin();
    let client = CompletionClient::immediate(Arc::new(MockEndpoint::new()));
    let settings = TransformSettings::default();
    let t = Transformer {
        db: &db,
        primary: &client,
        secondary: None,
        counter: &WordCount,
        settings: &settings,
    };
    let docs = documents(512);
    let mut g = c.benchmark_group("transform_batch");
    g.throughput(Throughput::Elements(docs.len() as u64));
    g.bench_function(Id::new("parallel", docs.len()), |b| b.iter(|| black_box(t.transform_batch(&docs))));
    g.bench_function(Id::new("sequential", docs.len()), |b| {
        b.iter(|| black_box(t.transform_batch_sequential(&docs)))
    });
    g.finish();
}

fn pack(c: &mut Criterion) {
    let cfg = PackerConfig::ctx_2k();
    let input = shards(32, 5_000);
    let mut g = c.benchmark_group("pack_shards");
    g.throughput(Throughput::Elements(32 * 5_000));
    g.bench_function("parallel", |b| b.iter(|| black_box(pack_shards(&input, &cfg))));
    g.bench_function("sequential", |b| b.iter(|| black_box(pack_shards_sequential(&input, &cfg))));
    g.finish();
}

fn eval(c: &mut Criterion) {
    let items = bench_items(2_000);
    let client = CompletionClient::immediate(Arc::new(MockEndpoint::new()));
    let tpl = EvalTemplate::builtin();
    let cfg = EvalConfig::default();
    let mut g = c.benchmark_group("evaluate");
    g.throughput(Throughput::Elements(items.len() as u64));
    g.bench_function("parallel", |b| b.iter(|| black_box(evaluate(&items, &tpl, &client, &cfg, &WordCount))));
    g.bench_function("sequential", |b| {
        b.iter(|| black_box(evaluate_sequential(&items, &tpl, &client, &cfg, &WordCount)))
    });
    g.finish();
}

criterion_group!(benches, transform, pack, eval);
criterion_main!(benches);
