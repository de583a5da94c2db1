//! Batch APIs (rayon under the default `parallel` feature) against a plain
//! sequential loop over the same per-item function. Built with
//! `--no-default-features`, both arms run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use inlinethink_core::analysis::{
    classify_positions, entropy_diff, entropy_diff_corpus, syntax_histogram, SyntaxProfile,
};
use inlinethink_core::fixtures;
use inlinethink_core::grpo::{grpo_objective, grpo_objective_batch, GrpoConfig, Rollout, RolloutGroup};
use inlinethink_core::interleave::{extract_code, parse_mixed_sequence, DelimiterScheme};
use rand::Rng;

fn groups(n: usize) -> Vec<RolloutGroup> {
    let mut rng = fixtures::rng(11);
    (0..n)
        .map(|g| RolloutGroup {
            prompt_id: g.to_string(),
            rollouts: (0..8)
                .map(|_| {
                    let len = rng.random_range(200..1000);
                    let old: Vec<f64> = (0..len).map(|_| rng.random_range(-6.0..-0.01)).collect();
                    let theta = old.iter().map(|o: &f64| (o + rng.random_range(-0.3..0.3)).min(0.0)).collect();
                    let reference = old.iter().map(|o: &f64| (o + rng.random_range(-0.3..0.3)).min(0.0)).collect();
                    Rollout {
                        tokens: vec![0; len],
                        logp_theta: theta,
                        logp_old: old,
                        logp_ref: reference,
                        reward: rng.random_range(0.0..1.1),
                    }
                })
                .collect(),
        })
        .collect()
}

fn bench(c: &mut Criterion) {
    let cfg = GrpoConfig::default();
    let batch = groups(256);
    let mut g = c.benchmark_group("grpo_objective");
    g.bench_function(BenchmarkId::new("batch", inlinethink_core::par::is_parallel()), |b| {
        b.iter(|| grpo_objective_batch(black_box(&batch), &cfg))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| black_box(&batch).iter().map(|x| grpo_objective(x, &cfg)).collect::<Vec<_>>())
    });
    g.finish();

    let pairs = fixtures::paired_entropy_corpus(2000, 0.3, 0.9, 12);
    let mut g = c.benchmark_group("entropy_diff");
    g.bench_function(BenchmarkId::new("batch", inlinethink_core::par::is_parallel()), |b| {
        b.iter(|| entropy_diff_corpus(black_box(&pairs), 10))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| black_box(&pairs).iter().map(|(e, d)| entropy_diff(e, d, 10)).collect::<Vec<_>>())
    });
    g.finish();

    let scheme = DelimiterScheme::text_tags();
    let profile = SyntaxProfile::default();
    let corpus: Vec<_> = fixtures::syntax_corpus()
        .iter()
        .cycle()
        .take(2000)
        .map(|case| (parse_mixed_sequence(&case.raw, &scheme).unwrap(), profile.clone()))
        .collect();
    let mut g = c.benchmark_group("syntax_histogram");
    g.bench_function(BenchmarkId::new("batch", inlinethink_core::par::is_parallel()), |b| {
        b.iter(|| syntax_histogram(black_box(&corpus)))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| {
            black_box(&corpus)
                .iter()
                .map(|(seq, p)| classify_positions(&extract_code(seq), &seq.ta_onsets(), p).map(|v| v.len()))
                .collect::<Vec<_>>()
        })
    });
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
