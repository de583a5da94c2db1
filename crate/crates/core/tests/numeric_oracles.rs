//! Exact-arithmetic oracles for the numeric kernels.

use inlinethink_core::analysis::pass_at_k;
use inlinethink_core::embed::{init_trigger_embeddings, EmbeddingTable, InitConfig};
use inlinethink_core::fixtures;
use inlinethink_core::grpo::{
    group_advantages, grpo_objective, kl_penalty, GrpoConfig, RatioLevel, Rollout, RolloutGroup,
};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use proptest::prelude::*;
use rand::Rng;

fn rat(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

/// Semantic-mix oracle in exact rationals, rounded once at the end.
fn embed_oracle(sources: &[&[f64]], anchor: &[f64]) -> Vec<f64> {
    let half = BigRational::new(BigInt::from(1), BigInt::from(2));
    let k = BigRational::from_integer(BigInt::from(sources.len()));
    (0..anchor.len())
        .map(|d| {
            let sum = sources.iter().fold(BigRational::zero(), |acc, v| acc + rat(v[d]));
            let v = &half * (sum / &k) + &half * rat(anchor[d]);
            v.to_f64().unwrap()
        })
        .collect()
}

fn random_table(dim: usize, seed: u64) -> EmbeddingTable {
    let mut rng = fixtures::rng(seed);
    let mut t = EmbeddingTable::new(dim);
    for name in InitConfig::default().required_sources() {
        t.insert(name, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    t
}

#[test]
fn embedding_matches_rational_oracle() {
    let cfg = InitConfig::default();
    for (dim, seed) in [(3, 1), (64, 2), (4096, 3)] {
        let t = random_table(dim, seed);
        let out = init_trigger_embeddings(&t, &cfg).unwrap();
        let sources: Vec<&[f64]> = cfg.subwords.iter().map(|s| t.get(s).unwrap()).collect();
        let open = embed_oracle(&sources, t.get(&cfg.open_anchor).unwrap());
        let close = embed_oracle(&sources, t.get(&cfg.close_anchor).unwrap());
        for (a, b) in out.e_open.iter().zip(&open).chain(out.e_close.iter().zip(&close)) {
            assert!((a - b).abs() <= 1e-12, "dim {dim}: {a} vs {b}");
        }
    }
}

#[test]
fn embedding_invariants() {
    let cfg = InitConfig::default();
    let t = random_table(32, 9);
    let base = init_trigger_embeddings(&t, &cfg).unwrap();

    // Linearity under scaling of every source vector.
    let mut scaled = t.clone();
    scaled.entries.values_mut().for_each(|v| v.iter_mut().for_each(|x| *x *= 3.0));
    let s = init_trigger_embeddings(&scaled, &cfg).unwrap();
    for (a, b) in s.e_open.iter().zip(&base.e_open) {
        assert!((a - 3.0 * b).abs() < 1e-12);
    }

    // Swapping anchors swaps outputs exactly.
    let swapped =
        InitConfig { open_anchor: cfg.close_anchor.clone(), close_anchor: cfg.open_anchor.clone(), ..cfg.clone() };
    let w = init_trigger_embeddings(&t, &swapped).unwrap();
    assert_eq!(w.e_open, base.e_close);
    assert_eq!(w.e_close, base.e_open);

    // Coordinatewise bound from the 0.5/0.5 mix.
    for d in 0..32 {
        let max_src = cfg.subwords.iter().map(|s| t.get(s).unwrap()[d].abs()).fold(0.0, f64::max);
        let anchor = t.get(&cfg.open_anchor).unwrap()[d].abs();
        assert!(base.e_open[d].abs() <= 0.5 * max_src + 0.5 * anchor + 1e-15);
    }
}

/// Exact mean of a reward vector.
fn rational_mean(r: &[f64]) -> BigRational {
    r.iter().fold(BigRational::zero(), |a, x| a + rat(*x)) / BigRational::from_integer(BigInt::from(r.len()))
}

fn rewards_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 2..16)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn advantages_centered_and_unit(rewards in rewards_strategy()) {
        let cfg = GrpoConfig::default();
        let adv = group_advantages(&rewards, &cfg).unwrap();
        let n = rewards.len() as f64;
        let mean = rational_mean(&rewards);
        let var = rewards.iter().fold(BigRational::zero(), |a, x| {
            let d = rat(*x) - &mean;
            a + &d * &d
        }) / BigRational::from_integer(BigInt::from(rewards.len()));
        let std = var.to_f64().unwrap().sqrt();
        if std > cfg.std_floor {
            prop_assert!(adv.iter().sum::<f64>().abs() < 1e-12);
            let pop_std = (adv.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
            prop_assert!((pop_std - 1.0).abs() < 1e-9);
            for (a, r) in adv.iter().zip(&rewards) {
                let expect = ((rat(*r) - &mean).to_f64().unwrap()) / std;
                prop_assert!((a - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shift_and_scale(rewards in rewards_strategy(), shift in -3.0f64..3.0, scale in 0.1f64..10.0) {
        let cfg = GrpoConfig::default();
        let base = group_advantages(&rewards, &cfg).unwrap();
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let s = group_advantages(&shifted, &cfg).unwrap();
        let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
        let k = group_advantages(&scaled, &cfg).unwrap();
        for i in 0..rewards.len() {
            // Shifting may break exact ties in floating point, so compare loosely.
            prop_assert!((s[i] - base[i]).abs() < 1e-6);
            prop_assert_eq!(k[i].signum() == base[i].signum() || base[i].abs() < 1e-6, true);
            for j in 0..rewards.len() {
                if rewards[i] < rewards[j] {
                    prop_assert!(k[i] <= k[j]);
                }
            }
        }
    }

    #[test]
    fn kl_nonnegative(theta in prop::collection::vec(-20.0f64..0.0, 1..20), seed in any::<u64>()) {
        let mut rng = fixtures::rng(seed);
        let reference: Vec<f64> = theta.iter().map(|_| rng.random_range(-20.0..0.0)).collect();
        let r = Rollout { tokens: vec![0; theta.len()], logp_theta: theta.clone(), logp_old: theta.clone(), logp_ref: reference, reward: 0.0 };
        prop_assert!(kl_penalty(&r).unwrap().iter().all(|k| *k >= 0.0));
    }

    #[test]
    fn clip_inert_inside_band(seed in any::<u64>(), g in 2usize..8) {
        let mut rng = fixtures::rng(seed);
        let cfg = GrpoConfig { beta: 0.0, ..GrpoConfig::default() };
        let rollouts: Vec<Rollout> = (0..g).map(|_| {
            let n = rng.random_range(1..12);
            let old: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..-0.5)).collect();
            let theta: Vec<f64> = old.iter().map(|o| o + rng.random_range(-0.15..0.15)).collect();
            Rollout { tokens: vec![0; n], logp_theta: theta.clone(), logp_old: old, logp_ref: theta, reward: rng.random_range(0.0..1.1) }
        }).collect();
        let group = RolloutGroup { prompt_id: "p".into(), rollouts };
        let rep = grpo_objective(&group, &cfg).unwrap();
        prop_assert_eq!(rep.clip_fraction, 0.0);
        let adv = group_advantages(&group.rewards(), &cfg).unwrap();
        let unclipped: f64 = group.rollouts.iter().zip(&adv).map(|(r, a)| {
            r.logp_theta.iter().zip(&r.logp_old).map(|(t, o)| (t - o).exp() * a).sum::<f64>() / r.len() as f64
        }).sum::<f64>() / g as f64;
        prop_assert_eq!(rep.objective, unclipped);
    }
}

#[test]
fn on_policy_objective_is_zero() {
    let mut rng = fixtures::rng(17);
    for level in [RatioLevel::Token, RatioLevel::Sequence] {
        for _ in 0..200 {
            let g = rng.random_range(2..10);
            let rollouts = (0..g)
                .map(|_| {
                    let n = rng.random_range(1..30);
                    let lp: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..0.0)).collect();
                    Rollout {
                        tokens: vec![1; n],
                        logp_theta: lp.clone(),
                        logp_old: lp.clone(),
                        logp_ref: lp,
                        reward: [0.0, 0.1, 1.0, 1.1][rng.random_range(0..4)],
                    }
                })
                .collect();
            let cfg = GrpoConfig { ratio_level: level, ..GrpoConfig::default() };
            let rep = grpo_objective(&RolloutGroup { prompt_id: "x".into(), rollouts }, &cfg).unwrap();
            assert!(rep.objective.abs() < 1e-12, "{}", rep.objective);
        }
    }
}

/// Exhaustive subset count: the fraction of size-`k` subsets of `n` samples
/// (the first `c` correct) that contain a correct one.
fn pass_at_k_enumerated(n: u32, c: u32, k: u32) -> BigRational {
    let (mut hit, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() == k {
            total += 1;
            if mask & ((1 << c) - 1) != 0 {
                hit += 1;
            }
        }
    }
    BigRational::new(BigInt::from(hit), BigInt::from(total))
}

#[test]
fn pass_at_k_matches_enumeration() {
    for n in 1..=12u32 {
        for c in 0..=n {
            for k in 1..=n {
                let got = pass_at_k(n as u64, c as u64, k as u64).unwrap();
                let want = pass_at_k_enumerated(n, c, k).to_f64().unwrap();
                assert!((got - want).abs() <= 1e-12, "n={n} c={c} k={k}: {got} vs {want}");
            }
            assert_eq!(pass_at_k(n as u64, 0, 1).unwrap(), 0.0);
            assert_eq!(pass_at_k(n as u64, n as u64, 1).unwrap(), 1.0);
        }
    }
    assert!(pass_at_k_enumerated(4, 2, 2) == BigRational::new(BigInt::from(5), BigInt::from(6)));
    assert!(pass_at_k_enumerated(3, 3, 3).is_one());
}

#[test]
fn pass_at_k_monotone() {
    for n in 1..=30u64 {
        for c in 0..=n {
            for k in 1..n {
                assert!(pass_at_k(n, c, k + 1).unwrap() >= pass_at_k(n, c, k).unwrap() - 1e-15);
                if c < n {
                    assert!(pass_at_k(n, c + 1, k).unwrap() >= pass_at_k(n, c, k).unwrap() - 1e-15);
                }
            }
        }
    }
}
