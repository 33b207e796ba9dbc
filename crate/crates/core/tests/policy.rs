mod common;

use std::collections::HashMap;

use egs_core::policy::{
    gumbel_top_k_set_log_prob, infer_action, sample_action, softmax, AnchorAction, PolicyOutput,
};
use egs_core::rng;
use egs_core::sampler::CandidatePool;
use egs_core::scene::{Aabb, GaussianPrimitive};
use egs_core::{BudgetSet, Policy, PolicyConfig};
use proptest::prelude::*;

fn pool(n: usize) -> CandidatePool {
    CandidatePool {
        source_frame: 0,
        candidates: (0..n)
            .map(|i| {
                (
                    10 + 3 * i,
                    GaussianPrimitive {
                        center: [i as f64 / n as f64, 0.5, 0.5],
                        opacity: 0.5,
                        scale: [0.01; 3],
                    },
                )
            })
            .collect(),
        bbox: Aabb::default(),
        cap: 2048,
    }
}

#[test]
fn selection_is_permutation_equivariant_and_budget_invariant() {
    for pooling in [egs_core::policy::Pooling::Mean, egs_core::policy::Pooling::Max] {
        let cfg = PolicyConfig {
            pooling,
            ..common::small_policy_config()
        };
        let policy = Policy::new(cfg, BudgetSet::toy(), 1).unwrap();
        let m = 9;
        let desc = common::random_descriptors(1, m);
        let perm = [3, 7, 0, 8, 1, 5, 2, 6, 4];
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| desc[i * 6..i * 6 + 6].to_vec()).collect();
        let a = policy.forward(&desc).unwrap();
        let b = policy.forward(&permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((a.select_logits[i] - b.select_logits[k]).abs() < 1e-10);
        }
        for (x, y) in a.budget_logits.iter().zip(&b.budget_logits) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn gumbel_top_k_frequencies_match_exact_probabilities() {
    let budgets = BudgetSet::new(vec![1, 2]).unwrap();
    let out = PolicyOutput {
        budget_logits: vec![0.3, -0.4],
        select_logits: vec![1.0, -0.5, 0.2, 0.0],
    };
    let p = pool(4);
    let n = 1_000_000;
    let mut r = rng::stream(99, &[0]);
    let mut counts: HashMap<(usize, Vec<usize>), usize> = HashMap::new();
    for _ in 0..n {
        let (a, _) = sample_action(&out, &p, &budgets, &mut r).unwrap();
        *counts.entry((a.budget_index, a.local)).or_default() += 1;
    }
    let pb = softmax(&out.budget_logits);
    let mut total_p = 0.0;
    let subsets: Vec<(usize, Vec<usize>)> = (0..4)
        .map(|i| (0, vec![i]))
        .chain((0..4).flat_map(|i| (i + 1..4).map(move |j| (1, vec![i, j]))))
        .collect();
    for (bi, set) in subsets {
        let prob = pb[bi] * gumbel_top_k_set_log_prob(&out.select_logits, &set).exp();
        total_p += prob;
        let freq = *counts.get(&(bi, set.clone())).unwrap_or(&0) as f64 / n as f64;
        let sigma = (prob * (1.0 - prob) / n as f64).sqrt();
        assert!((freq - prob).abs() < 5.0 * sigma, "{bi} {set:?}: {freq} vs {prob}");
    }
    assert!((total_p - 1.0).abs() < 1e-12);
}

#[test]
fn infer_is_deterministic_top_k() {
    let budgets = BudgetSet::new(vec![2, 3]).unwrap();
    let out = PolicyOutput {
        budget_logits: vec![0.0, 1.0],
        select_logits: vec![0.1, 0.9, 0.5, 0.9, -1.0],
    };
    let a = infer_action(&out, &pool(5), &budgets, None).unwrap();
    assert_eq!((a.kappa, a.local.clone()), (3, vec![1, 2, 3]));
    assert_eq!(a.subset, vec![13, 16, 19]);
    let a = infer_action(&out, &pool(5), &budgets, Some(2)).unwrap();
    assert_eq!(a.local, vec![1, 3]);
    assert!(infer_action(&out, &pool(5), &budgets, Some(4)).is_err());
}

#[test]
fn small_pools_clamp_or_fail() {
    let budgets = BudgetSet::new(vec![2, 8]).unwrap();
    let out = PolicyOutput {
        budget_logits: vec![-50.0, 50.0],
        select_logits: vec![0.0; 5],
    };
    let mut r = rng::stream(1, &[0]);
    let (a, _) = sample_action(&out, &pool(5), &budgets, &mut r).unwrap();
    assert!(a.clamped && a.kappa == 5);
    a.validate(&budgets, 5).unwrap();
    let out1 = PolicyOutput {
        budget_logits: vec![0.0, 0.0],
        select_logits: vec![0.0],
    };
    assert_eq!(
        sample_action(&out1, &pool(1), &budgets, &mut r).unwrap_err().kind(),
        "infeasible_pool"
    );
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    let cfg = common::small_policy_config();
    let policy = Policy::new(cfg.clone(), BudgetSet::toy(), 8).unwrap();
    policy.save(&path, 8, "abc").unwrap();
    let (back, meta) = Policy::load(&path, cfg).unwrap();
    assert_eq!(meta.config_hash, "abc");
    assert_eq!(back.budgets(), policy.budgets());
    let desc = common::random_descriptors(8, 7);
    assert_eq!(back.forward(&desc).unwrap(), policy.forward(&desc).unwrap());
    // architecture mismatch is reported, not silently accepted
    assert!(Policy::load(&path, PolicyConfig::default()).is_err());
}

proptest! {
    #[test]
    fn sampled_actions_are_valid(
        seed in 0u64..1000,
        m in 1usize..40,
        logits in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let budgets = BudgetSet::toy();
        let p = pool(m.max(budgets.min()));
        let out = PolicyOutput {
            budget_logits: logits,
            select_logits: (0..p.len()).map(|i| ((i * 37) % 11) as f64 / 3.0 - 1.5).collect(),
        };
        let mut r = rng::stream(seed, &[0]);
        let (a, lp): (AnchorAction, f64) = sample_action(&out, &p, &budgets, &mut r).unwrap();
        prop_assert!(a.validate(&budgets, p.len()).is_ok());
        prop_assert!(lp.is_finite() && lp <= 0.0);
        prop_assert_eq!(a.kappa, budgets.get(a.budget_index).min(p.len()));
    }
}
