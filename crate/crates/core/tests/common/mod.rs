//! Fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use egs_core::nn::gradcheck::{check_inputs, check_params, GradCheckReport, DEFAULT_STEP};
use egs_core::nn::{EncoderBlock, FeedForward, ForwardCtx, Graph, LayerNorm, Linear, ParameterStore, SelfAttention, Tensor, Var};
use egs_core::policy::{action_entropy_graph, action_log_prob_graph, gumbel_top_k_set_log_prob_graph, AnchorAction};
use egs_core::rng::{self, Rng};
use egs_core::{BudgetSet, Policy, PolicyConfig, Result};

pub fn rand_tensor(r: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng::uniform(r, -1.0, 1.0)).collect()).unwrap()
}

/// Entries bounded away from zero so ReLU kinks stay outside the FD stencil.
pub fn rand_tensor_off_zero(r: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v = rng::uniform(r, 0.05, 1.0);
            if rng::unit(r) < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// `sum(w * v)` with fixed pseudo-random weights so every output entry
/// reaches the scalar with a distinct coefficient.
pub fn reduce(g: &mut Graph, v: Var) -> Result<Var> {
    let t = g.value(v);
    let (rows, cols) = (t.rows(), t.cols());
    let w: Vec<f64> = (0..rows * cols).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect();
    let w = g.input(Tensor::matrix(rows, cols, w)?)?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

pub type OpCheck = (&'static str, GradCheckReport);

/// Finite-difference checks of every differentiable graph op and layer.
pub fn gradcheck_ops() -> Result<Vec<OpCheck>> {
    let mut r = rng::stream(7, &[1]);
    let h = DEFAULT_STEP;
    let a34 = rand_tensor(&mut r, 3, 4);
    let b45 = rand_tensor(&mut r, 4, 5);
    let c34 = rand_tensor(&mut r, 3, 4);
    let row4 = rand_tensor(&mut r, 1, 4);
    let v6 = rand_tensor(&mut r, 6, 1);
    let mut out = Vec::new();

    out.push(("matmul", check_inputs(&[a34.clone(), b45.clone()], h, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        reduce(g, y)
    })?));
    out.push(("matmul_nt", check_inputs(&[a34.clone(), c34.clone()], h, |g, v| {
        let y = g.matmul_nt(v[0], v[1])?;
        reduce(g, y)
    })?));
    out.push(("add", check_inputs(&[a34.clone(), c34.clone()], h, |g, v| {
        let y = g.add(v[0], v[1])?;
        reduce(g, y)
    })?));
    out.push(("sub", check_inputs(&[a34.clone(), c34.clone()], h, |g, v| {
        let y = g.sub(v[0], v[1])?;
        reduce(g, y)
    })?));
    out.push(("mul", check_inputs(&[a34.clone(), c34.clone()], h, |g, v| {
        let y = g.mul(v[0], v[1])?;
        reduce(g, y)
    })?));
    out.push(("add_row", check_inputs(&[a34.clone(), row4.clone()], h, |g, v| {
        let y = g.add_row(v[0], v[1])?;
        reduce(g, y)
    })?));
    out.push(("scale", check_inputs(&[a34.clone()], h, |g, v| {
        let y = g.scale(v[0], -1.7)?;
        reduce(g, y)
    })?));
    out.push(("relu", check_inputs(&[rand_tensor_off_zero(&mut r, 3, 4)], h, |g, v| {
        let y = g.relu(v[0])?;
        reduce(g, y)
    })?));
    out.push(("exp", check_inputs(&[a34.clone()], h, |g, v| {
        let y = g.exp(v[0])?;
        reduce(g, y)
    })?));
    out.push(("softmax_rows", check_inputs(&[a34.clone()], h, |g, v| {
        let y = g.softmax_rows(v[0])?;
        reduce(g, y)
    })?));
    out.push((
        "layer_norm",
        check_inputs(&[a34.clone(), rand_tensor(&mut r, 1, 4), row4.clone()], h, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            reduce(g, y)
        })?,
    ));
    let mask: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.25 }).collect();
    out.push(("mask", check_inputs(&[a34.clone()], h, |g, v| {
        let y = g.mask(v[0], mask.clone())?;
        reduce(g, y)
    })?));
    out.push(("mean_rows", check_inputs(&[a34.clone()], h, |g, v| {
        let y = g.mean_rows(v[0])?;
        reduce(g, y)
    })?));
    out.push(("max_rows", check_inputs(&[a34.clone()], h, |g, v| {
        let y = g.max_rows(v[0])?;
        reduce(g, y)
    })?));
    out.push(("slice_cols", check_inputs(&[a34.clone()], h, |g, v| {
        let y = g.slice_cols(v[0], 1, 2)?;
        reduce(g, y)
    })?));
    out.push(("concat_cols", check_inputs(&[a34.clone(), rand_tensor(&mut r, 3, 2)], h, |g, v| {
        let y = g.concat_cols(&[v[0], v[1]])?;
        reduce(g, y)
    })?));
    out.push(("sum", check_inputs(&[a34.clone()], h, |g, v| g.sum(v[0]))?));
    out.push(("pick", check_inputs(&[a34.clone()], h, |g, v| g.pick(v[0], 5))?));
    out.push(("logsumexp_subset", check_inputs(&[v6.clone()], h, |g, v| {
        g.logsumexp_subset(v[0], vec![0, 2, 5])
    })?));
    out.push(("log_softmax_pick", check_inputs(&[v6.clone()], h, |g, v| g.log_softmax_pick(v[0], 3))?));
    out.push(("log_sigmoid_sum", check_inputs(&[v6.clone()], h, |g, v| {
        g.log_sigmoid_sum(v[0], vec![1, 4])
    })?));
    out.push(("bce_with_logits_mean", check_inputs(&[v6.clone()], h, |g, v| {
        g.bce_with_logits_mean(v[0], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
    })?));
    out.push(("cross_entropy", check_inputs(&[v6.clone()], h, |g, v| g.cross_entropy(v[0], 2))?));
    out.push(("categorical_entropy", check_inputs(&[v6.clone()], h, |g, v| g.categorical_entropy(v[0]))?));
    out.push(("bernoulli_entropy_mean", check_inputs(&[v6.clone()], h, |g, v| {
        g.bernoulli_entropy_mean(v[0])
    })?));
    out.push(("gumbel_top_k_set_log_prob", check_inputs(&[v6.clone()], h, |g, v| {
        gumbel_top_k_set_log_prob_graph(g, v[0], &[1, 3, 4])
    })?));

    // Layers, differentiated with respect to both inputs and parameters.
    let x = rand_tensor(&mut r, 5, 8);
    let mut store = ParameterStore::new();
    let mut pr = rng::stream(7, &[2]);
    let lin = Linear::new(&mut store, &mut pr, "lin", 8, 6)?;
    let ln = LayerNorm::new(&mut store, "ln", 8)?;
    let att = SelfAttention::new(&mut store, &mut pr, "att", 8, 2)?;
    let ffn = FeedForward::new(&mut store, &mut pr, "ffn", 8, 12)?;
    let block = EncoderBlock::new(&mut store, &mut pr, "block", 8, 2, 12)?;
    // Move LayerNorm away from its identity init so gamma/beta gradients are generic.
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).name.starts_with("ln.") {
            for v in store.value_mut(id).data_mut() {
                *v += rng::uniform(&mut pr, -0.5, 0.5);
            }
        }
    }
    let st = store.clone();
    out.push(("linear (input)", check_inputs(&[x.clone()], h, |g, v| {
        let y = lin.forward(&st, g, v[0])?;
        reduce(g, y)
    })?));
    out.push(("self_attention (input)", check_inputs(&[x.clone()], h, |g, v| {
        let y = att.forward(&st, g, v[0], &mut ForwardCtx::eval())?;
        reduce(g, y)
    })?));
    out.push(("encoder_block (input)", check_inputs(&[x.clone()], h, |g, v| {
        let y = block.forward(&st, g, v[0], &mut ForwardCtx::eval())?;
        reduce(g, y)
    })?));
    out.push((
        "layers (params)",
        check_params(&mut store, h, None, |s, g| {
            let xi = g.input(x.clone())?;
            let a = lin.forward(s, g, xi)?;
            let b = ln.forward(s, g, xi)?;
            let c = att.forward(s, g, b, &mut ForwardCtx::eval())?;
            let d = ffn.forward(s, g, c)?;
            let e = block.forward(s, g, d, &mut ForwardCtx::eval())?;
            let ra = reduce(g, a)?;
            let re = reduce(g, e)?;
            g.add(ra, re)
        })?,
    ));
    // A fixed dropout mask is part of the function, so FD still applies.
    out.push(("dropout (train ctx)", check_inputs(&[x.clone()], h, |g, v| {
        let mut ctx = ForwardCtx::train(0.3, 11, 4);
        let y = block.forward(&st, g, v[0], &mut ctx)?;
        reduce(g, y)
    })?));
    Ok(out)
}

pub fn small_policy_config() -> PolicyConfig {
    PolicyConfig {
        dim: 16,
        heads: 2,
        layers: 2,
        ffn_hidden: 32,
        dropout: 0.1,
        ..PolicyConfig::default()
    }
}

pub fn random_descriptors(seed: u64, m: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, &[3]);
    (0..m * 6).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect()
}

/// Scalar touching both heads, the action log-probability and the entropy.
fn policy_objective(policy: &Policy, store: &ParameterStore, g: &mut Graph, desc: &[f64]) -> Result<Var> {
    let vars = policy.forward_graph(store, g, desc, &mut ForwardCtx::eval())?;
    let s = reduce(g, vars.select_logits)?;
    let b = reduce(g, vars.budget_logits)?;
    let m = desc.len() / 6;
    let action = AnchorAction {
        budget_index: 1,
        kappa: 2,
        local: vec![0, m - 1],
        subset: vec![0, m - 1],
        clamped: false,
    };
    let lp = action_log_prob_graph(g, vars, &action)?;
    let ent = action_entropy_graph(g, vars)?;
    let t = g.add(s, b)?;
    let t = g.add(t, lp)?;
    g.add(t, ent)
}

/// FD check of the full policy over every parameter of a small instance.
pub fn gradcheck_policy_full() -> Result<GradCheckReport> {
    let budgets = BudgetSet::new(vec![2, 4, 8]).unwrap();
    let mut policy = Policy::new(small_policy_config(), budgets, 5)?;
    let desc = random_descriptors(5, 10);
    let p = policy.clone();
    check_params(&mut policy.store, DEFAULT_STEP, None, |s, g| policy_objective(&p, s, g, &desc))
}

/// FD check of the default-size policy on a seeded sample of parameters.
pub fn gradcheck_policy_default(samples: usize) -> Result<GradCheckReport> {
    let mut policy = Policy::new(PolicyConfig::default(), BudgetSet::toy(), 6)?;
    let desc = random_descriptors(6, 24);
    let mut r = rng::stream(6, &[4]);
    let sizes: Vec<usize> = policy.store.iter().map(|p| p.value.len()).collect();
    // every parameter tensor at least once, then uniform extras
    let mut select: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(p, &n)| (p, rng::below(&mut r, n as u64) as usize))
        .collect();
    while select.len() < samples {
        let p = rng::below(&mut r, sizes.len() as u64) as usize;
        select.push((p, rng::below(&mut r, sizes[p] as u64) as usize));
    }
    let p = policy.clone();
    check_params(&mut policy.store, DEFAULT_STEP, Some(&select), |s, g| policy_objective(&p, s, g, &desc))
}

/// Brute-force greedy farthest point sampling: recomputes every point's
/// distance to the whole selected set at each step.
pub fn fps_oracle(points: &[(usize, [f64; 3])], k: usize) -> Vec<usize> {
    let mut pts = points.to_vec();
    pts.sort_by_key(|p| p.0);
    let mut chosen = vec![0usize];
    while chosen.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for (j, (_, p)) in pts.iter().enumerate() {
            if chosen.contains(&j) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| {
                    let q = pts[c].1;
                    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
                })
                .fold(f64::INFINITY, f64::min);
            // strict comparison keeps the lowest index on ties
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, j));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen.into_iter().map(|j| pts[j].0).collect()
}

/// Random indexed point set. Half of the sets use a coarse integer grid so
/// that distance ties actually occur; indices are shuffled and sparse.
pub fn random_point_set(seed: u64) -> (Vec<(usize, [f64; 3])>, usize) {
    let mut r = rng::stream(seed, &[9]);
    let n = 1 + rng::below(&mut r, 64) as usize;
    let k = 1 + rng::below(&mut r, n as u64) as usize;
    let grid = rng::unit(&mut r) < 0.5;
    let mut ids: Vec<usize> = (0..n).map(|i| i * 3 + rng::below(&mut r, 3) as usize).collect();
    rng::shuffle(&mut r, &mut ids);
    let pts = ids
        .into_iter()
        .map(|id| {
            let mut c = [0.0; 3];
            for v in &mut c {
                *v = if grid {
                    rng::below(&mut r, 4) as f64
                } else {
                    rng::uniform(&mut r, -1.0, 1.0)
                };
            }
            (id, c)
        })
        .collect();
    (pts, k)
}

/// A tiny end-to-end setup: 2 scenes of 3 frames, 32 primitives each,
/// budgets {4, 8, 16} and a 24x24 render.
pub struct Toy {
    pub scenes: Vec<Vec<egs_core::Frame>>,
    pub env: egs_core::Environment,
    pub contexts: Vec<egs_core::FrameContext>,
    pub budgets: BudgetSet,
}

pub fn toy() -> Toy {
    use egs_core::{Aabb, Environment, RewardConfig, SceneSpec};
    let scenes: Vec<_> = (0..2)
        .map(|i| {
            egs_core::scene::generate_scene(&SceneSpec {
                seed: 40 + i,
                num_frames: 3,
                clusters: 2,
                primitives_per_cluster: 16,
                ..SceneSpec::default()
            })
            .unwrap()
        })
        .collect();
    let env = Environment::new(
        RewardConfig {
            kappa_max: 16,
            ref_budget: 16,
            teacher_budget: 32,
            image_width: 24,
            image_height: 24,
            ..RewardConfig::default()
        },
        Aabb::default(),
    )
    .unwrap();
    let contexts = egs_core::trainer::frame_contexts(&scenes, Aabb::default(), 2048, 0.01).unwrap();
    Toy {
        scenes,
        env,
        contexts,
        budgets: BudgetSet::new(vec![4, 8, 16]).unwrap(),
    }
}

pub fn toy_policy(toy: &Toy, seed: u64) -> Policy {
    Policy::new(
        PolicyConfig {
            layers: 1,
            ..small_policy_config()
        },
        toy.budgets.clone(),
        seed,
    )
    .unwrap()
}
