//! The sampler policy: candidate descriptors to a budget distribution and
//! per-candidate selection logits, plus stochastic and deterministic action
//! selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{bernoulli_entropy, sigmoid, softplus};
use crate::nn::{EncoderBlock, ForwardCtx, Graph, LayerNorm, Linear, ParameterStore, Tensor, Var};
use crate::rng::{self, Rng};
use crate::sampler::{CandidatePool, FEATURE_DIM};

/// Ordered set of admissible anchor budgets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct BudgetSet(Vec<usize>);

impl BudgetSet {
    pub fn new(budgets: Vec<usize>) -> Result<Self> {
        if budgets.is_empty() {
            return Err(Error::Validation {
                field: "budgets",
                reason: "empty budget set".into(),
            });
        }
        if budgets[0] == 0 || budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation {
                field: "budgets",
                reason: format!("{budgets:?} must be strictly increasing and >= 1"),
            });
        }
        Ok(BudgetSet(budgets))
    }

    /// Full-scale budgets.
    pub fn canonical() -> Self {
        BudgetSet(vec![256, 512, 1024, 2048, 3072, 4096, 6144, 8192])
    }

    /// Desk-scale default (full-scale set divided by 32).
    pub fn toy() -> Self {
        BudgetSet(vec![8, 16, 32, 64, 96, 128, 192, 256])
    }

    /// Full-scale set divided by a power of two; `toy()` is `scaled(32)`.
    pub fn scaled(divisor: usize) -> Result<Self> {
        let canon = Self::canonical();
        if divisor == 0 || canon.0.iter().any(|b| b % divisor != 0) {
            return Err(Error::arg(format!("budget divisor {divisor} does not divide every budget")));
        }
        Self::new(canon.0.iter().map(|b| b / divisor).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn min(&self) -> usize {
        self.0[0]
    }

    pub fn max(&self) -> usize {
        *self.0.last().unwrap()
    }

    pub fn index_of(&self, kappa: usize) -> Option<usize> {
        self.0.iter().position(|&b| b == kappa)
    }

    /// Index of the entry closest to `kappa`; ties go to the smaller budget.
    pub fn nearest_index(&self, kappa: usize) -> usize {
        let mut best = 0;
        for (i, &b) in self.0.iter().enumerate() {
            if b.abs_diff(kappa) < self.0[best].abs_diff(kappa) {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<usize>> for BudgetSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        BudgetSet::new(v)
    }
}

impl From<BudgetSet> for Vec<usize> {
    fn from(b: BudgetSet) -> Self {
        b.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            dim: 128,
            heads: 4,
            layers: 2,
            ffn_hidden: 256,
            dropout: 0.1,
            pooling: Pooling::Mean,
        }
    }
}

/// Raw policy outputs for one pool.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub budget_logits: Vec<f64>,
    pub select_logits: Vec<f64>,
}

/// Graph handles for a forward pass, used by the trainer to build losses.
#[derive(Clone, Copy, Debug)]
pub struct PolicyVars {
    /// `1 x |B|`.
    pub budget_logits: Var,
    /// `M x 1`.
    pub select_logits: Var,
}

/// A chosen budget and subset. `local` holds pool positions and `subset`
/// the matching original frame indices; both are sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorAction {
    pub budget_index: usize,
    pub kappa: usize,
    pub local: Vec<usize>,
    pub subset: Vec<usize>,
    /// True when the drawn budget exceeded the pool and `kappa` was reduced.
    pub clamped: bool,
}

impl AnchorAction {
    /// Checks `|subset| = kappa`, no duplicates, membership in the pool, and
    /// `kappa` equal to the budget entry unless clamped to the pool size.
    pub fn validate(&self, budgets: &BudgetSet, pool_len: usize) -> Result<()> {
        let fail = |reason: String| Err(Error::Validation { field: "action", reason });
        if self.budget_index >= budgets.len() {
            return fail(format!("budget index {} out of range", self.budget_index));
        }
        let b = budgets.get(self.budget_index);
        let ok_kappa = if self.clamped { self.kappa == pool_len && pool_len < b } else { self.kappa == b };
        if !ok_kappa {
            return fail(format!("kappa {} inconsistent with budget {b}", self.kappa));
        }
        if self.local.len() != self.kappa || self.subset.len() != self.kappa {
            return fail(format!("subset size {} != kappa {}", self.local.len(), self.kappa));
        }
        if self.local.windows(2).any(|w| w[0] >= w[1]) || self.local.last().is_some_and(|&l| l >= pool_len) {
            return fail("subset not sorted, duplicated or outside the pool".into());
        }
        Ok(())
    }
}

/// Point MLP, set-attention encoder and the two heads.
#[derive(Clone, Debug)]
pub struct Policy {
    pub store: ParameterStore,
    pub config: PolicyConfig,
    budgets: BudgetSet,
    embed_in: Linear,
    embed_out: Linear,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
    select_head: Linear,
    budget_head: Linear,
}

impl Policy {
    pub fn new(config: PolicyConfig, budgets: BudgetSet, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Validation {
                field: "dropout",
                reason: format!("{} not in [0, 1)", config.dropout),
            });
        }
        let mut store = ParameterStore::new();
        let mut r = rng::stream(seed, &[rng::tag::INIT]);
        let d = config.dim;
        let embed_in = Linear::new(&mut store, &mut r, "embed.0", FEATURE_DIM, d)?;
        let embed_out = Linear::new(&mut store, &mut r, "embed.1", d, d)?;
        let blocks = (0..config.layers)
            .map(|l| EncoderBlock::new(&mut store, &mut r, &format!("block{l}"), d, config.heads, config.ffn_hidden))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(&mut store, "final_norm", d)?;
        let select_head = Linear::new(&mut store, &mut r, "select_head", d, 1)?;
        let budget_head = Linear::new(&mut store, &mut r, "budget_head", d, budgets.len())?;
        Ok(Policy {
            store,
            config,
            budgets,
            embed_in,
            embed_out,
            blocks,
            final_norm,
            select_head,
            budget_head,
        })
    }

    pub fn budgets(&self) -> &BudgetSet {
        &self.budgets
    }

    /// Rebuilds a policy around stored parameter values. Names and shapes
    /// must match what `config` and `budgets` produce.
    pub fn from_store(config: PolicyConfig, budgets: BudgetSet, store: &ParameterStore) -> Result<Self> {
        let mut p = Policy::new(config, budgets, 0)?;
        p.store.load_values(store)?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<std::path::Path>, config: PolicyConfig) -> Result<(Self, crate::nn::CheckpointMeta)> {
        let (store, meta) = crate::nn::read_checkpoint(path)?;
        let budgets = BudgetSet::new(meta.budgets.clone())?;
        Ok((Policy::from_store(config, budgets, &store)?, meta))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, seed: u64, config_hash: &str) -> Result<()> {
        let meta = crate::nn::CheckpointMeta {
            step: self.store.step(),
            seed,
            config_hash: config_hash.to_string(),
            budgets: self.budgets.as_slice().to_vec(),
        };
        crate::nn::write_checkpoint(path, &self.store, &meta)
    }

    /// Records the forward pass on `g`. `descriptors` is row-major `M x 6`.
    pub fn forward_graph(
        &self,
        store: &ParameterStore,
        g: &mut Graph,
        descriptors: &[f64],
        ctx: &mut ForwardCtx,
    ) -> Result<PolicyVars> {
        if descriptors.is_empty() {
            return Err(Error::arg("policy forward on an empty pool"));
        }
        if descriptors.len() % FEATURE_DIM != 0 {
            return Err(Error::Shape {
                op: "policy_forward",
                left: vec![descriptors.len()],
                right: vec![FEATURE_DIM],
            });
        }
        let m = descriptors.len() / FEATURE_DIM;
        let x = g.input(Tensor::matrix(m, FEATURE_DIM, descriptors.to_vec())?)?;
        let h = self.embed_in.forward(store, g, x)?;
        let h = g.relu(h)?;
        let mut h = self.embed_out.forward(store, g, h)?;
        for block in &self.blocks {
            h = block.forward(store, g, h, ctx)?;
        }
        let h = self.final_norm.forward(store, g, h)?;
        let select_logits = self.select_head.forward(store, g, h)?;
        let pooled = match self.config.pooling {
            Pooling::Mean => g.mean_rows(h)?,
            Pooling::Max => g.max_rows(h)?,
        };
        let budget_logits = self.budget_head.forward(store, g, pooled)?;
        Ok(PolicyVars {
            budget_logits,
            select_logits,
        })
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, descriptors: &[f64]) -> Result<PolicyOutput> {
        let mut g = Graph::new();
        let vars = self.forward_graph(&self.store, &mut g, descriptors, &mut ForwardCtx::eval())?;
        Ok(read_output(&g, vars))
    }
}

pub fn read_output(g: &Graph, vars: PolicyVars) -> PolicyOutput {
    PolicyOutput {
        budget_logits: g.value(vars.budget_logits).data().to_vec(),
        select_logits: g.value(vars.select_logits).data().to_vec(),
    }
}

/// Evaluation-mode forward pass over a pool's descriptor matrix.
pub fn policy_forward(policy: &Policy, descriptors: &[f64]) -> Result<PolicyOutput> {
    policy.forward(descriptors)
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    log_softmax(x).into_iter().map(f64::exp).collect()
}

/// Positions of the `k` largest values, ties to the lowest position,
/// returned sorted ascending.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut out = order[..k.min(values.len())].to_vec();
    out.sort_unstable();
    out
}

fn check_output(out: &PolicyOutput, pool: &CandidatePool, budgets: &BudgetSet) -> Result<()> {
    if out.budget_logits.len() != budgets.len() || out.select_logits.len() != pool.len() {
        return Err(Error::Shape {
            op: "policy_output",
            left: vec![out.budget_logits.len(), out.select_logits.len()],
            right: vec![budgets.len(), pool.len()],
        });
    }
    if pool.len() < budgets.min() {
        return Err(Error::InfeasiblePool {
            size: pool.len(),
            min_budget: budgets.min(),
        });
    }
    Ok(())
}

fn build_action(pool: &CandidatePool, budgets: &BudgetSet, budget_index: usize, local: Vec<usize>) -> AnchorAction {
    let b = budgets.get(budget_index);
    let subset = local.iter().map(|&l| pool.candidates[l].0).collect();
    AnchorAction {
        budget_index,
        kappa: local.len(),
        local,
        subset,
        clamped: b > pool.len(),
    }
}

/// The log-density used by the policy-gradient loss: the budget
/// log-probability plus `sum log sigmoid` over the chosen candidates.
pub fn action_log_prob(out: &PolicyOutput, action: &AnchorAction) -> f64 {
    let budget = log_softmax(&out.budget_logits)[action.budget_index];
    let subset: f64 = action.local.iter().map(|&m| -softplus(-out.select_logits[m])).sum();
    budget + subset
}

/// Draws a budget from the categorical head and a subset by Gumbel-top-κ.
pub fn sample_action(
    out: &PolicyOutput,
    pool: &CandidatePool,
    budgets: &BudgetSet,
    rng: &mut Rng,
) -> Result<(AnchorAction, f64)> {
    check_output(out, pool, budgets)?;
    let probs = softmax(&out.budget_logits);
    let u = rng::unit(rng);
    let mut budget_index = probs.len() - 1;
    let mut cdf = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cdf += p;
        if u < cdf {
            budget_index = i;
            break;
        }
    }
    let kappa = budgets.get(budget_index).min(pool.len());
    let keys: Vec<f64> = out.select_logits.iter().map(|l| l + rng::gumbel(rng)).collect();
    let action = build_action(pool, budgets, budget_index, top_k(&keys, kappa));
    let lp = action_log_prob(out, &action);
    Ok((action, lp))
}

/// Deterministic selection: the forced budget (which must belong to the set)
/// or the argmax budget, then the top-κ selection logits.
pub fn infer_action(
    out: &PolicyOutput,
    pool: &CandidatePool,
    budgets: &BudgetSet,
    forced_budget: Option<usize>,
) -> Result<AnchorAction> {
    check_output(out, pool, budgets)?;
    let budget_index = match forced_budget {
        Some(k) => budgets
            .index_of(k)
            .ok_or_else(|| Error::arg(format!("forced budget {k} not in {:?}", budgets.as_slice())))?,
        None => top_k(&out.budget_logits, 1)[0],
    };
    let kappa = budgets.get(budget_index).min(pool.len());
    Ok(build_action(pool, budgets, budget_index, top_k(&out.select_logits, kappa)))
}

/// Budget entropy plus the mean per-candidate Bernoulli entropy.
pub fn action_entropy(out: &PolicyOutput) -> f64 {
    let lp = log_softmax(&out.budget_logits);
    let cat: f64 = lp.iter().map(|l| -l.exp() * l).sum();
    let n = out.select_logits.len() as f64;
    cat + out.select_logits.iter().map(|&z| bernoulli_entropy(z)).sum::<f64>() / n
}

/// Differentiable counterpart of [`action_entropy`].
pub fn action_entropy_graph(g: &mut Graph, vars: PolicyVars) -> Result<Var> {
    let c = g.categorical_entropy(vars.budget_logits)?;
    let b = g.bernoulli_entropy_mean(vars.select_logits)?;
    g.add(c, b)
}

/// Differentiable counterpart of [`action_log_prob`].
pub fn action_log_prob_graph(g: &mut Graph, vars: PolicyVars, action: &AnchorAction) -> Result<Var> {
    let b = g.log_softmax_pick(vars.budget_logits, action.budget_index)?;
    let s = g.log_sigmoid_sum(vars.select_logits, action.local.clone())?;
    g.add(b, s)
}

/// Probability that Gumbel-top-κ over `logits` returns exactly the set
/// `subset`, by summing the Plackett-Luce probability of every ordering.
/// Only intended for small sets.
pub fn gumbel_top_k_set_log_prob(logits: &[f64], subset: &[usize]) -> f64 {
    let mut terms = Vec::new();
    for_each_permutation(subset, &mut |order| {
        let mut remaining: Vec<bool> = vec![true; logits.len()];
        let mut lp = 0.0;
        for &i in order {
            let rest: Vec<f64> = (0..logits.len()).filter(|&j| remaining[j]).map(|j| logits[j]).collect();
            let m = rest.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + rest.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lp += logits[i] - lse;
            remaining[i] = false;
        }
        terms.push(lp);
    });
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Differentiable counterpart of [`gumbel_top_k_set_log_prob`] on a flat
/// logits variable.
pub fn gumbel_top_k_set_log_prob_graph(g: &mut Graph, logits: Var, subset: &[usize]) -> Result<Var> {
    let n = g.value(logits).len();
    let mut orders = Vec::new();
    for_each_permutation(subset, &mut |order| orders.push(order.to_vec()));
    let mut terms = Vec::with_capacity(orders.len());
    for order in orders {
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut acc: Option<Var> = None;
        for &i in &order {
            let pick = g.pick(logits, i)?;
            let lse = g.logsumexp_subset(logits, remaining.clone())?;
            let term = g.sub(pick, lse)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
            remaining.retain(|&j| j != i);
        }
        terms.push(acc.ok_or_else(|| Error::arg("empty subset"))?);
    }
    let row = g.concat_cols(&terms)?;
    let all: Vec<usize> = (0..terms.len()).collect();
    g.logsumexp_subset(row, all)
}

fn for_each_permutation(items: &[usize], f: &mut dyn FnMut(&[usize])) {
    fn rec(cur: &mut Vec<usize>, rest: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if rest.is_empty() {
            f(cur);
            return;
        }
        for i in 0..rest.len() {
            let x = rest.remove(i);
            cur.push(x);
            rec(cur, rest, f);
            cur.pop();
            rest.insert(i, x);
        }
    }
    rec(&mut Vec::new(), &mut items.to_vec(), f);
}

/// Bernoulli inclusion probabilities implied by the selection logits.
pub fn selection_probabilities(out: &PolicyOutput) -> Vec<f64> {
    out.select_logits.iter().map(|&z| sigmoid(z)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Aabb, Frame, GaussianPrimitive};

    pub(crate) fn line_pool(n: usize) -> CandidatePool {
        let frame = Frame {
            index: 0,
            primitives: (0..n)
                .map(|i| GaussianPrimitive {
                    center: [i as f64 / n as f64 - 0.5, 0.0, 0.0],
                    opacity: 0.5,
                    scale: [0.01; 3],
                })
                .collect(),
        };
        CandidatePool::build(&frame, Aabb::default(), 4096, 0.01).unwrap()
    }

    #[test]
    fn budget_sets() {
        assert_eq!(BudgetSet::scaled(32).unwrap(), BudgetSet::toy());
        assert_eq!(BudgetSet::scaled(64).unwrap().as_slice(), &[4, 8, 16, 32, 48, 64, 96, 128]);
        assert!(BudgetSet::scaled(3).is_err());
        assert!(BudgetSet::new(vec![4, 4]).is_err());
        assert!(BudgetSet::new(vec![0, 4]).is_err());
        let b = BudgetSet::new(vec![8, 16]).unwrap();
        assert_eq!(b.nearest_index(12), 0);
        assert_eq!(b.nearest_index(13), 1);
        assert_eq!(b.nearest_index(1000), 1);
    }

    #[test]
    fn uniform_budget_and_zero_logits() {
        let budgets = BudgetSet::toy();
        let pool = line_pool(16);
        let out = PolicyOutput {
            budget_logits: vec![0.3; 8],
            select_logits: vec![0.0; 16],
        };
        let action = infer_action(&out, &pool, &budgets, Some(8)).unwrap();
        let lp = action_log_prob(&out, &action);
        assert!((lp - ((1.0f64 / 8.0).ln() + 8.0 * 0.5f64.ln())).abs() < 1e-12);
        assert!((action_entropy(&out) - (8f64.ln() + 2f64.ln())).abs() < 1e-12);
        let two = BudgetSet::new(vec![2]).unwrap();
        let out2 = PolicyOutput {
            budget_logits: vec![0.0],
            select_logits: vec![0.0; 16],
        };
        let a = infer_action(&out2, &pool, &two, None).unwrap();
        assert!((action_log_prob(&out2, &a) - (-1.3863)).abs() < 1e-4);
    }

    #[test]
    fn infer_ties_and_forced_budget() {
        let pool = line_pool(4);
        let budgets = BudgetSet::new(vec![1, 2]).unwrap();
        let out = PolicyOutput {
            budget_logits: vec![0.0, 0.0],
            select_logits: vec![0.9, 0.2, 0.9, 0.5],
        };
        let a = infer_action(&out, &pool, &budgets, Some(2)).unwrap();
        assert_eq!(a.local, vec![0, 2]);
        assert!(infer_action(&out, &pool, &budgets, Some(3)).is_err());
        // argmax budget tie goes to the lowest index
        assert_eq!(infer_action(&out, &pool, &budgets, None).unwrap().kappa, 1);
        assert_eq!(a, infer_action(&out, &pool, &budgets, Some(2)).unwrap());
    }

    #[test]
    fn infeasible_and_clamped() {
        let pool = line_pool(10);
        let budgets = BudgetSet::toy();
        let out = PolicyOutput {
            budget_logits: vec![0.0; 8],
            select_logits: vec![0.0; 10],
        };
        let mut r = rng::stream(1, &[]);
        for _ in 0..50 {
            let (a, _) = sample_action(&out, &pool, &budgets, &mut r).unwrap();
            a.validate(&budgets, pool.len()).unwrap();
            assert_eq!(a.clamped, a.budget_index > 0);
        }
        let small = line_pool(5);
        let out = PolicyOutput {
            budget_logits: vec![0.0; 8],
            select_logits: vec![0.0; 5],
        };
        assert!(matches!(
            sample_action(&out, &small, &budgets, &mut r),
            Err(Error::InfeasiblePool { size: 5, min_budget: 8 })
        ));
    }

    #[test]
    fn peaked_entropy_small() {
        let mut budget_logits = vec![-10.0; 8];
        budget_logits[0] = 10.0;
        let out = PolicyOutput {
            budget_logits,
            select_logits: vec![30.0; 4],
        };
        let h = action_entropy(&out);
        assert!((0.0..1e-3).contains(&h), "{h}");
    }

    #[test]
    fn plackett_luce_sums_to_one() {
        let logits = [0.3, -1.2, 2.0, 0.1];
        let mut total = 0.0;
        for a in 0..4 {
            for b in a + 1..4 {
                total += gumbel_top_k_set_log_prob(&logits, &[a, b]).exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 4, logits.to_vec()).unwrap()).unwrap();
        let v = gumbel_top_k_set_log_prob_graph(&mut g, x, &[1, 3]).unwrap();
        assert!((g.value(v).item() - gumbel_top_k_set_log_prob(&logits, &[1, 3])).abs() < 1e-12);
    }

    #[test]
    fn top_k_monotone_invariance() {
        let v = [0.3, -0.7, 1.5, 1.5, 0.0, -2.0];
        for k in 0..=6 {
            let base = top_k(&v, k);
            let t: Vec<f64> = v.iter().map(|x| 3.0 * x + 7.0).collect();
            assert_eq!(top_k(&t, k), base);
        }
    }
}
