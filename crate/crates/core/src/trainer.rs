//! Imitation warm start against FPS labels followed by REINFORCE bandit
//! updates with an EMA baseline and annealed entropy bonus.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamW, ForwardCtx, Graph, ParameterStore, Var};
use crate::policy::{
    action_entropy_graph, action_log_prob_graph, gumbel_top_k_set_log_prob_graph, read_output, sample_action,
    AnchorAction, BudgetSet, Policy,
};
use crate::reward::{reward, Environment, Quality, RewardBreakdown};
use crate::rng;
use crate::sampler::{feature_matrix, fps, CandidatePool};
use crate::scene::{Aabb, Frame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Sft,
    Rl,
    #[serde(rename = "sft+rl")]
    SftRl,
}

impl Stage {
    pub fn runs_sft(self) -> bool {
        matches!(self, Stage::Sft | Stage::SftRl)
    }

    pub fn runs_rl(self) -> bool {
        matches!(self, Stage::Rl | Stage::SftRl)
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::Rl => "rl",
            Stage::SftRl => "sft+rl",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Stage::Sft),
            "rl" => Ok(Stage::Rl),
            "sft+rl" => Ok(Stage::SftRl),
            other => Err(Error::arg(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip: f64,
    pub sft_epochs: usize,
    pub rl_steps: usize,
    pub ema_momentum: f64,
    pub entropy_weight: f64,
    /// Entropy weight at the last bandit step as a fraction of the initial one.
    pub entropy_final_fraction: f64,
    pub seed: u64,
    pub stage: Stage,
    /// Keep dropout active while sampling bandit actions.
    pub dropout_in_sampling: bool,
    pub pool_cap: usize,
    pub initial_voxel: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            clip: 1.0,
            sft_epochs: 1,
            rl_steps: 5000,
            ema_momentum: 0.9,
            entropy_weight: 0.01,
            entropy_final_fraction: 0.1,
            seed: 2026,
            stage: Stage::SftRl,
            dropout_in_sampling: true,
            pool_cap: crate::sampler::DEFAULT_CAP,
            initial_voxel: 0.01,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: String| Err(Error::Validation { field, reason });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} must be > 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad("ema_momentum", format!("{} outside [0,1)", self.ema_momentum));
        }
        if !(self.entropy_weight >= 0.0 && self.entropy_weight.is_finite()) {
            return bad("entropy_weight", format!("{} must be >= 0", self.entropy_weight));
        }
        if !(0.0..=1.0).contains(&self.entropy_final_fraction) {
            return bad("entropy_final_fraction", format!("{} outside [0,1]", self.entropy_final_fraction));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("{} must be >= 0", self.weight_decay));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(field, format!("{b} outside [0,1)"));
            }
        }
        if !(self.clip > 0.0) {
            return bad("clip", format!("{} must be > 0", self.clip));
        }
        if self.pool_cap == 0 {
            return bad("pool_cap", "must be >= 1".into());
        }
        if !(self.initial_voxel > 0.0) {
            return bad("initial_voxel", format!("{} must be > 0", self.initial_voxel));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            clip: Some(self.clip),
        }
    }

    /// Linearly annealed entropy weight for bandit step `step`.
    pub fn entropy_at(&self, step: usize) -> f64 {
        let span = self.rl_steps.saturating_sub(1).max(1) as f64;
        let t = (step as f64 / span).min(1.0);
        self.entropy_weight * (1.0 - (1.0 - self.entropy_final_fraction) * t)
    }
}

/// One frame prepared for the policy: capped pool and descriptors.
#[derive(Clone, Debug)]
pub struct FrameContext {
    pub scene: usize,
    /// Position of the frame in the concatenated frame list.
    pub global: usize,
    pub frame: Frame,
    pub pool: CandidatePool,
    pub features: Vec<f64>,
}

impl FrameContext {
    pub fn build(scene: usize, global: usize, frame: &Frame, bbox: Aabb, cap: usize, initial_voxel: f64) -> Result<Self> {
        let pool = CandidatePool::build(frame, bbox, cap, initial_voxel)?;
        let features = if pool.is_empty() { Vec::new() } else { feature_matrix(&pool)? };
        Ok(FrameContext {
            scene,
            global,
            frame: frame.clone(),
            pool,
            features,
        })
    }
}

/// Builds contexts for every frame of every scene, in scene-major order.
pub fn frame_contexts(scenes: &[Vec<Frame>], bbox: Aabb, cap: usize, initial_voxel: f64) -> Result<Vec<FrameContext>> {
    let mut out = Vec::new();
    for (s, frames) in scenes.iter().enumerate() {
        for f in frames {
            let g = out.len();
            out.push(FrameContext::build(s, g, f, bbox, cap, initial_voxel)?);
        }
    }
    Ok(out)
}

/// FPS-teacher overlap labels and the nearest-budget class.
pub fn sft_labels(pool: &CandidatePool, teacher_budget: usize, budgets: &BudgetSet) -> Result<(Vec<f64>, usize)> {
    let k = teacher_budget.min(pool.len());
    let teacher = fps(&pool.local_centers(), k)?;
    let mut labels = vec![0.0; pool.len()];
    for t in teacher {
        labels[t] = 1.0;
    }
    Ok((labels, budgets.nearest_index(teacher_budget)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SftLoss {
    pub bce: f64,
    pub ce: f64,
}

impl SftLoss {
    pub fn total(&self) -> f64 {
        self.bce + self.ce
    }
}

/// One supervised step: mean BCE on selection logits plus budget CE.
pub fn sft_step(
    policy: &mut Policy,
    opt: &AdamW,
    features: &[f64],
    labels: &[f64],
    budget_label: usize,
    ctx: &mut ForwardCtx,
) -> Result<SftLoss> {
    let mut g = Graph::new();
    let vars = policy.forward_graph(&policy.store, &mut g, features, ctx)?;
    let bce = g.bce_with_logits_mean(vars.select_logits, labels.to_vec())?;
    let ce = g.cross_entropy(vars.budget_logits, budget_label)?;
    let loss = g.add(bce, ce)?;
    let out = SftLoss {
        bce: g.value(bce).item(),
        ce: g.value(ce).item(),
    };
    apply_gradients(&mut policy.store, &g, loss, opt)?;
    Ok(out)
}

fn apply_gradients(store: &mut ParameterStore, g: &Graph, loss: Var, opt: &AdamW) -> Result<f64> {
    let grads = g.backward(loss)?;
    store.zero_grad();
    g.accumulate_param_grads(&grads, store);
    Ok(store.adamw_step(opt))
}

/// The policy-gradient surrogate value for given scalars.
pub fn pg_loss(advantage: f64, log_prob: f64, entropy: f64, beta: f64) -> f64 {
    -advantage * log_prob - beta * entropy
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub frame: usize,
    pub kappa: usize,
    pub budget_index: usize,
    pub subset_len: usize,
    pub clamped: bool,
    pub log_prob: f64,
    pub entropy: f64,
    pub breakdown: RewardBreakdown,
    pub ema_baseline: f64,
}

pub const TRACE_HEADER: &str =
    "step,frame,kappa,log_prob,entropy,psnr_rl,psnr_tgt,t_rl,t_ref,term_budget,term_time,term_violation,term_gain,reward,ema_baseline";

impl TraceRecord {
    pub fn csv_row(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.frame,
            self.kappa,
            self.log_prob,
            self.entropy,
            b.psi_rl,
            b.psi_tgt,
            b.t_rl,
            b.t_ref,
            b.term_budget,
            b.term_time,
            b.term_violation,
            b.term_gain,
            b.total,
            self.ema_baseline
        )
    }
}

/// Parsed trace row (the CSV subset of [`TraceRecord`]).
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub frame: usize,
    pub kappa: usize,
    pub log_prob: f64,
    pub entropy: f64,
    pub psnr_rl: f64,
    pub psnr_tgt: f64,
    pub t_rl: f64,
    pub t_ref: f64,
    pub term_budget: f64,
    pub term_time: f64,
    pub term_violation: f64,
    pub term_gain: f64,
    pub reward: f64,
    pub ema_baseline: f64,
}

impl From<&TraceRecord> for TraceRow {
    fn from(r: &TraceRecord) -> Self {
        let b = &r.breakdown;
        TraceRow {
            step: r.step,
            frame: r.frame,
            kappa: r.kappa,
            log_prob: r.log_prob,
            entropy: r.entropy,
            psnr_rl: b.psi_rl,
            psnr_tgt: b.psi_tgt,
            t_rl: b.t_rl,
            t_ref: b.t_ref,
            term_budget: b.term_budget,
            term_time: b.term_time,
            term_violation: b.term_violation,
            term_gain: b.term_gain,
            reward: b.total,
            ema_baseline: r.ema_baseline,
        }
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::Parse {
            line: 1,
            reason: "unexpected trace header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let ln = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 15 {
            return Err(Error::Parse {
                line: ln,
                reason: format!("expected 15 fields, found {}", f.len()),
            });
        }
        let u = |k: usize| -> Result<usize> {
            f[k].parse().map_err(|_| Error::Parse {
                line: ln,
                reason: format!("bad integer `{}`", f[k]),
            })
        };
        let x = |k: usize| -> Result<f64> {
            f[k].parse().map_err(|_| Error::Parse {
                line: ln,
                reason: format!("bad number `{}`", f[k]),
            })
        };
        rows.push(TraceRow {
            step: u(0)?,
            frame: u(1)?,
            kappa: u(2)?,
            log_prob: x(3)?,
            entropy: x(4)?,
            psnr_rl: x(5)?,
            psnr_tgt: x(6)?,
            t_rl: x(7)?,
            t_ref: x(8)?,
            term_budget: x(9)?,
            term_time: x(10)?,
            term_violation: x(11)?,
            term_gain: x(12)?,
            reward: x(13)?,
            ema_baseline: x(14)?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BanditState {
    pub ema_baseline: f64,
    pub step: usize,
    pub trace: Vec<TraceRecord>,
    pub warnings: Vec<String>,
}

impl BanditState {
    pub fn trace_csv(&self) -> String {
        let mut out = String::with_capacity(160 * (self.trace.len() + 1));
        let _ = writeln!(out, "{TRACE_HEADER}");
        for r in &self.trace {
            let _ = writeln!(out, "{}", r.csv_row());
        }
        out
    }

    pub fn write_trace(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.trace_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Sample, score, update, then move the baseline. Frames whose pool cannot
/// host the smallest budget are skipped with a warning and do not count as
/// a step.
pub fn bandit_step(
    policy: &mut Policy,
    opt: &AdamW,
    cfg: &TrainerConfig,
    env: &Environment,
    fc: &FrameContext,
    state: &mut BanditState,
) -> Result<Option<AnchorAction>> {
    let budgets = policy.budgets().clone();
    if fc.pool.len() < budgets.min() {
        state.warnings.push(format!(
            "skipped frame {} of scene {}: pool of {} below smallest budget {}",
            fc.frame.index,
            fc.scene,
            fc.pool.len(),
            budgets.min()
        ));
        return Ok(None);
    }
    let step = state.step;
    let started = Instant::now();
    let mut ctx = if cfg.dropout_in_sampling {
        ForwardCtx::train(policy.config.dropout, cfg.seed, policy.store.step())
    } else {
        ForwardCtx::eval()
    };
    let mut g = Graph::new();
    let vars = policy.forward_graph(&policy.store, &mut g, &fc.features, &mut ctx)?;
    let out = read_output(&g, vars);
    let mut action_rng = rng::stream(cfg.seed, &[rng::tag::ACTION, step as u64]);
    let (action, log_prob) = sample_action(&out, &fc.pool, &budgets, &mut action_rng)?;
    let img = env.render_subset(&fc.pool, &action.local);
    let measured = started.elapsed().as_secs_f64();
    let psi_rl = crate::reward::psnr(&img, &env.target(fc.scene, &fc.frame))?;
    let refs = env.reference_quality(fc.scene, &fc.frame, &fc.pool)?;
    let q = Quality {
        psi_rl,
        psi_ref: refs.psi_ref,
        psi_tea: refs.psi_tea,
        t_rl: env.runtime(action.kappa, measured),
        t_ref: refs.t_ref,
    };
    let breakdown = reward(action.kappa, &q, &env.cfg)?;

    let advantage = breakdown.total - state.ema_baseline;
    let beta = cfg.entropy_at(step);
    let lp = action_log_prob_graph(&mut g, vars, &action)?;
    let ent = action_entropy_graph(&mut g, vars)?;
    let entropy = g.value(ent).item();
    let a = g.scale(lp, -advantage)?;
    let b = g.scale(ent, -beta)?;
    let loss = g.add(a, b)?;
    apply_gradients(&mut policy.store, &g, loss, opt)?;

    let mu = cfg.ema_momentum;
    state.ema_baseline = mu * state.ema_baseline + (1.0 - mu) * breakdown.total;
    state.trace.push(TraceRecord {
        step,
        frame: fc.global,
        kappa: action.kappa,
        budget_index: action.budget_index,
        subset_len: action.local.len(),
        clamped: action.clamped,
        log_prob,
        entropy,
        breakdown,
        ema_baseline: state.ema_baseline,
    });
    state.step += 1;
    Ok(Some(action))
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub state: BanditState,
    pub sft_losses: Vec<SftLoss>,
    /// Snapshot taken right after the imitation stage, when it ran.
    pub sft_policy: Option<Policy>,
}

/// Seeded permutation of `0..n` for epoch `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &[rng::tag::SHUFFLE, epoch as u64]);
    rng::shuffle(&mut r, &mut order);
    order
}

/// Runs the configured stages over `contexts`. `policy` is consumed and
/// returned trained.
pub fn train(mut policy: Policy, cfg: &TrainerConfig, env: &Environment, contexts: &[FrameContext]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if contexts.is_empty() {
        return Err(Error::arg("no training frames"));
    }
    if env.cfg.kappa_max != policy.budgets().max() {
        return Err(Error::Validation {
            field: "kappa_max",
            reason: format!("{} differs from max budget {}", env.cfg.kappa_max, policy.budgets().max()),
        });
    }
    let opt = cfg.optimizer();
    let budgets = policy.budgets().clone();
    let mut sft_losses = Vec::new();
    let mut sft_policy = None;
    let mut epoch = 0;
    if cfg.stage.runs_sft() {
        for _ in 0..cfg.sft_epochs {
            for &i in &epoch_order(cfg.seed, epoch, contexts.len()) {
                let fc = &contexts[i];
                if fc.pool.is_empty() {
                    continue;
                }
                let (labels, budget_label) = sft_labels(&fc.pool, env.cfg.teacher_budget, &budgets)?;
                let mut ctx = ForwardCtx::train(policy.config.dropout, cfg.seed, policy.store.step());
                sft_losses.push(sft_step(&mut policy, &opt, &fc.features, &labels, budget_label, &mut ctx)?);
            }
            epoch += 1;
        }
        sft_policy = Some(policy.clone());
    }
    let mut state = BanditState::default();
    if cfg.stage.runs_rl() {
        let mut order = Vec::new();
        let mut cursor = 0;
        let mut attempts = 0;
        while state.step < cfg.rl_steps {
            if cursor == order.len() {
                order = epoch_order(cfg.seed, epoch, contexts.len());
                epoch += 1;
                cursor = 0;
            }
            let fc = &contexts[order[cursor]];
            cursor += 1;
            attempts += 1;
            bandit_step(&mut policy, &opt, cfg, env, fc, &mut state)?;
            if attempts >= contexts.len() && state.step == 0 {
                return Err(Error::InfeasiblePool {
                    size: contexts.iter().map(|c| c.pool.len()).max().unwrap_or(0),
                    min_budget: budgets.min(),
                });
            }
        }
    }
    Ok(TrainOutcome {
        policy,
        state,
        sft_losses,
        sft_policy,
    })
}

// ---------------------------------------------------------------------------
// Score-function estimator check on enumerable action spaces.

/// All actions of a small instance: `(budget index, sorted local subset)`.
pub fn enumerate_actions(budgets: &BudgetSet, pool_len: usize) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::new();
    for (bi, &b) in budgets.as_slice().iter().enumerate() {
        let k = b.min(pool_len);
        for mask in 0u32..(1 << pool_len) {
            if mask.count_ones() as usize == k {
                out.push((bi, (0..pool_len).filter(|&i| mask & (1 << i) != 0).collect()));
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct EstimatorReport {
    pub actions: usize,
    /// Exact gradient of the expected reward.
    pub exact: Vec<f64>,
    /// Enumerated expectation of the score-function estimate.
    pub estimator: Vec<f64>,
    pub max_rel_err: f64,
    /// Largest elementwise relative gap between the exact gradient and the
    /// expectation formed with the Bernoulli-sum log-density used in training.
    pub surrogate_rel_gap: f64,
}

/// Elementwise relative error, with entries below `floor` treated as zero.
fn max_rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.abs().max(y.abs());
            if d <= floor {
                0.0
            } else {
                (x - y).abs() / d
            }
        })
        .fold(0.0, f64::max)
}

fn flat_grads(store: &ParameterStore) -> Vec<f64> {
    store.iter().flat_map(|p| p.grad.iter().copied()).collect()
}

/// Compares the exact gradient of `E[rho]` under the sampler's exact action
/// distribution with the enumerated expectation of `rho * grad log pi`
/// (baseline 0, no entropy). `rewards[i]` pairs with
/// `enumerate_actions(budgets, pool.len())[i]`.
pub fn estimator_check(policy: &Policy, features: &[f64], rewards: &[f64]) -> Result<EstimatorReport> {
    let budgets = policy.budgets().clone();
    let m = features.len() / crate::sampler::FEATURE_DIM;
    if m > 3 || budgets.len() > 2 {
        return Err(Error::arg("estimator check needs at most 3 candidates and 2 budgets"));
    }
    if m < budgets.min() {
        return Err(Error::InfeasiblePool {
            size: m,
            min_budget: budgets.min(),
        });
    }
    let actions = enumerate_actions(&budgets, m);
    if rewards.len() != actions.len() {
        return Err(Error::arg(format!("{} rewards for {} actions", rewards.len(), actions.len())));
    }
    let mut store = policy.store.clone();

    let exact_logp = |g: &mut Graph, vars: crate::policy::PolicyVars, bi: usize, set: &[usize]| -> Result<Var> {
        let b = g.log_softmax_pick(vars.budget_logits, bi)?;
        let s = gumbel_top_k_set_log_prob_graph(g, vars.select_logits, set)?;
        g.add(b, s)
    };

    // Exact: differentiate sum_a rho_a * pi(a).
    let mut g = Graph::new();
    let vars = policy.forward_graph(&store, &mut g, features, &mut ForwardCtx::eval())?;
    let mut total: Option<Var> = None;
    let mut probs = Vec::with_capacity(actions.len());
    for ((bi, set), &rho) in actions.iter().zip(rewards) {
        let lp = exact_logp(&mut g, vars, *bi, set)?;
        let p = g.exp(lp)?;
        probs.push(g.value(p).item());
        let term = g.scale(p, rho)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let grads = g.backward(total.expect("at least one action"))?;
    store.zero_grad();
    g.accumulate_param_grads(&grads, &mut store);
    let exact = flat_grads(&store);

    // Estimator: sum_a pi(a) * (-grad L_pg(a)) with L_pg = -rho * log pi(a).
    let expectation = |store: &mut ParameterStore, surrogate: bool| -> Result<Vec<f64>> {
        store.zero_grad();
        for (((bi, set), &rho), &p) in actions.iter().zip(rewards).zip(&probs) {
            let mut g = Graph::new();
            let vars = policy.forward_graph(store, &mut g, features, &mut ForwardCtx::eval())?;
            let lp = if surrogate {
                let action = AnchorAction {
                    budget_index: *bi,
                    kappa: set.len(),
                    local: set.clone(),
                    subset: set.clone(),
                    clamped: false,
                };
                action_log_prob_graph(&mut g, vars, &action)?
            } else {
                exact_logp(&mut g, vars, *bi, set)?
            };
            let loss = g.scale(lp, -rho)?;
            let neg = g.scale(loss, -p)?;
            let grads = g.backward(neg)?;
            g.accumulate_param_grads(&grads, store);
        }
        Ok(flat_grads(store))
    };
    let estimator = expectation(&mut store, false)?;
    let surrogate = expectation(&mut store, true)?;

    let scale = exact.iter().chain(&estimator).fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = 1e-9 * scale;
    Ok(EstimatorReport {
        actions: actions.len(),
        max_rel_err: max_rel(&exact, &estimator, floor),
        surrogate_rel_gap: max_rel(&exact, &surrogate, floor),
        exact,
        estimator,
    })
}
