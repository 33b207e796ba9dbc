//! Evaluation protocols: fast-mode evaluation against FPS and random
//! baselines, same-budget comparison, budget frontier, training-variant
//! ablation and report files.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::policy::{infer_action, BudgetSet, Policy};
use crate::reward::{dssim, psnr, Environment};
use crate::rng;
use crate::sampler::{feature_matrix, fps, CandidatePool};
use crate::scene::{Aabb, Frame};
use crate::trainer::{Stage, TraceRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fps,
    Rl,
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fps => "fps",
            Method::Rl => "rl",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fps" => Ok(Method::Fps),
            "rl" => Ok(Method::Rl),
            "random" => Ok(Method::Random),
            other => Err(Error::arg(format!("unknown method `{other}`"))),
        }
    }
}

/// Metrics of one method at one budget on one frame.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameRecord {
    pub scene: usize,
    pub frame: usize,
    pub method: Method,
    pub kappa: usize,
    pub psnr: f64,
    pub dssim: f64,
    /// Seconds, from the environment's runtime source.
    pub t_frame: f64,
    /// Wall-clock sampler latency; zero under the runtime model so reports
    /// stay byte-reproducible.
    pub sampler_ms: f64,
}

pub const RECORDS_HEADER: &str = "scene,frame,method,kappa,psnr,dssim,t_frame,sampler_ms";

impl FrameRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.scene, self.frame, self.method, self.kappa, self.psnr, self.dssim, self.t_frame, self.sampler_ms
        )
    }
}

pub fn records_csv(records: &[FrameRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{RECORDS_HEADER}");
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

pub fn parse_records(text: &str) -> Result<Vec<FrameRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RECORDS_HEADER => {}
        _ => return Err(Error::Format("records header missing".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let bad = |reason: String| Error::Parse { line: line_no, reason };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(format!("expected 8 fields, got {}", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("`{s}`: {e}")));
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        out.push(FrameRecord {
            scene: int(f[0])?,
            frame: int(f[1])?,
            method: f[2].parse().map_err(|e: Error| bad(e.to_string()))?,
            kappa: int(f[3])?,
            psnr: num(f[4])?,
            dssim: num(f[5])?,
            t_frame: num(f[6])?,
            sampler_ms: num(f[7])?,
        });
    }
    Ok(out)
}

/// Pool construction parameters and seed for evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub bbox: Aabb,
    pub pool_cap: usize,
    pub initial_voxel: f64,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            bbox: Aabb::default(),
            pool_cap: crate::sampler::DEFAULT_CAP,
            initial_voxel: 0.01,
            seed: 2026,
        }
    }
}

fn random_subset(seed: u64, scene: usize, frame: usize, n: usize, k: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, &[rng::tag::RANDOM_BASELINE, scene as u64, frame as u64, k as u64]);
    let mut idx: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut r, &mut idx);
    let mut out = idx[..k.min(n)].to_vec();
    out.sort_unstable();
    out
}

/// Evaluates the frozen policy and both baselines at every budget in
/// `budgets` on every frame. Budgets must belong to the policy's set.
/// Records are sorted by `(scene, frame, budget, method)`.
pub fn eval_fast(
    policy: &Policy,
    env: &Environment,
    scenes: &[Vec<Frame>],
    budgets: &[usize],
    settings: &EvalSettings,
) -> Result<Vec<FrameRecord>> {
    let set = policy.budgets();
    for &b in budgets {
        if set.index_of(b).is_none() {
            return Err(Error::arg(format!("budget {b} not in {:?}", set.as_slice())));
        }
    }
    let mut sorted = budgets.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let measured = env.cfg.runtime_source == crate::reward::RuntimeSource::Measured;
    let mut records = Vec::new();
    for (s, frames) in scenes.iter().enumerate() {
        for frame in frames {
            let t0 = Instant::now();
            let pool = CandidatePool::build(frame, settings.bbox, settings.pool_cap, settings.initial_voxel)?;
            if pool.len() < set.min() {
                return Err(Error::InfeasiblePool {
                    size: pool.len(),
                    min_budget: set.min(),
                });
            }
            let pool_secs = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let out = policy.forward(&feature_matrix(&pool)?)?;
            let policy_secs = t1.elapsed().as_secs_f64();
            let target = env.target(s, frame);
            let centers = pool.local_centers();
            for &b in &sorted {
                let mut push = |method: Method, local: Vec<usize>, secs: f64| -> Result<()> {
                    let t2 = Instant::now();
                    let img = env.render_subset(&pool, &local);
                    let total = secs + t2.elapsed().as_secs_f64();
                    records.push(FrameRecord {
                        scene: s,
                        frame: frame.index,
                        method,
                        kappa: b,
                        psnr: psnr(&img, &target)?,
                        dssim: dssim(&img, &target)?,
                        t_frame: env.runtime(local.len(), total),
                        sampler_ms: if measured { 1e3 * secs } else { 0.0 },
                    });
                    Ok(())
                };
                let t = Instant::now();
                let local = fps(&centers, b.min(pool.len()))?;
                push(Method::Fps, local, pool_secs + t.elapsed().as_secs_f64())?;
                let t = Instant::now();
                let action = infer_action(&out, &pool, set, Some(b))?;
                push(Method::Rl, action.local, pool_secs + policy_secs + t.elapsed().as_secs_f64())?;
                let t = Instant::now();
                let local = random_subset(settings.seed, s, frame.index, pool.len(), b);
                push(Method::Random, local, pool_secs + t.elapsed().as_secs_f64())?;
            }
        }
    }
    records.sort_by(|a, b| (a.scene, a.frame, a.kappa, a.method).cmp(&(b.scene, b.frame, b.kappa, b.method)));
    Ok(records)
}

type Key = (usize, usize, usize);

fn index_method(records: &[FrameRecord], method: Method) -> BTreeMap<Key, &FrameRecord> {
    records
        .iter()
        .filter(|r| r.method == method)
        .map(|r| ((r.scene, r.frame, r.kappa), r))
        .collect()
}

/// RL against FPS at one budget.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetComparison {
    pub budget: usize,
    pub pairs: usize,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub mean_delta_psnr: f64,
    /// Mean FPS time over mean RL time.
    pub runtime_ratio: f64,
}

impl BudgetComparison {
    pub fn win_rate(&self) -> f64 {
        self.wins as f64 / self.pairs as f64
    }
}

pub const SAME_BUDGET_HEADER: &str = "budget,pairs,wins,ties,losses,mean_delta_psnr,runtime_ratio";

/// Pairs RL and FPS records by `(scene, frame, budget)`; every RL record
/// needs an FPS partner and vice versa.
pub fn compare_same_budget(records: &[FrameRecord]) -> Result<Vec<BudgetComparison>> {
    let rl = index_method(records, Method::Rl);
    let fp = index_method(records, Method::Fps);
    for key in rl.keys().filter(|k| !fp.contains_key(*k)).chain(fp.keys().filter(|k| !rl.contains_key(*k))) {
        return Err(Error::Aggregation(format!("scene {} frame {} budget {}", key.0, key.1, key.2)));
    }
    let mut by_budget: BTreeMap<usize, Vec<(&FrameRecord, &FrameRecord)>> = BTreeMap::new();
    for (key, r) in &rl {
        by_budget.entry(key.2).or_default().push((r, fp[key]));
    }
    Ok(by_budget
        .into_iter()
        .map(|(budget, pairs)| {
            let n = pairs.len();
            let wins = pairs.iter().filter(|(r, f)| r.psnr > f.psnr).count();
            let ties = pairs.iter().filter(|(r, f)| r.psnr == f.psnr).count();
            let delta = pairs.iter().map(|(r, f)| r.psnr - f.psnr).sum::<f64>() / n as f64;
            let t_rl = pairs.iter().map(|(r, _)| r.t_frame).sum::<f64>();
            let t_fps = pairs.iter().map(|(_, f)| f.t_frame).sum::<f64>();
            BudgetComparison {
                budget,
                pairs: n,
                wins,
                ties,
                losses: n - wins - ties,
                mean_delta_psnr: delta,
                runtime_ratio: t_fps / t_rl,
            }
        })
        .collect())
}

/// Quality and speed of the policy at one budget against FPS at the same
/// budget and against FPS at the largest budget.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrontierRow {
    pub budget: usize,
    pub delta_psnr_fps: f64,
    pub delta_psnr_igsref: f64,
    /// time(baseline) / time(ours).
    pub rt_vs_fps: f64,
    pub rt_vs_igsref: f64,
}

pub const FRONTIER_HEADER: &str = "budget,delta_psnr_fps,delta_psnr_igsref,rt_vs_fps,rt_vs_igsref";

/// Aggregates frontier rows from records holding RL and FPS at every
/// budget of `budgets`, including its maximum.
pub fn frontier_rows(records: &[FrameRecord], budgets: &BudgetSet) -> Result<Vec<FrontierRow>> {
    let rl = index_method(records, Method::Rl);
    let fp = index_method(records, Method::Fps);
    let top = budgets.max();
    let mut frames: Vec<(usize, usize)> = rl.keys().map(|k| (k.0, k.1)).collect();
    frames.dedup();
    if frames.is_empty() {
        return Err(Error::Aggregation("no rl records".into()));
    }
    let get = |m: &BTreeMap<Key, &FrameRecord>, key: Key| -> Result<FrameRecord> {
        m.get(&key)
            .map(|r| (*r).clone())
            .ok_or_else(|| Error::Aggregation(format!("scene {} frame {} budget {}", key.0, key.1, key.2)))
    };
    let mut rows = Vec::new();
    for &b in budgets.as_slice() {
        let (mut dp, mut dp_ref, mut t_ours, mut t_fps, mut t_ref) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(s, f) in &frames {
            let ours = get(&rl, (s, f, b))?;
            let same = get(&fp, (s, f, b))?;
            let reference = get(&fp, (s, f, top))?;
            dp += ours.psnr - same.psnr;
            dp_ref += ours.psnr - reference.psnr;
            t_ours += ours.t_frame;
            t_fps += same.t_frame;
            t_ref += reference.t_frame;
        }
        let n = frames.len() as f64;
        rows.push(FrontierRow {
            budget: b,
            delta_psnr_fps: dp / n,
            delta_psnr_igsref: dp_ref / n,
            rt_vs_fps: t_fps / t_ours,
            rt_vs_igsref: t_ref / t_ours,
        });
    }
    Ok(rows)
}

/// Evaluates at every budget of the policy's set and builds the frontier.
pub fn frontier_sweep(
    policy: &Policy,
    env: &Environment,
    scenes: &[Vec<Frame>],
    settings: &EvalSettings,
) -> Result<(Vec<FrameRecord>, Vec<FrontierRow>)> {
    let budgets = policy.budgets().clone();
    let records = eval_fast(policy, env, scenes, budgets.as_slice(), settings)?;
    let rows = frontier_rows(&records, &budgets)?;
    Ok((records, rows))
}

/// Tail-window statistics of one training variant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantRow {
    pub variant: String,
    /// False for variants without bandit steps; only `tail_kappa` is then
    /// meaningful and holds the effective budget.
    pub applicable: bool,
    pub steps_used: usize,
    pub tail_kappa: f64,
    pub tail_delta_psnr: f64,
    /// Mean `t_ref / t_rl`.
    pub tail_speed_ratio: f64,
    pub tail_reward: f64,
    pub warning: Option<String>,
}

pub const ABLATION_HEADER: &str = "variant,applicable,steps_used,tail_kappa,tail_delta_psnr,tail_speed_ratio,tail_reward";

pub const TAIL_WINDOW: usize = 60;

/// One trained variant: its stage, bandit trace and, for variants without
/// bandit steps, the budget the policy would pick.
#[derive(Clone, Debug)]
pub struct VariantInput<'a> {
    pub stage: Stage,
    pub trace: &'a [TraceRecord],
    pub effective_budget: f64,
}

pub fn tail_stats(stage: Stage, trace: &[TraceRecord], window: usize, effective_budget: f64) -> VariantRow {
    if trace.is_empty() {
        return VariantRow {
            variant: stage.name().into(),
            applicable: false,
            steps_used: 0,
            tail_kappa: effective_budget,
            tail_delta_psnr: f64::NAN,
            tail_speed_ratio: f64::NAN,
            tail_reward: f64::NAN,
            warning: None,
        };
    }
    let warning = (trace.len() < window)
        .then(|| format!("{}: trace has {} steps, below window {window}; using all", stage.name(), trace.len()));
    let tail = &trace[trace.len().saturating_sub(window)..];
    let n = tail.len() as f64;
    let mean = |f: &dyn Fn(&TraceRecord) -> f64| tail.iter().map(f).sum::<f64>() / n;
    VariantRow {
        variant: stage.name().into(),
        applicable: true,
        steps_used: tail.len(),
        tail_kappa: mean(&|r| r.kappa as f64),
        tail_delta_psnr: mean(&|r| r.breakdown.psi_rl - r.breakdown.psi_tgt),
        tail_speed_ratio: mean(&|r| r.breakdown.t_ref / r.breakdown.t_rl),
        tail_reward: mean(&|r| r.breakdown.total),
        warning,
    }
}

pub fn ablate_variants(inputs: &[VariantInput<'_>], window: usize) -> Vec<VariantRow> {
    inputs
        .iter()
        .map(|v| tail_stats(v.stage, v.trace, window, v.effective_budget))
        .collect()
}

/// Mean over frames of the budget the policy picks without forcing.
pub fn effective_budget(policy: &Policy, features: &[&[f64]]) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::arg("no frames"));
    }
    let mut total = 0.0;
    for f in features {
        let out = policy.forward(f)?;
        total += policy.budgets().get(crate::policy::top_k(&out.budget_logits, 1)[0]) as f64;
    }
    Ok(total / features.len() as f64)
}

/// Everything a report may contain; absent parts produce no files.
#[derive(Clone, Debug, Default)]
pub struct Report<'a> {
    pub records: &'a [FrameRecord],
    pub same_budget: &'a [BudgetComparison],
    pub frontier: &'a [FrontierRow],
    pub variants: &'a [VariantRow],
    pub trace: &'a [TraceRecord],
}

#[derive(Serialize)]
struct Summary<'a> {
    records: usize,
    trace_steps: usize,
    same_budget: &'a [BudgetComparison],
    frontier: &'a [FrontierRow],
    variants: &'a [VariantRow],
}

fn csv<T>(header: &str, rows: &[T], row: impl Fn(&T) -> String) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{header}");
    for r in rows {
        let _ = writeln!(out, "{}", row(r));
    }
    out
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes `records.csv`, `same_budget.csv`, `frontier.csv`, `ablation.csv`,
/// `curve_kappa.csv`, `curve_reward.csv` and `curve_delta_psnr.csv` for the
/// parts present, plus `summary.json` always. Returns the file names.
pub fn emit_report(report: &Report<'_>, dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut emit = |name: &str, text: String| -> Result<()> {
        write(dir, name, &text)?;
        files.push(name.to_string());
        Ok(())
    };
    if !report.records.is_empty() {
        emit("records.csv", records_csv(report.records))?;
    }
    if !report.same_budget.is_empty() {
        emit(
            "same_budget.csv",
            csv(SAME_BUDGET_HEADER, report.same_budget, |c| {
                format!(
                    "{},{},{},{},{},{},{}",
                    c.budget, c.pairs, c.wins, c.ties, c.losses, c.mean_delta_psnr, c.runtime_ratio
                )
            }),
        )?;
    }
    if !report.frontier.is_empty() {
        emit(
            "frontier.csv",
            csv(FRONTIER_HEADER, report.frontier, |r| {
                format!(
                    "{},{},{},{},{}",
                    r.budget, r.delta_psnr_fps, r.delta_psnr_igsref, r.rt_vs_fps, r.rt_vs_igsref
                )
            }),
        )?;
    }
    if !report.variants.is_empty() {
        emit(
            "ablation.csv",
            csv(ABLATION_HEADER, report.variants, |v| {
                format!(
                    "{},{},{},{},{},{},{}",
                    v.variant, v.applicable, v.steps_used, v.tail_kappa, v.tail_delta_psnr, v.tail_speed_ratio, v.tail_reward
                )
            }),
        )?;
    }
    if !report.trace.is_empty() {
        emit(
            "curve_kappa.csv",
            csv("step,kappa", report.trace, |r| format!("{},{}", r.step, r.kappa)),
        )?;
        emit(
            "curve_reward.csv",
            csv("step,reward", report.trace, |r| format!("{},{}", r.step, r.breakdown.total)),
        )?;
        emit(
            "curve_delta_psnr.csv",
            csv("step,delta_psnr", report.trace, |r| {
                format!("{},{}", r.step, r.breakdown.psi_rl - r.breakdown.psi_tgt)
            }),
        )?;
    }
    let summary = Summary {
        records: report.records.len(),
        trace_steps: report.trace.len(),
        same_budget: report.same_budget,
        frontier: report.frontier,
        variants: report.variants,
    };
    // NaN is not valid JSON; serde_json writes it as null.
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    emit("summary.json", json + "\n")?;
    Ok(files)
}
