use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use egs_core::harness::{self, EvalSettings, Report, VariantInput, TAIL_WINDOW};
use egs_core::reward::{render, Camera, Environment, RuntimeSource};
use egs_core::scene::{self, Aabb, Frame, SceneSpec};
use egs_core::trainer::{frame_contexts, train, Stage};
use egs_core::{Policy, RunConfig};

#[derive(Parser)]
#[command(name = "egs", version, about = "Budget-aware anchor sampler: scene generation, training and evaluation")]
struct Cli {
    /// Seed for generation, training and baselines. Overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where step times come from. Overrides the config file.
    #[arg(long, global = true, value_parser = parse_source)]
    runtime_source: Option<RuntimeSource>,
    #[command(subcommand)]
    cmd: Command,
}

fn parse_source(s: &str) -> std::result::Result<RuntimeSource, String> {
    s.parse().map_err(|e: egs_core::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes from a scene spec file.
    GenScenes {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Imitation stage only.
    Sft(TrainArgs),
    /// Train with the stage named in the config.
    Train(TrainArgs),
    /// Fast-mode evaluation against FPS and random baselines.
    Eval(EvalArgs),
    /// Budget frontier over every budget of the checkpoint.
    Sweep(CkptArgs),
    /// Same-budget comparison, from a checkpoint or an existing records file.
    Compare {
        /// Recompute from a records.csv instead of evaluating.
        #[arg(long, conflicts_with_all = ["ckpt", "scenes", "budgets"])]
        records: Option<PathBuf>,
        #[arg(long, required_unless_present = "records")]
        ckpt: Option<PathBuf>,
        #[arg(long, required_unless_present = "records")]
        scenes: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required_unless_present = "records")]
        budgets: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the sft, rl and sft+rl variants and tabulate their tails.
    Ablate(TrainArgs),
    /// Render a subset of one frame to a PGM image.
    RenderDebug {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        frame: usize,
        /// Whitespace or comma separated primitive indices.
        #[arg(long)]
        subset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct CkptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Policy and reward settings; must match the checkpoint's architecture.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    budgets: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<egs_core::Error>().map_or("cli", |c| c.kind());
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {kind}: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli, path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.trainer.seed = seed;
    }
    if let Some(src) = cli.runtime_source {
        cfg.reward.runtime_source = src;
    }
    Ok(cfg)
}

fn read_scenes(dir: &Path) -> Result<Vec<Vec<Frame>>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| egs_core::Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "scene"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(egs_core::Error::Argument(format!("no .scene files in {}", dir.display())).into());
    }
    files.iter().map(|f| Ok(scene::read_scene(f)?)).collect()
}

fn settings(cfg: &RunConfig) -> EvalSettings {
    EvalSettings {
        bbox: Aabb::default(),
        pool_cap: cfg.trainer.pool_cap,
        initial_voxel: cfg.trainer.initial_voxel,
        seed: cfg.trainer.seed,
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Command::GenScenes { spec, out } => gen_scenes(&cli, spec, out),
        Command::Sft(a) => run_training(&cli, a, Some(Stage::Sft)),
        Command::Train(a) => run_training(&cli, a, None),
        Command::Eval(a) => {
            let (policy, env, cfg) = load_eval(&cli, &a.ckpt, a.config.as_deref())?;
            let scenes = read_scenes(&a.scenes)?;
            let records = harness::eval_fast(&policy, &env, &scenes, &a.budgets, &settings(&cfg))?;
            let same = harness::compare_same_budget(&records)?;
            let files = harness::emit_report(
                &Report {
                    records: &records,
                    same_budget: &same,
                    ..Report::default()
                },
                &a.out,
            )?;
            print_summary(&same);
            report_files(&a.out, &files);
            Ok(())
        }
        Command::Sweep(a) => {
            let (policy, env, cfg) = load_eval(&cli, &a.ckpt, a.config.as_deref())?;
            let scenes = read_scenes(&a.scenes)?;
            let (records, rows) = harness::frontier_sweep(&policy, &env, &scenes, &settings(&cfg))?;
            let files = harness::emit_report(
                &Report {
                    records: &records,
                    frontier: &rows,
                    ..Report::default()
                },
                &a.out,
            )?;
            for r in &rows {
                println!(
                    "budget {:>6}  dPSNR vs fps {:+.3}  vs ref {:+.3}  rt {:.3} / {:.3}",
                    r.budget, r.delta_psnr_fps, r.delta_psnr_igsref, r.rt_vs_fps, r.rt_vs_igsref
                );
            }
            report_files(&a.out, &files);
            Ok(())
        }
        Command::Compare {
            records,
            ckpt,
            scenes,
            budgets,
            out,
            config,
        } => {
            let records = match (records, ckpt, scenes) {
                (Some(path), _, _) => {
                    let text = fs::read_to_string(path).map_err(|e| egs_core::Error::io(path, e))?;
                    harness::parse_records(&text)?
                }
                (None, Some(ckpt), Some(scenes)) => {
                    let (policy, env, cfg) = load_eval(&cli, ckpt, config.as_deref())?;
                    let scenes = read_scenes(scenes)?;
                    harness::eval_fast(&policy, &env, &scenes, budgets, &settings(&cfg))?
                }
                _ => return Err(anyhow!("compare needs --records or --ckpt, --scenes and --budgets")),
            };
            let same = harness::compare_same_budget(&records)?;
            let files = harness::emit_report(
                &Report {
                    same_budget: &same,
                    ..Report::default()
                },
                out,
            )?;
            print_summary(&same);
            report_files(out, &files);
            Ok(())
        }
        Command::Ablate(a) => ablate(&cli, a),
        Command::RenderDebug {
            scene: path,
            frame,
            subset,
            out,
            config,
        } => {
            let cfg = load_config(&cli, config.as_deref())?;
            let frames = scene::read_scene(path)?;
            let f = frames
                .iter()
                .find(|f| f.index == *frame)
                .ok_or_else(|| anyhow!("frame {frame} not in {}", path.display()))?;
            let text = fs::read_to_string(subset).map_err(|e| egs_core::Error::io(subset, e))?;
            let mut prims = Vec::new();
            for tok in text.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
                let i: usize = tok.parse().with_context(|| format!("bad index `{tok}` in {}", subset.display()))?;
                prims.push(
                    f.primitives
                        .get(i)
                        .ok_or_else(|| anyhow!("index {i} outside frame of {} primitives", f.primitives.len()))?,
                );
            }
            let cam = Camera::new(Aabb::default(), cfg.reward.image_width, cfg.reward.image_height);
            render(prims.iter().copied(), &cam).write_pgm(out)?;
            println!("rendered {} primitives to {}", prims.len(), out.display());
            Ok(())
        }
    }
}

fn gen_scenes(cli: &Cli, spec: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec).map_err(|e| egs_core::Error::io(spec, e))?;
    let (base, count) = egs_core::config::parse_scene_batch(&text, cli.seed)?;
    fs::create_dir_all(out).map_err(|e| egs_core::Error::io(out, e))?;
    for i in 0..count {
        let spec = SceneSpec {
            seed: base.seed + i,
            ..base.clone()
        };
        let frames = scene::generate_scene(&spec)?;
        let path = out.join(format!("scene_{i:03}.scene"));
        scene::write_scene(&frames, &path)?;
        println!("wrote {} ({} frames, seed {})", path.display(), frames.len(), spec.seed);
    }
    Ok(())
}

fn run_training(cli: &Cli, a: &TrainArgs, stage: Option<Stage>) -> Result<()> {
    let mut cfg = load_config(cli, a.config.as_deref())?;
    if let Some(s) = stage {
        cfg.trainer.stage = s;
    }
    let scenes = read_scenes(&a.scenes)?;
    let contexts = frame_contexts(&scenes, Aabb::default(), cfg.trainer.pool_cap, cfg.trainer.initial_voxel)?;
    let env = Environment::new(cfg.reward.clone(), Aabb::default())?;
    let policy = Policy::new(cfg.policy.clone(), cfg.budgets.clone(), cfg.trainer.seed)?;
    let outcome = train(policy, &cfg.trainer, &env, &contexts)?;
    fs::create_dir_all(&a.out).map_err(|e| egs_core::Error::io(&a.out, e))?;
    outcome.policy.save(a.out.join("policy.ckpt"), cfg.trainer.seed, &cfg.hash())?;
    let cfg_path = a.out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| egs_core::Error::io(&cfg_path, e))?;
    let mut files = vec!["policy.ckpt".to_string(), "config.toml".to_string()];
    if !outcome.state.trace.is_empty() {
        outcome.state.write_trace(a.out.join("trace.csv"))?;
        files.push("trace.csv".into());
        files.extend(harness::emit_report(
            &Report {
                trace: &outcome.state.trace,
                ..Report::default()
            },
            &a.out,
        )?);
    }
    for w in &outcome.state.warnings {
        eprintln!("warning: {w}");
    }
    if let (Some(first), Some(last)) = (outcome.sft_losses.first(), outcome.sft_losses.last()) {
        println!(
            "sft: {} steps, loss {:.4} -> {:.4}",
            outcome.sft_losses.len(),
            first.total(),
            last.total()
        );
    }
    if let Some(row) = (!outcome.state.trace.is_empty())
        .then(|| harness::tail_stats(cfg.trainer.stage, &outcome.state.trace, TAIL_WINDOW, f64::NAN))
    {
        println!(
            "rl: {} steps, tail kappa {:.1}, tail reward {:.4}",
            outcome.state.step, row.tail_kappa, row.tail_reward
        );
    }
    report_files(&a.out, &files);
    Ok(())
}

fn ablate(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = load_config(cli, a.config.as_deref())?;
    let scenes = read_scenes(&a.scenes)?;
    let contexts = frame_contexts(&scenes, Aabb::default(), cfg.trainer.pool_cap, cfg.trainer.initial_voxel)?;
    let features: Vec<&[f64]> = contexts
        .iter()
        .filter(|c| !c.features.is_empty())
        .map(|c| c.features.as_slice())
        .collect();
    let mut outcomes = Vec::new();
    for stage in [Stage::Sft, Stage::Rl, Stage::SftRl] {
        let mut tcfg = cfg.trainer.clone();
        tcfg.stage = stage;
        let env = Environment::new(cfg.reward.clone(), Aabb::default())?;
        let policy = Policy::new(cfg.policy.clone(), cfg.budgets.clone(), tcfg.seed)?;
        let outcome = train(policy, &tcfg, &env, &contexts)?;
        let effective = harness::effective_budget(&outcome.policy, &features)?;
        outcomes.push((stage, outcome, effective));
    }
    let inputs: Vec<VariantInput> = outcomes
        .iter()
        .map(|(stage, o, eff)| VariantInput {
            stage: *stage,
            trace: &o.state.trace,
            effective_budget: *eff,
        })
        .collect();
    let rows = harness::ablate_variants(&inputs, TAIL_WINDOW);
    fs::create_dir_all(&a.out).map_err(|e| egs_core::Error::io(&a.out, e))?;
    for (stage, o, _) in &outcomes {
        if !o.state.trace.is_empty() {
            o.state.write_trace(a.out.join(format!("trace_{}.csv", stage.name().replace('+', "_"))))?;
        }
    }
    let files = harness::emit_report(
        &Report {
            variants: &rows,
            ..Report::default()
        },
        &a.out,
    )?;
    for r in &rows {
        if let Some(w) = &r.warning {
            eprintln!("warning: {w}");
        }
        if r.applicable {
            println!(
                "{:<7} tail kappa {:>8.1}  dPSNR {:+.3}  speed {:.3}  reward {:.4}",
                r.variant, r.tail_kappa, r.tail_delta_psnr, r.tail_speed_ratio, r.tail_reward
            );
        } else {
            println!("{:<7} no bandit steps; effective kappa {:.1}", r.variant, r.tail_kappa);
        }
    }
    report_files(&a.out, &files);
    Ok(())
}

fn load_eval(cli: &Cli, ckpt: &Path, config: Option<&Path>) -> Result<(Policy, Environment, RunConfig)> {
    let mut cfg = load_config(cli, config)?;
    let (policy, meta) = Policy::load(ckpt, cfg.policy.clone())?;
    cfg.budgets = policy.budgets().clone();
    cfg.reward.kappa_max = cfg.budgets.max();
    if config.is_none() && cli.seed.is_none() {
        cfg.trainer.seed = meta.seed;
    }
    let env = Environment::new(cfg.reward.clone(), Aabb::default())?;
    Ok((policy, env, cfg))
}

fn print_summary(same: &[harness::BudgetComparison]) {
    for c in same {
        println!(
            "budget {:>6}  wins {}/{} (ties {})  mean dPSNR {:+.3} dB  rt fps/rl {:.3}",
            c.budget, c.wins, c.pairs, c.ties, c.mean_delta_psnr, c.runtime_ratio
        );
    }
}

fn report_files(dir: &Path, files: &[String]) {
    for f in files {
        println!("  {}", dir.join(f).display());
    }
}
