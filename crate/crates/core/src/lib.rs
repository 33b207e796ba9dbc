//! Budget-aware anchor selection for streaming Gaussian primitives.
//!
//! Frames of primitives are capped into candidate pools, described by
//! per-candidate features and scored by a set-attention policy that picks
//! a budget from a discrete set and a subset of that size. The policy is
//! warm-started by imitating farthest point sampling and refined with
//! REINFORCE against a rendered-quality reward.

pub mod config;
pub mod error;
pub mod harness;
pub mod nn;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use harness::{
    compare_same_budget, emit_report, eval_fast, frontier_sweep, BudgetComparison, EvalSettings, FrameRecord,
    FrontierRow, Method, Report, VariantRow,
};
pub use policy::{AnchorAction, BudgetSet, Policy, PolicyConfig, PolicyOutput};
pub use reward::{Environment, Image, RewardBreakdown, RewardConfig, RuntimeSource};
pub use sampler::{fps, CandidatePool};
pub use scene::{Aabb, Frame, GaussianPrimitive, SceneSpec};
pub use trainer::{train, FrameContext, Stage, TraceRecord, TrainOutcome, TrainerConfig};
