//! Consensus-calibrated GRPO on a zoom-then-diagnose trajectory protocol.
//!
//! A policy localizes a lesion by emitting a tool call, reads the cropped view
//! and answers. Groups of rollouts are scored with a composite reward whose
//! alignment term pays for agreeing within the group on clear cases and for
//! disagreeing on ambiguous ones; calibration metrics measure the outcome.

pub mod config;
pub mod metrics;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod spatial;
pub mod trainer;
pub mod trajectory;
pub mod warm;
pub mod world;

pub use config::{ConfigError, RunConfig};
pub use metrics::{
    alignment_score, build_report, entropy_gap, expected_calibration_error, render_table, selection_accuracy,
    CalibrationBin, CalibrationReport, MetricError, SampleEval,
};
pub use policy::{
    anchor_features, crop_features, propose_anchors, AnchorConfig, ContrastMode, Policy, PolicyParams, RolloutSample,
    Scene,
};
pub use reward::{
    alignment_reward, batch_advantages, group_advantages, rollout_reward, summarize_group, Answer, GroupSummary,
    NormMode, RewardBreakdown, RewardConfig, RewardMode, RewardRecord,
};
pub use spatial::{clamp_to_image, crop, iou, BBox, CropView, IntensityGrid, SpatialError};
pub use trainer::{
    ablation_suite, evaluate, train, AblationReport, Arm, EvalConfig, LrSchedule, TrainConfig, TrainContext,
    TrainError, TrainTrace, TraceRecord,
};
pub use trajectory::{
    format_reward, parse_bytes, parse_trajectory, serialize_trajectory, AnswerPayload, ParseStatus, ToolCall,
    Trajectory, TrajectoryRecord,
};
pub use warm::{supervised_init, InitConfig};
pub use world::{execute_tool_call, generate_dataset, CaseRecord, LabeledCase, WorldConfig};
