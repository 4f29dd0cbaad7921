//! Verifiable multi-channel rewards for grounded visual question answering,
//! group-relative policy optimization over them, and the analysis tools that
//! go with it: attention-density measurement and reward-variance breakdowns.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix it to `f64`.

// `!(x > 0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod box_geometry;
pub mod dataset;
pub mod error;
pub mod grpo;
pub mod reward_engine;
pub mod scalar;
pub mod text_metrics;
pub mod toy_env;
pub mod variance;

pub use attention::{aggregate, boxes_to_mask, rad, AttentionDims, PatchMask};
pub use box_geometry::{union_area, union_iou, RectRejection, IOU_EPS};
pub use error::{Error, Result};
pub use grpo::{
    group_normalize, grpo_objective, grpo_step, objective_gradient, AdvantageVector, DifferentiablePolicy,
};
pub use reward_engine::{
    compose_reward, parse_structured, score_raw, Field, OutputMode, COMPONENT_NAMES, NUM_COMPONENTS,
};
pub use scalar::Scalar;
pub use text_metrics::{bleu4_smoothed, caption_reward, rouge_l_f1, tokenize, TokenSeq};

pub type Rect = box_geometry::Rect<f64>;
pub type BoxSet = box_geometry::BoxSet<f64>;
pub type RewardWeights = reward_engine::RewardWeights<f64>;
pub type RewardBreakdown = reward_engine::RewardBreakdown<f64>;
pub type StructuredOutput = reward_engine::StructuredOutput<f64>;
pub type GoldTarget = reward_engine::GoldTarget<f64>;
pub type GrpoConfig = grpo::GrpoConfig<f64>;
pub type GroupBatch = grpo::GroupBatch<f64>;
pub type RolloutLogProbs = grpo::RolloutLogProbs<f64>;
pub type AttentionTensor = attention::AttentionTensor<f64>;
pub type AttentionGrid = attention::AttentionGrid<f64>;
pub type SymMatrix = variance::SymMatrix<f64>;
pub type RewardSampleMatrix = variance::RewardSampleMatrix<f64>;
pub type VarianceSplit = variance::VarianceSplit<f64>;
pub type DecompositionReport = variance::DecompositionReport<f64>;
pub type VerifySample = dataset::VerifySample<f64>;
pub type ToyPolicy = toy_env::ToyPolicy<f64>;
pub type TrainConfig = toy_env::TrainConfig<f64>;
