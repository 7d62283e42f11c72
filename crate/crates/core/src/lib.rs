//! Flow-matching policy optimisation for RGBA layer decomposition, at toy
//! scale: a tape autodiff, rectified-flow samplers with exact transition
//! log-probabilities, a low-rank adapted velocity network, GRPO training, a
//! two-phase judge reward, synthetic layered scenes and evaluation metrics.

// Negated float comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod flow;
pub mod grpo;
pub mod layers;
pub mod metrics;
pub mod numerics;
pub mod policy;
pub mod reward;
