//! Reasoning-supervised fine-tuning of a tiny vision-language-action policy.

// `!(x >= 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod canonical;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod train;
pub mod sim;
pub mod teacher;
