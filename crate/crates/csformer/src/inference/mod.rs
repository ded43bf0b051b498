//! Arbitrary-size inference: per-stage feature padding with attention masks
//! instead of padding the input image to a multiple of 128, plus exact MAC
//! accounting to quantify the savings.

mod infer;
mod macs;
mod masks;
mod plan;

pub use infer::{infer_baseline, infer_full_image, InferenceResult};
pub use macs::{count_macs_baseline, count_macs_planned, MacBreakdown, MacReport};
pub use masks::{build_global_mask, build_window_mask};
pub use plan::{plan_input_padded, plan_padding, PadPlan, StagePlan};
