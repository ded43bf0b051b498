use super::macs::{count_macs_planned, MacReport};
use super::plan::{plan_input_padded, plan_padding, PadPlan};
use crate::error::Result;
use crate::model::{model_forward, ModelConfig, ModelParams};
use crate::tensor::{Element, Tensor};

pub struct InferenceResult<E: Element> {
    pub restored: Tensor<E>,
    pub plan: PadPlan,
    pub macs: MacReport,
}

/// Restore an image of any size by padding each stage's features to window
/// multiples and masking attention on the padded area.
pub fn infer_full_image<E: Element>(
    image: &Tensor<E>,
    params: &ModelParams<E>,
    config: &ModelConfig,
) -> Result<InferenceResult<E>> {
    let (_n, _c, h, w) = image.dims4()?;
    let plan = plan_padding(h, w, config);
    let out = model_forward(image, params, config, Some(&plan))?;
    let macs = count_macs_planned(config, &plan, image.shape()[0]);
    Ok(InferenceResult {
        restored: out.restored,
        plan,
        macs,
    })
}

/// Reference path: zero-pad the input once to a multiple of window * 16
/// (128 for window 8) and run the same masked network at those extents. The
/// validity machinery makes the result independent of padding extent, so this
/// is the equivalence oracle for [`infer_full_image`].
pub fn infer_baseline<E: Element>(
    image: &Tensor<E>,
    params: &ModelParams<E>,
    config: &ModelConfig,
) -> Result<InferenceResult<E>> {
    let (_n, _c, h, w) = image.dims4()?;
    let plan = plan_input_padded(h, w, config);
    let out = model_forward(image, params, config, Some(&plan))?;
    let macs = count_macs_planned(config, &plan, image.shape()[0]);
    Ok(InferenceResult {
        restored: out.restored,
        plan,
        macs,
    })
}
