//! Experiment substrates: the pixel reach environment and tabular MDPs.

mod pixel;
mod tabular;
mod variation;

pub use pixel::{
    integrate, render, reward, silhouette_mask, ArenaState, PixelEnv, PixelEnvConfig, StepResult, AGENT_COLOR,
    BACKGROUND, TARGET_COLOR,
};
pub use tabular::{
    exact_q, visitation_from_pair, visitation_probs, QTable, StateMap, TabularMdp, TabularPolicy,
};
pub use variation::{apply_variation, apply_variation_at, VariationMode, VisualVariation};

use crate::error::Result;
use crate::numerics::Tensor;
use crate::pnm::PnmImage;

/// Frame `index` of a stacked observation as a P6 image.
pub fn frame_to_ppm(obs: &Tensor, index: usize) -> Result<PnmImage> {
    let (h, w) = (obs.shape()[1], obs.shape()[2]);
    let plane = 3 * h * w;
    let start = index * plane;
    if obs.rank() != 3 || start + plane > obs.len() {
        crate::error::bail!(Shape, "frame {index} not present in {:?}", obs.shape());
    }
    PnmImage::from_planar(3, h, w, &obs.data()[start..start + plane])
}
