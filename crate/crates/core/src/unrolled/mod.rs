//! Unrolled gradient descent with a residual CNN after every data step.
//!
//! Inference runs `x_0 = A^T W y`, then for each iteration
//! `x <- cnn_k(x - alpha_k A^T W (A x - y))`. `W` is the density
//! compensation by default, matching the compressed-sensing baseline, so the
//! learned steps live on the same scale as ISTA's.

mod conv;
mod weights;

pub use conv::{cnn, conv3d, resnet_block, FeatureMap};
pub use weights::{
    load_weights, save_weights, BlockWeights, ConvWeights, IterationWeights, UnrolledWeights, WeightsError, MAGIC,
    TAPS, VERSION,
};

use crate::encoding::{self, CoilMaps, MultiCoilKSpace};
use crate::error::{Error, Result};
use crate::nufft::Plan;
use crate::recon::{apply_weights, check_inputs, sample_weights, DataWeighting};
use crate::trajectory::Trajectory;
use crate::volume::ComplexVolume;

/// Runs the network with density-weighted data consistency.
pub fn unrolled_infer(
    y: &MultiCoilKSpace,
    maps: &CoilMaps,
    traj: &Trajectory,
    plan: &Plan,
    w: &UnrolledWeights,
) -> Result<ComplexVolume> {
    unrolled_infer_with(y, maps, traj, plan, w, DataWeighting::default())
}

pub fn unrolled_infer_with(
    y: &MultiCoilKSpace,
    maps: &CoilMaps,
    traj: &Trajectory,
    plan: &Plan,
    w: &UnrolledWeights,
    weighting: DataWeighting,
) -> Result<ComplexVolume> {
    check_inputs(y, maps, traj, plan)?;
    w.validate()?;
    let dw = sample_weights(traj, weighting);
    let mut wy = y.clone();
    apply_weights(&mut wy, dw);
    let mut x = encoding::sense_adjoint_unchecked(&wy, maps, traj, plan, false);
    for (k, it) in w.iterations.iter().enumerate() {
        let mut r = encoding::sense_forward_unchecked(&x, maps, traj, plan).sub(y);
        apply_weights(&mut r, dw);
        let g = encoding::sense_adjoint_unchecked(&r, maps, traj, plan, false);
        x.axpy((-w.alpha[k]).into(), &g);
        x = cnn(&x, it)?;
        if !x.is_finite() {
            return Err(Error::Diverged { stage: "unrolled", iteration: k });
        }
    }
    Ok(x)
}
