//! Minimal learnable building blocks with exact reverse-mode gradients.

mod adam;
mod gradcheck;
mod layers;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, BETA1, BETA2, DEFAULT_LR, EPSILON};
pub use gradcheck::{
    check_gradients, random_indices, random_readout, relative_error, GradCheck, FD_STEP, GRAD_FLOOR, GRAD_TOLERANCE,
};
pub use layers::{LearnableMap, MapKind, PLANE_BLOCKS};
pub use tape::{bce_mean, sigmoid, smooth_l1, smooth_l1_mean, BilinearTaps, Gradients, NodeId, Tape, BCE_EPS};
pub use tensor::Tensor;

use crate::error::Result;

/// Per-group, per-channel max of `features` rows with argmax indices
/// (`None` for empty groups, whose pooled value is 0).
pub fn masked_max_pool(
    features: &Tensor,
    groups: &[usize],
    group_count: usize,
) -> Result<(Tensor, Vec<Option<usize>>)> {
    let mut tape = Tape::new();
    let x = tape.input(features.clone());
    let out = tape.segment_max(x, groups, group_count)?;
    let pooled = tape.value(out).clone();
    let c = features.cols();
    let mut arg = vec![None; group_count * c];
    for (r, &g) in groups.iter().enumerate() {
        for ch in 0..c {
            let v = features.data[r * c + ch];
            let slot = &mut arg[g * c + ch];
            if slot.is_none_or(|a: usize| v > features.data[a * c + ch]) {
                *slot = Some(r);
            }
        }
    }
    Ok((pooled, arg))
}
