//! Minimal CPU neural-network toolkit: NCHW tensors, layers with manual
//! backpropagation, and Adam.

mod adam;
mod layers;
mod tensor;

pub use adam::Adam;
pub use layers::{
    ActKind, Activation, BatchNorm2d, Conv2d, DepthwiseConv2d, GlobalAvgPool, Layer, Linear,
    NormMode, Padding, Param, Sequential, Upsample2x, BN_EPS,
};
pub use tensor::{Shape, Tensor};
pub(crate) use layers::source_index;

/// Flattens every persisted tensor of a layer into one vector.
pub fn export_state(layer: &dyn Layer) -> Vec<f32> {
    layer.state().into_iter().flatten().copied().collect()
}

/// Inverse of [`export_state`]; returns `false` if the length does not match.
pub fn import_state(layer: &mut dyn Layer, flat: &[f32]) -> bool {
    let total: usize = layer.state().iter().map(|s| s.len()).sum();
    if total != flat.len() {
        return false;
    }
    let mut offset = 0;
    for t in layer.state_mut() {
        let len = t.len();
        t.copy_from_slice(&flat[offset..offset + len]);
        offset += len;
    }
    true
}

/// Number of trainable scalars.
pub fn parameter_count(layer: &dyn Layer) -> usize {
    layer.params().iter().map(|p| p.value.len()).sum()
}

pub fn zero_grads(layer: &mut dyn Layer) {
    for p in layer.params_mut() {
        p.zero_grad();
    }
}
