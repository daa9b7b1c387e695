//! Minimal neural-network substrate: layers with explicit forward/backward,
//! parameter traversal for the optimizer and checkpointing, and Adam.
//!
//! Layers cache what their backward pass needs during a training-mode
//! forward. Evaluation-mode forwards keep no caches and never touch running
//! statistics' update path, so they are pure.

mod adam;
mod conv;
mod dense;
mod norm;
mod stacks;

pub use adam::Adam;
pub use conv::{Conv2d, MaxPool2d};
pub use dense::Linear;
pub use norm::{BatchNorm1d, BatchNorm2d};
pub use stacks::{ConvNet, DenseLayer, Mlp, ResidualBlock, Shortcut, SpatialLayer};

use ndarray::{ArrayViewD, ArrayViewMutD};

/// One named parameter: its value and accumulated gradient.
pub struct ParamRef<'a> {
    pub value: ArrayViewMutD<'a, f32>,
    pub grad: ArrayViewMutD<'a, f32>,
}

/// Visitor callback over parameters, in a fixed construction order.
pub type ParamFn<'f> = dyn FnMut(&str, ParamRef<'_>) + 'f;

/// Visitor callback over non-trained buffers (running statistics).
pub type BufferFn<'f> = dyn FnMut(&str, ArrayViewMutD<'_, f32>) + 'f;

/// Read-only visitor used for checksums and serialization.
pub type StateFn<'f> = dyn FnMut(&str, ArrayViewD<'_, f32>) + 'f;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Draws Kaiming-normal weights (ReLU gain) in deterministic row-major order.
pub(crate) fn kaiming_fill(
    values: &mut [f32],
    fan_in: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) {
    use rand_distr::Distribution;
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = rand_distr::Normal::new(0.0f64, std).expect("valid std");
    for v in values {
        *v = normal.sample(rng) as f32;
    }
}
