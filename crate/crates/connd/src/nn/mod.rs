//! Minimal CNN building blocks: convolution with hand-written backprop,
//! elementwise activations, pooling, a linear head, and an Adam optimizer.
//!
//! Everything here is deterministic. Parameters initialize from an explicit
//! seeded stream, forward/backward passes are allocation-per-call with no
//! shared mutable state, and batch-level parallelism reduces partial
//! gradients in a fixed chunk order so results do not depend on thread
//! scheduling.

pub mod adam;
pub mod conv;
pub mod init;
pub mod layers;

pub use adam::{Adam, AdamParams};
pub use conv::{Conv2d, Conv2dGrad};
pub use layers::{global_avg_pool, global_avg_pool_backward, relu, relu_backward, sigmoid, upsample2x, upsample2x_backward, Linear, LinearGrad};

/// Images per work unit when fanning a batch out to worker threads. Fixed so
/// that gradient reduction order (chunk 0, chunk 1, ...) is independent of
/// the thread count, keeping training bit-deterministic.
pub const PAR_CHUNK: usize = 16;

/// Access to a model's parameter tensors as flat slices, in a fixed order.
/// Gradient containers mirror the same order, which is what lets the
/// optimizer pair them up without knowing tensor shapes.
pub trait FlatParams {
    fn flat(&self) -> Vec<&[f32]>;
    fn flat_mut(&mut self) -> Vec<&mut [f32]>;

    fn param_count(&self) -> usize {
        self.flat().iter().map(|s| s.len()).sum()
    }
}

/// Split `n` items into fixed-size chunks of `PAR_CHUNK`.
pub fn fixed_chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + PAR_CHUNK).min(n);
        out.push(start..end);
        start = end;
    }
    out
}
