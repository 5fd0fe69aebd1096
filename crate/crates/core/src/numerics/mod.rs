//! Dense-array substrate: grids, matrix kernels, softmax, reductions,
//! seeded random streams and image resizing.
//!
//! Everything downstream (rasterized maps, latents, attention weights) is
//! stored in a [`Grid`]: a contiguous `f32` buffer plus a shape. Kernels may
//! parallelize over independent rows internally, but every result is a pure
//! function of its inputs, so runs are deterministic regardless of thread
//! scheduling.

mod grid;
mod rng;

pub use grid::Grid;
pub use rng::RngState;
