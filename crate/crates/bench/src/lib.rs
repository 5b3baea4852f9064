//! Deterministic inputs shared by the kernel benchmarks.

use hazemoe_core::data::{synthetic_scene, PairSet, Task};
use hazemoe_core::Tensor;

/// `b` procedural scenes stacked into `b×3×side×side`.
pub fn scenes(b: usize, side: usize) -> Tensor<f32> {
    let items: Vec<_> = (0..b).map(|i| synthetic_scene(side, side, i as u64)).collect();
    Tensor::stack_batch(&items).expect("equal shapes")
}

/// Smooth pseudo-random weights in `[-0.1, 0.1]`.
pub fn weights(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i as f32 * 0.618_034).fract() - 0.5) * 0.2)
}

pub fn nighthaze_pairs(n: usize, side: usize) -> PairSet {
    PairSet::synthetic(Task::Nighthaze, n, side, 1).expect("synthetic pairs")
}
