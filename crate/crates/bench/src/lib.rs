//! Shared fixtures for the benchmark suite.

use ndarray::Array2;

/// Deterministic piecewise test image.
pub fn test_image(n: usize) -> Array2<f32> {
    Array2::from_shape_fn((n, n), |(y, x)| {
        let region = (y / 8 + x / 8) % 3;
        0.3 + region as f32 * 0.9 + 0.01 * ((y * 31 + x * 17) % 13) as f32
    })
}
