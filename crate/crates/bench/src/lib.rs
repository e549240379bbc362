//! Shared fixtures for the criterion benchmarks in `benches/engine.rs`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mosaic_core::{
    build_layout, AnchorSpec, GridSpec, Mat, Real, Result, TokenLayout, WindowSpec,
};

/// Square grid with 16-wide windows (clamped to the side), a halo of 2 where
/// the grid is big enough, 4x guidance anchors from side 8 up, and 16 text
/// tokens — the mid-size shape the microbenchmarks exercise.
pub fn layout_for_side(side: u32) -> Result<TokenLayout> {
    let grid = GridSpec::new(side, side, 1)?;
    let window = WindowSpec::new(16.min(side), if side > 2 { 2 } else { 0 })?;
    let anchor = if side >= 8 { Some(AnchorSpec::new(side / 4, side / 4, 4)?) } else { None };
    build_layout(&grid, &window, anchor.as_ref(), 16)
}

/// Seeded unit-variance Q/K/V triple sized to a layout.
pub fn seeded_qkv<T: Real>(layout: &TokenLayout, head_dim: usize, seed: u64) -> [Mat<T>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = layout.seq_len();
    [
        Mat::randn(s, head_dim, 1.0, &mut rng),
        Mat::randn(s, head_dim, 1.0, &mut rng),
        Mat::randn(s, head_dim, 1.0, &mut rng),
    ]
}
