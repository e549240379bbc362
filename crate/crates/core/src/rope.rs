//! Two-axis rotary position encoding. The first half of each head's
//! channels rotates with the row coordinate, the second half with the
//! column; within an axis, channels form interleaved (2c, 2c+1) pairs at
//! frequencies base^(-2c / (head_dim/2)).
//!
//! Angles, sines, and cosines are always computed in f64 and then cast, so
//! equal positions yield bitwise-equal rotation coefficients regardless of
//! which code path produced the position (this is what aligns guidance
//! anchors with the image tokens they sit on).

use crate::error::{Error, Result};
use crate::layout::{anchor_positions, AnchorSpec, TokenPos};
use crate::mat::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeParams {
    head_dim: usize,
    base: f64,
    ntk_factor: f64,
}

pub const DEFAULT_ROPE_BASE: f64 = 10000.0;

impl RopeParams {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::config(format!(
                "rope head_dim must be a positive multiple of 4, got {head_dim}"
            )));
        }
        if base <= 1.0 {
            return Err(Error::config(format!("rope base must exceed 1, got {base}")));
        }
        Ok(RopeParams {
            head_dim,
            base,
            ntk_factor: 1.0,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn ntk_factor(&self) -> f64 {
        self.ntk_factor
    }

    /// Per-axis pair frequencies, highest first.
    fn frequencies(&self) -> Vec<f64> {
        let axis_dim = self.head_dim / 2;
        let pairs = axis_dim / 2;
        (0..pairs)
            .map(|c| self.base.powf(-((2 * c) as f64) / axis_dim as f64))
            .collect()
    }
}

/// NTK-aware frequency rescale for positional extrapolation:
/// base' = base * extrapolation^(head_dim / (head_dim - 2)).
pub fn ntk_rescale(params: &RopeParams, extrapolation: f64) -> Result<RopeParams> {
    if extrapolation < 1.0 {
        return Err(Error::config(format!(
            "ntk extrapolation must be at least 1, got {extrapolation}"
        )));
    }
    if extrapolation == 1.0 {
        return Ok(*params);
    }
    let exponent = params.head_dim as f64 / (params.head_dim as f64 - 2.0);
    Ok(RopeParams {
        head_dim: params.head_dim,
        base: params.base * extrapolation.powf(exponent),
        ntk_factor: params.ntk_factor * extrapolation,
    })
}

fn rotate_impl<T: Real>(
    vectors: &Mat<T>,
    positions: &[TokenPos],
    params: &RopeParams,
    sign: f64,
) -> Result<Mat<T>> {
    if vectors.rows() != positions.len() {
        return Err(Error::shape(format!(
            "{} vector rows vs {} positions",
            vectors.rows(),
            positions.len()
        )));
    }
    if vectors.cols() != params.head_dim {
        return Err(Error::shape(format!(
            "vector width {} vs rope head_dim {}",
            vectors.cols(),
            params.head_dim
        )));
    }
    let freqs = params.frequencies();
    let axis_dim = params.head_dim / 2;
    let mut out = vectors.clone();
    for (r, pos) in positions.iter().enumerate() {
        let TokenPos::Grid { x, y } = *pos else {
            continue; // text sentinel: identity rotation
        };
        let row = out.row_mut(r);
        for (axis, coord) in [(0usize, y), (1, x)] {
            let offset = axis * axis_dim;
            for (c, freq) in freqs.iter().enumerate() {
                let angle = sign * coord as f64 * freq;
                let cos = T::from_f64(angle.cos());
                let sin = T::from_f64(angle.sin());
                let i = offset + 2 * c;
                let (a, b) = (row[i], row[i + 1]);
                row[i] = a * cos - b * sin;
                row[i + 1] = a * sin + b * cos;
            }
        }
    }
    Ok(out)
}

/// Rotates each row by its position's per-axis angles. Rows whose position
/// is the text sentinel pass through unchanged.
pub fn rotate<T: Real>(
    vectors: &Mat<T>,
    positions: &[TokenPos],
    params: &RopeParams,
) -> Result<Mat<T>> {
    rotate_impl(vectors, positions, params, 1.0)
}

/// Exact inverse rotation (transpose of the block-diagonal rotation),
/// used by the backward pass.
pub fn rotate_inverse<T: Real>(
    vectors: &Mat<T>,
    positions: &[TokenPos],
    params: &RopeParams,
) -> Result<Mat<T>> {
    rotate_impl(vectors, positions, params, -1.0)
}

/// Rotation for the guidance grid: anchors at (m, n) use scaled positions
/// (ratio*m, ratio*n), row-major over the anchor grid.
pub fn scaled_rotate<T: Real>(
    vectors: &Mat<T>,
    anchor: &AnchorSpec,
    params: &RopeParams,
) -> Result<Mat<T>> {
    if vectors.rows() != anchor.token_count() {
        return Err(Error::shape(format!(
            "{} vector rows vs {} anchors",
            vectors.rows(),
            anchor.token_count()
        )));
    }
    let positions: Vec<TokenPos> = anchor_positions(anchor)
        .into_iter()
        .map(|(sr, sc)| TokenPos::Grid { x: sc, y: sr })
        .collect();
    rotate(vectors, &positions, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(head_dim: usize) -> RopeParams {
        RopeParams::new(head_dim, DEFAULT_ROPE_BASE).unwrap()
    }

    fn grid(x: u32, y: u32) -> Vec<TokenPos> {
        vec![TokenPos::Grid { x, y }]
    }

    #[test]
    fn origin_and_text_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Mat::<f32>::randn(2, 16, 1.0, &mut rng);
        let p = params(16);
        let positions = vec![TokenPos::Grid { x: 0, y: 0 }, TokenPos::Text];
        let out = rotate(&v, &positions, &p).unwrap();
        assert_eq!(v, out);
    }

    #[test]
    fn rotation_preserves_norms_and_shared_position_dots() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = params(32);
        for &(x, y) in &[(3u32, 11u32), (127, 1), (40, 40)] {
            let q = Mat::<f64>::randn(1, 32, 1.0, &mut rng);
            let k = Mat::<f64>::randn(1, 32, 1.0, &mut rng);
            let rq = rotate(&q, &grid(x, y), &p).unwrap();
            let rk = rotate(&k, &grid(x, y), &p).unwrap();
            assert!((rq.frob_norm() - q.frob_norm()).abs() < 1e-12);
            let dot = |a: &Mat<f64>, b: &Mat<f64>| -> f64 {
                a.as_slice().iter().zip(b.as_slice()).map(|(u, v)| u * v).sum()
            };
            assert!((dot(&rq, &rk) - dot(&q, &k)).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_depend_only_on_relative_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params(16);
        let q64 = Mat::<f64>::randn(1, 16, 1.0, &mut rng);
        let k64 = Mat::<f64>::randn(1, 16, 1.0, &mut rng);
        let dot64 = |a: &Mat<f64>, b: &Mat<f64>| -> f64 {
            a.as_slice().iter().zip(b.as_slice()).map(|(u, v)| u * v).sum()
        };
        let base = dot64(
            &rotate(&q64, &grid(5, 9), &p).unwrap(),
            &rotate(&k64, &grid(2, 4), &p).unwrap(),
        );
        let moved = dot64(
            &rotate(&q64, &grid(5 + 7, 9 + 3), &p).unwrap(),
            &rotate(&k64, &grid(2 + 7, 4 + 3), &p).unwrap(),
        );
        assert!((base - moved).abs() < 1e-6);

        let q32: Mat<f32> = q64.cast();
        let k32: Mat<f32> = k64.cast();
        let dot32 = |a: &Mat<f32>, b: &Mat<f32>| -> f64 {
            a.as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(u, v)| (u * v) as f64)
                .sum()
        };
        let base32 = dot32(
            &rotate(&q32, &grid(5, 9), &p).unwrap(),
            &rotate(&k32, &grid(2, 4), &p).unwrap(),
        );
        let moved32 = dot32(
            &rotate(&q32, &grid(12, 12), &p).unwrap(),
            &rotate(&k32, &grid(9, 7), &p).unwrap(),
        );
        assert!((base32 - moved32).abs() < 1e-5);
    }

    #[test]
    fn inverse_rotation_recovers_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = params(16);
        let v = Mat::<f64>::randn(1, 16, 1.0, &mut rng);
        let pos = grid(19, 31);
        let back = rotate_inverse(&rotate(&v, &pos, &p).unwrap(), &pos, &p).unwrap();
        assert!(v.max_abs_diff(&back) < 1e-12);
    }

    #[test]
    fn scaled_rotate_matches_coincident_image_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let anchor = AnchorSpec::new(4, 4, 4).unwrap();
        let p = params(8);
        let v = Mat::<f32>::randn(16, 8, 1.0, &mut rng);
        let scaled = scaled_rotate(&v, &anchor, &p).unwrap();
        let explicit: Vec<TokenPos> = anchor_positions(&anchor)
            .into_iter()
            .map(|(sr, sc)| TokenPos::Grid { x: sc, y: sr })
            .collect();
        let direct = rotate(&v, &explicit, &p).unwrap();
        assert_eq!(scaled, direct, "bitwise phase alignment");
    }

    #[test]
    fn ratio_one_is_plain_rotate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let anchor = AnchorSpec::new(4, 4, 1).unwrap();
        let p = params(8);
        let v = Mat::<f64>::randn(16, 8, 1.0, &mut rng);
        let scaled = scaled_rotate(&v, &anchor, &p).unwrap();
        let raster: Vec<TokenPos> = (0..4)
            .flat_map(|m| (0..4).map(move |n| TokenPos::Grid { x: n, y: m }))
            .collect();
        assert_eq!(scaled, rotate(&v, &raster, &p).unwrap());
    }

    #[test]
    fn rotations_compose_additively() {
        // rotate at (4,4) equals four successive rotations at (1,1): the
        // phase is linear in position, so scaled anchors rotate by exactly
        // ratio times the unscaled angle.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = params(8);
        let v = Mat::<f64>::randn(1, 8, 1.0, &mut rng);
        let once = rotate(&v, &grid(4, 4), &p).unwrap();
        let mut step = v.clone();
        for _ in 0..4 {
            step = rotate(&step, &grid(1, 1), &p).unwrap();
        }
        assert!(once.max_abs_diff(&step) < 1e-12);
    }

    #[test]
    fn ntk_rescale_behaviour() {
        let p = params(64);
        let same = ntk_rescale(&p, 1.0).unwrap();
        assert_eq!(p, same);
        assert!(ntk_rescale(&p, 0.5).is_err());

        let ext = 2.0;
        let scaled = ntk_rescale(&p, ext).unwrap();
        assert_eq!(scaled.ntk_factor(), 2.0);
        // Lowest-frequency wavelength grows by ~ext (exact in the large
        // head_dim limit; the exponent uses head_dim per the 1D convention).
        let low_before = *p.frequencies().last().unwrap();
        let low_after = *scaled.frequencies().last().unwrap();
        let growth = low_before / low_after;
        assert!((growth / ext - 1.0).abs() < 0.05, "growth {growth}");

        // Relative-position property survives the rescale.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = Mat::<f64>::randn(1, 64, 1.0, &mut rng);
        let k = Mat::<f64>::randn(1, 64, 1.0, &mut rng);
        let dot = |a: &Mat<f64>, b: &Mat<f64>| -> f64 {
            a.as_slice().iter().zip(b.as_slice()).map(|(u, v)| u * v).sum()
        };
        let one = dot(
            &rotate(&q, &grid(10, 2), &scaled).unwrap(),
            &rotate(&k, &grid(6, 0), &scaled).unwrap(),
        );
        let two = dot(
            &rotate(&q, &grid(14, 9), &scaled).unwrap(),
            &rotate(&k, &grid(10, 7), &scaled).unwrap(),
        );
        assert!((one - two).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_params_and_shapes() {
        assert!(RopeParams::new(6, 10000.0).is_err());
        assert!(RopeParams::new(8, 1.0).is_err());
        let p = params(8);
        let v = Mat::<f32>::zeros(2, 8);
        assert!(rotate(&v, &[TokenPos::Text], &p).is_err());
        let wide = Mat::<f32>::zeros(1, 12);
        assert!(rotate(&wide, &[TokenPos::Text], &p).is_err());
    }
}
