//! Two attention implementations over identical inputs: a dense masked
//! softmax reference, and a tiled online-softmax kernel that skips empty
//! tiles. The tiled kernel is the performance core of the crate; the dense
//! path exists so every output can be checked against a straightforward
//! computation.
//!
//! Numerical contract: for one query row, both paths compute
//! `softmax(scale * q·Kᵀ  masked) · V` with masked logits treated as −∞.
//! The tiled path streams key tiles through a running (max, denominator)
//! pair, so it never materializes an S×S score matrix and never visits an
//! empty tile unless explicitly asked to (the benchmark baseline).

use rayon::prelude::*;
use serde::Serialize;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::mask::{flop_report, BlockMask, TileState, TokenMask};
use crate::mat::{Mat, Real};

/// Largest sequence length for which `attention_weights` will materialize the
/// dense S×S weight matrix.
pub const WEIGHTS_EXPORT_CAP: usize = 2048;

/// One attention problem: projected queries, keys, values and the logit
/// scale (usually 1/√d). Rows are sequence positions, columns channels.
#[derive(Clone, Copy)]
pub struct AttentionInputs<'a, T: Real> {
    pub q: &'a Mat<T>,
    pub k: &'a Mat<T>,
    pub v: &'a Mat<T>,
    pub scale: T,
}

impl<'a, T: Real> AttentionInputs<'a, T> {
    pub fn new(q: &'a Mat<T>, k: &'a Mat<T>, v: &'a Mat<T>, scale: T) -> Result<Self> {
        if q.rows() != k.rows() || q.rows() != v.rows() {
            return Err(Error::shape(format!(
                "q/k/v row counts differ: {} vs {} vs {}",
                q.rows(),
                k.rows(),
                v.rows()
            )));
        }
        if q.cols() != k.cols() || q.cols() != v.cols() {
            return Err(Error::shape(format!(
                "q/k/v head dims differ: {} vs {} vs {}",
                q.cols(),
                k.cols(),
                v.cols()
            )));
        }
        if !(scale.to_f64() > 0.0) {
            return Err(Error::config(format!("logit scale must be > 0, got {scale}")));
        }
        Ok(Self { q, k, v, scale })
    }

    pub fn seq_len(&self) -> usize {
        self.q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }
}

/// Inner product with eight independent accumulators folded by a fixed tree.
/// The lane split lets the loop vectorize; the fixed fold order keeps results
/// identical from run to run and thread count to thread count.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    debug_assert_eq!(a.len(), b.len());
    let whole = a.len() - a.len() % LANES;
    let mut lanes = [T::zero(); LANES];
    for (ac, bc) in a[..whole].chunks_exact(LANES).zip(b[..whole].chunks_exact(LANES)) {
        for i in 0..LANES {
            lanes[i] = lanes[i] + ac[i] * bc[i];
        }
    }
    let mut s = ((lanes[0] + lanes[4]) + (lanes[2] + lanes[6]))
        + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]));
    for (x, y) in a[whole..].iter().zip(&b[whole..]) {
        s = s + *x * *y;
    }
    s
}

/// Reference implementation: materializes each row of masked logits, runs a
/// two-pass stable softmax, and accumulates V. Instantiate at f64 for an
/// oracle with ~1e-16 rounding per operation.
pub fn dense_attention<T: Real>(inputs: &AttentionInputs<'_, T>, mask: &TokenMask) -> Result<Mat<T>> {
    let s = inputs.seq_len();
    if mask.seq_len() != s {
        return Err(Error::shape(format!(
            "mask covers {} rows but inputs have {s}",
            mask.seq_len()
        )));
    }
    let d = inputs.head_dim();
    let mut out = Mat::zeros(s, d);
    let mut logits = vec![T::neg_infinity(); s];
    for i in 0..s {
        let qrow = inputs.q.row(i);
        let mut row_max = T::neg_infinity();
        for j in 0..s {
            logits[j] = if mask.get(i, j) {
                let sc = dot(qrow, inputs.k.row(j)) * inputs.scale;
                if sc > row_max {
                    row_max = sc;
                }
                sc
            } else {
                T::neg_infinity()
            };
        }
        if row_max == T::neg_infinity() {
            return Err(Error::FullyMaskedRow { row: i });
        }
        let mut denom = T::zero();
        let orow = out.row_mut(i);
        for j in 0..s {
            if logits[j] > T::neg_infinity() {
                let p = (logits[j] - row_max).exp();
                denom = denom + p;
                let vrow = inputs.v.row(j);
                for e in 0..d {
                    orow[e] = orow[e] + p * vrow[e];
                }
            }
        }
        if !(denom > T::zero()) {
            // At least one key was allowed, so a zero/NaN denominator can
            // only come from non-finite inputs.
            return Err(Error::NonFinite { row: i });
        }
        let inv = T::one() / denom;
        for e in 0..d {
            orow[e] = orow[e] * inv;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TiledOptions {
    /// When false the kernel visits every tile and still computes its scores,
    /// applying the mask elementwise — the honest dense baseline for the
    /// skip-speedup measurement. Outputs are bitwise identical either way.
    pub skip_empty_tiles: bool,
}

impl Default for TiledOptions {
    fn default() -> Self {
        Self { skip_empty_tiles: true }
    }
}

/// Online-softmax pass over one query tile. `acc` holds `rows × d` output
/// accumulators (zeroed), `m`/`l` the running max and denominator per row.
/// Key tiles are visited in ascending order, so the accumulation order — and
/// therefore the bit pattern of the result — does not depend on scheduling.
fn query_tile_pass<T: Real>(
    inputs: &AttentionInputs<'_, T>,
    block: &BlockMask,
    opts: TiledOptions,
    qt: usize,
    acc: &mut [T],
    m: &mut [T],
    l: &mut [T],
) {
    let d = inputs.head_dim();
    let q0 = qt * block.q_tile();
    let rows = block.tile_rows(qt);
    debug_assert_eq!(acc.len(), rows * d);
    let mut scores = vec![T::zero(); block.k_tile()];
    for kt in 0..block.k_tiles() {
        let state = block.state(qt, kt);
        if state == TileState::Empty && opts.skip_empty_tiles {
            continue;
        }
        let k0 = kt * block.k_tile();
        let cols = block.tile_cols(kt);
        for r in 0..rows {
            let qrow = inputs.q.row(q0 + r);
            // Scores are computed for the whole tile row before masking: the
            // mask gates what is *used*, not what is computed, which is what
            // makes the skip-disabled baseline pay the full quadratic cost.
            for c in 0..cols {
                scores[c] = dot(qrow, inputs.k.row(k0 + c)) * inputs.scale;
            }
            let mut tile_max = m[r];
            let mut any = false;
            match state {
                TileState::Full => {
                    for &sc in &scores[..cols] {
                        if sc > tile_max {
                            tile_max = sc;
                        }
                    }
                    any = true;
                }
                TileState::Partial => {
                    let p = block.payload(qt, kt).expect("partial tile stores its payload");
                    for (c, sc) in scores[..cols].iter_mut().enumerate() {
                        if p.get(r, c) {
                            any = true;
                            if *sc > tile_max {
                                tile_max = *sc;
                            }
                        } else {
                            *sc = T::neg_infinity();
                        }
                    }
                }
                TileState::Empty => {}
            }
            if !any {
                // Every key in this tile row is masked: contributes nothing,
                // bitwise identical to having skipped the tile.
                continue;
            }
            let row_acc = &mut acc[r * d..(r + 1) * d];
            if tile_max > m[r] {
                // Rescale prior mass to the new max. exp(−∞ − finite) = 0
                // cleanly zeroes the (already zero) state of a fresh row.
                let corr = (m[r] - tile_max).exp();
                l[r] = l[r] * corr;
                for a in row_acc.iter_mut() {
                    *a = *a * corr;
                }
                m[r] = tile_max;
            }
            for c in 0..cols {
                let sc = scores[c];
                if sc == T::neg_infinity() {
                    continue;
                }
                let p = (sc - m[r]).exp();
                l[r] = l[r] + p;
                let vrow = inputs.v.row(k0 + c);
                for e in 0..d {
                    row_acc[e] = row_acc[e] + p * vrow[e];
                }
            }
        }
    }
}

/// Tiled attention with empty-tile skipping (the production path).
pub fn tiled_attention<T: Real>(inputs: &AttentionInputs<'_, T>, block: &BlockMask) -> Result<Mat<T>> {
    tiled_attention_with(inputs, block, TiledOptions::default())
}

/// Tiled attention with explicit options. Query tiles are independent work
/// units scheduled over the ambient rayon pool; each writes a disjoint chunk
/// of the output, so the result is identical for any thread count.
pub fn tiled_attention_with<T: Real>(
    inputs: &AttentionInputs<'_, T>,
    block: &BlockMask,
    opts: TiledOptions,
) -> Result<Mat<T>> {
    let s = inputs.seq_len();
    if block.seq_len() != s {
        return Err(Error::shape(format!(
            "block mask covers {} rows but inputs have {s}",
            block.seq_len()
        )));
    }
    let d = inputs.head_dim();
    let mut out = Mat::zeros(s, d);
    let chunk = block.q_tile() * d;
    out.as_mut_slice()
        .par_chunks_mut(chunk)
        .enumerate()
        .try_for_each(|(qt, acc)| {
            let rows = block.tile_rows(qt);
            let mut m = vec![T::neg_infinity(); rows];
            let mut l = vec![T::zero(); rows];
            query_tile_pass(inputs, block, opts, qt, acc, &mut m, &mut l);
            let q0 = qt * block.q_tile();
            for r in 0..rows {
                if !(l[r] > T::zero()) {
                    if l[r] != l[r] {
                        return Err(Error::NonFinite { row: q0 + r });
                    }
                    return Err(Error::UncoveredRow { row: q0 + r });
                }
                let inv = T::one() / l[r];
                for a in &mut acc[r * d..(r + 1) * d] {
                    *a = *a * inv;
                }
            }
            Ok(())
        })?;
    Ok(out)
}

/// Instrumented mode: runs the tiled kernel per query tile, keeps its running
/// (max, denominator) statistics, then recomputes every allowed logit and
/// normalizes with exactly those statistics. Row sums of the result measure
/// how well the online accumulation tracks a direct softmax — they should be
/// 1 up to rounding. Only available at small S (dense S×S output).
pub fn attention_weights<T: Real>(inputs: &AttentionInputs<'_, T>, block: &BlockMask) -> Result<Mat<T>> {
    let s = inputs.seq_len();
    if s > WEIGHTS_EXPORT_CAP {
        return Err(Error::OracleCap { len: s, cap: WEIGHTS_EXPORT_CAP });
    }
    if block.seq_len() != s {
        return Err(Error::shape(format!(
            "block mask covers {} rows but inputs have {s}",
            block.seq_len()
        )));
    }
    let d = inputs.head_dim();
    let mut weights = Mat::zeros(s, s);
    for qt in 0..block.q_tiles() {
        let rows = block.tile_rows(qt);
        let q0 = qt * block.q_tile();
        let mut acc = vec![T::zero(); rows * d];
        let mut m = vec![T::neg_infinity(); rows];
        let mut l = vec![T::zero(); rows];
        query_tile_pass(inputs, block, TiledOptions::default(), qt, &mut acc, &mut m, &mut l);
        for r in 0..rows {
            if !(l[r] > T::zero()) {
                if l[r] != l[r] {
                    return Err(Error::NonFinite { row: q0 + r });
                }
                return Err(Error::UncoveredRow { row: q0 + r });
            }
            let qrow = inputs.q.row(q0 + r);
            let wrow = weights.row_mut(q0 + r);
            for k in 0..s {
                if block.expand_bit(q0 + r, k) {
                    let sc = dot(qrow, inputs.k.row(k)) * inputs.scale;
                    wrow[k] = (sc - m[r]).exp() / l[r];
                }
            }
        }
    }
    Ok(weights)
}

/// Wall-time comparison of the skip kernel against the identical kernel with
/// skipping disabled, on the same inputs and mask.
#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub seq_len: usize,
    pub head_dim: usize,
    pub q_tile: usize,
    pub k_tile: usize,
    pub visited_tiles: u64,
    pub skipped_tiles: u64,
    pub repetitions: usize,
    pub median_skip_ms: f64,
    pub min_skip_ms: f64,
    pub median_dense_tiled_ms: f64,
    pub min_dense_tiled_ms: f64,
    pub speedup: f64,
    pub ops_estimate: u64,
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("wall times are finite"));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Times `repetitions` runs of each kernel variant (after one untimed warmup
/// of the skip path) and reports medians. Tile visit counts come from the
/// mask itself, so they are exact and deterministic.
pub fn kernel_bench<T: Real>(
    inputs: &AttentionInputs<'_, T>,
    block: &BlockMask,
    repetitions: usize,
) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(Error::config(format!(
            "kernel_bench needs at least 3 repetitions for a median, got {repetitions}"
        )));
    }
    std::hint::black_box(tiled_attention(inputs, block)?);
    let time_variant = |opts: TiledOptions| -> Result<Vec<f64>> {
        let mut ms = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t0 = Instant::now();
            let out = tiled_attention_with(inputs, block, opts)?;
            ms.push(t0.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(&out);
        }
        Ok(ms)
    };
    let mut skip_ms = time_variant(TiledOptions { skip_empty_tiles: true })?;
    let mut dense_ms = time_variant(TiledOptions { skip_empty_tiles: false })?;
    let visited = block.non_empty_tiles();
    let total = (block.q_tiles() * block.k_tiles()) as u64;
    let median_skip = median(&mut skip_ms);
    let median_dense = median(&mut dense_ms);
    Ok(BenchReport {
        seq_len: inputs.seq_len(),
        head_dim: inputs.head_dim(),
        q_tile: block.q_tile(),
        k_tile: block.k_tile(),
        visited_tiles: visited,
        skipped_tiles: total - visited,
        repetitions,
        median_skip_ms: median_skip,
        min_skip_ms: skip_ms[0],
        median_dense_tiled_ms: median_dense,
        min_dense_tiled_ms: dense_ms[0],
        speedup: median_dense / median_skip,
        ops_estimate: flop_report(block, inputs.head_dim()),
    })
}
