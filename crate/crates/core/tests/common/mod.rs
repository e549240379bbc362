//! Shared oracles for integration tests. Everything here is derived from
//! first principles (recursive geometry, three-loop reference math) and must
//! stay independent of the library implementations it checks.
#![allow(dead_code)]

/// Full visit sequence of the Hilbert curve by recursive quadrant subdivision.
///
/// A(0) = [(0,0)]. A(k) concatenates four copies of A(k-1) with h = 2^(k-1):
/// transpose placed at (0,0), identity at (0,h), identity at (h,h), and
/// anti-transpose ((x,y) -> (h-1-y, h-1-x)) at (h,0). This pins the same
/// orientation as the bit-twiddle code but via a different construction.
pub fn hilbert_oracle(order: u32) -> Vec<(u32, u32)> {
    if order == 0 {
        return vec![(0, 0)];
    }
    let prev = hilbert_oracle(order - 1);
    let h = 1u32 << (order - 1);
    let mut seq = Vec::with_capacity(prev.len() * 4);
    seq.extend(prev.iter().map(|&(x, y)| (y, x)));
    seq.extend(prev.iter().map(|&(x, y)| (x, y + h)));
    seq.extend(prev.iter().map(|&(x, y)| (x + h, y + h)));
    seq.extend(prev.iter().map(|&(x, y)| (h - 1 - y + h, h - 1 - x)));
    seq
}

/// Three-loop masked softmax attention in f64, the dense reference.
/// `q`, `k`, `v` are row-major `s x d`; `allowed(i, j)` is the mask.
/// Rows with no allowed key panic: oracle inputs must keep rows covered.
pub fn naive_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: usize,
    d: usize,
    scale: f64,
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    assert_eq!(q.len(), s * d);
    assert_eq!(k.len(), s * d);
    assert_eq!(v.len(), s * d);
    let mut out = vec![0.0f64; s * d];
    for i in 0..s {
        let mut scores = vec![f64::NEG_INFINITY; s];
        let mut max = f64::NEG_INFINITY;
        for j in 0..s {
            if allowed(i, j) {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q[i * d + c] * k[j * d + c];
                }
                scores[j] = dot * scale;
                max = max.max(scores[j]);
            }
        }
        assert!(max.is_finite(), "oracle row {i} fully masked");
        let mut denom = 0.0;
        for score in scores.iter_mut() {
            if score.is_finite() {
                *score = (*score - max).exp();
                denom += *score;
            } else {
                *score = 0.0;
            }
        }
        for j in 0..s {
            if scores[j] != 0.0 {
                let w = scores[j] / denom;
                for c in 0..d {
                    out[i * d + c] += w * v[j * d + c];
                }
            }
        }
    }
    out
}
