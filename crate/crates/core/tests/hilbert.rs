//! Curve implementation checked against the recursive subdivision oracle.

mod common;

use mosaic_core::curve::{hilbert_index, hilbert_point, MAX_ORDER};
use proptest::prelude::*;

#[test]
fn matches_subdivision_oracle_through_order_six() {
    for order in 0..=6u32 {
        let oracle = common::hilbert_oracle(order);
        for (d, &(ox, oy)) in oracle.iter().enumerate() {
            let (x, y) = hilbert_point(d as u64, order).unwrap();
            assert_eq!((x, y), (ox, oy), "order {order} index {d}");
            assert_eq!(hilbert_index(ox, oy, order).unwrap(), d as u64);
        }
    }
}

#[test]
fn consecutive_indices_are_grid_neighbors() {
    for order in 1..=6u32 {
        let cells = 1u64 << (2 * order);
        let (mut px, mut py) = hilbert_point(0, order).unwrap();
        for d in 1..cells {
            let (x, y) = hilbert_point(d, order).unwrap();
            let step = x.abs_diff(px) + y.abs_diff(py);
            assert_eq!(step, 1, "order {order}: jump at index {d}");
            (px, py) = (x, y);
        }
    }
}

#[test]
fn aligned_blocks_are_contiguous_index_runs() {
    for order in 1..=6u32 {
        let side = 1u32 << order;
        for block_log in 0..=order {
            let block = 1u32 << block_log;
            let span = (1u64 << (2 * block_log)) - 1;
            for by in (0..side).step_by(block as usize) {
                for bx in (0..side).step_by(block as usize) {
                    let mut lo = u64::MAX;
                    let mut hi = 0u64;
                    for y in by..by + block {
                        for x in bx..bx + block {
                            let d = hilbert_index(x, y, order).unwrap();
                            lo = lo.min(d);
                            hi = hi.max(d);
                        }
                    }
                    assert_eq!(hi - lo, span, "order {order} block {block} at ({bx},{by})");
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn round_trip_large_orders(order in 7u32..=MAX_ORDER, seed in any::<u64>()) {
        let cells = 1u128 << (2 * order);
        let d = (seed as u128 % cells) as u64;
        let (x, y) = hilbert_point(d, order).unwrap();
        prop_assert_eq!(hilbert_index(x, y, order).unwrap(), d);
    }

    #[test]
    fn adjacency_holds_at_random_offsets(order in 7u32..=20, seed in any::<u64>()) {
        let cells = 1u64 << (2 * order);
        let d = seed % (cells - 1);
        let (x0, y0) = hilbert_point(d, order).unwrap();
        let (x1, y1) = hilbert_point(d + 1, order).unwrap();
        prop_assert_eq!(x0.abs_diff(x1) + y0.abs_diff(y1), 1);
    }
}
