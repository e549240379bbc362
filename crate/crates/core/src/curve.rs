//! Hilbert curve index math on a 2^order x 2^order grid.
//!
//! Convention: the order-1 curve visits (0,0), (0,1), (1,1), (1,0), i.e. it
//! starts in the origin corner and ends in the corner adjacent along x.
//! Coordinates are (x, y) = (column, row).

use crate::error::{Error, Result};

/// Orders above this overflow the u64 index space (4^order cells).
pub const MAX_ORDER: u32 = 31;

#[inline]
fn check_order(order: u32) -> Result<u64> {
    if order > MAX_ORDER {
        return Err(Error::OutOfRange {
            what: "curve order",
            index: order as u64,
            bound: MAX_ORDER as u64 + 1,
        });
    }
    Ok(1u64 << order)
}

/// Rotate/reflect a quadrant so the sub-curve orientation matches the parent.
#[inline]
fn rot(side: u64, x: &mut u64, y: &mut u64, rx: u64, ry: u64) {
    if ry == 0 {
        if rx == 1 {
            *x = side - 1 - *x;
            *y = side - 1 - *y;
        }
        std::mem::swap(x, y);
    }
}

/// Maps a curve index to grid coordinates. `index` must be below 4^order.
pub fn hilbert_point(index: u64, order: u32) -> Result<(u32, u32)> {
    let side = check_order(order)?;
    let cells = side
        .checked_mul(side)
        .expect("order bound keeps side*side in range");
    if index >= cells {
        return Err(Error::OutOfRange {
            what: "curve index",
            index,
            bound: cells,
        });
    }
    let (mut x, mut y) = (0u64, 0u64);
    let mut t = index;
    let mut s = 1u64;
    while s < side {
        let rx = (t >> 1) & 1;
        let ry = (t ^ rx) & 1;
        rot(s, &mut x, &mut y, rx, ry);
        x += s * rx;
        y += s * ry;
        t >>= 2;
        s <<= 1;
    }
    Ok((x as u32, y as u32))
}

/// Maps grid coordinates to the curve index. Inverse of [`hilbert_point`].
pub fn hilbert_index(x: u32, y: u32, order: u32) -> Result<u64> {
    let side = check_order(order)?;
    for (label, v) in [("curve x", x), ("curve y", y)] {
        if (v as u64) >= side {
            return Err(Error::OutOfRange {
                what: label,
                index: v as u64,
                bound: side,
            });
        }
    }
    let (mut x, mut y) = (x as u64, y as u64);
    let mut d = 0u64;
    let mut s = side >> 1;
    while s > 0 {
        let rx = u64::from(x & s > 0);
        let ry = u64::from(y & s > 0);
        d += s * s * ((3 * rx) ^ ry);
        rot(side, &mut x, &mut y, rx, ry);
        s >>= 1;
    }
    Ok(d)
}

/// Smallest order whose grid side is at least `side`.
pub fn order_for_side(side: u32) -> u32 {
    side.next_power_of_two().trailing_zeros()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_one_visit_sequence() {
        let seq: Vec<_> = (0..4).map(|d| hilbert_point(d, 1).unwrap()).collect();
        assert_eq!(seq, vec![(0, 0), (0, 1), (1, 1), (1, 0)]);
    }

    #[test]
    fn origin_is_index_zero() {
        for order in 0..8 {
            assert_eq!(hilbert_point(0, order).unwrap(), (0, 0));
            assert_eq!(hilbert_index(0, 0, order).unwrap(), 0);
        }
    }

    #[test]
    fn order_zero_is_single_cell() {
        assert_eq!(hilbert_point(0, 0).unwrap(), (0, 0));
        assert!(hilbert_point(1, 0).is_err());
    }

    #[test]
    fn round_trip_small_orders() {
        for order in 0..=6 {
            let cells = 1u64 << (2 * order);
            for d in 0..cells {
                let (x, y) = hilbert_point(d, order).unwrap();
                assert_eq!(hilbert_index(x, y, order).unwrap(), d);
            }
        }
    }

    #[test]
    fn last_index_lands_on_a_corner() {
        for order in 1..=6u32 {
            let side = 1u32 << order;
            let last = (1u64 << (2 * order)) - 1;
            let (x, y) = hilbert_point(last, order).unwrap();
            assert!(x == 0 || x == side - 1);
            assert!(y == 0 || y == side - 1);
        }
    }

    #[test]
    fn rejects_out_of_domain() {
        assert!(hilbert_point(16, 2).is_err());
        assert!(hilbert_index(4, 0, 2).is_err());
        assert!(hilbert_index(0, 4, 2).is_err());
        assert!(hilbert_point(0, MAX_ORDER + 1).is_err());
    }

    #[test]
    fn order_for_side_covers() {
        assert_eq!(order_for_side(1), 0);
        assert_eq!(order_for_side(2), 1);
        assert_eq!(order_for_side(3), 2);
        assert_eq!(order_for_side(256), 8);
        assert_eq!(order_for_side(257), 9);
    }
}
