//! Interaction rules compiled two ways: a brute-force token-level boolean
//! matrix (the oracle) and a tri-state tile mask built by interval arithmetic
//! over segment and window ranges. The two constructions are deliberately
//! independent; `verify_block_mask` checks them against each other bit by bit.

use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layout::{Segment, TokenLayout, TokenPos};

/// Paper-default tile granularity.
pub const DEFAULT_Q_TILE: usize = 128;
pub const DEFAULT_K_TILE: usize = 64;

/// Dense token masks above this row count are refused (S^2 bits).
pub const DEFAULT_ORACLE_CAP: usize = 16384;

/// How image queries see the guidance segment. `Region` restricts each
/// window to the anchor block whose scaled footprint covers it; `All` opens
/// the whole guidance segment; `Off` exists for ablations where anchors stay
/// in the sequence but influence nothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceScope {
    Off,
    Region,
    All,
}

/// Whether guidance tokens attend each other globally or only inside their
/// own curve-order window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSelfScope {
    Global,
    LocalWindow,
}

/// Per-segment-pair attention permissions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InteractionRules {
    pub text_to_text: bool,
    pub text_to_x: bool,
    pub text_to_lr: bool,
    pub x_to_text: bool,
    pub x_local: bool,
    pub x_neighbor_halo: bool,
    pub x_to_lr: GuidanceScope,
    pub lr_to_text: bool,
    pub lr_self_scope: LrSelfScope,
}

impl Default for InteractionRules {
    /// Text attends to itself and the image; image tokens attend locally
    /// (window + halo), to text, and to their scaled guidance region;
    /// guidance attends to text and to itself globally.
    fn default() -> Self {
        InteractionRules {
            text_to_text: true,
            text_to_x: true,
            text_to_lr: false,
            x_to_text: true,
            x_local: true,
            x_neighbor_halo: true,
            x_to_lr: GuidanceScope::Region,
            lr_to_text: true,
            lr_self_scope: LrSelfScope::Global,
        }
    }
}

impl InteractionRules {
    /// Variant whose total key budget stays linear in token count: guidance
    /// self-attention restricted to local windows. Used by scaling sweeps.
    pub fn linear_scaling() -> Self {
        InteractionRules {
            lr_self_scope: LrSelfScope::LocalWindow,
            ..Default::default()
        }
    }
}

/// Dense S x S boolean matrix, one bit per (query, key) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    seq_len: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl TokenMask {
    fn new_false(seq_len: usize) -> Self {
        let words_per_row = seq_len.div_ceil(64);
        TokenMask {
            seq_len,
            words_per_row,
            bits: vec![0; seq_len * words_per_row],
        }
    }

    /// Mask with every (query, key) pair allowed.
    pub fn all_allowed(seq_len: usize) -> Self {
        Self::from_fn(seq_len, |_, _| true)
    }

    /// Builds a mask from a predicate over (query, key).
    pub fn from_fn(seq_len: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new_false(seq_len);
        for q in 0..seq_len {
            for k in 0..seq_len {
                if f(q, k) {
                    m.set(q, k);
                }
            }
        }
        m
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        debug_assert!(q < self.seq_len && k < self.seq_len);
        (self.bits[q * self.words_per_row + k / 64] >> (k % 64)) & 1 == 1
    }

    #[inline]
    fn set(&mut self, q: usize, k: usize) {
        self.bits[q * self.words_per_row + k / 64] |= 1u64 << (k % 64);
    }

    /// Row as packed words, low bit = key 0.
    pub fn row_words(&self, q: usize) -> &[u64] {
        &self.bits[q * self.words_per_row..(q + 1) * self.words_per_row]
    }

    pub fn row_count(&self, q: usize) -> u64 {
        self.row_words(q).iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn allowed_bits(&self) -> u64 {
        self.bits.iter().map(|w| w.count_ones() as u64).sum()
    }
}

/// Geometry helpers shared by the token-level rule evaluation.
struct RuleGeometry<'a> {
    layout: &'a TokenLayout,
    side: u32,
}

impl<'a> RuleGeometry<'a> {
    fn new(layout: &'a TokenLayout) -> Self {
        RuleGeometry {
            layout,
            side: layout.window().side(),
        }
    }

    /// Window origin (row0, col0) of the image token at seq index `q`.
    fn window_origin(&self, q: usize) -> (u32, u32) {
        match self.layout.position(q) {
            TokenPos::Grid { x, y } => (y - y % self.side, x - x % self.side),
            TokenPos::Text => unreachable!("image token must carry a grid position"),
        }
    }

    /// Key cell (row, col) of an image token.
    fn cell(&self, k: usize) -> (u32, u32) {
        match self.layout.position(k) {
            TokenPos::Grid { x, y } => (y, x),
            TokenPos::Text => unreachable!("spatial token must carry a grid position"),
        }
    }

    /// Halo membership: key image cell within a `halo`-wide strip of a
    /// 4-adjacent window sharing an edge with the query's window.
    fn in_halo(&self, q: usize, k: usize) -> bool {
        let halo = self.layout.window().halo();
        if halo == 0 {
            return false;
        }
        let (r0, c0) = self.window_origin(q);
        let (kr, kc) = self.cell(k);
        let side = self.side;
        let in_rows = kr >= r0 && kr < r0 + side;
        let in_cols = kc >= c0 && kc < c0 + side;
        let above = kr + halo >= r0 && kr < r0 && in_cols;
        let below = kr >= r0 + side && kr < r0 + side + halo && in_cols;
        let left = kc + halo >= c0 && kc < c0 && in_rows;
        let right = kc >= c0 + side && kc < c0 + side + halo && in_rows;
        above || below || left || right
    }

    /// Region-scope guidance: anchor's scaled position inside the query's
    /// window footprint.
    fn anchor_in_footprint(&self, q: usize, k: usize) -> bool {
        let (r0, c0) = self.window_origin(q);
        let (sr, sc) = self.cell(k); // already scaled by construction
        sr >= r0 && sr < r0 + self.side && sc >= c0 && sc < c0 + self.side
    }

    fn same_window(&self, q: usize, k: usize) -> bool {
        self.layout.window_of_seq(q) == self.layout.window_of_seq(k)
    }

    fn same_lr_window(&self, q: usize, k: usize) -> bool {
        self.layout.lr_window_of_seq(q) == self.layout.lr_window_of_seq(k)
    }

    fn allows(&self, rules: &InteractionRules, q: usize, k: usize) -> bool {
        use Segment::*;
        match (self.layout.segment(q), self.layout.segment(k)) {
            (Text, Text) => rules.text_to_text,
            (Text, Image) => rules.text_to_x,
            (Text, Guidance) => rules.text_to_lr,
            (Image, Text) => rules.x_to_text,
            (Image, Image) => {
                (rules.x_local && self.same_window(q, k))
                    || (rules.x_neighbor_halo && self.in_halo(q, k))
            }
            (Image, Guidance) => match rules.x_to_lr {
                GuidanceScope::Off => false,
                GuidanceScope::All => true,
                GuidanceScope::Region => self.anchor_in_footprint(q, k),
            },
            (Guidance, Text) => rules.lr_to_text,
            (Guidance, Image) => false,
            (Guidance, Guidance) => match rules.lr_self_scope {
                LrSelfScope::Global => true,
                LrSelfScope::LocalWindow => self.same_lr_window(q, k),
            },
        }
    }
}

/// Brute-force reference: evaluates the rule table on every (q, k) pair.
pub fn build_token_mask(layout: &TokenLayout, rules: &InteractionRules) -> Result<TokenMask> {
    build_token_mask_capped(layout, rules, DEFAULT_ORACLE_CAP)
}

pub fn build_token_mask_capped(
    layout: &TokenLayout,
    rules: &InteractionRules,
    cap: usize,
) -> Result<TokenMask> {
    let s = layout.seq_len();
    if s > cap {
        return Err(Error::OracleCap { len: s, cap });
    }
    let geom = RuleGeometry::new(layout);
    let mut mask = TokenMask::new_false(s);
    for q in 0..s {
        for k in 0..s {
            if geom.allows(rules, q, k) {
                mask.set(q, k);
            }
        }
    }
    Ok(mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum TileState {
    Empty = 0,
    Partial = 1,
    Full = 2,
}

/// Exact bit pattern of one partial tile, clipped to the sequence bounds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePayload {
    rows: usize,
    cols: usize,
    bits: Vec<u64>,
}

impl TilePayload {
    fn new(rows: usize, cols: usize) -> Self {
        TilePayload {
            rows,
            cols,
            bits: vec![0; rows * cols.div_ceil(64)],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    fn words_per_row(&self) -> usize {
        self.cols.div_ceil(64)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        (self.bits[r * self.words_per_row() + c / 64] >> (c % 64)) & 1 == 1
    }

    #[inline]
    fn set(&mut self, r: usize, c: usize) {
        let w = self.words_per_row();
        self.bits[r * w + c / 64] |= 1u64 << (c % 64);
    }

    pub fn row_words(&self, r: usize) -> &[u64] {
        let w = self.words_per_row();
        &self.bits[r * w..(r + 1) * w]
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.iter().map(|w| w.count_ones() as u64).sum()
    }

    fn byte_len(&self) -> u64 {
        (self.bits.len() * 8) as u64
    }
}

const NO_PAYLOAD: u32 = u32::MAX;

/// Tri-state tile mask over ceil(S/q_tile) x ceil(S/k_tile) tiles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    seq_len: usize,
    q_tile: usize,
    k_tile: usize,
    q_tiles: usize,
    k_tiles: usize,
    states: Vec<TileState>,
    payload_idx: Vec<u32>,
    payloads: Vec<TilePayload>,
}

impl BlockMask {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn q_tile(&self) -> usize {
        self.q_tile
    }

    pub fn k_tile(&self) -> usize {
        self.k_tile
    }

    pub fn q_tiles(&self) -> usize {
        self.q_tiles
    }

    pub fn k_tiles(&self) -> usize {
        self.k_tiles
    }

    #[inline]
    pub fn state(&self, qt: usize, kt: usize) -> TileState {
        self.states[qt * self.k_tiles + kt]
    }

    #[inline]
    pub fn payload(&self, qt: usize, kt: usize) -> Option<&TilePayload> {
        match self.payload_idx[qt * self.k_tiles + kt] {
            NO_PAYLOAD => None,
            i => Some(&self.payloads[i as usize]),
        }
    }

    /// Height of tile row `qt` after clipping to the sequence end.
    pub fn tile_rows(&self, qt: usize) -> usize {
        (self.seq_len - qt * self.q_tile).min(self.q_tile)
    }

    /// Width of tile column `kt` after clipping.
    pub fn tile_cols(&self, kt: usize) -> usize {
        (self.seq_len - kt * self.k_tile).min(self.k_tile)
    }

    /// Bit implied by the tile states for one (query, key) pair.
    pub fn expand_bit(&self, q: usize, k: usize) -> bool {
        let (qt, kt) = (q / self.q_tile, k / self.k_tile);
        match self.state(qt, kt) {
            TileState::Empty => false,
            TileState::Full => true,
            TileState::Partial => self
                .payload(qt, kt)
                .expect("partial tile stores its payload")
                .get(q % self.q_tile, k % self.k_tile),
        }
    }

    /// Number of allowed keys for one query row.
    pub fn row_allowed(&self, q: usize) -> u64 {
        let qt = q / self.q_tile;
        let mut n = 0u64;
        for kt in 0..self.k_tiles {
            match self.state(qt, kt) {
                TileState::Empty => {}
                TileState::Full => n += self.tile_cols(kt) as u64,
                TileState::Partial => {
                    let p = self.payload(qt, kt).expect("partial tile stores its payload");
                    n += p.row_words(q % self.q_tile).iter().map(|w| w.count_ones() as u64).sum::<u64>();
                }
            }
        }
        n
    }

    pub fn non_empty_tiles(&self) -> u64 {
        self.states.iter().filter(|s| **s != TileState::Empty).count() as u64
    }

    /// Debug/fault-injection helper: flips one tile's state between empty
    /// and full (partial tiles become full, payload detached). Used to prove
    /// the verifier notices corrupted masks.
    pub fn flip_tile(&mut self, qt: usize, kt: usize) {
        let i = qt * self.k_tiles + kt;
        self.states[i] = match self.states[i] {
            TileState::Empty => TileState::Full,
            TileState::Full | TileState::Partial => TileState::Empty,
        };
        self.payload_idx[i] = NO_PAYLOAD;
    }
}

/// Sorted disjoint half-open intervals of allowed key indices for one class
/// of query rows.
type Intervals = Vec<(usize, usize)>;

fn normalize(mut v: Intervals) -> Intervals {
    v.retain(|(a, b)| a < b);
    v.sort_unstable();
    let mut out: Intervals = Vec::with_capacity(v.len());
    for (a, b) in v {
        match out.last_mut() {
            Some((_, e)) if a <= *e => *e = (*e).max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Collects scattered sequence indices into maximal runs.
fn runs_of(mut idx: Vec<usize>) -> Intervals {
    idx.sort_unstable();
    idx.dedup();
    let mut out = Vec::new();
    for i in idx {
        match out.last_mut() {
            Some((_, e)) if *e == i => *e += 1,
            _ => out.push((i, i + 1)),
        }
    }
    out
}

/// All query rows sharing a key-interval set, in layout order.
struct QueryClasses {
    /// Class id per query row.
    of_row: Vec<u32>,
    /// Key intervals per class.
    intervals: Vec<Intervals>,
}

fn halo_strip_indices(layout: &TokenLayout, wid: usize) -> Vec<usize> {
    let grid = layout.grid();
    let side = layout.window().side();
    let halo = layout.window().halo();
    if halo == 0 {
        return Vec::new();
    }
    let per_row = (grid.cols() / side) as usize;
    let w_rows = (grid.rows() / side) as usize;
    let (wr, wc) = (wid / per_row, wid % per_row);
    let (r0, c0) = (wr as u32 * side, wc as u32 * side);
    let mut cells: Vec<(u32, u32)> = Vec::new();
    if wr > 0 {
        cells.extend((r0 - halo..r0).flat_map(|r| (c0..c0 + side).map(move |c| (r, c))));
    }
    if wr + 1 < w_rows {
        cells.extend((r0 + side..r0 + side + halo).flat_map(|r| (c0..c0 + side).map(move |c| (r, c))));
    }
    if wc > 0 {
        cells.extend((r0..r0 + side).flat_map(|r| (c0 - halo..c0).map(move |c| (r, c))));
    }
    if wc + 1 < per_row {
        cells.extend((r0..r0 + side).flat_map(|r| (c0 + side..c0 + side + halo).map(move |c| (r, c))));
    }
    cells.into_iter().map(|(r, c)| layout.x_seq(c, r)).collect()
}

fn region_anchor_indices(layout: &TokenLayout, wid: usize) -> Vec<usize> {
    let Some(anchor) = layout.anchor() else {
        return Vec::new();
    };
    let grid = layout.grid();
    let side = layout.window().side();
    let rho = anchor.ratio();
    let per_row = (grid.cols() / side) as usize;
    let (wr, wc) = (wid / per_row, wid % per_row);
    let (r0, c0) = (wr as u32 * side, wc as u32 * side);
    let m_lo = r0.div_ceil(rho);
    let m_hi = (r0 + side).div_ceil(rho).min(anchor.lr_rows());
    let n_lo = c0.div_ceil(rho);
    let n_hi = (c0 + side).div_ceil(rho).min(anchor.lr_cols());
    let mut idx = Vec::new();
    for m in m_lo..m_hi {
        for n in n_lo..n_hi {
            idx.push(layout.lr_seq(m, n));
        }
    }
    idx
}

fn build_classes(layout: &TokenLayout, rules: &InteractionRules) -> QueryClasses {
    let s = layout.seq_len();
    let tl = layout.text_len();
    let x_range = layout.x_range();
    let lr_range = layout.lr_range();
    let mut of_row = vec![0u32; s];
    let mut intervals: Vec<Intervals> = Vec::new();

    if tl > 0 {
        let mut iv = Vec::new();
        if rules.text_to_text {
            iv.push((0, tl));
        }
        if rules.text_to_x {
            iv.push((x_range.start, x_range.end));
        }
        if rules.text_to_lr {
            iv.push((lr_range.start, lr_range.end));
        }
        let id = intervals.len() as u32;
        intervals.push(normalize(iv));
        of_row[..tl].fill(id);
    }

    for (wid, range) in layout.window_ranges().iter().enumerate() {
        let mut iv = Vec::new();
        if rules.x_to_text {
            iv.push((0, tl));
        }
        if rules.x_local {
            iv.push((range.start, range.end));
        }
        if rules.x_neighbor_halo {
            iv.extend(runs_of(halo_strip_indices(layout, wid)));
        }
        match rules.x_to_lr {
            GuidanceScope::Off => {}
            GuidanceScope::All => iv.push((lr_range.start, lr_range.end)),
            GuidanceScope::Region => iv.extend(runs_of(region_anchor_indices(layout, wid))),
        }
        let id = intervals.len() as u32;
        intervals.push(normalize(iv));
        of_row[range.clone()].fill(id);
    }

    if !lr_range.is_empty() {
        match rules.lr_self_scope {
            LrSelfScope::Global => {
                let mut iv = Vec::new();
                if rules.lr_to_text {
                    iv.push((0, tl));
                }
                iv.push((lr_range.start, lr_range.end));
                let id = intervals.len() as u32;
                intervals.push(normalize(iv));
                of_row[lr_range.clone()].fill(id);
            }
            LrSelfScope::LocalWindow => {
                for range in layout.lr_window_ranges() {
                    let mut iv = Vec::new();
                    if rules.lr_to_text {
                        iv.push((0, tl));
                    }
                    iv.push((range.start, range.end));
                    let id = intervals.len() as u32;
                    intervals.push(normalize(iv));
                    of_row[range.clone()].fill(id);
                }
            }
        }
    }

    QueryClasses { of_row, intervals }
}

/// Compiles the rules to tile granularity in O(classes x tiles) by interval
/// overlap counting; never materializes the S x S matrix.
pub fn build_block_mask(
    layout: &TokenLayout,
    rules: &InteractionRules,
    q_tile: usize,
    k_tile: usize,
) -> Result<BlockMask> {
    if q_tile == 0 || k_tile == 0 {
        return Err(Error::config("tile sizes must be at least 1"));
    }
    let s = layout.seq_len();
    let q_tiles = s.div_ceil(q_tile);
    let k_tiles = s.div_ceil(k_tile);
    let classes = build_classes(layout, rules);

    // Per-class allowed-key count within each key tile.
    let n_classes = classes.intervals.len();
    let mut cov = vec![0u32; n_classes * k_tiles];
    for (cls, iv) in classes.intervals.iter().enumerate() {
        for &(a, b) in iv {
            for kt in a / k_tile..b.div_ceil(k_tile) {
                let k0 = kt * k_tile;
                let k1 = (k0 + k_tile).min(s);
                let lo = a.max(k0);
                let hi = b.min(k1);
                cov[cls * k_tiles + kt] += (hi - lo) as u32;
            }
        }
    }

    let mut states = vec![TileState::Empty; q_tiles * k_tiles];
    let mut payload_idx = vec![NO_PAYLOAD; q_tiles * k_tiles];
    let mut payloads = Vec::new();

    for qt in 0..q_tiles {
        let q0 = qt * q_tile;
        let q1 = (q0 + q_tile).min(s);
        // Rows of one tile split into runs of identical classes; classes are
        // contiguous in layout order, so runs are few.
        let mut row_runs: Vec<(u32, usize, usize)> = Vec::new();
        let mut r = q0;
        while r < q1 {
            let cls = classes.of_row[r];
            let mut e = r + 1;
            while e < q1 && classes.of_row[e] == cls {
                e += 1;
            }
            row_runs.push((cls, r, e));
            r = e;
        }
        for kt in 0..k_tiles {
            let k0 = kt * k_tile;
            let k1 = (k0 + k_tile).min(s);
            let width = (k1 - k0) as u64;
            let mut allowed = 0u64;
            for &(cls, rs, re) in &row_runs {
                allowed += cov[cls as usize * k_tiles + kt] as u64 * (re - rs) as u64;
            }
            let idx = qt * k_tiles + kt;
            if allowed == 0 {
                continue;
            }
            if allowed == width * (q1 - q0) as u64 {
                states[idx] = TileState::Full;
                continue;
            }
            states[idx] = TileState::Partial;
            let mut payload = TilePayload::new(q1 - q0, k1 - k0);
            for &(cls, rs, re) in &row_runs {
                let iv = &classes.intervals[cls as usize];
                // Pattern is identical for every row of the run.
                let mut cells: Vec<usize> = Vec::new();
                for &(a, b) in iv {
                    let lo = a.max(k0);
                    let hi = b.min(k1);
                    cells.extend(lo..hi.max(lo));
                }
                for row in rs..re {
                    for &c in &cells {
                        payload.set(row - q0, c - k0);
                    }
                }
            }
            payload_idx[idx] = payloads.len() as u32;
            payloads.push(payload);
        }
    }

    Ok(BlockMask {
        seq_len: s,
        q_tile,
        k_tile,
        q_tiles,
        k_tiles,
        states,
        payload_idx,
        payloads,
    })
}

/// Aggregate mask statistics; all byte figures are analytic.
#[derive(Clone, Debug, Serialize)]
pub struct TileStats {
    pub seq_len: usize,
    pub q_tile: usize,
    pub k_tile: usize,
    pub empty: u64,
    pub partial: u64,
    pub full: u64,
    pub allowed_bits: u64,
    pub total_bits: u64,
    pub attended_bit_fraction: f64,
    /// Payload storage: packed bits of every partial tile.
    pub payload_bytes: u64,
    /// Tri-state grid at 2 bits per tile plus payloads.
    pub analytic_bytes: u64,
    /// Dense S x S bit matrix for comparison.
    pub dense_bits_bytes: u64,
}

impl TileStats {
    /// Multiply-accumulates for one attention-matrix pass at head dim `d`.
    pub fn estimated_ops(&self, d: usize) -> u64 {
        self.allowed_bits * 2 * d as u64
    }
}

pub fn tile_stats(mask: &BlockMask) -> TileStats {
    let mut empty = 0u64;
    let mut partial = 0u64;
    let mut full = 0u64;
    let mut allowed = 0u64;
    for qt in 0..mask.q_tiles {
        for kt in 0..mask.k_tiles {
            match mask.state(qt, kt) {
                TileState::Empty => empty += 1,
                TileState::Full => {
                    full += 1;
                    allowed += (mask.tile_rows(qt) * mask.tile_cols(kt)) as u64;
                }
                TileState::Partial => {
                    partial += 1;
                    allowed += mask
                        .payload(qt, kt)
                        .expect("partial tile stores its payload")
                        .count_ones();
                }
            }
        }
    }
    let s = mask.seq_len as u64;
    let total_bits = s * s;
    let payload_bytes: u64 = mask.payloads.iter().map(|p| p.byte_len()).sum();
    let tiles = (mask.q_tiles * mask.k_tiles) as u64;
    TileStats {
        seq_len: mask.seq_len,
        q_tile: mask.q_tile,
        k_tile: mask.k_tile,
        empty,
        partial,
        full,
        allowed_bits: allowed,
        total_bits,
        attended_bit_fraction: allowed as f64 / total_bits as f64,
        payload_bytes,
        analytic_bytes: (2 * tiles).div_ceil(8) + payload_bytes,
        dense_bits_bytes: total_bits.div_ceil(8),
    }
}

/// Multiply-accumulate estimate for both kernel passes (QK^T and PV):
/// 4 * allowed_bits * d_head.
pub fn flop_report(mask: &BlockMask, d_head: usize) -> u64 {
    tile_stats(mask).allowed_bits * 4 * d_head as u64
}

#[derive(Clone, Debug, Serialize)]
pub struct ConsistencyReport {
    pub seq_len: usize,
    pub checked_bits: u64,
    pub discrepancies: u64,
    pub first_mismatch: Option<(usize, usize)>,
}

impl ConsistencyReport {
    pub fn passed(&self) -> bool {
        self.discrepancies == 0
    }
}

/// Expands the tile mask row by row and diffs it against the token oracle.
pub fn verify_block_mask(block: &BlockMask, token: &TokenMask) -> Result<ConsistencyReport> {
    let s = token.seq_len();
    if block.seq_len != s {
        return Err(Error::shape(format!(
            "block mask covers {} rows, token mask {}",
            block.seq_len, s
        )));
    }
    let words = s.div_ceil(64);
    let mut discrepancies = 0u64;
    let mut first = None;
    let mut row = vec![0u64; words];
    for q in 0..s {
        row.fill(0);
        let qt = q / block.q_tile;
        for kt in 0..block.k_tiles {
            let k0 = kt * block.k_tile;
            match block.state(qt, kt) {
                TileState::Empty => {}
                TileState::Full => {
                    for k in k0..k0 + block.tile_cols(kt) {
                        row[k / 64] |= 1u64 << (k % 64);
                    }
                }
                TileState::Partial => {
                    let p = block.payload(qt, kt).expect("partial tile stores its payload");
                    let pr = p.row_words(q % block.q_tile);
                    for (i, &w) in pr.iter().enumerate() {
                        let mut w = w;
                        while w != 0 {
                            let b = w.trailing_zeros() as usize;
                            let k = k0 + i * 64 + b;
                            row[k / 64] |= 1u64 << (k % 64);
                            w &= w - 1;
                        }
                    }
                }
            }
        }
        let want = token.row_words(q);
        for (i, (&a, &b)) in row.iter().zip(want.iter()).enumerate() {
            let diff = a ^ b;
            if diff != 0 && first.is_none() {
                first = Some((q, i * 64 + diff.trailing_zeros() as usize));
            }
            discrepancies += diff.count_ones() as u64;
        }
    }
    Ok(ConsistencyReport {
        seq_len: s,
        checked_bits: (s * s) as u64,
        discrepancies,
        first_mismatch: first,
    })
}

const MASK_MAGIC: &[u8; 8] = b"MOSAMASK";
const MASK_VERSION: u32 = 1;

impl BlockMask {
    /// Binary export: magic, version, S, tile sizes, row-major tile-state
    /// byte array, then packed payload words of each partial tile in
    /// row-major tile order.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MASK_MAGIC)?;
        w.write_all(&MASK_VERSION.to_le_bytes())?;
        w.write_all(&(self.seq_len as u64).to_le_bytes())?;
        w.write_all(&(self.q_tile as u32).to_le_bytes())?;
        w.write_all(&(self.k_tile as u32).to_le_bytes())?;
        let bytes: Vec<u8> = self.states.iter().map(|s| *s as u8).collect();
        w.write_all(&bytes)?;
        for qt in 0..self.q_tiles {
            for kt in 0..self.k_tiles {
                if let Some(p) = self.payload(qt, kt) {
                    for word in &p.bits {
                        w.write_all(&word.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MASK_MAGIC {
            return Err(Error::format("mask file magic mismatch"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != MASK_VERSION {
            return Err(Error::format(format!("unsupported mask version {version}")));
        }
        r.read_exact(&mut b8)?;
        let seq_len = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b4)?;
        let q_tile = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let k_tile = u32::from_le_bytes(b4) as usize;
        if q_tile == 0 || k_tile == 0 || seq_len == 0 {
            return Err(Error::format("mask header has zero dimension"));
        }
        let q_tiles = seq_len.div_ceil(q_tile);
        let k_tiles = seq_len.div_ceil(k_tile);
        let mut state_bytes = vec![0u8; q_tiles * k_tiles];
        r.read_exact(&mut state_bytes)?;
        let mut states = Vec::with_capacity(state_bytes.len());
        for b in &state_bytes {
            states.push(match b {
                0 => TileState::Empty,
                1 => TileState::Partial,
                2 => TileState::Full,
                other => return Err(Error::format(format!("bad tile state byte {other}"))),
            });
        }
        let mut payload_idx = vec![NO_PAYLOAD; q_tiles * k_tiles];
        let mut payloads = Vec::new();
        for qt in 0..q_tiles {
            for kt in 0..k_tiles {
                if states[qt * k_tiles + kt] != TileState::Partial {
                    continue;
                }
                let rows = (seq_len - qt * q_tile).min(q_tile);
                let cols = (seq_len - kt * k_tile).min(k_tile);
                let mut p = TilePayload::new(rows, cols);
                for word in p.bits.iter_mut() {
                    r.read_exact(&mut b8)?;
                    *word = u64::from_le_bytes(b8);
                }
                payload_idx[qt * k_tiles + kt] = payloads.len() as u32;
                payloads.push(p);
            }
        }
        Ok(BlockMask {
            seq_len,
            q_tile,
            k_tile,
            q_tiles,
            k_tiles,
            states,
            payload_idx,
            payloads,
        })
    }

    /// JSON stats sidecar content.
    pub fn stats_json(&self) -> String {
        serde_json::to_string_pretty(&tile_stats(self)).expect("stats serialize")
    }
}
