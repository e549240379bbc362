//! Token sequence layout: [text | image tokens in curve order | guidance
//! anchors in curve order].
//!
//! Two addressing conventions meet here and are kept explicit throughout:
//! curve space uses (x, y) = (column, row); window ids and anchor cells use
//! (row, col), matching the order their defining formulas are written in.

use std::io::Write;

use crate::curve::{hilbert_point, order_for_side};
use crate::error::{Error, Result};

/// High-resolution token grid. `downsample` is the pixels-per-token factor
/// and is bookkeeping only; it never enters index math.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    rows: u32,
    cols: u32,
    downsample: u32,
    pad: bool,
}

impl GridSpec {
    pub fn new(rows: u32, cols: u32, downsample: u32) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config("grid rows and cols must be at least 1"));
        }
        if downsample == 0 {
            return Err(Error::config("grid downsample must be at least 1"));
        }
        Ok(GridSpec {
            rows,
            cols,
            downsample,
            pad: false,
        })
    }

    /// Allows non-power-of-two axes; the curve walks the padded power-of-two
    /// domain and padded cells are excluded from the active token set.
    pub fn with_padding(mut self) -> Self {
        self.pad = true;
        self
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn downsample(&self) -> u32 {
        self.downsample
    }

    pub fn padding_enabled(&self) -> bool {
        self.pad
    }

    pub fn token_count(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    fn needs_padding(&self) -> bool {
        !self.rows.is_power_of_two() || !self.cols.is_power_of_two()
    }
}

/// Square local window over the image grid plus a neighbor halo ring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    side: u32,
    halo: u32,
}

impl WindowSpec {
    pub fn new(side: u32, halo: u32) -> Result<Self> {
        if side == 0 || !side.is_power_of_two() {
            return Err(Error::config(format!(
                "window side must be a power of two, got {side}"
            )));
        }
        if halo >= side {
            return Err(Error::config(format!(
                "window halo must be smaller than side, got halo {halo} side {side}"
            )));
        }
        Ok(WindowSpec { side, halo })
    }

    pub fn side(&self) -> u32 {
        self.side
    }

    pub fn halo(&self) -> u32 {
        self.halo
    }

    pub fn tokens(&self) -> usize {
        self.side as usize * self.side as usize
    }

    fn validate_for(&self, grid: &GridSpec) -> Result<()> {
        if grid.rows % self.side != 0 || grid.cols % self.side != 0 {
            return Err(Error::config(format!(
                "window side {} must divide grid {}x{}",
                self.side, grid.rows, grid.cols
            )));
        }
        Ok(())
    }
}

/// Low-resolution guidance grid whose anchors sit on scaled positions of the
/// high-resolution lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnchorSpec {
    lr_rows: u32,
    lr_cols: u32,
    ratio: u32,
}

impl AnchorSpec {
    pub fn new(lr_rows: u32, lr_cols: u32, ratio: u32) -> Result<Self> {
        if lr_rows == 0 || lr_cols == 0 {
            return Err(Error::config("guidance grid axes must be at least 1"));
        }
        if ratio == 0 {
            return Err(Error::config("anchor ratio must be at least 1"));
        }
        Ok(AnchorSpec {
            lr_rows,
            lr_cols,
            ratio,
        })
    }

    pub fn lr_rows(&self) -> u32 {
        self.lr_rows
    }

    pub fn lr_cols(&self) -> u32 {
        self.lr_cols
    }

    pub fn ratio(&self) -> u32 {
        self.ratio
    }

    pub fn token_count(&self) -> usize {
        self.lr_rows as usize * self.lr_cols as usize
    }

    fn validate_for(&self, grid: &GridSpec) -> Result<()> {
        if self.ratio * self.lr_rows != grid.rows || self.ratio * self.lr_cols != grid.cols {
            return Err(Error::config(format!(
                "anchor ratio {} x guidance grid {}x{} must equal grid {}x{}",
                self.ratio, self.lr_rows, self.lr_cols, grid.rows, grid.cols
            )));
        }
        Ok(())
    }
}

/// Scaled positions of all guidance anchors, row-major over (m, n) cells.
/// Each entry is (ratio * m, ratio * n) = (scaled row, scaled col).
pub fn anchor_positions(anchor: &AnchorSpec) -> Vec<(u32, u32)> {
    let mut out = Vec::with_capacity(anchor.token_count());
    for m in 0..anchor.lr_rows {
        for n in 0..anchor.lr_cols {
            out.push((anchor.ratio * m, anchor.ratio * n));
        }
    }
    out
}

/// Window id of the cell at (row, col): windows are numbered row-major over
/// the window grid, id = (row / side) * (cols / side) + (col / side).
pub fn window_of(grid: &GridSpec, window: &WindowSpec, row: u32, col: u32) -> Result<usize> {
    window.validate_for(grid)?;
    if row >= grid.rows || col >= grid.cols {
        return Err(Error::OutOfRange {
            what: "grid cell",
            index: (row as u64) << 32 | col as u64,
            bound: (grid.rows as u64) << 32 | grid.cols as u64,
        });
    }
    let per_row = (grid.cols / window.side) as usize;
    Ok((row / window.side) as usize * per_row + (col / window.side) as usize)
}

/// Per-token position fed to the rotary encoding. Text tokens carry the
/// sentinel that rotates by the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenPos {
    Text,
    Grid { x: u32, y: u32 },
}

/// Sequence segment a token belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Text,
    Image,
    Guidance,
}

impl Segment {
    pub fn label(&self) -> &'static str {
        match self {
            Segment::Text => "text",
            Segment::Image => "image",
            Segment::Guidance => "guidance",
        }
    }
}

/// Fully assembled token layout. Image and guidance tokens are permuted to
/// curve order, making every aligned window one contiguous index interval.
#[derive(Clone, Debug)]
pub struct TokenLayout {
    grid: GridSpec,
    window: WindowSpec,
    anchor: Option<AnchorSpec>,
    text_len: usize,
    x_start: usize,
    lr_start: usize,
    seq_len: usize,
    /// Row-major image cell -> sequence index.
    x_perm: Vec<usize>,
    /// Row-major guidance cell -> sequence index.
    lr_perm: Vec<usize>,
    positions: Vec<TokenPos>,
    window_ranges: Vec<std::ops::Range<usize>>,
    lr_window_side: u32,
    lr_window_ranges: Vec<std::ops::Range<usize>>,
}

/// Walks the curve over the padded square domain and returns active cells
/// (x < cols, y < rows) in visit order.
fn curve_order_cells(rows: u32, cols: u32) -> Vec<(u32, u32)> {
    let side = rows.max(cols).next_power_of_two();
    let order = order_for_side(side);
    let mut cells = Vec::with_capacity(rows as usize * cols as usize);
    for d in 0..(side as u64 * side as u64) {
        let (x, y) = hilbert_point(d, order).expect("index below 4^order");
        if x < cols && y < rows {
            cells.push((x, y));
        }
    }
    cells
}

/// Contiguous sequence range of each window, given cells in sequence order.
/// Returns an error if any window's tokens are not one contiguous run; the
/// curve's quadrant contiguity guarantees they are.
fn contiguous_window_ranges(
    cells: &[(u32, u32)],
    seq_offset: usize,
    rows: u32,
    cols: u32,
    side: u32,
) -> Result<Vec<std::ops::Range<usize>>> {
    let per_row = (cols / side) as usize;
    let count = (rows / side) as usize * per_row;
    let expect = side as usize * side as usize;
    let mut first = vec![usize::MAX; count];
    let mut last = vec![0usize; count];
    let mut seen = vec![0usize; count];
    for (i, &(x, y)) in cells.iter().enumerate() {
        let wid = (y / side) as usize * per_row + (x / side) as usize;
        first[wid] = first[wid].min(i);
        last[wid] = last[wid].max(i);
        seen[wid] += 1;
    }
    let mut ranges = Vec::with_capacity(count);
    for wid in 0..count {
        if seen[wid] != expect || last[wid] - first[wid] + 1 != expect {
            return Err(Error::config(format!(
                "window {wid} is not contiguous in curve order"
            )));
        }
        ranges.push(seq_offset + first[wid]..seq_offset + last[wid] + 1);
    }
    Ok(ranges)
}

pub fn build_layout(
    grid: &GridSpec,
    window: &WindowSpec,
    anchor: Option<&AnchorSpec>,
    text_len: usize,
) -> Result<TokenLayout> {
    window.validate_for(grid)?;
    if let Some(a) = anchor {
        a.validate_for(grid)?;
    }
    if grid.needs_padding() && !grid.pad {
        return Err(Error::config(format!(
            "grid {}x{} is not power-of-two per axis; enable padding",
            grid.rows, grid.cols
        )));
    }

    let x_start = text_len;
    let x_cells = curve_order_cells(grid.rows, grid.cols);
    debug_assert_eq!(x_cells.len(), grid.token_count());
    let lr_start = x_start + x_cells.len();

    let mut positions = Vec::new();
    positions.resize(text_len, TokenPos::Text);
    let mut x_perm = vec![usize::MAX; grid.token_count()];
    for (i, &(x, y)) in x_cells.iter().enumerate() {
        x_perm[(y * grid.cols + x) as usize] = x_start + i;
        positions.push(TokenPos::Grid { x, y });
    }
    let window_ranges =
        contiguous_window_ranges(&x_cells, x_start, grid.rows, grid.cols, window.side)?;

    let (lr_perm, lr_window_side, lr_window_ranges) = match anchor {
        Some(a) => {
            let lr_cells = curve_order_cells(a.lr_rows, a.lr_cols);
            let mut perm = vec![usize::MAX; a.token_count()];
            for (i, &(n, m)) in lr_cells.iter().enumerate() {
                perm[(m * a.lr_cols + n) as usize] = lr_start + i;
                positions.push(TokenPos::Grid {
                    x: n * a.ratio,
                    y: m * a.ratio,
                });
            }
            let mut side = window.side.min(a.lr_rows).min(a.lr_cols);
            while a.lr_rows % side != 0 || a.lr_cols % side != 0 {
                side /= 2;
            }
            let ranges = contiguous_window_ranges(&lr_cells, lr_start, a.lr_rows, a.lr_cols, side)?;
            (perm, side, ranges)
        }
        None => (Vec::new(), 0, Vec::new()),
    };

    let seq_len = positions.len();
    Ok(TokenLayout {
        grid: *grid,
        window: *window,
        anchor: anchor.copied(),
        text_len,
        x_start,
        lr_start,
        seq_len,
        x_perm,
        lr_perm,
        positions,
        window_ranges,
        lr_window_side,
        lr_window_ranges,
    })
}

impl TokenLayout {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn window(&self) -> &WindowSpec {
        &self.window
    }

    pub fn anchor(&self) -> Option<&AnchorSpec> {
        self.anchor.as_ref()
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn x_range(&self) -> std::ops::Range<usize> {
        self.x_start..self.lr_start
    }

    pub fn lr_range(&self) -> std::ops::Range<usize> {
        self.lr_start..self.seq_len
    }

    pub fn segment(&self, seq_idx: usize) -> Segment {
        if seq_idx < self.x_start {
            Segment::Text
        } else if seq_idx < self.lr_start {
            Segment::Image
        } else {
            Segment::Guidance
        }
    }

    pub fn position(&self, seq_idx: usize) -> TokenPos {
        self.positions[seq_idx]
    }

    pub fn positions(&self) -> &[TokenPos] {
        &self.positions
    }

    /// Sequence index of the image token at grid cell (x, y).
    pub fn x_seq(&self, x: u32, y: u32) -> usize {
        self.x_perm[(y * self.grid.cols + x) as usize]
    }

    /// Sequence index of the guidance token at cell (m, n) = (row, col).
    pub fn lr_seq(&self, m: u32, n: u32) -> usize {
        let a = self.anchor.expect("layout has no guidance segment");
        self.lr_perm[(m * a.lr_cols + n) as usize]
    }

    pub fn x_perm(&self) -> &[usize] {
        &self.x_perm
    }

    pub fn lr_perm(&self) -> &[usize] {
        &self.lr_perm
    }

    pub fn window_ranges(&self) -> &[std::ops::Range<usize>] {
        &self.window_ranges
    }

    /// Side of the windows partitioning the guidance grid: the image window
    /// side clamped down to the largest power of two dividing both lr axes.
    pub fn lr_window_side(&self) -> u32 {
        self.lr_window_side
    }

    pub fn lr_window_ranges(&self) -> &[std::ops::Range<usize>] {
        &self.lr_window_ranges
    }

    /// Window id containing a given image-segment sequence index.
    pub fn window_of_seq(&self, seq_idx: usize) -> Option<usize> {
        match (self.segment(seq_idx), self.position(seq_idx)) {
            (Segment::Image, TokenPos::Grid { x, y }) => {
                let per_row = (self.grid.cols / self.window.side) as usize;
                Some((y / self.window.side) as usize * per_row + (x / self.window.side) as usize)
            }
            _ => None,
        }
    }

    /// Lr-window id containing a given guidance-segment sequence index.
    pub fn lr_window_of_seq(&self, seq_idx: usize) -> Option<usize> {
        let a = self.anchor?;
        match (self.segment(seq_idx), self.position(seq_idx)) {
            (Segment::Guidance, TokenPos::Grid { x, y }) => {
                let (m, n) = (y / a.ratio, x / a.ratio);
                let per_row = (a.lr_cols / self.lr_window_side) as usize;
                Some(
                    (m / self.lr_window_side) as usize * per_row
                        + (n / self.lr_window_side) as usize,
                )
            }
            _ => None,
        }
    }

    /// Writes the layout as a line-oriented text table:
    /// `seq_idx,segment,grid_x,grid_y,pos_x,pos_y,window_id`.
    /// grid_x/grid_y are cell coordinates in the token's own grid; pos_x and
    /// pos_y are the (scaled) positions fed to the rotary encoding.
    pub fn dump(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "seq_idx,segment,grid_x,grid_y,pos_x,pos_y,window_id")?;
        for i in 0..self.seq_len {
            let seg = self.segment(i);
            match (seg, self.position(i)) {
                (Segment::Text, _) => writeln!(w, "{i},text,-,-,-,-,-")?,
                (Segment::Image, TokenPos::Grid { x, y }) => {
                    let wid = self.window_of_seq(i).expect("image token has a window");
                    writeln!(w, "{i},image,{x},{y},{x},{y},{wid}")?;
                }
                (Segment::Guidance, TokenPos::Grid { x, y }) => {
                    let a = self.anchor.expect("guidance token implies anchor spec");
                    let (m, n) = (y / a.ratio, x / a.ratio);
                    let wid = self.lr_window_of_seq(i).expect("guidance token has a window");
                    writeln!(w, "{i},guidance,{n},{m},{x},{y},{wid}")?;
                }
                (_, TokenPos::Text) => unreachable!("non-text segment with text position"),
            }
        }
        Ok(())
    }
}
