//! Flow-matching training on synthetic guided fields, an Euler ODE sampler,
//! coarse-to-fine resampling across grid resolutions, and checkpoint I/O.
//!
//! Everything here is deterministic given a seed: data sampling, noise, and
//! the kernel all have fixed evaluation order.

use std::io::{Read, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layout::{build_layout, AnchorSpec, GridSpec, TokenLayout, TokenPos, WindowSpec};
use crate::mask::{build_block_mask, BlockMask, InteractionRules};
use crate::mat::{Mat, Real};
use crate::model::{AttentionBackend, ModelConfig, ModelGrads, ModelInputs, TensorId, ToyModel};

/// Which tensors SGD updates. The default trains only the low-rank adapter
/// factors; everything else keeps its initialization bit-for-bit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TrainMode {
    #[default]
    LoraOnly,
    Full,
}

pub fn trainable(mode: TrainMode, id: TensorId) -> bool {
    match mode {
        TrainMode::Full => true,
        TrainMode::LoraOnly => id.is_adapter(),
    }
}

/// One flow-matching training example. The interpolant and its velocity
/// target are fixed at construction:
/// x_t = (1−t)·x0 + t·x1, u_t = x1 − x0.
#[derive(Clone, Debug)]
pub struct FlowMatchBatch<T> {
    pub x0: Mat<T>,
    pub x1: Mat<T>,
    pub t: f64,
    pub x_t: Mat<T>,
    pub u_t: Mat<T>,
    pub lr_tokens: Mat<T>,
    pub text: Vec<usize>,
}

impl<T: Real> FlowMatchBatch<T> {
    pub fn new(x0: Mat<T>, x1: Mat<T>, t: f64, lr_tokens: Mat<T>, text: Vec<usize>) -> Result<Self> {
        if x0.rows() != x1.rows() || x0.cols() != x1.cols() {
            return Err(Error::shape(format!(
                "noise {}x{} vs data {}x{}",
                x0.rows(),
                x0.cols(),
                x1.rows(),
                x1.cols()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::config(format!("flow time must be in [0,1], got {t}")));
        }
        let tt = T::from_f64(t);
        let x_t = x0.scale(T::one() - tt).add(&x1.scale(tt));
        let u_t = x1.sub(&x0);
        Ok(FlowMatchBatch {
            x0,
            x1,
            t,
            x_t,
            u_t,
            lr_tokens,
            text,
        })
    }
}

/// Synthetic fields over the token grid: each mode id maps to a smooth
/// per-channel template; samples add pixel noise. Guidance tokens are the
/// block means of the *clean* template (conditioning is never noised), and
/// the text id names the mode.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    x_cells: Vec<(u32, u32)>,
    lr_cells: Vec<(u32, u32)>,
    grid_rows: u32,
    grid_cols: u32,
    ratio: u32,
    channels: usize,
    modes: usize,
    amplitude: f64,
    noise_std: f64,
}

/// One drawn example: clean-ish data field, its guidance summary, text ids.
#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub x1: Mat<T>,
    pub lr_tokens: Mat<T>,
    pub text: Vec<usize>,
}

fn template_value(mode: usize, ch: usize, xf: f64, yf: f64) -> f64 {
    let freq = 1.0 + (mode % 4) as f64;
    let phase = mode as f64 * 0.7 + ch as f64 * 1.3;
    let diag = if mode % 2 == 0 { 0.5 } else { -0.5 };
    (std::f64::consts::TAU * (freq * xf + diag * yf) + phase).sin()
}

impl SyntheticDataset {
    /// `amplitude` scales the template fields; the larger it is relative to
    /// the unit noise prior, the more of the velocity target is predictable
    /// from conditioning.
    pub fn new(
        layout: &TokenLayout,
        channels: usize,
        modes: usize,
        amplitude: f64,
        noise_std: f64,
    ) -> Result<Self> {
        if channels == 0 || modes == 0 {
            return Err(Error::config("dataset needs at least one channel and one mode"));
        }
        if !(amplitude > 0.0) || !amplitude.is_finite() {
            return Err(Error::config(format!("amplitude must be positive, got {amplitude}")));
        }
        let grid_pos = |i: usize| match layout.position(i) {
            TokenPos::Grid { x, y } => Ok((x, y)),
            TokenPos::Text => Err(Error::config("expected a grid position".to_string())),
        };
        let x_cells = layout.x_range().map(grid_pos).collect::<Result<Vec<_>>>()?;
        let lr_cells = layout.lr_range().map(grid_pos).collect::<Result<Vec<_>>>()?;
        Ok(SyntheticDataset {
            x_cells,
            lr_cells,
            grid_rows: layout.grid().rows(),
            grid_cols: layout.grid().cols(),
            ratio: layout.anchor().map_or(1, |a| a.ratio()),
            channels,
            modes,
            amplitude,
            noise_std,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Piecewise constant over guidance blocks, so each anchor's block mean
    /// equals the template exactly: the conditioning carries the whole
    /// learnable part of the field.
    fn value(&self, mode: usize, ch: usize, x: u32, y: u32) -> f64 {
        let bx = (x / self.ratio) as f64 + 0.5;
        let by = (y / self.ratio) as f64 + 0.5;
        let nx = (self.grid_cols / self.ratio).max(1) as f64;
        let ny = (self.grid_rows / self.ratio).max(1) as f64;
        self.amplitude * template_value(mode, ch, bx / nx, by / ny)
    }

    /// Clean template field for a mode, in layout row order.
    pub fn template<T: Real>(&self, mode: usize) -> Mat<T> {
        Mat::from_fn(self.x_cells.len(), self.channels, |r, c| {
            let (x, y) = self.x_cells[r];
            T::from_f64(self.value(mode, c, x, y))
        })
    }

    /// Block means of the clean template over each guidance cell.
    pub fn guidance<T: Real>(&self, mode: usize) -> Mat<T> {
        let r = self.ratio;
        let inv = 1.0 / (r as f64 * r as f64);
        Mat::from_fn(self.lr_cells.len(), self.channels, |row, c| {
            let (x0, y0) = self.lr_cells[row];
            let mut acc = 0.0;
            for dy in 0..r {
                for dx in 0..r {
                    acc += self.value(mode, c, x0 + dx, y0 + dy);
                }
            }
            T::from_f64(acc * inv)
        })
    }

    /// Draws (mode, noisy field). Draw order is fixed: mode id first, then
    /// one normal per field entry, row-major.
    pub fn sample<T: Real>(&self, rng: &mut impl Rng) -> TrainSample<T> {
        let mode = rng.gen_range(0..self.modes);
        let mut x1: Mat<T> = self.template(mode);
        let noise = Mat::<T>::randn(x1.rows(), x1.cols(), self.noise_std, rng);
        x1.add_assign(&noise);
        TrainSample {
            x1,
            lr_tokens: self.guidance(mode),
            text: vec![mode],
        }
    }
}

/// Mean-squared error of the velocity prediction against the batch target,
/// plus analytic gradients for every tensor.
pub fn flow_match_loss<T: Real>(
    model: &ToyModel<T>,
    layout: &TokenLayout,
    backend: AttentionBackend<'_>,
    batch: &FlowMatchBatch<T>,
) -> Result<(f64, ModelGrads<T>)> {
    let inputs = ModelInputs {
        x_tokens: &batch.x_t,
        lr_tokens: &batch.lr_tokens,
        text: &batch.text,
        t: batch.t,
    };
    let (pred, cache) = model.forward_cached(layout, backend, &inputs)?;
    let diff = pred.sub(&batch.u_t);
    let n = (diff.rows() * diff.cols()) as f64;
    let loss = diff.as_slice().iter().map(|&v| Real::to_f64(v).powi(2)).sum::<f64>() / n;
    let d_pred = diff.scale(T::from_f64(2.0 / n));
    let grads = model.backward(&cache, backend, &d_pred)?;
    Ok((loss, grads))
}

/// Loss only, via the uncached forward (usable at any sequence length; this
/// is what finite differencing perturbs).
pub fn flow_match_loss_value<T: Real>(
    model: &ToyModel<T>,
    layout: &TokenLayout,
    backend: AttentionBackend<'_>,
    batch: &FlowMatchBatch<T>,
) -> Result<f64> {
    let inputs = ModelInputs {
        x_tokens: &batch.x_t,
        lr_tokens: &batch.lr_tokens,
        text: &batch.text,
        t: batch.t,
    };
    let pred = model.forward(layout, backend, &inputs)?;
    let diff = pred.sub(&batch.u_t);
    let n = (diff.rows() * diff.cols()) as f64;
    Ok(diff.as_slice().iter().map(|&v| Real::to_f64(v).powi(2)).sum::<f64>() / n)
}

/// One plain SGD update over the tensors the mode allows.
pub fn sgd_step<T: Real>(model: &mut ToyModel<T>, grads: &ModelGrads<T>, lr: f64, mode: TrainMode) {
    let lr_t = T::from_f64(lr);
    for id in model.tensor_ids() {
        if !trainable(mode, id) {
            continue;
        }
        let g = grads.tensor(id).clone();
        let dst = model.tensor_mut(id);
        for (d, &gv) in dst.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *d = *d - lr_t * gv;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub mode: TrainMode,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
}

impl TrainReport {
    /// `step, loss, grad_norm, wall_ms` per line.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "step,loss,grad_norm,wall_ms")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.step, r.loss, r.grad_norm, r.wall_ms)?;
        }
        Ok(())
    }

    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let slice = &self.rows[from.min(self.rows.len())..to.min(self.rows.len())];
        if slice.is_empty() {
            return f64::NAN;
        }
        slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64
    }
}

/// SGD on flow matching. Per step the RNG draws, in order: the dataset
/// sample, the flow time, the noise field — so runs with equal seeds match
/// bit for bit.
pub fn train<T: Real>(
    model: &mut ToyModel<T>,
    layout: &TokenLayout,
    backend: AttentionBackend<'_>,
    data: &SyntheticDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(Error::config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_x = layout.x_range().len();
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let started = Instant::now();
        let sample = data.sample::<T>(&mut rng);
        let t: f64 = rng.gen();
        let x0 = Mat::<T>::randn(n_x, data.channels(), 1.0, &mut rng);
        let batch = FlowMatchBatch::new(x0, sample.x1, t, sample.lr_tokens, sample.text)?;
        let (loss, grads) = flow_match_loss(model, layout, backend, &batch)?;
        let grad_norm = grads.norm(model, |id| trainable(cfg.mode, id));
        sgd_step(model, &grads, cfg.lr, cfg.mode);
        rows.push(TrainRow {
            step,
            loss,
            grad_norm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainReport { rows })
}

/// Explicit Euler integration of dx/dt = velocity(x, t) from t=0 to t=1 in
/// equal steps: x ← x + Δt·velocity(x, k·Δt).
pub fn euler_sample_with<T: Real>(
    x_init: &Mat<T>,
    steps: usize,
    mut velocity: impl FnMut(&Mat<T>, f64) -> Result<Mat<T>>,
) -> Result<Mat<T>> {
    if steps == 0 {
        return Err(Error::config("sampler needs at least one step"));
    }
    let mut x = x_init.clone();
    let dt = T::from_f64(1.0 / steps as f64);
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = velocity(&x, t)?;
        if v.rows() != x.rows() || v.cols() != x.cols() {
            return Err(Error::shape(format!(
                "velocity {}x{} vs state {}x{}",
                v.rows(),
                v.cols(),
                x.rows(),
                x.cols()
            )));
        }
        x.add_assign(&v.scale(dt));
    }
    Ok(x)
}

/// Draws seeded gaussian noise and integrates the model's velocity field.
pub fn euler_sample<T: Real>(
    model: &ToyModel<T>,
    layout: &TokenLayout,
    backend: AttentionBackend<'_>,
    lr_tokens: &Mat<T>,
    text: &[usize],
    steps: usize,
    seed: u64,
) -> Result<Mat<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Mat::<T>::randn(layout.x_range().len(), model.cfg.channels, 1.0, &mut rng);
    euler_sample_with(&x0, steps, |x, t| {
        model.forward(
            layout,
            backend,
            &ModelInputs {
                x_tokens: x,
                lr_tokens,
                text,
                t,
            },
        )
    })
}

/// Coarse-to-fine sampling schedule: square grids whose sides must each be
/// `ratio`× the previous one.
#[derive(Clone, Debug)]
pub struct UpscaleConfig {
    pub sides: Vec<u32>,
    pub ratio: u32,
    pub window: WindowSpec,
    pub rules: InteractionRules,
    pub text: Vec<usize>,
    pub steps_per_level: usize,
    pub seed: u64,
    pub q_tile: usize,
    pub k_tile: usize,
}

/// Mask geometry observed at one level of the schedule.
#[derive(Clone, Copy, Debug)]
pub struct LevelStats {
    pub grid_side: u32,
    pub seq_len: usize,
    pub guidance_len: usize,
    pub min_x_keys: u64,
    pub max_x_keys: u64,
}

/// Samples level by level, feeding each level's output rows directly in as
/// the next level's guidance tokens. Both are laid out by the same curve
/// over the same grid dimensions, so row i of the coarse output *is*
/// guidance row i of the finer level — no reshuffle.
pub fn recursive_upscale<T: Real>(
    model: &ToyModel<T>,
    cfg: &UpscaleConfig,
) -> Result<(Mat<T>, Vec<LevelStats>)> {
    if cfg.sides.is_empty() {
        return Err(Error::config("upscale schedule needs at least one level"));
    }
    if cfg.ratio < 2 {
        return Err(Error::config(format!("upscale ratio must be >= 2, got {}", cfg.ratio)));
    }
    let mut guidance = Mat::<T>::zeros(0, model.cfg.channels);
    let mut prev_side: Option<u32> = None;
    let mut stats = Vec::with_capacity(cfg.sides.len());
    let mut x = Mat::<T>::zeros(0, model.cfg.channels);
    for (level, &side) in cfg.sides.iter().enumerate() {
        let anchor = match prev_side {
            None => None,
            Some(p) => {
                if p * cfg.ratio != side {
                    return Err(Error::config(format!(
                        "level {level} grid side {side} is not {0}x the previous side {p}",
                        cfg.ratio
                    )));
                }
                Some(AnchorSpec::new(p, p, cfg.ratio)?)
            }
        };
        let grid = GridSpec::new(side, side, 1)?;
        let layout = build_layout(&grid, &cfg.window, anchor.as_ref(), cfg.text.len())?;
        let block: BlockMask = build_block_mask(&layout, &cfg.rules, cfg.q_tile, cfg.k_tile)?;
        let xr = layout.x_range();
        let (mut min_keys, mut max_keys) = (u64::MAX, 0u64);
        for q in xr {
            let c = block.row_allowed(q);
            min_keys = min_keys.min(c);
            max_keys = max_keys.max(c);
        }
        stats.push(LevelStats {
            grid_side: side,
            seq_len: layout.seq_len(),
            guidance_len: layout.lr_range().len(),
            min_x_keys: min_keys,
            max_x_keys: max_keys,
        });
        x = euler_sample(
            model,
            &layout,
            AttentionBackend::Tiled(&block),
            &guidance,
            &cfg.text,
            cfg.steps_per_level,
            cfg.seed.wrapping_add(level as u64),
        )?;
        guidance = x.clone();
        prev_side = Some(side);
    }
    Ok((x, stats))
}

// --- Checkpoint I/O -------------------------------------------------------
//
// Layout (all integers little-endian):
//   magic "MOSACKPT" | version u32 | precision_bits u32
//   d_model, heads, vocab, channels, lora_rank, blocks: u64 each
//   rope_base f64 | tensor_count u64
//   per tensor: name_len u32, name bytes, rows u64, cols u64, values f64...
// Values are stored widened to f64 (exact for f32), so a round trip
// reproduces every tensor bit for bit.

const CKPT_MAGIC: &[u8; 8] = b"MOSACKPT";
const CKPT_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn read_exact_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact_array(r)?))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_exact_array(r)?))
}

pub fn save_checkpoint<T: Real>(model: &ToyModel<T>, w: &mut impl Write) -> Result<()> {
    w.write_all(CKPT_MAGIC)?;
    write_u32(w, CKPT_VERSION)?;
    write_u32(w, T::PRECISION_BITS)?;
    let c = &model.cfg;
    for v in [c.d_model, c.heads, c.vocab, c.channels, c.lora_rank, c.blocks] {
        write_u64(w, v as u64)?;
    }
    write_f64(w, c.rope_base)?;
    let ids = model.tensor_ids();
    write_u64(w, ids.len() as u64)?;
    for id in ids {
        let name = id.name();
        write_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        let m = model.tensor(id);
        write_u64(w, m.rows() as u64)?;
        write_u64(w, m.cols() as u64)?;
        for &v in m.as_slice() {
            write_f64(w, Real::to_f64(v))?;
        }
    }
    Ok(())
}

pub fn load_checkpoint<T: Real>(r: &mut impl Read) -> Result<ToyModel<T>> {
    let magic: [u8; 8] = read_exact_array(r)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != CKPT_VERSION {
        return Err(Error::format(format!(
            "checkpoint version {version} unsupported (expected {CKPT_VERSION})"
        )));
    }
    let bits = read_u32(r)?;
    if bits != T::PRECISION_BITS {
        return Err(Error::format(format!(
            "checkpoint precision is {bits}-bit, requested {}-bit",
            T::PRECISION_BITS
        )));
    }
    let mut dims = [0u64; 6];
    for d in &mut dims {
        *d = read_u64(r)?;
    }
    let rope_base = read_f64(r)?;
    let cfg = ModelConfig {
        d_model: dims[0] as usize,
        heads: dims[1] as usize,
        vocab: dims[2] as usize,
        channels: dims[3] as usize,
        lora_rank: dims[4] as usize,
        blocks: dims[5] as usize,
        rope_base,
    };
    cfg.validate()?;
    let mut model = ToyModel::<T>::zeroed(cfg)?;
    let ids = model.tensor_ids();
    let count = read_u64(r)? as usize;
    if count != ids.len() {
        return Err(Error::format(format!(
            "checkpoint has {count} tensors, model needs {}",
            ids.len()
        )));
    }
    for id in ids {
        let name_len = read_u32(r)? as usize;
        if name_len > 256 {
            return Err(Error::format(format!("tensor name length {name_len} implausible")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("tensor name is not utf-8"))?;
        if name != id.name() {
            return Err(Error::format(format!(
                "tensor \"{name}\" out of order (expected \"{}\")",
                id.name()
            )));
        }
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        let dst = model.tensor_mut(id);
        if rows != dst.rows() || cols != dst.cols() {
            return Err(Error::format(format!(
                "tensor \"{name}\" is {rows}x{cols}, expected {}x{}",
                dst.rows(),
                dst.cols()
            )));
        }
        for v in dst.as_mut_slice() {
            *v = T::from_f64(read_f64(r)?);
        }
    }
    Ok(model)
}
