//! A small guided flow-matching transformer over joint
//! [text; image; guidance] sequences.
//!
//! The image path uses base projections; the guidance path uses the same
//! base weights plus low-rank adapters, so adapter training specializes how
//! guidance is read without touching what the image path learned. Gradients
//! are computed analytically for every tensor; training modes decide which
//! tensors actually receive updates.

use std::ops::Range;

use rand::Rng;

use crate::attention::{dense_attention, tiled_attention, AttentionInputs};
use crate::error::{Error, Result};
use crate::layout::{Segment, TokenLayout, TokenPos};
use crate::mask::{BlockMask, TokenMask};
use crate::mat::{Mat, Real};
use crate::rope::{rotate, rotate_inverse, RopeParams, DEFAULT_ROPE_BASE};

/// Largest sequence the cached forward (and therefore backward) accepts.
/// Backward materializes per-head S×S weight matrices; sampling at larger S
/// uses the uncached forward.
pub const BACKWARD_CAP: usize = 1024;

/// Low-rank delta on top of a frozen base projection. `up` starts at zero,
/// so a fresh adapter is exactly invisible.
#[derive(Clone, Debug)]
pub struct LoraAdapter<T> {
    down: Mat<T>,
    up: Mat<T>,
    scaling: T,
}

impl<T: Real> LoraAdapter<T> {
    /// `down` is d_in×rank gaussian, `up` rank×d_out zeros, scaling = α/rank
    /// with α fixed to the rank (so scaling is exactly 1).
    pub fn init(d_in: usize, d_out: usize, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::config(format!(
                "adapter rank must be in 1..={}, got {rank}",
                d_in.min(d_out)
            )));
        }
        Ok(LoraAdapter {
            down: Mat::randn(d_in, rank, 1.0 / (d_in as f64).sqrt(), rng),
            up: Mat::zeros(rank, d_out),
            scaling: T::one(),
        })
    }

    pub fn rank(&self) -> usize {
        self.down.cols()
    }

    pub fn scaling(&self) -> T {
        self.scaling
    }

    pub fn down(&self) -> &Mat<T> {
        &self.down
    }

    pub fn up(&self) -> &Mat<T> {
        &self.up
    }

    /// The dense delta this adapter adds to its base: scaling·down·up.
    pub fn delta(&self) -> Mat<T> {
        self.down.matmul(&self.up).scale(self.scaling)
    }

    fn cast<U: Real>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            down: self.down.cast(),
            up: self.up.cast(),
            scaling: U::from_f64(self.scaling.to_f64()),
        }
    }
}

/// input · (base + scaling·down·up), computed without materializing the
/// delta. A zero `up` contributes an exact zero term.
pub fn lora_project<T: Real>(
    base: &Mat<T>,
    adapter: &LoraAdapter<T>,
    input: &Mat<T>,
) -> Result<Mat<T>> {
    if input.cols() != base.rows() || adapter.down.rows() != base.rows() || adapter.up.cols() != base.cols() {
        return Err(Error::shape(format!(
            "lora_project: input {}x{}, base {}x{}, adapter {}x{} / {}x{}",
            input.rows(),
            input.cols(),
            base.rows(),
            base.cols(),
            adapter.down.rows(),
            adapter.down.cols(),
            adapter.up.rows(),
            adapter.up.cols()
        )));
    }
    let mut out = input.matmul(base);
    let delta = input.matmul(&adapter.down).matmul(&adapter.up).scale(adapter.scaling);
    out.add_assign(&delta);
    Ok(out)
}

/// One joint-attention block: separate text and image projections, adapters
/// on the guidance read of the image projections, and an output projection.
#[derive(Clone, Debug)]
pub struct MmaBlockParams<T> {
    pub q_text: Mat<T>,
    pub k_text: Mat<T>,
    pub v_text: Mat<T>,
    pub q_img: Mat<T>,
    pub k_img: Mat<T>,
    pub v_img: Mat<T>,
    pub adapter_q: LoraAdapter<T>,
    pub adapter_k: LoraAdapter<T>,
    pub adapter_v: LoraAdapter<T>,
    pub w_out: Mat<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub vocab: usize,
    pub channels: usize,
    pub lora_rank: usize,
    pub blocks: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            heads: 4,
            vocab: 8,
            channels: 2,
            lora_rank: 16,
            blocks: 2,
            rope_base: DEFAULT_ROPE_BASE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.vocab == 0 || self.channels == 0 || self.blocks == 0 {
            return Err(Error::config("model dimensions must all be nonzero"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must divide into {} heads",
                self.d_model, self.heads
            )));
        }
        if self.head_dim() % 4 != 0 {
            return Err(Error::config(format!(
                "head dim {} must be a multiple of 4 for two-axis rotation",
                self.head_dim()
            )));
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_model {
            return Err(Error::config(format!(
                "lora rank must be in 1..={}, got {}",
                self.d_model, self.lora_rank
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Addresses of every learnable tensor, in checkpoint order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockTensor {
    QText,
    KText,
    VText,
    QImg,
    KImg,
    VImg,
    QDown,
    QUp,
    KDown,
    KUp,
    VDown,
    VUp,
    WOut,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorId {
    Embed,
    InProj,
    TimeVec,
    OutProj,
    Block(usize, BlockTensor),
}

impl TensorId {
    pub fn name(self) -> String {
        match self {
            TensorId::Embed => "embed".into(),
            TensorId::InProj => "in_proj".into(),
            TensorId::TimeVec => "time_vec".into(),
            TensorId::OutProj => "out_proj".into(),
            TensorId::Block(b, t) => {
                let leaf = match t {
                    BlockTensor::QText => "q_text",
                    BlockTensor::KText => "k_text",
                    BlockTensor::VText => "v_text",
                    BlockTensor::QImg => "q_img",
                    BlockTensor::KImg => "k_img",
                    BlockTensor::VImg => "v_img",
                    BlockTensor::QDown => "adapter_q.down",
                    BlockTensor::QUp => "adapter_q.up",
                    BlockTensor::KDown => "adapter_k.down",
                    BlockTensor::KUp => "adapter_k.up",
                    BlockTensor::VDown => "adapter_v.down",
                    BlockTensor::VUp => "adapter_v.up",
                    BlockTensor::WOut => "w_out",
                };
                format!("block{b}.{leaf}")
            }
        }
    }

    /// True for the low-rank adapter factors (the only tensors trained in
    /// adapter-only mode).
    pub fn is_adapter(self) -> bool {
        matches!(
            self,
            TensorId::Block(
                _,
                BlockTensor::QDown
                    | BlockTensor::QUp
                    | BlockTensor::KDown
                    | BlockTensor::KUp
                    | BlockTensor::VDown
                    | BlockTensor::VUp
            )
        )
    }

    /// True for the base attention projections the adapter contract freezes.
    pub fn is_base_projection(self) -> bool {
        matches!(
            self,
            TensorId::Block(
                _,
                BlockTensor::QText
                    | BlockTensor::KText
                    | BlockTensor::VText
                    | BlockTensor::QImg
                    | BlockTensor::KImg
                    | BlockTensor::VImg
            )
        )
    }
}

const BLOCK_TENSORS: [BlockTensor; 13] = [
    BlockTensor::QText,
    BlockTensor::KText,
    BlockTensor::VText,
    BlockTensor::QImg,
    BlockTensor::KImg,
    BlockTensor::VImg,
    BlockTensor::QDown,
    BlockTensor::QUp,
    BlockTensor::KDown,
    BlockTensor::KUp,
    BlockTensor::VDown,
    BlockTensor::VUp,
    BlockTensor::WOut,
];

/// The toy network: token embedding, linear token in-projection with a time
/// direction, a stack of joint-attention blocks, and a linear velocity head
/// over image rows.
#[derive(Clone, Debug)]
pub struct ToyModel<T> {
    pub cfg: ModelConfig,
    pub embed: Mat<T>,
    pub in_proj: Mat<T>,
    pub time_vec: Mat<T>,
    pub out_proj: Mat<T>,
    pub blocks: Vec<MmaBlockParams<T>>,
    rope: RopeParams,
}

impl<T: Real> ToyModel<T> {
    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let proj_std = 1.0 / (d as f64).sqrt();
        let embed = Mat::randn(cfg.vocab, d, 1.0, rng);
        let in_proj = Mat::randn(cfg.channels, d, 1.0 / (cfg.channels as f64).sqrt(), rng);
        let time_vec = Mat::randn(1, d, 1.0, rng);
        let out_proj = Mat::randn(d, cfg.channels, proj_std, rng);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            blocks.push(MmaBlockParams {
                q_text: Mat::randn(d, d, proj_std, rng),
                k_text: Mat::randn(d, d, proj_std, rng),
                v_text: Mat::randn(d, d, proj_std, rng),
                q_img: Mat::randn(d, d, proj_std, rng),
                k_img: Mat::randn(d, d, proj_std, rng),
                v_img: Mat::randn(d, d, proj_std, rng),
                adapter_q: LoraAdapter::init(d, d, cfg.lora_rank, rng)?,
                adapter_k: LoraAdapter::init(d, d, cfg.lora_rank, rng)?,
                adapter_v: LoraAdapter::init(d, d, cfg.lora_rank, rng)?,
                w_out: Mat::randn(d, d, proj_std, rng),
            });
        }
        Ok(ToyModel {
            cfg,
            embed,
            in_proj,
            time_vec,
            out_proj,
            blocks,
            rope: RopeParams::new(cfg.head_dim(), cfg.rope_base)?,
        })
    }

    /// All tensors zero; checkpoint loading fills them in afterwards.
    pub fn zeroed(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let r = cfg.lora_rank;
        let zero_adapter = || LoraAdapter {
            down: Mat::zeros(d, r),
            up: Mat::zeros(r, d),
            scaling: T::one(),
        };
        Ok(ToyModel {
            cfg,
            embed: Mat::zeros(cfg.vocab, d),
            in_proj: Mat::zeros(cfg.channels, d),
            time_vec: Mat::zeros(1, d),
            out_proj: Mat::zeros(d, cfg.channels),
            blocks: (0..cfg.blocks)
                .map(|_| MmaBlockParams {
                    q_text: Mat::zeros(d, d),
                    k_text: Mat::zeros(d, d),
                    v_text: Mat::zeros(d, d),
                    q_img: Mat::zeros(d, d),
                    k_img: Mat::zeros(d, d),
                    v_img: Mat::zeros(d, d),
                    adapter_q: zero_adapter(),
                    adapter_k: zero_adapter(),
                    adapter_v: zero_adapter(),
                    w_out: Mat::zeros(d, d),
                })
                .collect(),
            rope: RopeParams::new(cfg.head_dim(), cfg.rope_base)?,
        })
    }

    pub fn rope(&self) -> &RopeParams {
        &self.rope
    }

    /// Same parameters at a different precision (f32 values widen exactly).
    pub fn cast<U: Real>(&self) -> ToyModel<U> {
        ToyModel {
            cfg: self.cfg,
            embed: self.embed.cast(),
            in_proj: self.in_proj.cast(),
            time_vec: self.time_vec.cast(),
            out_proj: self.out_proj.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| MmaBlockParams {
                    q_text: b.q_text.cast(),
                    k_text: b.k_text.cast(),
                    v_text: b.v_text.cast(),
                    q_img: b.q_img.cast(),
                    k_img: b.k_img.cast(),
                    v_img: b.v_img.cast(),
                    adapter_q: b.adapter_q.cast(),
                    adapter_k: b.adapter_k.cast(),
                    adapter_v: b.adapter_v.cast(),
                    w_out: b.w_out.cast(),
                })
                .collect(),
            rope: self.rope.clone(),
        }
    }

    pub fn tensor_ids(&self) -> Vec<TensorId> {
        let mut ids = vec![TensorId::Embed, TensorId::InProj, TensorId::TimeVec, TensorId::OutProj];
        for b in 0..self.blocks.len() {
            for t in BLOCK_TENSORS {
                ids.push(TensorId::Block(b, t));
            }
        }
        ids
    }

    pub fn tensor(&self, id: TensorId) -> &Mat<T> {
        match id {
            TensorId::Embed => &self.embed,
            TensorId::InProj => &self.in_proj,
            TensorId::TimeVec => &self.time_vec,
            TensorId::OutProj => &self.out_proj,
            TensorId::Block(b, t) => {
                let blk = &self.blocks[b];
                match t {
                    BlockTensor::QText => &blk.q_text,
                    BlockTensor::KText => &blk.k_text,
                    BlockTensor::VText => &blk.v_text,
                    BlockTensor::QImg => &blk.q_img,
                    BlockTensor::KImg => &blk.k_img,
                    BlockTensor::VImg => &blk.v_img,
                    BlockTensor::QDown => &blk.adapter_q.down,
                    BlockTensor::QUp => &blk.adapter_q.up,
                    BlockTensor::KDown => &blk.adapter_k.down,
                    BlockTensor::KUp => &blk.adapter_k.up,
                    BlockTensor::VDown => &blk.adapter_v.down,
                    BlockTensor::VUp => &blk.adapter_v.up,
                    BlockTensor::WOut => &blk.w_out,
                }
            }
        }
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut Mat<T> {
        match id {
            TensorId::Embed => &mut self.embed,
            TensorId::InProj => &mut self.in_proj,
            TensorId::TimeVec => &mut self.time_vec,
            TensorId::OutProj => &mut self.out_proj,
            TensorId::Block(b, t) => {
                let blk = &mut self.blocks[b];
                match t {
                    BlockTensor::QText => &mut blk.q_text,
                    BlockTensor::KText => &mut blk.k_text,
                    BlockTensor::VText => &mut blk.v_text,
                    BlockTensor::QImg => &mut blk.q_img,
                    BlockTensor::KImg => &mut blk.k_img,
                    BlockTensor::VImg => &mut blk.v_img,
                    BlockTensor::QDown => &mut blk.adapter_q.down,
                    BlockTensor::QUp => &mut blk.adapter_q.up,
                    BlockTensor::KDown => &mut blk.adapter_k.down,
                    BlockTensor::KUp => &mut blk.adapter_k.up,
                    BlockTensor::VDown => &mut blk.adapter_v.down,
                    BlockTensor::VUp => &mut blk.adapter_v.up,
                    BlockTensor::WOut => &mut blk.w_out,
                }
            }
        }
    }
}

/// Which attention implementation carries the forward/backward pass. The
/// dense variant exists so training can be cross-checked against the oracle.
#[derive(Clone, Copy)]
pub enum AttentionBackend<'a> {
    Tiled(&'a BlockMask),
    Dense(&'a TokenMask),
}

impl<'a> AttentionBackend<'a> {
    fn seq_len(&self) -> usize {
        match self {
            AttentionBackend::Tiled(b) => b.seq_len(),
            AttentionBackend::Dense(m) => m.seq_len(),
        }
    }

    fn allowed(&self, q: usize, k: usize) -> bool {
        match self {
            AttentionBackend::Tiled(b) => b.expand_bit(q, k),
            AttentionBackend::Dense(m) => m.get(q, k),
        }
    }
}

/// Per-row meaning of a joint sequence: segment labels and rotary positions.
/// Derived from a layout for the standard path; tests may permute it.
#[derive(Clone, Debug)]
pub struct SequenceSpec {
    pub segments: Vec<Segment>,
    pub positions: Vec<TokenPos>,
}

impl SequenceSpec {
    pub fn from_layout(layout: &TokenLayout) -> Self {
        let s = layout.seq_len();
        SequenceSpec {
            segments: (0..s).map(|i| layout.segment(i)).collect(),
            positions: layout.positions().to_vec(),
        }
    }

    fn rows_of(&self, seg: Segment) -> Vec<usize> {
        (0..self.segments.len()).filter(|&i| self.segments[i] == seg).collect()
    }
}

/// One token batch: noisy image tokens, clean guidance tokens, text ids and
/// the diffusion time. Token rows follow the layout's sequence order.
#[derive(Clone, Debug)]
pub struct ModelInputs<'a, T> {
    pub x_tokens: &'a Mat<T>,
    pub lr_tokens: &'a Mat<T>,
    pub text: &'a [usize],
    pub t: f64,
}

fn gather_rows<T: Real>(m: &Mat<T>, idx: &[usize]) -> Mat<T> {
    let mut out = Mat::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

fn scatter_add_rows<T: Real>(dst: &mut Mat<T>, idx: &[usize], src: &Mat<T>) {
    for (r, &i) in idx.iter().enumerate() {
        for (d, &s) in dst.row_mut(i).iter_mut().zip(src.row(r)) {
            *d = *d + s;
        }
    }
}

fn cols_of<T: Real>(m: &Mat<T>, r: Range<usize>) -> Mat<T> {
    Mat::from_fn(m.rows(), r.len(), |i, j| m.get(i, r.start + j))
}

fn set_cols<T: Real>(dst: &mut Mat<T>, start: usize, src: &Mat<T>) {
    for i in 0..src.rows() {
        for j in 0..src.cols() {
            dst.set(i, start + j, src.get(i, j));
        }
    }
}

/// Per-block activations kept for the backward pass.
struct BlockCache<T> {
    h_in: Mat<T>,
    q_rot: Vec<Mat<T>>,
    k_rot: Vec<Mat<T>>,
    v_heads: Vec<Mat<T>>,
    attn_out: Mat<T>,
}

/// Everything backward needs, captured by `forward_cached`.
pub struct ForwardCache<T> {
    spec: SequenceSpec,
    x_tokens: Mat<T>,
    lr_tokens: Mat<T>,
    text: Vec<usize>,
    t: f64,
    blocks: Vec<BlockCache<T>>,
    h_final: Mat<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn h_final(&self) -> &Mat<T> {
        &self.h_final
    }
}

/// Gradients with the same shapes as the model tensors.
#[derive(Clone, Debug)]
pub struct ModelGrads<T> {
    pub embed: Mat<T>,
    pub in_proj: Mat<T>,
    pub time_vec: Mat<T>,
    pub out_proj: Mat<T>,
    pub blocks: Vec<BlockGrads<T>>,
}

#[derive(Clone, Debug)]
pub struct BlockGrads<T> {
    pub q_text: Mat<T>,
    pub k_text: Mat<T>,
    pub v_text: Mat<T>,
    pub q_img: Mat<T>,
    pub k_img: Mat<T>,
    pub v_img: Mat<T>,
    pub q_down: Mat<T>,
    pub q_up: Mat<T>,
    pub k_down: Mat<T>,
    pub k_up: Mat<T>,
    pub v_down: Mat<T>,
    pub v_up: Mat<T>,
    pub w_out: Mat<T>,
}

impl<T: Real> ModelGrads<T> {
    pub fn zeros_like(model: &ToyModel<T>) -> Self {
        let zeros = |m: &Mat<T>| Mat::zeros(m.rows(), m.cols());
        ModelGrads {
            embed: zeros(&model.embed),
            in_proj: zeros(&model.in_proj),
            time_vec: zeros(&model.time_vec),
            out_proj: zeros(&model.out_proj),
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    q_text: zeros(&b.q_text),
                    k_text: zeros(&b.k_text),
                    v_text: zeros(&b.v_text),
                    q_img: zeros(&b.q_img),
                    k_img: zeros(&b.k_img),
                    v_img: zeros(&b.v_img),
                    q_down: zeros(&b.adapter_q.down),
                    q_up: zeros(&b.adapter_q.up),
                    k_down: zeros(&b.adapter_k.down),
                    k_up: zeros(&b.adapter_k.up),
                    v_down: zeros(&b.adapter_v.down),
                    v_up: zeros(&b.adapter_v.up),
                    w_out: zeros(&b.w_out),
                })
                .collect(),
        }
    }

    pub fn tensor(&self, id: TensorId) -> &Mat<T> {
        match id {
            TensorId::Embed => &self.embed,
            TensorId::InProj => &self.in_proj,
            TensorId::TimeVec => &self.time_vec,
            TensorId::OutProj => &self.out_proj,
            TensorId::Block(b, t) => {
                let blk = &self.blocks[b];
                match t {
                    BlockTensor::QText => &blk.q_text,
                    BlockTensor::KText => &blk.k_text,
                    BlockTensor::VText => &blk.v_text,
                    BlockTensor::QImg => &blk.q_img,
                    BlockTensor::KImg => &blk.k_img,
                    BlockTensor::VImg => &blk.v_img,
                    BlockTensor::QDown => &blk.q_down,
                    BlockTensor::QUp => &blk.q_up,
                    BlockTensor::KDown => &blk.k_down,
                    BlockTensor::KUp => &blk.k_up,
                    BlockTensor::VDown => &blk.v_down,
                    BlockTensor::VUp => &blk.v_up,
                    BlockTensor::WOut => &blk.w_out,
                }
            }
        }
    }

    /// L2 norm over the tensors `keep` selects.
    pub fn norm(&self, model: &ToyModel<T>, keep: impl Fn(TensorId) -> bool) -> f64 {
        let mut sq = 0.0;
        for id in model.tensor_ids() {
            if keep(id) {
                let n = self.tensor(id).frob_norm();
                sq += n * n;
            }
        }
        sq.sqrt()
    }
}

impl<T: Real> ToyModel<T> {
    fn check_inputs(&self, spec: &SequenceSpec, inputs: &ModelInputs<'_, T>) -> Result<()> {
        let n_text = spec.segments.iter().filter(|s| **s == Segment::Text).count();
        let n_x = spec.segments.iter().filter(|s| **s == Segment::Image).count();
        let n_lr = spec.segments.iter().filter(|s| **s == Segment::Guidance).count();
        if inputs.text.len() != n_text {
            return Err(Error::shape(format!(
                "{} text ids for {n_text} text rows",
                inputs.text.len()
            )));
        }
        if inputs.x_tokens.rows() != n_x || inputs.x_tokens.cols() != self.cfg.channels {
            return Err(Error::shape(format!(
                "image tokens {}x{} vs {n_x} rows x {} channels",
                inputs.x_tokens.rows(),
                inputs.x_tokens.cols(),
                self.cfg.channels
            )));
        }
        if inputs.lr_tokens.rows() != n_lr || (n_lr > 0 && inputs.lr_tokens.cols() != self.cfg.channels) {
            return Err(Error::shape(format!(
                "guidance tokens {}x{} vs {n_lr} rows x {} channels",
                inputs.lr_tokens.rows(),
                inputs.lr_tokens.cols(),
                self.cfg.channels
            )));
        }
        for &id in inputs.text {
            if id >= self.cfg.vocab {
                return Err(Error::OutOfRange {
                    what: "vocab id",
                    index: id as u64,
                    bound: self.cfg.vocab as u64,
                });
            }
        }
        if !(0.0..=1.0).contains(&inputs.t) {
            return Err(Error::config(format!("time must be in [0,1], got {}", inputs.t)));
        }
        Ok(())
    }

    /// Initial hidden states: embedded text, projected image tokens shifted
    /// along the time direction, and projected (clean) guidance tokens.
    pub fn embed_sequence(&self, spec: &SequenceSpec, inputs: &ModelInputs<'_, T>) -> Result<Mat<T>> {
        self.check_inputs(spec, inputs)?;
        let d = self.cfg.d_model;
        let mut h = Mat::zeros(spec.segments.len(), d);
        let t = T::from_f64(inputs.t);
        let (mut xi, mut li, mut ti) = (0usize, 0usize, 0usize);
        for (row, seg) in spec.segments.iter().enumerate() {
            match seg {
                Segment::Text => {
                    h.row_mut(row).copy_from_slice(self.embed.row(inputs.text[ti]));
                    ti += 1;
                }
                Segment::Image => {
                    let proj = project_row(inputs.x_tokens.row(xi), &self.in_proj);
                    for (e, (p, tv)) in proj.iter().zip(self.time_vec.row(0)).enumerate() {
                        h.set(row, e, *p + t * *tv);
                    }
                    xi += 1;
                }
                Segment::Guidance => {
                    let proj = project_row(inputs.lr_tokens.row(li), &self.in_proj);
                    h.row_mut(row).copy_from_slice(&proj);
                    li += 1;
                }
            }
        }
        Ok(h)
    }

    /// Runs the block stack on prepared hidden states.
    pub fn forward_states(
        &self,
        h0: &Mat<T>,
        spec: &SequenceSpec,
        backend: AttentionBackend<'_>,
    ) -> Result<Mat<T>> {
        Ok(self.run_blocks(h0, spec, backend, false)?.0)
    }

    /// Velocity prediction for the image rows of a layout-ordered sequence.
    pub fn forward(
        &self,
        layout: &TokenLayout,
        backend: AttentionBackend<'_>,
        inputs: &ModelInputs<'_, T>,
    ) -> Result<Mat<T>> {
        let spec = SequenceSpec::from_layout(layout);
        let h0 = self.embed_sequence(&spec, inputs)?;
        let h = self.forward_states(&h0, &spec, backend)?;
        let hx = gather_rows(&h, &layout.x_range().collect::<Vec<_>>());
        Ok(hx.matmul(&self.out_proj))
    }

    /// Forward pass that keeps the activations backward needs. Capped at
    /// [`BACKWARD_CAP`] rows because backward materializes S×S weights.
    pub fn forward_cached(
        &self,
        layout: &TokenLayout,
        backend: AttentionBackend<'_>,
        inputs: &ModelInputs<'_, T>,
    ) -> Result<(Mat<T>, ForwardCache<T>)> {
        let s = layout.seq_len();
        if s > BACKWARD_CAP {
            return Err(Error::OracleCap { len: s, cap: BACKWARD_CAP });
        }
        let spec = SequenceSpec::from_layout(layout);
        let h0 = self.embed_sequence(&spec, inputs)?;
        let (h_final, blocks) = self.run_blocks(&h0, &spec, backend, true)?;
        let hx = gather_rows(&h_final, &layout.x_range().collect::<Vec<_>>());
        let velocity = hx.matmul(&self.out_proj);
        let cache = ForwardCache {
            spec,
            x_tokens: inputs.x_tokens.clone(),
            lr_tokens: inputs.lr_tokens.clone(),
            text: inputs.text.to_vec(),
            t: inputs.t,
            blocks,
            h_final,
        };
        Ok((velocity, cache))
    }

    fn run_blocks(
        &self,
        h0: &Mat<T>,
        spec: &SequenceSpec,
        backend: AttentionBackend<'_>,
        keep_cache: bool,
    ) -> Result<(Mat<T>, Vec<BlockCache<T>>)> {
        let s = spec.segments.len();
        if backend.seq_len() != s {
            return Err(Error::shape(format!(
                "mask covers {} rows but sequence has {s}",
                backend.seq_len()
            )));
        }
        if h0.rows() != s || h0.cols() != self.cfg.d_model {
            return Err(Error::shape(format!(
                "hidden states {}x{} vs {s}x{}",
                h0.rows(),
                h0.cols(),
                self.cfg.d_model
            )));
        }
        if spec.positions.len() != s {
            return Err(Error::shape("positions and segments length mismatch".to_string()));
        }
        let d = self.cfg.d_model;
        let hd = self.cfg.head_dim();
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let text_rows = spec.rows_of(Segment::Text);
        let x_rows = spec.rows_of(Segment::Image);
        let lr_rows = spec.rows_of(Segment::Guidance);
        let mut caches = Vec::new();
        let mut h = h0.clone();
        for params in &self.blocks {
            let q_full = project_segments(
                &h, &text_rows, &x_rows, &lr_rows,
                &params.q_text, &params.q_img, &params.adapter_q,
            )?;
            let k_full = project_segments(
                &h, &text_rows, &x_rows, &lr_rows,
                &params.k_text, &params.k_img, &params.adapter_k,
            )?;
            let v_full = project_segments(
                &h, &text_rows, &x_rows, &lr_rows,
                &params.v_text, &params.v_img, &params.adapter_v,
            )?;
            let mut attn_out = Mat::zeros(s, d);
            let mut q_rot_heads = Vec::new();
            let mut k_rot_heads = Vec::new();
            let mut v_heads_cache = Vec::new();
            for head in 0..self.cfg.heads {
                let cols = head * hd..(head + 1) * hd;
                let q_h = cols_of(&q_full, cols.clone());
                let k_h = cols_of(&k_full, cols.clone());
                let v_h = cols_of(&v_full, cols.clone());
                let q_rot = rotate(&q_h, &spec.positions, &self.rope)?;
                let k_rot = rotate(&k_h, &spec.positions, &self.rope)?;
                let att = AttentionInputs::new(&q_rot, &k_rot, &v_h, scale)?;
                let o_h = match backend {
                    AttentionBackend::Tiled(b) => tiled_attention(&att, b)?,
                    AttentionBackend::Dense(m) => dense_attention(&att, m)?,
                };
                set_cols(&mut attn_out, cols.start, &o_h);
                if keep_cache {
                    q_rot_heads.push(q_rot);
                    k_rot_heads.push(k_rot);
                    v_heads_cache.push(v_h);
                }
            }
            let y = attn_out.matmul(&params.w_out);
            let h_next = h.add(&y);
            if keep_cache {
                caches.push(BlockCache {
                    h_in: h,
                    q_rot: q_rot_heads,
                    k_rot: k_rot_heads,
                    v_heads: v_heads_cache,
                    attn_out,
                });
            }
            h = h_next;
        }
        Ok((h, caches))
    }

    /// Analytic gradients for every tensor, given the gradient of the loss
    /// with respect to the velocity prediction (image rows × channels).
    /// Training modes decide later which of these receive updates.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        backend: AttentionBackend<'_>,
        d_velocity: &Mat<T>,
    ) -> Result<ModelGrads<T>> {
        let spec = &cache.spec;
        let d = self.cfg.d_model;
        let hd = self.cfg.head_dim();
        let s = spec.segments.len();
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let text_rows = spec.rows_of(Segment::Text);
        let x_rows = spec.rows_of(Segment::Image);
        let lr_rows = spec.rows_of(Segment::Guidance);
        if d_velocity.rows() != x_rows.len() || d_velocity.cols() != self.cfg.channels {
            return Err(Error::shape(format!(
                "velocity gradient {}x{} vs {} image rows x {} channels",
                d_velocity.rows(),
                d_velocity.cols(),
                x_rows.len(),
                self.cfg.channels
            )));
        }
        let mut g = ModelGrads::zeros_like(self);

        // Velocity head: v = H_x · out_proj.
        let hx = gather_rows(&cache.h_final, &x_rows);
        g.out_proj.add_assign(&hx.matmul_tn(d_velocity));
        let mut dh = Mat::zeros(s, d);
        scatter_add_rows(&mut dh, &x_rows, &d_velocity.matmul_nt(&self.out_proj));

        for (bi, params) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[bi];
            let gb = &mut g.blocks[bi];
            // h_out = h_in + attn_out · w_out
            gb.w_out.add_assign(&bc.attn_out.matmul_tn(&dh));
            let d_attn = dh.matmul_nt(&params.w_out);

            let mut dq_full = Mat::zeros(s, d);
            let mut dk_full = Mat::zeros(s, d);
            let mut dv_full = Mat::zeros(s, d);
            for head in 0..self.cfg.heads {
                let cols = head * hd..(head + 1) * hd;
                let d_o = cols_of(&d_attn, cols.clone());
                let q_rot = &bc.q_rot[head];
                let k_rot = &bc.k_rot[head];
                let v_h = &bc.v_heads[head];

                // Rebuild the attention weights this head produced.
                let p = softmax_weights(q_rot, k_rot, scale, &backend)?;
                let dv_h = p.matmul_tn(&d_o);
                let dp = d_o.matmul_nt(v_h);
                let mut ds = Mat::zeros(s, s);
                for i in 0..s {
                    let pi = p.row(i);
                    let dpi = dp.row(i);
                    let mut inner = T::zero();
                    for j in 0..s {
                        inner = inner + pi[j] * dpi[j];
                    }
                    let dsi = ds.row_mut(i);
                    for j in 0..s {
                        dsi[j] = pi[j] * (dpi[j] - inner);
                    }
                }
                let dq_rot = ds.matmul(k_rot).scale(scale);
                let dk_rot = ds.matmul_tn(q_rot).scale(scale);
                // Rotation is orthogonal per row: gradients rotate back.
                let dq_h = rotate_inverse(&dq_rot, &spec.positions, &self.rope)?;
                let dk_h = rotate_inverse(&dk_rot, &spec.positions, &self.rope)?;
                set_cols(&mut dq_full, cols.start, &dq_h);
                set_cols(&mut dk_full, cols.start, &dk_h);
                set_cols(&mut dv_full, cols.start, &dv_h);
            }

            let mut dh_in = dh; // residual branch
            for (d_full, w_text, w_img, adapter, g_text, g_img, g_down, g_up) in [
                (
                    &dq_full, &params.q_text, &params.q_img, &params.adapter_q,
                    &mut gb.q_text, &mut gb.q_img, &mut gb.q_down, &mut gb.q_up,
                ),
                (
                    &dk_full, &params.k_text, &params.k_img, &params.adapter_k,
                    &mut gb.k_text, &mut gb.k_img, &mut gb.k_down, &mut gb.k_up,
                ),
                (
                    &dv_full, &params.v_text, &params.v_img, &params.adapter_v,
                    &mut gb.v_text, &mut gb.v_img, &mut gb.v_down, &mut gb.v_up,
                ),
            ] {
                backprop_projection(
                    &bc.h_in, d_full, &text_rows, &x_rows, &lr_rows,
                    w_text, w_img, adapter,
                    g_text, g_img, g_down, g_up, &mut dh_in,
                );
            }
            dh = dh_in;
        }

        // Initial embedding backward.
        let dh_x = gather_rows(&dh, &x_rows);
        let dh_lr = gather_rows(&dh, &lr_rows);
        g.in_proj.add_assign(&cache.x_tokens.matmul_tn(&dh_x));
        if !lr_rows.is_empty() {
            g.in_proj.add_assign(&cache.lr_tokens.matmul_tn(&dh_lr));
        }
        let t = T::from_f64(cache.t);
        for e in 0..d {
            let mut col = T::zero();
            for r in 0..dh_x.rows() {
                col = col + dh_x.get(r, e);
            }
            g.time_vec.set(0, e, t * col);
        }
        for (ti, &row) in text_rows.iter().enumerate() {
            let id = cache.text[ti];
            for (ge, &de) in g.embed.row_mut(id).iter_mut().zip(dh.row(row)) {
                *ge = *ge + de;
            }
        }
        Ok(g)
    }
}

fn project_row<T: Real>(token: &[T], w: &Mat<T>) -> Vec<T> {
    let mut out = vec![T::zero(); w.cols()];
    for (c, &x) in token.iter().enumerate() {
        for (o, &we) in out.iter_mut().zip(w.row(c)) {
            *o = *o + x * we;
        }
    }
    out
}

/// Applies per-segment projections: text rows through the text matrix, image
/// rows through the base matrix, guidance rows through base + adapter.
fn project_segments<T: Real>(
    h: &Mat<T>,
    text_rows: &[usize],
    x_rows: &[usize],
    lr_rows: &[usize],
    w_text: &Mat<T>,
    w_img: &Mat<T>,
    adapter: &LoraAdapter<T>,
) -> Result<Mat<T>> {
    let mut out = Mat::zeros(h.rows(), w_img.cols());
    if !text_rows.is_empty() {
        let ht = gather_rows(h, text_rows);
        scatter_set_rows(&mut out, text_rows, &ht.matmul(w_text));
    }
    if !x_rows.is_empty() {
        let hx = gather_rows(h, x_rows);
        scatter_set_rows(&mut out, x_rows, &hx.matmul(w_img));
    }
    if !lr_rows.is_empty() {
        let hl = gather_rows(h, lr_rows);
        scatter_set_rows(&mut out, lr_rows, &lora_project(w_img, adapter, &hl)?);
    }
    Ok(out)
}

fn scatter_set_rows<T: Real>(dst: &mut Mat<T>, idx: &[usize], src: &Mat<T>) {
    for (r, &i) in idx.iter().enumerate() {
        dst.row_mut(i).copy_from_slice(src.row(r));
    }
}

/// Gradient of one per-segment projection. Accumulates weight gradients and
/// adds the input-side gradient into `dh`.
#[allow(clippy::too_many_arguments)]
fn backprop_projection<T: Real>(
    h_in: &Mat<T>,
    d_full: &Mat<T>,
    text_rows: &[usize],
    x_rows: &[usize],
    lr_rows: &[usize],
    w_text: &Mat<T>,
    w_img: &Mat<T>,
    adapter: &LoraAdapter<T>,
    g_text: &mut Mat<T>,
    g_img: &mut Mat<T>,
    g_down: &mut Mat<T>,
    g_up: &mut Mat<T>,
    dh: &mut Mat<T>,
) {
    if !text_rows.is_empty() {
        let ht = gather_rows(h_in, text_rows);
        let dt = gather_rows(d_full, text_rows);
        g_text.add_assign(&ht.matmul_tn(&dt));
        scatter_add_rows(dh, text_rows, &dt.matmul_nt(w_text));
    }
    if !x_rows.is_empty() {
        let hx = gather_rows(h_in, x_rows);
        let dx = gather_rows(d_full, x_rows);
        g_img.add_assign(&hx.matmul_tn(&dx));
        scatter_add_rows(dh, x_rows, &dx.matmul_nt(w_img));
    }
    if !lr_rows.is_empty() {
        let hl = gather_rows(h_in, lr_rows);
        let dl = gather_rows(d_full, lr_rows);
        let s = adapter.scaling;
        // Y = H·(W + s·D·U): base and adapter factors both see gradients;
        // training modes decide what is updated.
        g_img.add_assign(&hl.matmul_tn(&dl));
        g_down.add_assign(&hl.matmul_tn(&dl.matmul_nt(&adapter.up)).scale(s));
        g_up.add_assign(&hl.matmul(&adapter.down).matmul_tn(&dl).scale(s));
        let mut w_eff = adapter.delta();
        w_eff.add_assign(w_img);
        scatter_add_rows(dh, lr_rows, &dl.matmul_nt(&w_eff));
    }
}

/// Row-stochastic attention weights for one head, recomputed from the cached
/// rotated projections with a two-pass stable softmax.
fn softmax_weights<T: Real>(
    q_rot: &Mat<T>,
    k_rot: &Mat<T>,
    scale: T,
    backend: &AttentionBackend<'_>,
) -> Result<Mat<T>> {
    let s = q_rot.rows();
    let mut p = Mat::zeros(s, s);
    for i in 0..s {
        let qi = q_rot.row(i);
        let mut row_max = T::neg_infinity();
        let pi = p.row_mut(i);
        for j in 0..s {
            if backend.allowed(i, j) {
                let mut dot = T::zero();
                for (a, b) in qi.iter().zip(k_rot.row(j)) {
                    dot = dot + *a * *b;
                }
                pi[j] = dot * scale;
                if pi[j] > row_max {
                    row_max = pi[j];
                }
            } else {
                pi[j] = T::neg_infinity();
            }
        }
        if row_max == T::neg_infinity() {
            return Err(Error::FullyMaskedRow { row: i });
        }
        let mut denom = T::zero();
        for v in pi.iter_mut() {
            if *v > T::neg_infinity() {
                *v = (*v - row_max).exp();
                denom = denom + *v;
            } else {
                *v = T::zero();
            }
        }
        let inv = T::one() / denom;
        for v in pi.iter_mut() {
            *v = *v * inv;
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_up_makes_lora_projection_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = Mat::<f32>::randn(8, 8, 0.4, &mut rng);
        let adapter = LoraAdapter::init(8, 8, 4, &mut rng).unwrap();
        let x = Mat::<f32>::randn(5, 8, 1.0, &mut rng);
        let adapted = lora_project(&base, &adapter, &x).unwrap();
        let plain = x.matmul(&base);
        assert_eq!(adapted.as_slice(), plain.as_slice());
    }

    #[test]
    fn full_rank_adapter_reaches_any_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = 8;
        let base = Mat::<f64>::randn(d, d, 0.4, &mut rng);
        let target = Mat::<f64>::randn(d, d, 0.4, &mut rng);
        let mut adapter = LoraAdapter::init(d, d, d, &mut rng).unwrap();
        // down = identity, up = target − base: delta reproduces the gap.
        adapter.down = Mat::from_fn(d, d, |r, c| if r == c { 1.0 } else { 0.0 });
        adapter.up = target.sub(&base);
        let x = Mat::<f64>::randn(6, d, 1.0, &mut rng);
        let adapted = lora_project(&base, &adapter, &x).unwrap();
        let direct = x.matmul(&target);
        assert!(adapted.max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn adapter_rank_is_validated() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        assert!(LoraAdapter::<f32>::init(8, 8, 0, &mut rng).is_err());
        assert!(LoraAdapter::<f32>::init(8, 8, 9, &mut rng).is_err());
        assert!(LoraAdapter::<f32>::init(8, 8, 8, &mut rng).is_ok());
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let ok = ModelConfig::default();
        assert!(ok.validate().is_ok());
        assert!(ModelConfig { heads: 5, ..ok }.validate().is_err());
        assert!(ModelConfig { heads: 16, ..ok }.validate().is_err()); // head_dim 2
        assert!(ModelConfig { lora_rank: 0, ..ok }.validate().is_err());
        assert!(ModelConfig { lora_rank: 33, ..ok }.validate().is_err());
        assert!(ModelConfig { vocab: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn tensor_walk_is_stable_and_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = ToyModel::<f32>::init(ModelConfig::default(), &mut rng).unwrap();
        let ids = model.tensor_ids();
        assert_eq!(ids.len(), 4 + 2 * 13);
        assert_eq!(ids[0].name(), "embed");
        assert_eq!(ids[4].name(), "block0.q_text");
        assert_eq!(TensorId::Block(1, BlockTensor::QDown).name(), "block1.adapter_q.down");
        let adapters = ids.iter().filter(|i| i.is_adapter()).count();
        assert_eq!(adapters, 12);
        let frozen = ids.iter().filter(|i| i.is_base_projection()).count();
        assert_eq!(frozen, 12);
    }
}
