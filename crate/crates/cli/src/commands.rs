//! The five subcommands. Each returns `Ok(true)` when every check it ran
//! passed, `Ok(false)` when a check failed (exit code 3 without being an
//! error), and `Err` for configuration or runtime problems.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use mosaic_core::{
    build_block_mask, build_layout, build_token_mask, dense_attention, flow_match_loss,
    flow_match_loss_value, hilbert_index, hilbert_point, kernel_bench, load_checkpoint,
    recursive_upscale, save_checkpoint, tile_stats, tiled_attention, tiled_attention_with, train,
    verify_block_mask, AnchorSpec, AttentionBackend, AttentionInputs, BlockTensor, FlowMatchBatch,
    GridSpec, InteractionRules, LrSelfScope, Mat, ModelConfig, Real, SyntheticDataset, TensorId,
    TiledOptions, TokenLayout, ToyModel, TrainConfig, UpscaleConfig, WindowSpec, BACKWARD_CAP,
};

use crate::config::{ConfigError, Precision, RunConfig};

/// Grid side the oracle-backed verify suites are clamped to: the dense token
/// mask and naive attention stay well inside the oracle budget there.
const VERIFY_SIDE_CAP: u32 = 64;

/// The synthetic dataset conditions on exactly one text token (the mode id),
/// so training and sampling layouts always carry one text slot.
const TRAIN_TEXT_LEN: usize = 1;

/// Synthetic dataset shape: `DATASET_MODES` distinct fields (must stay within
/// the model vocabulary), template amplitude, and observation noise.
const DATASET_MODES: usize = 4;
const DATASET_AMPLITUDE: f64 = 2.0;
const DATASET_NOISE_STD: f64 = 0.05;

/// Interaction rules the configuration describes.
pub fn rules_for(cfg: &RunConfig) -> InteractionRules {
    InteractionRules {
        x_to_lr: cfg.guidance.scope(),
        lr_self_scope: cfg.lr_self.scope(),
        ..InteractionRules::default()
    }
}

/// Token layout for a square grid of the given side, with the window clamped
/// to the grid so small smoke-test grids stay valid.
pub fn layout_for(cfg: &RunConfig, side: u32, text_len: usize) -> Result<TokenLayout> {
    let (w, h) = cfg.window_for(side);
    let grid = GridSpec::new(side, side, 1)?;
    let window = WindowSpec::new(w, h)?;
    let anchor = match cfg.anchor_for(side)? {
        Some((lr, ratio)) => Some(AnchorSpec::new(lr, lr, ratio)?),
        None => None,
    };
    Ok(build_layout(&grid, &window, anchor.as_ref(), text_len)?)
}

fn ensure_outdir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.output);
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

// --- mask -------------------------------------------------------------------

/// Builds the tile mask for the configured layout, exports it in the binary
/// mask format, and writes/echoes the occupancy stats sidecar.
pub fn cmd_mask(cfg: &RunConfig) -> Result<bool> {
    let layout = layout_for(cfg, cfg.grid_side, cfg.text_len)?;
    let rules = rules_for(cfg);
    let block = build_block_mask(&layout, &rules, cfg.q_tile, cfg.k_tile)?;
    let dir = ensure_outdir(cfg)?;

    let mask_path = dir.join("mask.bin");
    let mut w = BufWriter::new(
        File::create(&mask_path).with_context(|| format!("creating {}", mask_path.display()))?,
    );
    block.write_to(&mut w)?;
    w.flush()?;

    let stats = block.stats_json();
    let stats_path = dir.join("mask_stats.json");
    fs::write(&stats_path, &stats).with_context(|| format!("writing {}", stats_path.display()))?;

    eprintln!("wrote {} and {}", mask_path.display(), stats_path.display());
    println!("{stats}");
    Ok(true)
}

// --- verify -----------------------------------------------------------------

#[derive(serde::Serialize)]
struct SuiteVerdict {
    suite: &'static str,
    passed: bool,
    detail: serde_json::Value,
}

/// Runs the four self-check suites and prints one JSON verdict per suite.
/// `inject_mask_fault` flips one tile before the consistency check, proving
/// the checker catches corruption (that suite then fails, the others pass).
pub fn cmd_verify(cfg: &RunConfig, inject_mask_fault: bool) -> Result<bool> {
    let side = cfg.grid_side.min(VERIFY_SIDE_CAP);
    let verdicts = vec![
        suite_hilbert(),
        suite_mask(cfg, side, inject_mask_fault)?,
        suite_oracle(cfg, side)?,
        suite_gradient(cfg)?,
    ];
    let all = verdicts.iter().all(|v| v.passed);
    let report = json!({
        "grid_side": side,
        "suites": verdicts,
        "all_passed": all,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(all)
}

/// Curve bijectivity, bounds, and unit-step adjacency for every order <= 6.
fn suite_hilbert() -> SuiteVerdict {
    let max_order = 6u32;
    let mut cells = 0u64;
    let mut roundtrip_bad = 0u64;
    let mut adjacency_bad = 0u64;
    let mut bounds_bad = 0u64;
    for order in 0..=max_order {
        let side = 1u64 << order;
        let mut prev: Option<(u32, u32)> = None;
        for i in 0..side * side {
            let (x, y) = hilbert_point(i, order).expect("order <= 6 is valid");
            cells += 1;
            if u64::from(x) >= side || u64::from(y) >= side {
                bounds_bad += 1;
            }
            if hilbert_index(x, y, order).ok() != Some(i) {
                roundtrip_bad += 1;
            }
            if let Some((px, py)) = prev {
                if x.abs_diff(px) + y.abs_diff(py) != 1 {
                    adjacency_bad += 1;
                }
            }
            prev = Some((x, y));
        }
    }
    SuiteVerdict {
        suite: "hilbert",
        passed: roundtrip_bad == 0 && adjacency_bad == 0 && bounds_bad == 0,
        detail: json!({
            "max_order": max_order,
            "cells_checked": cells,
            "roundtrip_violations": roundtrip_bad,
            "adjacency_violations": adjacency_bad,
            "bounds_violations": bounds_bad,
        }),
    }
}

/// Tile mask vs the dense token-level rule oracle, bit for bit.
fn suite_mask(cfg: &RunConfig, side: u32, inject_fault: bool) -> Result<SuiteVerdict> {
    let layout = layout_for(cfg, side, cfg.text_len)?;
    let rules = rules_for(cfg);
    let token = build_token_mask(&layout, &rules)?;
    let mut block = build_block_mask(&layout, &rules, cfg.q_tile, cfg.k_tile)?;
    if inject_fault {
        block.flip_tile(0, 0);
    }
    let report = verify_block_mask(&block, &token)?;
    let passed = report.passed();
    Ok(SuiteVerdict {
        suite: "mask-consistency",
        passed,
        detail: json!({
            "seq_len": report.seq_len,
            "checked_bits": report.checked_bits,
            "discrepancies": report.discrepancies,
            "first_mismatch": report.first_mismatch,
            "fault_injected": inject_fault,
        }),
    })
}

/// Tiled kernel vs the naive masked-attention oracle in both precisions,
/// plus bitwise equality of the skip and visit-everything schedules.
fn suite_oracle(cfg: &RunConfig, side: u32) -> Result<SuiteVerdict> {
    let layout = layout_for(cfg, side, cfg.text_len)?;
    let rules = rules_for(cfg);
    let token = build_token_mask(&layout, &rules)?;
    let block = build_block_mask(&layout, &rules, cfg.q_tile, cfg.k_tile)?;
    let s = layout.seq_len();
    let d = cfg.head_dim;
    let scale = 1.0 / (d as f64).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6f7261636c65);
    let (f32_diff, f32_skip_bitwise) = {
        let q = Mat::<f32>::randn(s, d, 1.0, &mut rng);
        let k = Mat::<f32>::randn(s, d, 1.0, &mut rng);
        let v = Mat::<f32>::randn(s, d, 1.0, &mut rng);
        let inputs = AttentionInputs::new(&q, &k, &v, scale as f32)?;
        let dense = dense_attention(&inputs, &token)?;
        let tiled = tiled_attention(&inputs, &block)?;
        let no_skip =
            tiled_attention_with(&inputs, &block, TiledOptions { skip_empty_tiles: false })?;
        let bitwise = tiled
            .as_slice()
            .iter()
            .zip(no_skip.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        (dense.max_abs_diff(&tiled), bitwise)
    };
    let (f64_diff, f64_skip_bitwise) = {
        let q = Mat::<f64>::randn(s, d, 1.0, &mut rng);
        let k = Mat::<f64>::randn(s, d, 1.0, &mut rng);
        let v = Mat::<f64>::randn(s, d, 1.0, &mut rng);
        let inputs = AttentionInputs::new(&q, &k, &v, scale)?;
        let dense = dense_attention(&inputs, &token)?;
        let tiled = tiled_attention(&inputs, &block)?;
        let no_skip =
            tiled_attention_with(&inputs, &block, TiledOptions { skip_empty_tiles: false })?;
        let bitwise = tiled
            .as_slice()
            .iter()
            .zip(no_skip.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        (dense.max_abs_diff(&tiled), bitwise)
    };

    let (tol32, tol64) = (1e-5, 1e-10);
    let passed = f32_diff <= tol32 && f64_diff <= tol64 && f32_skip_bitwise && f64_skip_bitwise;
    Ok(SuiteVerdict {
        suite: "kernel-oracle",
        passed,
        detail: json!({
            "seq_len": s,
            "head_dim": d,
            "f32_max_abs_diff": f32_diff,
            "f32_tolerance": tol32,
            "f64_max_abs_diff": f64_diff,
            "f64_tolerance": tol64,
            "skip_schedule_bitwise": f32_skip_bitwise && f64_skip_bitwise,
        }),
    })
}

/// Analytic gradients vs central finite differences on a small f64 model:
/// for every tensor, the entry with the largest analytic gradient.
fn suite_gradient(cfg: &RunConfig) -> Result<SuiteVerdict> {
    let grid = GridSpec::new(8, 8, 1)?;
    let window = WindowSpec::new(4, 1)?;
    let anchor = AnchorSpec::new(4, 4, 2)?;
    let layout = build_layout(&grid, &window, Some(&anchor), TRAIN_TEXT_LEN)?;
    let rules = InteractionRules::default();
    let block = build_block_mask(&layout, &rules, 16, 16)?;
    let backend = AttentionBackend::Tiled(&block);

    let mcfg = ModelConfig { lora_rank: 4, blocks: 1, ..ModelConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x67726164);
    let mut model = ToyModel::<f64>::init(mcfg, &mut rng)?;
    // Fresh adapters have zero up-factors, which silences the down-factor
    // gradients; randomize the up-factors so every adapter entry is live.
    for id in model.tensor_ids() {
        if let TensorId::Block(_, BlockTensor::QUp | BlockTensor::KUp | BlockTensor::VUp) = id {
            let t = model.tensor_mut(id);
            *t = Mat::randn(t.rows(), t.cols(), 0.2, &mut rng);
        }
    }

    let data = SyntheticDataset::new(&layout, mcfg.channels, DATASET_MODES, 1.0, 0.05)?;
    let sample = data.sample::<f64>(&mut rng);
    let x0 = Mat::randn(layout.x_range().len(), mcfg.channels, 1.0, &mut rng);
    let batch = FlowMatchBatch::new(x0, sample.x1, 0.4, sample.lr_tokens, sample.text)?;
    let (_, grads) = flow_match_loss(&model, &layout, backend, &batch)?;

    let step = 1e-5;
    let tol = 1e-6;
    let mut checked = 0u64;
    let mut max_rel = 0.0f64;
    for id in model.tensor_ids() {
        let g = grads.tensor(id).as_slice();
        let Some(idx) = (0..g.len()).max_by(|&a, &b| {
            g[a].abs().partial_cmp(&g[b].abs()).expect("gradients are finite")
        }) else {
            continue;
        };
        let analytic = g[idx];
        let orig = model.tensor(id).as_slice()[idx];
        model.tensor_mut(id).as_mut_slice()[idx] = orig + step;
        let up = flow_match_loss_value(&model, &layout, backend, &batch)?;
        model.tensor_mut(id).as_mut_slice()[idx] = orig - step;
        let down = flow_match_loss_value(&model, &layout, backend, &batch)?;
        model.tensor_mut(id).as_mut_slice()[idx] = orig;
        let fd = (up - down) / (2.0 * step);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
        checked += 1;
    }

    Ok(SuiteVerdict {
        suite: "gradient",
        passed: max_rel <= tol && checked > 0,
        detail: json!({
            "params_checked": checked,
            "max_rel_err": max_rel,
            "tolerance": tol,
            "fd_step": step,
        }),
    })
}

// --- bench ------------------------------------------------------------------

/// Sweeps the configured grid sides, timing the tile-skipping kernel against
/// the visit-everything baseline, and reports tile occupancy and mask sizes.
pub fn cmd_bench(cfg: &RunConfig) -> Result<bool> {
    if cfg.sweep.is_empty() {
        return Err(ConfigError("field `sweep`: bench needs at least one grid side".into()).into());
    }
    if cfg.repetitions < 3 {
        return Err(ConfigError(format!(
            "field `repetitions`: bench needs at least 3 for a median, got {}",
            cfg.repetitions
        ))
        .into());
    }
    match cfg.precision {
        Precision::F32 => run_bench::<f32>(cfg),
        Precision::F64 => run_bench::<f64>(cfg),
    }
}

fn run_bench<T: Real>(cfg: &RunConfig) -> Result<bool> {
    let dir = ensure_outdir(cfg)?;
    // Guidance self-attention is windowed during sweeps so the measured key
    // budget stays linear in the token count; `mask` reports whatever rule
    // set the config asks for.
    let mut rules = rules_for(cfg);
    rules.lr_self_scope = LrSelfScope::LocalWindow;

    let header = "seq_len,visited_tiles,skipped_tiles,median_skip_ms,median_dense_tiled_ms,\
                  speedup,mask_bytes,dense_mask_bytes";
    let mut csv = format!("{header}\n");
    for &side in &cfg.sweep {
        let layout = layout_for(cfg, side, cfg.text_len)?;
        let block = build_block_mask(&layout, &rules, cfg.q_tile, cfg.k_tile)?;
        let stats = tile_stats(&block);
        let s = layout.seq_len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(u64::from(side)));
        let q = Mat::<T>::randn(s, cfg.head_dim, 1.0, &mut rng);
        let k = Mat::<T>::randn(s, cfg.head_dim, 1.0, &mut rng);
        let v = Mat::<T>::randn(s, cfg.head_dim, 1.0, &mut rng);
        let scale = T::from_f64(1.0 / (cfg.head_dim as f64).sqrt());
        let inputs = AttentionInputs::new(&q, &k, &v, scale)?;
        eprintln!("bench: side {side} (S = {s}), {} repetitions...", cfg.repetitions);
        let report = kernel_bench(&inputs, &block, cfg.repetitions)?;
        csv.push_str(&format!(
            "{},{},{},{:.3},{:.3},{:.3},{},{}\n",
            s,
            report.visited_tiles,
            report.skipped_tiles,
            report.median_skip_ms,
            report.median_dense_tiled_ms,
            report.speedup,
            stats.analytic_bytes,
            stats.dense_bits_bytes,
        ));
    }

    let csv_path = dir.join("bench.csv");
    fs::write(&csv_path, &csv).with_context(|| format!("writing {}", csv_path.display()))?;
    eprintln!("wrote {}", csv_path.display());
    print!("{csv}");
    Ok(true)
}

// --- train ------------------------------------------------------------------

/// Trains the toy guided flow-matching model on the synthetic dataset,
/// logging one CSV row per step and serializing the final checkpoint.
/// With `steps = 0` the checkpoint equals the seeded initialization.
pub fn cmd_train(cfg: &RunConfig) -> Result<bool> {
    match cfg.precision {
        Precision::F32 => run_train::<f32>(cfg),
        Precision::F64 => run_train::<f64>(cfg),
    }
}

fn run_train<T: Real>(cfg: &RunConfig) -> Result<bool> {
    let layout = layout_for(cfg, cfg.grid_side, TRAIN_TEXT_LEN)?;
    if layout.seq_len() > BACKWARD_CAP {
        return Err(ConfigError(format!(
            "field `grid_side`: sequence length {} exceeds the training cap {BACKWARD_CAP}; \
             use a smaller grid",
            layout.seq_len()
        ))
        .into());
    }
    let rules = rules_for(cfg);
    let block = build_block_mask(&layout, &rules, cfg.q_tile, cfg.k_tile)?;
    let backend = AttentionBackend::Tiled(&block);

    let mcfg =
        ModelConfig { channels: cfg.channels, lora_rank: cfg.lora_rank, ..ModelConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ToyModel::<T>::init(mcfg, &mut rng)?;
    let data = SyntheticDataset::new(
        &layout,
        cfg.channels,
        DATASET_MODES,
        DATASET_AMPLITUDE,
        DATASET_NOISE_STD,
    )?;
    let tcfg = TrainConfig {
        steps: cfg.steps,
        lr: cfg.learning_rate,
        mode: cfg.train_mode.mode(),
        seed: cfg.seed,
    };

    let report = train(&mut model, &layout, backend, &data, &tcfg)?;
    if let Some(row) = report.rows.iter().find(|r| !r.loss.is_finite()) {
        anyhow::bail!("training diverged: loss {} at step {}", row.loss, row.step);
    }

    let dir = ensure_outdir(cfg)?;
    let log_path = dir.join("train_log.csv");
    let mut w = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    report.write_csv(&mut w)?;
    w.flush()?;

    let ckpt_path = dir.join("model.ckpt");
    let mut w = BufWriter::new(
        File::create(&ckpt_path).with_context(|| format!("creating {}", ckpt_path.display()))?,
    );
    save_checkpoint(&model, &mut w)?;
    w.flush()?;

    let summary = json!({
        "steps": report.rows.len(),
        "initial_loss": report.rows.first().map(|r| r.loss),
        "final_loss": report.rows.last().map(|r| r.loss),
        "checkpoint": ckpt_path.display().to_string(),
        "log": log_path.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(true)
}

// --- sample -----------------------------------------------------------------

/// Loads a checkpoint and integrates its velocity field coarse-to-fine:
/// level 0 samples the base grid, each further level re-samples at `rho`x
/// the side with the previous output as guidance anchors.
pub fn cmd_sample(cfg: &RunConfig, checkpoint: &Path, mode: usize, pgm: bool) -> Result<bool> {
    match cfg.precision {
        Precision::F32 => run_sample::<f32>(cfg, checkpoint, mode, pgm),
        Precision::F64 => run_sample::<f64>(cfg, checkpoint, mode, pgm),
    }
}

fn run_sample<T: Real>(cfg: &RunConfig, checkpoint: &Path, mode: usize, pgm: bool) -> Result<bool> {
    let mut r = BufReader::new(
        File::open(checkpoint).with_context(|| format!("opening {}", checkpoint.display()))?,
    );
    let model = load_checkpoint::<T>(&mut r)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    if mode >= model.cfg.vocab {
        return Err(ConfigError(format!(
            "field `mode`: must be below the checkpoint vocabulary {}, got {mode}",
            model.cfg.vocab
        ))
        .into());
    }

    let sides: Vec<u32> = (0..=cfg.levels)
        .map(|l| {
            cfg.base_side.checked_mul(cfg.rho.pow(l)).ok_or_else(|| {
                ConfigError(format!("field `levels`: side overflows at level {l}"))
            })
        })
        .collect::<Result<_, _>>()?;
    let final_side = *sides.last().expect("at least the base level");
    let (w, h) = cfg.window_for(cfg.base_side);
    let window = WindowSpec::new(w, h)?;
    let rules = rules_for(cfg);
    let ucfg = UpscaleConfig {
        sides: sides.clone(),
        ratio: cfg.rho,
        window,
        rules,
        text: vec![mode],
        steps_per_level: cfg.sample_steps,
        seed: cfg.seed,
        q_tile: cfg.q_tile,
        k_tile: cfg.k_tile,
    };

    eprintln!(
        "sampling levels {:?} with {} Euler steps each...",
        sides, cfg.sample_steps
    );
    let (x, stats) = recursive_upscale(&model, &ucfg)?;
    if x.as_slice().iter().any(|v| !Real::to_f64(*v).is_finite()) {
        anyhow::bail!("sampled field contains non-finite values");
    }

    // Analytic peak working set per level: forward activations (about eight
    // sequence-length d_model buffers), the output field, the parameters,
    // and the tile mask. See the README for the derivation.
    let param_count: usize = {
        let ids = model.tensor_ids();
        ids.iter().map(|&id| model.tensor(id).rows() * model.tensor(id).cols()).sum()
    };
    let elem = std::mem::size_of::<T>();
    let mut level_reports = Vec::new();
    for st in &stats {
        let anchor = match cfg.anchor_for_level(st.grid_side, &sides) {
            Some((lr, ratio)) => Some(AnchorSpec::new(lr, lr, ratio)?),
            None => None,
        };
        let grid = GridSpec::new(st.grid_side, st.grid_side, 1)?;
        let layout = build_layout(&grid, &window, anchor.as_ref(), 1)?;
        let block = build_block_mask(&layout, &rules, cfg.q_tile, cfg.k_tile)?;
        let mask_bytes = tile_stats(&block).analytic_bytes;
        let s = st.seq_len;
        let n_x = grid.token_count();
        let est = ((8 * s * model.cfg.d_model + n_x * model.cfg.channels + param_count) as u64)
            * elem as u64
            + mask_bytes;
        level_reports.push(json!({
            "grid_side": st.grid_side,
            "seq_len": st.seq_len,
            "guidance_len": st.guidance_len,
            "min_x_keys": st.min_x_keys,
            "max_x_keys": st.max_x_keys,
            "mask_bytes": mask_bytes,
            "est_peak_bytes": est,
        }));
    }

    let dir = ensure_outdir(cfg)?;
    let final_layout = {
        let grid = GridSpec::new(final_side, final_side, 1)?;
        let anchor = match sides.len() {
            1 => None,
            n => Some(AnchorSpec::new(sides[n - 2], sides[n - 2], cfg.rho)?),
        };
        build_layout(&grid, &window, anchor.as_ref(), 1)?
    };
    let grid_path = dir.join("sample_grid.bin");
    write_grid(&grid_path, &final_layout, &x, T::PRECISION_BITS)?;
    let mut outputs = vec![grid_path.display().to_string()];
    if pgm {
        let pgm_path = dir.join("sample.pgm");
        write_pgm(&pgm_path, &final_layout, &x)?;
        outputs.push(pgm_path.display().to_string());
    }

    let summary = json!({
        "mode": mode,
        "final_side": final_side,
        "channels": model.cfg.channels,
        "levels": level_reports,
        "outputs": outputs,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(true)
}

impl RunConfig {
    /// Guidance shape of one upscaling level: the previous side in the
    /// schedule, if any.
    fn anchor_for_level(&self, side: u32, sides: &[u32]) -> Option<(u32, u32)> {
        let pos = sides.iter().position(|&s| s == side)?;
        if pos == 0 {
            None
        } else {
            Some((sides[pos - 1], self.rho))
        }
    }
}

/// Binary field export: magic, version, precision bits, side, channels, then
/// f64-widened values in row-major (row, col, channel) order. Values are
/// converted from curve order using the layout's grid-to-sequence map.
fn write_grid<T: Real>(
    path: &Path,
    layout: &TokenLayout,
    x: &Mat<T>,
    precision_bits: u32,
) -> Result<()> {
    let side = layout.grid().rows();
    let x_start = layout.x_range().start;
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    w.write_all(b"MOSAGRID")?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&precision_bits.to_le_bytes())?;
    w.write_all(&u64::from(side).to_le_bytes())?;
    w.write_all(&(x.cols() as u64).to_le_bytes())?;
    for row in 0..side {
        for col in 0..side {
            let r = layout.x_seq(col, row) - x_start;
            for c in 0..x.cols() {
                w.write_all(&Real::to_f64(x.get(r, c)).to_le_bytes())?;
            }
        }
    }
    Ok(w.flush()?)
}

/// Channel 0 as an ASCII PGM (P2) image, min-max normalized to 0..=255.
fn write_pgm<T: Real>(path: &Path, layout: &TokenLayout, x: &Mat<T>) -> Result<()> {
    let side = layout.grid().rows();
    let x_start = layout.x_range().start;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in 0..x.rows() {
        let v = Real::to_f64(x.get(r, 0));
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = format!("P2\n{side} {side}\n255\n");
    for row in 0..side {
        let mut line = String::new();
        for col in 0..side {
            let r = layout.x_seq(col, row) - x_start;
            let v = Real::to_f64(x.get(r, 0));
            let px = (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u32;
            if !line.is_empty() {
                line.push(' ');
            }
            line.push_str(&px.to_string());
        }
        s.push_str(&line);
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
