//! Flat `key = value` run configuration shared by every subcommand.
//!
//! The format is line oriented: `#` starts a comment, blank lines are
//! skipped, and every value fits on one line. `parse(serialize(c)) == c`
//! holds for all representable configurations (pinned by a property test),
//! so a run can always be reproduced from its emitted config.

use std::fmt;
use std::str::FromStr;

use mosaic_core::{GuidanceScope, LrSelfScope, TrainMode};

/// A malformed or contradictory setting. The message names the offending
/// field; the binary maps this (and `mosaic_core::Error::Config`) to exit
/// code 2, as opposed to exit code 3 for runtime/check failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn field_err(key: &str, detail: impl fmt::Display) -> ConfigError {
    ConfigError(format!("field `{key}`: {detail}"))
}

/// Working precision of kernels, training, and sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("expected `f32` or `f64`, got `{other}`")),
        }
    }
}

/// How image queries see the guidance segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceOpt {
    Region,
    All,
    Off,
}

impl GuidanceOpt {
    pub fn scope(self) -> GuidanceScope {
        match self {
            GuidanceOpt::Region => GuidanceScope::Region,
            GuidanceOpt::All => GuidanceScope::All,
            GuidanceOpt::Off => GuidanceScope::Off,
        }
    }
}

impl fmt::Display for GuidanceOpt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceOpt::Region => "region",
            GuidanceOpt::All => "all",
            GuidanceOpt::Off => "off",
        })
    }
}

impl FromStr for GuidanceOpt {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "region" => Ok(GuidanceOpt::Region),
            "all" => Ok(GuidanceOpt::All),
            "off" => Ok(GuidanceOpt::Off),
            other => Err(format!("expected `region`, `all`, or `off`, got `{other}`")),
        }
    }
}

/// Whether guidance tokens attend each other globally or only within their
/// own curve-order window (the variant whose key budget stays linear).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSelfOpt {
    Global,
    Local,
}

impl LrSelfOpt {
    pub fn scope(self) -> LrSelfScope {
        match self {
            LrSelfOpt::Global => LrSelfScope::Global,
            LrSelfOpt::Local => LrSelfScope::LocalWindow,
        }
    }
}

impl fmt::Display for LrSelfOpt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSelfOpt::Global => "global",
            LrSelfOpt::Local => "local",
        })
    }
}

impl FromStr for LrSelfOpt {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(LrSelfOpt::Global),
            "local" => Ok(LrSelfOpt::Local),
            other => Err(format!("expected `global` or `local`, got `{other}`")),
        }
    }
}

/// Which tensors SGD updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainModeOpt {
    Lora,
    Full,
}

impl TrainModeOpt {
    pub fn mode(self) -> TrainMode {
        match self {
            TrainModeOpt::Lora => TrainMode::LoraOnly,
            TrainModeOpt::Full => TrainMode::Full,
        }
    }
}

impl fmt::Display for TrainModeOpt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainModeOpt::Lora => "lora",
            TrainModeOpt::Full => "full",
        })
    }
}

impl FromStr for TrainModeOpt {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lora" => Ok(TrainModeOpt::Lora),
            "full" => Ok(TrainModeOpt::Full),
            other => Err(format!("expected `lora` or `full`, got `{other}`")),
        }
    }
}

/// Every knob a subcommand reads. Commands ignore fields they do not use.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Square image-grid side for single-size commands (mask, verify, train).
    pub grid_side: u32,
    /// Grid sides the bench sweep measures, in order.
    pub sweep: Vec<u32>,
    /// Local attention window side (clamped down to the grid side when the
    /// grid is smaller, so tiny smoke grids stay valid).
    pub window: u32,
    /// Halo ring width around each window, in cells.
    pub halo: u32,
    /// Downsampling ratio between the image grid and the guidance grid.
    pub rho: u32,
    /// Guidance grid side; 0 derives `grid_side / rho` when divisible and
    /// omits the guidance segment otherwise.
    pub lr_side: u32,
    /// Number of text conditioning tokens.
    pub text_len: usize,
    /// Query-tile rows of the block mask.
    pub q_tile: usize,
    /// Key-tile columns of the block mask.
    pub k_tile: usize,
    /// Head dimension of the standalone kernel benchmarks.
    pub head_dim: usize,
    pub precision: Precision,
    pub seed: u64,
    /// Timed repetitions per measurement (median is reported).
    pub repetitions: usize,
    /// Directory artifacts are written into.
    pub output: String,
    pub guidance: GuidanceOpt,
    pub lr_self: LrSelfOpt,
    /// Optimization steps for `train`.
    pub steps: usize,
    pub learning_rate: f64,
    pub train_mode: TrainModeOpt,
    pub lora_rank: usize,
    /// Latent channels of the toy model and synthetic dataset.
    pub channels: usize,
    /// Euler integration steps per sampling level.
    pub sample_steps: usize,
    /// Upscaling levels above the base grid (0 samples the base only).
    pub levels: u32,
    /// Grid side of the coarsest sampling level.
    pub base_side: u32,
}

impl Default for RunConfig {
    /// The single-image defaults mirror the 4K-analog working point: a
    /// 256x256 latent grid with 16x16 windows, halo 2, and a 4x-downsampled
    /// guidance grid.
    fn default() -> Self {
        RunConfig {
            grid_side: 256,
            sweep: vec![64, 128, 256],
            window: 16,
            halo: 2,
            rho: 4,
            lr_side: 0,
            text_len: 0,
            q_tile: 128,
            k_tile: 64,
            head_dim: 64,
            precision: Precision::F32,
            seed: 0,
            repetitions: 5,
            output: "out".to_string(),
            guidance: GuidanceOpt::Region,
            lr_self: LrSelfOpt::Global,
            steps: 500,
            learning_rate: 0.01,
            train_mode: TrainModeOpt::Full,
            lora_rank: 16,
            channels: 2,
            sample_steps: 8,
            levels: 2,
            base_side: 16,
        }
    }
}

fn join_u32(values: &[u32]) -> String {
    values.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, v: &str) -> Result<Vec<u32>, ConfigError> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|part| {
            part.trim()
                .parse::<u32>()
                .map_err(|e| field_err(key, format!("bad entry `{}`: {e}", part.trim())))
        })
        .collect()
}

fn parse_scalar<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| field_err(key, format!("bad value `{v}`: {e}")))
}

impl RunConfig {
    /// Emits the full configuration in the flat file format. Parsing the
    /// result reproduces `self` exactly.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        s.push_str("# mosaic run configuration\n");
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("grid_side", self.grid_side.to_string());
        kv("sweep", join_u32(&self.sweep));
        kv("window", self.window.to_string());
        kv("halo", self.halo.to_string());
        kv("rho", self.rho.to_string());
        kv("lr_side", self.lr_side.to_string());
        kv("text_len", self.text_len.to_string());
        kv("q_tile", self.q_tile.to_string());
        kv("k_tile", self.k_tile.to_string());
        kv("head_dim", self.head_dim.to_string());
        kv("precision", self.precision.to_string());
        kv("seed", self.seed.to_string());
        kv("repetitions", self.repetitions.to_string());
        kv("output", self.output.clone());
        kv("guidance", self.guidance.to_string());
        kv("lr_self", self.lr_self.to_string());
        kv("steps", self.steps.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("train_mode", self.train_mode.to_string());
        kv("lora_rank", self.lora_rank.to_string());
        kv("channels", self.channels.to_string());
        kv("sample_steps", self.sample_steps.to_string());
        kv("levels", self.levels.to_string());
        kv("base_side", self.base_side.to_string());
        s
    }

    /// Parses the flat format on top of the defaults. Later assignments win;
    /// unknown keys are rejected so typos cannot silently fall back.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "grid_side" => self.grid_side = parse_scalar(key, value)?,
            "sweep" => self.sweep = parse_list(key, value)?,
            "window" => self.window = parse_scalar(key, value)?,
            "halo" => self.halo = parse_scalar(key, value)?,
            "rho" => self.rho = parse_scalar(key, value)?,
            "lr_side" => self.lr_side = parse_scalar(key, value)?,
            "text_len" => self.text_len = parse_scalar(key, value)?,
            "q_tile" => self.q_tile = parse_scalar(key, value)?,
            "k_tile" => self.k_tile = parse_scalar(key, value)?,
            "head_dim" => self.head_dim = parse_scalar(key, value)?,
            "precision" => self.precision = parse_scalar(key, value)?,
            "seed" => self.seed = parse_scalar(key, value)?,
            "repetitions" => self.repetitions = parse_scalar(key, value)?,
            "output" => self.output = value.to_string(),
            "guidance" => self.guidance = parse_scalar(key, value)?,
            "lr_self" => self.lr_self = parse_scalar(key, value)?,
            "steps" => self.steps = parse_scalar(key, value)?,
            "learning_rate" => self.learning_rate = parse_scalar(key, value)?,
            "train_mode" => self.train_mode = parse_scalar(key, value)?,
            "lora_rank" => self.lora_rank = parse_scalar(key, value)?,
            "channels" => self.channels = parse_scalar(key, value)?,
            "sample_steps" => self.sample_steps = parse_scalar(key, value)?,
            "levels" => self.levels = parse_scalar(key, value)?,
            "base_side" => self.base_side = parse_scalar(key, value)?,
            other => return Err(ConfigError(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Structural validation with field-specific messages. Geometric
    /// compatibility (window divides grid, anchors tile the grid, ...) is
    /// additionally enforced by the layout builders at run time.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let pow2 = |key: &str, v: u32| -> Result<(), ConfigError> {
            if v == 0 || !v.is_power_of_two() {
                return Err(field_err(key, format!("must be a power of two, got {v}")));
            }
            Ok(())
        };
        pow2("grid_side", self.grid_side)?;
        for &side in &self.sweep {
            pow2("sweep", side)?;
        }
        pow2("window", self.window)?;
        if self.halo >= self.window {
            return Err(field_err(
                "halo",
                format!("must be smaller than the window side {}, got {}", self.window, self.halo),
            ));
        }
        pow2("rho", self.rho)?;
        if self.lr_side > 0 {
            pow2("lr_side", self.lr_side)?;
        }
        if self.q_tile == 0 {
            return Err(field_err("q_tile", "must be at least 1"));
        }
        if self.k_tile == 0 {
            return Err(field_err("k_tile", "must be at least 1"));
        }
        if self.head_dim == 0 {
            return Err(field_err("head_dim", "must be at least 1"));
        }
        if self.repetitions == 0 {
            return Err(field_err("repetitions", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(field_err(
                "learning_rate",
                format!("must be a positive finite number, got {}", self.learning_rate),
            ));
        }
        if self.lora_rank == 0 {
            return Err(field_err("lora_rank", "must be at least 1"));
        }
        if self.channels == 0 {
            return Err(field_err("channels", "must be at least 1"));
        }
        if self.sample_steps == 0 {
            return Err(field_err("sample_steps", "must be at least 1"));
        }
        pow2("base_side", self.base_side)?;
        if self.output.is_empty() {
            return Err(field_err("output", "must name a directory"));
        }
        Ok(())
    }

    /// Window side and halo for a grid of the given side: the configured
    /// window, clamped so it still divides small grids (with the halo kept
    /// strictly below the side).
    pub fn window_for(&self, side: u32) -> (u32, u32) {
        let w = self.window.min(side);
        let h = self.halo.min(w.saturating_sub(1));
        (w, h)
    }

    /// Guidance grid side and ratio for a grid of the given side, or `None`
    /// when the grid is too small to downsample.
    pub fn anchor_for(&self, side: u32) -> Result<Option<(u32, u32)>, ConfigError> {
        if self.lr_side > 0 {
            if self.lr_side * self.rho != side {
                return Err(field_err(
                    "lr_side",
                    format!(
                        "{} x rho {} must equal the grid side {side}",
                        self.lr_side, self.rho
                    ),
                ));
            }
            return Ok(Some((self.lr_side, self.rho)));
        }
        if self.rho > 1 && side % self.rho == 0 && side / self.rho >= 1 {
            Ok(Some((side / self.rho, self.rho)))
        } else {
            Ok(None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse("# hi\n\n  grid_side = 32 # trailing\n").unwrap();
        assert_eq!(cfg.grid_side, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("grid_sied = 32\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn bad_values_name_the_field() {
        let err = RunConfig::parse("rho = banana\n").unwrap_err();
        assert!(err.to_string().contains("`rho`"), "{err}");
    }

    #[test]
    fn validation_names_fields() {
        let mut cfg = RunConfig::default();
        cfg.grid_side = 17;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("`grid_side`"), "{err}");
    }

    #[test]
    fn explicit_lr_side_must_tile_the_grid() {
        let mut cfg = RunConfig::default();
        cfg.lr_side = 32; // 32 * 4 != 256
        let err = cfg.anchor_for(cfg.grid_side).unwrap_err();
        assert!(err.to_string().contains("`lr_side`"), "{err}");
        cfg.lr_side = 64;
        assert_eq!(cfg.anchor_for(cfg.grid_side).unwrap(), Some((64, 4)));
    }

    #[test]
    fn auto_anchor_skips_indivisible_grids() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.anchor_for(1).unwrap(), None);
        assert_eq!(cfg.anchor_for(64).unwrap(), Some((16, 4)));
    }
}
