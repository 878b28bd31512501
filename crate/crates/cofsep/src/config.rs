//! Run configuration: desk-scale and full-scale profiles, training
//! hyperparameters, and the flat `key = value` config file.
//!
//! Profile geometry (sample rate, grid sizes, clip lengths) is fixed per
//! profile; training hyperparameters and the stage layout can be overridden
//! by a config file and by CLI flags, in that order.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Format version written into config snapshots and checkpoints.
pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Desk-scale: 64x64 warped grids, 16-frame 64x64 clips, narrow nets.
    Toy,
    /// Full-scale geometry: 256x256 grids, 48-frame 224x224 clips.
    Paper,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Profile::Toy => write!(f, "toy"),
            Profile::Paper => write!(f, "paper"),
        }
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::invalid(format!(
                "unknown profile '{other}' (expected toy|paper)"
            ))),
        }
    }
}

/// Vision representation choices for a cascade stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisionKind {
    C2dRgb,
    C2dDyn,
    C3dRgb,
    C3dFlo,
    MaRgb,
    MaFlo,
}

impl VisionKind {
    pub fn needs_flows(self) -> bool {
        matches!(self, VisionKind::C3dFlo | VisionKind::MaFlo)
    }
}

impl fmt::Display for VisionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VisionKind::C2dRgb => "c2d_rgb",
            VisionKind::C2dDyn => "c2d_dyn",
            VisionKind::C3dRgb => "c3d_rgb",
            VisionKind::C3dFlo => "c3d_flo",
            VisionKind::MaRgb => "ma_rgb",
            VisionKind::MaFlo => "ma_flo",
        };
        write!(f, "{s}")
    }
}

impl FromStr for VisionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c2d_rgb" => Ok(VisionKind::C2dRgb),
            "c2d_dyn" => Ok(VisionKind::C2dDyn),
            "c3d_rgb" => Ok(VisionKind::C3dRgb),
            "c3d_flo" => Ok(VisionKind::C3dFlo),
            "ma_rgb" => Ok(VisionKind::MaRgb),
            "ma_flo" => Ok(VisionKind::MaFlo),
            other => Err(Error::invalid(format!("unknown vision kind '{other}'"))),
        }
    }
}

/// Full run configuration. Geometry fields are derived from the profile;
/// the rest are tunable.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub profile: Profile,
    pub seed: u64,

    // Cascade layout.
    pub stages: usize,
    pub sources: usize,
    pub stage_visions: Vec<VisionKind>,
    pub stage_weights: Vec<f64>,
    /// One shared opponent-filter combiner per stage (default); when set,
    /// each ordered source pair gets its own combiner instead.
    pub combiner_per_pair: bool,

    // Optimization.
    pub batch_size: usize,
    pub total_iters: u64,
    pub lr_pretrained: f64,
    pub lr_scratch: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub checkpoint_every: u64,

    // Localization training.
    pub sslm_lambda: f64,
    pub sslm_iters: u64,
    pub sslm_lr: f64,

    // Evaluation.
    pub eval_mixtures: usize,
    pub bss_filter_len: usize,
}

impl Config {
    pub fn for_profile(profile: Profile) -> Config {
        let base = Config {
            profile,
            seed: 0,
            stages: 2,
            sources: 2,
            stage_visions: vec![VisionKind::C2dRgb, VisionKind::C2dDyn],
            stage_weights: vec![1.0, 1.0],
            combiner_per_pair: false,
            batch_size: 10,
            total_iters: 4000,
            lr_pretrained: 1e-4,
            lr_scratch: 1e-3,
            lr_decay_factor: 10.0,
            lr_decay_every: 1600,
            momentum: 0.9,
            weight_decay: 1e-4,
            checkpoint_every: 500,
            sslm_lambda: 0.05,
            sslm_iters: 400,
            sslm_lr: 1e-3,
            eval_mixtures: 20,
            bss_filter_len: 512,
        };
        match profile {
            Profile::Paper => base,
            // Desk-scale schedule: the synthetic corpus trains in ~400
            // iterations at a 10x higher scratch rate than the full-scale
            // schedule.
            Profile::Toy => Config {
                total_iters: 400,
                lr_scratch: 1e-2,
                lr_decay_every: 400,
                checkpoint_every: 200,
                sslm_iters: 150,
                ..base
            },
        }
    }

    // ---- profile geometry -------------------------------------------------

    pub fn sample_rate(&self) -> u32 {
        11_025
    }

    pub fn window_size(&self) -> usize {
        1022
    }

    pub fn hop(&self) -> usize {
        256
    }

    /// Training clip length in samples, chosen so the spectrogram has
    /// exactly `spec_cols` frames: `(cols - 1) * hop`.
    pub fn clip_samples(&self) -> usize {
        (self.spec_cols() - 1) * self.hop()
    }

    /// Warped spectrogram rows (HS).
    pub fn spec_rows(&self) -> usize {
        match self.profile {
            Profile::Paper => 256,
            Profile::Toy => 64,
        }
    }

    /// Spectrogram frames (WS).
    pub fn spec_cols(&self) -> usize {
        match self.profile {
            Profile::Paper => 256,
            Profile::Toy => 64,
        }
    }

    pub fn frame_size(&self) -> usize {
        match self.profile {
            Profile::Paper => 224,
            Profile::Toy => 64,
        }
    }

    pub fn frames_per_clip(&self) -> usize {
        match self.profile {
            Profile::Paper => 48,
            Profile::Toy => 16,
        }
    }

    pub fn fps(&self) -> u32 {
        8
    }

    /// Feature channel count K shared by vision and sound networks.
    pub fn feature_channels(&self) -> usize {
        16
    }

    pub fn backbone_widths(&self) -> [usize; 5] {
        match self.profile {
            Profile::Paper => [64, 64, 128, 256, 512],
            Profile::Toy => [8, 8, 16, 32, 64],
        }
    }

    pub fn c3d_widths(&self) -> [usize; 5] {
        match self.profile {
            Profile::Paper => [64, 64, 128, 256, 512],
            Profile::Toy => [8, 8, 16, 32, 64],
        }
    }

    pub fn unet_base(&self) -> usize {
        match self.profile {
            Profile::Paper => 32,
            Profile::Toy => 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 {
            return Err(Error::invalid("stages must be >= 1"));
        }
        if self.sources < 2 {
            return Err(Error::invalid("sources must be >= 2"));
        }
        if self.stage_visions.len() != self.stages {
            return Err(Error::invalid(format!(
                "stage_visions has {} entries for {} stages",
                self.stage_visions.len(),
                self.stages
            )));
        }
        if self.stage_weights.len() != self.stages {
            return Err(Error::invalid(format!(
                "stage_weights has {} entries for {} stages",
                self.stage_weights.len(),
                self.stages
            )));
        }
        if self.batch_size == 0 || self.total_iters == 0 {
            return Err(Error::invalid("batch_size and total_iters must be positive"));
        }
        if self.stage_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid("stage weights must be nonnegative"));
        }
        if self.frames_per_clip() % 8 != 0 {
            return Err(Error::invalid("frames_per_clip must be divisible by 8"));
        }
        Ok(())
    }

    /// Adjust the stage layout, extending vision kinds (later stages default
    /// to the dynamic-image path) and weights (1.0) as needed.
    pub fn with_stages(mut self, stages: usize) -> Config {
        self.stages = stages;
        while self.stage_visions.len() < stages {
            self.stage_visions.push(VisionKind::C2dDyn);
        }
        self.stage_visions.truncate(stages);
        while self.stage_weights.len() < stages {
            self.stage_weights.push(1.0);
        }
        self.stage_weights.truncate(stages);
        self
    }

    // ---- flat key-value serialization ---------------------------------------

    /// Deterministic `key = value` rendering (also embedded in checkpoints).
    pub fn to_kv_string(&self) -> String {
        let visions = self
            .stage_visions
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let weights = self
            .stage_weights
            .iter()
            .map(|w| format!("{w}"))
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        s.push_str(&format!("format_version = {CONFIG_FORMAT_VERSION}\n"));
        s.push_str(&format!("profile = {}\n", self.profile));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("stages = {}\n", self.stages));
        s.push_str(&format!("sources = {}\n", self.sources));
        s.push_str(&format!("stage_visions = {visions}\n"));
        s.push_str(&format!("stage_weights = {weights}\n"));
        s.push_str(&format!("combiner_per_pair = {}\n", self.combiner_per_pair));
        s.push_str(&format!("batch_size = {}\n", self.batch_size));
        s.push_str(&format!("total_iters = {}\n", self.total_iters));
        s.push_str(&format!("lr_pretrained = {}\n", self.lr_pretrained));
        s.push_str(&format!("lr_scratch = {}\n", self.lr_scratch));
        s.push_str(&format!("lr_decay_factor = {}\n", self.lr_decay_factor));
        s.push_str(&format!("lr_decay_every = {}\n", self.lr_decay_every));
        s.push_str(&format!("momentum = {}\n", self.momentum));
        s.push_str(&format!("weight_decay = {}\n", self.weight_decay));
        s.push_str(&format!("checkpoint_every = {}\n", self.checkpoint_every));
        s.push_str(&format!("sslm_lambda = {}\n", self.sslm_lambda));
        s.push_str(&format!("sslm_iters = {}\n", self.sslm_iters));
        s.push_str(&format!("sslm_lr = {}\n", self.sslm_lr));
        s.push_str(&format!("eval_mixtures = {}\n", self.eval_mixtures));
        s.push_str(&format!("bss_filter_len = {}\n", self.bss_filter_len));
        s
    }

    /// Apply `key = value` overrides onto `self`. Unknown keys are errors so
    /// typos fail loudly.
    pub fn apply_kv(&mut self, text: &str, origin: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("{origin}:{}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::invalid(format!(
                    "{origin}:{}: invalid {what} value '{value}'",
                    lineno + 1
                ))
            };
            match key {
                "format_version" => {
                    let v: u32 = value.parse().map_err(|_| bad("format_version"))?;
                    if v != CONFIG_FORMAT_VERSION {
                        return Err(Error::invalid(format!(
                            "{origin}: unsupported config format_version {v}"
                        )));
                    }
                }
                "profile" => self.apply_profile(value.parse()?),
                "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
                "stages" => {
                    let n: usize = value.parse().map_err(|_| bad("stages"))?;
                    *self = self.clone().with_stages(n);
                }
                "sources" => self.sources = value.parse().map_err(|_| bad("sources"))?,
                "stage_visions" => {
                    let kinds: Result<Vec<VisionKind>> =
                        value.split(',').map(|v| v.trim().parse()).collect();
                    self.stage_visions = kinds?;
                }
                "stage_weights" => {
                    let ws: std::result::Result<Vec<f64>, _> =
                        value.split(',').map(|v| v.trim().parse()).collect();
                    self.stage_weights = ws.map_err(|_| bad("stage_weights"))?;
                }
                "combiner_per_pair" => {
                    self.combiner_per_pair = value.parse().map_err(|_| bad("combiner_per_pair"))?
                }
                "batch_size" => self.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
                "total_iters" => {
                    self.total_iters = value.parse().map_err(|_| bad("total_iters"))?
                }
                "lr_pretrained" => {
                    self.lr_pretrained = value.parse().map_err(|_| bad("lr_pretrained"))?
                }
                "lr_scratch" => self.lr_scratch = value.parse().map_err(|_| bad("lr_scratch"))?,
                "lr_decay_factor" => {
                    self.lr_decay_factor = value.parse().map_err(|_| bad("lr_decay_factor"))?
                }
                "lr_decay_every" => {
                    self.lr_decay_every = value.parse().map_err(|_| bad("lr_decay_every"))?
                }
                "momentum" => self.momentum = value.parse().map_err(|_| bad("momentum"))?,
                "weight_decay" => {
                    self.weight_decay = value.parse().map_err(|_| bad("weight_decay"))?
                }
                "checkpoint_every" => {
                    self.checkpoint_every = value.parse().map_err(|_| bad("checkpoint_every"))?
                }
                "sslm_lambda" => {
                    self.sslm_lambda = value.parse().map_err(|_| bad("sslm_lambda"))?
                }
                "sslm_iters" => self.sslm_iters = value.parse().map_err(|_| bad("sslm_iters"))?,
                "sslm_lr" => self.sslm_lr = value.parse().map_err(|_| bad("sslm_lr"))?,
                "eval_mixtures" => {
                    self.eval_mixtures = value.parse().map_err(|_| bad("eval_mixtures"))?
                }
                "bss_filter_len" => {
                    self.bss_filter_len = value.parse().map_err(|_| bad("bss_filter_len"))?
                }
                other => {
                    return Err(Error::invalid(format!(
                        "{origin}:{}: unknown config key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(())
    }

    /// Switch profiles, re-deriving profile-scoped training defaults while
    /// keeping the cascade layout.
    fn apply_profile(&mut self, profile: Profile) {
        if profile == self.profile {
            return;
        }
        let fresh = Config::for_profile(profile);
        let stages = self.stages;
        let visions = self.stage_visions.clone();
        let weights = self.stage_weights.clone();
        let sources = self.sources;
        let seed = self.seed;
        *self = fresh;
        self.stages = stages;
        self.stage_visions = visions;
        self.stage_weights = weights;
        self.sources = sources;
        self.seed = seed;
    }

    pub fn load_file(path: &Path, base: Config) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = base;
        cfg.apply_kv(&text, &path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_kv(text: &str, base: Config) -> Result<Config> {
        let mut cfg = base;
        cfg.apply_kv(text, "<config>")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for Config {
    fn default() -> Self {
        Config::for_profile(Profile::Toy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip_is_lossless() {
        let mut cfg = Config::for_profile(Profile::Paper).with_stages(3);
        cfg.seed = 1234;
        cfg.sslm_lambda = 0.2;
        let text = cfg.to_kv_string();
        let back = Config::parse_kv(&text, Config::default()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn canonical_geometry() {
        let paper = Config::for_profile(Profile::Paper);
        assert_eq!(paper.clip_samples(), 65_280);
        assert_eq!(paper.spec_rows(), 256);
        assert_eq!(paper.spec_cols(), 256);
        assert_eq!(paper.frames_per_clip(), 48);
        assert_eq!(paper.batch_size, 10);
        assert_eq!(paper.total_iters, 4000);
        assert_eq!(paper.lr_decay_every, 1600);

        let toy = Config::for_profile(Profile::Toy);
        assert_eq!(toy.clip_samples(), 16_128);
        assert_eq!(toy.spec_rows(), 64);
        assert_eq!(toy.frames_per_clip(), 16);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = Config::parse_kv("no_such_key = 3\n", Config::default()).unwrap_err();
        assert!(err.to_string().contains("no_such_key"));
    }

    #[test]
    fn stage_mismatch_fails_validation() {
        let mut cfg = Config::default();
        cfg.stages = 3;
        assert!(cfg.validate().is_err());
        let ok = Config::default().with_stages(3);
        assert!(ok.validate().is_ok());
        assert_eq!(ok.stage_visions.len(), 3);
        assert_eq!(ok.stage_visions[2], VisionKind::C2dDyn);
    }
}
