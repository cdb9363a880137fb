//! Architecture configuration, presets and JSON (de)serialisation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the global tokens are refined before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    /// Channel MLP `Linear(GELU(Linear(G)))`.
    Normal,
    /// Channel linear, then a token-axis linear on the transposed tokens.
    Mix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalKind {
    ConvEncoder,
    WindowMsa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DsKind {
    StepWise,
    OneStep,
}

/// How global tokens interact with the image tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalMode {
    /// 2-D grid fused with the aggregated map by weighted sum.
    PositionAwareSum,
    /// 1-D token list updated by attention over itself and the image tokens.
    NormalMsa,
    /// 2-D grid updated by attention over itself and the aggregated map.
    PositionAwareMsa,
}

impl GlobalMode {
    pub fn is_position_aware(self) -> bool {
        !matches!(self, GlobalMode::NormalMsa)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
    pub heads: usize,
    /// Input side over feature-map side: 8, 16 or 32.
    pub stride: usize,
    pub dw_kernel: usize,
    /// Conv-then-pool repetitions after the first 2× pooling.
    pub ds_steps: usize,
    /// Image tokens already sit on the token grid: no local branch, no pooling.
    pub skip_local_and_ds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub stages: Vec<StageConfig>,
    /// Side of the position-aware token grid.
    pub token_grid: usize,
    /// Token count for the 1-D global-token mode.
    pub normal_tokens: usize,
    pub alpha: f64,
    pub mlp_kind: MlpKind,
    /// Hidden width of the normal token MLP as a multiple of C.
    pub token_mlp_ratio: usize,
    pub local_kind: LocalKind,
    pub window: usize,
    pub ds_kind: DsKind,
    pub ds_kernel: usize,
    pub global_mode: GlobalMode,
    pub ffn_ratio: usize,
    pub bidim_enabled: bool,
    pub stem_hidden: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
    pub input_resolution: usize,
}

/// Per-block settings resolved from a [`ModelConfig`] and one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub dw_kernel: usize,
    pub ds_steps: usize,
    pub ds_kernel: usize,
    pub alpha: f64,
    pub token_grid: usize,
    pub normal_tokens: usize,
    pub mlp_kind: MlpKind,
    pub token_mlp_ratio: usize,
    pub local_kind: LocalKind,
    pub window: usize,
    pub ds_kind: DsKind,
    pub global_mode: GlobalMode,
    pub ffn_ratio: usize,
    pub bidim: bool,
    pub skip_local_and_ds: bool,
}

impl BlockConfig {
    /// Layout `(rows, cols)` of the global tokens carried by this block.
    pub fn token_layout(&self) -> (usize, usize) {
        if self.global_mode.is_position_aware() {
            (self.token_grid, self.token_grid)
        } else {
            (1, self.normal_tokens)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return bad(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if self.token_grid == 0 || self.normal_tokens == 0 {
            return bad("token count must be positive".into());
        }
        if self.dw_kernel.is_multiple_of(2) || self.ds_kernel.is_multiple_of(2) {
            return bad("kernel sizes must be odd for same padding".into());
        }
        if self.window == 0 || self.ffn_ratio == 0 || self.token_mlp_ratio == 0 {
            return bad("window and ratios must be positive".into());
        }
        Ok(())
    }
}

impl ModelConfig {
    pub fn block_config(&self, stage: usize) -> BlockConfig {
        let s = &self.stages[stage];
        BlockConfig {
            channels: s.channels,
            heads: s.heads,
            dw_kernel: s.dw_kernel,
            ds_steps: s.ds_steps,
            ds_kernel: self.ds_kernel,
            alpha: self.alpha,
            token_grid: self.token_grid,
            normal_tokens: self.normal_tokens,
            mlp_kind: self.mlp_kind,
            token_mlp_ratio: self.token_mlp_ratio,
            local_kind: self.local_kind,
            window: self.window,
            ds_kind: self.ds_kind,
            global_mode: self.global_mode,
            ffn_ratio: self.ffn_ratio,
            bidim: self.bidim_enabled,
            skip_local_and_ds: s.skip_local_and_ds,
        }
    }

    pub fn token_layout(&self) -> (usize, usize) {
        self.block_config(0).token_layout()
    }

    /// Structural checks independent of the input resolution.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.len() != 3 {
            return bad(format!("expected 3 stages, got {}", self.stages.len()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let expected = 8 << i;
            if s.stride != expected {
                return bad(format!("stage {} stride {} (expected {expected})", i + 1, s.stride));
            }
            if s.blocks == 0 {
                return bad(format!("stage {} has no blocks", i + 1));
            }
            self.block_config(i)
                .validate()
                .map_err(|e| Error::Config(format!("stage {}: {e}", i + 1)))?;
        }
        if self.num_classes == 0 || self.stem_hidden == 0 || self.head_hidden == 0 {
            return bad("num_classes, stem_hidden and head_hidden must be positive".into());
        }
        Ok(())
    }

    /// Checks that an input side is compatible with every stage.
    pub fn validate_resolution(&self, side: usize) -> Result<()> {
        if side == 0 || !side.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input side {side} must be a positive multiple of 32"
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let map = side / s.stride;
            let runs_local = !s.skip_local_and_ds;
            if runs_local && self.local_kind == LocalKind::WindowMsa && !map.is_multiple_of(self.window) {
                return Err(Error::Config(format!(
                    "stage {}: {map}x{map} map not divisible into {}x{} windows",
                    i + 1,
                    self.window,
                    self.window
                )));
            }
            if runs_local && self.global_mode.is_position_aware() {
                let reduce = 1usize << (s.ds_steps + 1);
                if !map.is_multiple_of(reduce) {
                    return Err(Error::Config(format!(
                        "stage {}: {map}x{map} map cannot be pooled {} times",
                        i + 1,
                        s.ds_steps + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Side of the map the aggregation attention sees in `stage` for input
    /// side `side` (before any resize onto the token grid).
    pub fn aggregation_side(&self, stage: usize, side: usize) -> usize {
        let s = &self.stages[stage];
        let map = side / s.stride;
        if s.skip_local_and_ds {
            map
        } else {
            map >> (s.ds_steps + 1)
        }
    }

    /// Every stage pools exactly onto the token grid, so no resize is needed.
    pub fn exact_grid(&self, side: usize) -> bool {
        self.global_mode.is_position_aware()
            && (0..self.stages.len()).all(|i| self.aggregation_side(i, side) == self.token_grid)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "dualtoken_t" => Ok(dualtoken_t(MlpKind::Normal)),
            "dualtoken_t_mix" => Ok(dualtoken_t(MlpKind::Mix)),
            "dualtoken_s" => Ok(dualtoken_s(MlpKind::Normal)),
            "dualtoken_s_mix" => Ok(dualtoken_s(MlpKind::Mix)),
            "toy" => Ok(toy()),
            "toy_224" => Ok(toy_224()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }
}

pub const PRESETS: [&str; 6] = [
    "dualtoken_t",
    "dualtoken_t_mix",
    "dualtoken_s",
    "dualtoken_s_mix",
    "toy",
    "toy_224",
];

fn stages(channels: [usize; 3], blocks: [usize; 3], heads: [usize; 3]) -> Vec<StageConfig> {
    // Stage 3 already sits on the 7×7 grid at 224² input.
    let dw = [5, 7, 7];
    let ds = [1, 0, 0];
    (0..3)
        .map(|i| StageConfig {
            blocks: blocks[i],
            channels: channels[i],
            heads: heads[i],
            stride: 8 << i,
            dw_kernel: dw[i],
            ds_steps: ds[i],
            skip_local_and_ds: i == 2,
        })
        .collect()
}

fn base(name: String, stages: Vec<StageConfig>, mlp_kind: MlpKind) -> ModelConfig {
    ModelConfig {
        name,
        stages,
        token_grid: 7,
        normal_tokens: 8,
        alpha: 0.1,
        mlp_kind,
        token_mlp_ratio: 1,
        local_kind: LocalKind::ConvEncoder,
        window: 7,
        ds_kind: DsKind::StepWise,
        ds_kernel: 3,
        global_mode: GlobalMode::PositionAwareSum,
        ffn_ratio: 4,
        bidim_enabled: true,
        stem_hidden: 0,
        head_hidden: 1280,
        num_classes: 1000,
        input_resolution: 224,
    }
}

fn suffix(mlp: MlpKind) -> &'static str {
    match mlp {
        MlpKind::Normal => "",
        MlpKind::Mix => "_mix",
    }
}

pub fn dualtoken_t(mlp: MlpKind) -> ModelConfig {
    let mut c = base(
        format!("dualtoken_t{}", suffix(mlp)),
        stages([48, 96, 192], [2, 6, 4], [2, 4, 8]),
        mlp,
    );
    c.stem_hidden = 24;
    c
}

pub fn dualtoken_s(mlp: MlpKind) -> ModelConfig {
    let mut c = base(
        format!("dualtoken_s{}", suffix(mlp)),
        stages([64, 128, 256], [2, 6, 6], [2, 4, 8]),
        mlp,
    );
    c.stem_hidden = 32;
    c
}

/// Tiny 32²-input configuration with a 2×2 token grid for tests and training.
pub fn toy() -> ModelConfig {
    let mut stages = stages([8, 16, 32], [1, 1, 1], [2, 2, 4]);
    for s in &mut stages {
        s.dw_kernel = 3;
        s.ds_steps = 0;
    }
    ModelConfig {
        name: "toy".into(),
        stages,
        token_grid: 2,
        normal_tokens: 4,
        alpha: 0.1,
        mlp_kind: MlpKind::Normal,
        token_mlp_ratio: 1,
        local_kind: LocalKind::ConvEncoder,
        window: 7,
        ds_kind: DsKind::StepWise,
        ds_kernel: 3,
        global_mode: GlobalMode::PositionAwareSum,
        ffn_ratio: 4,
        bidim_enabled: true,
        stem_hidden: 4,
        head_hidden: 32,
        num_classes: 8,
        input_resolution: 32,
    }
}

/// Toy widths at 224² with the full-size 7×7 grid and pooling ladder, so
/// window attention and exact grid arithmetic can be exercised cheaply.
pub fn toy_224() -> ModelConfig {
    let mut c = toy();
    c.name = "toy_224".into();
    for (s, ds) in c.stages.iter_mut().zip([1, 0, 0]) {
        s.ds_steps = ds;
    }
    c.token_grid = 7;
    c.normal_tokens = 8;
    c.input_resolution = 224;
    c
}
