//! Declarative network configuration, validation, and the preset catalogue.
//!
//! Sub-network lists (`scale_of_base`, `blocks`, `base_channels`,
//! `growth_rates`) are stored bottom-up: index 0 is sub-network 1, the one
//! operating at the lowest resolution (scale 1), which answers first. The
//! published architecture tables list the same quantities top-down (largest
//! scale first); presets perform that reversal once, here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How many dense layers each block gets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum StepMode {
    /// Every block has `step` layers.
    Even { step: usize },
    /// Block `i` (1-based within its sub-network) has `base + (i-1)*increment` layers.
    LinearGrowth { base: usize, increment: usize },
}

impl StepMode {
    pub fn layers_in_block(&self, block_index: usize) -> usize {
        match *self {
            StepMode::Even { step } => step,
            StepMode::LinearGrowth { base, increment } => base + (block_index - 1) * increment,
        }
    }
}

/// Full architectural description of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RANetConfig {
    /// Number of distinct spatial scales S; scale 1 is the lowest resolution.
    pub num_scales: usize,
    /// Starting scale of each sub-network's base feature, bottom-up,
    /// non-decreasing, length H.
    pub scale_of_base: Vec<usize>,
    /// Blocks per sub-network b_1..b_H, strictly increasing.
    pub blocks: Vec<usize>,
    /// Base-feature channels per sub-network, bottom-up.
    pub base_channels: Vec<usize>,
    /// Dense growth rate per sub-network, bottom-up.
    pub growth_rates: Vec<usize>,
    pub step_mode: StepMode,
    /// Fraction of each fusion layer's new channels taken from the previous
    /// sub-network; in (0, 1).
    #[serde(default = "default_fusion_compression")]
    pub fusion_compression: f64,
    /// Bottleneck width multiplier for the 1x1 conv inside composite conv layers.
    #[serde(default = "default_bottleneck_multiplier")]
    pub bottleneck_multiplier: usize,
    pub num_classes: usize,
    pub input_resolution: (usize, usize),
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
}

fn default_fusion_compression() -> f64 {
    0.25
}

fn default_bottleneck_multiplier() -> usize {
    4
}

fn default_input_channels() -> usize {
    3
}

/// One invariant violation found by [`validate_config`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigViolation {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Quantities derived from a valid configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedConfig {
    /// Per sub-network (bottom-up), 1-based indices of blocks that downsample.
    pub downsample_blocks: Vec<Vec<usize>>,
    /// Per sub-network, 1-based indices of blocks followed by a classifier.
    pub classifier_blocks: Vec<Vec<usize>>,
    /// Per sub-network, layer count of each block.
    pub layers_per_block: Vec<Vec<usize>>,
    /// Total classifier count K.
    pub num_classifiers: usize,
}

impl RANetConfig {
    pub fn num_subnetworks(&self) -> usize {
        self.base_channels.len()
    }

    /// Spatial size of feature maps at `scale` (1 = lowest resolution).
    pub fn resolution_at_scale(&self, scale: usize) -> (usize, usize) {
        let div = 1 << (self.num_scales - scale);
        (self.input_resolution.0 / div, self.input_resolution.1 / div)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config parse error: {}", e)))
    }
}

/// Check every structural invariant; on success return the derived layout.
pub fn validate_config(cfg: &RANetConfig) -> std::result::Result<DerivedConfig, Vec<ConfigViolation>> {
    let mut errs: Vec<ConfigViolation> = Vec::new();
    macro_rules! push {
        ($field:expr, $msg:expr $(,)?) => {
            errs.push(ConfigViolation { field: $field.to_string(), message: $msg })
        };
    }

    let h = cfg.base_channels.len();
    let s = cfg.num_scales;
    if s == 0 {
        push!("num_scales", "must be at least 1".into());
    }
    if h == 0 {
        push!("base_channels", "at least one sub-network required".into());
    }
    if h < s {
        push!("scale_of_base", format!("H = {} base features cannot cover S = {} scales", h, s));
    }
    for (name, len) in [
        ("scale_of_base", cfg.scale_of_base.len()),
        ("blocks", cfg.blocks.len()),
        ("growth_rates", cfg.growth_rates.len()),
    ] {
        if len != h {
            push!(name, format!("length {} does not match {} sub-networks", len, h));
        }
    }
    if !errs.is_empty() {
        return Err(errs);
    }

    for (i, &sc) in cfg.scale_of_base.iter().enumerate() {
        if sc < 1 || sc > s {
            push!("scale_of_base", format!("entry {} = {} outside [1, {}]", i + 1, sc, s));
        }
        if i > 0 && sc < cfg.scale_of_base[i - 1] {
            push!("scale_of_base", "must be non-decreasing bottom-up".into());
        }
        if sc > i + 1 {
            push!(
                "scale_of_base",
                format!(
                    "sub-network {} starts at scale {}: needs {} downsampling fusion positions but only {} earlier sub-networks exist",
                    i + 1,
                    sc,
                    sc - 1,
                    i
                ),
            );
        }
    }
    if cfg.scale_of_base.last().copied() != Some(s) {
        push!("scale_of_base", format!("largest scale {} must be reached", s));
    }
    for i in 1..h {
        if cfg.blocks[i] <= cfg.blocks[i - 1] {
            push!("blocks", "b_h must be strictly increasing".into());
        }
    }
    if cfg.blocks.iter().any(|&b| b == 0) {
        push!("blocks", "every sub-network needs at least one block".into());
    }
    if cfg.base_channels.iter().any(|&c| c == 0) {
        push!("base_channels", "channel counts must be positive".into());
    }
    if cfg.growth_rates.iter().any(|&g| g == 0) {
        push!("growth_rates", "growth rates must be positive".into());
    }
    let div = 1usize << (s.saturating_sub(1));
    if cfg.input_resolution.0 % div != 0 || cfg.input_resolution.1 % div != 0 {
        push!(
            "input_resolution",
            format!(
                "resolution {}x{} not divisible by {}",
                cfg.input_resolution.0, cfg.input_resolution.1, div
            ),
        );
    }
    if !(cfg.fusion_compression > 0.0 && cfg.fusion_compression < 1.0) {
        push!("fusion_compression", "must lie strictly between 0 and 1".into());
    }
    if cfg.bottleneck_multiplier == 0 {
        push!("bottleneck_multiplier", "must be positive".into());
    }
    if cfg.num_classes < 2 {
        push!("num_classes", "need at least two classes".into());
    }
    match cfg.step_mode {
        StepMode::Even { step } if step == 0 => push!("step_mode", "step must be positive".into()),
        StepMode::LinearGrowth { base, .. } if base == 0 => {
            push!("step_mode", "base layer count must be positive".into())
        }
        _ => {}
    }
    if cfg.input_channels == 0 {
        push!("input_channels", "must be positive".into());
    }
    if !errs.is_empty() {
        return Err(errs);
    }

    // Derived layout. Sub-network h starting at scale s_h downsamples
    // s_h - 1 times, at blocks b_{h-1}, b_{h-2}, ..., b_{h-(s_h-1)}.
    let mut downsample_blocks = Vec::with_capacity(h);
    let mut classifier_blocks = Vec::with_capacity(h);
    let mut layers_per_block = Vec::with_capacity(h);
    let mut num_classifiers = 0;
    for idx in 0..h {
        let b = cfg.blocks[idx];
        let sh = cfg.scale_of_base[idx];
        let mut down: Vec<usize> = (0..sh - 1).map(|j| cfg.blocks[idx - 1 - j]).collect();
        down.sort_unstable();
        let ncls = b.min(2);
        let cls: Vec<usize> = (b - ncls + 1..=b).collect();
        num_classifiers += cls.len();
        downsample_blocks.push(down);
        classifier_blocks.push(cls);
        layers_per_block.push((1..=b).map(|i| cfg.step_mode.layers_in_block(i)).collect());
    }
    Ok(DerivedConfig { downsample_blocks, classifier_blocks, layers_per_block, num_classifiers })
}

/// Convenience wrapper collapsing violations into a single error.
pub fn validate_or_error(cfg: &RANetConfig) -> Result<DerivedConfig> {
    validate_config(cfg).map_err(|errs| {
        let msgs: Vec<String> = errs.iter().map(|e| e.to_string()).collect();
        Error::Config(msgs.join("; "))
    })
}

/// Known preset names, as accepted by [`load_preset`].
pub const PRESET_NAMES: &[&str] =
    &["model-c-1", "model-c-2", "model-c-3", "model-i-1", "model-i-2", "model-c-1-mini", "mini"];

/// Published architecture presets plus two desk-scale configurations.
///
/// `model-c-*` / `model-i-*` follow the published tables (channel and growth
/// lists there run top-down; they are stored bottom-up). `model-c-1-mini` is
/// Model-C-1 with all widths divided by four; `mini` is a two-sub-network
/// smoke configuration for 8x8 inputs.
///
/// `model-i-*` use 56x56 inputs: that is the resolution of their largest base
/// feature, and the 224->56 ingestion stem is out of scope here.
pub fn load_preset(name: &str, step_mode: StepMode) -> Result<RANetConfig> {
    let cfg = match name {
        "model-c-1" => RANetConfig {
            num_scales: 3,
            scale_of_base: vec![1, 2, 3],
            blocks: vec![2, 4, 6],
            base_channels: vec![64, 32, 16],
            growth_rates: vec![24, 12, 6],
            step_mode,
            fusion_compression: 0.25,
            bottleneck_multiplier: 4,
            num_classes: 10,
            input_resolution: (32, 32),
            input_channels: 3,
        },
        "model-c-2" => RANetConfig {
            num_scales: 3,
            scale_of_base: vec![1, 2, 2, 3],
            blocks: vec![2, 4, 6, 8],
            base_channels: vec![64, 32, 32, 16],
            growth_rates: vec![24, 12, 12, 6],
            step_mode,
            fusion_compression: 0.25,
            bottleneck_multiplier: 4,
            num_classes: 10,
            input_resolution: (32, 32),
            input_channels: 3,
        },
        "model-c-3" => RANetConfig {
            num_scales: 3,
            scale_of_base: vec![1, 1, 2, 3],
            blocks: vec![2, 4, 6, 8],
            base_channels: vec![64, 32, 16, 16],
            growth_rates: vec![24, 12, 6, 6],
            step_mode,
            fusion_compression: 0.25,
            bottleneck_multiplier: 4,
            num_classes: 10,
            input_resolution: (32, 32),
            input_channels: 3,
        },
        "model-i-1" => RANetConfig {
            num_scales: 4,
            scale_of_base: vec![1, 2, 3, 4],
            blocks: vec![2, 4, 6, 8],
            base_channels: vec![128, 64, 64, 32],
            growth_rates: vec![64, 32, 32, 16],
            step_mode,
            fusion_compression: 0.25,
            bottleneck_multiplier: 4,
            num_classes: 1000,
            input_resolution: (56, 56),
            input_channels: 3,
        },
        "model-i-2" => RANetConfig {
            num_scales: 4,
            scale_of_base: vec![1, 2, 3, 4],
            blocks: vec![2, 4, 6, 8],
            base_channels: vec![256, 128, 128, 64],
            growth_rates: vec![64, 32, 32, 16],
            step_mode,
            fusion_compression: 0.25,
            bottleneck_multiplier: 4,
            num_classes: 1000,
            input_resolution: (56, 56),
            input_channels: 3,
        },
        "model-c-1-mini" => RANetConfig {
            num_scales: 3,
            scale_of_base: vec![1, 2, 3],
            blocks: vec![2, 4, 6],
            base_channels: vec![16, 8, 4],
            growth_rates: vec![6, 3, 2],
            step_mode,
            fusion_compression: 0.25,
            bottleneck_multiplier: 4,
            num_classes: 10,
            input_resolution: (32, 32),
            input_channels: 3,
        },
        "mini" => RANetConfig {
            num_scales: 2,
            scale_of_base: vec![1, 2],
            blocks: vec![1, 2],
            base_channels: vec![8, 4],
            growth_rates: vec![4, 3],
            step_mode: StepMode::Even { step: 1 },
            fusion_compression: 0.25,
            bottleneck_multiplier: 4,
            num_classes: 10,
            input_resolution: (8, 8),
            input_channels: 3,
        },
        other => {
            return Err(Error::Usage(format!(
                "unknown preset '{}', expected one of {:?}",
                other, PRESET_NAMES
            )))
        }
    };
    Ok(cfg)
}

/// Default step modes used by the CLI: `even` with 4 layers for CIFAR-sized
/// presets, 8 for the larger ones (per the published tables), 1 for `mini`.
pub fn default_step_mode(name: &str) -> StepMode {
    match name {
        "model-i-1" | "model-i-2" => StepMode::Even { step: 8 },
        "mini" => StepMode::Even { step: 1 },
        _ => StepMode::Even { step: 4 },
    }
}

/// The linear-growth flavour of the published CIFAR presets.
pub fn lg_step_mode() -> StepMode {
    StepMode::LinearGrowth { base: 2, increment: 2 }
}
