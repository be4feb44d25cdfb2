//! Super token transformer blocks and the four-stage backbone.
//!
//! A block is `X = CPE(X_in) + X_in`, `Y = STA(LN(X)) + X`,
//! `Z = ConvFFN(BN(Y)) + Y`. The backbone is a convolutional stem (÷4),
//! four stages of blocks separated by stride-2 merging convolutions, and a
//! 1×1 projection + global pooling + linear classifier head.

mod checkpoint;
mod config;
mod layers;
mod model;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{ConfigFile, KNOWN_KEYS};
pub use layers::{
    block_params, conv_ffn, cpe, ffn_params, head, patch_merging, stem, stt_block, BlockSpec, BlockTrace, Ctx, Mode,
};
pub use model::{ForwardOutput, Model};
pub use params::{Entry, ParamKind, ParamStore};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sta::{PhantomMode, StaConfig};

/// Where positional information enters each stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PosEmbed {
    /// Residual depthwise 3×3 convolution at the start of every block.
    #[default]
    Cpe,
    /// Learned absolute embedding added once at the start of each stage.
    Ape,
    /// Learned relative-position logits inside each attention module.
    Rpe,
    None,
}

impl fmt::Display for PosEmbed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosEmbed::Cpe => "cpe",
            PosEmbed::Ape => "ape",
            PosEmbed::Rpe => "rpe",
            PosEmbed::None => "none",
        })
    }
}

impl FromStr for PosEmbed {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpe" => Ok(PosEmbed::Cpe),
            "ape" => Ok(PosEmbed::Ape),
            "rpe" => Ok(PosEmbed::Rpe),
            "none" => Ok(PosEmbed::None),
            other => {
                Err(Error::config(format!("unknown positional embedding `{other}` (expected cpe, ape, rpe or none)")))
            }
        }
    }
}

/// Whole-model hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub name: String,
    pub blocks: Vec<usize>,
    pub channels: Vec<usize>,
    pub heads: Vec<usize>,
    /// Super-token grid cell size per stage (square cells).
    pub grids: Vec<usize>,
    /// Output widths of the four stem convolutions.
    pub stem: [usize; 4],
    /// Input resolution (square).
    pub res: usize,
    pub n_classes: usize,
    pub proj_dim: usize,
    pub ffn_ratio: usize,
    pub n_iter: usize,
    pub phantom: PhantomMode,
    pub pos_embed: PosEmbed,
    pub ffn_shortcut: bool,
    /// Largest drop-path rate; block `i` of `d` uses `rate · i / (d − 1)`.
    pub drop_path: f64,
}

/// Names accepted by [`ArchConfig::preset`].
pub const PRESETS: &[&str] = &["svit-s", "svit-b", "svit-l", "tiny"];

impl ArchConfig {
    fn base(name: &str, blocks: [usize; 4], channels: [usize; 4], heads: [usize; 4], stem: [usize; 4]) -> Self {
        Self {
            name: name.to_string(),
            blocks: blocks.to_vec(),
            channels: channels.to_vec(),
            heads: heads.to_vec(),
            grids: vec![8, 4, 1, 1],
            stem,
            res: 224,
            n_classes: 1000,
            proj_dim: 1024,
            ffn_ratio: 4,
            n_iter: 1,
            phantom: PhantomMode::Literal,
            pos_embed: PosEmbed::Cpe,
            ffn_shortcut: true,
            drop_path: 0.0,
        }
    }

    pub fn svit_s() -> Self {
        Self {
            drop_path: 0.1,
            ..Self::base("svit-s", [3, 5, 9, 3], [64, 128, 320, 512], [1, 2, 5, 8], [32, 32, 64, 64])
        }
    }

    pub fn svit_b() -> Self {
        Self {
            drop_path: 0.4,
            ..Self::base("svit-b", [4, 6, 14, 6], [96, 192, 384, 512], [2, 3, 6, 8], [48, 48, 96, 96])
        }
    }

    pub fn svit_l() -> Self {
        Self {
            drop_path: 0.6,
            ..Self::base("svit-l", [4, 7, 19, 8], [96, 192, 448, 640], [2, 3, 7, 10], [48, 48, 96, 96])
        }
    }

    /// Desk-scale variant for 32×32 inputs.
    pub fn tiny() -> Self {
        Self {
            grids: vec![4, 2, 1, 1],
            res: 32,
            n_classes: 2,
            ..Self::base("tiny", [1, 1, 2, 1], [16, 32, 64, 128], [1, 2, 4, 8], [8, 8, 16, 16])
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "svit-s" => Ok(Self::svit_s()),
            "svit-b" => Ok(Self::svit_b()),
            "svit-l" => Ok(Self::svit_l()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config(format!("unknown architecture `{other}` (presets: {})", PRESETS.join(", ")))),
        }
    }

    /// Starts from `arch` (default `tiny`) and applies every architecture key
    /// present in `file`.
    pub fn from_config(file: &ConfigFile) -> Result<Self> {
        let mut cfg = Self::preset(file.raw("arch").unwrap_or("tiny"))?;
        if let Some(v) = file.get("res")? {
            cfg.res = v;
        }
        if let Some(v) = file.list("blocks")? {
            cfg.blocks = v;
        }
        if let Some(v) = file.list("channels")? {
            cfg.channels = v;
        }
        if let Some(v) = file.list("heads")? {
            cfg.heads = v;
        }
        if let Some(v) = file.list("grids")? {
            cfg.grids = v;
        }
        if let Some(v) = file.get("n_iter")? {
            cfg.n_iter = v;
        }
        if let Some(v) = file.get("phantom_mode")? {
            cfg.phantom = v;
        }
        if let Some(v) = file.get("drop_path")? {
            cfg.drop_path = v;
        }
        if let Some(v) = file.get("n_classes")? {
            cfg.n_classes = v;
        }
        if let Some(v) = file.get("pos_embed")? {
            cfg.pos_embed = v;
        }
        if let Some(v) = file.get("ffn_shortcut")? {
            cfg.ffn_shortcut = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `key = value` lines that [`ArchConfig::from_config`] maps back to
    /// this configuration.
    pub fn to_config_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        format!(
            "arch = {}\nres = {}\nblocks = {}\nchannels = {}\nheads = {}\ngrids = {}\nn_iter = {}\n\
             phantom_mode = {}\ndrop_path = {}\nn_classes = {}\npos_embed = {}\nffn_shortcut = {}\n",
            self.name,
            self.res,
            join(&self.blocks),
            join(&self.channels),
            join(&self.heads),
            join(&self.grids),
            self.n_iter,
            self.phantom,
            self.drop_path,
            self.n_classes,
            self.pos_embed,
            self.ffn_shortcut
        )
    }

    pub fn stages(&self) -> usize {
        self.blocks.len()
    }

    /// Token-grid side length of stage `s`.
    pub fn stage_extent(&self, s: usize) -> usize {
        (self.res / 4) >> s
    }

    pub fn sta_config(&self, s: usize) -> StaConfig {
        StaConfig {
            n_iter: self.n_iter,
            phantom: self.phantom,
            ..StaConfig::new(self.grids[s], self.grids[s], self.heads[s])
        }
    }

    /// Drop-path rate of each block in depth order.
    pub fn drop_rates(&self) -> Vec<f64> {
        let depth: usize = self.blocks.iter().sum();
        (0..depth).map(|i| if depth > 1 { self.drop_path * i as f64 / (depth - 1) as f64 } else { 0.0 }).collect()
    }

    /// Checks every stage's geometry; errors name the offending stage.
    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s == 0 || self.channels.len() != s || self.heads.len() != s || self.grids.len() != s {
            return Err(Error::config(format!(
                "blocks/channels/heads/grids must have equal non-zero lengths, got {}/{}/{}/{}",
                self.blocks.len(),
                self.channels.len(),
                self.heads.len(),
                self.grids.len()
            )));
        }
        if self.n_classes == 0 || self.proj_dim == 0 || self.ffn_ratio == 0 || self.stem.contains(&0) {
            return Err(Error::config("class count, projection width, FFN ratio and stem widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config(format!("drop_path {} outside [0, 1)", self.drop_path)));
        }
        if self.res == 0 || !self.res.is_multiple_of(4 << (s - 1)) {
            return Err(Error::config(format!(
                "resolution {} must be divisible by {} for {s} stages",
                self.res,
                4 << (s - 1)
            )));
        }
        for i in 0..s {
            let extent = self.stage_extent(i);
            let (c, h, g) = (self.channels[i], self.heads[i], self.grids[i]);
            if c == 0 || h == 0 || c % h != 0 {
                return Err(Error::config(format!("stage {}: {h} heads do not divide {c} channels", i + 1)));
            }
            if g == 0 || !extent.is_multiple_of(g) {
                return Err(Error::config(format!(
                    "stage {}: grid {g}×{g} does not divide the {extent}×{extent} token grid",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}
