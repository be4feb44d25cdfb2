//! Super-token segmentations and anchor-attention heatmaps.
//!
//! The segmentation assigns every token to the super token holding the
//! largest association weight among its in-bounds neighbor slots, computed
//! against the initial (grid-mean) super tokens. The heatmap is one row of
//! the dense effective attention `Q · A(S) · M`, averaged over heads.

use std::fmt;
use std::str::FromStr;

use crate::blocks::{Mode, Model};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::sta::{compute_association, init_super_tokens, sta_dense_oracle, to_cells, StaConfig, StaWeights};
use crate::tensor::{Graph, Tensor};

/// Which tokens are visualized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FeatureSource {
    /// The normalized input of the stage's first attention block, with that
    /// block's weights.
    #[default]
    Model,
    /// Raw RGB pixels averaged down to the stage's token grid, one head,
    /// identity projections.
    Pixels,
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSource::Model => "model",
            FeatureSource::Pixels => "pixels",
        })
    }
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(FeatureSource::Model),
            "pixels" | "image" => Ok(FeatureSource::Pixels),
            other => Err(Error::config(format!("unknown feature source `{other}` (expected model or pixels)"))),
        }
    }
}

/// Rendered maps plus the numbers they were drawn from.
#[derive(Clone, Debug)]
pub struct Visualization {
    pub token_h: usize,
    pub token_w: usize,
    /// Super-token grid `p × q`.
    pub super_grid: (usize, usize),
    /// Super-token index per token, raster order.
    pub labels: Vec<usize>,
    /// Anchor token `(y, x)` on the token grid.
    pub anchor_token: (usize, usize),
    /// Head-averaged effective attention from the anchor to every token.
    pub attention_row: Vec<f64>,
    /// RGB, image-sized.
    pub segmentation: Image,
    /// Gray, image-sized, maximum mapped to 255.
    pub heatmap: Image,
}

impl Visualization {
    pub fn m(&self) -> usize {
        self.super_grid.0 * self.super_grid.1
    }

    pub fn region_count(&self) -> usize {
        let mut seen = vec![false; self.m()];
        self.labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    }
}

/// Tokens `[1, C, h, w]`, attention config and weights for `stage`
/// (0-based) of `model` applied to `image`.
pub fn stage_features(
    model: &Model,
    image: &Image,
    stage: usize,
    source: FeatureSource,
) -> Result<(Tensor<f64>, StaConfig, StaWeights<f64>)> {
    let cfg = &model.cfg;
    if stage >= cfg.stages() {
        return Err(Error::Usage(format!("stage {} out of range 1..={}", stage + 1, cfg.stages())));
    }
    if image.height != cfg.res || image.width != cfg.res || image.channels != 3 {
        return Err(Error::dim(format!(
            "expected a {0}×{0} RGB image, got {1}×{2}×{3}",
            cfg.res, image.height, image.width, image.channels
        )));
    }
    match source {
        FeatureSource::Model => {
            let mut g = Graph::<f32>::new();
            let x = g.constant(image.to_tensor());
            let out = model.forward(&mut g, x, Mode::Eval, None)?;
            let trace = out
                .blocks
                .iter()
                .find(|t| t.stage == stage)
                .ok_or_else(|| Error::config(format!("stage {} has no blocks", stage + 1)))?;
            let w = model.sta_weights(&trace.prefix)?;
            Ok((g.value(trace.sta_input).cast(), trace.cfg.clone(), w.cast()))
        }
        FeatureSource::Pixels => {
            let side = cfg.stage_extent(stage);
            let x = image.resize_exact(side, side)?.to_tensor().cast();
            let sta = StaConfig { heads: 1, ..cfg.sta_config(stage) };
            let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
            let w = StaWeights { w_q: eye.clone(), w_k: eye.clone(), w_v: eye.clone(), w_o: eye, rel_bias: None };
            Ok((x, sta, w))
        }
    }
}

/// Super-token label of every token of `x: [1, C, h, w]` under the
/// association against the initial super tokens. Each token takes the
/// in-bounds slot with the largest weight; exact ties go to the token's
/// own cell when it is among the maxima, otherwise to the lowest slot.
pub fn segment(x: &Tensor<f64>, cfg: &StaConfig) -> Result<(Vec<usize>, (usize, usize))> {
    let geom = cfg.geometry(x.shape())?;
    if geom.batch != 1 {
        return Err(Error::dim("segmentation takes one image"));
    }
    let (h, w) = (geom.height, geom.width);
    if cfg.is_identity_grid() {
        return Ok(((0..h * w).collect(), (h, w)));
    }
    let (p, q) = (geom.p(), geom.q());
    let (gh, gw) = (geom.grid_h, geom.grid_w);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let s = init_super_tokens(&mut g, xv, cfg)?;
    let cells = to_cells(&mut g, xv, &geom)?;
    let assoc = compute_association(&mut g, cells, &s, cfg)?;
    let weights = g.value(assoc.weights).data();

    let mut labels = vec![0; h * w];
    for cell in 0..p * q {
        let (cy, cx) = (cell / q, cell % q);
        for k in 0..gh * gw {
            let row = &weights[(cell * gh * gw + k) * 9..][..9];
            let mut best: Option<(usize, usize)> = None;
            for slot in [4, 0, 1, 2, 3, 5, 6, 7, 8] {
                let (ny, nx) = (cy as isize + slot as isize / 3 - 1, cx as isize + slot as isize % 3 - 1);
                if ny < 0 || nx < 0 || ny >= p as isize || nx >= q as isize {
                    continue;
                }
                if best.is_none_or(|(b, _)| row[slot] > row[b]) {
                    best = Some((slot, ny as usize * q + nx as usize));
                }
            }
            let (ty, tx) = (cy * gh + k / gw, cx * gw + k % gw);
            labels[ty * w + tx] = best.expect("the home slot is always in bounds").1;
        }
    }
    Ok((labels, (p, q)))
}

/// Deterministic, well-separated colors.
fn palette(label: usize) -> [u8; 3] {
    let hue = (label as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let to = |v: f64| (60.0 + 195.0 * v).round() as u8;
    [to(r), to(g), to(b)]
}

/// Labels on an `h × w` token grid drawn at `scale` pixels per token, with
/// black pixels wherever the label changes to the right or below.
pub fn render_segmentation(labels: &[usize], h: usize, w: usize, scale: usize) -> Image {
    let (ih, iw) = (h * scale, w * scale);
    let at = |y: usize, x: usize| labels[(y / scale) * w + x / scale];
    let mut img = Image::filled(iw, ih, [0, 0, 0]);
    for y in 0..ih {
        for x in 0..iw {
            let l = at(y, x);
            let edge = (x + 1 < iw && at(y, x + 1) != l) || (y + 1 < ih && at(y + 1, x) != l);
            if !edge {
                img.pixel_mut(y, x).copy_from_slice(&palette(l));
            }
        }
    }
    img
}

/// Nonnegative token values drawn at `scale` pixels per token, linearly
/// mapped so the maximum becomes 255. An all-zero row renders black.
pub fn render_heatmap(values: &[f64], h: usize, w: usize, scale: usize) -> Result<Image> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "heatmap" });
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let (ih, iw) = (h * scale, w * scale);
    let mut data = Vec::with_capacity(ih * iw);
    for y in 0..ih {
        for x in 0..iw {
            let v = values[(y / scale) * w + x / scale].max(0.0);
            data.push(if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 });
        }
    }
    Image::new(iw, ih, 1, data)
}

/// Segmentation and anchor heatmap for `stage` (0-based). `anchor` is
/// `(y, x)` in image pixels.
pub fn visualize(
    model: &Model,
    image: &Image,
    stage: usize,
    anchor: (usize, usize),
    source: FeatureSource,
) -> Result<Visualization> {
    if anchor.0 >= image.height || anchor.1 >= image.width {
        return Err(Error::Usage(format!(
            "anchor {},{} outside the {}×{} image",
            anchor.0, anchor.1, image.height, image.width
        )));
    }
    let (x, cfg, w) = stage_features(model, image, stage, source)?;
    let (th, tw) = (x.shape()[2], x.shape()[3]);
    let scale = image.height / th;
    let (labels, super_grid) = segment(&x, &cfg)?;

    let dense = sta_dense_oracle(&x, &cfg, &w)?;
    let n = th * tw;
    let anchor_token = (anchor.0 / scale, anchor.1 / scale);
    let row = anchor_token.0 * tw + anchor_token.1;
    let eff = dense.effective_attention.data();
    let attention_row: Vec<f64> =
        (0..n).map(|j| (0..cfg.heads).map(|hd| eff[(hd * n + row) * n + j]).sum::<f64>() / cfg.heads as f64).collect();

    Ok(Visualization {
        token_h: th,
        token_w: tw,
        super_grid,
        segmentation: render_segmentation(&labels, th, tw, scale),
        heatmap: render_heatmap(&attention_row, th, tw, scale)?,
        labels,
        anchor_token,
        attention_row,
    })
}
