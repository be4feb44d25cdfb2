use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamKind, ParamStore};
use super::PosEmbed;
use crate::error::{Error, Result};
use crate::sta::{sta_forward_traced, StaConfig, StaTrace, StaVars};
use crate::tensor::{Graph, Norm, Scalar, Tensor, Var};

/// Batch-norm behavior and whether drop-path is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State threaded through one forward pass.
pub struct Ctx<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    /// Training-mode batch-norm outputs, keyed by parameter prefix.
    pub bn_nodes: Vec<(String, Var)>,
    drop_rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self { g, store, mode, bn_nodes: Vec::new(), drop_rng: None }
    }

    /// Enables drop-path sampling in training mode.
    pub fn with_drop_rng(mut self, rng: &'a mut ChaCha8Rng) -> Self {
        self.drop_rng = Some(rng);
        self
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let value = self.store.get(name)?;
        Ok(self.g.param(name, value))
    }

    fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gain = self.param(&format!("{prefix}.gain"))?;
        let bias = self.param(&format!("{prefix}.bias"))?;
        match self.mode {
            Mode::Train => {
                let y = self.g.normalize(x, Norm::BatchTrain, gain, bias)?;
                self.bn_nodes.push((prefix.to_string(), y));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.store.get(&format!("{prefix}.running_mean"))?;
                let var = self.store.get(&format!("{prefix}.running_var"))?;
                self.g.normalize(x, Norm::BatchEval { mean, var }, gain, bias)
            }
        }
    }

    fn conv(&mut self, prefix: &str, x: Var, stride: usize, pad: usize, groups: usize, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = if bias { Some(self.param(&format!("{prefix}.bias"))?) } else { None };
        self.g.conv2d(x, w, b, stride, pad, groups)
    }

    /// Zeroes the whole branch for a random subset of samples and rescales
    /// the rest by `1 / (1 − rate)`.
    fn drop_path(&mut self, branch: Var, rate: f64) -> Result<Var> {
        if self.mode != Mode::Train || rate <= 0.0 {
            return Ok(branch);
        }
        let Some(rng) = self.drop_rng.as_deref_mut() else {
            return Ok(branch);
        };
        let shape = self.g.shape(branch).to_vec();
        let mut mask_shape = vec![1; shape.len()];
        mask_shape[0] = shape[0];
        let keep = T::cst(1.0 / (1.0 - rate));
        let mask = Tensor::from_fn(&mask_shape, |_| if rng.random::<f64>() < rate { T::zero() } else { keep });
        let mask = self.g.constant(mask);
        self.g.mul(branch, mask)
    }
}

/// Per-block settings.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub sta: StaConfig,
    pub pos_embed: PosEmbed,
    pub ffn_shortcut: bool,
    pub drop_rate: f64,
}

/// Attention intermediates of one block.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub prefix: String,
    pub stage: usize,
    /// Layer-normalized tokens fed to the attention module.
    pub sta_input: Var,
    pub sta: StaTrace,
    pub cfg: StaConfig,
}

/// `CPE(X) + X` with a biased depthwise 3×3 convolution.
pub fn cpe<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let b = ctx.param(&format!("{prefix}.bias"))?;
    let y = ctx.g.depthwise_conv3x3(x, w, Some(b))?;
    ctx.g.add(y, x)
}

/// 1×1 expand → depthwise 3×3 (optionally with a skip across it) → GELU →
/// 1×1 reduce. The outer residual is left to the caller.
pub fn conv_ffn<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, x: Var, shortcut: bool) -> Result<Var> {
    let h = ctx.conv(&format!("{prefix}.fc1"), x, 1, 0, 1, true)?;
    let mut d = ctx.conv(&format!("{prefix}.dw"), h, 1, 1, ctx.g.shape(h)[1], true)?;
    if shortcut {
        d = ctx.g.add(d, h)?;
    }
    let a = ctx.g.gelu(d)?;
    ctx.conv(&format!("{prefix}.fc2"), a, 1, 0, 1, true)
}

/// One super token transformer block.
pub fn stt_block<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    stage: usize,
    x: Var,
    spec: &BlockSpec,
) -> Result<(Var, BlockTrace)> {
    let x = if spec.pos_embed == PosEmbed::Cpe { cpe(ctx, &format!("{prefix}.cpe"), x)? } else { x };
    let gain = ctx.param(&format!("{prefix}.ln.gain"))?;
    let bias = ctx.param(&format!("{prefix}.ln.bias"))?;
    let normed = ctx.g.normalize(x, Norm::Layer, gain, bias)?;
    let vars = StaVars {
        w_q: ctx.param(&format!("{prefix}.sta.w_q"))?,
        w_k: ctx.param(&format!("{prefix}.sta.w_k"))?,
        w_v: ctx.param(&format!("{prefix}.sta.w_v"))?,
        w_o: ctx.param(&format!("{prefix}.sta.w_o"))?,
        rel_bias: if spec.pos_embed == PosEmbed::Rpe {
            Some(ctx.param(&format!("{prefix}.sta.rel_bias"))?)
        } else {
            None
        },
    };
    let sta = sta_forward_traced(ctx.g, normed, &spec.sta, &vars)?;
    let branch = ctx.drop_path(sta.output, spec.drop_rate)?;
    let y = ctx.g.add(x, branch)?;
    let normed_y = ctx.batch_norm(&format!("{prefix}.bn"), y)?;
    let ffn = conv_ffn(ctx, &format!("{prefix}.ffn"), normed_y, spec.ffn_shortcut)?;
    let branch = ctx.drop_path(ffn, spec.drop_rate)?;
    let z = ctx.g.add(y, branch)?;
    let trace = BlockTrace { prefix: prefix.to_string(), stage, sta_input: normed, sta, cfg: spec.sta.clone() };
    Ok((z, trace))
}

/// Strides of the four stem convolutions.
pub const STEM_STRIDES: [usize; 4] = [2, 1, 2, 1];

/// Four 3×3 convolutions (strides 2, 1, 2, 1), each followed by BN and GELU.
pub fn stem<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let shape = ctx.g.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != 3 || !shape[2].is_multiple_of(4) || !shape[3].is_multiple_of(4) {
        return Err(Error::dim(format!("stem expects [b, 3, H, W] with H and W divisible by 4, got {shape:?}")));
    }
    let mut h = x;
    for (i, stride) in STEM_STRIDES.into_iter().enumerate() {
        h = ctx.conv(&format!("stem.{i}.conv"), h, stride, 1, 1, false)?;
        h = ctx.batch_norm(&format!("stem.{i}.bn"), h)?;
        h = ctx.g.gelu(h)?;
    }
    Ok(h)
}

/// 3×3 stride-2 convolution followed by BN.
pub fn patch_merging<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let h = ctx.conv(&format!("{prefix}.conv"), x, 2, 1, 1, false)?;
    ctx.batch_norm(&format!("{prefix}.bn"), h)
}

/// 1×1 projection + BN + Swish, global average pooling, linear classifier.
pub fn head<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let h = ctx.conv("head.proj.conv", x, 1, 0, 1, false)?;
    let h = ctx.batch_norm("head.proj.bn", h)?;
    let h = ctx.g.swish(h)?;
    let pooled = ctx.g.adaptive_avg_pool(h, 1, 1)?;
    let (b, d) = (ctx.g.shape(pooled)[0], ctx.g.shape(pooled)[1]);
    let pooled = ctx.g.reshape(pooled, &[b, d])?;
    let w = ctx.param("head.fc.weight")?;
    let bias = ctx.param("head.fc.bias")?;
    let k = ctx.g.shape(bias)[0];
    let logits = ctx.g.matmul(pooled, w)?;
    let bias = ctx.g.reshape(bias, &[1, k])?;
    ctx.g.add(logits, bias)
}

// ---- declarations ------------------------------------------------------

pub(crate) fn declare_bn(init: &mut Init<'_>, prefix: &str, c: usize) -> Result<()> {
    init.fill(&format!("{prefix}.gain"), &[c], 1.0, ParamKind::NoDecay)?;
    init.fill(&format!("{prefix}.bias"), &[c], 0.0, ParamKind::NoDecay)?;
    init.fill(&format!("{prefix}.running_mean"), &[c], 0.0, ParamKind::Buffer)?;
    init.fill(&format!("{prefix}.running_var"), &[c], 1.0, ParamKind::Buffer)
}

fn declare_pointwise(init: &mut Init<'_>, prefix: &str, cin: usize, cout: usize, bias: bool) -> Result<()> {
    init.trunc_normal(&format!("{prefix}.weight"), &[cout, cin, 1, 1], ParamKind::Weight)?;
    if bias {
        init.fill(&format!("{prefix}.bias"), &[cout], 0.0, ParamKind::NoDecay)?;
    }
    Ok(())
}

fn declare_depthwise(init: &mut Init<'_>, prefix: &str, c: usize) -> Result<()> {
    init.fan_out_normal(&format!("{prefix}.weight"), &[c, 1, 3, 3], c)?;
    init.fill(&format!("{prefix}.bias"), &[c], 0.0, ParamKind::NoDecay)
}

pub(crate) fn declare_ffn(init: &mut Init<'_>, prefix: &str, c: usize, ratio: usize) -> Result<()> {
    let hidden = c * ratio;
    declare_pointwise(init, &format!("{prefix}.fc1"), c, hidden, true)?;
    declare_depthwise(init, &format!("{prefix}.dw"), hidden)?;
    declare_pointwise(init, &format!("{prefix}.fc2"), hidden, c, true)
}

/// `rel_span` is `(2p − 1)·(2q − 1)` when relative-position logits are used.
pub(crate) fn declare_block(
    init: &mut Init<'_>,
    prefix: &str,
    c: usize,
    heads: usize,
    pos: PosEmbed,
    rel_span: usize,
    ratio: usize,
) -> Result<()> {
    if pos == PosEmbed::Cpe {
        declare_depthwise(init, &format!("{prefix}.cpe"), c)?;
    }
    init.fill(&format!("{prefix}.ln.gain"), &[c], 1.0, ParamKind::NoDecay)?;
    init.fill(&format!("{prefix}.ln.bias"), &[c], 0.0, ParamKind::NoDecay)?;
    for w in ["w_q", "w_k", "w_v", "w_o"] {
        init.trunc_normal(&format!("{prefix}.sta.{w}"), &[c, c], ParamKind::Weight)?;
    }
    if pos == PosEmbed::Rpe {
        init.trunc_normal(&format!("{prefix}.sta.rel_bias"), &[heads, rel_span], ParamKind::NoDecay)?;
    }
    declare_bn(init, &format!("{prefix}.bn"), c)?;
    declare_ffn(init, &format!("{prefix}.ffn"), c, ratio)
}

pub(crate) fn declare_stem(init: &mut Init<'_>, plan: [usize; 4]) -> Result<()> {
    let mut cin = 3;
    for (i, &cout) in plan.iter().enumerate() {
        init.fan_out_normal(&format!("stem.{i}.conv.weight"), &[cout, cin, 3, 3], 1)?;
        declare_bn(init, &format!("stem.{i}.bn"), cout)?;
        cin = cout;
    }
    Ok(())
}

pub(crate) fn declare_merge(init: &mut Init<'_>, prefix: &str, cin: usize, cout: usize) -> Result<()> {
    init.fan_out_normal(&format!("{prefix}.conv.weight"), &[cout, cin, 3, 3], 1)?;
    declare_bn(init, &format!("{prefix}.bn"), cout)
}

pub(crate) fn declare_head(init: &mut Init<'_>, cin: usize, proj: usize, n_classes: usize) -> Result<()> {
    declare_pointwise(init, "head.proj.conv", cin, proj, false)?;
    declare_bn(init, "head.proj.bn", proj)?;
    init.trunc_normal("head.fc.weight", &[proj, n_classes], ParamKind::Weight)?;
    init.fill("head.fc.bias", &[n_classes], 0.0, ParamKind::NoDecay)
}

fn standalone(seed: u64, f: impl FnOnce(&mut Init<'_>) -> Result<()>) -> Result<ParamStore<f32>> {
    use rand::SeedableRng;
    let mut store = ParamStore::new();
    f(&mut Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) })?;
    Ok(store)
}

/// Freshly initialized parameters of a single [`stt_block`] under `prefix`,
/// named and initialized as a full model would declare them. `rel_span` is
/// only used with [`PosEmbed::Rpe`].
pub fn block_params(
    prefix: &str,
    c: usize,
    heads: usize,
    pos: PosEmbed,
    rel_span: usize,
    ffn_ratio: usize,
    seed: u64,
) -> Result<ParamStore<f32>> {
    standalone(seed, |init| declare_block(init, prefix, c, heads, pos, rel_span, ffn_ratio))
}

/// Freshly initialized parameters of a single [`conv_ffn`] under `prefix`.
pub fn ffn_params(prefix: &str, c: usize, ffn_ratio: usize, seed: u64) -> Result<ParamStore<f32>> {
    standalone(seed, |init| declare_ffn(init, prefix, c, ffn_ratio))
}
