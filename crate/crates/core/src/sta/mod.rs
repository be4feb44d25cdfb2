//! Super token attention.
//!
//! Tokens `X: [b, C, H, W]` are softly clustered into `m = (H/h)·(W/w)`
//! super tokens, each token associating only with the 3×3 block of super
//! tokens around its own grid cell. Multi-head self-attention runs over the
//! super tokens, and the result is mapped back to the token grid through the
//! same sparse association.
//!
//! The sparse path ([`sta_forward`]) runs on a [`Graph`] and is
//! differentiable. [`sta_dense_oracle`] and [`gsa_forward`] are plain-loop
//! dense implementations used to check it.

mod attention;
mod oracle;
mod sampling;
mod upsample;

pub use attention::{mhsa, mhsa_super, relative_position_index, MhsaOutput};
pub use oracle::{dense_mhsa, gsa_forward, sta_dense_oracle, DenseSta, ORACLE_MAX_ENTRIES};
pub use sampling::{
    compute_association, from_cells, init_super_tokens, phantom_keep_mask, sts, to_cells, update_super_tokens,
};
pub use upsample::token_upsample;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Treatment of neighbor slots that fall outside the super-token grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PhantomMode {
    /// Out-of-bounds slots hold a zero super token (zero-padded unfold), so
    /// they get logit 0 and keep their share of softmax mass.
    #[default]
    Literal,
    /// Out-of-bounds slots are excluded from the softmax.
    Masked,
}

impl fmt::Display for PhantomMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhantomMode::Literal => "literal",
            PhantomMode::Masked => "masked",
        })
    }
}

impl FromStr for PhantomMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(PhantomMode::Literal),
            "masked" => Ok(PhantomMode::Masked),
            other => Err(Error::config(format!("unknown phantom mode `{other}` (expected literal or masked)"))),
        }
    }
}

/// Hyperparameters of one super token attention module.
#[derive(Clone, Debug, PartialEq)]
pub struct StaConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub heads: usize,
    pub n_iter: usize,
    pub eps: f64,
    pub phantom: PhantomMode,
}

impl Default for StaConfig {
    fn default() -> Self {
        Self { grid_h: 1, grid_w: 1, heads: 1, n_iter: 1, eps: 1e-12, phantom: PhantomMode::Literal }
    }
}

impl StaConfig {
    pub fn new(grid_h: usize, grid_w: usize, heads: usize) -> Self {
        Self { grid_h, grid_w, heads, ..Self::default() }
    }

    pub fn with_iters(mut self, n_iter: usize) -> Self {
        self.n_iter = n_iter;
        self
    }

    pub fn with_phantom(mut self, phantom: PhantomMode) -> Self {
        self.phantom = phantom;
        self
    }

    /// A 1×1 grid means every token is its own super token; sampling and
    /// upsampling are skipped.
    pub fn is_identity_grid(&self) -> bool {
        self.grid_h == 1 && self.grid_w == 1
    }

    /// Validates the config against an input of shape `[b, c, h, w]`.
    pub fn geometry(&self, shape: &[usize]) -> Result<Geometry> {
        let [b, c, h, w] = match *shape {
            [b, c, h, w] => [b, c, h, w],
            ref s => return Err(Error::dim(format!("super token attention expects [b, c, h, w], got {s:?}"))),
        };
        if self.grid_h == 0 || self.grid_w == 0 || h % self.grid_h != 0 || w % self.grid_w != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "grid {}×{} does not divide token grid {h}×{w}",
                self.grid_h, self.grid_w
            )));
        }
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::config(format!("{} heads do not divide {c} channels", self.heads)));
        }
        Ok(Geometry { batch: b, channels: c, height: h, width: w, grid_h: self.grid_h, grid_w: self.grid_w })
    }
}

/// Token and super-token extents for one input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Geometry {
    /// Super-token rows.
    pub fn p(&self) -> usize {
        self.height / self.grid_h
    }

    /// Super-token columns.
    pub fn q(&self) -> usize {
        self.width / self.grid_w
    }

    /// Super-token count.
    pub fn m(&self) -> usize {
        self.p() * self.q()
    }

    /// Token count.
    pub fn n(&self) -> usize {
        self.height * self.width
    }

    /// Tokens per grid cell.
    pub fn cell_len(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Super tokens `S: [b, C, p, q]` recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct SuperTokens {
    pub tokens: Var,
    pub geom: Geometry,
}

/// Sparse association `Q: [b, p·q, h·w, 9]`: for each grid cell and each
/// token inside it, softmax weights over the 9 surrounding super-token slots
/// (slot order row-major over offsets −1..=1).
#[derive(Clone, Copy, Debug)]
pub struct AssociationMap {
    pub weights: Var,
    pub geom: Geometry,
}

impl AssociationMap {
    /// Per-super-token sum of association weights, `[b, 1, p, q]`.
    pub fn column_sums<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        let per_slot = g.sum_axis(self.weights, 2)?;
        let per_slot = g.transpose(per_slot, 1, 2)?;
        g.fold3x3(per_slot, self.geom.p(), self.geom.q())
    }
}

/// Projection weights of one attention module, `y = x·W` with `W: [C, C]`.
/// `rel_bias`, when present, is a `[heads, (2p−1)·(2q−1)]` table of learned
/// relative-position logits over the super-token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct StaWeights<T: Scalar = f32> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub rel_bias: Option<Tensor<T>>,
}

impl<T: Scalar> StaWeights<T> {
    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn check(&self, c: usize) -> Result<()> {
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            if w.shape() != [c, c] {
                return Err(Error::dim(format!("{name} has shape {:?}, expected [{c}, {c}]", w.shape())));
            }
        }
        Ok(())
    }

    /// Registers the weights on `g` as named parameters under `prefix`.
    pub fn bind(&self, g: &mut Graph<T>, prefix: &str) -> StaVars {
        StaVars {
            w_q: g.param(&format!("{prefix}.w_q"), &self.w_q),
            w_k: g.param(&format!("{prefix}.w_k"), &self.w_k),
            w_v: g.param(&format!("{prefix}.w_v"), &self.w_v),
            w_o: g.param(&format!("{prefix}.w_o"), &self.w_o),
            rel_bias: self.rel_bias.as_ref().map(|t| g.param(&format!("{prefix}.rel_bias"), t)),
        }
    }

    pub fn cast<U: Scalar>(&self) -> StaWeights<U> {
        StaWeights {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            w_o: self.w_o.cast(),
            rel_bias: self.rel_bias.as_ref().map(Tensor::cast),
        }
    }
}

/// Graph handles of [`StaWeights`].
#[derive(Clone, Copy, Debug)]
pub struct StaVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub rel_bias: Option<Var>,
}

/// Intermediate values of one [`sta_forward_traced`] call.
#[derive(Clone, Copy, Debug)]
pub struct StaTrace {
    pub output: Var,
    /// `None` for a 1×1 grid.
    pub association: Option<AssociationMap>,
    pub super_tokens: Option<SuperTokens>,
    /// `[b, heads, m, m]`
    pub attention: Var,
}

/// Super token attention on `[b, C, H, W]` tokens; output has the input shape.
pub fn sta_forward<T: Scalar>(g: &mut Graph<T>, x: Var, cfg: &StaConfig, w: &StaVars) -> Result<Var> {
    Ok(sta_forward_traced(g, x, cfg, w)?.output)
}

/// [`sta_forward`], also returning the association, super tokens and
/// super-token attention map.
pub fn sta_forward_traced<T: Scalar>(g: &mut Graph<T>, x: Var, cfg: &StaConfig, w: &StaVars) -> Result<StaTrace> {
    let geom = cfg.geometry(g.shape(x))?;
    if cfg.is_identity_grid() {
        let (b, c, h, wd) = (geom.batch, geom.channels, geom.height, geom.width);
        let flat = g.reshape(x, &[b, c, h * wd])?;
        let tokens = g.transpose(flat, 1, 2)?;
        let MhsaOutput { output, attention } = attention::mhsa_on_grid(g, tokens, w, cfg.heads, (h, wd))?;
        let out = g.transpose(output, 1, 2)?;
        let output = g.reshape(out, &[b, c, h, wd])?;
        return Ok(StaTrace { output, association: None, super_tokens: None, attention });
    }
    let (s, assoc) = sts(g, x, cfg)?;
    let (attended, attention) = mhsa_super(g, &s, w, cfg.heads)?;
    let output = token_upsample(g, &assoc, attended)?;
    Ok(StaTrace { output, association: Some(assoc), super_tokens: Some(s), attention })
}
