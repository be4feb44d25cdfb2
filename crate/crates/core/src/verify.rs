//! Self-check suites run by `stoken verify`.
//!
//! - `oracle`: sparse super token attention against the dense reference on
//!   every small grid geometry, in both phantom modes and both precisions
//! - `gradcheck`: reverse-mode gradients against central differences
//! - `invariants`: row-stochasticity, adjointness and equivariances

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    block_params, conv_ffn, ffn_params, stt_block, BlockSpec, Ctx, Mode, ParamKind, ParamStore, PosEmbed,
};
use crate::error::{Error, Result};
use crate::sta::{
    compute_association, gsa_forward, init_super_tokens, mhsa, phantom_keep_mask, sta_dense_oracle, sta_forward,
    to_cells, PhantomMode, StaConfig, StaWeights,
};
use crate::tensor::{finite_difference, relative_error, Graph, Scalar, Tensor};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const ORACLE_TOL_F32: f64 = 1e-5;
pub const ORACLE_TOL_F64: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Oracle,
    Gradcheck,
    Invariants,
    All,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Oracle => "oracle",
            Suite::Gradcheck => "gradcheck",
            Suite::Invariants => "invariants",
            Suite::All => "all",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Suite::Oracle),
            "gradcheck" => Ok(Suite::Gradcheck),
            "invariants" => Ok(Suite::Invariants),
            "all" => Ok(Suite::All),
            other => {
                Err(Error::Usage(format!("unknown suite `{other}` (expected oracle, gradcheck, invariants or all)")))
            }
        }
    }
}

/// One measured quantity against its tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub id: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub note: String,
}

impl Check {
    /// Passes when `measured < tolerance`.
    pub fn below(id: impl Into<String>, measured: f64, tolerance: f64, note: impl Into<String>) -> Self {
        Self { id: id.into(), measured, tolerance, passed: measured < tolerance, note: note.into() }
    }

    /// Passes only when `measured` is exactly zero.
    pub fn zero(id: impl Into<String>, measured: f64, note: impl Into<String>) -> Self {
        Self { id: id.into(), measured, tolerance: 0.0, passed: measured == 0.0, note: note.into() }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let rel = if self.tolerance == 0.0 { "==" } else { "<" };
        write!(f, "{verdict}  {:<44} err {:.3e} {rel} {:.0e}", self.id, self.measured, self.tolerance)?;
        if !self.note.is_empty() {
            write!(f, "  ({})", self.note)?;
        }
        Ok(())
    }
}

/// Runs `suite` and returns its checks sorted by id.
pub fn run(suite: Suite) -> Result<Vec<Check>> {
    let mut checks = match suite {
        Suite::Oracle => oracle_checks()?,
        Suite::Gradcheck => gradient_checks()?,
        Suite::Invariants => invariant_checks()?,
        Suite::All => {
            let mut all = oracle_checks()?;
            all.extend(gradient_checks()?);
            all.extend(invariant_checks()?);
            all
        }
    };
    checks.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(checks)
}

/// `passed/total` line.
pub fn summary(checks: &[Check]) -> String {
    let passed = checks.iter().filter(|c| c.passed).count();
    let worst = checks.iter().filter(|c| !c.passed).map(|c| c.id.as_str()).collect::<Vec<_>>();
    if worst.is_empty() {
        format!("{passed}/{} checks passed", checks.len())
    } else {
        format!("{passed}/{} checks passed; failed: {}", checks.len(), worst.join(", "))
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Projections with entries uniform in `±1/√C`.
pub fn random_weights(c: usize, rng: &mut ChaCha8Rng) -> StaWeights<f64> {
    let s = 1.0 / (c as f64).sqrt();
    StaWeights {
        w_q: uniform(&[c, c], rng, s),
        w_k: uniform(&[c, c], rng, s),
        w_v: uniform(&[c, c], rng, s),
        w_o: uniform(&[c, c], rng, s),
        rel_bias: None,
    }
}

/// Evaluates [`sta_forward`] on a fresh graph.
pub fn sta_value<T: Scalar>(x: &Tensor<T>, cfg: &StaConfig, w: &StaWeights<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = w.bind(&mut g, "sta");
    let y = sta_forward(&mut g, xv, cfg, &vars)?;
    Ok(g.value(y).clone())
}

fn oracle_checks() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0A11);
    let mut checks = Vec::new();
    for c in [1, 4, 8] {
        let heads = if c == 1 { 1 } else { 2 };
        for phantom in [PhantomMode::Literal, PhantomMode::Masked] {
            let (mut e32, mut e64, mut count) = (0f64, 0f64, 0);
            for p in 1..=3 {
                for q in 1..=3 {
                    for gh in [1, 2, 4] {
                        for gw in [1, 2, 4] {
                            let x = uniform(&[2, c, p * gh, q * gw], &mut rng, 1.0);
                            let w = random_weights(c, &mut rng);
                            let cfg = StaConfig::new(gh, gw, heads).with_phantom(phantom);
                            let dense = sta_dense_oracle(&x, &cfg, &w)?.output;
                            e64 = e64.max(sta_value(&x, &cfg, &w)?.max_abs_diff(&dense)?);
                            let (x32, w32) = (x.cast::<f32>(), w.cast::<f32>());
                            let dense = sta_dense_oracle(&x32, &cfg, &w32)?.output;
                            e32 = e32.max(sta_value(&x32, &cfg, &w32)?.max_abs_diff(&dense)?);
                            count += 1;
                        }
                    }
                }
            }
            let note = format!("{count} geometries, p,q∈{{1,2,3}}, h,w∈{{1,2,4}}");
            checks.push(Check::below(format!("oracle/f32/{phantom}/C{c}"), e32, ORACLE_TOL_F32, &note));
            checks.push(Check::below(format!("oracle/f64/{phantom}/C{c}"), e64, ORACLE_TOL_F64, &note));
        }
    }

    // a 1×1 grid is plain global attention
    let (mut e32, mut e64) = (0f64, 0f64);
    for (c, h, w, heads) in [(4, 3, 5, 2), (8, 4, 4, 4), (1, 2, 2, 1), (6, 1, 7, 3)] {
        let x = uniform(&[2, c, h, w], &mut rng, 1.0);
        let wt = random_weights(c, &mut rng);
        let cfg = StaConfig::new(1, 1, heads);
        e64 = e64.max(sta_value(&x, &cfg, &wt)?.max_abs_diff(&gsa_forward(&x, &wt, heads)?)?);
        let (x32, w32) = (x.cast::<f32>(), wt.cast::<f32>());
        e32 = e32.max(sta_value(&x32, &cfg, &w32)?.max_abs_diff(&gsa_forward(&x32, &w32, heads)?)?);
    }
    checks.push(Check::below("oracle/degenerate-grid/f32", e32, 1e-6, "4 shapes vs global attention"));
    checks.push(Check::below("oracle/degenerate-grid/f64", e64, 1e-12, "4 shapes vs global attention"));
    Ok(checks)
}

/// Relative error between the tape gradient `f(x).1` and central
/// differences of `f(x).0`.
fn grad_error(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>) -> Result<f64> {
    let (_, tape) = f(x)?;
    let fd = finite_difference(|t| Ok(f(t)?.0), x, FD_STEP)?;
    Ok(relative_error(tape.data(), fd.data()))
}

/// Which leaf a loss is differentiated with respect to.
#[derive(Clone, Copy)]
enum Wrt<'a> {
    Input,
    Param(&'a str),
}

/// `⟨r, y⟩` for a random probe `r`, so every output coordinate matters.
fn probe_loss(
    g: &mut Graph<f64>,
    y: crate::tensor::Var,
    r: &Tensor<f64>,
    x: crate::tensor::Var,
    wrt: Wrt<'_>,
) -> Result<(f64, Tensor<f64>)> {
    let rv = g.constant(r.clone());
    let prod = g.mul(y, rv)?;
    let loss = g.sum(prod)?;
    let grads = g.backward(loss)?;
    let grad = match wrt {
        Wrt::Input => grads.get(x),
        Wrt::Param(name) => grads.param(name),
    }
    .cloned()
    .ok_or_else(|| Error::Usage("gradient missing for the checked leaf".into()))?;
    Ok((g.value(loss).data()[0], grad))
}

fn sta_gradient_checks(rng: &mut ChaCha8Rng, phantom: PhantomMode) -> Result<Vec<Check>> {
    let cfg = StaConfig::new(2, 2, 2).with_phantom(phantom);
    let x0 = uniform(&[1, 4, 4, 4], rng, 1.0);
    let w0 = random_weights(4, rng);
    let r = uniform(x0.shape(), rng, 1.0);
    let run = |x: &Tensor<f64>, w: &StaWeights<f64>, wrt: Wrt<'_>| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let vars = w.bind(&mut g, "sta");
        let y = sta_forward(&mut g, xv, &cfg, &vars)?;
        probe_loss(&mut g, y, &r, xv, wrt)
    };
    let mut checks = vec![Check::below(
        format!("gradcheck/sta_forward/{phantom}/X"),
        grad_error(&x0, |x| run(x, &w0, Wrt::Input))?,
        GRAD_TOL,
        "H=W=4, grid 2×2, C=4",
    )];
    for name in ["w_q", "w_k", "w_v", "w_o"] {
        let full = format!("sta.{name}");
        let current = |w: &StaWeights<f64>| match name {
            "w_q" => w.w_q.clone(),
            "w_k" => w.w_k.clone(),
            "w_v" => w.w_v.clone(),
            _ => w.w_o.clone(),
        };
        let err = grad_error(&current(&w0), |t| {
            let mut w = w0.clone();
            *match name {
                "w_q" => &mut w.w_q,
                "w_k" => &mut w.w_k,
                "w_v" => &mut w.w_v,
                _ => &mut w.w_o,
            } = t.clone();
            run(&x0, &w, Wrt::Param(&full))
        })?;
        checks.push(Check::below(
            format!("gradcheck/sta_forward/{phantom}/{name}"),
            err,
            GRAD_TOL,
            "H=W=4, grid 2×2, C=4",
        ));
    }
    Ok(checks)
}

/// Worst relative error over the input and every trainable tensor of
/// `store`, for a layer run by `forward` under a random probe.
fn layer_gradient_error<F>(
    store: &ParamStore<f64>,
    x0: &Tensor<f64>,
    r: &Tensor<f64>,
    forward: F,
) -> Result<(f64, f64, usize)>
where
    F: Fn(&mut Ctx<'_, f64>, crate::tensor::Var) -> Result<crate::tensor::Var>,
{
    let run = |store: &ParamStore<f64>, x: &Tensor<f64>, wrt: Wrt<'_>| {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, store, Mode::Train);
        let xv = ctx.g.leaf(x.clone());
        let y = forward(&mut ctx, xv)?;
        probe_loss(&mut g, y, r, xv, wrt)
    };
    let input = grad_error(x0, |x| run(store, x, Wrt::Input))?;
    let mut params = 0f64;
    let mut count = 0;
    for e in store.entries() {
        if e.kind == ParamKind::Buffer {
            continue;
        }
        count += 1;
        let err = grad_error(&e.value, |t| {
            let mut s = store.clone();
            *s.get_mut(&e.name)? = t.clone();
            run(&s, x0, Wrt::Param(&e.name))
        })?;
        params = params.max(err);
    }
    Ok((input, params, count))
}

fn gradient_checks() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x06AD);
    let mut checks = sta_gradient_checks(&mut rng, PhantomMode::Literal)?;
    checks.extend(sta_gradient_checks(&mut rng, PhantomMode::Masked)?);

    let store: ParamStore<f64> = perturbed(ffn_params("ffn", 4, 4, 1)?.cast(), &mut rng);
    let x0 = uniform(&[2, 4, 3, 3], &mut rng, 1.0);
    let r = uniform(x0.shape(), &mut rng, 1.0);
    let (input, params, n) = layer_gradient_error(&store, &x0, &r, |ctx, x| conv_ffn(ctx, "ffn", x, true))?;
    checks.push(Check::below("gradcheck/conv_ffn/X", input, GRAD_TOL, "C=4, ratio 4"));
    checks.push(Check::below("gradcheck/conv_ffn/params", params, GRAD_TOL, format!("worst of {n} tensors")));

    let store: ParamStore<f64> = perturbed(block_params("blk", 4, 2, PosEmbed::Cpe, 0, 4, 2)?.cast(), &mut rng);
    let x0 = uniform(&[2, 4, 4, 4], &mut rng, 1.0);
    let r = uniform(x0.shape(), &mut rng, 1.0);
    let spec = BlockSpec { sta: StaConfig::new(2, 2, 2), pos_embed: PosEmbed::Cpe, ffn_shortcut: true, drop_rate: 0.0 };
    let (input, params, n) = layer_gradient_error(&store, &x0, &r, |ctx, x| Ok(stt_block(ctx, "blk", 0, x, &spec)?.0))?;
    checks.push(Check::below("gradcheck/stt_block/X", input, GRAD_TOL, "training-mode BN, grid 2×2, C=4"));
    checks.push(Check::below("gradcheck/stt_block/params", params, GRAD_TOL, format!("worst of {n} tensors")));

    let logits = uniform(&[4, 5], &mut rng, 2.0);
    let labels = [0, 3, 4, 3];
    let err = grad_error(&logits, |t| {
        let mut g = Graph::new();
        let lv = g.leaf(t.clone());
        let loss = g.cross_entropy(lv, &labels)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).data()[0], grads.get(lv).cloned().expect("leaf gradient")))
    })?;
    checks.push(Check::below("gradcheck/cross_entropy/logits", err, GRAD_TOL, "4×5"));
    Ok(checks)
}

/// Adds noise to every trainable tensor so zero-initialized biases and
/// unit gains do not hide errors.
fn perturbed(mut store: ParamStore<f64>, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    for e in store.entries_mut() {
        if e.kind != ParamKind::Buffer {
            e.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
    store
}

/// `Q` against the initial super tokens, `[b, p·q, h·w, 9]`.
fn association_of<T: Scalar>(x: &Tensor<T>, cfg: &StaConfig) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let s = init_super_tokens(&mut g, xv, cfg)?;
    let cells = to_cells(&mut g, xv, &s.geom)?;
    let q = compute_association(&mut g, cells, &s, cfg)?;
    Ok(g.value(q.weights).clone())
}

/// Rolls `[b, c, h, w]` by `(dy, dx)` with wrap-around.
fn roll(x: &Tensor<f64>, dy: usize, dx: usize) -> Tensor<f64> {
    let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    Tensor::from_fn(&[b, c, h, w], |i| {
        let (bc, y, xx) = (i / (h * w), (i / w) % h, i % w);
        x.data()[bc * h * w + ((y + h - dy) % h) * w + (xx + w - dx) % w]
    })
}

fn flip_w(x: &Tensor<f64>) -> Tensor<f64> {
    let w = x.shape()[3];
    Tensor::from_fn(x.shape(), |i| x.data()[i - i % w + (w - 1 - i % w)])
}

fn invariant_checks() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1417);
    let mut checks = Vec::new();
    let geometries = [(1, 1, 2, 2), (2, 3, 2, 1), (3, 3, 2, 2), (4, 2, 1, 4)];

    for phantom in [PhantomMode::Literal, PhantomMode::Masked] {
        let mut worst = 0f64;
        for &(p, q, gh, gw) in &geometries {
            let x = uniform(&[2, 5, p * gh, q * gw], &mut rng, 2.0).cast::<f32>();
            let a = association_of(&x, &StaConfig::new(gh, gw, 1).with_phantom(phantom))?;
            for row in a.data().chunks(9) {
                worst = worst.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            }
        }
        checks.push(Check::below(format!("invariants/association-rows/{phantom}"), worst, 1e-6, "f32, 4 geometries"));
    }

    let mut phantom_mass = 0f64;
    for &(p, q, gh, gw) in &geometries {
        let x = uniform(&[1, 3, p * gh, q * gw], &mut rng, 2.0).cast::<f32>();
        let cfg = StaConfig::new(gh, gw, 1).with_phantom(PhantomMode::Masked);
        let a = association_of(&x, &cfg)?;
        let keep = phantom_keep_mask(&cfg.geometry(x.shape())?);
        for (&v, &k) in a.data().iter().zip(&keep) {
            if !k {
                phantom_mass = phantom_mass.max(v.abs() as f64);
            }
        }
    }
    checks.push(Check::zero("invariants/masked-phantom-slots", phantom_mass, "out-of-bounds weights"));

    let mut adjoint = 0f64;
    for &(b, c, p, q) in &[(1, 1, 1, 1), (2, 3, 4, 5), (1, 2, 7, 3)] {
        let x = uniform(&[b, c, p, q], &mut rng, 1.0).cast::<f32>();
        let y = uniform(&[b, c * 9, p * q], &mut rng, 1.0).cast::<f32>();
        let mut g = Graph::new();
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let ux = g.unfold3x3(xv)?;
        let fy = g.fold3x3(yv, p, q)?;
        let dot = |a: &Tensor<f32>, b: &Tensor<f32>| {
            a.data().iter().zip(b.data()).map(|(&u, &v)| u as f64 * v as f64).sum::<f64>()
        };
        let (lhs, rhs) = (dot(g.value(ux), &y), dot(&x, g.value(fy)));
        adjoint = adjoint.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));
    }
    checks.push(Check::below("invariants/fold-adjoint", adjoint, 1e-6, "⟨unfold x, y⟩ = ⟨x, fold y⟩, f32"));

    let mut eff_rows = 0f64;
    for &(p, q, gh, gw) in &geometries {
        let x = uniform(&[1, 4, p * gh, q * gw], &mut rng, 1.0);
        let w = random_weights(4, &mut rng);
        let cfg = StaConfig::new(gh, gw, 2).with_phantom(PhantomMode::Masked);
        let eff = sta_dense_oracle(&x, &cfg, &w)?.effective_attention;
        let n = p * gh * q * gw;
        for row in eff.data().chunks(n) {
            eff_rows = eff_rows.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    checks.push(Check::below("invariants/effective-attention-rows/masked", eff_rows, 1e-5, "dense Q·A·M"));

    // keys shifted by a common vector: channel 0 is constant, so adding u to
    // row 0 of W_k adds u to every key
    let mut shift = 0f64;
    for heads in [1, 2] {
        let mut s = uniform(&[2, 6, 4], &mut rng, 1.0);
        for t in s.data_mut().chunks_mut(4) {
            t[0] = 1.0;
        }
        let w = random_weights(4, &mut rng);
        let mut shifted = w.clone();
        for j in 0..4 {
            shifted.w_k.data_mut()[j] += rng.random_range(-3.0..3.0);
        }
        let run = |w: &StaWeights<f64>| -> Result<(Tensor<f64>, Tensor<f64>)> {
            let mut g = Graph::new();
            let sv = g.constant(s.clone());
            let vars = w.bind(&mut g, "sta");
            let out = mhsa(&mut g, sv, &vars, heads)?;
            Ok((g.value(out.output).clone(), g.value(out.attention).clone()))
        };
        let ((o1, a1), (o2, a2)) = (run(&w)?, run(&shifted)?);
        shift = shift.max(o1.max_abs_diff(&o2)?).max(a1.max_abs_diff(&a2)?);
    }
    checks.push(Check::below("invariants/softmax-key-shift", shift, 1e-12, "super-token attention, f64"));

    // Shifting by whole cells permutes the grid-mean super tokens. Without
    // an update round the attention among them is permutation-equivariant,
    // so tokens whose cell keeps a full neighborhood are shifted exactly.
    let (p, gh) = (5, 2);
    let cfg = StaConfig::new(gh, gh, 2).with_phantom(PhantomMode::Masked).with_iters(0);
    let x = uniform(&[1, 4, p * gh, p * gh], &mut rng, 1.0);
    let w = random_weights(4, &mut rng);
    let (y, ys) = (sta_value(&x, &cfg, &w)?, sta_value(&roll(&x, gh, gh), &cfg, &w)?);
    let side = p * gh;
    let mut translation = 0f64;
    for c in 0..4 {
        for ty in 0..side {
            for tx in 0..side {
                let (cy, cx) = (ty / gh, tx / gh);
                if cy >= 1 && cx >= 1 && cy < p - 2 && cx < p - 2 {
                    let a = y.data()[(c * side + ty) * side + tx];
                    let b = ys.data()[(c * side + ty + gh) * side + tx + gh];
                    translation = translation.max((a - b).abs());
                }
            }
        }
    }
    checks.push(Check::below(
        "invariants/translation-by-cell/masked",
        translation,
        1e-12,
        "n_iter 0, interior cells, f64",
    ));

    for phantom in [PhantomMode::Literal, PhantomMode::Masked] {
        let cfg = StaConfig::new(2, 2, 2).with_phantom(phantom);
        let x = uniform(&[1, 4, 6, 8], &mut rng, 1.0);
        let w = random_weights(4, &mut rng);
        let err = flip_w(&sta_value(&x, &cfg, &w)?).max_abs_diff(&sta_value(&flip_w(&x), &cfg, &w)?)?;
        checks.push(Check::below(format!("invariants/mirror-equivariance/{phantom}"), err, 1e-12, "n_iter 1, f64"));
    }
    Ok(checks)
}
