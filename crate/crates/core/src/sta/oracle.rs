//! Dense reference implementations. Everything here is written with plain
//! loops over explicit `N × m` and `m × m` matrices; none of it shares code
//! with the sparse unfold/fold path it is used to check.

use super::{PhantomMode, StaConfig, StaWeights};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Largest `N · m` the dense oracle will materialize.
pub const ORACLE_MAX_ENTRIES: usize = 1_000_000;

/// Output of [`sta_dense_oracle`].
#[derive(Clone, Debug)]
pub struct DenseSta<T: Scalar> {
    /// `[b, C, H, W]`
    pub output: Tensor<T>,
    /// Dense association `[b, N, m]`; tokens raster-ordered.
    pub association: Tensor<T>,
    /// Final super tokens `[b, m, C]`.
    pub super_tokens: Tensor<T>,
    /// Per-head effective token attention `Q · A(S) · M`, `[b, heads, N, N]`,
    /// where `M` is the `m × N` map producing the final super tokens.
    pub effective_attention: Tensor<T>,
}

/// Plain multi-head self-attention on row-major `n × c` tokens. Returns the
/// projected output (`n × c`) and the per-head attention maps
/// (`heads × n × n`). `grid` is the `p × q` layout of the tokens, used only
/// for the relative-position table.
pub fn dense_mhsa<T: Scalar>(
    tokens: &[T],
    n: usize,
    c: usize,
    w: &StaWeights<T>,
    heads: usize,
    grid: (usize, usize),
) -> Result<(Vec<T>, Vec<T>)> {
    w.check(c)?;
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::config(format!("{heads} heads do not divide {c} channels")));
    }
    let dh = c / heads;
    let project = |wt: &Tensor<T>| -> Vec<T> {
        let wd = wt.data();
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            for j in 0..c {
                let mut acc = T::zero();
                for k in 0..c {
                    acc += tokens[i * c + k] * wd[k * c + j];
                }
                out[i * c + j] = acc;
            }
        }
        out
    };
    let (qm, km, vm) = (project(&w.w_q), project(&w.w_k), project(&w.w_v));
    let scale = T::cst(1.0 / (dh as f64).sqrt());
    let (p, q) = grid;
    let mut attn = vec![T::zero(); heads * n * n];
    let mut mixed = vec![T::zero(); n * c];
    for h in 0..heads {
        for i in 0..n {
            let row = &mut attn[(h * n + i) * n..(h * n + i + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                let mut dot = T::zero();
                for d in 0..dh {
                    dot += qm[i * c + h * dh + d] * km[j * c + h * dh + d];
                }
                *r = dot * scale;
                if let Some(table) = &w.rel_bias {
                    let span_x = 2 * q - 1;
                    let dy = (i / q) + p - 1 - (j / q);
                    let dx = (i % q) + q - 1 - (j % q);
                    *r += table.data()[h * (2 * p - 1) * span_x + dy * span_x + dx];
                }
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                total += *r;
            }
            for r in row.iter_mut() {
                *r = *r / total;
            }
            for d in 0..dh {
                let mut acc = T::zero();
                for j in 0..n {
                    acc += row[j] * vm[j * c + h * dh + d];
                }
                mixed[i * c + h * dh + d] = acc;
            }
        }
    }
    let wo = w.w_o.data();
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        for j in 0..c {
            let mut acc = T::zero();
            for k in 0..c {
                acc += mixed[i * c + k] * wo[k * c + j];
            }
            out[i * c + j] = acc;
        }
    }
    Ok((out, attn))
}

fn tokens_of<T: Scalar>(x: &Tensor<T>, bi: usize) -> Vec<T> {
    let [_, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let mut out = vec![T::zero(); h * w * c];
    for ch in 0..c {
        for t in 0..h * w {
            out[t * c + ch] = x.data()[(bi * c + ch) * h * w + t];
        }
    }
    out
}

fn scatter_tokens<T: Scalar>(dst: &mut [T], tokens: &[T], bi: usize, c: usize, n: usize) {
    for ch in 0..c {
        for t in 0..n {
            dst[(bi * c + ch) * n + t] = tokens[t * c + ch];
        }
    }
}

/// Global multi-head self-attention over all `H·W` tokens of `[b, C, H, W]`.
pub fn gsa_forward<T: Scalar>(x: &Tensor<T>, w: &StaWeights<T>, heads: usize) -> Result<Tensor<T>> {
    let [b, c, h, wd] = match *x.shape() {
        [b, c, h, w] => [b, c, h, w],
        ref s => return Err(Error::dim(format!("global attention expects [b, c, h, w], got {s:?}"))),
    };
    let n = h * wd;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        let (o, _) = dense_mhsa(&tokens_of(x, bi), n, c, w, heads, (h, wd))?;
        scatter_tokens(&mut out, &o, bi, c, n);
    }
    Tensor::new(x.shape(), out)
}

/// Dense super token attention `Q · Attn(M·X)` with the association
/// sparsity and phantom handling of `cfg` replicated entry by entry.
pub fn sta_dense_oracle<T: Scalar>(x: &Tensor<T>, cfg: &StaConfig, w: &StaWeights<T>) -> Result<DenseSta<T>> {
    let geom = cfg.geometry(x.shape())?;
    let (b, c, h, wd) = (geom.batch, geom.channels, geom.height, geom.width);
    let (n, m) = (geom.n(), geom.m());
    if n * m > ORACLE_MAX_ENTRIES {
        return Err(Error::config(format!("dense oracle refused: N·m = {} exceeds {ORACLE_MAX_ENTRIES}", n * m)));
    }
    let heads = cfg.heads;
    let mut output = vec![T::zero(); x.len()];
    let mut assoc_all = vec![T::zero(); b * n * m];
    let mut stok_all = vec![T::zero(); b * m * c];
    let mut eff_all = vec![T::zero(); b * heads * n * n];

    if cfg.is_identity_grid() {
        for bi in 0..b {
            let xs = tokens_of(x, bi);
            let (o, attn) = dense_mhsa(&xs, n, c, w, heads, (h, wd))?;
            scatter_tokens(&mut output, &o, bi, c, n);
            for t in 0..n {
                assoc_all[(bi * n + t) * m + t] = T::one();
            }
            stok_all[bi * m * c..(bi + 1) * m * c].copy_from_slice(&xs);
            eff_all[bi * heads * n * n..(bi + 1) * heads * n * n].copy_from_slice(&attn);
        }
    } else {
        let (p, q) = (geom.p(), geom.q());
        let (gh, gw) = (geom.grid_h, geom.grid_w);
        let cell_of = |t: usize| ((t / wd) / gh, (t % wd) / gw);
        let near = |t: usize, j: usize| {
            let (cy, cx) = cell_of(t);
            let (jy, jx) = (j / q, j % q);
            cy.abs_diff(jy) <= 1 && cx.abs_diff(jx) <= 1
        };
        let scale = T::cst(1.0 / (c as f64).sqrt());
        for bi in 0..b {
            let xs = tokens_of(x, bi);
            // aggregation matrix M (m × N); initially the cell-mean operator
            let mut agg = vec![T::zero(); m * n];
            let inv = T::one() / T::cst((gh * gw) as f64);
            for t in 0..n {
                let (cy, cx) = cell_of(t);
                agg[(cy * q + cx) * n + t] = inv;
            }
            let apply = |agg: &[T]| -> Vec<T> {
                let mut s = vec![T::zero(); m * c];
                for j in 0..m {
                    for t in 0..n {
                        let a = agg[j * n + t];
                        if a != T::zero() {
                            for ch in 0..c {
                                s[j * c + ch] += a * xs[t * c + ch];
                            }
                        }
                    }
                }
                s
            };
            let associate = |s: &[T]| -> Vec<T> {
                let mut qd = vec![T::zero(); n * m];
                for t in 0..n {
                    let live: Vec<usize> = (0..m).filter(|&j| near(t, j)).collect();
                    let logits: Vec<T> = live
                        .iter()
                        .map(|&j| (0..c).map(|ch| xs[t * c + ch] * s[j * c + ch]).sum::<T>() * scale)
                        .collect();
                    let phantoms = match cfg.phantom {
                        PhantomMode::Literal => 9 - live.len(),
                        PhantomMode::Masked => 0,
                    };
                    let mut max = logits.iter().copied().fold(T::neg_infinity(), T::max);
                    if phantoms > 0 {
                        max = max.max(T::zero());
                    }
                    let mut total = T::cst(phantoms as f64) * (-max).exp();
                    for &l in &logits {
                        total += (l - max).exp();
                    }
                    for (&j, &l) in live.iter().zip(&logits) {
                        qd[t * m + j] = (l - max).exp() / total;
                    }
                }
                qd
            };

            let mut s = apply(&agg);
            let mut qd = associate(&s);
            for round in 0..cfg.n_iter {
                if round > 0 {
                    qd = associate(&s);
                }
                for j in 0..m {
                    let col: T = (0..n).map(|t| qd[t * m + j]).sum();
                    let denom = col + T::cst(cfg.eps);
                    for t in 0..n {
                        agg[j * n + t] = qd[t * m + j] / denom;
                    }
                }
                s = apply(&agg);
            }

            let (attended, attn) = dense_mhsa(&s, m, c, w, heads, (p, q))?;
            let mut out_tokens = vec![T::zero(); n * c];
            for t in 0..n {
                for j in 0..m {
                    let qv = qd[t * m + j];
                    if qv != T::zero() {
                        for ch in 0..c {
                            out_tokens[t * c + ch] += qv * attended[j * c + ch];
                        }
                    }
                }
            }
            scatter_tokens(&mut output, &out_tokens, bi, c, n);

            for hd in 0..heads {
                let a = &attn[hd * m * m..(hd + 1) * m * m];
                // (Q · A) is N × m, then · M gives N × N
                let mut qa = vec![T::zero(); n * m];
                for t in 0..n {
                    for l in 0..m {
                        qa[t * m + l] = (0..m).map(|j| qd[t * m + j] * a[j * m + l]).sum();
                    }
                }
                let eff = &mut eff_all[(bi * heads + hd) * n * n..(bi * heads + hd + 1) * n * n];
                for t in 0..n {
                    for u in 0..n {
                        eff[t * n + u] = (0..m).map(|l| qa[t * m + l] * agg[l * n + u]).sum();
                    }
                }
            }
            assoc_all[bi * n * m..(bi + 1) * n * m].copy_from_slice(&qd);
            stok_all[bi * m * c..(bi + 1) * m * c].copy_from_slice(&s);
        }
    }
    Ok(DenseSta {
        output: Tensor::new(x.shape(), output)?,
        association: Tensor::new(&[b, n, m], assoc_all)?,
        super_tokens: Tensor::new(&[b, m, c], stok_all)?,
        effective_attention: Tensor::new(&[b, heads, n, n], eff_all)?,
    })
}
