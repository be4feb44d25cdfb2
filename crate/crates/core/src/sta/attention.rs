use std::sync::Arc;

use super::{StaVars, SuperTokens};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Result of [`mhsa`].
#[derive(Clone, Copy, Debug)]
pub struct MhsaOutput {
    /// `[b, m, C]`
    pub output: Var,
    /// `[b, heads, m, m]`, rows sum to 1.
    pub attention: Var,
}

/// Index into a `(2p−1)·(2q−1)` relative-offset table for every ordered pair
/// of positions on a `p × q` grid, row-major over `(i, j)`.
pub fn relative_position_index(p: usize, q: usize) -> Vec<usize> {
    let m = p * q;
    let mut index = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let dy = (i / q) as isize - (j / q) as isize + p as isize - 1;
            let dx = (i % q) as isize - (j % q) as isize + q as isize - 1;
            index.push(dy as usize * (2 * q - 1) + dx as usize);
        }
    }
    index
}

/// Multi-head self-attention over `[b, m, C]` tokens. A relative-position
/// table, if present, is read as a `1 × m` layout.
pub fn mhsa<T: Scalar>(g: &mut Graph<T>, tokens: Var, w: &StaVars, heads: usize) -> Result<MhsaOutput> {
    let m = match *g.shape(tokens) {
        [_, m, _] => m,
        ref s => return Err(Error::dim(format!("attention expects [b, m, C] tokens, got {s:?}"))),
    };
    mhsa_on_grid(g, tokens, w, heads, (1, m))
}

pub(crate) fn mhsa_on_grid<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    w: &StaVars,
    heads: usize,
    grid: (usize, usize),
) -> Result<MhsaOutput> {
    let (b, m, c) = match *g.shape(tokens) {
        [b, m, c] => (b, m, c),
        ref s => return Err(Error::dim(format!("attention expects [b, m, C] tokens, got {s:?}"))),
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::config(format!("{heads} heads do not divide {c} channels")));
    }
    let dh = c / heads;
    let split = |g: &mut Graph<T>, weight: Var, perm: &[usize]| -> Result<Var> {
        let proj = g.matmul(tokens, weight)?;
        let proj = g.reshape(proj, &[b, m, heads, dh])?;
        g.permute(proj, perm)
    };
    let q = split(g, w.w_q, &[0, 2, 1, 3])?;
    let k_t = split(g, w.w_k, &[0, 2, 3, 1])?;
    let v = split(g, w.w_v, &[0, 2, 1, 3])?;
    let logits = g.matmul(q, k_t)?;
    let mut logits = g.scale(logits, T::cst(1.0 / (dh as f64).sqrt()))?;
    if let Some(table) = w.rel_bias {
        let (p, qq) = grid;
        let span = (2 * p - 1) * (2 * qq - 1);
        if p * qq != m || g.shape(table) != [heads, span] {
            return Err(Error::dim(format!(
                "relative bias table {:?} does not fit {heads} heads on a {p}×{qq} grid",
                g.shape(table)
            )));
        }
        let rel = relative_position_index(p, qq);
        let index: Vec<usize> = (0..heads).flat_map(|h| rel.iter().map(move |&r| h * span + r)).collect();
        let bias = g.gather(table, &[1, heads, m, m], Arc::new(index))?;
        logits = g.add(logits, bias)?;
    }
    let attention = g.softmax(logits)?;
    let mixed = g.matmul(attention, v)?;
    let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = g.reshape(mixed, &[b, m, c])?;
    let output = g.matmul(mixed, w.w_o)?;
    Ok(MhsaOutput { output, attention })
}

/// Self-attention among super tokens `[b, C, p, q]`; returns the attended
/// super tokens in the same layout and the `[b, heads, m, m]` attention map.
pub fn mhsa_super<T: Scalar>(g: &mut Graph<T>, s: &SuperTokens, w: &StaVars, heads: usize) -> Result<(Var, Var)> {
    let geom = s.geom;
    let (b, c, p, q) = (geom.batch, geom.channels, geom.p(), geom.q());
    let flat = g.reshape(s.tokens, &[b, c, p * q])?;
    let tokens = g.transpose(flat, 1, 2)?;
    let out = mhsa_on_grid(g, tokens, w, heads, (p, q))?;
    let back = g.transpose(out.output, 1, 2)?;
    let back = g.reshape(back, &[b, c, p, q])?;
    Ok((back, out.attention))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sta::{StaConfig, StaWeights};
    use crate::tensor::Tensor;

    fn eye(c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 })
    }

    fn weights(c: usize, seed: usize) -> StaWeights<f64> {
        let w = |k: usize| Tensor::from_fn(&[c, c], move |i| (((i + 3) * (k + seed) * 7919) % 17) as f64 / 17.0 - 0.5);
        StaWeights { w_q: w(1), w_k: w(2), w_v: w(3), w_o: w(4), rel_bias: None }
    }

    #[test]
    fn single_super_token_attends_to_itself() {
        let mut g = Graph::<f64>::new();
        let c = 4;
        let w = weights(c, 1);
        let vars = w.bind(&mut g, "a");
        let st = Tensor::from_fn(&[1, c, 1, 1], |i| i as f64 - 1.0);
        let geom = StaConfig::new(2, 2, 2).geometry(&[1, c, 2, 2]).unwrap();
        let s = SuperTokens { tokens: g.constant(st.clone()), geom };
        let (out, attn) = mhsa_super(&mut g, &s, &vars, 2).unwrap();
        assert!(g.value(attn).data().iter().all(|&v| v == 1.0));
        // out = s · W_v · W_o
        for j in 0..c {
            let mut expected = 0.0;
            for a in 0..c {
                for k in 0..c {
                    expected += st.data()[a] * w.w_v.at(&[a, k]) * w.w_o.at(&[k, j]);
                }
            }
            assert!((g.value(out).data()[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut g = Graph::<f64>::new();
        let vars = weights(6, 2).bind(&mut g, "a");
        let tokens = g.constant(Tensor::from_fn(&[2, 5, 6], |i| ((i * 13) % 7) as f64 - 3.0));
        let out = mhsa(&mut g, tokens, &vars, 3).unwrap();
        for row in g.value(out.attention).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_key_gives_mean_of_super_tokens() {
        let mut g = Graph::<f64>::new();
        let c = 3;
        let w = StaWeights {
            w_q: Tensor::zeros(&[c, c]),
            w_k: Tensor::zeros(&[c, c]),
            w_v: eye(c),
            w_o: eye(c),
            rel_bias: None,
        };
        let vars = w.bind(&mut g, "a");
        let tokens = g.constant(Tensor::from_fn(&[1, 4, c], |i| i as f64 * 0.5));
        let out = mhsa(&mut g, tokens, &vars, 1).unwrap();
        let v = g.value(out.output);
        for ch in 0..c {
            let mean = (0..4).map(|t| (t * c + ch) as f64 * 0.5).sum::<f64>() / 4.0;
            for t in 0..4 {
                assert!((v.at(&[0, t, ch]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_count_must_divide_channels() {
        let mut g = Graph::<f64>::new();
        let vars = weights(4, 1).bind(&mut g, "a");
        let tokens = g.constant(Tensor::zeros(&[1, 2, 4]));
        assert!(matches!(mhsa(&mut g, tokens, &vars, 3), Err(Error::Config(_))));
    }

    #[test]
    fn logit_shift_along_queries_is_invisible() {
        // Adding a constant vector u to every key adds q_i·u to row i of the
        // logits, which softmax ignores.
        let c = 4;
        let base = weights(c, 3);
        let tokens = Tensor::from_fn(&[1, 5, c], |i| ((i * 7) % 5) as f64 - 2.0);
        let run = |tok: &Tensor<f64>, k_shift: Option<&[f64]>| {
            let mut g = Graph::<f64>::new();
            let vars = base.bind(&mut g, "a");
            let t = g.constant(tok.clone());
            let q = g.matmul(t, vars.w_q).unwrap();
            let mut k = g.matmul(t, vars.w_k).unwrap();
            if let Some(u) = k_shift {
                let u = g.constant(Tensor::from_f64(&[1, 1, c], u).unwrap());
                k = g.add(k, u).unwrap();
            }
            let k_t = g.transpose(k, 1, 2).unwrap();
            let logits = g.matmul(q, k_t).unwrap();
            let a = g.softmax(logits).unwrap();
            g.value(a).clone()
        };
        let plain = run(&tokens, None);
        let shifted = run(&tokens, Some(&[0.3, -1.2, 2.0, 0.7]));
        assert!(plain.max_abs_diff(&shifted).unwrap() < 1e-12);
    }

    #[test]
    fn relative_index_is_symmetric_about_the_center() {
        let idx = relative_position_index(2, 3);
        // (i, i) always maps to the zero offset
        let zero = (2 * 3 - 1) + (3 - 1);
        for i in 0..6 {
            assert_eq!(idx[i * 6 + i], zero);
        }
        assert_eq!(idx.iter().max(), Some(&(3 * 5 - 1)));
    }
}
