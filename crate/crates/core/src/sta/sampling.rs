//! Super token sampling: grid-mean initialization, sparse association and
//! the weighted super-token update.

use std::sync::Arc;

use super::{AssociationMap, Geometry, PhantomMode, StaConfig, SuperTokens};
use crate::error::{Error, Result};
use crate::tensor::kernels::{neighbor, permute_index};
use crate::tensor::{Graph, Scalar, Var};

/// `[b, C, H, W] → [b, p·q, h·w, C]`: tokens grouped by grid cell.
pub fn to_cells<T: Scalar>(g: &mut Graph<T>, x: Var, geom: &Geometry) -> Result<Var> {
    let (b, c) = (geom.batch, geom.channels);
    let (p, h, q, w) = (geom.p(), geom.grid_h, geom.q(), geom.grid_w);
    if g.shape(x) != [b, c, geom.height, geom.width] {
        return Err(Error::dim(format!("to_cells: input {:?} does not match geometry {geom:?}", g.shape(x))));
    }
    // view as [b, c, p, h, q, w] and move to [b, p, q, h, w, c]
    let index = permute_index(&[b, c, p, h, q, w], &[0, 2, 4, 3, 5, 1]);
    g.gather(x, &[b, p * q, h * w, c], Arc::new(index))
}

/// `[b, p·q, C, h·w] → [b, C, H, W]`.
pub fn from_cells<T: Scalar>(g: &mut Graph<T>, t: Var, geom: &Geometry) -> Result<Var> {
    let (b, c) = (geom.batch, geom.channels);
    let (p, h, q, w) = (geom.p(), geom.grid_h, geom.q(), geom.grid_w);
    if g.shape(t) != [b, p * q, c, h * w] {
        return Err(Error::dim(format!("from_cells: input {:?} does not match geometry {geom:?}", g.shape(t))));
    }
    // view as [b, p, q, c, h, w] and move to [b, c, p, h, q, w]
    let index = permute_index(&[b, p, q, c, h, w], &[0, 3, 1, 4, 2, 5]);
    g.gather(t, &[b, c, geom.height, geom.width], Arc::new(index))
}

/// Initial super tokens: the mean of the tokens in each grid cell.
pub fn init_super_tokens<T: Scalar>(g: &mut Graph<T>, x: Var, cfg: &StaConfig) -> Result<SuperTokens> {
    let geom = cfg.geometry(g.shape(x))?;
    let tokens = g.adaptive_avg_pool(x, geom.p(), geom.q())?;
    Ok(SuperTokens { tokens, geom })
}

/// Keep-mask over `[b, p·q, h·w, 9]` that drops out-of-bounds neighbor slots.
pub fn phantom_keep_mask(geom: &Geometry) -> Vec<bool> {
    let (p, q) = (geom.p(), geom.q());
    let per_cell: Vec<[bool; 9]> =
        (0..p * q).map(|cell| std::array::from_fn(|slot| neighbor(cell / q, cell % q, slot, p, q).is_some())).collect();
    let mut keep = Vec::with_capacity(geom.batch * p * q * geom.cell_len() * 9);
    for _ in 0..geom.batch {
        for slots in &per_cell {
            for _ in 0..geom.cell_len() {
                keep.extend_from_slice(slots);
            }
        }
    }
    keep
}

/// Softmax of `⟨X_i, S_j⟩ / √C` over the 9 super tokens surrounding each
/// token's cell. `cells` is the output of [`to_cells`].
pub fn compute_association<T: Scalar>(
    g: &mut Graph<T>,
    cells: Var,
    s: &SuperTokens,
    cfg: &StaConfig,
) -> Result<AssociationMap> {
    let geom = s.geom;
    let (b, c, pq) = (geom.batch, geom.channels, geom.m());
    if g.shape(cells) != [b, pq, geom.cell_len(), c] {
        return Err(Error::dim(format!(
            "association: token cells {:?} do not match super tokens {:?}",
            g.shape(cells),
            g.shape(s.tokens)
        )));
    }
    let windows = g.unfold3x3(s.tokens)?;
    let windows = g.transpose(windows, 1, 2)?;
    let windows = g.reshape(windows, &[b, pq, c, 9])?;
    let logits = g.matmul(cells, windows)?;
    let logits = g.scale(logits, T::cst(1.0 / (c as f64).sqrt()))?;
    let weights = match cfg.phantom {
        PhantomMode::Literal => g.softmax(logits)?,
        PhantomMode::Masked => {
            let keep = phantom_keep_mask(&geom);
            g.softmax_masked(logits, Some(&keep))?
        }
    };
    Ok(AssociationMap { weights, geom })
}

/// `S_j = Σ_i Q_ij·X_i / (Σ_i Q_ij + eps)`, with per-cell contributions
/// overlap-added back onto the super-token grid.
pub fn update_super_tokens<T: Scalar>(
    g: &mut Graph<T>,
    cells: Var,
    assoc: &AssociationMap,
    cfg: &StaConfig,
) -> Result<SuperTokens> {
    let geom = assoc.geom;
    let (b, c, p, q) = (geom.batch, geom.channels, geom.p(), geom.q());
    let denom = assoc.column_sums(g)?;
    let denom = g.add_scalar(denom, T::cst(cfg.eps))?;
    let cells_t = g.transpose(cells, 2, 3)?;
    let weighted = g.matmul(cells_t, assoc.weights)?;
    let weighted = g.permute(weighted, &[0, 2, 3, 1])?;
    let weighted = g.reshape(weighted, &[b, c * 9, p * q])?;
    let summed = g.fold3x3(weighted, p, q)?;
    let tokens = g.div(summed, denom)?;
    Ok(SuperTokens { tokens, geom })
}

/// Super token sampling: grid-mean initialization followed by `n_iter`
/// rounds of association and update. Returns the final super tokens and
/// the last association. With `n_iter = 0` the association is computed once
/// against the initial super tokens, which are returned unchanged.
pub fn sts<T: Scalar>(g: &mut Graph<T>, x: Var, cfg: &StaConfig) -> Result<(SuperTokens, AssociationMap)> {
    let mut s = init_super_tokens(g, x, cfg)?;
    let cells = to_cells(g, x, &s.geom)?;
    let mut assoc = compute_association(g, cells, &s, cfg)?;
    for round in 0..cfg.n_iter {
        if round > 0 {
            assoc = compute_association(g, cells, &s, cfg)?;
        }
        s = update_super_tokens(g, cells, &assoc, cfg)?;
    }
    Ok((s, assoc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn cells_round_trip() {
        let mut g = Graph::<f64>::new();
        let xt = rand_tensor(&[2, 3, 4, 6], 1);
        let x = g.constant(xt.clone());
        let geom = StaConfig::new(2, 3, 1).geometry(&[2, 3, 4, 6]).unwrap();
        let cells = to_cells(&mut g, x, &geom).unwrap();
        // token (y=3, x=4) of batch 1, channel 2 sits in cell (1, 1), offset (1, 1)
        assert_eq!(g.value(cells).at(&[1, 3, 4, 2]), xt.at(&[1, 2, 3, 4]));
        let back = g.transpose(cells, 2, 3).unwrap();
        let back = from_cells(&mut g, back, &geom).unwrap();
        assert_eq!(g.value(back), &xt);
    }

    #[test]
    fn initial_super_tokens_are_block_means() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| (i + 1) as f64));
        let s = init_super_tokens(&mut g, x, &StaConfig::new(2, 2, 1)).unwrap();
        assert_eq!(g.value(s.tokens).data(), &[3.5, 5.5, 11.5, 13.5]);

        let c = g.constant(Tensor::full(&[1, 3, 4, 4], -0.75));
        let s = init_super_tokens(&mut g, c, &StaConfig::new(2, 2, 1)).unwrap();
        assert!(g.value(s.tokens).data().iter().all(|&v| v == -0.75));
    }

    #[test]
    fn association_scalar_softmax() {
        // one channel, one token x = 2 in cell (1,1) of a 3×3 grid whose
        // super tokens are zero except the top-left neighbor, which is 2.
        let mut g = Graph::<f64>::new();
        let geom = StaConfig::new(1, 1, 1).geometry(&[1, 1, 3, 3]).unwrap();
        let mut cells = Tensor::zeros(&[1, 9, 1, 1]);
        cells.data_mut()[4] = 2.0;
        let cells = g.constant(cells);
        let mut st = Tensor::zeros(&[1, 1, 3, 3]);
        st.data_mut()[0] = 2.0;
        let s = SuperTokens { tokens: g.constant(st), geom };
        let q = compute_association(&mut g, cells, &s, &StaConfig::new(1, 1, 1)).unwrap();
        let w = g.value(q.weights);
        let e4 = 4f64.exp();
        let expected0 = e4 / (e4 + 8.0);
        assert!((w.at(&[0, 4, 0, 0]) - expected0).abs() < 1e-12);
        assert!((expected0 - 0.8722).abs() < 1e-4);
        for slot in 1..9 {
            assert!((w.at(&[0, 4, 0, slot]) - 1.0 / (e4 + 8.0)).abs() < 1e-12);
        }
        assert!((1.0 / (e4 + 8.0) - 0.0160).abs() < 1e-4);
    }

    #[test]
    fn orthogonal_tokens_get_uniform_weights() {
        let mut g = Graph::<f64>::new();
        let cfg = StaConfig::new(1, 1, 1);
        let geom = cfg.geometry(&[1, 2, 2, 2]).unwrap();
        // tokens along channel 0, super tokens along channel 1
        let cells = g.constant(Tensor::from_fn(&[1, 4, 1, 2], |i| if i % 2 == 0 { 1.5 } else { 0.0 }));
        let st = g.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| if i >= 4 { 0.7 } else { 0.0 }));
        let s = SuperTokens { tokens: st, geom };
        let q = compute_association(&mut g, cells, &s, &cfg).unwrap();
        assert!(g.value(q.weights).data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn masked_corner_cell_has_four_live_slots() {
        let mut g = Graph::<f64>::new();
        let cfg = StaConfig::new(2, 2, 1).with_phantom(PhantomMode::Masked);
        let x = g.constant(rand_tensor(&[1, 3, 4, 4], 7));
        let (_, q) = sts(&mut g, x, &cfg).unwrap();
        let w = g.value(q.weights);
        // brute-force masked softmax for cell 0, token 0
        let live: Vec<usize> = (0..9).filter(|&s| w.at(&[0, 0, 0, s]) != 0.0).collect();
        assert_eq!(live, vec![4, 5, 7, 8]);
        let total: f64 = live.iter().map(|&s| w.at(&[0, 0, 0, s])).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn update_with_equal_weights_is_the_mean() {
        // two tokens [1] and [3] in one cell of a 1×1 super-token grid, both
        // fully assigned to the only in-bounds slot
        let mut g = Graph::<f64>::new();
        let cfg = StaConfig::new(1, 2, 1);
        let geom = cfg.geometry(&[1, 1, 1, 2]).unwrap();
        let cells = g.constant(Tensor::from_f64(&[1, 1, 2, 1], &[1.0, 3.0]).unwrap());
        let mut qt = Tensor::zeros(&[1, 1, 2, 9]);
        qt.data_mut()[4] = 1.0;
        qt.data_mut()[13] = 1.0;
        let assoc = AssociationMap { weights: g.constant(qt), geom };
        let s = update_super_tokens(&mut g, cells, &assoc, &cfg).unwrap();
        assert!((g.value(s.tokens).data()[0] - 4.0 / (2.0 + cfg.eps)).abs() < 1e-15);
    }

    #[test]
    fn identity_assignment_copies_tokens() {
        let mut g = Graph::<f64>::new();
        let cfg = StaConfig::new(1, 1, 1);
        let xt = rand_tensor(&[1, 2, 2, 3], 3);
        let geom = cfg.geometry(xt.shape()).unwrap();
        let x = g.constant(xt.clone());
        let cells = to_cells(&mut g, x, &geom).unwrap();
        let qt = Tensor::from_fn(&[1, 6, 1, 9], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        let assoc = AssociationMap { weights: g.constant(qt), geom };
        let s = update_super_tokens(&mut g, cells, &assoc, &cfg).unwrap();
        assert!(g.value(s.tokens).max_abs_diff(&xt).unwrap() < 1e-11);
    }

    #[test]
    fn update_matches_dense_weighted_mean() {
        let (p, q, h, w, c) = (2, 2, 2, 2, 3);
        let cfg = StaConfig::new(h, w, 1).with_phantom(PhantomMode::Masked);
        let mut g = Graph::<f64>::new();
        let xt = rand_tensor(&[1, c, p * h, q * w], 11);
        let x = g.constant(xt.clone());
        let s0 = init_super_tokens(&mut g, x, &cfg).unwrap();
        let cells = to_cells(&mut g, x, &s0.geom).unwrap();
        let assoc = compute_association(&mut g, cells, &s0, &cfg).unwrap();
        let s1 = update_super_tokens(&mut g, cells, &assoc, &cfg).unwrap();
        let qv = g.value(assoc.weights).clone();
        // dense Σ_i Q_ij X_i / Σ_i Q_ij over every token whose cell neighbors j
        for sy in 0..p {
            for sx in 0..q {
                let mut num = vec![0.0; c];
                let mut den = 0.0;
                for ty in 0..p * h {
                    for tx in 0..q * w {
                        let (cy, cx) = (ty / h, tx / w);
                        let (dy, dx) = (sy as isize - cy as isize, sx as isize - cx as isize);
                        if dy.abs() > 1 || dx.abs() > 1 {
                            continue;
                        }
                        let slot = ((dy + 1) * 3 + dx + 1) as usize;
                        let wgt = qv.at(&[0, cy * q + cx, (ty % h) * w + tx % w, slot]);
                        den += wgt;
                        for (ch, n) in num.iter_mut().enumerate() {
                            *n += wgt * xt.at(&[0, ch, ty, tx]);
                        }
                    }
                }
                for (ch, n) in num.iter().enumerate() {
                    let got = g.value(s1.tokens).at(&[0, ch, sy, sx]);
                    assert!((got - n / den).abs() < 1e-12, "{got} vs {}", n / den);
                }
            }
        }
    }

    #[test]
    fn zero_iterations_keep_pooled_tokens() {
        let mut g = Graph::<f64>::new();
        let xt = rand_tensor(&[2, 4, 6, 6], 5);
        let x = g.constant(xt);
        let cfg = StaConfig::new(3, 2, 1).with_iters(0);
        let (s, q) = sts(&mut g, x, &cfg).unwrap();
        let pooled = g.adaptive_avg_pool(x, 2, 3).unwrap();
        assert_eq!(g.value(s.tokens), g.value(pooled));
        assert_eq!(g.shape(q.weights), &[2, 6, 6, 9]);
    }

    #[test]
    fn more_iterations_change_the_association() {
        let xt = rand_tensor(&[1, 4, 6, 6], 9);
        let run = |iters| {
            let mut g = Graph::<f64>::new();
            let x = g.constant(xt.clone());
            let (_, q) = sts(&mut g, x, &StaConfig::new(2, 2, 1).with_iters(iters)).unwrap();
            g.value(q.weights).clone()
        };
        assert!(run(1).max_abs_diff(&run(2)).unwrap() > 0.0);
    }
}
