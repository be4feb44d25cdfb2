use super::{from_cells, AssociationMap};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Maps attended super tokens `[b, C, p, q]` back to `[b, C, H, W]`: each
/// token receives `Σ_slot Q[token, slot] · S[slot]` over its 9 neighbor
/// slots, with out-of-bounds slots reading zeros.
pub fn token_upsample<T: Scalar>(g: &mut Graph<T>, assoc: &AssociationMap, attended: Var) -> Result<Var> {
    let geom = assoc.geom;
    let (b, c, p, q) = (geom.batch, geom.channels, geom.p(), geom.q());
    if g.shape(attended) != [b, c, p, q] {
        return Err(Error::dim(format!(
            "token upsampling: super tokens {:?} do not match the association grid [{b}, {c}, {p}, {q}]",
            g.shape(attended)
        )));
    }
    let windows = g.unfold3x3(attended)?;
    let windows = g.transpose(windows, 1, 2)?;
    let windows = g.reshape(windows, &[b, p * q, c, 9])?;
    let weights_t = g.transpose(assoc.weights, 2, 3)?;
    let per_cell = g.matmul(windows, weights_t)?;
    from_cells(g, per_cell, &geom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sta::{sts, PhantomMode, StaConfig};
    use crate::tensor::Tensor;

    #[test]
    fn identity_association_copies_super_tokens() {
        let mut g = Graph::<f64>::new();
        let cfg = StaConfig::new(1, 1, 1);
        let geom = cfg.geometry(&[1, 2, 3, 2]).unwrap();
        let qt = Tensor::from_fn(&[1, 6, 1, 9], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        let assoc = AssociationMap { weights: g.constant(qt), geom };
        let st = Tensor::from_fn(&[1, 2, 3, 2], |i| i as f64 * 1.25 - 3.0);
        let s = g.constant(st.clone());
        let out = token_upsample(&mut g, &assoc, s).unwrap();
        assert_eq!(g.value(out), &st);
    }

    #[test]
    fn constant_super_tokens_stay_constant_in_masked_mode() {
        let mut g = Graph::<f64>::new();
        let cfg = StaConfig::new(2, 2, 1).with_phantom(PhantomMode::Masked);
        let x = g.constant(Tensor::from_fn(&[1, 3, 6, 4], |i| ((i * 31) % 11) as f64 * 0.2));
        let (_, assoc) = sts(&mut g, x, &cfg).unwrap();
        let s = g.constant(Tensor::full(&[1, 3, 3, 2], 0.625));
        let out = token_upsample(&mut g, &assoc, s).unwrap();
        assert!(g.value(out).data().iter().all(|&v| (v - 0.625).abs() < 1e-12));
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let mut g = Graph::<f64>::new();
        let cfg = StaConfig::new(2, 2, 1);
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let (_, assoc) = sts(&mut g, x, &cfg).unwrap();
        let s = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(token_upsample(&mut g, &assoc, s), Err(Error::Dimension(_))));
    }
}
