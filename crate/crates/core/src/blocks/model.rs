use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{self, declare_block, declare_head, declare_merge, declare_stem, BlockSpec, BlockTrace, Ctx, Mode};
use super::params::{Init, ParamKind, ParamStore};
use super::{ArchConfig, PosEmbed};
use crate::error::{Error, Result};
use crate::sta::StaWeights;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Batch-norm running-average momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// A configured backbone and its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub cfg: ArchConfig,
    pub params: ParamStore<T>,
}

/// Handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[b, n_classes]`
    pub logits: Var,
    /// Output of each stage, before merging.
    pub stages: Vec<Var>,
    pub blocks: Vec<BlockTrace>,
    /// Training-mode batch-norm outputs keyed by prefix; see
    /// [`Model::update_running_stats`].
    pub bn_nodes: Vec<(String, Var)>,
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("stages.{stage}.blocks.{block}")
}

impl Model<f32> {
    /// Builds and initializes a model deterministically from `seed`.
    pub fn new(cfg: ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        declare_stem(&mut init, cfg.stem)?;
        let mut cin = cfg.stem[3];
        for s in 0..cfg.stages() {
            let c = cfg.channels[s];
            if s > 0 {
                declare_merge(&mut init, &format!("merge.{}", s - 1), cin, c)?;
            }
            let extent = cfg.stage_extent(s);
            if cfg.pos_embed == PosEmbed::Ape {
                init.trunc_normal(&format!("stages.{s}.ape"), &[1, c, extent, extent], ParamKind::NoDecay)?;
            }
            let side = extent / cfg.grids[s];
            let rel_span = (2 * side - 1) * (2 * side - 1);
            for j in 0..cfg.blocks[s] {
                declare_block(&mut init, &block_prefix(s, j), c, cfg.heads[s], cfg.pos_embed, rel_span, cfg.ffn_ratio)?;
            }
            cin = c;
        }
        declare_head(&mut init, cin, cfg.proj_dim, cfg.n_classes)?;
        Ok(Self { cfg, params })
    }
}

impl<T: Scalar> Model<T> {
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), params: self.params.cast() }
    }

    /// Per-stage block settings.
    pub fn block_specs(&self) -> Vec<Vec<BlockSpec>> {
        let rates = self.cfg.drop_rates();
        let mut depth = 0;
        (0..self.cfg.stages())
            .map(|s| {
                (0..self.cfg.blocks[s])
                    .map(|_| {
                        depth += 1;
                        BlockSpec {
                            sta: self.cfg.sta_config(s),
                            pos_embed: self.cfg.pos_embed,
                            ffn_shortcut: self.cfg.ffn_shortcut,
                            drop_rate: rates[depth - 1],
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Records a full forward pass of `[b, 3, res, res]` images on `g`.
    /// Drop-path is sampled from `drop_rng` when given in training mode.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        drop_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        let res = self.cfg.res;
        match *g.shape(x) {
            [_, 3, h, w] if h == res && w == res => {}
            ref s => {
                return Err(Error::dim(format!("{} expects [b, 3, {res}, {res}] images, got {s:?}", self.cfg.name)))
            }
        }
        let mut ctx = Ctx::new(g, &self.params, mode);
        if let Some(rng) = drop_rng {
            ctx = ctx.with_drop_rng(rng);
        }
        let mut h = layers::stem(&mut ctx, x)?;
        let mut stages = Vec::new();
        let mut blocks = Vec::new();
        for (s, specs) in self.block_specs().iter().enumerate() {
            if s > 0 {
                h = layers::patch_merging(&mut ctx, &format!("merge.{}", s - 1), h)?;
            }
            if self.cfg.pos_embed == PosEmbed::Ape {
                let ape = ctx.param(&format!("stages.{s}.ape"))?;
                h = ctx.g.add(h, ape)?;
            }
            for (j, spec) in specs.iter().enumerate() {
                let (out, trace) = layers::stt_block(&mut ctx, &block_prefix(s, j), s, h, spec)?;
                h = out;
                blocks.push(trace);
            }
            stages.push(h);
        }
        let logits = layers::head(&mut ctx, h)?;
        Ok(ForwardOutput { logits, stages, blocks, bn_nodes: ctx.bn_nodes })
    }

    /// Folds the batch statistics of a training-mode forward pass into the
    /// running averages: `r ← (1 − momentum)·r + momentum·batch`.
    pub fn update_running_stats(&mut self, g: &Graph<T>, bn_nodes: &[(String, Var)]) -> Result<()> {
        let m = T::cst(BN_MOMENTUM);
        let keep = T::one() - m;
        for (prefix, var) in bn_nodes {
            let (mean, variance) = g
                .batch_stats(*var)
                .ok_or_else(|| Error::Usage(format!("`{prefix}` was not recorded in training mode")))?;
            for (name, batch) in [("running_mean", mean), ("running_var", variance)] {
                let slot = self.params.get_mut(&format!("{prefix}.{name}"))?;
                for (r, &b) in slot.data_mut().iter_mut().zip(batch.data()) {
                    *r = keep * *r + m * b;
                }
            }
        }
        Ok(())
    }

    /// Class probabilities `[b, n_classes]` in evaluation mode.
    pub fn predict(&self, images: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(images);
        let out = self.forward(&mut g, x, Mode::Eval, None)?;
        let probs = g.softmax(out.logits)?;
        Ok(g.value(probs).clone())
    }

    /// Attention weights of the block at `prefix`.
    pub fn sta_weights(&self, prefix: &str) -> Result<StaWeights<T>> {
        let get = |w: &str| self.params.get(&format!("{prefix}.sta.{w}")).cloned();
        let rel = format!("{prefix}.sta.rel_bias");
        Ok(StaWeights {
            w_q: get("w_q")?,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            w_o: get("w_o")?,
            rel_bias: if self.params.contains(&rel) { Some(self.params.get(&rel)?.clone()) } else { None },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(b: usize, res: usize, seed: usize) -> Tensor<f32> {
        Tensor::from_fn(&[b, 3, res, res], |i| (((i + seed) * 2246822519usize) % 997) as f32 / 997.0)
    }

    #[test]
    fn tiny_forward_is_finite_and_deterministic() {
        let model = Model::new(ArchConfig::tiny(), 1).unwrap();
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(images(2, 32, 0));
            let out = model.forward(&mut g, x, Mode::Eval, None).unwrap();
            let shapes: Vec<Vec<usize>> = out.stages.iter().map(|&v| g.shape(v).to_vec()).collect();
            (g.value(out.logits).clone(), shapes)
        };
        let (logits, shapes) = run();
        assert_eq!(logits.shape(), [2, 2]);
        assert!(logits.is_finite());
        assert_eq!(shapes, [vec![2, 16, 8, 8], vec![2, 32, 4, 4], vec![2, 64, 2, 2], vec![2, 128, 1, 1]]);
        assert_eq!(run().0, logits);
        assert_eq!(Model::new(ArchConfig::tiny(), 1).unwrap(), model);
    }

    #[test]
    fn zeroed_branches_make_blocks_identity() {
        let mut model = Model::new(ArchConfig::tiny(), 2).unwrap();
        for e in model.params.entries_mut() {
            let n = &e.name;
            if n.contains(".blocks.") && (n.contains(".cpe.") || n.contains(".sta.w_o") || n.contains(".ffn.fc2.")) {
                e.value = e.value.map(|_| 0.0);
            }
        }
        let mut g = Graph::new();
        let x = g.constant(images(1, 32, 4));
        let out = model.forward(&mut g, x, Mode::Eval, None).unwrap();
        for trace in &out.blocks {
            // the block input is the LN input here since CPE contributes nothing
            let sta_out = g.value(trace.sta.output);
            assert!(sta_out.data().iter().all(|&v| v == 0.0));
        }
        // stage 0 output equals the stem output
        let stem_out = g.value(out.stages[0]).clone();
        let mut g2 = Graph::new();
        let x2 = g2.constant(images(1, 32, 4));
        let mut ctx = Ctx::new(&mut g2, &model.params, Mode::Eval);
        let s = layers::stem(&mut ctx, x2).unwrap();
        assert_eq!(g2.value(s), &stem_out);
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut model = Model::new(ArchConfig::tiny(), 3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(images(4, 32, 1));
        let out = model.forward(&mut g, x, Mode::Train, None).unwrap();
        let (mean, _) = g.batch_stats(out.bn_nodes[0].1).unwrap();
        let expected: Vec<f32> = mean.data().iter().map(|&m| 0.1 * m).collect();
        model.update_running_stats(&g, &out.bn_nodes).unwrap();
        assert_eq!(model.params.get("stem.0.bn.running_mean").unwrap().data(), &expected[..]);
    }

    #[test]
    fn position_embedding_variants_build_and_run() {
        for pos in [PosEmbed::Ape, PosEmbed::Rpe, PosEmbed::None] {
            let cfg = ArchConfig { pos_embed: pos, ..ArchConfig::tiny() };
            let model = Model::new(cfg, 0).unwrap();
            let probs = model.predict(images(1, 32, 2)).unwrap();
            assert!((probs.sum() - 1.0).abs() < 1e-5, "{pos}");
        }
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let model = Model::new(ArchConfig::tiny(), 0).unwrap();
        assert!(matches!(model.predict(images(1, 64, 0)), Err(Error::Dimension(_))));
    }
}
