//! All trainable weights in one object, with deterministic traversal order
//! for optimizers, checkpoints and gradient checks.

use crate::error::{Error, Result};
use crate::matcher::{MatcherBranch, MatcherParams};
use crate::math::layers::{init_linear, init_transformer_layer, seeded_rng, Linear};
use crate::math::matrix::Matrix;
use crate::math::tape::{Tape, Var};
use serde::{Deserialize, Serialize};

/// Architecture sizes. These are configuration, not claims: the data decides
/// `query_dim`, the rest trades accuracy for speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub query_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Hidden width of the embedder MLP.
    pub embed_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            query_dim: 256,
            model_dim: 256,
            heads: 8,
            embed_hidden: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.query_dim == 0 || self.model_dim == 0 || self.heads == 0 {
            return Err(Error::InvalidArgument("zero model dimensions".into()));
        }
        Ok(())
    }
}

/// Rescoring head plus both matchers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub rescore: Linear<Matrix>,
    pub matcher: MatcherParams<Matrix>,
}

/// Gradients in the same traversal order and shapes as the parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: Vec<(String, Matrix)>,
}

impl Gradients {
    pub fn get(&self, path: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(p, _)| p == path).map(|(_, m)| m)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|(_, m)| m.all_finite())
    }
}

impl ModelParams {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed);
        let rescore = init_linear(1, cfg.query_dim, &mut rng);
        let branch = |rng: &mut rand_chacha::ChaCha8Rng| MatcherBranch {
            encoder: init_transformer_layer(cfg.model_dim, cfg.heads, rng),
            decoder: init_transformer_layer(cfg.model_dim, cfg.heads, rng),
            score_proj: init_linear(cfg.model_dim, cfg.model_dim, rng),
        };
        let matcher = MatcherParams {
            embedder: [
                init_linear(cfg.embed_hidden, cfg.query_dim, &mut rng),
                init_linear(cfg.model_dim, cfg.embed_hidden, &mut rng),
            ],
            st: branch(&mut rng),
            lt: branch(&mut rng),
        };
        Ok(ModelParams {
            cfg,
            rescore,
            matcher,
        })
    }

    fn linears(&self) -> Vec<&Linear<Matrix>> {
        let mut out: Vec<&Linear<Matrix>> = vec![&self.rescore];
        out.push(&self.matcher.embedder[0]);
        out.push(&self.matcher.embedder[1]);
        for branch in [&self.matcher.st, &self.matcher.lt] {
            for layer in [&branch.encoder, &branch.decoder] {
                out.extend([
                    &layer.attn.w_q,
                    &layer.attn.w_k,
                    &layer.attn.w_v,
                    &layer.attn.w_o,
                    &layer.ff.lin1,
                    &layer.ff.lin2,
                ]);
            }
            out.push(&branch.score_proj);
        }
        out
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear<Matrix>> {
        let mut out: Vec<&mut Linear<Matrix>> = vec![&mut self.rescore];
        let [e0, e1] = &mut self.matcher.embedder;
        out.push(e0);
        out.push(e1);
        for branch in [&mut self.matcher.st, &mut self.matcher.lt] {
            for layer in [&mut branch.encoder, &mut branch.decoder] {
                out.extend([
                    &mut layer.attn.w_q,
                    &mut layer.attn.w_k,
                    &mut layer.attn.w_v,
                    &mut layer.attn.w_o,
                    &mut layer.ff.lin1,
                    &mut layer.ff.lin2,
                ]);
            }
            out.push(&mut branch.score_proj);
        }
        out
    }

    fn linear_paths() -> Vec<String> {
        let mut out = vec!["rescore".to_string()];
        out.push("matcher.embedder.0".into());
        out.push("matcher.embedder.1".into());
        for b in ["st", "lt"] {
            for l in ["encoder", "decoder"] {
                for part in ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o", "ff.lin1", "ff.lin2"] {
                    out.push(format!("matcher.{b}.{l}.{part}"));
                }
            }
            out.push(format!("matcher.{b}.score_proj"));
        }
        out
    }

    /// Stable dotted tensor paths in traversal order.
    pub fn paths(&self) -> Vec<String> {
        Self::linear_paths()
            .into_iter()
            .flat_map(|p| [format!("{p}.weight"), format!("{p}.bias")])
            .collect()
    }

    /// Parameter paths and tensors in deterministic traversal order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mats: Vec<&Matrix> = self
            .linears()
            .into_iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect();
        self.paths().into_iter().zip(mats).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.linears_mut()
            .into_iter()
            .flat_map(|l| {
                let Linear { weight, bias } = l;
                [weight, bias]
            })
            .collect()
    }

    /// Bind every tensor onto a tape; leaves come back in traversal order.
    pub fn bind(&self, tape: &mut Tape) -> (BoundModel, Vec<Var>) {
        let mut leaves = Vec::new();
        let mut leaf = |m: &Matrix| {
            let v = tape.leaf(m.clone());
            leaves.push(v);
            v
        };
        let rescore = Linear {
            weight: leaf(&self.rescore.weight),
            bias: leaf(&self.rescore.bias),
        };
        let matcher = self.matcher.map(&mut leaf);
        (BoundModel { rescore, matcher }, leaves)
    }

    /// Pair per-leaf gradients (traversal order) with tensor paths.
    pub fn gradients_from(&self, grads: Vec<Matrix>) -> Gradients {
        let paths = self.paths();
        debug_assert_eq!(paths.len(), grads.len());
        Gradients {
            tensors: paths.into_iter().zip(grads).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, m) in self.tensors() {
            out.extend_from_slice(m.data());
        }
        out
    }

    pub fn assign_flat(&mut self, theta: &[f64]) -> Result<()> {
        let mut pos = 0usize;
        for m in self.tensors_mut() {
            let n = m.rows() * m.cols();
            if pos + n > theta.len() {
                return Err(Error::dim("assign_flat", "parameter vector too short"));
            }
            m.data_mut().copy_from_slice(&theta[pos..pos + n]);
            pos += n;
        }
        if pos != theta.len() {
            return Err(Error::dim("assign_flat", "parameter vector too long"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }
}

/// Tape-bound view of the model.
pub struct BoundModel {
    pub rescore: Linear<Var>,
    pub matcher: MatcherParams<Var>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelParams {
        ModelParams::init(
            ModelConfig {
                query_dim: 6,
                model_dim: 8,
                heads: 2,
                embed_hidden: 8,
            },
            42,
        )
        .unwrap()
    }

    #[test]
    fn bind_order_matches_tensor_order() {
        let p = small();
        let mut tape = Tape::new();
        let (_, leaves) = p.bind(&mut tape);
        let tensors = p.tensors();
        assert_eq!(leaves.len(), tensors.len());
        for (leaf, (_, m)) in leaves.iter().zip(&tensors) {
            assert_eq!(&tape.value(*leaf), m);
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let p = small();
        let flat = p.flatten();
        let mut q = ModelParams::init(p.cfg, 7).unwrap();
        assert_ne!(q.flatten(), flat);
        q.assign_flat(&flat).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn invalid_head_split_rejected() {
        let cfg = ModelConfig {
            query_dim: 6,
            model_dim: 10,
            heads: 4,
            embed_hidden: 8,
        };
        assert!(ModelParams::init(cfg, 0).is_err());
    }

    #[test]
    fn init_deterministic() {
        assert_eq!(small(), small());
    }
}
