use rand::Rng;

use super::config::ModelConfig;
use crate::attention::AttentionParams;
use crate::error::{shape_err, Result};
use crate::numerics::{Tape, Tensor2, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor2,
    pub w_q: Tensor2,
    pub w_k: Tensor2,
    pub w_v: Tensor2,
    pub w_o: Tensor2,
    pub mlp_norm: Tensor2,
    pub w_up: Tensor2,
    pub w_down: Tensor2,
}

/// Base transformer weights. The embedding (`d_model × vocab`) doubles as
/// the output head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embedding: Tensor2,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor2,
}

const LAYER_TENSORS: [&str; 8] = ["attn_norm", "w_q", "w_k", "w_v", "w_o", "mlp_norm", "w_up", "w_down"];

impl ModelWeights {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let h = cfg.mlp_hidden();
        let proj = |rows, cols, rng: &mut R| Tensor2::randn(rows, cols, 1.0 / (cols as f64).sqrt(), rng);
        let resid = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor2::filled(d, 1, 1.0),
                w_q: proj(d, d, rng),
                w_k: proj(d, d, rng),
                w_v: proj(d, d, rng),
                w_o: proj(d, d, rng).scale(resid),
                mlp_norm: Tensor2::filled(d, 1, 1.0),
                w_up: proj(h, d, rng),
                w_down: proj(d, h, rng).scale(resid),
            })
            .collect();
        Self {
            embedding: Tensor2::randn(d, cfg.vocab_size, 0.5, rng),
            layers,
            final_norm: Tensor2::filled(d, 1, 1.0),
        }
    }

    /// Tensors in canonical order with their checkpoint names.
    pub fn named(&self) -> Vec<(String, &Tensor2)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            let ts = [
                &l.attn_norm,
                &l.w_q,
                &l.w_k,
                &l.w_v,
                &l.w_o,
                &l.mlp_norm,
                &l.w_up,
                &l.w_down,
            ];
            for (name, t) in LAYER_TENSORS.iter().zip(ts) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor2> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.w_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.w_o,
                &mut l.mlp_norm,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out
    }

    /// Rebuilds weights from tensors in [`ModelWeights::named`] order,
    /// checking shapes against `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor2>) -> Result<Self> {
        let expected = Self::shapes(cfg);
        if tensors.len() != expected.len() {
            return shape_err(
                "model weights",
                format!("{} tensors, expected {}", tensors.len(), expected.len()),
            );
        }
        for (i, (t, s)) in tensors.iter().zip(&expected).enumerate() {
            if t.shape() != *s {
                return shape_err(
                    "model weights",
                    format!("tensor {i} is {:?}, expected {s:?}", t.shape()),
                );
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let embedding = next();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                attn_norm: next(),
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                mlp_norm: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        let final_norm = next();
        Ok(Self {
            embedding,
            layers,
            final_norm,
        })
    }

    fn shapes(cfg: &ModelConfig) -> Vec<(usize, usize)> {
        let d = cfg.d_model;
        let h = cfg.mlp_hidden();
        let mut out = vec![(d, cfg.vocab_size)];
        for _ in 0..cfg.n_layers {
            out.extend([(d, 1), (d, d), (d, d), (d, d), (d, d), (d, 1), (h, d), (d, h)]);
        }
        out.push((d, 1));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn attention_params(&self, layer: usize, n_heads: usize) -> Result<AttentionParams> {
        let l = &self.layers[layer];
        AttentionParams::new(l.w_q.clone(), l.w_k.clone(), l.w_v.clone(), l.w_o.clone(), n_heads)
    }

    /// Puts every tensor on the tape, as trainable leaves or constants.
    pub fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> WeightVars<'t> {
        let vars: Vec<Var<'t>> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        WeightVars::from_list(vars)
    }
}

#[derive(Clone, Copy)]
pub struct LayerVars<'t> {
    pub attn_norm: Var<'t>,
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
    pub w_o: Var<'t>,
    pub mlp_norm: Var<'t>,
    pub w_up: Var<'t>,
    pub w_down: Var<'t>,
}

pub struct WeightVars<'t> {
    pub embedding: Var<'t>,
    pub layers: Vec<LayerVars<'t>>,
    pub final_norm: Var<'t>,
    all: Vec<Var<'t>>,
}

impl<'t> WeightVars<'t> {
    fn from_list(all: Vec<Var<'t>>) -> Self {
        let n_layers = (all.len() - 2) / LAYER_TENSORS.len();
        let layers = (0..n_layers)
            .map(|i| {
                let b = 1 + i * LAYER_TENSORS.len();
                LayerVars {
                    attn_norm: all[b],
                    w_q: all[b + 1],
                    w_k: all[b + 2],
                    w_v: all[b + 3],
                    w_o: all[b + 4],
                    mlp_norm: all[b + 5],
                    w_up: all[b + 6],
                    w_down: all[b + 7],
                }
            })
            .collect();
        Self {
            embedding: all[0],
            layers,
            final_norm: all[all.len() - 1],
            all,
        }
    }

    /// Vars in [`ModelWeights::named`] order.
    pub fn all(&self) -> &[Var<'t>] {
        &self.all
    }
}
