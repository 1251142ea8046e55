//! Decoder-only transformer: configuration, parameter containers,
//! initialization, traced forward pass, reverse-mode gradients, greedy
//! decoding and checkpoint I/O.
//!
//! Block structure (per layer `l`):
//!
//! ```text
//! X = LN1(H)
//! f = Concat_r(softmax(causal(Q_r K_rᵀ / √d_head)) V_r) · W_O
//! g = LN2(H + f)
//! H' = (H + f) + (GELU(g W_1 + b_1) W_2 + b_2)
//! ```
//!
//! and logits are `Z = LN_f(H^(L)) · W_vocab`. With a LoRA rank set, the
//! Q, K, V and O projections use `W + A·B`.

mod backward;
mod checkpoint;
mod forward;

pub use backward::backward;
pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
pub use forward::{forward, greedy_decode, BlockTrace, ForwardTrace};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};

/// Standard deviation of weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub lora_rank: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("vocab_size", self.vocab_size),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("model.{field}"), "must be at least 1"));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::config(
                "model.d_model",
                format!(
                    "must equal n_heads × d_head ({} × {})",
                    self.n_heads, self.d_head
                ),
            ));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("model.max_seq_len", "must be at least 2"));
        }
        if self.lora_rank == Some(0) {
            return Err(Error::config("model.lora_rank", "must be at least 1 when set"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_block = 4 * d * d + 2 * d * self.d_ff + self.d_ff + d + 4 * d;
        let lora = self.lora_rank.map_or(0, |r| {
            3 * self.n_heads * (d * r + r * self.d_head) + (d * r + r * d)
        });
        self.vocab_size * d
            + self.max_seq_len * d
            + self.n_layers * (per_block + lora)
            + 2 * d
            + d * self.vocab_size
    }
}

/// Low-rank adapter `A · B` added to a frozen projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    /// `d_in × rank`
    pub a: Matrix,
    /// `rank × d_out`
    pub b: Matrix,
}

impl LoraFactors {
    pub fn delta(&self) -> Result<Matrix> {
        self.a.matmul(&self.b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockLora {
    pub q: Vec<LoraFactors>,
    pub k: Vec<LoraFactors>,
    pub v: Vec<LoraFactors>,
    pub o: LoraFactors,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    /// Per-head query projections, each `d × d_head`.
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    /// `d × d`
    pub w_o: Matrix,
    /// `d × d_ff`
    pub w1: Matrix,
    /// `1 × d_ff`
    pub b1: Matrix,
    /// `d_ff × d`
    pub w2: Matrix,
    /// `1 × d`
    pub b2: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub lora: Option<BlockLora>,
}

/// Which projection of a block a weight belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Proj {
    Q,
    K,
    V,
}

impl BlockParams {
    fn base(&self, proj: Proj) -> &[Matrix] {
        match proj {
            Proj::Q => &self.w_q,
            Proj::K => &self.w_k,
            Proj::V => &self.w_v,
        }
    }

    pub fn lora_for(&self, proj: Proj, head: usize) -> Option<&LoraFactors> {
        self.lora.as_ref().map(|l| match proj {
            Proj::Q => &l.q[head],
            Proj::K => &l.k[head],
            Proj::V => &l.v[head],
        })
    }

    /// Effective head projection, `W + A·B` when an adapter is present.
    pub fn effective_head(&self, proj: Proj, head: usize) -> Result<Matrix> {
        let w = &self.base(proj)[head];
        match self.lora_for(proj, head) {
            Some(f) => w.add(&f.delta()?),
            None => Ok(w.clone()),
        }
    }

    pub fn effective_o(&self) -> Result<Matrix> {
        match &self.lora {
            Some(l) => self.w_o.add(&l.o.delta()?),
            None => Ok(self.w_o.clone()),
        }
    }
}

/// Coarse grouping of parameters, used for trainable-set and gating rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Embedding,
    /// Attention projections, FFN weights and FFN biases of a block.
    BlockWeight,
    LayerNorm,
    Unembedding,
    Lora,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `|V| × d`
    pub tok_emb: Matrix,
    /// `max_seq_len × d`
    pub pos_emb: Matrix,
    pub blocks: Vec<BlockParams>,
    pub lnf_gain: Matrix,
    pub lnf_bias: Matrix,
    /// `d × |V|`
    pub w_vocab: Matrix,
}

impl ModelParams {
    /// Every parameter tensor with its canonical name and role, in a fixed
    /// order. This order defines checkpoint layout and optimizer state.
    pub fn tensors(&self) -> Vec<(String, ParamRole, &Matrix)> {
        let mut out: Vec<(String, ParamRole, &Matrix)> = vec![
            ("tok_emb".into(), ParamRole::Embedding, &self.tok_emb),
            ("pos_emb".into(), ParamRole::Embedding, &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (r, w) in b.w_q.iter().enumerate() {
                out.push((format!("block{l}.w_q.h{r}"), ParamRole::BlockWeight, w));
            }
            for (r, w) in b.w_k.iter().enumerate() {
                out.push((format!("block{l}.w_k.h{r}"), ParamRole::BlockWeight, w));
            }
            for (r, w) in b.w_v.iter().enumerate() {
                out.push((format!("block{l}.w_v.h{r}"), ParamRole::BlockWeight, w));
            }
            out.push((format!("block{l}.w_o"), ParamRole::BlockWeight, &b.w_o));
            out.push((format!("block{l}.w1"), ParamRole::BlockWeight, &b.w1));
            out.push((format!("block{l}.b1"), ParamRole::BlockWeight, &b.b1));
            out.push((format!("block{l}.w2"), ParamRole::BlockWeight, &b.w2));
            out.push((format!("block{l}.b2"), ParamRole::BlockWeight, &b.b2));
            out.push((format!("block{l}.ln1.gain"), ParamRole::LayerNorm, &b.ln1_gain));
            out.push((format!("block{l}.ln1.bias"), ParamRole::LayerNorm, &b.ln1_bias));
            out.push((format!("block{l}.ln2.gain"), ParamRole::LayerNorm, &b.ln2_gain));
            out.push((format!("block{l}.ln2.bias"), ParamRole::LayerNorm, &b.ln2_bias));
            if let Some(lora) = &b.lora {
                for (tag, list) in [("q", &lora.q), ("k", &lora.k), ("v", &lora.v)] {
                    for (r, f) in list.iter().enumerate() {
                        out.push((format!("block{l}.lora_{tag}.h{r}.a"), ParamRole::Lora, &f.a));
                        out.push((format!("block{l}.lora_{tag}.h{r}.b"), ParamRole::Lora, &f.b));
                    }
                }
                out.push((format!("block{l}.lora_o.a"), ParamRole::Lora, &lora.o.a));
                out.push((format!("block{l}.lora_o.b"), ParamRole::Lora, &lora.o.b));
            }
        }
        out.push(("ln_f.gain".into(), ParamRole::LayerNorm, &self.lnf_gain));
        out.push(("ln_f.bias".into(), ParamRole::LayerNorm, &self.lnf_bias));
        out.push(("w_vocab".into(), ParamRole::Unembedding, &self.w_vocab));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in self.blocks.iter_mut() {
            out.extend(b.w_q.iter_mut());
            out.extend(b.w_k.iter_mut());
            out.extend(b.w_v.iter_mut());
            out.push(&mut b.w_o);
            out.push(&mut b.w1);
            out.push(&mut b.b1);
            out.push(&mut b.w2);
            out.push(&mut b.b2);
            out.push(&mut b.ln1_gain);
            out.push(&mut b.ln1_bias);
            out.push(&mut b.ln2_gain);
            out.push(&mut b.ln2_bias);
            if let Some(lora) = &mut b.lora {
                for list in [&mut lora.q, &mut lora.k, &mut lora.v] {
                    for f in list.iter_mut() {
                        out.push(&mut f.a);
                        out.push(&mut f.b);
                    }
                }
                out.push(&mut lora.o.a);
                out.push(&mut lora.o.b);
            }
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.w_vocab);
        out
    }

    /// All-zero parameters with the same shapes.
    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, m)| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, m)| m.is_finite())
    }

    /// Checks shapes against a configuration.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = init_params(cfg, &mut RngState::new(0));
        let a = self.tensors();
        let b = expected.tensors();
        if a.len() != b.len() {
            return Err(Error::Data(format!(
                "parameter count mismatch: {} tensors vs {} expected",
                a.len(),
                b.len()
            )));
        }
        for ((na, _, ma), (nb, _, mb)) in a.iter().zip(&b) {
            if na != nb || ma.shape() != mb.shape() {
                return Err(Error::Data(format!(
                    "tensor {na} {:?} does not match expected {nb} {:?}",
                    ma.shape(),
                    mb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Adds LoRA factors (A ~ N(0, 0.02²) truncated, B = 0) to a model that
    /// has none.
    pub fn attach_lora(&mut self, cfg: &ModelConfig, rank: usize, rng: &mut RngState) {
        for b in self.blocks.iter_mut() {
            b.lora = Some(init_block_lora(cfg, rank, rng));
        }
    }
}

fn trunc_matrix(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.truncated_normal(INIT_STD))
        .collect();
    Matrix::new(rows, cols, data).expect("sized")
}

fn init_block_lora(cfg: &ModelConfig, rank: usize, rng: &mut RngState) -> BlockLora {
    let d = cfg.d_model;
    let head = |rng: &mut RngState| LoraFactors {
        a: trunc_matrix(rng, d, rank),
        b: Matrix::zeros(rank, cfg.d_head),
    };
    let q = (0..cfg.n_heads).map(|_| head(rng)).collect();
    let k = (0..cfg.n_heads).map(|_| head(rng)).collect();
    let v = (0..cfg.n_heads).map(|_| head(rng)).collect();
    let o = LoraFactors {
        a: trunc_matrix(rng, d, rank),
        b: Matrix::zeros(rank, d),
    };
    BlockLora { q, k, v, o }
}

/// Fresh parameters: weights ~ N(0, 0.02²) truncated at ±2σ, biases zero,
/// LayerNorm gains one, LoRA `A` random and `B` zero.
pub fn init_params(cfg: &ModelConfig, rng: &mut RngState) -> ModelParams {
    let d = cfg.d_model;
    let tok_emb = trunc_matrix(rng, cfg.vocab_size, d);
    let pos_emb = trunc_matrix(rng, cfg.max_seq_len, d);
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let w_q = (0..cfg.n_heads).map(|_| trunc_matrix(rng, d, cfg.d_head)).collect();
        let w_k = (0..cfg.n_heads).map(|_| trunc_matrix(rng, d, cfg.d_head)).collect();
        let w_v = (0..cfg.n_heads).map(|_| trunc_matrix(rng, d, cfg.d_head)).collect();
        let w_o = trunc_matrix(rng, d, d);
        let w1 = trunc_matrix(rng, d, cfg.d_ff);
        let w2 = trunc_matrix(rng, cfg.d_ff, d);
        blocks.push(BlockParams {
            w_q,
            w_k,
            w_v,
            w_o,
            w1,
            b1: Matrix::zeros(1, cfg.d_ff),
            w2,
            b2: Matrix::zeros(1, d),
            ln1_gain: Matrix::filled(1, d, 1.0),
            ln1_bias: Matrix::zeros(1, d),
            ln2_gain: Matrix::filled(1, d, 1.0),
            ln2_bias: Matrix::zeros(1, d),
            lora: None,
        });
    }
    let w_vocab = trunc_matrix(rng, d, cfg.vocab_size);
    let mut params = ModelParams {
        tok_emb,
        pos_emb,
        blocks,
        lnf_gain: Matrix::filled(1, d, 1.0),
        lnf_bias: Matrix::zeros(1, d),
        w_vocab,
    };
    if let Some(rank) = cfg.lora_rank {
        params.attach_lora(cfg, rank, rng);
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ff: 12,
            n_heads: 2,
            d_head: 4,
            vocab_size: 7,
            max_seq_len: 10,
            lora_rank: None,
            seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_cfg();
        let a = init_params(&cfg, &mut RngState::new(5));
        let b = init_params(&cfg, &mut RngState::new(5));
        assert_eq!(a, b);
        assert!(a.blocks.iter().all(|b| b.lora.is_none()));
        assert_eq!(a.param_count(), cfg.param_count());
        for (name, role, m) in a.tensors() {
            match role {
                ParamRole::LayerNorm if name.ends_with("gain") => {
                    assert!(m.data().iter().all(|&v| v == 1.0))
                }
                ParamRole::LayerNorm => assert!(m.data().iter().all(|&v| v == 0.0)),
                _ if name.contains(".b") => assert!(m.data().iter().all(|&v| v == 0.0)),
                _ => assert!(m.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD)),
            }
        }
    }

    #[test]
    fn lora_init_leaves_effective_weights_unchanged() {
        let cfg = ModelConfig {
            lora_rank: Some(2),
            ..tiny_cfg()
        };
        let p = init_params(&cfg, &mut RngState::new(1));
        assert_eq!(p.param_count(), cfg.param_count());
        let b = &p.blocks[0];
        assert_eq!(b.effective_head(Proj::Q, 1).unwrap(), b.w_q[1]);
        assert_eq!(b.effective_o().unwrap(), b.w_o);
        assert!(b.lora.as_ref().unwrap().q[0].a.max_abs() > 0.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg();
        assert!(cfg.validate().is_ok());
        cfg.d_model = 9;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("d_model"), "{err}");
        let cfg = ModelConfig {
            max_seq_len: 1,
            ..tiny_cfg()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tensor_names_align_with_mut_view() {
        let mut p = init_params(&tiny_cfg(), &mut RngState::new(2));
        let shapes: Vec<_> = p.tensors().iter().map(|(_, _, m)| m.shape()).collect();
        let shapes_mut: Vec<_> = p.tensors_mut().iter().map(|m| m.shape()).collect();
        assert_eq!(shapes, shapes_mut);
    }
}
