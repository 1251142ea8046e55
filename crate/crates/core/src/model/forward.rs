use crate::error::{Error, Result};
use crate::numerics::{argmax, gelu, layer_norm, LayerNormCache, Matrix};

use super::{ModelConfig, ModelParams, Proj};

/// Cached activations of one block.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    /// Block input `H^(l)`.
    pub h: Matrix,
    pub ln1: LayerNormCache,
    /// `X = LN1(H)`.
    pub x: Matrix,
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Softmax input `Q_r K_rᵀ / √d_head`; masked (future) entries hold 0.
    pub e: Vec<Matrix>,
    /// Attention weights; masked entries are exactly 0.
    pub a: Vec<Matrix>,
    pub o_heads: Vec<Matrix>,
    /// Concatenated head outputs.
    pub o: Matrix,
    /// Attention output `f = O · W_O`.
    pub f: Matrix,
    /// Pre-LN residual sum `H + f`.
    pub resid: Matrix,
    pub ln2: LayerNormCache,
    /// `g = LN2(H + f)`.
    pub g: Matrix,
    pub u: Matrix,
    pub s: Matrix,
    /// FFN output `Δ = S W_2 + b_2`.
    pub delta: Matrix,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    pub blocks: Vec<BlockTrace>,
    /// `H^(L)`.
    pub h_final: Matrix,
    pub lnf: LayerNormCache,
    /// `LN_f(H^(L))`.
    pub hf: Matrix,
    /// Logits `Z`, `m × |V|`.
    pub logits: Matrix,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// `H^(l)` for `l` in `0..=L`.
    pub fn hidden(&self, l: usize) -> &Matrix {
        if l == self.blocks.len() {
            &self.h_final
        } else {
            &self.blocks[l].h
        }
    }

    /// Greedy next-token prediction at row `i` (ties → lowest id).
    pub fn argmax_at(&self, i: usize) -> usize {
        argmax(self.logits.row(i))
    }
}

fn check_tokens(tokens: &[usize], cfg: &ModelConfig) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Data("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Data(format!(
            "sequence of length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "token id {t} out of range for vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Full forward pass, caching every intermediate needed by backward and
/// attribution.
pub fn forward(params: &ModelParams, tokens: &[usize], cfg: &ModelConfig) -> Result<ForwardTrace> {
    check_tokens(tokens, cfg)?;
    let m = tokens.len();
    let d = cfg.d_model;
    let dh = cfg.d_head;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut h = Matrix::zeros(m, d);
    for (i, &t) in tokens.iter().enumerate() {
        let row = h.row_mut(i);
        for ((o, &te), &pe) in row
            .iter_mut()
            .zip(params.tok_emb.row(t))
            .zip(params.pos_emb.row(i))
        {
            *o = te + pe;
        }
    }

    let mut blocks = Vec::with_capacity(params.blocks.len());
    for bp in &params.blocks {
        let (x, ln1) = layer_norm(&h, &bp.ln1_gain, &bp.ln1_bias)?;
        let mut q = Vec::with_capacity(cfg.n_heads);
        let mut k = Vec::with_capacity(cfg.n_heads);
        let mut v = Vec::with_capacity(cfg.n_heads);
        let mut e = Vec::with_capacity(cfg.n_heads);
        let mut a = Vec::with_capacity(cfg.n_heads);
        let mut o_heads = Vec::with_capacity(cfg.n_heads);
        let mut o = Matrix::zeros(m, d);
        for r in 0..cfg.n_heads {
            let qr = x.matmul(&bp.effective_head(Proj::Q, r)?)?;
            let kr = x.matmul(&bp.effective_head(Proj::K, r)?)?;
            let vr = x.matmul(&bp.effective_head(Proj::V, r)?)?;
            let mut er = qr.matmul_t(&kr)?.scale(scale);
            let mut ar = Matrix::zeros(m, m);
            for i in 0..m {
                // causal: row i sees columns 0..=i
                let erow = er.row_mut(i);
                for v in erow[i + 1..].iter_mut() {
                    *v = 0.0;
                }
                let max = erow[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let arow = ar.row_mut(i);
                let mut total = 0.0;
                for j in 0..=i {
                    let p = (erow[j] - max).exp();
                    arow[j] = p;
                    total += p;
                }
                for p in arow[..=i].iter_mut() {
                    *p /= total;
                }
            }
            let or = ar.matmul(&vr)?;
            o.set_cols(r * dh, &or);
            q.push(qr);
            k.push(kr);
            v.push(vr);
            e.push(er);
            a.push(ar);
            o_heads.push(or);
        }
        let f = o.matmul(&bp.effective_o()?)?;
        let resid = h.add(&f)?;
        let (g, ln2) = layer_norm(&resid, &bp.ln2_gain, &bp.ln2_bias)?;
        let u = g.matmul(&bp.w1)?.add_row_broadcast(&bp.b1)?;
        let s = gelu(&u);
        let delta = s.matmul(&bp.w2)?.add_row_broadcast(&bp.b2)?;
        let h_next = resid.add(&delta)?;
        blocks.push(BlockTrace {
            h,
            ln1,
            x,
            q,
            k,
            v,
            e,
            a,
            o_heads,
            o,
            f,
            resid,
            ln2,
            g,
            u,
            s,
            delta,
        });
        h = h_next;
    }

    let (hf, lnf) = layer_norm(&h, &params.lnf_gain, &params.lnf_bias)?;
    let logits = hf.matmul(&params.w_vocab)?;
    if !logits.is_finite() {
        return Err(Error::numerical("forward", "non-finite logits"));
    }
    Ok(ForwardTrace {
        tokens: tokens.to_vec(),
        blocks,
        h_final: h,
        lnf,
        hf,
        logits,
    })
}

/// Greedy decoding: appends the argmax token until `max_new` tokens were
/// produced or `eos` was emitted. Returns the full sequence, prompt
/// included.
pub fn greedy_decode(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    max_new: usize,
    eos: Option<usize>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Data("greedy_decode needs a non-empty prompt".into()));
    }
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        if seq.len() > cfg.max_seq_len {
            return Err(Error::Data(format!(
                "context overflow: decoding needs {} positions but max_seq_len is {}",
                seq.len(),
                cfg.max_seq_len
            )));
        }
        let trace = forward(params, &seq, cfg)?;
        let next = trace.argmax_at(seq.len() - 1);
        seq.push(next);
        if Some(next) == eos {
            break;
        }
    }
    Ok(seq)
}
