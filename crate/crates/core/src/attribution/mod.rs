//! Relevance propagation from a predicted next-token logit back to every
//! block parameter (and LoRA factor) of the model, plus the input hidden
//! states `H^(0)`.
//!
//! Flow per block, top to bottom:
//!
//! 1. `R(H^(l+1))` is split element-wise in proportion to the three addends
//!    `H^(l)`, `f^(l)` and `Δ_FFN^(l)`.
//! 2. The FFN share goes through [`ffn_relevance`] to `R(g)`; LayerNorm is
//!    an identity for relevance, and `R(g)` is split in proportion to the
//!    `H^(l)` and `f^(l)` addends of `H^(l) + f^(l)`.
//! 3. `R(f)` (residual share + FFN-path share) goes through
//!    [`mha_relevance`]; `R(X)` passes LN1 unchanged and joins `R(H^(l))`.
//!
//! The unembedding receives no stored relevance: the chosen logit
//! `Z[i, ĵ] = Σ_k LN(H^(L))[i, k] · W_vocab[k, ĵ]` is decomposed over hidden
//! features directly. Conservation therefore reads
//! `Σ R(block params) + Σ R(H^(0)) = Σ_i Z[i, ĵ_i]`, up to the error
//! introduced by the stabilizer.

mod rules;

pub use rules::{
    bilinear_split, ffn_relevance, linear_relevance, lora_linear_relevance, mha_relevance,
    residual_split, FfnInputs, FfnRelevance, LinearRelevance, LoraRelevance, MhaInputs,
    MhaRelevance,
};

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::model::{BlockParams, BlockTrace, ForwardTrace, ModelConfig, ModelParams, Proj};
use crate::numerics::{stable_div, Matrix};
use crate::tensors::TensorMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    /// Stabilizer for every element-wise division.
    pub eps: f64,
    /// Relative conservation error above which `attribute` logs a warning.
    pub conservation_tol: f64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            eps: 1e-9,
            conservation_tol: 1e-6,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("attribution.eps", "must be positive and finite"));
        }
        if !(self.conservation_tol > 0.0) {
            return Err(Error::config("attribution.conservation_tol", "must be positive"));
        }
        Ok(())
    }
}

/// Relevance of every block parameter for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    /// Keyed by parameter name (`block{l}.w_q.h{r}`, `block{l}.w1`, ...).
    /// Under LoRA, frozen projections and adapter factors both appear.
    pub tensors: TensorMap,
    /// `R(H^(0))`, `m × d`.
    pub input: Matrix,
    /// Initial relevance budget: the sum of the attributed logits.
    pub total: f64,
    /// `(position, token)` pairs whose logits were attributed.
    pub targets: Vec<(usize, usize)>,
}

impl RelevanceMap {
    /// Sum of all parameter relevances plus the input relevance.
    pub fn attributed_sum(&self) -> f64 {
        self.tensors.total() + self.input.sum()
    }

    /// `|attributed − total| / max(1, |total|)`.
    pub fn conservation_error(&self) -> f64 {
        (self.attributed_sum() - self.total).abs() / self.total.abs().max(1.0)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut named: Vec<(String, &Matrix)> = self
            .tensors
            .iter()
            .map(|(n, m)| (format!("{n}.rel"), m))
            .collect();
        named.push(("input.rel".to_string(), &self.input));
        write_container(
            dir,
            "relevance",
            json!({ "total": self.total, "targets": self.targets }),
            named.iter().map(|(n, m)| (n.as_str(), *m)),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, tensors) = read_container(dir, "relevance")?;
        let total = manifest.meta["total"]
            .as_f64()
            .ok_or_else(|| Error::Data("relevance manifest lacks `total`".into()))?;
        let targets: Vec<(usize, usize)> = serde_json::from_value(manifest.meta["targets"].clone())?;
        let mut map = TensorMap::new();
        let mut input = None;
        for (name, m) in tensors {
            let base = name
                .strip_suffix(".rel")
                .ok_or_else(|| Error::Data(format!("unexpected tensor name {name}")))?;
            if base == "input" {
                input = Some(m);
            } else {
                map.insert(base, m);
            }
        }
        Ok(Self {
            tensors: map,
            input: input.ok_or_else(|| Error::Data("relevance container lacks input.rel".into()))?,
            total,
            targets,
        })
    }
}

/// Attributes the greedy prediction at the last position of the trace.
pub fn attribute(
    params: &ModelParams,
    trace: &ForwardTrace,
    cfg: &AttributionConfig,
) -> Result<RelevanceMap> {
    attribute_positions(params, trace, &[trace.seq_len() - 1], cfg)
}

/// Attributes the sum of the greedy-prediction logits at several positions.
///
/// Every rule is linear in relevance and the forward pass is causal, so this
/// equals the sum of [`attribute`] over the corresponding prefixes.
pub fn attribute_positions(
    params: &ModelParams,
    trace: &ForwardTrace,
    positions: &[usize],
    cfg: &AttributionConfig,
) -> Result<RelevanceMap> {
    cfg.validate()?;
    let m = trace.seq_len();
    if trace.blocks.len() != params.blocks.len() || trace.hf.shape() != (m, params.w_vocab.rows()) {
        return Err(Error::Data("trace does not match parameters".into()));
    }
    let mut r_h = Matrix::zeros(m, params.w_vocab.rows());
    let mut targets = Vec::with_capacity(positions.len());
    let mut total = 0.0;
    for &i in positions {
        if i >= m {
            return Err(Error::Data(format!("position {i} outside sequence of length {m}")));
        }
        let j = trace.argmax_at(i);
        targets.push((i, j));
        total += trace.logits.get(i, j);
        let hf = trace.hf.row(i);
        for (k, o) in r_h.row_mut(i).iter_mut().enumerate() {
            *o += hf[k] * params.w_vocab.get(k, j);
        }
    }
    let (tensors, input) = propagate(params, trace, r_h, cfg.eps)?;
    let map = RelevanceMap {
        tensors,
        input,
        total,
        targets,
    };
    let err = map.conservation_error();
    if err > cfg.conservation_tol {
        log::warn!("relevance conservation error {err:.3e} exceeds {:.1e}", cfg.conservation_tol);
    }
    Ok(map)
}

/// Propagates an arbitrary relevance on `H^(L)` down to `H^(0)`. Returns the
/// parameter relevances (in parameter order) and `R(H^(0))`.
pub fn propagate(
    params: &ModelParams,
    trace: &ForwardTrace,
    r_top: Matrix,
    eps: f64,
) -> Result<(TensorMap, Matrix)> {
    let n_layers = params.blocks.len();
    let mut per_block: Vec<TensorMap> = Vec::with_capacity(n_layers);
    let mut r_next = r_top;
    for l in (0..n_layers).rev() {
        let bp = &params.blocks[l];
        let bt = &trace.blocks[l];
        let h_next = trace.hidden(l + 1);
        let (map, r_h) = block_relevance(l, bp, bt, h_next, &r_next, eps)?;
        per_block.push(map);
        r_next = r_h;
    }
    let mut tensors = TensorMap::new();
    for map in per_block.into_iter().rev() {
        for (n, m) in map {
            tensors.insert(n, m);
        }
    }
    Ok((tensors, r_next))
}

fn ensure_finite(l: usize, name: &str, m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::numerical(
            format!("attribution block {l}"),
            format!("non-finite relevance in {name}"),
        ))
    }
}

fn block_relevance(
    l: usize,
    bp: &BlockParams,
    bt: &BlockTrace,
    h_next: &Matrix,
    r_next: &Matrix,
    eps: f64,
) -> Result<(TensorMap, Matrix)> {
    let shares = residual_split(h_next, r_next, &[&bt.h, &bt.f, &bt.delta], eps)?;
    let [r_h_res, r_f_res, r_delta]: [Matrix; 3] = shares.try_into().expect("three addends");

    let ffn = ffn_relevance(
        FfnInputs {
            g: &bt.g,
            u: &bt.u,
            s: &bt.s,
            delta: &bt.delta,
            w1: &bp.w1,
            b1: &bp.b1,
            w2: &bp.w2,
            b2: &bp.b2,
        },
        &r_delta,
        eps,
    )?;
    ensure_finite(l, "ffn", &ffn.g)?;

    // LN2 is identity for relevance: R(H + f) = R(g)
    let pre_ln = residual_split(&bt.resid, &ffn.g, &[&bt.h, &bt.f], eps)?;
    let [r_h_ffn, r_f_ffn]: [Matrix; 2] = pre_ln.try_into().expect("two addends");
    let r_f = r_f_res.add(&r_f_ffn)?;

    let mut map = TensorMap::new();
    let r_x = if bp.lora.is_some() {
        lora_attention(l, bp, bt, &r_f, eps, &mut map)?
    } else {
        let heads = bp.w_q.len();
        let mha = mha_relevance(
            MhaInputs {
                x: &bt.x,
                q: &bt.q,
                k: &bt.k,
                v: &bt.v,
                e: &bt.e,
                a: &bt.a,
                o: &bt.o,
                f: &bt.f,
                w_q: &bp.w_q,
                w_k: &bp.w_k,
                w_v: &bp.w_v,
                w_o: &bp.w_o,
            },
            &r_f,
            eps,
        )?;
        let MhaRelevance {
            x,
            w_o,
            w_q,
            w_k,
            w_v,
        } = mha;
        debug_assert_eq!(w_q.len(), heads);
        for (r, m) in w_q.into_iter().enumerate() {
            map.insert(format!("block{l}.w_q.h{r}"), m);
        }
        for (r, m) in w_k.into_iter().enumerate() {
            map.insert(format!("block{l}.w_k.h{r}"), m);
        }
        for (r, m) in w_v.into_iter().enumerate() {
            map.insert(format!("block{l}.w_v.h{r}"), m);
        }
        map.insert(format!("block{l}.w_o"), w_o);
        x
    };
    map.insert(format!("block{l}.w1"), ffn.w1);
    map.insert(format!("block{l}.b1"), ffn.b1);
    map.insert(format!("block{l}.w2"), ffn.w2);
    map.insert(format!("block{l}.b2"), ffn.b2);
    for (name, m) in map.iter() {
        ensure_finite(l, name, m)?;
    }

    // LN1 is identity for relevance: R(X) joins R(H)
    let mut r_h = r_h_res;
    r_h.add_assign(&r_h_ffn)?;
    r_h.add_assign(&r_x)?;
    ensure_finite(l, "hidden", &r_h)?;
    Ok((map, r_h))
}

/// Attention relevance under LoRA: the closed-form head ratios with the
/// effective weights, then [`lora_linear_relevance`] on every adapted
/// projection to split relevance between frozen weights and factors.
fn lora_attention(
    l: usize,
    bp: &BlockParams,
    bt: &BlockTrace,
    r_f: &Matrix,
    eps: f64,
    map: &mut TensorMap,
) -> Result<Matrix> {
    let lora = bp.lora.as_ref().expect("lora block");
    let heads = bp.w_q.len();
    let dh = bt.q[0].cols();
    let quarter_root = 1.0 / (4.0 * (dh as f64).sqrt());

    let out = lora_linear_relevance(&bt.o, &bp.w_o, &lora.o.a, &lora.o.b, &bt.f, r_f, eps)?;
    let r_o = out.input;
    let mut r_x = Matrix::zeros(bt.x.rows(), bt.x.cols());
    let mut frozen: [Vec<Matrix>; 3] = Default::default();
    let mut factors: [Vec<(Matrix, Matrix)>; 3] = Default::default();
    for r in 0..heads {
        let o_r = bt.o.cols_slice(r * dh, dh);
        let r_o_r = r_o.cols_slice(r * dh, dh);
        let th = rules::head_thetas(&o_r, &r_o_r, &bt.q[r], &bt.k[r], &bt.v[r], &bt.e[r], &bt.a[r], eps)?;
        let r_q = bt.q[r].hadamard(&th.theta_q)?.scale(quarter_root);
        let r_k = bt.k[r].hadamard(&th.theta_k)?.scale(quarter_root);
        let r_v = bt.v[r].hadamard(&th.theta_v)?.scale(0.5);
        for (slot, (proj, out_act, r_out)) in [
            (Proj::Q, &bt.q[r], r_q),
            (Proj::K, &bt.k[r], r_k),
            (Proj::V, &bt.v[r], r_v),
        ]
        .into_iter()
        .enumerate()
        {
            let base = match proj {
                Proj::Q => &bp.w_q[r],
                Proj::K => &bp.w_k[r],
                Proj::V => &bp.w_v[r],
            };
            let f = bp.lora_for(proj, r).expect("lora block");
            let rel = lora_linear_relevance(&bt.x, base, &f.a, &f.b, out_act, &r_out, eps)?;
            r_x.add_assign(&rel.input)?;
            frozen[slot].push(rel.frozen);
            factors[slot].push((rel.a, rel.b));
        }
    }
    for (slot, tag) in ["q", "k", "v"].iter().enumerate() {
        for (r, m) in std::mem::take(&mut frozen[slot]).into_iter().enumerate() {
            map.insert(format!("block{l}.w_{tag}.h{r}"), m);
        }
    }
    map.insert(format!("block{l}.w_o"), out.frozen);
    for (slot, tag) in ["q", "k", "v"].iter().enumerate() {
        for (r, (a, b)) in std::mem::take(&mut factors[slot]).into_iter().enumerate() {
            map.insert(format!("block{l}.lora_{tag}.h{r}.a"), a);
            map.insert(format!("block{l}.lora_{tag}.h{r}.b"), b);
        }
    }
    map.insert(format!("block{l}.lora_o.a"), out.a);
    map.insert(format!("block{l}.lora_o.b"), out.b);
    Ok(r_x)
}

/// Shapes a relevance map must have for a given model configuration.
pub fn expected_relevance_names(cfg: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..cfg.n_layers {
        for tag in ["q", "k", "v"] {
            for r in 0..cfg.n_heads {
                out.push(format!("block{l}.w_{tag}.h{r}"));
            }
        }
        out.push(format!("block{l}.w_o"));
        if cfg.lora_rank.is_some() {
            for tag in ["q", "k", "v"] {
                for r in 0..cfg.n_heads {
                    out.push(format!("block{l}.lora_{tag}.h{r}.a"));
                    out.push(format!("block{l}.lora_{tag}.h{r}.b"));
                }
            }
            out.push(format!("block{l}.lora_o.a"));
            out.push(format!("block{l}.lora_o.b"));
        }
        for n in ["w1", "b1", "w2", "b2"] {
            out.push(format!("block{l}.{n}"));
        }
    }
    out
}

/// Stabilized ratio helper re-exported for oracles in tests.
pub fn ratio(num: &Matrix, den: &Matrix, eps: f64) -> Result<Matrix> {
    stable_div(num, den, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params};
    use crate::numerics::RngState;

    fn cfg(lora: Option<usize>) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            d_head: 4,
            vocab_size: 9,
            max_seq_len: 8,
            lora_rank: lora,
            seed: 0,
        }
    }

    fn model(cfg: &ModelConfig, seed: u64) -> ModelParams {
        let mut p = init_params(cfg, &mut RngState::new(seed));
        let mut rng = RngState::new(seed + 100);
        for t in p.tensors_mut() {
            let noise = rng.normal_matrix(t.rows(), t.cols(), 0.1);
            *t = t.scale(20.0).add(&noise).unwrap();
        }
        p
    }

    #[test]
    fn global_conservation_and_names() {
        for lora in [None, Some(2)] {
            let cfg = cfg(lora);
            let p = model(&cfg, 1);
            let tr = forward(&p, &[1, 5, 2, 7, 3, 3], &cfg).unwrap();
            let map = attribute(&p, &tr, &AttributionConfig::default()).unwrap();
            assert!(map.conservation_error() <= 1e-5, "{}", map.conservation_error());
            let names: Vec<String> = map.tensors.names().cloned().collect();
            let mut expected = expected_relevance_names(&cfg);
            expected.sort();
            let mut got = names.clone();
            got.sort();
            assert_eq!(got, expected);
            for (n, m) in map.tensors.iter() {
                let (_, _, param) = p.tensors().into_iter().find(|(pn, _, _)| pn == n).unwrap();
                assert_eq!(m.shape(), param.shape(), "{n}");
            }
        }
    }

    #[test]
    fn zero_unembedding_gives_zero_map() {
        let cfg = cfg(None);
        let mut p = model(&cfg, 2);
        p.w_vocab.fill(0.0);
        let tr = forward(&p, &[1, 2, 3], &cfg).unwrap();
        let map = attribute(&p, &tr, &AttributionConfig::default()).unwrap();
        assert_eq!(map.total, 0.0);
        assert_eq!(map.tensors.iter().map(|(_, m)| m.max_abs()).fold(0.0, f64::max), 0.0);
        assert_eq!(map.input.max_abs(), 0.0);
    }

    #[test]
    fn positions_sum_equals_per_prefix_sum() {
        let cfg = cfg(None);
        let p = model(&cfg, 3);
        let tokens = [4, 1, 6, 2, 2];
        let full = forward(&p, &tokens, &cfg).unwrap();
        let ac = AttributionConfig::default();
        let multi = attribute_positions(&p, &full, &[2, 4], &ac).unwrap();
        let a = attribute(&p, &forward(&p, &tokens[..3], &cfg).unwrap(), &ac).unwrap();
        let b = attribute(&p, &full, &ac).unwrap();
        for (n, m) in multi.tensors.iter() {
            let sum = a.tensors.get(n).unwrap().sum() + b.tensors.get(n).unwrap().sum();
            assert!((m.sum() - sum).abs() <= 1e-9 * (1.0 + sum.abs()), "{n}");
        }
    }

    #[test]
    fn relevance_map_roundtrip() {
        let cfg = cfg(None);
        let p = model(&cfg, 4);
        let tr = forward(&p, &[1, 2, 3], &cfg).unwrap();
        let map = attribute(&p, &tr, &AttributionConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        map.save(dir.path()).unwrap();
        let back = RelevanceMap::load(dir.path()).unwrap();
        assert_eq!(back.total, map.total);
        assert_eq!(back.targets, map.targets);
        assert_eq!(back.tensors.len(), map.tensors.len());
        let man = crate::container::read_manifest(dir.path()).unwrap();
        assert!(man.tensors.iter().any(|t| t.name == "block1.w_q.h0.rel"));
    }
}
