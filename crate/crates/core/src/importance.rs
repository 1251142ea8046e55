//! Task-level importance priors built from per-sample relevance maps, and
//! the historical gradient gates derived from them.
//!
//! Pipeline for one task: keep the samples the task model generates
//! exactly ([`select_correct`]), attribute each one over its response
//! positions, normalize every map per tensor ([`normalize_tensors`]), then
//! average the `K` largest signed values per element
//! ([`aggregate_task_prior`]). Gates for a later stage are
//! `1 − max(0, max_τ prior_τ)` ([`historical_gate`]).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attribution::{attribute_positions, residual_split, AttributionConfig, RelevanceMap};
use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::model::{forward, ForwardTrace, ModelConfig, ModelParams};
use crate::numerics::Matrix;
use crate::parallel::map_ordered;
use crate::tasks::{is_correct, Encoded, TaskKind};
use crate::tensors::TensorMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceConfig {
    /// Samples averaged per element.
    pub k: usize,
    /// Stabilizer in the normalization denominator.
    pub eps: f64,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self { k: 8, eps: 1e-12 }
    }
}

impl ImportanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("importance.k", "must be at least 1"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("importance.eps", "must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportancePrior {
    pub task_id: usize,
    /// Per-tensor importance in `[-1, 1]`.
    pub tensors: TensorMap,
    /// Effective `K`, i.e. `min(K, n_samples)`.
    pub k: usize,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateMask {
    /// Per-tensor multiplier in `[0, 1]`.
    pub tensors: TensorMap,
}

impl GateMask {
    pub fn ones<'a>(shapes: impl IntoIterator<Item = (&'a str, (usize, usize))>) -> Self {
        Self {
            tensors: shapes
                .into_iter()
                .map(|(n, (r, c))| (n.to_string(), Matrix::filled(r, c, 1.0)))
                .collect(),
        }
    }

    pub fn is_all_ones(&self) -> bool {
        self.tensors.iter().all(|(_, m)| m.data().iter().all(|&v| v == 1.0))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_container(dir, "gate", json!({}), self.tensors.iter().map(|(n, m)| (n.as_str(), m)))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (_, tensors) = read_container(dir, "gate")?;
        Ok(Self {
            tensors: tensors.into_iter().collect(),
        })
    }
}

impl ImportancePrior {
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_container(
            dir,
            "prior",
            json!({ "task_id": self.task_id, "k": self.k, "n_samples": self.n_samples }),
            self.tensors.iter().map(|(n, m)| (n.as_str(), m)),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, tensors) = read_container(dir, "prior")?;
        let field = |f: &str| {
            manifest.meta[f]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Data(format!("prior manifest lacks `{f}`")))
        };
        Ok(Self {
            task_id: field("task_id")?,
            k: field("k")?,
            n_samples: field("n_samples")?,
            tensors: tensors.into_iter().collect(),
        })
    }
}

/// `sign(R) · log(1+|R|) / (max log(1+|R|) + eps)` for one tensor.
pub fn normalize_tensor(r: &Matrix, eps: f64) -> Matrix {
    let logs = r.map(|v| v.abs().ln_1p());
    let max = logs.data().iter().fold(0.0f64, |a, &b| a.max(b));
    let den = max + eps;
    let mut out = logs;
    for (o, &v) in out.data_mut().iter_mut().zip(r.data()) {
        *o = if v == 0.0 { 0.0 } else { v.signum() * *o / den };
    }
    out
}

/// Per-tensor normalization of every tensor in the map.
pub fn normalize_tensors(map: &TensorMap, eps: f64) -> TensorMap {
    map.map(|_, m| normalize_tensor(m, eps))
}

/// Normalized parameter relevances of one sample map. Input relevance is
/// not a parameter and is dropped.
pub fn normalize_sample(map: &RelevanceMap, eps: f64) -> TensorMap {
    normalize_tensors(&map.tensors, eps)
}

/// Indices of examples whose greedy decode matches the target exactly.
pub fn select_correct(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: TaskKind,
    examples: &[Encoded],
) -> Result<Vec<usize>> {
    let flags = map_ordered(examples, |e| is_correct(params, cfg, e))?;
    let correct: Vec<usize> = flags
        .iter()
        .enumerate()
        .filter_map(|(i, &f)| f.then_some(i))
        .collect();
    if correct.is_empty() {
        return Err(Error::NoCorrectSamples {
            task: task.name().into(),
            total: examples.len(),
        });
    }
    Ok(correct)
}

/// Sample-level relevance: the summed attribution of the model's greedy
/// predictions at every response position under teacher forcing.
pub fn sample_relevance(
    params: &ModelParams,
    cfg: &ModelConfig,
    enc: &Encoded,
    attr: &AttributionConfig,
) -> Result<RelevanceMap> {
    Ok(sample_relevance_with_trace(params, cfg, enc, attr)?.0)
}

fn sample_relevance_with_trace(
    params: &ModelParams,
    cfg: &ModelConfig,
    enc: &Encoded,
    attr: &AttributionConfig,
) -> Result<(RelevanceMap, ForwardTrace)> {
    let full = enc.full();
    let inputs = &full[..full.len() - 1];
    let trace = forward(params, inputs, cfg)?;
    let positions: Vec<usize> = (enc.prompt.len() - 1..inputs.len()).collect();
    let map = attribute_positions(params, &trace, &positions, attr)?;
    Ok((map, trace))
}

/// Relevance scores for the embedding tables and the unembedding, which
/// the block-level map leaves out.
///
/// `R(H^(0))` is split per row in proportion to the token and position
/// embedding addends and scattered into the tables. Each attributed logit
/// `Σ_k LN(H)[i,k] · W_vocab[k,ĵ]` scores column `ĵ` of `W_vocab` with its
/// terms. These scores overlap the block relevances and are not part of the
/// conservation budget.
pub fn embedding_relevance(
    params: &ModelParams,
    trace: &ForwardTrace,
    map: &RelevanceMap,
    eps: f64,
) -> Result<TensorMap> {
    let m = trace.seq_len();
    let d = params.tok_emb.cols();
    let mut tok = Matrix::zeros(params.tok_emb.rows(), d);
    let mut pos = Matrix::zeros(params.pos_emb.rows(), d);
    let mut e_rows = Matrix::zeros(m, d);
    let mut p_rows = Matrix::zeros(m, d);
    for (i, &t) in trace.tokens.iter().enumerate() {
        e_rows.row_mut(i).copy_from_slice(params.tok_emb.row(t));
        p_rows.row_mut(i).copy_from_slice(params.pos_emb.row(i));
    }
    let shares = residual_split(&trace.blocks[0].h, &map.input, &[&e_rows, &p_rows], eps)?;
    for (i, &t) in trace.tokens.iter().enumerate() {
        for (o, v) in tok.row_mut(t).iter_mut().zip(shares[0].row(i)) {
            *o += v;
        }
        for (o, v) in pos.row_mut(i).iter_mut().zip(shares[1].row(i)) {
            *o += v;
        }
    }
    let mut w = Matrix::zeros(params.w_vocab.rows(), params.w_vocab.cols());
    for &(i, j) in &map.targets {
        for k in 0..params.w_vocab.rows() {
            let v = w.get(k, j) + trace.hf.get(i, k) * params.w_vocab.get(k, j);
            w.set(k, j, v);
        }
    }
    Ok([
        ("tok_emb".to_string(), tok),
        ("pos_emb".to_string(), pos),
        ("w_vocab".to_string(), w),
    ]
    .into_iter()
    .collect())
}

/// Running per-element top-`K` mean over a stream of normalized maps.
///
/// The mean depends only on the multiset of retained values, so tie order
/// among equal values does not affect the result.
pub struct TopKAccumulator {
    k: usize,
    n: usize,
    names: Vec<(String, (usize, usize))>,
    /// Per tensor, `k` slots per element.
    slots: Vec<Vec<f64>>,
}

impl TopKAccumulator {
    pub fn new(template: &TensorMap, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("importance.k", "must be at least 1"));
        }
        let names: Vec<_> = template.iter().map(|(n, m)| (n.clone(), m.shape())).collect();
        let slots = names.iter().map(|(_, (r, c))| Vec::with_capacity(r * c * k)).collect();
        Ok(Self { k, n: 0, names, slots })
    }

    pub fn push(&mut self, map: &TensorMap) -> Result<()> {
        if map.len() != self.names.len() {
            return Err(Error::Data(format!(
                "sample map has {} tensors, expected {}",
                map.len(),
                self.names.len()
            )));
        }
        let k = self.k;
        for ((name, shape), slots) in self.names.iter().zip(&mut self.slots) {
            let m = map
                .get(name)
                .ok_or_else(|| Error::Data(format!("sample map lacks tensor {name}")))?;
            if m.shape() != *shape {
                return Err(Error::Shape {
                    op: "top-k aggregation",
                    left: m.shape(),
                    right: *shape,
                });
            }
            if self.n < k {
                // slot layout is element-major; grow each element's run by one
                let filled = self.n;
                let mut next = Vec::with_capacity(m.len() * (filled + 1));
                for (u, &v) in m.data().iter().enumerate() {
                    next.extend_from_slice(&slots[u * filled..(u + 1) * filled]);
                    next.push(v);
                }
                *slots = next;
            } else {
                for (u, &v) in m.data().iter().enumerate() {
                    let run = &mut slots[u * k..(u + 1) * k];
                    let (min_i, min_v) = run
                        .iter()
                        .enumerate()
                        .fold((0, f64::INFINITY), |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc });
                    if v > min_v {
                        run[min_i] = v;
                    }
                }
            }
        }
        self.n += 1;
        Ok(())
    }

    pub fn finish(self, task_id: usize) -> Result<ImportancePrior> {
        if self.n == 0 {
            return Err(Error::Data("cannot aggregate a prior from zero samples".into()));
        }
        let kk = self.k.min(self.n);
        let tensors = self
            .names
            .into_iter()
            .zip(self.slots)
            .map(|((name, (r, c)), slots)| {
                let data = slots.chunks_exact(kk).map(|run| run.iter().sum::<f64>() / kk as f64).collect();
                (name, Matrix::new(r, c, data).expect("sized"))
            })
            .collect();
        Ok(ImportancePrior {
            task_id,
            tensors,
            k: kk,
            n_samples: self.n,
        })
    }
}

/// Per element, the mean of the `min(K, n)` largest signed values across
/// the normalized sample maps.
pub fn aggregate_task_prior(maps: &[TensorMap], k: usize, task_id: usize) -> Result<ImportancePrior> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Data("cannot aggregate a prior from zero samples".into()))?;
    let mut acc = TopKAccumulator::new(first, k)?;
    for m in maps {
        acc.push(m)?;
    }
    acc.finish(task_id)
}

/// Attribution, normalization and aggregation over the given examples.
/// Only tensors accepted by `keep` enter the prior.
#[allow(clippy::too_many_arguments)]
pub fn build_prior(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: TaskKind,
    task_id: usize,
    examples: &[&Encoded],
    attr: &AttributionConfig,
    imp: &ImportanceConfig,
    keep: &(dyn Fn(&str) -> bool + Sync),
) -> Result<ImportancePrior> {
    imp.validate()?;
    if examples.is_empty() {
        return Err(Error::NoCorrectSamples {
            task: task.name().into(),
            total: 0,
        });
    }
    let mut acc: Option<TopKAccumulator> = None;
    // bounded chunks keep memory flat while attribution runs in parallel
    for chunk in examples.chunks(32) {
        let maps = map_ordered(chunk, |e| {
            let (r, trace) = sample_relevance_with_trace(params, cfg, e, attr)?;
            let mut kept: TensorMap = TensorMap::new();
            if ["tok_emb", "pos_emb", "w_vocab"].iter().any(|n| keep(n)) {
                for (n, m) in embedding_relevance(params, &trace, &r, attr.eps)? {
                    if keep(&n) {
                        kept.insert(n, m);
                    }
                }
            }
            for (n, m) in r.tensors {
                if keep(&n) {
                    kept.insert(n, m);
                }
            }
            Ok(normalize_tensors(&kept, imp.eps))
        })?;
        for m in &maps {
            let a = match &mut acc {
                Some(a) => a,
                None => acc.insert(TopKAccumulator::new(m, imp.k)?),
            };
            a.push(m)?;
        }
    }
    acc.expect("nonempty").finish(task_id)
}

/// `gate = 1 − max(0, max over priors)` over the given tensor set; all ones
/// when `priors` is empty.
pub fn historical_gate<'a>(
    priors: &[&ImportancePrior],
    shapes: impl IntoIterator<Item = (&'a str, (usize, usize))>,
) -> Result<GateMask> {
    let mut gate = GateMask::ones(shapes);
    for prior in priors {
        for (name, g) in gate.tensors.iter_mut() {
            let p = prior.tensors.get(name).ok_or_else(|| {
                Error::Data(format!("prior for task {} lacks tensor {name}", prior.task_id))
            })?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "historical gate",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            for (gv, &pv) in g.data_mut().iter_mut().zip(p.data()) {
                *gv = gv.min(1.0 - pv.max(0.0));
            }
        }
    }
    Ok(gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn one(name: &str, m: Matrix) -> TensorMap {
        [(name.to_string(), m)].into_iter().collect()
    }

    fn prior(values: &[f64]) -> ImportancePrior {
        ImportancePrior {
            task_id: 0,
            tensors: one("w", Matrix::row_vector(values.to_vec())),
            k: 1,
            n_samples: 1,
        }
    }

    #[test]
    fn normalization_examples() {
        let r = Matrix::row_vector(vec![0.0, E - 1.0, -(E - 1.0)]);
        let n = normalize_tensor(&r, 1e-12);
        assert!(n.get(0, 0) == 0.0);
        assert!((n.get(0, 1) - 1.0).abs() < 1e-11);
        assert!((n.get(0, 2) + 1.0).abs() < 1e-11);
        assert_eq!(normalize_tensor(&Matrix::zeros(2, 3), 1e-12), Matrix::zeros(2, 3));
    }

    #[test]
    fn aggregation_example() {
        let maps: Vec<TensorMap> = [0.9, 0.1, -0.5, 0.8]
            .iter()
            .map(|&v| one("w", Matrix::row_vector(vec![v])))
            .collect();
        let p = aggregate_task_prior(&maps, 2, 3).unwrap();
        assert!((p.tensors.get("w").unwrap().get(0, 0) - 0.85).abs() < 1e-15);
        assert_eq!((p.k, p.n_samples, p.task_id), (2, 4, 3));
        let single = aggregate_task_prior(&maps[..1], 8, 0).unwrap();
        assert_eq!(single.tensors, maps[0]);
        assert_eq!(single.k, 1);
    }

    #[test]
    fn gate_examples() {
        let g = historical_gate(&[&prior(&[0.5, -0.3]), &prior(&[-0.2, -0.1])], [("w", (1, 2))]).unwrap();
        assert_eq!(g.tensors.get("w").unwrap().data(), &[0.5, 1.0]);
        let empty = historical_gate(&[], [("w", (1, 2))]).unwrap();
        assert!(empty.is_all_ones());
        assert!(historical_gate(&[&prior(&[0.5])], [("w", (1, 2))]).is_err());
    }

    #[test]
    fn prior_and_gate_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = ImportancePrior { k: 4, n_samples: 9, task_id: 2, ..prior(&[0.25, -0.5]) };
        p.save(&dir.path().join("task2.prior")).unwrap();
        assert_eq!(ImportancePrior::load(&dir.path().join("task2.prior")).unwrap(), p);
        let g = historical_gate(&[&p], [("w", (1, 2))]).unwrap();
        g.save(&dir.path().join("stage3.gate")).unwrap();
        assert_eq!(GateMask::load(&dir.path().join("stage3.gate")).unwrap(), g);
    }

    proptest! {
        #[test]
        fn normalized_range_and_sign(v in prop::collection::vec(-1e3f64..1e3, 1..40), scale in 0.01f64..100.0) {
            let r = Matrix::row_vector(v.clone());
            let n = normalize_tensor(&r, 1e-12);
            for (&a, &b) in v.iter().zip(n.data()) {
                prop_assert!(b.abs() <= 1.0);
                prop_assert_eq!(a.signum() * (a != 0.0) as i32 as f64, b.signum() * (b != 0.0) as i32 as f64);
            }
            // ranking by magnitude survives positive rescaling
            let s = normalize_tensor(&r.scale(scale), 1e-12);
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i].abs() < v[j].abs() {
                        prop_assert!(n.data()[i].abs() <= n.data()[j].abs());
                        prop_assert!(s.data()[i].abs() <= s.data()[j].abs());
                    }
                }
            }
        }

        #[test]
        fn aggregation_monotone_and_bounded(
            v in prop::collection::vec(-1.0f64..1.0, 1..12),
            k in 1usize..6,
            idx in 0usize..12,
            bump in 0.0f64..1.0,
        ) {
            let maps: Vec<TensorMap> = v.iter().map(|&x| one("w", Matrix::row_vector(vec![x]))).collect();
            let base = aggregate_task_prior(&maps, k, 0).unwrap().tensors.get("w").unwrap().get(0, 0);
            prop_assert!((-1.0..=1.0).contains(&base));
            let mut raised = v.clone();
            let i = idx % v.len();
            raised[i] = (raised[i] + bump).min(1.0);
            let maps: Vec<TensorMap> = raised.iter().map(|&x| one("w", Matrix::row_vector(vec![x]))).collect();
            let up = aggregate_task_prior(&maps, k, 0).unwrap().tensors.get("w").unwrap().get(0, 0);
            prop_assert!(up >= base - 1e-15);
        }

        #[test]
        fn gate_monotone_in_history(a in prop::collection::vec(-1.0f64..1.0, 5), b in prop::collection::vec(-1.0f64..1.0, 5), shrink in 0.0f64..1.0) {
            let pa = prior(&a);
            let pb = prior(&b);
            let g1 = historical_gate(&[&pa], [("w", (1, 5))]).unwrap();
            let g2 = historical_gate(&[&pa, &pb], [("w", (1, 5))]).unwrap();
            for (x, y) in g1.tensors.get("w").unwrap().data().iter().zip(g2.tensors.get("w").unwrap().data()) {
                prop_assert!(y <= x);
                prop_assert!((0.0..=1.0).contains(y));
            }
            // a dominated prior changes nothing
            let lower = prior(&a.iter().map(|x| x - shrink).collect::<Vec<_>>());
            let g3 = historical_gate(&[&pa, &lower], [("w", (1, 5))]).unwrap();
            prop_assert_eq!(g1, g3);
        }
    }
}
