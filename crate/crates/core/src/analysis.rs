//! Similarity of importance maps across tasks (top-K overlap, Spearman
//! rank correlation) and forgetting metrics over an accuracy matrix.
//!
//! The similarity study ranks elements by magnitude, unlike prior
//! aggregation which keeps the largest signed values.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionConfig;
use crate::error::{Error, Result};
use crate::importance::{build_prior, ImportanceConfig, ImportancePrior};
use crate::model::{ModelConfig, ModelParams};
use crate::tasks::{Encoded, TaskKind};
use crate::tensors::TensorMap;

/// Indices of the `k` largest values by magnitude; ties go to the lower
/// index.
pub fn topk_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::config("k", "top-K needs K >= 1"));
    }
    if k > values.len() {
        return Err(Error::config(
            "k",
            format!("K = {k} exceeds tensor size {}", values.len()),
        ));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// `|P_K(a) ∩ P_K(b)| / K`.
pub fn topk_overlap(a: &[f64], b: &[f64], k: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "topk_overlap",
            left: (1, a.len()),
            right: (1, b.len()),
        });
    }
    let pa: HashSet<usize> = topk_indices(a, k)?.into_iter().collect();
    let shared = topk_indices(b, k)?.into_iter().filter(|i| pa.contains(i)).count();
    Ok(shared as f64 / k as f64)
}

/// 1-based ranks with ties sharing the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub value: f64,
    /// Set when either rank vector has zero variance; `value` is then 0.
    pub degenerate: bool,
}

/// Pearson correlation of tie-averaged ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Spearman> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "spearman",
            left: (1, a.len()),
            right: (1, b.len()),
        });
    }
    if a.len() < 2 {
        return Err(Error::Data("spearman needs at least two elements".into()));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(Spearman {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Spearman {
        value: (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSimilarity {
    pub layer: usize,
    /// Tensor name without the `block{l}.` prefix.
    pub tensor: String,
    pub k: usize,
    pub topk_overlap: f64,
    pub spearman: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub layer: usize,
    /// Means over the layer's tensors.
    pub mean_overlap: f64,
    pub mean_spearman: f64,
    /// Metrics over all of the layer's elements taken together.
    pub pooled_overlap: f64,
    pub pooled_spearman: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub k_fraction: f64,
    pub tensors: Vec<TensorSimilarity>,
    pub layers: Vec<LayerSimilarity>,
}

impl SimilarityReport {
    /// Mean over layers of the per-layer mean overlap.
    pub fn mean_overlap(&self) -> f64 {
        mean(self.layers.iter().map(|l| l.mean_overlap))
    }

    pub fn mean_spearman(&self) -> f64 {
        mean(self.layers.iter().map(|l| l.mean_spearman))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// `(layer, rest)` for names of the form `block{l}.rest`.
pub fn split_layer(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("block")?;
    let (l, tail) = rest.split_once('.')?;
    Some((l.parse().ok()?, tail))
}

/// Block-parameter prior over every given example, correct or not. A model
/// that has forgotten a task still has an importance map for it, which is
/// what the sequential side of the study compares.
pub fn study_prior(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: TaskKind,
    task_id: usize,
    examples: &[Encoded],
    attr: &AttributionConfig,
    imp: &ImportanceConfig,
) -> Result<ImportancePrior> {
    let refs: Vec<&Encoded> = examples.iter().collect();
    build_prior(params, cfg, task, task_id, &refs, attr, imp, &|n: &str| split_layer(n).is_some())
}

fn k_for(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n)
}

/// Per-tensor and per-layer similarity of two importance maps. Only
/// `block{l}.*` tensors are compared; `K` is `k_fraction` of each tensor's
/// (or pooled layer's) element count, at least 1.
pub fn similarity_study(a: &TensorMap, b: &TensorMap, k_fraction: f64) -> Result<SimilarityReport> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::config("study.k_fraction", "must be in (0, 1]"));
    }
    a.check_compatible(b)?;
    let mut tensors = Vec::new();
    let mut pooled: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (name, ma) in a.iter() {
        let Some((layer, tail)) = split_layer(name) else { continue };
        let mb = b.get(name).expect("compatible");
        let k = k_for(ma.len(), k_fraction);
        let s = if ma.len() >= 2 {
            spearman(ma.data(), mb.data())?
        } else {
            Spearman { value: 0.0, degenerate: true }
        };
        tensors.push(TensorSimilarity {
            layer,
            tensor: tail.to_string(),
            k,
            topk_overlap: topk_overlap(ma.data(), mb.data(), k)?,
            spearman: s.value,
            degenerate: s.degenerate,
        });
        let entry = pooled.entry(layer).or_default();
        entry.0.extend_from_slice(ma.data());
        entry.1.extend_from_slice(mb.data());
    }
    let mut layers = Vec::new();
    for (layer, (pa, pb)) in pooled {
        let rows = tensors.iter().filter(|t| t.layer == layer);
        let k = k_for(pa.len(), k_fraction);
        layers.push(LayerSimilarity {
            layer,
            mean_overlap: mean(rows.clone().map(|t| t.topk_overlap)),
            mean_spearman: mean(rows.map(|t| t.spearman)),
            pooled_overlap: topk_overlap(&pa, &pb, k)?,
            pooled_spearman: if pa.len() >= 2 { spearman(&pa, &pb)?.value } else { 0.0 },
        });
    }
    Ok(SimilarityReport {
        k_fraction,
        tensors,
        layers,
    })
}

/// CSV with columns `layer,tensor,metric,value,setting`. Per-layer rows use
/// the tensor names `_mean` and `_pooled`.
pub fn similarity_csv(reports: &[(&str, &SimilarityReport)]) -> String {
    let mut out = String::from("layer,tensor,metric,value,setting\n");
    for (setting, r) in reports {
        for t in &r.tensors {
            let _ = writeln!(out, "{},{},topk_overlap,{},{setting}", t.layer, t.tensor, t.topk_overlap);
            let _ = writeln!(out, "{},{},spearman,{},{setting}", t.layer, t.tensor, t.spearman);
        }
        for l in &r.layers {
            let _ = writeln!(out, "{},_mean,topk_overlap,{},{setting}", l.layer, l.mean_overlap);
            let _ = writeln!(out, "{},_mean,spearman,{},{setting}", l.layer, l.mean_spearman);
            let _ = writeln!(out, "{},_pooled,topk_overlap,{},{setting}", l.layer, l.pooled_overlap);
            let _ = writeln!(out, "{},_pooled,spearman,{},{setting}", l.layer, l.pooled_spearman);
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    /// `accuracy[task][stage]`.
    pub accuracy: Vec<Vec<f64>>,
    /// Mean accuracy over all tasks after the last stage.
    pub final_mean: f64,
    /// Mean over earlier tasks of (final accuracy − accuracy right after
    /// learning the task).
    pub bwt: f64,
}

pub fn forgetting(accuracy: &[Vec<f64>]) -> Result<ForgettingReport> {
    let t = accuracy.len();
    if t == 0 || accuracy.iter().any(|row| row.len() != t) {
        return Err(Error::Data("accuracy matrix must be square and nonempty".into()));
    }
    if accuracy.iter().flatten().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Data("accuracies must lie in [0, 1]".into()));
    }
    let last = t - 1;
    Ok(ForgettingReport {
        accuracy: accuracy.to_vec(),
        final_mean: mean(accuracy.iter().map(|row| row[last])),
        bwt: mean((0..last).map(|i| accuracy[i][last] - accuracy[i][i])),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, RngState};
    use proptest::prelude::*;

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[3.0, -5.0, 1.0], 1).unwrap(), vec![1]);
        assert_eq!(topk_indices(&[1.0, 1.0, 0.0], 1).unwrap(), vec![0]);
        let mut all = topk_indices(&[0.1, 0.3, 0.2], 3).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(topk_indices(&[1.0], 0).is_err());
        assert!(topk_indices(&[1.0], 2).is_err());
    }

    #[test]
    fn overlap_examples() {
        let a = [8.0, 7.0, 6.0, 5.0, 0.0, 0.0, 0.0, 0.0];
        let b = [8.0, 7.0, 0.0, 0.0, 6.0, 5.0, 0.0, 0.0];
        let c = [0.0, 0.0, 0.0, 0.0, 6.0, 5.0, 4.0, 3.0];
        assert_eq!(topk_overlap(&a, &a, 4).unwrap(), 1.0);
        assert_eq!(topk_overlap(&a, &b, 4).unwrap(), 0.5);
        assert_eq!(topk_overlap(&a, &c, 4).unwrap(), 0.0);
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &a).unwrap().value - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap().value + 1.0).abs() < 1e-12);
        let flat = spearman(&a, &[1.0; 4]).unwrap();
        assert!(flat.degenerate && flat.value == 0.0);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn forgetting_example() {
        let r = forgetting(&[vec![0.9, 0.4], vec![0.1, 0.9]]).unwrap();
        assert!((r.bwt + 0.5).abs() < 1e-15);
        assert!((r.final_mean - 0.65).abs() < 1e-15);
        assert!(forgetting(&[vec![0.9, 0.4]]).is_err());
        assert!(forgetting(&[vec![1.5]]).is_err());
    }

    fn prior_map(rng: &mut RngState, layers: usize) -> TensorMap {
        let mut m = TensorMap::new();
        for l in 0..layers {
            m.insert(format!("block{l}.w1"), rng.normal_matrix(6, 5, 1.0));
            m.insert(format!("block{l}.b2"), rng.normal_matrix(1, 4, 1.0));
        }
        m.insert("tok_emb", Matrix::zeros(2, 2));
        m
    }

    #[test]
    fn identical_priors_are_fully_similar() {
        let a = prior_map(&mut RngState::new(1), 3);
        let r = similarity_study(&a, &a, 0.1).unwrap();
        assert_eq!(r.tensors.len(), 3 * 2);
        assert!(r.tensors.iter().all(|t| t.topk_overlap == 1.0 && (t.spearman - 1.0).abs() < 1e-12));
        assert_eq!(r.layers.len(), 3);
        assert_eq!(r.mean_overlap(), 1.0);
        let csv = similarity_csv(&[("independent", &r)]);
        assert_eq!(csv.lines().count(), 1 + 2 * 6 + 4 * 3);
    }

    proptest! {
        #[test]
        fn overlap_symmetric_and_bounded(v in prop::collection::vec(-10.0f64..10.0, 2..30), w in prop::collection::vec(-10.0f64..10.0, 30), k in 1usize..30) {
            let n = v.len();
            let w = &w[..n];
            let k = k.min(n);
            let o = topk_overlap(&v, w, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&o));
            prop_assert_eq!(o, topk_overlap(w, &v, k).unwrap());
            // positive rescaling keeps the top set
            let scaled: Vec<f64> = v.iter().map(|x| x * 3.5).collect();
            prop_assert_eq!(topk_indices(&v, k).unwrap(), topk_indices(&scaled, k).unwrap());
        }

        #[test]
        fn spearman_invariant_under_monotone_maps(v in prop::collection::vec(-5.0f64..5.0, 2..30), w in prop::collection::vec(-5.0f64..5.0, 30)) {
            let w = &w[..v.len()];
            let s = spearman(&v, w).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s.value));
            let t: Vec<f64> = v.iter().map(|x| x.exp() * 2.0 + 1.0).collect();
            prop_assert!((spearman(&t, w).unwrap().value - s.value).abs() < 1e-12);
        }
    }
}
