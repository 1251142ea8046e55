//! Instance generators and independent oracles shared by integration tests.

#![allow(dead_code)]

use attrgate_core::numerics::{softmax_rows, Matrix, RngState};

pub fn randn(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    rng.normal_matrix(rows, cols, 1.0)
}

/// Positive relevance shaped like `out`: `|out| ⊙ w` with `w ∈ [0.5, 1.5]`.
pub fn positive_relevance(rng: &mut RngState, out: &Matrix) -> Matrix {
    let mut r = out.map(f64::abs);
    for v in r.data_mut() {
        *v *= rng.uniform_range(0.5, 1.5);
    }
    r
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs()
}

/// Everything the attention rules need for one random instance.
pub struct MhaInstance {
    pub x: Matrix,
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    pub w_o: Matrix,
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Scaled scores with masked entries set to 0.
    pub e: Vec<Matrix>,
    pub a: Vec<Matrix>,
    pub o: Matrix,
    pub f: Matrix,
}

/// Straight-line causal multi-head attention, written independently of the
/// model's forward pass.
pub fn mha_instance(rng: &mut RngState, m: usize, heads: usize, dh: usize) -> MhaInstance {
    let d = heads * dh;
    let x = randn(rng, m, d);
    let w = |rng: &mut RngState| (0..heads).map(|_| randn(rng, d, dh)).collect::<Vec<_>>();
    let (w_q, w_k, w_v) = (w(rng), w(rng), w(rng));
    let w_o = randn(rng, d, d);
    let mut q = Vec::new();
    let mut k = Vec::new();
    let mut v = Vec::new();
    let mut e = Vec::new();
    let mut a = Vec::new();
    let mut o = Matrix::zeros(m, d);
    for r in 0..heads {
        let qr = x.matmul(&w_q[r]).unwrap();
        let kr = x.matmul(&w_k[r]).unwrap();
        let vr = x.matmul(&w_v[r]).unwrap();
        let mut er = Matrix::zeros(m, m);
        let mut masked = Matrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                if j <= i {
                    let s: f64 = (0..dh).map(|c| qr.get(i, c) * kr.get(j, c)).sum::<f64>() / (dh as f64).sqrt();
                    er.set(i, j, s);
                    masked.set(i, j, s);
                } else {
                    masked.set(i, j, f64::NEG_INFINITY);
                }
            }
        }
        let ar = softmax_rows(&masked);
        let or = ar.matmul(&vr).unwrap();
        o.set_cols(r * dh, &or);
        q.push(qr);
        k.push(kr);
        v.push(vr);
        e.push(er);
        a.push(ar);
    }
    let f = o.matmul(&w_o).unwrap();
    MhaInstance { x, w_q, w_k, w_v, w_o, q, k, v, e, a, o, f }
}

/// Attention relevances computed by chaining the primitive rules:
/// `f = O·W_O` (linear), `O_r = A_r·V_r` (bilinear), softmax as identity,
/// `S_r = Q_r·K_rᵀ` (bilinear), then `Q_r = X·W_Q,r` etc. (linear).
pub struct ChainedMha {
    pub x: Matrix,
    pub w_o: Matrix,
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
}

pub fn chained_mha(inst: &MhaInstance, r_f: &Matrix, eps: f64) -> ChainedMha {
    use attrgate_core::attribution::{bilinear_split, linear_relevance};
    let heads = inst.q.len();
    let dh = inst.q[0].cols();
    let out = linear_relevance(&inst.o, &inst.w_o, None, &inst.f, r_f, eps).unwrap();
    let mut r_x = Matrix::zeros(inst.x.rows(), inst.x.cols());
    let (mut w_q, mut w_k, mut w_v) = (Vec::new(), Vec::new(), Vec::new());
    for r in 0..heads {
        let o_r = inst.o.cols_slice(r * dh, dh);
        let r_or = out.input.cols_slice(r * dh, dh);
        let (r_a, r_vr) = bilinear_split(&inst.a[r], &inst.v[r], &o_r, &r_or, eps).unwrap();
        // unscaled scores S = Q Kᵀ; masked entries carry zero relevance
        let kt = inst.k[r].transpose();
        let s = inst.q[r].matmul(&kt).unwrap();
        let (r_q, r_kt) = bilinear_split(&inst.q[r], &kt, &s, &r_a, eps).unwrap();
        let lq = linear_relevance(&inst.x, &inst.w_q[r], None, &inst.q[r], &r_q, eps).unwrap();
        let lk = linear_relevance(&inst.x, &inst.w_k[r], None, &inst.k[r], &r_kt.transpose(), eps).unwrap();
        let lv = linear_relevance(&inst.x, &inst.w_v[r], None, &inst.v[r], &r_vr, eps).unwrap();
        for l in [&lq, &lk, &lv] {
            r_x.add_assign(&l.input).unwrap();
        }
        w_q.push(lq.weight);
        w_k.push(lk.weight);
        w_v.push(lv.weight);
    }
    ChainedMha { x: r_x, w_o: out.weight, w_q, w_k, w_v }
}

/// Largest entry-wise gap relative to the larger of 1 and the reference's
/// largest magnitude.
pub fn max_gap(got: &Matrix, want: &Matrix) -> f64 {
    let scale = want.max_abs().max(1.0);
    got.data()
        .iter()
        .zip(want.data())
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max)
}

/// Mean of the `min(k, n)` largest values, by full sort (ties → lower index).
pub fn topk_mean_oracle(values: &[f64], k: usize) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    let kk = k.min(values.len());
    idx[..kk].iter().map(|&i| values[i]).sum::<f64>() / kk as f64
}

/// Rank by counting, then textbook Pearson.
pub fn spearman_oracle(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let below = v.iter().filter(|&&y| y < x).count() as f64;
                let equal = v.iter().filter(|&&y| y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let (sa, sb) = (ra.iter().sum::<f64>(), rb.iter().sum::<f64>());
    let sab: f64 = ra.iter().zip(&rb).map(|(x, y)| x * y).sum();
    let saa: f64 = ra.iter().map(|x| x * x).sum();
    let sbb: f64 = rb.iter().map(|x| x * x).sum();
    (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
}
