//! Relevance propagation rules for the individual operations of a block.
//!
//! Every rule is linear in the incoming relevance: the ratios `R ⊘ C` use
//! cached forward activations as denominators, so scaling the incoming
//! relevance scales every output by the same factor.

use crate::error::{Error, Result};
use crate::numerics::{stable_div, stable_div_scalar, Matrix};

/// Bilinear split of `c = a · b`: each factor receives half of every
/// product term's share of `R_c`.
///
/// `R(a) = ½ a ⊙ ((R_c ⊘ c) bᵀ)`, `R(b) = ½ b ⊙ (aᵀ (R_c ⊘ c))`.
pub fn bilinear_split(
    a: &Matrix,
    b: &Matrix,
    c: &Matrix,
    r_c: &Matrix,
    eps: f64,
) -> Result<(Matrix, Matrix)> {
    check_product(a, b, c, "bilinear_split")?;
    let lambda = stable_div(r_c, c, eps)?;
    let r_a = a.hadamard(&lambda.matmul_t(b)?)?.scale(0.5);
    let r_b = b.hadamard(&a.t_matmul(&lambda)?)?.scale(0.5);
    Ok((r_a, r_b))
}

fn check_product(a: &Matrix, b: &Matrix, c: &Matrix, op: &'static str) -> Result<()> {
    if a.cols() != b.rows() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    if c.shape() != (a.rows(), b.cols()) {
        return Err(Error::Shape {
            op,
            left: (a.rows(), b.cols()),
            right: c.shape(),
        });
    }
    Ok(())
}

/// Relevances of the three operands of `C = P·W + B`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearRelevance {
    pub input: Matrix,
    pub weight: Matrix,
    /// `1 × d_out`; all zeros when the layer has no bias.
    pub bias: Matrix,
}

/// Relevance of a biased linear map `C = P·W + B` (B broadcast over rows):
///
/// ```text
/// Λ    = R_C ⊘ C
/// R(P) = ½ P ⊙ (Λ Wᵀ)
/// R(W) = ½ W ⊙ (Pᵀ Λ)
/// R(B) = B ⊙ (1ᵀ Λ)
/// ```
pub fn linear_relevance(
    p: &Matrix,
    w: &Matrix,
    bias: Option<&Matrix>,
    c: &Matrix,
    r_c: &Matrix,
    eps: f64,
) -> Result<LinearRelevance> {
    check_product(p, w, c, "linear_relevance")?;
    let lambda = stable_div(r_c, c, eps)?;
    linear_from_ratio(p, w, bias, &lambda)
}

/// [`linear_relevance`] with the ratio `Λ = R_C ⊘ C` already formed.
pub(crate) fn linear_from_ratio(
    p: &Matrix,
    w: &Matrix,
    bias: Option<&Matrix>,
    lambda: &Matrix,
) -> Result<LinearRelevance> {
    let input = p.hadamard(&lambda.matmul_t(w)?)?.scale(0.5);
    let weight = w.hadamard(&p.t_matmul(lambda)?)?.scale(0.5);
    let bias = match bias {
        Some(b) => b.hadamard(&lambda.col_sums())?,
        None => Matrix::zeros(1, w.cols()),
    };
    Ok(LinearRelevance {
        input,
        weight,
        bias,
    })
}

/// Cached FFN activations and weights of one block.
#[derive(Clone, Copy, Debug)]
pub struct FfnInputs<'a> {
    pub g: &'a Matrix,
    pub u: &'a Matrix,
    pub s: &'a Matrix,
    pub delta: &'a Matrix,
    pub w1: &'a Matrix,
    pub b1: &'a Matrix,
    pub w2: &'a Matrix,
    pub b2: &'a Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnRelevance {
    pub g: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// FFN relevance with the activation treated as identity (`R(U) = R(S)`):
/// the linear rule on `(S, W_2, b_2)` followed by the linear rule on
/// `(g, W_1, b_1)` with ratio `R(S) ⊘ U`.
pub fn ffn_relevance(ffn: FfnInputs<'_>, r_delta: &Matrix, eps: f64) -> Result<FfnRelevance> {
    let out = linear_relevance(ffn.s, ffn.w2, Some(ffn.b2), ffn.delta, r_delta, eps)?;
    let r_s = out.input;
    if ffn.u.shape() != r_s.shape() {
        return Err(Error::Shape {
            op: "ffn_relevance",
            left: ffn.u.shape(),
            right: r_s.shape(),
        });
    }
    let inner = linear_relevance(ffn.g, ffn.w1, Some(ffn.b1), ffn.u, &r_s, eps)?;
    Ok(FfnRelevance {
        g: inner.input,
        w1: inner.weight,
        b1: inner.bias,
        w2: out.weight,
        b2: out.bias,
    })
}

/// Relevances of `C = P·(W + A·B)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraRelevance {
    pub input: Matrix,
    pub frozen: Matrix,
    pub a: Matrix,
    pub b: Matrix,
}

/// Relevance through a LoRA-adapted projection `C = P·W + (P·A)·B`.
///
/// `R_C` is split between the two additive branches in proportion to their
/// contributions. The frozen branch uses the linear rule; the adapter
/// branch chains the linear rule on `((P·A), B)` and then on `(P, A)`.
pub fn lora_linear_relevance(
    p: &Matrix,
    w_frozen: &Matrix,
    a: &Matrix,
    b: &Matrix,
    c: &Matrix,
    r_c: &Matrix,
    eps: f64,
) -> Result<LoraRelevance> {
    check_product(p, w_frozen, c, "lora_linear_relevance")?;
    check_product(a, b, w_frozen, "lora_linear_relevance adapter")?;
    let c_frozen = p.matmul(w_frozen)?;
    let pa = p.matmul(a)?;
    let c_adapter = pa.matmul(b)?;
    let lambda = stable_div(r_c, c, eps)?;
    let r_frozen_out = lambda.hadamard(&c_frozen)?;
    let r_adapter_out = lambda.hadamard(&c_adapter)?;

    let frozen = linear_relevance(p, w_frozen, None, &c_frozen, &r_frozen_out, eps)?;
    let outer = linear_relevance(&pa, b, None, &c_adapter, &r_adapter_out, eps)?;
    let inner = linear_relevance(p, a, None, &pa, &outer.input, eps)?;
    Ok(LoraRelevance {
        input: frozen.input.add(&inner.input)?,
        frozen: frozen.weight,
        a: inner.weight,
        b: outer.weight,
    })
}

/// Element-wise proportional split of `R_out` over the addends of
/// `out = Σ addends` (denominator `out`, stabilized).
pub fn residual_split(out: &Matrix, r_out: &Matrix, addends: &[&Matrix], eps: f64) -> Result<Vec<Matrix>> {
    let lambda = stable_div(r_out, out, eps)?;
    addends.iter().map(|t| lambda.hadamard(t)).collect()
}

/// Cached attention activations and (effective) weights of one block.
#[derive(Clone, Copy, Debug)]
pub struct MhaInputs<'a> {
    pub x: &'a Matrix,
    pub q: &'a [Matrix],
    pub k: &'a [Matrix],
    pub v: &'a [Matrix],
    /// Softmax inputs `Q_r K_rᵀ / √d_head`.
    pub e: &'a [Matrix],
    pub a: &'a [Matrix],
    pub o: &'a Matrix,
    pub f: &'a Matrix,
    pub w_q: &'a [Matrix],
    pub w_k: &'a [Matrix],
    pub w_v: &'a [Matrix],
    pub w_o: &'a Matrix,
}

impl MhaInputs<'_> {
    fn n_heads(&self) -> usize {
        self.q.len()
    }

    fn check(&self) -> Result<()> {
        let h = self.n_heads();
        let counts = [
            self.k.len(),
            self.v.len(),
            self.e.len(),
            self.a.len(),
            self.w_q.len(),
            self.w_k.len(),
            self.w_v.len(),
        ];
        if h == 0 || counts.iter().any(|&c| c != h) {
            return Err(Error::Data(format!(
                "mha_relevance: head-count mismatch ({h} query heads, others {counts:?})"
            )));
        }
        let dh = self.q[0].cols();
        let m = self.x.rows();
        if self.o.shape() != (m, h * dh) || self.f.shape() != (m, self.w_o.cols()) {
            return Err(Error::Shape {
                op: "mha_relevance",
                left: self.o.shape(),
                right: self.f.shape(),
            });
        }
        for r in 0..h {
            if self.e[r].shape() != (m, m) || self.a[r].shape() != (m, m) {
                return Err(Error::Shape {
                    op: "mha_relevance attention",
                    left: self.e[r].shape(),
                    right: self.a[r].shape(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhaRelevance {
    pub x: Matrix,
    pub w_o: Matrix,
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
}

/// Per-head intermediate ratios shared by the closed form and the LoRA
/// variant.
pub(crate) struct HeadThetas {
    pub theta_q: Matrix,
    pub theta_k: Matrix,
    pub theta_v: Matrix,
}

/// From the relevance of one head's output, `R(O_r)`, builds
/// `Θ_Q = Φ K`, `Θ_K = Φᵀ Q` and `Θ_V = Aᵀ Λ_O` where
/// `Λ_O = R(O_r) ⊘ O_r` and `Φ = (A ⊙ (Λ_O Vᵀ)) ⊘ E`. Masked positions
/// (strictly above the diagonal) are forced to zero in `Φ`.
pub(crate) fn head_thetas(
    o_r: &Matrix,
    r_o_r: &Matrix,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    e: &Matrix,
    a: &Matrix,
    eps: f64,
) -> Result<HeadThetas> {
    let lambda_o = stable_div(r_o_r, o_r, eps)?;
    let num = a.hadamard(&lambda_o.matmul_t(v)?)?;
    let m = num.rows();
    let mut phi = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i.min(num.cols().saturating_sub(1)) {
            phi.set(i, j, stable_div_scalar(num.get(i, j), e.get(i, j), eps));
        }
    }
    Ok(HeadThetas {
        theta_q: phi.matmul(k)?,
        theta_k: phi.t_matmul(q)?,
        theta_v: a.t_matmul(&lambda_o)?,
    })
}

/// Closed-form attention relevance (softmax treated as identity):
///
/// ```text
/// Λ_f    = R_f ⊘ f
/// R(W_O) = ½ W_O ⊙ (Oᵀ Λ_f)
/// R(O_r) = [½ O ⊙ (Λ_f W_Oᵀ)]_r
/// R(W_Q) = α W_Q ⊙ (Xᵀ Θ_Q),  R(W_K) = α W_K ⊙ (Xᵀ Θ_K)
/// R(W_V) = ¼ W_V ⊙ (Xᵀ Θ_V)
/// R(X)   = X ⊙ Σ_r (α Θ_Q W_Qᵀ + α Θ_K W_Kᵀ + ¼ Θ_V W_Vᵀ)
/// ```
///
/// with `α = 1 / (8 √d_head)`.
pub fn mha_relevance(mha: MhaInputs<'_>, r_f: &Matrix, eps: f64) -> Result<MhaRelevance> {
    mha.check()?;
    let dh = mha.q[0].cols();
    let alpha = 1.0 / (8.0 * (dh as f64).sqrt());
    let lambda_f = stable_div(r_f, mha.f, eps)?;
    let r_w_o = mha.w_o.hadamard(&mha.o.t_matmul(&lambda_f)?)?.scale(0.5);
    let r_o = mha.o.hadamard(&lambda_f.matmul_t(mha.w_o)?)?.scale(0.5);

    let mut r_x_inner = Matrix::zeros(mha.x.rows(), mha.x.cols());
    let mut w_q = Vec::new();
    let mut w_k = Vec::new();
    let mut w_v = Vec::new();
    for r in 0..mha.n_heads() {
        let o_r = mha.o.cols_slice(r * dh, dh);
        let r_o_r = r_o.cols_slice(r * dh, dh);
        let th = head_thetas(&o_r, &r_o_r, &mha.q[r], &mha.k[r], &mha.v[r], &mha.e[r], &mha.a[r], eps)?;
        w_q.push(mha.w_q[r].hadamard(&mha.x.t_matmul(&th.theta_q)?)?.scale(alpha));
        w_k.push(mha.w_k[r].hadamard(&mha.x.t_matmul(&th.theta_k)?)?.scale(alpha));
        w_v.push(mha.w_v[r].hadamard(&mha.x.t_matmul(&th.theta_v)?)?.scale(0.25));
        r_x_inner.axpy(alpha, &th.theta_q.matmul_t(&mha.w_q[r])?)?;
        r_x_inner.axpy(alpha, &th.theta_k.matmul_t(&mha.w_k[r])?)?;
        r_x_inner.axpy(0.25, &th.theta_v.matmul_t(&mha.w_v[r])?)?;
    }
    Ok(MhaRelevance {
        x: mha.x.hadamard(&r_x_inner)?,
        w_o: r_w_o,
        w_q,
        w_k,
        w_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn bilinear_split_hand_case() {
        let a = Matrix::from_rows(&[&[1.0, 1.0]]);
        let b = Matrix::from_rows(&[&[1.0], &[1.0]]);
        let c = Matrix::from_rows(&[&[2.0]]);
        let r = Matrix::from_rows(&[&[1.0]]);
        let (ra, rb) = bilinear_split(&a, &b, &c, &r, 1e-12).unwrap();
        for v in ra.data().iter().chain(rb.data()) {
            assert!(close(*v, 0.25, 1e-12));
        }
        let (za, zb) = bilinear_split(&a, &b, &c, &Matrix::zeros(1, 1), 1e-9).unwrap();
        assert_eq!(za.max_abs() + zb.max_abs(), 0.0);
        assert!(bilinear_split(&a, &a, &c, &r, 1e-9).is_err());
    }

    #[test]
    fn linear_relevance_hand_cases() {
        let p = Matrix::from_rows(&[&[1.0]]);
        let w = Matrix::from_rows(&[&[2.0]]);
        let b = Matrix::from_rows(&[&[0.0]]);
        let c = Matrix::from_rows(&[&[2.0]]);
        let out = linear_relevance(&p, &w, Some(&b), &c, &c, 1e-12).unwrap();
        assert!(close(out.input.get(0, 0), 1.0, 1e-11));
        assert!(close(out.weight.get(0, 0), 1.0, 1e-11));
        assert_eq!(out.bias.get(0, 0), 0.0);

        // bias-only output
        let w0 = Matrix::zeros(1, 1);
        let b3 = Matrix::from_rows(&[&[3.0]]);
        let c3 = Matrix::from_rows(&[&[3.0]]);
        let out = linear_relevance(&p, &w0, Some(&b3), &c3, &c3, 1e-12).unwrap();
        assert_eq!(out.input.get(0, 0), 0.0);
        assert_eq!(out.weight.get(0, 0), 0.0);
        assert!(close(out.bias.get(0, 0), 3.0, 1e-11));
    }

    fn random_ffn(rng: &mut RngState, m: usize, d: usize, dff: usize) -> [Matrix; 8] {
        let g = rng.normal_matrix(m, d, 1.0);
        let w1 = rng.normal_matrix(d, dff, 1.0);
        let b1 = rng.normal_matrix(1, dff, 0.5);
        let u = g.matmul(&w1).unwrap().add_row_broadcast(&b1).unwrap();
        let s = crate::numerics::gelu(&u);
        let w2 = rng.normal_matrix(dff, d, 1.0);
        let b2 = rng.normal_matrix(1, d, 0.5);
        let delta = s.matmul(&w2).unwrap().add_row_broadcast(&b2).unwrap();
        [g, u, s, delta, w1, b1, w2, b2]
    }

    fn ffn_inputs(t: &[Matrix; 8]) -> FfnInputs<'_> {
        FfnInputs {
            g: &t[0],
            u: &t[1],
            s: &t[2],
            delta: &t[3],
            w1: &t[4],
            b1: &t[5],
            w2: &t[6],
            b2: &t[7],
        }
    }

    fn ffn_total(r: &FfnRelevance) -> f64 {
        r.g.sum() + r.w1.sum() + r.b1.sum() + r.w2.sum() + r.b2.sum()
    }

    #[test]
    fn ffn_zero_homogeneous_and_conserving() {
        let mut rng = RngState::new(3);
        let t = random_ffn(&mut rng, 1, 2, 3);
        let zero = ffn_relevance(ffn_inputs(&t), &Matrix::zeros(1, 2), 1e-9).unwrap();
        assert_eq!(ffn_total(&zero), 0.0);
        let r = t[3].map(f64::abs).hadamard(&rng.normal_matrix(1, 2, 1.0).map(|v| 1.0 + 0.3 * v.tanh())).unwrap();
        let one = ffn_relevance(ffn_inputs(&t), &r, 1e-12).unwrap();
        let two = ffn_relevance(ffn_inputs(&t), &r.scale(2.0), 1e-12).unwrap();
        assert_eq!(two.w1, one.w1.scale(2.0));
        assert_eq!(two.g, one.g.scale(2.0));
        let rel = ((ffn_total(&one) - r.sum()) / r.sum()).abs();
        assert!(rel < 1e-9, "{rel:e}");
    }

    #[test]
    fn lora_zero_b_reduces_to_frozen_branch() {
        let mut rng = RngState::new(8);
        let p = rng.normal_matrix(3, 4, 1.0);
        let w = rng.normal_matrix(4, 2, 1.0);
        let a = rng.normal_matrix(4, 2, 1.0);
        let b = Matrix::zeros(2, 2);
        let c = p.matmul(&w).unwrap();
        let rc = c.map(|v| v.abs());
        let lr = lora_linear_relevance(&p, &w, &a, &b, &c, &rc, 1e-9).unwrap();
        let base = linear_relevance(&p, &w, None, &c, &rc, 1e-9).unwrap();
        assert_eq!(lr.a.max_abs(), 0.0);
        assert_eq!(lr.b.max_abs(), 0.0);
        // the branch split adds one stabilized division
        assert!(lr.frozen.sub(&base.weight).unwrap().max_abs() < 1e-7 * base.weight.max_abs());
        assert!(lr.input.sub(&base.input).unwrap().max_abs() < 1e-7 * base.input.max_abs());
    }

    #[test]
    fn lora_split_is_invariant_to_factor_rescaling() {
        // A → cA, B → B/c keeps every term p·a·b and every ratio a / (P·A)
        let mut rng = RngState::new(9);
        let p = rng.normal_matrix(3, 4, 1.0);
        let w = rng.normal_matrix(4, 3, 1.0);
        let a = rng.normal_matrix(4, 2, 1.0);
        let b = rng.normal_matrix(2, 3, 1.0);
        let c = p.matmul(&w.add(&a.matmul(&b).unwrap()).unwrap()).unwrap();
        let rc = c.map(|v| v.abs());
        let one = lora_linear_relevance(&p, &w, &a, &b, &c, &rc, 1e-12).unwrap();
        for k in [0.1, 7.0] {
            let other = lora_linear_relevance(&p, &w, &a.scale(k), &b.scale(1.0 / k), &c, &rc, 1e-12).unwrap();
            for (x, y) in [(&one.a, &other.a), (&one.b, &other.b), (&one.input, &other.input), (&one.frozen, &other.frozen)] {
                assert!(x.sub(y).unwrap().max_abs() < 1e-9 * x.max_abs().max(1.0));
            }
        }
    }

    #[test]
    fn residual_split_conserves() {
        let mut rng = RngState::new(5);
        let x = rng.normal_matrix(3, 4, 1.0);
        let y = rng.normal_matrix(3, 4, 1.0);
        let out = x.add(&y).unwrap();
        let r = out.map(|v| v.abs());
        let parts = residual_split(&out, &r, &[&x, &y], 1e-9).unwrap();
        let total = parts[0].sum() + parts[1].sum();
        assert!(((total - r.sum()) / r.sum()).abs() < 1e-8);
        let zero = residual_split(&out, &Matrix::zeros(3, 4), &[&x, &y], 1e-9).unwrap();
        assert_eq!(zero[0].max_abs() + zero[1].max_abs(), 0.0);
    }
}
