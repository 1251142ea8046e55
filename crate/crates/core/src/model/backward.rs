use crate::error::Result;
use crate::numerics::{gelu_grad_scalar, layer_norm_backward, Matrix};

use super::{ForwardTrace, ModelConfig, ModelParams, Proj};

/// Reverse-mode gradients of `Σ dlogits ⊙ Z` with respect to every
/// parameter. The result mirrors `params`; frozen backbone weights under
/// LoRA still receive their gradient, the trainer decides what is applied.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    cfg: &ModelConfig,
    dlogits: &Matrix,
) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    let dh = cfg.d_head;
    let scale = 1.0 / (dh as f64).sqrt();

    grads.w_vocab = trace.hf.t_matmul(dlogits)?;
    let dhf = dlogits.matmul_t(&params.w_vocab)?;
    let (mut dh_next, dg, db) = layer_norm_backward(&dhf, &params.lnf_gain, &trace.lnf);
    grads.lnf_gain = dg;
    grads.lnf_bias = db;

    for l in (0..params.blocks.len()).rev() {
        let bp = &params.blocks[l];
        let bt = &trace.blocks[l];
        let gb = &mut grads.blocks[l];

        // FFN branch
        let ddelta = &dh_next;
        gb.w2 = bt.s.t_matmul(ddelta)?;
        gb.b2 = ddelta.col_sums();
        let ds = ddelta.matmul_t(&bp.w2)?;
        let du = ds.zip_map(&bt.u, "gelu backward", |g, u| g * gelu_grad_scalar(u))?;
        gb.w1 = bt.g.t_matmul(&du)?;
        gb.b1 = du.col_sums();
        let dg = du.matmul_t(&bp.w1)?;
        let (dresid_ln, dgain2, dbias2) = layer_norm_backward(&dg, &bp.ln2_gain, &bt.ln2);
        gb.ln2_gain = dgain2;
        gb.ln2_bias = dbias2;
        let mut dresid = dh_next.clone();
        dresid.add_assign(&dresid_ln)?;

        // attention branch
        let df = &dresid;
        let w_o_eff = bp.effective_o()?;
        let dwo = bt.o.t_matmul(df)?;
        let d_o = df.matmul_t(&w_o_eff)?;
        if let (Some(lora), Some(glora)) = (&bp.lora, gb.lora.as_mut()) {
            glora.o.a = dwo.matmul_t(&lora.o.b)?;
            glora.o.b = lora.o.a.t_matmul(&dwo)?;
        }
        gb.w_o = dwo;

        let mut dx = Matrix::zeros(bt.x.rows(), bt.x.cols());
        for r in 0..cfg.n_heads {
            let d_or = d_o.cols_slice(r * dh, dh);
            let da = d_or.matmul_t(&bt.v[r])?;
            let dv = bt.a[r].t_matmul(&d_or)?;
            // softmax backward; masked entries have a = 0 and stay 0
            let ar = &bt.a[r];
            let mut de = Matrix::zeros(ar.rows(), ar.cols());
            for i in 0..ar.rows() {
                let arow = ar.row(i);
                let darow = da.row(i);
                let dot: f64 = arow.iter().zip(darow).map(|(a, g)| a * g).sum();
                for (j, o) in de.row_mut(i).iter_mut().enumerate() {
                    *o = arow[j] * (darow[j] - dot) * scale;
                }
            }
            let dq = de.matmul(&bt.k[r])?;
            let dk = de.t_matmul(&bt.q[r])?;
            for (proj, dproj) in [(Proj::Q, &dq), (Proj::K, &dk), (Proj::V, &dv)] {
                let w_eff = bp.effective_head(proj, r)?;
                dx.add_assign(&dproj.matmul_t(&w_eff)?)?;
                let dw = bt.x.t_matmul(dproj)?;
                if let (Some(f), Some(glora)) = (bp.lora_for(proj, r), gb.lora.as_mut()) {
                    let gf = match proj {
                        Proj::Q => &mut glora.q[r],
                        Proj::K => &mut glora.k[r],
                        Proj::V => &mut glora.v[r],
                    };
                    gf.a = dw.matmul_t(&f.b)?;
                    gf.b = f.a.t_matmul(&dw)?;
                }
                match proj {
                    Proj::Q => gb.w_q[r] = dw,
                    Proj::K => gb.w_k[r] = dw,
                    Proj::V => gb.w_v[r] = dw,
                }
            }
        }
        let (dh_ln, dgain1, dbias1) = layer_norm_backward(&dx, &bp.ln1_gain, &bt.ln1);
        gb.ln1_gain = dgain1;
        gb.ln1_bias = dbias1;
        let mut dh = dresid;
        dh.add_assign(&dh_ln)?;
        dh_next = dh;
    }

    for (i, &t) in trace.tokens.iter().enumerate() {
        let src = dh_next.row(i);
        for (o, &g) in grads.tok_emb.row_mut(t).iter_mut().zip(src) {
            *o += g;
        }
        for (o, &g) in grads.pos_emb.row_mut(i).iter_mut().zip(src) {
            *o += g;
        }
    }
    Ok(grads)
}
