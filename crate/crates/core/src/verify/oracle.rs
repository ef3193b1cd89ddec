//! Scalar reference implementations of the attention layers.
//!
//! Written with explicit index loops over plain `f64`s and no graph or
//! matrix helpers, so they share no code with [`crate::relattn`].

use crate::autograd::Tensor;
use crate::relattn::{AttentionParams, GridDims, HeadProjections, RelPosTables};

/// `x · w` as nested rows.
pub fn project(x: &Tensor, w: &Tensor) -> Vec<Vec<f64>> {
    let (n, f_in) = (x.shape()[0], x.shape()[1]);
    let d = w.shape()[1];
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        for c in 0..d {
            let mut s = 0.0;
            for f in 0..f_in {
                s += x.data()[i * f_in + f] * w.data()[f * d + c];
            }
            out[i][c] = s;
        }
    }
    out
}

/// One head, row-major `[n, d_k]`. With `rel`, each logit is
/// `q_i · (k_j + r_W[j_x − i_x + W − 1] + r_H[j_y − i_y + H − 1]) / √d_k`.
pub fn attention_head(x: &Tensor, head: &HeadProjections<Tensor>, rel: Option<(GridDims, &RelPosTables<Tensor>)>) -> Vec<f64> {
    let q = project(x, &head.w_q);
    let k = project(x, &head.w_k);
    let v = project(x, &head.w_v);
    let n = q.len();
    let dk = q[0].len();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![0.0; n * dk];
    for i in 0..n {
        let mut logits = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            for c in 0..dk {
                let mut key = k[j][c];
                if let Some((dims, t)) = rel {
                    let (w, h) = (dims.width as i64, dims.height as i64);
                    let (ix, iy) = (i as i64 % w, i as i64 / w);
                    let (jx, jy) = (j as i64 % w, j as i64 / w);
                    let rw_row = (jx - ix + w - 1) as usize;
                    let rh_row = (jy - iy + h - 1) as usize;
                    key += t.r_w.data()[rw_row * dk + c] + t.r_h.data()[rh_row * dk + c];
                }
                s += q[i][c] * key;
            }
            logits[j] = s * scale;
        }
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let mut denom = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            denom += *l;
        }
        for c in 0..dk {
            let mut s = 0.0;
            for j in 0..n {
                s += logits[j] / denom * v[j][c];
            }
            out[i * dk + c] = s;
        }
    }
    out
}

/// All heads concatenated and projected by `W_O`, row-major `[n, F_out]`.
pub fn mha(x: &Tensor, params: &AttentionParams<Tensor>, rel: Option<(GridDims, &[RelPosTables<Tensor>])>) -> Vec<f64> {
    let n = x.shape()[0];
    let heads: Vec<Vec<f64>> = params
        .heads
        .iter()
        .enumerate()
        .map(|(h, p)| attention_head(x, p, rel.map(|(d, t)| (d, &t[h]))))
        .collect();
    let dk = params.heads[0].w_q.shape()[1];
    let f_out = params.w_o.shape()[1];
    let mut out = vec![0.0; n * f_out];
    for i in 0..n {
        for o in 0..f_out {
            let mut s = 0.0;
            for (h, head) in heads.iter().enumerate() {
                for c in 0..dk {
                    s += head[i * dk + c] * params.w_o.data()[(h * dk + c) * f_out + o];
                }
            }
            out[i * f_out + o] = s;
        }
    }
    out
}
