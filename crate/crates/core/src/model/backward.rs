//! Reverse-mode gradients of the next-token cross-entropy.

use super::forward::{gelu_grad, Cache, LnCache};
use super::linalg::{gemm, Float, View};
use super::{AblationMask, HeadId, ModelParameters};
use crate::error::{LabError, Result};
use crate::seqgen::TokenId;

/// One training sequence. `targets[t]` is the token expected after
/// position `t`; `None` positions carry no loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub targets: Vec<Option<TokenId>>,
}

impl Example {
    /// Standard next-token targets: every position except the last.
    pub fn next_token(tokens: Vec<TokenId>) -> Self {
        let targets = (0..tokens.len())
            .map(|t| tokens.get(t + 1).copied())
            .collect();
        Example { tokens, targets }
    }

    pub fn n_targets(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Sum of per-position cross-entropies and `d(sum)/d(logits) · scale`.
pub(crate) fn cross_entropy<F: Float>(
    logits: &[F],
    vocab: usize,
    targets: &[Option<TokenId>],
    scale: F,
) -> (F, Vec<F>) {
    let mut total = F::zero();
    let mut grad = vec![F::zero(); logits.len()];
    for (t, target) in targets.iter().enumerate() {
        let Some(y) = *target else { continue };
        let row = &logits[t * vocab..(t + 1) * vocab];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[y as usize];
        let g = &mut grad[t * vocab..(t + 1) * vocab];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() * scale;
        }
        g[y as usize] -= scale;
    }
    (total, grad)
}

fn layer_norm_backward<F: Float>(
    dy: &[F],
    cache: &LnCache<F>,
    rows: usize,
    d: usize,
    scale: &[F],
    dscale: &mut [F],
    dbias: &mut [F],
    dx: &mut [F],
) {
    let inv_d = F::one() / F::from_usize(d).unwrap();
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for i in 0..d {
            dscale[i] += dyr[i] * xh[i];
            dbias[i] += dyr[i];
            dxhat[i] = dyr[i] * scale[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        for i in 0..d {
            dx[r * d + i] += rs * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

/// Disjoint mutable views of the tensors inside one gradient buffer.
fn split2<'a, F>(
    buf: &'a mut [F],
    a: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'a mut [F], &'a mut [F]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

/// Loss summed over `example`'s targets; `grad` (same layout as the
/// parameters) receives `scale · d(loss)/d(params)`.
pub(crate) fn example_loss_and_grad<F: Float>(
    params: &ModelParameters<F>,
    example: &Example,
    ablation: &AblationMask,
    scale: F,
    grad: &mut [F],
) -> Result<F> {
    if example.targets.len() != example.tokens.len() {
        return Err(LabError::Input("targets and tokens differ in length".into()));
    }
    let cache: Cache<F> = params.forward_cache(&example.tokens, ablation)?;
    let c = &params.config;
    let lay = &params.layout;
    let (t_len, d, v) = (cache.seq_len, c.d_model, c.vocab_size);
    let (n_heads, dh) = (c.n_heads, c.d_head());

    let (loss, dlogits) = cross_entropy(&cache.logits, v, &example.targets, scale);

    // Unembedding.
    gemm(
        d,
        t_len,
        v,
        F::one(),
        &cache.hf,
        View::rm(0, d).t(),
        &dlogits,
        View::rm(0, v),
        F::one(),
        &mut grad[lay.unembed.clone()],
        View::rm(0, v),
    );
    let mut dhf = vec![F::zero(); t_len * d];
    gemm(
        t_len,
        v,
        d,
        F::one(),
        &dlogits,
        View::rm(0, v),
        params.tensor(&lay.unembed),
        View::rm(0, v).t(),
        F::zero(),
        &mut dhf,
        View::rm(0, d),
    );
    let mut dx = vec![F::zero(); t_len * d];
    {
        let (ds, db) = split2(grad, &lay.lnf_scale, &lay.lnf_bias);
        layer_norm_backward(&dhf, &cache.lnf, t_len, d, params.tensor(&lay.lnf_scale), ds, db, &mut dx);
    }

    let scale_attn = F::one() / F::from_usize(dh).unwrap().sqrt();
    let tt = t_len * t_len;
    for (l, (ll, lc)) in lay.layers.iter().zip(&cache.layers).enumerate().rev() {
        if let (Some(m), Some(mc)) = (&ll.mlp, &lc.mlp) {
            let dm = c.d_mlp;
            gemm(
                dm,
                t_len,
                d,
                F::one(),
                &mc.act,
                View::rm(0, dm).t(),
                &dx,
                View::rm(0, d),
                F::one(),
                &mut grad[m.w_out.clone()],
                View::rm(0, d),
            );
            {
                let gb = &mut grad[m.b_out.clone()];
                for r in 0..t_len {
                    for i in 0..d {
                        gb[i] += dx[r * d + i];
                    }
                }
            }
            let mut dpre = vec![F::zero(); t_len * dm];
            gemm(
                t_len,
                d,
                dm,
                F::one(),
                &dx,
                View::rm(0, d),
                params.tensor(&m.w_out),
                View::rm(0, d).t(),
                F::zero(),
                &mut dpre,
                View::rm(0, dm),
            );
            for (g, &u) in dpre.iter_mut().zip(&mc.pre) {
                *g *= gelu_grad(u);
            }
            gemm(
                d,
                t_len,
                dm,
                F::one(),
                &mc.h,
                View::rm(0, d).t(),
                &dpre,
                View::rm(0, dm),
                F::one(),
                &mut grad[m.w_in.clone()],
                View::rm(0, dm),
            );
            {
                let gb = &mut grad[m.b_in.clone()];
                for r in 0..t_len {
                    for i in 0..dm {
                        gb[i] += dpre[r * dm + i];
                    }
                }
            }
            let mut dh2 = vec![F::zero(); t_len * d];
            gemm(
                t_len,
                dm,
                d,
                F::one(),
                &dpre,
                View::rm(0, dm),
                params.tensor(&m.w_in),
                View::rm(0, dm).t(),
                F::zero(),
                &mut dh2,
                View::rm(0, d),
            );
            let (ds, db) = split2(grad, &m.ln_scale, &m.ln_bias);
            layer_norm_backward(&dh2, &mc.ln, t_len, d, params.tensor(&m.ln_scale), ds, db, &mut dx);
        }

        // Attention output projection.
        gemm(
            d,
            t_len,
            d,
            F::one(),
            &lc.z,
            View::rm(0, d).t(),
            &dx,
            View::rm(0, d),
            F::one(),
            &mut grad[ll.w_o.clone()],
            View::rm(0, d),
        );
        let mut dz = vec![F::zero(); t_len * d];
        gemm(
            t_len,
            d,
            d,
            F::one(),
            &dx,
            View::rm(0, d),
            params.tensor(&ll.w_o),
            View::rm(0, d).t(),
            F::zero(),
            &mut dz,
            View::rm(0, d),
        );

        let mut dqkv = vec![F::zero(); t_len * 3 * d];
        let mut da = vec![F::zero(); tt];
        for hd in 0..n_heads {
            if params_ablated(ablation, l, hd) {
                continue;
            }
            let a = &lc.attn[hd * tt..(hd + 1) * tt];
            // dA = dZ_h · V_hᵀ
            gemm(
                t_len,
                dh,
                t_len,
                F::one(),
                &dz,
                View::rm(hd * dh, d),
                &lc.qkv,
                View::rm(2 * d + hd * dh, 3 * d).t(),
                F::zero(),
                &mut da,
                View::rm(0, t_len),
            );
            // dV_h = Aᵀ · dZ_h
            gemm(
                t_len,
                t_len,
                dh,
                F::one(),
                a,
                View::rm(0, t_len).t(),
                &dz,
                View::rm(hd * dh, d),
                F::zero(),
                &mut dqkv,
                View::rm(2 * d + hd * dh, 3 * d),
            );
            // Softmax backward, in place: dS = A ⊙ (dA − rowsum(A ⊙ dA)).
            for i in 0..t_len {
                let ar = &a[i * t_len..i * t_len + i + 1];
                let dr = &mut da[i * t_len..(i + 1) * t_len];
                let dot: F = ar.iter().zip(dr.iter()).map(|(&x, &y)| x * y).sum();
                for j in 0..=i {
                    dr[j] = ar[j] * (dr[j] - dot) * scale_attn;
                }
                for x in &mut dr[i + 1..] {
                    *x = F::zero();
                }
            }
            // dQ_h = dS · K_h ; dK_h = dSᵀ · Q_h
            gemm(
                t_len,
                t_len,
                dh,
                F::one(),
                &da,
                View::rm(0, t_len),
                &lc.qkv,
                View::rm(d + hd * dh, 3 * d),
                F::zero(),
                &mut dqkv,
                View::rm(hd * dh, 3 * d),
            );
            gemm(
                t_len,
                t_len,
                dh,
                F::one(),
                &da,
                View::rm(0, t_len).t(),
                &lc.qkv,
                View::rm(hd * dh, 3 * d),
                F::zero(),
                &mut dqkv,
                View::rm(d + hd * dh, 3 * d),
            );
        }

        gemm(
            d,
            t_len,
            3 * d,
            F::one(),
            &lc.h,
            View::rm(0, d).t(),
            &dqkv,
            View::rm(0, 3 * d),
            F::one(),
            &mut grad[ll.w_qkv.clone()],
            View::rm(0, 3 * d),
        );
        let mut dh1 = vec![F::zero(); t_len * d];
        gemm(
            t_len,
            3 * d,
            d,
            F::one(),
            &dqkv,
            View::rm(0, 3 * d),
            params.tensor(&ll.w_qkv),
            View::rm(0, 3 * d).t(),
            F::zero(),
            &mut dh1,
            View::rm(0, d),
        );
        let (ds, db) = split2(grad, &ll.ln_scale, &ll.ln_bias);
        layer_norm_backward(&dh1, &lc.ln, t_len, d, params.tensor(&ll.ln_scale), ds, db, &mut dx);
    }

    // Embeddings.
    for (t, &id) in example.tokens.iter().enumerate() {
        let id = id as usize;
        let row = &dx[t * d..(t + 1) * d];
        {
            let g = &mut grad[lay.tok_emb.start + id * d..lay.tok_emb.start + (id + 1) * d];
            for (gi, &x) in g.iter_mut().zip(row) {
                *gi += x;
            }
        }
        let g = &mut grad[lay.pos_emb.start + t * d..lay.pos_emb.start + (t + 1) * d];
        for (gi, &x) in g.iter_mut().zip(row) {
            *gi += x;
        }
    }
    Ok(loss)
}

fn params_ablated(ablation: &AblationMask, layer: usize, head: usize) -> bool {
    ablation.contains(HeadId::new(layer, head))
}
