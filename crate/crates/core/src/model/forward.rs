//! Forward pass with activation caching and trace capture.

use serde::{Deserialize, Serialize};

use super::linalg::{gemm, Float, View};
use super::{AblationMask, HeadId, LayerLayout, ModelParameters};
use crate::error::{LabError, Result};
use crate::seqgen::TokenId;

/// Which trace fields [`ModelParameters::forward`] keeps. Logits are always
/// returned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Capture {
    pub attention: bool,
    pub values: bool,
    pub head_outputs: bool,
    pub residuals: bool,
}

impl Capture {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Capture {
            attention: true,
            values: true,
            head_outputs: true,
            residuals: true,
        }
    }

    pub fn attention() -> Self {
        Capture {
            attention: true,
            ..Self::default()
        }
    }

    pub fn head_outputs() -> Self {
        Capture {
            head_outputs: true,
            ..Self::default()
        }
    }
}

/// Square, row-major attention matrix; row `i` is query `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnMatrix {
    pub n: usize,
    pub data: Vec<f32>,
}

impl AttnMatrix {
    pub fn new(n: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * n, "attention matrix must be n×n");
        AttnMatrix { n, data }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(n, vec![0.0; n * n])
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let n = rows.len();
        let data = rows
            .iter()
            .flat_map(|r| {
                assert_eq!(r.len(), n, "attention rows must have length n");
                r.iter().copied()
            })
            .collect();
        Self::new(n, data)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.n + j] = v;
    }
}

#[derive(Clone, Debug, Default)]
pub struct LayerTrace {
    /// Per head, `seq_len × seq_len`.
    pub attention: Option<Vec<AttnMatrix>>,
    /// Per head, `seq_len × d_head` value vectors `v_j`.
    pub values: Option<Vec<Vec<f32>>>,
    /// Per head, `seq_len × d_head` outputs `z_i = Σ_j a_ij v_j`.
    pub head_outputs: Option<Vec<Vec<f32>>>,
    /// Residual stream after this layer, `seq_len × d_model`.
    pub residual: Option<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub seq_len: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_head: usize,
    /// `seq_len × vocab_size`.
    pub logits: Vec<f32>,
    /// Residual stream entering layer 0 (token + position embedding).
    pub embedding: Option<Vec<f32>>,
    pub layers: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn logits_row(&self, t: usize) -> &[f32] {
        &self.logits[t * self.vocab_size..(t + 1) * self.vocab_size]
    }

    pub fn attention(&self, head: HeadId) -> Option<&AttnMatrix> {
        self.layers.get(head.layer)?.attention.as_ref()?.get(head.head)
    }

    pub fn head_output(&self, head: HeadId) -> Option<&[f32]> {
        self.layers
            .get(head.layer)?
            .head_outputs
            .as_ref()?
            .get(head.head)
            .map(|v| v.as_slice())
    }

    pub fn values(&self, head: HeadId) -> Option<&[f32]> {
        self.layers
            .get(head.layer)?
            .values
            .as_ref()?
            .get(head.head)
            .map(|v| v.as_slice())
    }
}

/// Arg-max token per position; ties go to the lowest token id.
pub fn predict_next(trace: &ForwardTrace) -> Vec<TokenId> {
    (0..trace.seq_len)
        .map(|t| argmax_lowest(trace.logits_row(t)) as TokenId)
        .collect()
}

pub(crate) fn argmax_lowest(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) struct LnCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub(crate) struct MlpCache<F> {
    pub ln: LnCache<F>,
    pub h: Vec<F>,
    pub pre: Vec<F>,
    pub act: Vec<F>,
}

pub(crate) struct LayerCache<F> {
    pub ln: LnCache<F>,
    pub h: Vec<F>,
    pub qkv: Vec<F>,
    /// `n_heads × T × T`.
    pub attn: Vec<F>,
    pub z: Vec<F>,
    pub mlp: Option<MlpCache<F>>,
    pub resid_out: Vec<F>,
}

pub(crate) struct Cache<F> {
    pub seq_len: usize,
    pub embedding: Vec<F>,
    pub layers: Vec<LayerCache<F>>,
    pub lnf: LnCache<F>,
    pub hf: Vec<F>,
    pub logits: Vec<F>,
}

pub(crate) fn layer_norm<F: Float>(
    x: &[F],
    rows: usize,
    d: usize,
    scale: &[F],
    bias: &[F],
    eps: F,
) -> (Vec<F>, LnCache<F>) {
    let mut y = vec![F::zero(); rows * d];
    let mut xhat = vec![F::zero(); rows * d];
    let mut rstd = vec![F::zero(); rows];
    let inv_d = F::one() / F::from_usize(d).unwrap();
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let xh = (row[i] - mean) * rs;
            xhat[r * d + i] = xh;
            y[r * d + i] = xh * scale[i] + bias[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu<F: Float>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let k = F::from_f64_lossy(GELU_K);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let k = F::from_f64_lossy(GELU_K);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + three * k * x * x)
}

fn check_finite<F: Float>(xs: &[F], location: impl FnOnce() -> String) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LabError::Numeric {
            location: location(),
        })
    }
}

impl<F: Float> ModelParameters<F> {
    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(LabError::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(LabError::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(LabError::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Full forward pass keeping every activation needed for backprop.
    pub(crate) fn forward_cache(&self, tokens: &[TokenId], ablation: &AblationMask) -> Result<Cache<F>> {
        self.check_tokens(tokens)?;
        ablation.validate(&self.config)?;
        let c = &self.config;
        let (t_len, d) = (tokens.len(), c.d_model);
        let eps = F::from_f64_lossy(c.layernorm_eps as f64);

        let tok = self.tensor(&self.layout.tok_emb);
        let pos = self.tensor(&self.layout.pos_emb);
        let mut x = vec![F::zero(); t_len * d];
        for (t, &id) in tokens.iter().enumerate() {
            let id = id as usize;
            for i in 0..d {
                x[t * d + i] = tok[id * d + i] + pos[t * d + i];
            }
        }
        let embedding = x.clone();

        let mut layers = Vec::with_capacity(c.n_layers);
        for (l, ll) in self.layout.layers.iter().enumerate() {
            let cache = self.layer_forward(l, ll, &mut x, t_len, ablation, eps)?;
            layers.push(cache);
        }

        let (hf, lnf) = layer_norm(
            &x,
            t_len,
            d,
            self.tensor(&self.layout.lnf_scale),
            self.tensor(&self.layout.lnf_bias),
            eps,
        );
        let v = c.vocab_size;
        let mut logits = vec![F::zero(); t_len * v];
        gemm(
            t_len,
            d,
            v,
            F::one(),
            &hf,
            View::rm(0, d),
            self.tensor(&self.layout.unembed),
            View::rm(0, v),
            F::zero(),
            &mut logits,
            View::rm(0, v),
        );
        check_finite(&logits, || "logits".to_string())?;
        Ok(Cache {
            seq_len: t_len,
            embedding,
            layers,
            lnf,
            hf,
            logits,
        })
    }

    fn layer_forward(
        &self,
        l: usize,
        ll: &LayerLayout,
        x: &mut [F],
        t_len: usize,
        ablation: &AblationMask,
        eps: F,
    ) -> Result<LayerCache<F>> {
        let c = &self.config;
        let (d, n_heads, dh) = (c.d_model, c.n_heads, c.d_head());
        let (h, ln) = layer_norm(x, t_len, d, self.tensor(&ll.ln_scale), self.tensor(&ll.ln_bias), eps);

        let mut qkv = vec![F::zero(); t_len * 3 * d];
        gemm(
            t_len,
            d,
            3 * d,
            F::one(),
            &h,
            View::rm(0, d),
            self.tensor(&ll.w_qkv),
            View::rm(0, 3 * d),
            F::zero(),
            &mut qkv,
            View::rm(0, 3 * d),
        );

        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let tt = t_len * t_len;
        let mut attn = vec![F::zero(); n_heads * tt];
        let mut z = vec![F::zero(); t_len * d];
        for hd in 0..n_heads {
            let a = &mut attn[hd * tt..(hd + 1) * tt];
            gemm(
                t_len,
                dh,
                t_len,
                scale,
                &qkv,
                View::rm(hd * dh, 3 * d),
                &qkv,
                View::rm(d + hd * dh, 3 * d).t(),
                F::zero(),
                a,
                View::rm(0, t_len),
            );
            causal_softmax(a, t_len);
            check_finite(a, || format!("layer {l} head {hd} attention"))?;
            if ablation.contains(HeadId::new(l, hd)) {
                continue;
            }
            gemm(
                t_len,
                t_len,
                dh,
                F::one(),
                a,
                View::rm(0, t_len),
                &qkv,
                View::rm(2 * d + hd * dh, 3 * d),
                F::zero(),
                &mut z,
                View::rm(hd * dh, d),
            );
        }
        check_finite(&z, || format!("layer {l} head outputs"))?;

        gemm(
            t_len,
            d,
            d,
            F::one(),
            &z,
            View::rm(0, d),
            self.tensor(&ll.w_o),
            View::rm(0, d),
            F::one(),
            x,
            View::rm(0, d),
        );

        let mlp = match &ll.mlp {
            None => None,
            Some(m) => {
                let dm = c.d_mlp;
                let (h2, ln2) = layer_norm(x, t_len, d, self.tensor(&m.ln_scale), self.tensor(&m.ln_bias), eps);
                let mut pre = vec![F::zero(); t_len * dm];
                let b_in = self.tensor(&m.b_in);
                for r in 0..t_len {
                    pre[r * dm..(r + 1) * dm].copy_from_slice(b_in);
                }
                gemm(
                    t_len,
                    d,
                    dm,
                    F::one(),
                    &h2,
                    View::rm(0, d),
                    self.tensor(&m.w_in),
                    View::rm(0, dm),
                    F::one(),
                    &mut pre,
                    View::rm(0, dm),
                );
                let act: Vec<F> = pre.iter().map(|&u| gelu(u)).collect();
                let b_out = self.tensor(&m.b_out);
                for r in 0..t_len {
                    for i in 0..d {
                        x[r * d + i] += b_out[i];
                    }
                }
                gemm(
                    t_len,
                    dm,
                    d,
                    F::one(),
                    &act,
                    View::rm(0, dm),
                    self.tensor(&m.w_out),
                    View::rm(0, d),
                    F::one(),
                    x,
                    View::rm(0, d),
                );
                Some(MlpCache { ln: ln2, h: h2, pre, act })
            }
        };
        check_finite(x, || format!("layer {l} residual"))?;

        Ok(LayerCache {
            ln,
            h,
            qkv,
            attn,
            z,
            mlp,
            resid_out: x.to_vec(),
        })
    }
}

/// Row-wise softmax over `j <= i`; entries above the diagonal become 0.
fn causal_softmax<F: Float>(a: &mut [F], n: usize) {
    for i in 0..n {
        let row = &mut a[i * n..(i + 1) * n];
        let max = row[..=i].iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in &mut row[..=i] {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in &mut row[..=i] {
            *v /= sum;
        }
        for v in &mut row[i + 1..] {
            *v = F::zero();
        }
    }
}

impl ModelParameters<f32> {
    /// Run the model on `tokens` with the heads in `ablation` zeroed.
    pub fn forward(&self, tokens: &[TokenId], ablation: &AblationMask, capture: Capture) -> Result<ForwardTrace> {
        let cache = self.forward_cache(tokens, ablation)?;
        let c = &self.config;
        let (t_len, d, dh) = (cache.seq_len, c.d_model, c.d_head());
        let tt = t_len * t_len;
        let layers = cache
            .layers
            .into_iter()
            .map(|lc| {
                let per_head = |src: &[f32], ld: usize, base: usize| -> Vec<Vec<f32>> {
                    (0..c.n_heads)
                        .map(|hd| {
                            (0..t_len)
                                .flat_map(|t| {
                                    let o = t * ld + base + hd * dh;
                                    src[o..o + dh].iter().copied()
                                })
                                .collect()
                        })
                        .collect()
                };
                LayerTrace {
                    attention: capture.attention.then(|| {
                        (0..c.n_heads)
                            .map(|hd| AttnMatrix::new(t_len, lc.attn[hd * tt..(hd + 1) * tt].to_vec()))
                            .collect()
                    }),
                    values: capture.values.then(|| per_head(&lc.qkv, 3 * d, 2 * d)),
                    head_outputs: capture.head_outputs.then(|| per_head(&lc.z, d, 0)),
                    residual: capture.residuals.then_some(lc.resid_out),
                }
            })
            .collect();
        Ok(ForwardTrace {
            seq_len: t_len,
            vocab_size: c.vocab_size,
            d_model: d,
            d_head: dh,
            logits: cache.logits,
            embedding: capture.residuals.then_some(cache.embedding),
            layers,
        })
    }
}
