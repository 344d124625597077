//! Small pre-norm decoder-only transformer.
//!
//! Parameters live in one flat buffer (see [`Layout`]) so that gradients and
//! optimizer state share the same indexing. Attention weights for all heads
//! of a layer are stored side by side: `w_qkv` is `d_model × 3·d_model` with
//! column blocks `[Q_0 … Q_{H-1} | K_0 … | V_0 …]`, and `w_o` is
//! `d_model × d_model` whose row block `h` is head `h`'s output projection.
//! The projection has no bias, so zeroing a head's `z` removes every trace
//! of that head from the residual stream.

mod backward;
pub mod checkpoint;
mod forward;
pub mod linalg;

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::LabRng;

pub(crate) use backward::example_loss_and_grad;
pub use backward::Example;
pub use forward::{predict_next, AttnMatrix, Capture, ForwardTrace, LayerTrace};
pub use linalg::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Hidden width of the MLP; 0 means attention-only.
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub layernorm_eps: f32,
}

fn default_eps() -> f32 {
    1e-5
}

impl Default for ModelConfig {
    /// The analysis model: 4 layers × 4 heads, d_model 128, MLP 512.
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_mlp: 512,
            vocab_size: 64,
            max_seq_len: 512,
            layernorm_eps: default_eps(),
        }
    }
}

impl ModelConfig {
    /// Two-layer attention-only variant used for minimal-circuit runs.
    pub fn attention_only_two_layer() -> Self {
        ModelConfig {
            n_layers: 2,
            d_mlp: 0,
            ..Self::default()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn attention_only(&self) -> bool {
        self.d_mlp == 0
    }

    pub fn n_total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(format!("model: {m}")));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return bad("layers, heads and d_model must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("vocab_size and max_seq_len must be positive");
        }
        if !(self.layernorm_eps > 0.0) {
            return bad("layernorm_eps must be positive");
        }
        Ok(())
    }

    /// Every head of the model in (layer, head) order.
    pub fn all_heads(&self) -> Vec<HeadId> {
        (0..self.n_layers)
            .flat_map(|layer| (0..self.n_heads).map(move |head| HeadId { layer, head }))
            .collect()
    }
}

/// Attention head address, zero-based, printed as `layer:head`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        HeadId { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let (l, h) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| LabError::Input(format!("expected layer:head, got `{s}`")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| LabError::Input(format!("bad head id `{s}`")))
        };
        Ok(HeadId::new(parse(l)?, parse(h)?))
    }
}

/// Heads whose output `z` is replaced by zeros.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMask {
    heads: BTreeSet<HeadId>,
}

impl AblationMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all(config: &ModelConfig) -> Self {
        config.all_heads().into_iter().collect()
    }

    pub fn insert(&mut self, head: HeadId) {
        self.heads.insert(head);
    }

    pub fn contains(&self, head: HeadId) -> bool {
        self.heads.contains(&head)
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        self.heads.iter().copied()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        match self
            .heads
            .iter()
            .find(|h| h.layer >= config.n_layers || h.head >= config.n_heads)
        {
            Some(h) => Err(LabError::Input(format!("ablated head {h} outside the model"))),
            None => Ok(()),
        }
    }

    /// Parse a comma-separated `layer:head` list; empty means no ablation.
    pub fn parse_list(s: &str) -> Result<Self> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(HeadId::from_str)
            .collect::<Result<BTreeSet<_>>>()
            .map(|heads| AblationMask { heads })
    }
}

impl FromIterator<HeadId> for AblationMask {
    fn from_iter<I: IntoIterator<Item = HeadId>>(iter: I) -> Self {
        AblationMask {
            heads: iter.into_iter().collect(),
        }
    }
}


#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayout {
    pub ln_scale: Range<usize>,
    pub ln_bias: Range<usize>,
    pub w_in: Range<usize>,
    pub b_in: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerLayout {
    pub ln_scale: Range<usize>,
    pub ln_bias: Range<usize>,
    pub w_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub mlp: Option<MlpLayout>,
}

/// Offsets of every tensor inside the flat parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub lnf_scale: Range<usize>,
    pub lnf_bias: Range<usize>,
    pub unembed: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut cursor = 0;
        let mut take = |n: usize| {
            let r = cursor..cursor + n;
            cursor += n;
            r
        };
        let d = c.d_model;
        let tok_emb = take(c.vocab_size * d);
        let pos_emb = take(c.max_seq_len * d);
        let layers = (0..c.n_layers)
            .map(|_| LayerLayout {
                ln_scale: take(d),
                ln_bias: take(d),
                w_qkv: take(d * 3 * d),
                w_o: take(d * d),
                mlp: (!c.attention_only()).then(|| MlpLayout {
                    ln_scale: take(d),
                    ln_bias: take(d),
                    w_in: take(d * c.d_mlp),
                    b_in: take(c.d_mlp),
                    w_out: take(c.d_mlp * d),
                    b_out: take(d),
                }),
            })
            .collect();
        let lnf_scale = take(d);
        let lnf_bias = take(d);
        let unembed = take(d * c.vocab_size);
        Layout {
            tok_emb,
            pos_emb,
            layers,
            lnf_scale,
            lnf_bias,
            unembed,
            total: cursor,
        }
    }
}

/// Weights of one model, in a single flat buffer indexed by [`Layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<F = f32> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<F>,
}

impl<F: Float> ModelParameters<F> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let data = vec![F::zero(); layout.total];
        Ok(ModelParameters {
            config,
            layout,
            data,
        })
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self, range: &Range<usize>) -> &[F] {
        &self.data[range.clone()]
    }

    pub fn tensor_mut(&mut self, range: &Range<usize>) -> &mut [F] {
        &mut self.data[range.clone()]
    }

    pub fn cast<G: Float>(&self) -> ModelParameters<G> {
        ModelParameters {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|&x| G::from_f64_lossy(x.to_f64_lossy())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Gaussian initialisation: std 0.02 everywhere except the residual output
/// projections (`w_o`, MLP `w_out`), which use 0.02/√(2L). Layer-norm
/// scales start at 1, every bias at 0.
pub fn init_model(config: &ModelConfig, rng: &mut LabRng) -> Result<ModelParameters<f32>> {
    let mut params = ModelParameters::<f32>::zeros(config.clone())?;
    let std = 0.02f32;
    let out_std = std / (2.0 * config.n_layers as f32).sqrt();
    let layout = params.layout.clone();

    let mut fill = |params: &mut ModelParameters<f32>, r: &Range<usize>, sigma: f32| {
        let normal = Normal::new(0.0, sigma).expect("positive std");
        for x in params.tensor_mut(r) {
            *x = normal.sample(rng);
        }
    };
    fill(&mut params, &layout.tok_emb, std);
    fill(&mut params, &layout.pos_emb, std);
    for layer in &layout.layers {
        params.tensor_mut(&layer.ln_scale).fill(1.0);
        fill(&mut params, &layer.w_qkv, std);
        fill(&mut params, &layer.w_o, out_std);
        if let Some(mlp) = &layer.mlp {
            params.tensor_mut(&mlp.ln_scale).fill(1.0);
            fill(&mut params, &mlp.w_in, std);
            fill(&mut params, &mlp.w_out, out_std);
        }
    }
    params.tensor_mut(&layout.lnf_scale).fill(1.0);
    fill(&mut params, &layout.unembed, std);
    Ok(params)
}
