//! Head classification: induction heads by ideal-mask matching, plus
//! previous-token and n-back scores for context-matching candidates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{AblationMask, AttnMatrix, Capture, HeadId, ModelParameters};
use crate::rng::LabRng;
use crate::seqgen::gen_induction_probe_sequence;

/// `mask[t][j]` is true iff `t ≥ period` and `j == t − period + 1`: the
/// position right after the previous occurrence of token `t` in a string
/// repeated twice.
pub fn ideal_induction_mask(seq_len: usize, period: usize) -> Result<Vec<Vec<bool>>> {
    if period == 0 || seq_len != 2 * period {
        return Err(LabError::Input(format!(
            "ideal induction mask needs seq_len == 2·period, got {seq_len} and {period}"
        )));
    }
    Ok((0..seq_len)
        .map(|t| (0..seq_len).map(|j| t >= period && j == t + 1 - period).collect())
        .collect())
}

/// Square causal attention weights readable as f64. Captured traces are
/// f32; closed-form checks can pass exact f64 rows.
pub trait AttentionWeights {
    fn size(&self) -> usize;
    fn weight(&self, i: usize, j: usize) -> f64;
}

impl AttentionWeights for AttnMatrix {
    fn size(&self) -> usize {
        self.n
    }

    fn weight(&self, i: usize, j: usize) -> f64 {
        self.get(i, j) as f64
    }
}

impl AttentionWeights for [Vec<f64>] {
    fn size(&self) -> usize {
        self.len()
    }

    fn weight(&self, i: usize, j: usize) -> f64 {
        self[i][j]
    }
}

/// Mean over rows `t ≥ T` (where `T = n/2`) of the attention mass that
/// row places on masked cells.
pub fn induction_score<A: AttentionWeights + ?Sized>(attn: &A, mask: &[Vec<bool>]) -> Result<f64> {
    let n = attn.size();
    if mask.len() != n || mask.iter().any(|r| r.len() != n) || n < 2 || !n.is_multiple_of(2) {
        return Err(LabError::Input(format!(
            "attention {n}×{n} does not match an induction mask of {} rows",
            mask.len()
        )));
    }
    let period = n / 2;
    let total: f64 = (period..n)
        .map(|t| (0..n).filter(|&j| mask[t][j]).map(|j| attn.weight(t, j)).sum::<f64>())
        .sum();
    Ok(total / period as f64)
}

/// Mean over `t ≥ 1` of `a[t][t−1]`; 0 for a single-token matrix.
pub fn prev_token_score<A: AttentionWeights + ?Sized>(attn: &A) -> f64 {
    n_back_score(attn, 1).unwrap_or(0.0)
}

/// Mean over `t ≥ n` of the mass on the `n` positions before `t`.
pub fn n_back_score<A: AttentionWeights + ?Sized>(attn: &A, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(LabError::Input("n_back_score needs n >= 1".into()));
    }
    let size = attn.size();
    if size <= n {
        return Err(LabError::Input(format!("no rows with {n} predecessors in a {size}×{size} matrix")));
    }
    let total: f64 = (n..size)
        .map(|t| (1..=n).map(|k| attn.weight(t, t - k)).sum::<f64>())
        .sum();
    Ok(total / (size - n) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_probe_seqs")]
    pub n_probe_seqs: usize,
    #[serde(default = "default_half_length")]
    pub half_length: usize,
    /// Window sizes for the n-back scores.
    #[serde(default = "default_n_back")]
    pub n_back: Vec<usize>,
}

fn default_threshold() -> f64 {
    0.35
}
fn default_probe_seqs() -> usize {
    16
}
fn default_half_length() -> usize {
    25
}
fn default_n_back() -> Vec<usize> {
    vec![2, 3, 4]
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            threshold: default_threshold(),
            n_probe_seqs: default_probe_seqs(),
            half_length: default_half_length(),
            n_back: default_n_back(),
        }
    }
}

impl ClassifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(LabError::Config(format!(
                "induction threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.n_probe_seqs == 0 || self.half_length < 2 {
            return Err(LabError::Config(
                "need at least one probe sequence of half-length >= 2".into(),
            ));
        }
        if self.n_back.iter().any(|&n| n == 0 || n >= 2 * self.half_length) {
            return Err(LabError::Config("n_back windows must lie in [1, 2·half_length)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScorecard {
    pub head: HeadId,
    pub induction_score: f64,
    pub prev_token_score: f64,
    pub n_back_scores: BTreeMap<usize, f64>,
    pub is_induction: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadClassification {
    pub threshold: f64,
    pub n_probe_seqs: usize,
    pub half_length: usize,
    pub scorecards: Vec<HeadScorecard>,
}

impl HeadClassification {
    pub fn induction_heads(&self) -> Vec<HeadId> {
        self.scorecards
            .iter()
            .filter(|s| s.is_induction)
            .map(|s| s.head)
            .collect()
    }

    /// Highest induction score, with its head (first in `HeadId` order on ties).
    pub fn best(&self) -> Option<&HeadScorecard> {
        self.scorecards
            .iter()
            .fold(None, |best: Option<&HeadScorecard>, s| match best {
                Some(b) if b.induction_score >= s.induction_score => Some(b),
                _ => Some(s),
            })
    }

    pub fn to_csv(&self) -> String {
        let mut ns: Vec<usize> = self
            .scorecards
            .first()
            .map(|s| s.n_back_scores.keys().copied().collect())
            .unwrap_or_default();
        ns.sort_unstable();
        let mut out = String::from("layer,head,induction_score,prev_token_score");
        for n in &ns {
            out.push_str(&format!(",n_back_{n}"));
        }
        out.push_str(",is_induction\n");
        for s in &self.scorecards {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}",
                s.head.layer, s.head.head, s.induction_score, s.prev_token_score
            ));
            for n in &ns {
                out.push_str(&format!(",{:.6}", s.n_back_scores[n]));
            }
            out.push_str(&format!(",{}\n", s.is_induction));
        }
        out
    }
}

/// Score every head on `n_probe_seqs` random strings repeated twice and flag
/// those whose mean induction score reaches the threshold.
pub fn classify_induction_heads(
    params: &ModelParameters,
    config: &ClassifyConfig,
    rng: &mut LabRng,
) -> Result<HeadClassification> {
    config.validate()?;
    let heads = params.config.all_heads();
    let seq_len = 2 * config.half_length;
    let mask = ideal_induction_mask(seq_len, config.half_length)?;
    let mut ind = vec![0.0; heads.len()];
    let mut prev = vec![0.0; heads.len()];
    let mut nb = vec![vec![0.0; config.n_back.len()]; heads.len()];
    for _ in 0..config.n_probe_seqs {
        let tokens = gen_induction_probe_sequence(params.config.vocab_size, config.half_length, rng)?;
        if tokens.len() > params.config.max_seq_len {
            return Err(LabError::Config(format!(
                "probe sequences of length {} exceed the model context",
                tokens.len()
            )));
        }
        let trace = params.forward(&tokens, &AblationMask::none(), Capture::attention())?;
        for (i, &h) in heads.iter().enumerate() {
            let a = trace.attention(h).expect("attention captured");
            ind[i] += induction_score(a, &mask)?;
            prev[i] += prev_token_score(a);
            for (k, &n) in config.n_back.iter().enumerate() {
                nb[i][k] += n_back_score(a, n)?;
            }
        }
    }
    let denom = config.n_probe_seqs as f64;
    let scorecards = heads
        .iter()
        .enumerate()
        .map(|(i, &head)| {
            let induction_score = ind[i] / denom;
            HeadScorecard {
                head,
                induction_score,
                prev_token_score: prev[i] / denom,
                n_back_scores: config
                    .n_back
                    .iter()
                    .enumerate()
                    .map(|(k, &n)| (n, nb[i][k] / denom))
                    .collect(),
                is_induction: induction_score >= config.threshold,
            }
        })
        .collect();
    Ok(HeadClassification {
        threshold: config.threshold,
        n_probe_seqs: config.n_probe_seqs,
        half_length: config.half_length,
        scorecards,
    })
}
