//! Algorithmic reference for context-routed induction: a routing stage that
//! looks back over the preceding tokens, feeding an induction step that
//! attends only to successors whose context matches the query's.
//!
//! Two keying schemes are provided. `Sliding` compares the `m` tokens right
//! before the query with the `m` tokens before each earlier occurrence of
//! the query token. `Anchored` reads the key from the start of the current
//! chunk instead (its first `min(m, offset + 1)` tokens plus the offset),
//! trying the 3rd-order chunk first and backing off to the 2nd-order chunk.
//! A sliding window straddles chunk boundaries and can match shared
//! interior runs of different chunk types, so only the anchored key reaches
//! perfect accuracy with `m` equal to the minimal disambiguating prefix.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::AttnMatrix;
use crate::seqgen::{GeneratedSequence, TokenId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Attend uniformly over every successor of the query token.
    #[default]
    UniformSuccessors,
    /// Leave the row empty and make no prediction.
    Abstain,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyMode {
    #[default]
    Anchored,
    Sliding,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitConfig {
    pub match_length: usize,
    #[serde(default)]
    pub fallback: Fallback,
    #[serde(default)]
    pub key: KeyMode,
}

impl CircuitConfig {
    pub fn new(match_length: usize) -> Self {
        CircuitConfig {
            match_length,
            ..Self::default()
        }
    }

    pub fn sliding(match_length: usize) -> Self {
        CircuitConfig {
            match_length,
            key: KeyMode::Sliding,
            ..Self::default()
        }
    }
}

/// Chunk lengths the anchored key needs; `None` levels are skipped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkGeometry {
    pub chunk_len: Option<usize>,
    pub super_len: Option<usize>,
}

impl ChunkGeometry {
    pub fn of(seq: &GeneratedSequence) -> Self {
        ChunkGeometry {
            chunk_len: Some(seq.chunk_len),
            super_len: seq.super_len(),
        }
    }
}

/// Sparse attention: `rows[t]` lists `(position, weight)` pairs in
/// increasing position order; an empty row means no candidate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseAttention {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseAttention {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Dense row-stochastic form; empty rows attend to themselves.
    pub fn to_dense(&self) -> AttnMatrix {
        let n = self.rows.len();
        let mut a = AttnMatrix::zeros(n);
        for (t, row) in self.rows.iter().enumerate() {
            if row.is_empty() {
                a.set(t, t, 1.0);
            }
            for &(j, w) in row {
                a.set(t, j, w as f32);
            }
        }
        a
    }
}

fn uniform(positions: Vec<usize>) -> Vec<(usize, f64)> {
    let w = 1.0 / positions.len() as f64;
    positions.into_iter().map(|p| (p, w)).collect()
}

/// Row `t` spreads its mass evenly over the `min(n, t)` positions before
/// it; row 0 attends to itself.
pub fn ideal_context_routing_attention(len: usize, n: usize) -> Result<SparseAttention> {
    if n == 0 {
        return Err(LabError::Input("routing window n must be >= 1".into()));
    }
    let rows = (0..len)
        .map(|t| {
            if t == 0 {
                vec![(0, 1.0)]
            } else {
                uniform((t - n.min(t)..t).collect())
            }
        })
        .collect();
    Ok(SparseAttention { rows })
}

/// Every `p <= t` with `tokens[p - 1] == tokens[t]`.
fn all_successors(tokens: &[TokenId], t: usize) -> Vec<usize> {
    (1..=t).filter(|&p| tokens[p - 1] == tokens[t]).collect()
}

fn sliding_candidates(tokens: &[TokenId], t: usize, m: usize) -> Vec<usize> {
    let span = m.min(t);
    (0..t)
        .filter(|&q| tokens[q] == tokens[t] && q >= span && (1..=span).all(|i| tokens[q - i] == tokens[t - i]))
        .map(|q| q + 1)
        .collect()
}

/// Earlier occurrences at the same offset within a unit of length `unit`
/// whose unit starts with the same `min(m, offset + 1)` tokens.
fn anchored_candidates(tokens: &[TokenId], t: usize, m: usize, unit: usize) -> Vec<usize> {
    let offset = t % unit;
    let n = m.min(offset + 1);
    let key = &tokens[t - offset..t - offset + n];
    (offset..t)
        .step_by(unit)
        .filter(|&q| tokens[q] == tokens[t] && &tokens[q - offset..q - offset + n] == key)
        .map(|q| q + 1)
        .collect()
}

/// Adaptive induction attention over `tokens` with the given key scheme.
pub fn adaptive_induction_attention(
    tokens: &[TokenId],
    geometry: ChunkGeometry,
    config: &CircuitConfig,
) -> Result<SparseAttention> {
    let m = config.match_length;
    if config.key == KeyMode::Anchored && m > 0 && geometry.chunk_len.is_none() && geometry.super_len.is_none() {
        return Err(LabError::Input("anchored keys need chunk geometry".into()));
    }
    if matches!(geometry.chunk_len, Some(0)) || matches!(geometry.super_len, Some(0)) {
        return Err(LabError::Input("chunk lengths must be positive".into()));
    }
    let rows = (0..tokens.len())
        .map(|t| {
            let matched = if m == 0 {
                all_successors(tokens, t)
            } else {
                match config.key {
                    KeyMode::Sliding => sliding_candidates(tokens, t, m),
                    KeyMode::Anchored => [geometry.super_len, geometry.chunk_len]
                        .into_iter()
                        .flatten()
                        .map(|unit| anchored_candidates(tokens, t, m, unit))
                        .find(|c| !c.is_empty())
                        .unwrap_or_default(),
                }
            };
            let chosen = if matched.is_empty() && config.fallback == Fallback::UniformSuccessors {
                all_successors(tokens, t)
            } else {
                matched
            };
            if chosen.is_empty() {
                Vec::new()
            } else {
                uniform(chosen)
            }
        })
        .collect();
    Ok(SparseAttention { rows })
}

/// Token receiving the most attention mass in each row; ties go to the
/// token whose earliest attended position comes first. `None` abstains.
pub fn predict_from_attention(tokens: &[TokenId], attention: &SparseAttention) -> Vec<Option<TokenId>> {
    attention
        .rows
        .iter()
        .map(|row| {
            let mut mass: Vec<(TokenId, f64, usize)> = Vec::new();
            for &(p, w) in row {
                let tok = tokens[p];
                match mass.iter_mut().find(|(t, _, _)| *t == tok) {
                    Some(e) => e.1 += w,
                    None => mass.push((tok, w, p)),
                }
            }
            // entries are in order of first position, so a strict `>` keeps
            // the earliest on ties
            let mut best: Option<(TokenId, f64)> = None;
            for (tok, w, _) in mass {
                if best.is_none_or(|(_, bw)| w > bw + 1e-12) {
                    best = Some((tok, w));
                }
            }
            best.map(|(t, _)| t)
        })
        .collect()
}

pub fn circuit_predict(
    tokens: &[TokenId],
    geometry: ChunkGeometry,
    config: &CircuitConfig,
) -> Result<Vec<Option<TokenId>>> {
    let attention = adaptive_induction_attention(tokens, geometry, config)?;
    Ok(predict_from_attention(tokens, &attention))
}

/// Smallest `k` such that the length-`k` prefixes of all chunks differ.
pub fn minimal_disambiguating_prefix(chunks: &[Vec<TokenId>]) -> Result<usize> {
    let Some(first) = chunks.first() else {
        return Err(LabError::Input("chunk set is empty".into()));
    };
    if chunks.iter().any(|c| c.len() != first.len()) {
        return Err(LabError::Input("chunks differ in length".into()));
    }
    for k in 0..=first.len() {
        let prefixes: HashSet<&[TokenId]> = chunks.iter().map(|c| &c[..k]).collect();
        if prefixes.len() == chunks.len() {
            return Ok(k);
        }
    }
    Err(LabError::Input("chunk set contains duplicates".into()))
}

/// Match length that makes the anchored circuit exact on `seq`: enough
/// leading tokens to tell apart the 2nd-order chunks and, for 3rd-order
/// sequences, the token expansions of the 3rd-order chunks.
pub fn oracle_match_length(seq: &GeneratedSequence) -> Result<usize> {
    let second: Vec<Vec<TokenId>> = seq.chunks2.iter().map(|c| c.content.clone()).collect();
    let mut m = minimal_disambiguating_prefix(&second)?;
    if seq.has_third_level() {
        let expanded: Vec<Vec<TokenId>> = seq
            .chunks3
            .iter()
            .map(|c| {
                c.content
                    .iter()
                    .flat_map(|&ty| seq.chunks2[ty as usize].content.iter().copied())
                    .collect()
            })
            .collect();
        m = m.max(minimal_disambiguating_prefix(&expanded)?);
    }
    Ok(m)
}
