//! Hierarchical synthetic sequences.
//!
//! A 2nd-order sequence is a shuffled schedule of `P` distinct permutations
//! ("chunks") of a `V`-token vocabulary, each repeated `N` times. A
//! 3rd-order sequence adds a level: `P'` distinct permutations of the 2nd-order
//! chunk types, shuffled `N` times each. Every token carries a
//! [`TokenAnnotation`] with its chunk membership, whether its successor is
//! determined by what came before, and which earlier positions hold the
//! context-correct successor.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::{rng_from_seed, LabRng};

pub type TokenId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    First,
    Second,
    Third,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkLevel {
    Second,
    Third,
}

/// Parameters of one generated sequence.
///
/// `vocab` is both the number of distinct tokens and the 2nd-order chunk
/// length. `chunks` is ignored for first-order sequences and `super_chunks`
/// is only read for third-order ones.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub order: Order,
    pub vocab: usize,
    #[serde(default = "default_chunks")]
    pub chunks: usize,
    #[serde(default = "default_chunks")]
    pub super_chunks: usize,
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_model_vocab")]
    pub model_vocab_size: usize,
}

fn default_chunks() -> usize {
    1
}

fn default_model_vocab() -> usize {
    64
}

impl SequenceSpec {
    pub fn first(vocab: usize, repeats: usize) -> Self {
        SequenceSpec {
            order: Order::First,
            vocab,
            chunks: 1,
            super_chunks: 1,
            repeats,
            seed: 0,
            model_vocab_size: default_model_vocab(),
        }
    }

    pub fn second(repeats: usize, chunks: usize, vocab: usize) -> Self {
        SequenceSpec {
            order: Order::Second,
            chunks,
            ..Self::first(vocab, repeats)
        }
    }

    pub fn third(repeats: usize, super_chunks: usize, chunks: usize, vocab: usize) -> Self {
        SequenceSpec {
            order: Order::Third,
            chunks,
            super_chunks,
            ..Self::first(vocab, repeats)
        }
    }

    /// Learning/ablation defaults for 2nd-order runs: N=8, P=4, V=8.
    pub fn default_second() -> Self {
        Self::second(8, 4, 8)
    }

    /// Learning/ablation defaults for 3rd-order runs: N=8, P'=4, P=4, V=4.
    pub fn default_third() -> Self {
        Self::third(8, 4, 4, 4)
    }

    /// First-order sequence matching the 2nd-order chunk length.
    pub fn default_first() -> Self {
        Self::first(8, 8)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_model_vocab(mut self, model_vocab_size: usize) -> Self {
        self.model_vocab_size = model_vocab_size;
        self
    }

    /// Number of 2nd-order chunk types actually in play.
    pub fn effective_chunks(&self) -> usize {
        match self.order {
            Order::First => 1,
            _ => self.chunks,
        }
    }

    pub fn len(&self) -> usize {
        match self.order {
            Order::First => self.repeats * self.vocab,
            Order::Second => self.repeats * self.chunks * self.vocab,
            Order::Third => self.repeats * self.super_chunks * self.chunks * self.vocab,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::InvalidSpec(msg));
        if self.vocab < 2 {
            return bad(format!("vocab must be >= 2, got {}", self.vocab));
        }
        if self.repeats < 1 {
            return bad("repeats must be >= 1".into());
        }
        if self.vocab > self.model_vocab_size {
            return bad(format!(
                "vocab {} exceeds model vocabulary {}",
                self.vocab, self.model_vocab_size
            ));
        }
        if self.order != Order::First
            && (self.chunks < 1 || self.chunks as u128 > factorial(self.vocab)) {
                return bad(format!(
                    "chunks must lie in [1, {}!], got {}",
                    self.vocab, self.chunks
                ));
            }
        if self.order == Order::Third
            && (self.super_chunks < 1 || self.super_chunks as u128 > factorial(self.chunks))
        {
            return bad(format!(
                "super_chunks must lie in [1, {}!], got {}",
                self.chunks, self.super_chunks
            ));
        }
        Ok(())
    }
}

/// `n!`, saturating at `u128::MAX`.
pub fn factorial(n: usize) -> u128 {
    (1..=n as u128).try_fold(1u128, |acc, k| acc.checked_mul(k)).unwrap_or(u128::MAX)
}

/// One unique permutation at a hierarchy level. Second-level content holds
/// token ids; third-level content holds 2nd-order type ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub level: ChunkLevel,
    pub type_id: usize,
    pub content: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAnnotation {
    pub position: usize,
    pub token: TokenId,
    pub chunk2_type: Option<usize>,
    pub chunk2_pos: usize,
    pub chunk3_type: Option<usize>,
    pub chunk3_pos: Option<usize>,
    pub is_chunk2_start: bool,
    pub is_chunk3_start: bool,
    pub predictable: bool,
    /// Ground-truth next token, when it is determined.
    pub target: Option<TokenId>,
    pub same_as_prev_chunk2: Option<bool>,
    pub same_as_prev_chunk3: Option<bool>,
    /// Positions `p <= position` with `token[p-1] == token` inside the same
    /// 2nd-order chunk type.
    pub correct_successor_positions_2nd: Vec<usize>,
    /// As above, restricted to the same 3rd-order chunk type at the same
    /// slot within it.
    pub correct_successor_positions_3rd: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedSequence {
    pub spec: SequenceSpec,
    /// Length of one 2nd-order chunk in tokens.
    pub chunk_len: usize,
    pub vocab: Vec<TokenId>,
    pub chunks2: Vec<Chunk>,
    pub chunks3: Vec<Chunk>,
    pub tokens: Vec<TokenId>,
    pub annotations: Vec<TokenAnnotation>,
    /// 2nd-order type of every chunk occurrence, in sequence order.
    pub chunk2_schedule: Vec<usize>,
    /// 3rd-order type of every super-chunk occurrence (third order only).
    pub chunk3_schedule: Vec<usize>,
}

impl GeneratedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn has_third_level(&self) -> bool {
        !self.chunks3.is_empty()
    }

    /// Length of one 3rd-order chunk in tokens.
    pub fn super_len(&self) -> Option<usize> {
        self.has_third_level()
            .then(|| self.chunk_len * self.chunks3[0].content.len())
    }

    pub fn predictable_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.annotations
            .iter()
            .filter(|a| a.predictable)
            .map(|a| a.position)
    }

    /// How many earlier occurrences the chunk type at `position` has had
    /// (0 for its first occurrence).
    pub fn repetition_index(&self, position: usize) -> usize {
        let occurrence = position / self.chunk_len;
        let ty = self.chunk2_schedule[occurrence];
        self.chunk2_schedule[..occurrence]
            .iter()
            .filter(|&&t| t == ty)
            .count()
    }

    /// Successor positions of the token at `t`: every `p <= t` with
    /// `token[p-1] == token[t]`.
    pub fn successor_positions(&self, t: usize) -> Vec<usize> {
        let tok = self.tokens[t];
        (1..=t).filter(|&p| self.tokens[p - 1] == tok).collect()
    }
}

/// `count` distinct token ids drawn uniformly without replacement from
/// `0..model_vocab_size`, in random order.
pub fn sample_vocab(rng: &mut LabRng, model_vocab_size: usize, count: usize) -> Result<Vec<TokenId>> {
    if count > model_vocab_size {
        return Err(LabError::InvalidSpec(format!(
            "cannot sample {count} distinct tokens from a vocabulary of {model_vocab_size}"
        )));
    }
    // `index::sample` does not promise a uniformly random order, so shuffle.
    let mut out: Vec<TokenId> = rand::seq::index::sample(rng, model_vocab_size, count)
        .into_iter()
        .map(|i| i as TokenId)
        .collect();
    out.shuffle(rng);
    Ok(out)
}

/// `count` pairwise-distinct random permutations of `items`.
pub fn gen_chunks(items: &[u32], count: usize, level: ChunkLevel, rng: &mut LabRng) -> Result<Vec<Chunk>> {
    let available = factorial(items.len());
    if count as u128 > available {
        return Err(LabError::InvalidSpec(format!(
            "{count} distinct permutations requested but only {available} exist"
        )));
    }
    let perms: Vec<Vec<u32>> = if available <= 40_320 && (count as u128) * 2 > available {
        // Dense request: enumerate and subsample rather than reject.
        let mut all = all_permutations(items);
        all.shuffle(rng);
        all.truncate(count);
        all
    } else {
        let mut seen = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let mut p = items.to_vec();
            p.shuffle(rng);
            if seen.insert(p.clone()) {
                out.push(p);
            }
        }
        out
    };
    Ok(perms
        .into_iter()
        .enumerate()
        .map(|(type_id, content)| Chunk {
            level,
            type_id,
            content,
        })
        .collect())
}

fn all_permutations(items: &[u32]) -> Vec<Vec<u32>> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    let mut out = Vec::new();
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        // Lexicographic successor of `idx`.
        let Some(i) = (1..idx.len()).rev().find(|&i| idx[i - 1] < idx[i]) else {
            break;
        };
        let j = (i..idx.len()).rev().find(|&j| idx[j] > idx[i - 1]).unwrap();
        idx.swap(i - 1, j);
        idx[i..].reverse();
    }
    out
}

fn shuffled_multiset(types: usize, repeats: usize, rng: &mut LabRng) -> Vec<usize> {
    let mut schedule: Vec<usize> = (0..types)
        .flat_map(|t| std::iter::repeat_n(t, repeats))
        .collect();
    schedule.shuffle(rng);
    schedule
}

/// Generate the sequence described by `spec`, seeded from `spec.seed`.
pub fn generate(spec: &SequenceSpec) -> Result<GeneratedSequence> {
    let mut rng = rng_from_seed(spec.seed);
    match spec.order {
        Order::First => gen_first_order(spec, &mut rng),
        Order::Second => gen_second_order(spec, &mut rng),
        Order::Third => gen_third_order(spec, &mut rng),
    }
}

pub fn gen_first_order(spec: &SequenceSpec, rng: &mut LabRng) -> Result<GeneratedSequence> {
    expect_order(spec, Order::First)?;
    spec.validate()?;
    let vocab = sample_vocab(rng, spec.model_vocab_size, spec.vocab)?;
    let chunks2 = gen_chunks(&vocab, 1, ChunkLevel::Second, rng)?;
    let schedule = vec![0; spec.repeats];
    Ok(assemble(spec.clone(), spec.vocab, vocab, chunks2, Vec::new(), schedule, Vec::new(), None))
}

pub fn gen_second_order(spec: &SequenceSpec, rng: &mut LabRng) -> Result<GeneratedSequence> {
    expect_order(spec, Order::Second)?;
    spec.validate()?;
    let vocab = sample_vocab(rng, spec.model_vocab_size, spec.vocab)?;
    let chunks2 = gen_chunks(&vocab, spec.chunks, ChunkLevel::Second, rng)?;
    let schedule = shuffled_multiset(spec.chunks, spec.repeats, rng);
    Ok(assemble(spec.clone(), spec.vocab, vocab, chunks2, Vec::new(), schedule, Vec::new(), None))
}

pub fn gen_third_order(spec: &SequenceSpec, rng: &mut LabRng) -> Result<GeneratedSequence> {
    expect_order(spec, Order::Third)?;
    spec.validate()?;
    let vocab = sample_vocab(rng, spec.model_vocab_size, spec.vocab)?;
    let chunks2 = gen_chunks(&vocab, spec.chunks, ChunkLevel::Second, rng)?;
    let type_ids: Vec<u32> = (0..spec.chunks as u32).collect();
    let chunks3 = gen_chunks(&type_ids, spec.super_chunks, ChunkLevel::Third, rng)?;
    let schedule3 = shuffled_multiset(spec.super_chunks, spec.repeats, rng);
    let schedule2 = schedule3
        .iter()
        .flat_map(|&s| chunks3[s].content.iter().map(|&t| t as usize))
        .collect();
    Ok(assemble(spec.clone(), spec.vocab, vocab, chunks2, chunks3, schedule2, schedule3, None))
}

/// Two contexts `c1·X·A` and `c2·X·B` followed by the query `c1·X`, whose
/// correct continuation is `A`. With `counterbalanced` the two examples
/// appear in the opposite order. Each example is a 4-token chunk
/// (2 context tokens, the shared token, its successor).
pub fn gen_ambiguous_successor(
    spec: &SequenceSpec,
    counterbalanced: bool,
    rng: &mut LabRng,
) -> Result<GeneratedSequence> {
    if spec.vocab < 5 {
        return Err(LabError::InvalidSpec(format!(
            "ambiguous-successor task needs vocab >= 5, got {}",
            spec.vocab
        )));
    }
    if spec.vocab > spec.model_vocab_size {
        return Err(LabError::InvalidSpec("vocab exceeds model vocabulary".into()));
    }
    let vocab = sample_vocab(rng, spec.model_vocab_size, spec.vocab)?;
    let (shared, a, b) = (vocab[0], vocab[1], vocab[2]);
    let spare = &vocab[3..];
    let pick_pair = |rng: &mut LabRng| {
        let i = rng.gen_range(0..spare.len());
        let mut j = rng.gen_range(0..spare.len() - 1);
        if j >= i {
            j += 1;
        }
        [spare[i], spare[j]]
    };
    let c1 = pick_pair(rng);
    let mut c2 = pick_pair(rng);
    while c2 == c1 {
        c2 = pick_pair(rng);
    }
    let chunks2 = vec![
        Chunk {
            level: ChunkLevel::Second,
            type_id: 0,
            content: vec![c1[0], c1[1], shared, a],
        },
        Chunk {
            level: ChunkLevel::Second,
            type_id: 1,
            content: vec![c2[0], c2[1], shared, b],
        },
    ];
    let schedule = if counterbalanced {
        vec![1, 0, 0]
    } else {
        vec![0, 1, 0]
    };
    let mut spec = spec.clone();
    spec.order = Order::Second;
    spec.chunks = 2;
    spec.repeats = 1;
    Ok(assemble(spec, 4, vocab, chunks2, Vec::new(), schedule, Vec::new(), Some(11)))
}

/// A random string of `half_length` distinct tokens, repeated twice.
pub fn gen_induction_probe_sequence(
    vocab_size: usize,
    half_length: usize,
    rng: &mut LabRng,
) -> Result<Vec<TokenId>> {
    if half_length < 2 {
        return Err(LabError::Input(format!(
            "probe half-length must be >= 2, got {half_length}"
        )));
    }
    // Sampling without replacement is the same distribution as resampling
    // uniform strings until all tokens are distinct.
    let first = sample_vocab(rng, vocab_size, half_length)?;
    Ok(first.iter().chain(first.iter()).copied().collect())
}

fn expect_order(spec: &SequenceSpec, order: Order) -> Result<()> {
    if spec.order != order {
        return Err(LabError::InvalidSpec(format!(
            "expected a {order:?}-order spec, got {:?}",
            spec.order
        )));
    }
    Ok(())
}

/// `unique[c][k]`: the first `k + 1` elements of chunk `c` differ from the
/// first `k + 1` elements of every other chunk.
fn unique_prefixes(chunks: &[Chunk]) -> Vec<Vec<bool>> {
    chunks
        .iter()
        .map(|c| {
            (0..c.content.len())
                .map(|k| {
                    chunks
                        .iter()
                        .filter(|o| o.type_id != c.type_id)
                        .all(|o| o.content[..=k] != c.content[..=k])
                })
                .collect()
        })
        .collect()
}

/// `seen[i]`: the type at schedule slot `i` occurred at an earlier slot.
fn seen_before(schedule: &[usize]) -> Vec<bool> {
    let mut seen = HashSet::new();
    schedule.iter().map(|&t| !seen.insert(t)).collect()
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    spec: SequenceSpec,
    chunk_len: usize,
    vocab: Vec<TokenId>,
    chunks2: Vec<Chunk>,
    chunks3: Vec<Chunk>,
    chunk2_schedule: Vec<usize>,
    chunk3_schedule: Vec<usize>,
    truncate_to: Option<usize>,
) -> GeneratedSequence {
    let mut tokens: Vec<TokenId> = chunk2_schedule
        .iter()
        .flat_map(|&c| chunks2[c].content.iter().copied())
        .collect();
    if let Some(n) = truncate_to {
        tokens.truncate(n);
    }
    let annotations = annotate(
        &spec,
        chunk_len,
        &tokens,
        &chunks2,
        &chunks3,
        &chunk2_schedule,
        &chunk3_schedule,
    );
    GeneratedSequence {
        spec,
        chunk_len,
        vocab,
        chunks2,
        chunks3,
        tokens,
        annotations,
        chunk2_schedule,
        chunk3_schedule,
    }
}

/// Recomputes the structural annotations of `seq` from its chunk sets and
/// schedules: a position is predictable when the chunk prefix seen so far
/// singles out a chunk type that occurred earlier and the next token stays
/// in that chunk, or (3rd order) at a 2nd-order boundary whose 3rd-order
/// chunk is singled out by its 2nd-order prefix and occurred earlier.
pub fn annotate_predictability(mut seq: GeneratedSequence) -> GeneratedSequence {
    seq.annotations = annotate(
        &seq.spec,
        seq.chunk_len,
        &seq.tokens,
        &seq.chunks2,
        &seq.chunks3,
        &seq.chunk2_schedule,
        &seq.chunk3_schedule,
    );
    seq
}

fn annotate(
    spec: &SequenceSpec,
    chunk_len: usize,
    tokens: &[TokenId],
    chunks2: &[Chunk],
    chunks3: &[Chunk],
    schedule2: &[usize],
    schedule3: &[usize],
) -> Vec<TokenAnnotation> {
    let third = !chunks3.is_empty();
    let slots = if third { chunks3[0].content.len() } else { 1 };
    let super_len = chunk_len * slots;

    let unique2 = unique_prefixes(chunks2);
    let unique3 = unique_prefixes(chunks3);
    let seen2 = seen_before(schedule2);
    let seen3 = seen_before(schedule3);

    // Earlier positions q, keyed by context, whose successor q + 1 is a
    // candidate for later queries.
    let mut by_type2: HashMap<(TokenId, usize), Vec<usize>> = HashMap::new();
    let mut by_type3: HashMap<(TokenId, usize, usize), Vec<usize>> = HashMap::new();

    let mut out = Vec::with_capacity(tokens.len());
    for (t, &token) in tokens.iter().enumerate() {
        let occ2 = t / chunk_len;
        let k = t % chunk_len;
        let c2 = schedule2[occ2];
        let (c3, slot, occ3) = if third {
            let occ3 = t / super_len;
            (Some(schedule3[occ3]), Some((t % super_len) / chunk_len), occ3)
        } else {
            (None, None, 0)
        };

        let content = &chunks2[c2].content;
        let (predictable, structural_target) = match spec.order {
            Order::First => (occ2 >= 1, Some(content[(k + 1) % chunk_len])),
            _ => {
                if k + 1 < chunk_len {
                    (unique2[c2][k] && seen2[occ2], Some(content[k + 1]))
                } else if let (Some(c3), Some(j)) = (c3, slot) {
                    if j + 1 < slots {
                        let next_type = chunks3[c3].content[j + 1] as usize;
                        (
                            unique3[c3][j] && seen3[occ3],
                            Some(chunks2[next_type].content[0]),
                        )
                    } else {
                        (false, None)
                    }
                } else {
                    (false, None)
                }
            }
        };
        let target = if predictable {
            structural_target
        } else {
            tokens.get(t + 1).copied()
        };

        let correct2 = by_type2
            .get(&(token, c2))
            .map(|qs| qs.iter().map(|q| q + 1).collect())
            .unwrap_or_default();
        let correct3 = match (c3, slot) {
            (Some(c3), Some(j)) => by_type3
                .get(&(token, c3, j))
                .map(|qs| qs.iter().map(|q| q + 1).collect())
                .unwrap_or_default(),
            _ => Vec::new(),
        };

        out.push(TokenAnnotation {
            position: t,
            token,
            chunk2_type: Some(c2),
            chunk2_pos: k,
            chunk3_type: c3,
            chunk3_pos: slot,
            is_chunk2_start: k == 0,
            is_chunk3_start: third && t % super_len == 0,
            predictable,
            target,
            same_as_prev_chunk2: (occ2 > 0).then(|| schedule2[occ2] == schedule2[occ2 - 1]),
            same_as_prev_chunk3: (third && occ3 > 0)
                .then(|| schedule3[occ3] == schedule3[occ3 - 1]),
            correct_successor_positions_2nd: correct2,
            correct_successor_positions_3rd: correct3,
        });

        by_type2.entry((token, c2)).or_default().push(t);
        if let (Some(c3), Some(j)) = (c3, slot) {
            by_type3.entry((token, c3, j)).or_default().push(t);
        }
    }
    out
}
