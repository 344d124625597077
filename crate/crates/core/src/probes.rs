//! Linear decoding of latent context from per-head outputs: chunk-averaged
//! head outputs, an L2-regularized logistic probe, and a sweep over heads.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::metrics::ContextLevel;
use crate::model::{AblationMask, AttnMatrix, Capture, ForwardTrace, HeadId, ModelParameters};
use crate::rng::rng_from_seed;
use crate::seqgen::GeneratedSequence;

/// Chunk-mean features with "same type as the previous chunk" labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeDataset {
    pub dim: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    /// Source sequence of each example.
    pub groups: Vec<usize>,
}

impl ProbeDataset {
    pub fn new(dim: usize) -> Self {
        ProbeDataset {
            dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Add one sequence's chunk occurrences at `level`, given per-position
    /// feature rows (`seq.len() × dim`, row-major). The first occurrence is
    /// dropped because it has no predecessor.
    pub fn push_sequence(&mut self, rows: &[f32], seq: &GeneratedSequence, level: ContextLevel, group: usize) -> Result<()> {
        if rows.len() != seq.len() * self.dim {
            return Err(LabError::Input(format!(
                "{} feature values for {} positions of dimension {}",
                rows.len(),
                seq.len(),
                self.dim
            )));
        }
        let (span, schedule) = match level {
            ContextLevel::Second => (seq.chunk_len, &seq.chunk2_schedule),
            ContextLevel::Third => match seq.super_len() {
                Some(s) => (s, &seq.chunk3_schedule),
                None => return Err(LabError::Input("3rd-order probe on a sequence without 3rd-order chunks".into())),
            },
        };
        for (i, w) in schedule.windows(2).enumerate() {
            let start = (i + 1) * span;
            let mut mean = vec![0.0; self.dim];
            for t in start..start + span {
                for (m, &x) in mean.iter_mut().zip(&rows[t * self.dim..(t + 1) * self.dim]) {
                    *m += x as f64;
                }
            }
            mean.iter_mut().for_each(|m| *m /= span as f64);
            self.features.push(mean);
            self.labels.push(w[0] == w[1]);
            self.groups.push(group);
        }
        Ok(())
    }
}

/// `z_i = Σ_j a_ij v_j` from captured attention and values.
pub fn reconstruct_head_output(attn: &AttnMatrix, values: &[f32], d_head: usize) -> Vec<f32> {
    let n = attn.n;
    let mut z = vec![0.0f32; n * d_head];
    for i in 0..n {
        let row = attn.row(i);
        let out = &mut z[i * d_head..(i + 1) * d_head];
        for (j, &a) in row.iter().enumerate().take(i + 1) {
            for (o, &v) in out.iter_mut().zip(&values[j * d_head..(j + 1) * d_head]) {
                *o += a * v;
            }
        }
    }
    z
}

/// Probe features for one head of one traced sequence.
pub fn build_probe_dataset(
    traces: &[ForwardTrace],
    seqs: &[GeneratedSequence],
    head: HeadId,
    level: ContextLevel,
) -> Result<ProbeDataset> {
    if traces.len() != seqs.len() {
        return Err(LabError::Input(format!("{} traces for {} sequences", traces.len(), seqs.len())));
    }
    let mut ds = ProbeDataset::new(traces.first().map_or(0, |t| t.d_head));
    for (g, (trace, seq)) in traces.iter().zip(seqs).enumerate() {
        let z = trace
            .head_output(head)
            .ok_or_else(|| LabError::Input(format!("head outputs of {head} were not captured")))?;
        ds.push_sequence(z, seq, level, g)?;
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub l2_strength: f64,
    pub train_fraction: f64,
    pub max_iterations: usize,
    pub convergence_tolerance: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2_strength: 1.0,
            train_fraction: 0.75,
            max_iterations: 5000,
            convergence_tolerance: 1e-6,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(LabError::Config(format!("train_fraction {} must lie in (0, 1)", self.train_fraction)));
        }
        if !(self.l2_strength >= 0.0) || !self.l2_strength.is_finite() {
            return Err(LabError::Config(format!("l2_strength {} must be finite and >= 0", self.l2_strength)));
        }
        if self.max_iterations == 0 || !(self.convergence_tolerance > 0.0) {
            return Err(LabError::Config("probe solver needs max_iterations >= 1 and a positive tolerance".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub positive: usize,
    pub negative: usize,
}

impl ClassCounts {
    fn of<'a>(labels: impl Iterator<Item = &'a bool>) -> Self {
        let mut c = ClassCounts::default();
        for &l in labels {
            if l {
                c.positive += 1;
            } else {
                c.negative += 1;
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// `None` for the embedding-layer baseline.
    pub head: Option<HeadId>,
    pub level: ContextLevel,
    pub balanced_accuracy: f64,
    pub train_counts: ClassCounts,
    pub test_counts: ClassCounts,
    pub converged: bool,
    pub iterations: usize,
    /// Mean logistic loss on the training split, without the penalty.
    pub train_loss: f64,
}

/// A fitted probe in standardized feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LogisticProbe {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.bias
            + x.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.weights)
                .map(|(((x, m), s), w)| w * (x - m) / s)
                .sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.score(x) > 0.0
    }
}

/// Mean of the per-class recalls. Errors unless both classes occur.
pub fn balanced_accuracy(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(LabError::Input(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let (mut tp, mut tn) = (0usize, 0usize);
    let c = ClassCounts::of(labels.iter());
    if c.positive == 0 || c.negative == 0 {
        return Err(LabError::DegenerateSplit("balanced accuracy needs both classes".into()));
    }
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    Ok((tp as f64 / c.positive as f64 + tn as f64 / c.negative as f64) / 2.0)
}

fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss and its gradient (weights then bias) on standardized rows.
fn data_loss(x: &[Vec<f64>], y: &[bool], w: &[f64], b: f64, grad: Option<&mut [f64]>) -> f64 {
    let n = x.len() as f64;
    let mut loss = 0.0;
    let mut g = grad;
    if let Some(g) = g.as_deref_mut() {
        g.fill(0.0);
    }
    for (row, &label) in x.iter().zip(y) {
        let s = b + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        let yf = label as u8 as f64;
        loss += softplus(s) - yf * s;
        if let Some(g) = g.as_deref_mut() {
            let r = (sigmoid(s) - yf) / n;
            let (gw, gb) = g.split_at_mut(w.len());
            for (gi, xi) in gw.iter_mut().zip(row) {
                *gi += r * xi;
            }
            gb[0] += r;
        }
    }
    loss / n
}

struct Fit {
    weights: Vec<f64>,
    bias: f64,
    converged: bool,
    iterations: usize,
}

/// Gradient descent with Armijo backtracking on
/// `(Σ loss + λ/2 ‖w‖²) / n`, the penalty scaling under which λ = 1 is the
/// usual unit inverse-regularization default.
fn fit_logistic(x: &[Vec<f64>], y: &[bool], config: &ProbeConfig) -> Fit {
    let d = x.first().map_or(0, Vec::len);
    let lambda = config.l2_strength / (2.0 * x.len() as f64);
    let objective = |p: &[f64], grad: Option<&mut [f64]>| {
        let (w, b) = p.split_at(d);
        let mut loss = data_loss(x, y, w, b[0], grad);
        loss += lambda * w.iter().map(|v| v * v).sum::<f64>();
        loss
    };
    let mut p = vec![0.0; d + 1];
    let mut g = vec![0.0; d + 1];
    let mut trial = vec![0.0; d + 1];
    let mut step = 1.0;
    let mut f = objective(&p, Some(&mut g));
    for (gi, wi) in g[..d].iter_mut().zip(&p[..d]) {
        *gi += 2.0 * lambda * wi;
    }
    for it in 0..config.max_iterations {
        let gnorm2: f64 = g.iter().map(|v| v * v).sum();
        if gnorm2.sqrt() < config.convergence_tolerance {
            return Fit {
                bias: p[d],
                weights: p[..d].to_vec(),
                converged: true,
                iterations: it,
            };
        }
        step *= 2.0;
        loop {
            for ((t, pi), gi) in trial.iter_mut().zip(&p).zip(&g) {
                *t = pi - step * gi;
            }
            let ft = objective(&trial, None);
            if ft <= f - 0.5 * step * gnorm2 || step < 1e-20 {
                break;
            }
            step *= 0.5;
        }
        std::mem::swap(&mut p, &mut trial);
        f = objective(&p, Some(&mut g));
        for (gi, wi) in g[..d].iter_mut().zip(&p[..d]) {
            *gi += 2.0 * lambda * wi;
        }
    }
    let converged = g.iter().map(|v| v * v).sum::<f64>().sqrt() < config.convergence_tolerance;
    Fit {
        bias: p[d],
        weights: p[..d].to_vec(),
        converged,
        iterations: config.max_iterations,
    }
}

/// Split groups into train and test sides; returns per-example membership.
pub fn group_split(groups: &[usize], train_fraction: f64, seed: u64) -> Result<Vec<bool>> {
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(LabError::DegenerateSplit(format!("{} group(s); need at least 2", ids.len())));
    }
    ids.shuffle(&mut rng_from_seed(seed));
    let n_train = ((ids.len() as f64 * train_fraction).round() as usize).clamp(1, ids.len() - 1);
    let train: std::collections::BTreeSet<usize> = ids[..n_train].iter().copied().collect();
    Ok(groups.iter().map(|g| train.contains(g)).collect())
}

/// Fit a probe on a group-wise split and score it on the held-out side.
pub fn train_probe(ds: &ProbeDataset, config: &ProbeConfig) -> Result<(LogisticProbe, ProbeReport)> {
    config.validate()?;
    let in_train = group_split(&ds.groups, config.train_fraction, config.seed)?;
    let pick = |side: bool| -> (Vec<&Vec<f64>>, Vec<bool>) {
        ds.features
            .iter()
            .zip(&ds.labels)
            .zip(&in_train)
            .filter(|(_, &t)| t == side)
            .map(|((x, &y), _)| (x, y))
            .unzip()
    };
    let (train_x, train_y) = pick(true);
    let (test_x, test_y) = pick(false);
    let train_counts = ClassCounts::of(train_y.iter());
    let test_counts = ClassCounts::of(test_y.iter());
    if train_counts.positive < 2 || train_counts.negative < 2 {
        return Err(LabError::DegenerateSplit(format!(
            "train split has {} positive / {} negative examples",
            train_counts.positive, train_counts.negative
        )));
    }
    if test_counts.positive == 0 || test_counts.negative == 0 {
        return Err(LabError::DegenerateSplit(format!(
            "test split has {} positive / {} negative examples",
            test_counts.positive, test_counts.negative
        )));
    }

    let d = ds.dim;
    let n = train_x.len() as f64;
    let mut mean = vec![0.0; d];
    for x in &train_x {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; d];
    for x in &train_x {
        for ((s, v), m) in scale.iter_mut().zip(x.iter()).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    // constant features stay at zero after centring
    scale.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let standardize = |x: &Vec<f64>| -> Vec<f64> { x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect() };
    let train_z: Vec<Vec<f64>> = train_x.iter().map(|x| standardize(x)).collect();

    let fit = fit_logistic(&train_z, &train_y, config);
    let train_loss = data_loss(&train_z, &train_y, &fit.weights, fit.bias, None);
    let probe = LogisticProbe {
        weights: fit.weights,
        bias: fit.bias,
        mean,
        scale,
    };
    let preds: Vec<bool> = test_x.iter().map(|x| probe.predict(x)).collect();
    let report = ProbeReport {
        head: None,
        level: ContextLevel::Second,
        balanced_accuracy: balanced_accuracy(&preds, &test_y)?,
        train_counts,
        test_counts,
        converged: fit.converged,
        iterations: fit.iterations,
        train_loss,
    };
    Ok((probe, report))
}

/// Per-head probe reports, the embedding-layer baseline and per-layer maxima.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSweep {
    pub level: ContextLevel,
    pub n_sequences: usize,
    pub heads: Vec<ProbeReport>,
    pub embedding: ProbeReport,
    pub layer_max: Vec<f64>,
}

impl ProbeSweep {
    pub fn head(&self, head: HeadId) -> Option<&ProbeReport> {
        self.heads.iter().find(|r| r.head == Some(head))
    }

    pub fn best(&self) -> Option<&ProbeReport> {
        self.heads
            .iter()
            .fold(None, |best: Option<&ProbeReport>, r| match best {
                Some(b) if b.balanced_accuracy >= r.balanced_accuracy => Some(b),
                _ => Some(r),
            })
    }

    pub fn to_csv(&self) -> String {
        let level = match self.level {
            ContextLevel::Second => "second",
            ContextLevel::Third => "third",
        };
        let mut out = String::from("layer,head,level,balanced_accuracy,converged,train_pos,train_neg,test_pos,test_neg\n");
        let row = |out: &mut String, layer: String, head: String, r: &ProbeReport| {
            out.push_str(&format!(
                "{layer},{head},{level},{:.6},{},{},{},{},{}\n",
                r.balanced_accuracy,
                r.converged,
                r.train_counts.positive,
                r.train_counts.negative,
                r.test_counts.positive,
                r.test_counts.negative
            ));
        };
        row(&mut out, "embedding".into(), String::new(), &self.embedding);
        for r in &self.heads {
            let h = r.head.expect("head report");
            row(&mut out, h.layer.to_string(), h.head.to_string(), r);
        }
        out
    }
}

/// Probe every head of `params` (and the embedding) on `seqs`.
pub fn sweep_heads(params: &ModelParameters, seqs: &[GeneratedSequence], level: ContextLevel, config: &ProbeConfig) -> Result<ProbeSweep> {
    if seqs.len() < 2 {
        return Err(LabError::Input(format!("probe sweep needs >= 2 sequences, got {}", seqs.len())));
    }
    config.validate()?;
    let capture = Capture {
        head_outputs: true,
        residuals: true,
        ..Capture::none()
    };
    let traces = seqs
        .par_iter()
        .map(|s| params.forward(&s.tokens, &AblationMask::none(), capture))
        .collect::<Result<Vec<_>>>()?;

    let mut emb = ProbeDataset::new(params.config.d_model);
    for (g, (trace, seq)) in traces.iter().zip(seqs).enumerate() {
        emb.push_sequence(trace.embedding.as_deref().expect("embedding captured"), seq, level, g)?;
    }
    let (_, mut embedding) = train_probe(&emb, config)?;
    embedding.level = level;

    let heads = params
        .config
        .all_heads()
        .into_par_iter()
        .map(|head| {
            let ds = build_probe_dataset(&traces, seqs, head, level)?;
            let (_, mut r) = train_probe(&ds, config)?;
            r.head = Some(head);
            r.level = level;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut layer_max = vec![f64::NEG_INFINITY; params.config.n_layers];
    for r in &heads {
        let l = r.head.unwrap().layer;
        layer_max[l] = layer_max[l].max(r.balanced_accuracy);
    }
    Ok(ProbeSweep {
        level,
        n_sequences: seqs.len(),
        heads,
        embedding,
        layer_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::rng::{derive_indexed_seed, LabRng};
    use crate::seqgen::{generate, SequenceSpec};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_dataset(rng: &mut LabRng, groups: usize, per_group: usize, dim: usize, label: impl Fn(&[f64], &mut LabRng) -> bool) -> ProbeDataset {
        let mut ds = ProbeDataset::new(dim);
        for g in 0..groups {
            for _ in 0..per_group {
                let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                ds.labels.push(label(&x, rng));
                ds.features.push(x);
                ds.groups.push(g);
            }
        }
        ds
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[true, false, true], &[true, false, true]).unwrap(), 1.0);
        let labels = [true, false, false, false, false];
        assert_eq!(balanced_accuracy(&[false; 5], &labels).unwrap(), 0.5);
        // recalls 0.9 and 0.7
        let mut labels = vec![true; 10];
        labels.extend([false; 10]);
        let mut preds = vec![true; 9];
        preds.extend([false; 1 + 7]);
        preds.extend([true; 3]);
        assert!((balanced_accuracy(&preds, &labels).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(balanced_accuracy(&[true], &[true]), Err(LabError::DegenerateSplit(_))));
    }

    #[test]
    fn dataset_counts_and_labels() {
        let seq = generate(&SequenceSpec::default_second().with_seed(3)).unwrap();
        let mut ds = ProbeDataset::new(1);
        let rows: Vec<f32> = (0..seq.len()).map(|t| t as f32).collect();
        ds.push_sequence(&rows, &seq, ContextLevel::Second, 0).unwrap();
        assert_eq!(ds.len(), 31);
        for (i, (x, &l)) in ds.features.iter().zip(&ds.labels).enumerate() {
            // mean of positions in chunk i+1
            assert!((x[0] - ((i + 1) * 8) as f64 - 3.5).abs() < 1e-9);
            assert_eq!(l, seq.chunk2_schedule[i] == seq.chunk2_schedule[i + 1]);
        }
        let third = generate(&SequenceSpec::default_third().with_seed(3)).unwrap();
        let mut d3 = ProbeDataset::new(1);
        let rows: Vec<f32> = vec![0.0; third.len()];
        d3.push_sequence(&rows, &third, ContextLevel::Third, 0).unwrap();
        assert_eq!(d3.len(), 31);
        assert!(ProbeDataset::new(1).push_sequence(&vec![0.0; seq.len()], &seq, ContextLevel::Third, 0).is_err());
    }

    #[test]
    fn positive_rate_matches_shuffle_expectation() {
        // a uniform shuffle of 4 types × 8 has 4·8·7/31 equal neighbours in
        // expectation, i.e. 7/31 of the 31 adjacent pairs
        let mut pos = 0usize;
        let mut total = 0usize;
        for seed in 0..2000 {
            let seq = generate(&SequenceSpec::default_second().with_seed(seed)).unwrap();
            let mut ds = ProbeDataset::new(1);
            ds.push_sequence(&vec![0.0; seq.len()], &seq, ContextLevel::Second, 0).unwrap();
            pos += ds.labels.iter().filter(|&&l| l).count();
            total += ds.len();
        }
        let rate = pos as f64 / total as f64;
        assert!((rate - 7.0 / 31.0).abs() < 0.01, "{rate}");
    }

    #[test]
    fn separable_features_are_decoded() {
        let mut rng = rng_from_seed(5);
        let w: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let ds = gaussian_dataset(&mut rng, 40, 25, 8, |x, _| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() > 0.0);
        let (_, r) = train_probe(&ds, &ProbeConfig::default()).unwrap();
        assert!(r.balanced_accuracy >= 0.99, "{}", r.balanced_accuracy);
        assert!(r.converged);
    }

    #[test]
    fn shuffled_labels_score_chance() {
        let mut total = 0.0;
        for seed in 0..20 {
            let mut rng = rng_from_seed(derive_indexed_seed(11, "null", seed));
            let ds = gaussian_dataset(&mut rng, 64, 31, 32, |_, r| r.gen_bool(7.0 / 31.0));
            let cfg = ProbeConfig {
                seed,
                ..ProbeConfig::default()
            };
            total += train_probe(&ds, &cfg).unwrap().1.balanced_accuracy;
        }
        let mean = total / 20.0;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
    }

    #[test]
    fn huge_penalty_gives_constant_predictions() {
        let mut rng = rng_from_seed(8);
        let ds = gaussian_dataset(&mut rng, 20, 20, 4, |x, _| x[0] > 0.5);
        let cfg = ProbeConfig {
            l2_strength: 1e8,
            ..ProbeConfig::default()
        };
        let (probe, r) = train_probe(&ds, &cfg).unwrap();
        assert!(probe.weights.iter().all(|w| w.abs() < 1e-6));
        assert_eq!(r.balanced_accuracy, 0.5);
    }

    #[test]
    fn unpenalized_fit_has_lowest_training_loss() {
        let mut rng = rng_from_seed(9);
        let ds = gaussian_dataset(&mut rng, 20, 20, 4, |x, r| x[0] + r.sample::<f64, _>(StandardNormal) > 0.0);
        let loss = |l2| {
            train_probe(&ds, &ProbeConfig { l2_strength: l2, ..ProbeConfig::default() })
                .unwrap()
                .1
                .train_loss
        };
        let free = loss(0.0);
        for l2 in [1e-3, 0.1, 1.0, 10.0] {
            assert!(free <= loss(l2) + 1e-9);
        }
    }

    #[test]
    fn split_keeps_groups_whole_and_rejects_single_class() {
        let groups: Vec<usize> = (0..40).map(|i| i / 5).collect();
        let side = group_split(&groups, 0.75, 3).unwrap();
        for g in 0..8 {
            let s: Vec<bool> = (0..40).filter(|i| groups[*i] == g).map(|i| side[i]).collect();
            assert!(s.iter().all(|&x| x == s[0]));
        }
        assert_eq!(side.iter().filter(|&&s| s).count(), 30);
        assert!(group_split(&[0, 0, 0], 0.75, 0).is_err());

        let mut rng = rng_from_seed(0);
        let ds = gaussian_dataset(&mut rng, 8, 5, 2, |_, _| true);
        assert!(matches!(train_probe(&ds, &ProbeConfig::default()), Err(LabError::DegenerateSplit(_))));
    }

    #[test]
    fn head_outputs_are_reconstructed_from_attention_and_values() {
        let config = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_mlp: 32,
            vocab_size: 16,
            max_seq_len: 40,
            ..ModelConfig::default()
        };
        let params = init_model(&config, &mut rng_from_seed(1)).unwrap();
        let tokens: Vec<u32> = (0..40).map(|i| (i * 7 % 16) as u32).collect();
        let trace = params.forward(&tokens, &AblationMask::none(), Capture::all()).unwrap();
        for head in config.all_heads() {
            let z = reconstruct_head_output(trace.attention(head).unwrap(), trace.values(head).unwrap(), trace.d_head);
            let err = z
                .iter()
                .zip(trace.head_output(head).unwrap())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(err < 1e-5, "{head}: {err}");
        }
    }

    /// Feature of a head that reads the token one chunk back alongside the
    /// current token: the outer product of their one-hot codes.
    fn pair_features(seq: &GeneratedSequence, vocab: usize) -> Vec<f32> {
        let v = seq.chunk_len;
        let mut rows = vec![0.0f32; seq.len() * vocab * vocab];
        for t in v..seq.len() {
            let (a, b) = (seq.tokens[t] as usize, seq.tokens[t - v] as usize);
            rows[t * vocab * vocab + a * vocab + b] = 1.0;
        }
        rows
    }

    #[test]
    fn oracle_routing_features_decode_and_embeddings_do_not() {
        let vocab = 16;
        let mut routed = ProbeDataset::new(vocab * vocab);
        let mut embed = ProbeDataset::new(vocab + 256);
        for s in 0..64 {
            let seq = generate(&SequenceSpec::default_second().with_model_vocab(vocab).with_seed(s)).unwrap();
            routed.push_sequence(&pair_features(&seq, vocab), &seq, ContextLevel::Second, s as usize).unwrap();
            let mut rows = vec![0.0f32; seq.len() * (vocab + 256)];
            for t in 0..seq.len() {
                rows[t * (vocab + 256) + seq.tokens[t] as usize] = 1.0;
                rows[t * (vocab + 256) + vocab + t] = 1.0;
            }
            embed.push_sequence(&rows, &seq, ContextLevel::Second, s as usize).unwrap();
        }
        let cfg = ProbeConfig::default();
        let routed_acc = train_probe(&routed, &cfg).unwrap().1.balanced_accuracy;
        let embed_acc = train_probe(&embed, &cfg).unwrap().1.balanced_accuracy;
        assert!(routed_acc > 0.95, "{routed_acc}");
        assert!((embed_acc - 0.5).abs() < 0.1, "{embed_acc}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn balanced_accuracy_ignores_class_preserving_duplication(
            pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 2..50),
            k in 2usize..5,
        ) {
            let (p, l): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
            prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
            let a = balanced_accuracy(&p, &l).unwrap();
            let b = balanced_accuracy(&p.repeat(k), &l.repeat(k)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
