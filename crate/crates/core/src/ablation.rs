//! Zero-ablation experiments with matched random controls.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::metrics::{context_attention_accuracy, trace_prediction_accuracy, ContextAccuracy, ContextLevel};
use crate::model::{AblationMask, Capture, HeadId, ModelConfig, ModelParameters};
use crate::probes::ProbeReport;
use crate::rng::{derive_indexed_seed, rng_from_seed, LabRng};
use crate::seqgen::GeneratedSequence;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlPolicy {
    None,
    #[default]
    RandomMatched,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationExperiment {
    pub target: AblationMask,
    pub control_policy: ControlPolicy,
    /// Heads never drawn into a control set; the target is always excluded too.
    pub exclusion: AblationMask,
    /// Heads whose context-correct attention is tracked in every arm.
    pub observed: Vec<HeadId>,
    pub level: ContextLevel,
    pub n_samples: usize,
    pub seed: u64,
}

impl AblationExperiment {
    pub fn new(target: AblationMask, n_samples: usize, seed: u64) -> Self {
        AblationExperiment {
            target,
            control_policy: ControlPolicy::RandomMatched,
            exclusion: AblationMask::none(),
            observed: Vec::new(),
            level: ContextLevel::Second,
            n_samples,
            seed,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.target.validate(config)?;
        self.exclusion.validate(config)?;
        for &h in &self.observed {
            AblationMask::from_iter([h]).validate(config)?;
        }
        if self.n_samples == 0 {
            return Err(LabError::Input("ablation needs n_samples >= 1".into()));
        }
        if self.control_policy == ControlPolicy::RandomMatched {
            let excluded = self.control_exclusion();
            let free = config.n_total_heads() - excluded.len();
            if self.target.len() > free {
                return Err(LabError::Input(format!(
                    "cannot match {} target heads with controls from {free} eligible heads",
                    self.target.len()
                )));
            }
        }
        Ok(())
    }

    fn control_exclusion(&self) -> AblationMask {
        self.exclusion.heads().chain(self.target.heads()).collect()
    }
}

/// Heads whose probe balanced accuracy exceeds `threshold`.
pub fn select_context_heads(reports: &[ProbeReport], threshold: f64) -> AblationMask {
    reports
        .iter()
        .filter(|r| r.balanced_accuracy > threshold)
        .filter_map(|r| r.head)
        .collect()
}

/// `k` heads drawn uniformly without replacement from those not in `exclusion`.
pub fn random_control_set(config: &ModelConfig, k: usize, exclusion: &AblationMask, rng: &mut LabRng) -> Result<AblationMask> {
    let pool: Vec<HeadId> = config.all_heads().into_iter().filter(|h| !exclusion.contains(*h)).collect();
    if k > pool.len() {
        return Err(LabError::Input(format!("cannot sample {k} control heads from {} eligible heads", pool.len())));
    }
    Ok(pool.choose_multiple(rng, k).copied().collect())
}

/// One arm's measurements on one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSample {
    pub ablated: Vec<HeadId>,
    /// Accuracy on the sequence's predictable positions.
    pub accuracy: f64,
    /// Argmax context accuracy pooled over the observed heads.
    pub context_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub samples: Vec<ArmSample>,
    /// Pooled over all samples and observed heads.
    pub context: ContextAccuracy,
}

impl Arm {
    pub fn mean_accuracy(&self) -> f64 {
        self.samples.iter().map(|s| s.accuracy).sum::<f64>() / self.samples.len().max(1) as f64
    }

    /// Mean over samples with eligible queries.
    pub fn mean_context_accuracy(&self) -> Option<f64> {
        let v: Vec<f64> = self.samples.iter().filter_map(|s| s.context_accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub target: Vec<HeadId>,
    pub observed: Vec<HeadId>,
    pub level: ContextLevel,
    pub intact: Arm,
    pub ablated: Arm,
    pub control: Option<Arm>,
}

impl AblationResult {
    /// Intact minus target-ablated accuracy.
    pub fn accuracy_drop(&self) -> f64 {
        self.intact.mean_accuracy() - self.ablated.mean_accuracy()
    }

    /// How much further the target ablation lowers accuracy than the control.
    pub fn accuracy_margin(&self) -> Option<f64> {
        self.control.as_ref().map(|c| c.mean_accuracy() - self.ablated.mean_accuracy())
    }

    /// As [`Self::accuracy_margin`], for the observed heads' context accuracy.
    pub fn context_margin(&self) -> Option<f64> {
        let c = self.control.as_ref()?.mean_context_accuracy()?;
        Some(c - self.ablated.mean_context_accuracy()?)
    }

    /// One row per sample and arm.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,arm,accuracy,context_accuracy,ablated\n");
        let arms = [("intact", Some(&self.intact)), ("target", Some(&self.ablated)), ("control", self.control.as_ref())];
        for (name, arm) in arms {
            let Some(arm) = arm else { continue };
            for (i, s) in arm.samples.iter().enumerate() {
                let heads: Vec<String> = s.ablated.iter().map(|h| h.to_string()).collect();
                out.push_str(&format!(
                    "{i},{name},{:.6},{},{}\n",
                    s.accuracy,
                    s.context_accuracy.map_or(String::new(), |c| format!("{c:.6}")),
                    heads.join(" ")
                ));
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
        let mut out = String::from("arm,n_samples,mean_accuracy,mean_context_accuracy\n");
        let arms = [("intact", Some(&self.intact)), ("target", Some(&self.ablated)), ("control", self.control.as_ref())];
        for (name, arm) in arms {
            if let Some(a) = arm {
                out.push_str(&format!(
                    "{name},{},{:.6},{}\n",
                    a.samples.len(),
                    a.mean_accuracy(),
                    fmt(a.mean_context_accuracy())
                ));
            }
        }
        out
    }
}

fn measure(
    params: &ModelParameters,
    seq: &GeneratedSequence,
    mask: &AblationMask,
    observed: &[HeadId],
    level: ContextLevel,
) -> Result<(ArmSample, ContextAccuracy)> {
    let capture = if observed.is_empty() { Capture::none() } else { Capture::attention() };
    let trace = params.forward(&seq.tokens, mask, capture)?;
    let pred = trace_prediction_accuracy(&trace, seq)?;
    let mut ctx = ContextAccuracy::default();
    for &h in observed {
        ctx.merge(&context_attention_accuracy(trace.attention(h).expect("attention captured"), seq, level)?);
    }
    let sample = ArmSample {
        ablated: mask.heads().collect(),
        accuracy: pred.binned.overall.accuracy().unwrap_or(0.0),
        context_accuracy: ctx.argmax_accuracy(),
    };
    Ok((sample, ctx))
}

/// Evaluate intact, target-ablated and control-ablated models on the first
/// `n_samples` sequences. Controls are redrawn for every sequence.
pub fn run_ablation(params: &ModelParameters, experiment: &AblationExperiment, seqs: &[GeneratedSequence]) -> Result<AblationResult> {
    experiment.validate(&params.config)?;
    if seqs.len() < experiment.n_samples {
        return Err(LabError::Input(format!(
            "{} sequences supplied for {} ablation samples",
            seqs.len(),
            experiment.n_samples
        )));
    }
    let excluded = experiment.control_exclusion();
    let mut intact = Arm::default();
    let mut ablated = Arm::default();
    let mut control = (experiment.control_policy == ControlPolicy::RandomMatched).then(Arm::default);
    let (obs, level) = (&experiment.observed, experiment.level);
    for (i, seq) in seqs[..experiment.n_samples].iter().enumerate() {
        let (s, c) = measure(params, seq, &AblationMask::none(), obs, level)?;
        intact.samples.push(s);
        intact.context.merge(&c);
        let (s, c) = measure(params, seq, &experiment.target, obs, level)?;
        ablated.samples.push(s);
        ablated.context.merge(&c);
        if let Some(arm) = control.as_mut() {
            let mut rng = rng_from_seed(derive_indexed_seed(experiment.seed, "control", i as u64));
            let mask = random_control_set(&params.config, experiment.target.len(), &excluded, &mut rng)?;
            let (s, c) = measure(params, seq, &mask, obs, level)?;
            arm.samples.push(s);
            arm.context.merge(&c);
        }
    }
    Ok(AblationResult {
        target: experiment.target.heads().collect(),
        observed: experiment.observed.clone(),
        level,
        intact,
        ablated,
        control,
    })
}

/// Successor and context accuracy of one head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMeasure {
    pub successor_accuracy: f64,
    pub context_accuracy: f64,
    pub mass_ratio: f64,
    pub eligible: usize,
}

impl PairMeasure {
    fn of(c: &ContextAccuracy) -> Self {
        PairMeasure {
            successor_accuracy: c.successor_accuracy().unwrap_or(f64::NAN),
            context_accuracy: c.argmax_accuracy().unwrap_or(f64::NAN),
            mass_ratio: c.mass_ratio().unwrap_or(f64::NAN),
            eligible: c.eligible(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAblationResult {
    pub context_head: HeadId,
    pub induction_head: HeadId,
    pub n_sequences: usize,
    pub before: PairMeasure,
    pub after: PairMeasure,
}

/// The induction head's attention with and without the context head.
pub fn targeted_pair_ablation(
    params: &ModelParameters,
    context_head: HeadId,
    induction_head: HeadId,
    seqs: &[GeneratedSequence],
) -> Result<PairAblationResult> {
    AblationMask::from_iter([context_head, induction_head]).validate(&params.config)?;
    if context_head.layer >= induction_head.layer {
        return Err(LabError::Input(format!(
            "context head {context_head} must sit in an earlier layer than induction head {induction_head}"
        )));
    }
    let without: AblationMask = [context_head].into_iter().collect();
    let mut before = ContextAccuracy::default();
    let mut after = ContextAccuracy::default();
    for seq in seqs {
        for (mask, acc) in [(&AblationMask::none(), &mut before), (&without, &mut after)] {
            let trace = params.forward(&seq.tokens, mask, Capture::attention())?;
            acc.merge(&context_attention_accuracy(
                trace.attention(induction_head).expect("attention captured"),
                seq,
                ContextLevel::Second,
            )?);
        }
    }
    Ok(PairAblationResult {
        context_head,
        induction_head,
        n_sequences: seqs.len(),
        before: PairMeasure::of(&before),
        after: PairMeasure::of(&after),
    })
}

/// Distinct sets appearing among a control arm's samples.
pub fn distinct_control_sets(arm: &Arm) -> usize {
    arm.samples.iter().map(|s| s.ablated.clone()).collect::<BTreeSet<_>>().len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::seqgen::{generate, SequenceSpec};

    fn small() -> (ModelParameters, Vec<GeneratedSequence>) {
        let config = ModelConfig {
            n_layers: 2,
            n_heads: 3,
            d_model: 24,
            d_mlp: 0,
            vocab_size: 64,
            max_seq_len: 256,
            ..ModelConfig::default()
        };
        let params = init_model(&config, &mut rng_from_seed(4)).unwrap();
        let seqs = (0..4).map(|s| generate(&SequenceSpec::default_second().with_seed(s)).unwrap()).collect();
        (params, seqs)
    }

    fn report(layer: usize, head: usize, acc: f64) -> ProbeReport {
        ProbeReport {
            head: Some(HeadId::new(layer, head)),
            level: ContextLevel::Second,
            balanced_accuracy: acc,
            train_counts: Default::default(),
            test_counts: Default::default(),
            converged: true,
            iterations: 0,
            train_loss: 0.0,
        }
    }

    #[test]
    fn thresholds_select_heads() {
        let reports = vec![report(0, 0, 0.9), report(0, 1, 0.6), report(1, 0, 0.5), report(1, 1, 0.0)];
        assert_eq!(select_context_heads(&reports, 0.85).len(), 1);
        assert_eq!(select_context_heads(&reports, 0.55).len(), 2);
        assert!(select_context_heads(&reports, 1.01).is_empty());
        // strict comparison: a head at exactly zero is not above zero
        assert_eq!(select_context_heads(&reports, 0.0).len(), 3);
        assert_eq!(select_context_heads(&reports, -1.0).len(), 4);
    }

    #[test]
    fn control_sets() {
        let config = ModelConfig::default();
        let excl: AblationMask = [HeadId::new(0, 0), HeadId::new(2, 3)].into_iter().collect();
        let all = random_control_set(&config, 14, &excl, &mut rng_from_seed(0)).unwrap();
        let complement: AblationMask = config.all_heads().into_iter().filter(|h| !excl.contains(*h)).collect();
        assert_eq!(all, complement);
        let a = random_control_set(&config, 3, &excl, &mut rng_from_seed(7)).unwrap();
        let b = random_control_set(&config, 3, &excl, &mut rng_from_seed(7)).unwrap();
        assert_eq!(a, b);
        assert!(random_control_set(&config, 15, &excl, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn control_inclusion_is_uniform() {
        let config = ModelConfig::default();
        let excl: AblationMask = [HeadId::new(1, 1), HeadId::new(3, 0), HeadId::new(3, 2)].into_iter().collect();
        let (k, draws, eligible) = (4usize, 10_000usize, 13usize);
        let mut counts = std::collections::BTreeMap::new();
        let mut rng = rng_from_seed(12);
        for _ in 0..draws {
            let s = random_control_set(&config, k, &excl, &mut rng).unwrap();
            assert_eq!(s.len(), k);
            for h in s.heads() {
                assert!(!excl.contains(h));
                *counts.entry(h).or_insert(0usize) += 1;
            }
        }
        assert_eq!(counts.len(), eligible);
        let p = k as f64 / eligible as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (h, &c) in &counts {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{h}: {c}");
        }
    }

    #[test]
    fn empty_target_matches_intact() {
        let (params, seqs) = small();
        let mut exp = AblationExperiment::new(AblationMask::none(), 4, 1);
        exp.observed = vec![HeadId::new(1, 0)];
        let r = run_ablation(&params, &exp, &seqs).unwrap();
        assert_eq!(r.intact, r.ablated);
        assert_eq!(r.control.as_ref().unwrap(), &r.intact);
        assert_eq!(r.accuracy_drop(), 0.0);
    }

    #[test]
    fn arms_are_matched_and_reproducible() {
        let (params, seqs) = small();
        let target: AblationMask = [HeadId::new(0, 1), HeadId::new(1, 2)].into_iter().collect();
        let mut exp = AblationExperiment::new(target.clone(), 4, 5);
        exp.exclusion = [HeadId::new(0, 0)].into_iter().collect();
        let r = run_ablation(&params, &exp, &seqs).unwrap();
        let control = r.control.as_ref().unwrap();
        for s in &control.samples {
            assert_eq!(s.ablated.len(), 2);
            assert!(s.ablated.iter().all(|h| !target.contains(*h) && *h != HeadId::new(0, 0)));
        }
        assert_eq!(r, run_ablation(&params, &exp, &seqs).unwrap());
        assert!(run_ablation(&params, &AblationExperiment::new(target, 5, 0), &seqs).is_err());
    }

    #[test]
    fn ablation_is_idempotent() {
        let (params, seqs) = small();
        let h = HeadId::new(0, 2);
        let once: AblationMask = [h].into_iter().collect();
        let twice: AblationMask = [h, h].into_iter().collect();
        let a = params.forward(&seqs[0].tokens, &once, Capture::none()).unwrap();
        let b = params.forward(&seqs[0].tokens, &twice, Capture::none()).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn all_heads_ablated_leaves_the_embedding_path() {
        let (params, seqs) = small();
        let c = &params.config;
        let trace = params
            .forward(&seqs[0].tokens, &AblationMask::all(c), Capture { residuals: true, ..Capture::none() })
            .unwrap();
        let emb = trace.embedding.as_ref().unwrap();
        let (d, v) = (c.d_model, c.vocab_size);
        let scale = params.tensor(&params.layout.lnf_scale);
        let bias = params.tensor(&params.layout.lnf_bias);
        let unembed = params.tensor(&params.layout.unembed);
        for t in 0..seqs[0].len() {
            let x: Vec<f64> = emb[t * d..(t + 1) * d].iter().map(|&v| v as f64).collect();
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + c.layernorm_eps as f64).sqrt();
            let h: Vec<f64> = (0..d).map(|i| (x[i] - mean) * rstd * scale[i] as f64 + bias[i] as f64).collect();
            for o in 0..v {
                let logit: f64 = (0..d).map(|i| h[i] * unembed[i * v + o] as f64).sum();
                assert!((logit - trace.logits_row(t)[o] as f64).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn pair_ablation_checks_layers_and_later_heads_do_not_affect_earlier() {
        let (params, seqs) = small();
        assert!(targeted_pair_ablation(&params, HeadId::new(1, 0), HeadId::new(1, 0), &seqs).is_err());
        assert!(targeted_pair_ablation(&params, HeadId::new(1, 0), HeadId::new(0, 0), &seqs).is_err());
        assert!(targeted_pair_ablation(&params, HeadId::new(0, 0), HeadId::new(2, 0), &seqs).is_err());
        let r = targeted_pair_ablation(&params, HeadId::new(0, 0), HeadId::new(1, 0), &seqs).unwrap();
        assert!(r.before.eligible > 0);
        assert_eq!(r.before.eligible, r.after.eligible);
    }
}
