//! Config-driven experiment runner: stage sections in one TOML document,
//! named sub-seeds from one root seed, and a report bundle on disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::{run_ablation, select_context_heads, targeted_pair_ablation, AblationExperiment, AblationResult, PairAblationResult};
use crate::circuit::{circuit_predict, ideal_context_routing_attention, oracle_match_length, ChunkGeometry, CircuitConfig};
use crate::error::{LabError, Result};
use crate::heads::{classify_induction_heads, ClassifyConfig, HeadClassification};
use crate::heatmap::write_heatmap;
use crate::io::{read_json, write_atomic, write_json};
use crate::metrics::{best_k_heads_curve, evaluate, ContextLevel, LearningReport};
use crate::model::checkpoint::load_checkpoint_with_meta;
use crate::model::{predict_next, AblationMask, Capture, HeadId, ModelConfig, ModelParameters};
use crate::probes::{sweep_heads, ProbeConfig, ProbeSweep};
use crate::rng::{child_rng, derive_indexed_seed, derive_seed};
use crate::seqgen::{generate, GeneratedSequence, SequenceSpec};
use crate::training::{optimizer_path, TrainConfig, Trainer, TrainingCurve};

pub const ARTIFACT_VERSION: &str = concat!("induction-lab ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateStage {
    #[serde(default = "SequenceSpec::default_second")]
    pub spec: SequenceSpec,
    #[serde(default = "default_32")]
    pub n_sequences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStage {
    /// When false, `checkpoint` must name an existing file to load.
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Where to write (or, with training disabled, read) the checkpoint;
    /// defaults to `checkpoint.bin` in the output directory.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Training seed; derived from the root seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub settings: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateStage {
    #[serde(default = "SequenceSpec::default_second")]
    pub spec: SequenceSpec,
    #[serde(default = "default_32")]
    pub n_sequences: usize,
    /// Heads averaged in the best-heads curve.
    #[serde(default = "default_best_k")]
    pub best_k: usize,
    /// Evaluate these sequences (a `sequences.json` file) instead of
    /// generating `n_sequences` from `spec`.
    #[serde(default)]
    pub sequences: Option<PathBuf>,
    /// Heads zeroed during evaluation, as `layer:head,layer:head`.
    #[serde(default)]
    pub ablation: String,
    /// Also write every logit to `logits.csv`.
    #[serde(default)]
    pub logits: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeStage {
    #[serde(default = "SequenceSpec::default_second")]
    pub spec: SequenceSpec,
    #[serde(default = "default_64")]
    pub n_sequences: usize,
    #[serde(default)]
    pub solver: ProbeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateStage {
    #[serde(default = "SequenceSpec::default_second")]
    pub spec: SequenceSpec,
    #[serde(default = "default_32")]
    pub n_samples: usize,
    /// Ablate the classified induction heads.
    #[serde(default = "default_true")]
    pub induction: bool,
    /// Ablate heads whose context decodability exceeds `target_threshold`.
    #[serde(default = "default_true")]
    pub context: bool,
    #[serde(default = "default_target_threshold")]
    pub target_threshold: f64,
    /// Heads above this threshold never serve as controls.
    #[serde(default = "default_exclusion_threshold")]
    pub exclusion_threshold: f64,
    /// Sequences for the single context-head/induction-head pair; 0 skips it.
    #[serde(default = "default_84")]
    pub pair_sequences: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportStage {
    /// Heads (`layer:head`) rendered as heatmaps on the first evaluation
    /// sequence.
    #[serde(default)]
    pub heatmaps: Vec<String>,
}

fn default_true() -> bool {
    true
}
fn default_32() -> usize {
    32
}
fn default_64() -> usize {
    64
}
fn default_84() -> usize {
    84
}
fn default_best_k() -> usize {
    5
}
fn default_target_threshold() -> f64 {
    0.85
}
fn default_exclusion_threshold() -> f64 {
    0.55
}

/// One experiment. A stage runs when its section is present.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub model: ModelConfig,
    pub generate: Option<GenerateStage>,
    pub train: Option<TrainStage>,
    pub classify: Option<ClassifyConfig>,
    pub evaluate: Option<EvaluateStage>,
    pub probe: Option<ProbeStage>,
    pub ablate: Option<AblateStage>,
    pub report: Option<ReportStage>,
}

/// Command-line values that replace config fields.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        Ok((Self::parse(text)?, bytes))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = Some(d.clone());
        }
        if let Some(t) = o.threads {
            self.threads = Some(t);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(as_config)?;
        if self.threads == Some(0) {
            return Err(LabError::Config("threads must be >= 1".into()));
        }
        let fits = |spec: &SequenceSpec, what: &str| -> Result<()> {
            spec.validate()?;
            if spec.len() > self.model.max_seq_len || spec.model_vocab_size > self.model.vocab_size {
                return Err(LabError::Config(format!("{what} sequences do not fit the model")));
            }
            Ok(())
        };
        if let Some(g) = &self.generate {
            g.spec.validate()?;
        }
        if let Some(t) = self.train.as_ref().filter(|t| t.enabled) {
            t.settings.validate(&self.model)?;
        }
        if let Some(c) = &self.classify {
            c.validate()?;
        }
        if let Some(e) = &self.evaluate {
            fits(&e.spec, "evaluate")?;
            if e.n_sequences == 0 || e.best_k == 0 {
                return Err(LabError::Config("evaluate needs n_sequences >= 1 and best_k >= 1".into()));
            }
        }
        if let Some(p) = &self.probe {
            fits(&p.spec, "probe")?;
            p.solver.validate()?;
        }
        if let Some(a) = &self.ablate {
            fits(&a.spec, "ablate")?;
            if a.n_samples == 0 {
                return Err(LabError::Config("ablate needs n_samples >= 1".into()));
            }
            if a.exclusion_threshold > a.target_threshold {
                return Err(LabError::Config("exclusion_threshold must not exceed target_threshold".into()));
            }
        }
        for h in self.report.iter().flat_map(|r| &r.heatmaps) {
            let head: HeadId = h.parse().map_err(as_config)?;
            AblationMask::from_iter([head]).validate(&self.model).map_err(as_config)?;
        }
        Ok(())
    }
}

fn as_config(e: LabError) -> LabError {
    match e {
        LabError::Config(_) => e,
        other => LabError::Config(other.to_string()),
    }
}

fn missing(stage: &str, detail: impl Into<String>) -> LabError {
    LabError::Dependency {
        stage: stage.into(),
        detail: detail.into(),
    }
}

/// `n` sequences from `template`, seeded by the named sub-stream of `root`.
pub fn sequence_batch(template: &SequenceSpec, n: usize, root: u64, stream: &str) -> Result<Vec<GeneratedSequence>> {
    let base = derive_seed(root, stream);
    (0..n)
        .map(|i| generate(&template.clone().with_seed(derive_indexed_seed(base, "sequence", i as u64))))
        .collect()
}

/// Record of what one run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub stages: Vec<String>,
    /// File name → SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Stage outputs kept in memory while a run progresses.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    config_bytes: Vec<u8>,
    pub stages: Vec<String>,
    files: BTreeMap<String, String>,
    pub model: Option<ModelParameters>,
    pub model_meta: Option<serde_json::Value>,
    pub curve: Option<TrainingCurve>,
    pub classification: Option<HeadClassification>,
    pub evaluation: Option<LearningReport>,
    pub eval_sequences: Option<Vec<GeneratedSequence>>,
    pub probes: Option<ProbeSweep>,
    pub induction_ablation: Option<AblationResult>,
    pub context_ablation: Option<AblationResult>,
    pub pair_ablation: Option<PairAblationResult>,
    pub notes: Vec<String>,
}

impl Pipeline {
    /// `config_bytes` is the document the config was parsed from; its hash
    /// goes into the manifest.
    pub fn new(config: ExperimentConfig, config_bytes: Vec<u8>) -> Result<Self> {
        config.validate()?;
        let out_dir = config.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        Ok(Pipeline {
            config,
            out_dir,
            config_bytes,
            stages: Vec::new(),
            files: BTreeMap::new(),
            model: None,
            model_meta: None,
            curve: None,
            classification: None,
            evaluation: None,
            eval_sequences: None,
            probes: None,
            induction_ablation: None,
            context_ablation: None,
            pair_ablation: None,
            notes: Vec::new(),
        })
    }

    fn seed(&self, stage: &str) -> u64 {
        derive_seed(self.config.seed, stage)
    }

    fn emit(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.out_dir.join(name), bytes)?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn emit_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.emit(name, &bytes)
    }

    fn model(&self, stage: &str) -> Result<&ModelParameters> {
        self.model
            .as_ref()
            .ok_or_else(|| missing(stage, "no model: add a [train] section (training or a checkpoint to load)"))
    }

    pub fn generate(&mut self) -> Result<()> {
        let stage = self.config.generate.clone().ok_or_else(|| missing("generate", "no [generate] section"))?;
        let seqs = sequence_batch(&stage.spec, stage.n_sequences, self.config.seed, "generate")?;
        self.emit_json("sequences.json", &seqs)?;
        let mut csv = String::from("sequence,position,token\n");
        for (i, seq) in seqs.iter().enumerate() {
            for (t, tok) in seq.tokens.iter().enumerate() {
                csv.push_str(&format!("{i},{t},{tok}\n"));
            }
        }
        self.emit("tokens.csv", csv.as_bytes())?;
        self.stages.push("generate".into());
        Ok(())
    }

    /// Train (resuming from a finished or partial checkpoint in place), or
    /// load an existing checkpoint when training is disabled.
    pub fn train(&mut self) -> Result<()> {
        let stage = self.config.train.clone().ok_or_else(|| missing("train", "no [train] section"))?;
        let path = stage.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("checkpoint.bin"));
        if !stage.enabled {
            if !path.exists() {
                return Err(missing("train", format!("training is disabled and checkpoint {} does not exist", path.display())));
            }
            let (params, meta) = load_checkpoint_with_meta(&path)?;
            if params.config != self.config.model {
                log::warn!(
                    "checkpoint model config {:?} differs from [model] {:?}; using the checkpoint's",
                    params.config,
                    self.config.model
                );
            }
            self.model = Some(params);
            self.model_meta = Some(meta);
            self.stages.push("train".into());
            return Ok(());
        }
        let mut settings = stage.settings.clone();
        if settings.seed != 0 {
            log::warn!("[train.settings] seed is ignored; set [train] seed instead");
        }
        settings.seed = stage.seed.unwrap_or_else(|| self.seed("train"));
        if let Some(t) = self.config.threads {
            settings.threads = t;
        }
        let mut trainer = if path.exists() && optimizer_path(&path).exists() {
            Trainer::resume(settings, &path)?
        } else {
            Trainer::new(settings, &self.config.model)?.with_checkpoint(&path)
        };
        trainer.run()?;
        trainer.save()?;
        let csv = trainer.curve.to_csv();
        self.emit("train_curve.csv", csv.as_bytes())?;
        let (_, meta) = load_checkpoint_with_meta(&path)?;
        self.model_meta = Some(meta);
        self.curve = Some(trainer.curve);
        self.model = Some(trainer.params);
        self.stages.push("train".into());
        Ok(())
    }

    pub fn classify(&mut self) -> Result<()> {
        let config = self.config.classify.clone().ok_or_else(|| missing("classify", "no [classify] section"))?;
        let mut rng = child_rng(self.config.seed, "classify");
        let c = classify_induction_heads(self.model("classify")?, &config, &mut rng)?;
        self.emit("head_scores.csv", c.to_csv().as_bytes())?;
        self.emit_json("head_scores.json", &c)?;
        self.classification = Some(c);
        self.stages.push("classify".into());
        Ok(())
    }

    pub fn evaluate(&mut self) -> Result<()> {
        let stage = self.config.evaluate.clone().ok_or_else(|| missing("evaluate", "no [evaluate] section"))?;
        let seqs = match &stage.sequences {
            Some(path) => read_json::<Vec<GeneratedSequence>>(path)?,
            None => sequence_batch(&stage.spec, stage.n_sequences, self.config.seed, "evaluate")?,
        };
        if seqs.is_empty() {
            return Err(LabError::Config("evaluate: no sequences".into()));
        }
        let params = self.model("evaluate")?;
        let ablation = AblationMask::parse_list(&stage.ablation)
            .and_then(|m| m.validate(&params.config).map(|_| m))
            .map_err(|e| LabError::Config(format!("evaluate ablation: {e}")))?;
        let report = evaluate(params, &seqs, &ablation)?;
        let mut predictions = String::from("sequence,position,token,prediction,target,predictable\n");
        let mut logits = String::new();
        if stage.logits {
            logits.push_str("sequence,position");
            for v in 0..params.config.vocab_size {
                logits.push_str(&format!(",logit_{v}"));
            }
            logits.push('\n');
        }
        for (i, seq) in seqs.iter().enumerate() {
            let trace = params.forward(&seq.tokens, &ablation, Capture::none())?;
            let preds = predict_next(&trace);
            for a in &seq.annotations {
                let target = a.target.map_or(String::new(), |t| t.to_string());
                predictions.push_str(&format!(
                    "{i},{},{},{},{target},{}\n",
                    a.position, a.token, preds[a.position], a.predictable
                ));
                if stage.logits {
                    logits.push_str(&format!("{i},{}", a.position));
                    for x in trace.logits_row(a.position) {
                        logits.push_str(&format!(",{x}"));
                    }
                    logits.push('\n');
                }
            }
        }
        self.emit("predictions.csv", predictions.as_bytes())?;
        if stage.logits {
            self.emit("logits.csv", logits.as_bytes())?;
        }
        let best = best_k_heads_curve(&report.heads, stage.best_k)?;
        let mut curve = String::from("bin,mean_context_accuracy\n");
        for (b, v) in best.curve.iter().enumerate() {
            curve.push_str(&format!("{b},{}\n", v.map_or(String::new(), |x| format!("{x:.6}"))));
        }
        self.emit("learning_bins.csv", report.bins_csv().as_bytes())?;
        self.emit("head_context.csv", report.heads_csv().as_bytes())?;
        self.emit("best_heads_curve.csv", curve.as_bytes())?;
        self.emit_json("best_heads_curve.json", &best)?;
        self.emit_json("learning_report.json", &report)?;
        self.evaluation = Some(report);
        self.eval_sequences = Some(seqs);
        self.stages.push("evaluate".into());
        Ok(())
    }

    pub fn probe(&mut self) -> Result<()> {
        let stage = self.config.probe.clone().ok_or_else(|| missing("probe", "no [probe] section"))?;
        let seqs = sequence_batch(&stage.spec, stage.n_sequences, self.config.seed, "probe")?;
        let mut solver = stage.solver.clone();
        solver.seed = self.seed("probe-split");
        let level = if stage.spec.order == crate::seqgen::Order::Third {
            ContextLevel::Third
        } else {
            ContextLevel::Second
        };
        let sweep = sweep_heads(self.model("probe")?, &seqs, level, &solver)?;
        let mut summary = BTreeMap::new();
        summary.insert("embedding".to_string(), sweep.embedding.balanced_accuracy);
        for (l, v) in sweep.layer_max.iter().enumerate() {
            summary.insert(format!("layer_{l}"), *v);
        }
        self.emit("probe_heads.csv", sweep.to_csv().as_bytes())?;
        self.emit_json("probe_layer_max.json", &summary)?;
        self.emit_json("probe_sweep.json", &sweep)?;
        self.probes = Some(sweep);
        self.stages.push("probe".into());
        Ok(())
    }

    pub fn ablate(&mut self) -> Result<()> {
        let stage = self.config.ablate.clone().ok_or_else(|| missing("ablate", "no [ablate] section"))?;
        let n = stage.n_samples.max(stage.pair_sequences);
        let seqs = sequence_batch(&stage.spec, n, self.config.seed, "ablate")?;
        let induction = self
            .classification
            .as_ref()
            .ok_or_else(|| missing("ablate", "induction heads come from the [classify] stage"))?
            .induction_heads();
        let params = self.model("ablate")?.clone();
        let total = params.config.n_total_heads();

        if stage.induction {
            if induction.is_empty() {
                self.notes.push("induction ablation skipped: no head passed the induction threshold".into());
            } else if induction.len() == total {
                self.notes.push("induction ablation skipped: every head is an induction head, no controls remain".into());
            } else {
                let mut exp = AblationExperiment::new(induction.iter().copied().collect(), stage.n_samples, self.seed("ablate-induction"));
                exp.observed = induction.clone();
                let r = run_ablation(&params, &exp, &seqs)?;
                self.emit("ablation_induction.csv", r.to_csv().as_bytes())?;
                self.emit("ablation_induction_summary.csv", r.summary_csv().as_bytes())?;
                self.emit_json("ablation_induction.json", &r)?;
                self.induction_ablation = Some(r);
            }
        }

        let probes = if stage.context || stage.pair_sequences > 0 {
            Some(
                self.probes
                    .clone()
                    .ok_or_else(|| missing("ablate", "context heads come from the [probe] stage"))?,
            )
        } else {
            None
        };
        if stage.context {
            let probes = probes.as_ref().unwrap();
            let target = select_context_heads(&probes.heads, stage.target_threshold);
            let exclusion = select_context_heads(&probes.heads, stage.exclusion_threshold);
            if target.is_empty() {
                self.notes.push(format!(
                    "context ablation skipped: no head decodes context above {}",
                    stage.target_threshold
                ));
            } else if induction.is_empty() {
                self.notes.push("context ablation skipped: no induction heads to observe".into());
            } else if total - exclusion.len() < target.len() {
                self.notes.push(format!(
                    "context ablation skipped: {} targets but only {} heads below the exclusion threshold",
                    target.len(),
                    total - exclusion.len()
                ));
            } else {
                let mut exp = AblationExperiment::new(target, stage.n_samples, self.seed("ablate-context"));
                exp.exclusion = exclusion;
                exp.observed = induction.clone();
                let r = run_ablation(&params, &exp, &seqs)?;
                self.emit("ablation_context.csv", r.to_csv().as_bytes())?;
                self.emit("ablation_context_summary.csv", r.summary_csv().as_bytes())?;
                self.emit_json("ablation_context.json", &r)?;
                self.context_ablation = Some(r);
            }
        }

        if stage.pair_sequences > 0 {
            let probes = probes.as_ref().unwrap();
            match best_pair(probes, self.classification.as_ref().unwrap()) {
                Some((ctx, ind)) => {
                    let r = targeted_pair_ablation(&params, ctx, ind, &seqs[..stage.pair_sequences])?;
                    self.emit_json("ablation_pair.json", &r)?;
                    self.pair_ablation = Some(r);
                }
                None => self
                    .notes
                    .push("pair ablation skipped: no probed head sits below an induction head".into()),
            }
        }
        self.stages.push("ablate".into());
        Ok(())
    }

    /// Summary JSON and requested heatmaps.
    pub fn report(&mut self) -> Result<()> {
        let stage = self.config.report.clone().unwrap_or_default();
        for h in &stage.heatmaps {
            let head: HeadId = h.parse()?;
            let seqs = self
                .eval_sequences
                .as_ref()
                .ok_or_else(|| missing("report", "heatmaps use the [evaluate] sequences"))?;
            let trace = self.model("report")?.forward(&seqs[0].tokens, &AblationMask::none(), Capture::attention())?;
            let name = format!("heatmap_{}_{}.svg", head.layer, head.head);
            let path = self.out_dir.join(&name);
            let attn = trace
                .attention(head)
                .ok_or_else(|| LabError::Input(format!("head {head} is outside the model")))?;
            write_heatmap(attn, Some(&seqs[0]), &path)?;
            let bytes = std::fs::read(&path).map_err(|e| LabError::io(&path, e))?;
            self.files.insert(name, sha256_hex(&bytes));
        }
        let summary = self.summary();
        self.emit_json("summary.json", &summary)?;
        self.stages.push("report".into());
        Ok(())
    }

    pub fn summary(&self) -> serde_json::Value {
        use serde_json::json;
        let eval = self.evaluation.as_ref().map(|r| {
            json!({
                "n_sequences": r.n_sequences,
                "accuracy": r.prediction.overall.accuracy(),
                "final_bin_accuracy": r.prediction.final_bin(),
                "chance_2nd": r.chance_2nd,
            })
        });
        let classify = self.classification.as_ref().map(|c| {
            json!({
                "threshold": c.threshold,
                "induction_heads": c.induction_heads().iter().map(|h| h.to_string()).collect::<Vec<_>>(),
                "best": c.best().map(|s| json!({"head": s.head.to_string(), "score": s.induction_score})),
            })
        });
        let probes = self.probes.as_ref().map(|p| {
            json!({
                "embedding": p.embedding.balanced_accuracy,
                "layer_max": p.layer_max,
                "best": p.best().map(|r| json!({"head": r.head.map(|h| h.to_string()), "balanced_accuracy": r.balanced_accuracy})),
            })
        });
        let ablation = |r: &AblationResult| {
            json!({
                "target": r.target.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
                "intact_accuracy": r.intact.mean_accuracy(),
                "target_accuracy": r.ablated.mean_accuracy(),
                "control_accuracy": r.control.as_ref().map(|c| c.mean_accuracy()),
                "accuracy_margin": r.accuracy_margin(),
                "intact_context_accuracy": r.intact.mean_context_accuracy(),
                "target_context_accuracy": r.ablated.mean_context_accuracy(),
                "control_context_accuracy": r.control.as_ref().and_then(|c| c.mean_context_accuracy()),
                "context_margin": r.context_margin(),
            })
        };
        json!({
            "artifact_version": ARTIFACT_VERSION,
            "seed": self.config.seed,
            "induction_threshold": self.config.classify.clone().unwrap_or_default().threshold,
            "stages": self.stages,
            "model_step": self.model_meta.as_ref().and_then(|m| m.get("step").cloned()),
            "evaluate": eval,
            "classify": classify,
            "probe": probes,
            "ablation_induction": self.induction_ablation.as_ref().map(ablation),
            "ablation_context": self.context_ablation.as_ref().map(ablation),
            "ablation_pair": self.pair_ablation,
            "notes": self.notes,
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            artifact_version: ARTIFACT_VERSION.into(),
            config_sha256: sha256_hex(&self.config_bytes),
            seed: self.config.seed,
            stages: self.stages.clone(),
            files: self.files.clone(),
        }
    }

    /// Copy of the input config and the manifest; written last.
    pub fn finish(&mut self) -> Result<Manifest> {
        let bytes = self.config_bytes.clone();
        self.emit("config.toml", &bytes)?;
        let manifest = self.manifest();
        write_json(&self.out_dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    /// Every configured stage in dependency order.
    pub fn run_all(&mut self) -> Result<Manifest> {
        let c = self.config.clone();
        let needs_model = c.classify.is_some() || c.evaluate.is_some() || c.probe.is_some() || c.ablate.is_some();
        if needs_model && c.train.is_none() {
            return Err(missing("train", "later stages need a model; add a [train] section"));
        }
        if let Some(a) = &c.ablate {
            if c.classify.is_none() {
                return Err(missing("classify", "[ablate] needs the induction heads from [classify]"));
            }
            if (a.context || a.pair_sequences > 0) && c.probe.is_none() {
                return Err(missing("probe", "[ablate] needs context heads from [probe]"));
            }
        }
        if c.report.as_ref().is_some_and(|r| !r.heatmaps.is_empty()) && c.evaluate.is_none() {
            return Err(missing("evaluate", "[report] heatmaps need the [evaluate] sequences"));
        }
        if c.generate.is_some() {
            self.generate()?;
        }
        if c.train.is_some() {
            self.train()?;
        }
        if c.classify.is_some() {
            self.classify()?;
        }
        if c.evaluate.is_some() {
            self.evaluate()?;
        }
        if c.probe.is_some() {
            self.probe()?;
        }
        if c.ablate.is_some() {
            self.ablate()?;
        }
        self.report()?;
        self.finish()
    }
}

/// The best-decoding probed head paired with the strongest induction head in
/// a later layer.
fn best_pair(probes: &ProbeSweep, classification: &HeadClassification) -> Option<(HeadId, HeadId)> {
    let mut ind: Vec<_> = classification.scorecards.iter().collect();
    ind.sort_by(|a, b| b.induction_score.partial_cmp(&a.induction_score).unwrap().then(a.head.cmp(&b.head)));
    let mut ctx: Vec<_> = probes.heads.iter().collect();
    ctx.sort_by(|a, b| b.balanced_accuracy.partial_cmp(&a.balanced_accuracy).unwrap().then(a.head.cmp(&b.head)));
    for c in &ctx {
        let c = c.head?;
        if let Some(i) = ind.iter().find(|s| s.head.layer > c.layer) {
            return Some((c, i.head));
        }
    }
    None
}

/// Load a bundle's manifest and check every listed file's hash.
pub fn verify_bundle(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    for (name, hash) in &manifest.files {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| LabError::io(&path, e))?;
        if &sha256_hex(&bytes) != hash {
            return Err(LabError::Input(format!("{} does not match its manifest hash", path.display())));
        }
    }
    Ok(manifest)
}

/// Oracle attention rows and predictions for one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOutput {
    pub match_length: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub predictions: Vec<Option<u32>>,
}

pub fn run_oracle(seq: &GeneratedSequence, match_length: Option<usize>) -> Result<OracleOutput> {
    let m = match match_length {
        Some(m) => m,
        None => oracle_match_length(seq)?,
    };
    let config = CircuitConfig::new(m);
    let geometry = ChunkGeometry::of(seq);
    let attn = crate::circuit::adaptive_induction_attention(&seq.tokens, geometry, &config)?;
    let predictions = circuit_predict(&seq.tokens, geometry, &config)?;
    Ok(OracleOutput {
        match_length: m,
        rows: attn.rows,
        predictions,
    })
}

/// Routing rows for an `n`-back context head over `len` positions.
pub fn routing_rows(len: usize, n: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    Ok(ideal_context_routing_attention(len, n)?.rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_toml(out: &Path) -> String {
        format!(
            r#"
seed = 3
out_dir = "{}"

[model]
n_layers = 2
n_heads = 2
d_model = 16
d_mlp = 0
vocab_size = 16
max_seq_len = 64

[generate]
spec = {{ order = "second", vocab = 4, chunks = 2, repeats = 4, model_vocab_size = 16 }}
n_sequences = 3

[train]
[train.settings]
steps = 6
batch_size = 2
warmup_steps = 2
log_every = 3
checkpoint_every = 3
eval_sequences = 2
task_mix = {{ first = 0.0, second = 1.0, third = 0.0 }}
second_spec = {{ order = "second", vocab = 4, chunks = 2, repeats = 4, model_vocab_size = 16 }}

[classify]
n_probe_seqs = 2
half_length = 8
n_back = [2]

[evaluate]
spec = {{ order = "second", vocab = 4, chunks = 2, repeats = 4, model_vocab_size = 16 }}
n_sequences = 4
best_k = 2

[probe]
spec = {{ order = "second", vocab = 4, chunks = 2, repeats = 6, model_vocab_size = 16 }}
n_sequences = 8

[ablate]
spec = {{ order = "second", vocab = 4, chunks = 2, repeats = 4, model_vocab_size = 16 }}
n_samples = 4
pair_sequences = 4
target_threshold = 0.0
exclusion_threshold = 0.0

[report]
heatmaps = ["1:0"]
"#,
            out.display()
        )
    }

    #[test]
    fn omitted_model_fields_take_the_default_architecture() {
        let c = ExperimentConfig::parse("[model]\n").unwrap();
        assert_eq!(c.model, ModelConfig::default());
        let c = ExperimentConfig::parse("[model]\nn_layers = 2\n").unwrap();
        assert_eq!(c.model.d_mlp, ModelConfig::default().d_mlp);
        assert_eq!(c.model.n_layers, 2);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = ExperimentConfig::parse("seed = 1\nsede = 2\n").unwrap_err();
        assert!(matches!(e, LabError::Config(_)));
        assert_eq!(e.exit_code(), 2);
        let e = ExperimentConfig::parse("[classify]\nthreshhold = 0.3\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(ExperimentConfig::parse("").is_ok());
    }

    #[test]
    fn absent_checkpoint_with_training_disabled_is_a_dependency_error() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "[train]\nenabled = false\ncheckpoint = \"{}\"\n[classify]\n",
            dir.path().join("nope.bin").display()
        );
        let config = ExperimentConfig::parse(&text).unwrap();
        let mut p = Pipeline::new(config, text.into_bytes()).unwrap();
        let e = p.run_all().unwrap_err();
        assert!(matches!(&e, LabError::Dependency { stage, .. } if stage == "train"), "{e}");
        assert_eq!(e.exit_code(), 4);
    }

    #[test]
    fn missing_stage_is_named() {
        let config = ExperimentConfig::parse("[classify]\n").unwrap();
        let e = Pipeline::new(config, Vec::new()).unwrap().run_all().unwrap_err();
        assert!(matches!(&e, LabError::Dependency { stage, .. } if stage == "train"));
        let config = ExperimentConfig::parse("[train]\n[ablate]\ncontext = false\npair_sequences = 0\n").unwrap();
        let e = Pipeline::new(config, Vec::new()).unwrap().run_all().unwrap_err();
        assert!(matches!(&e, LabError::Dependency { stage, .. } if stage == "classify"));
    }

    #[test]
    fn runs_end_to_end_and_reruns_identically() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut manifests = Vec::new();
        for dir in [a.path(), b.path()] {
            let text = tiny_toml(Path::new("unused"));
            let mut config = ExperimentConfig::parse(&text).unwrap();
            config.apply(&Overrides {
                out_dir: Some(dir.to_path_buf()),
                ..Overrides::default()
            });
            let mut p = Pipeline::new(config, text.into_bytes()).unwrap();
            manifests.push(p.run_all().unwrap());
            verify_bundle(dir).unwrap();
        }
        assert_eq!(manifests[0], manifests[1]);
        let files = &manifests[0].files;
        for f in [
            "sequences.json",
            "train_curve.csv",
            "head_scores.csv",
            "learning_bins.csv",
            "head_context.csv",
            "probe_heads.csv",
            "summary.json",
            "heatmap_1_0.svg",
            "config.toml",
        ] {
            assert!(files.contains_key(f), "{f} missing");
        }
        let csv = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        for f in files.keys().filter(|f| f.ends_with(".csv")) {
            assert_eq!(csv(a.path(), f), csv(b.path(), f), "{f}");
        }
        assert_eq!(manifests[0].config_sha256, sha256_hex(tiny_toml(Path::new("unused")).as_bytes()));
    }

    #[test]
    fn reruns_in_place_resume_instead_of_retraining() {
        let dir = tempfile::tempdir().unwrap();
        let text = tiny_toml(dir.path());
        let run = || {
            let config = ExperimentConfig::parse(&text).unwrap();
            Pipeline::new(config, text.clone().into_bytes()).unwrap().run_all().unwrap()
        };
        assert_eq!(run(), run());
    }
}
