//! `induction-lab` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use induction_lab::heatmap::write_heatmap;
use induction_lab::io::{read_json, write_atomic, write_json};
use induction_lab::model::{AblationMask, Capture, HeadId};
use induction_lab::pipeline::{
    run_oracle, verify_bundle, AblateStage, EvaluateStage, ExperimentConfig, GenerateStage, Overrides, Pipeline,
    ProbeStage, TrainStage,
};
use induction_lab::seqgen::{GeneratedSequence, Order, SequenceSpec};
use induction_lab::{LabError, Result};

#[derive(Parser)]
#[command(name = "induction-lab", version, about = "Induction-head experiments on hierarchical synthetic sequences")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    First,
    Second,
    Third,
}

#[derive(Subcommand)]
enum Command {
    /// Write annotated sequences to sequences.json.
    Generate {
        #[arg(long, value_enum)]
        order: Option<OrderArg>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a model; resumes if the checkpoint and its .opt sidecar exist.
    Train {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Require an existing checkpoint and optimizer sidecar to continue from.
        #[arg(long)]
        resume: bool,
    },
    /// Score every head for induction behaviour.
    ClassifyHeads {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Prediction accuracy by repetition and per-head context accuracy.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequence file from `generate`; replaces the configured spec.
        #[arg(long)]
        sequences: Option<PathBuf>,
        /// Heads to zero, as `layer:head,layer:head`.
        #[arg(long)]
        ablate: Option<String>,
        /// Also write logits.csv.
        #[arg(long)]
        logits: bool,
        /// Render one head's attention on the first sequence: `OUT.svg LAYER:HEAD`.
        #[arg(long, num_args = 2, value_names = ["SVG", "HEAD"])]
        heatmap: Option<Vec<String>>,
    },
    /// Decode latent context from every head's output.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Probe 3rd-order context on 3rd-order sequences.
        #[arg(long)]
        third: bool,
    },
    /// Induction-head, context-head and head-pair ablations with controls.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Reference circuit on a sequence file.
    Oracle {
        #[arg(long)]
        sequences: PathBuf,
        /// Context match length; defaults to the minimal sufficient one.
        #[arg(long)]
        m: Option<usize>,
        /// Which sequence of the file.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Every stage present in the config, in dependency order.
    Run,
    /// Verify a bundle's hashes and print its summary.
    Report,
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, Vec<u8>)> {
    let (mut config, bytes) = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => (ExperimentConfig::default(), Vec::new()),
    };
    config.apply(&Overrides {
        seed: common.seed,
        out_dir: common.out.clone(),
        threads: common.threads,
    });
    Ok((config, bytes))
}

/// Config bytes for the manifest: the file as read, or the effective
/// config when none was given.
fn config_bytes(config: &ExperimentConfig, bytes: Vec<u8>) -> Result<Vec<u8>> {
    if !bytes.is_empty() {
        return Ok(bytes);
    }
    toml::to_string(config)
        .map(String::into_bytes)
        .map_err(|e| LabError::Config(e.to_string()))
}

fn use_checkpoint(config: &mut ExperimentConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    match checkpoint {
        Some(path) => {
            config.train = Some(TrainStage {
                enabled: false,
                checkpoint: Some(path),
                seed: None,
                settings: Default::default(),
            })
        }
        None => match &mut config.train {
            Some(t) => t.enabled = false,
            None => {
                return Err(LabError::Dependency {
                    stage: "train".into(),
                    detail: "pass --checkpoint or a config with a [train] checkpoint".into(),
                })
            }
        },
    }
    Ok(())
}

/// Single-stage commands end with the summary; heatmaps need `evaluate`.
fn without_heatmaps(config: &mut ExperimentConfig) {
    if let Some(r) = &mut config.report {
        r.heatmaps.clear();
    }
}

fn execute(cli: Cli) -> Result<()> {
    let (mut config, raw) = load_config(&cli.common)?;
    if let Some(t) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| LabError::Config(e.to_string()))?;
    }
    let out_dir = config.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    match cli.command {
        Command::Generate { order, n } => {
            let mut stage = config.generate.clone().unwrap_or(GenerateStage {
                spec: SequenceSpec::default_second(),
                n_sequences: 32,
            });
            if let Some(o) = order {
                stage.spec = match o {
                    OrderArg::First => SequenceSpec::default_first(),
                    OrderArg::Second => SequenceSpec::default_second(),
                    OrderArg::Third => SequenceSpec::default_third(),
                };
            }
            if let Some(n) = n {
                stage.n_sequences = n;
            }
            config.generate = Some(stage);
            let bytes = config_bytes(&config, raw)?;
            let mut p = Pipeline::new(config, bytes)?;
            p.generate()?;
            p.finish()?;
        }
        Command::Train { checkpoint, steps, resume } => {
            without_heatmaps(&mut config);
            let mut stage = config.train.clone().unwrap_or(TrainStage {
                enabled: true,
                checkpoint: None,
                seed: None,
                settings: Default::default(),
            });
            stage.enabled = true;
            if checkpoint.is_some() {
                stage.checkpoint = checkpoint;
            }
            if let Some(s) = steps {
                stage.settings.steps = s;
            }
            if resume {
                let path = stage.checkpoint.clone().unwrap_or_else(|| out_dir.join("checkpoint.bin"));
                if !path.exists() || !induction_lab::training::optimizer_path(&path).exists() {
                    return Err(LabError::Dependency {
                        stage: "train".into(),
                        detail: format!("--resume needs {} and its .opt sidecar", path.display()),
                    });
                }
            }
            config.train = Some(stage);
            let bytes = config_bytes(&config, raw)?;
            let mut p = Pipeline::new(config, bytes)?;
            p.train()?;
            p.report()?;
            p.finish()?;
        }
        Command::ClassifyHeads { checkpoint } => {
            without_heatmaps(&mut config);
            use_checkpoint(&mut config, checkpoint)?;
            config.classify.get_or_insert_with(Default::default);
            let bytes = config_bytes(&config, raw)?;
            let mut p = Pipeline::new(config, bytes)?;
            p.train()?;
            p.classify()?;
            p.report()?;
            p.finish()?;
        }
        Command::Evaluate { checkpoint, sequences, ablate, logits, heatmap } => {
            use_checkpoint(&mut config, checkpoint)?;
            let stage = config.evaluate.get_or_insert_with(|| EvaluateStage {
                spec: SequenceSpec::default_second(),
                n_sequences: 32,
                best_k: 5,
                sequences: None,
                ablation: String::new(),
                logits: false,
            });
            if sequences.is_some() {
                stage.sequences = sequences;
            }
            if let Some(a) = ablate {
                stage.ablation = a;
            }
            stage.logits |= logits;
            let ablation = AblationMask::parse_list(&stage.ablation)?;
            let bytes = config_bytes(&config, raw)?;
            let mut p = Pipeline::new(config, bytes)?;
            p.train()?;
            p.evaluate()?;
            if let Some(args) = heatmap {
                let head: HeadId = args[1].parse()?;
                let seq = &p.eval_sequences.as_ref().expect("evaluated")[0];
                let params = p.model.as_ref().expect("model loaded");
                AblationMask::from_iter([head]).validate(&params.config)?;
                let trace = params.forward(&seq.tokens, &ablation, Capture::attention())?;
                write_heatmap(trace.attention(head).expect("captured"), Some(seq), Path::new(&args[0]))?;
            }
            p.report()?;
            p.finish()?;
        }
        Command::Probe { checkpoint, third } => {
            without_heatmaps(&mut config);
            use_checkpoint(&mut config, checkpoint)?;
            let stage = config.probe.get_or_insert_with(|| ProbeStage {
                spec: SequenceSpec::default_second(),
                n_sequences: 64,
                solver: Default::default(),
            });
            if third {
                stage.spec = SequenceSpec::default_third();
            }
            let bytes = config_bytes(&config, raw)?;
            let mut p = Pipeline::new(config, bytes)?;
            p.train()?;
            p.probe()?;
            p.report()?;
            p.finish()?;
        }
        Command::Ablate { checkpoint } => {
            without_heatmaps(&mut config);
            use_checkpoint(&mut config, checkpoint)?;
            config.classify.get_or_insert_with(Default::default);
            let stage: AblateStage = match config.ablate.clone() {
                Some(s) => s,
                None => toml::from_str("").map_err(|e| LabError::Config(e.to_string()))?,
            };
            if (stage.context || stage.pair_sequences > 0) && config.probe.is_none() {
                config.probe = Some(ProbeStage {
                    spec: SequenceSpec::default_second(),
                    n_sequences: 64,
                    solver: Default::default(),
                });
            }
            config.ablate = Some(stage);
            let bytes = config_bytes(&config, raw)?;
            let mut p = Pipeline::new(config.clone(), bytes)?;
            p.train()?;
            p.classify()?;
            if config.probe.is_some() {
                p.probe()?;
            }
            p.ablate()?;
            p.report()?;
            p.finish()?;
        }
        Command::Oracle { sequences, m, index } => {
            let seqs: Vec<GeneratedSequence> = read_json(&sequences)?;
            let seq = seqs
                .get(index)
                .ok_or_else(|| LabError::Input(format!("{} holds {} sequences", sequences.display(), seqs.len())))?;
            let out = run_oracle(seq, m)?;
            write_json(&out_dir.join("oracle_attention.json"), &out)?;
            let mut csv = String::from("position,token,prediction,target,predictable\n");
            for a in &seq.annotations {
                let fmt = |x: Option<u32>| x.map_or(String::new(), |v| v.to_string());
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    a.position,
                    a.token,
                    fmt(out.predictions[a.position]),
                    fmt(a.target),
                    a.predictable
                ));
            }
            write_atomic(&out_dir.join("oracle_predictions.csv"), csv.as_bytes())?;
            if seq.spec.order == Order::First {
                log::info!("first-order sequence: match length {} is irrelevant", out.match_length);
            }
            println!("match length {}", out.match_length);
        }
        Command::Run => {
            if cli.common.config.is_none() {
                return Err(LabError::Config("run needs --config".into()));
            }
            let bytes = config_bytes(&config, raw)?;
            let manifest = Pipeline::new(config, bytes)?.run_all()?;
            println!("{} stages, {} files in {}", manifest.stages.len(), manifest.files.len(), out_dir.display());
        }
        Command::Report => {
            let manifest = verify_bundle(&out_dir)?;
            let summary = induction_lab::io::read_to_string(&out_dir.join("summary.json"))?;
            println!("config sha256 {}", manifest.config_sha256);
            println!("{} files verified", manifest.files.len());
            print!("{summary}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
