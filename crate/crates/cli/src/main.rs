use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dialflow::config::digest;
use dialflow::corpus::{load_sessions, DialogueSession, VerbLexicon};
use dialflow::evalkit::{self, MetricReport};
use dialflow::experiments::{self, TransferSpec};
use dialflow::generator::{generate, generate_jsonl, repl};
use dialflow::model::FLOW_GROUPS;
use dialflow::synth;
use dialflow::trainer::{self, load_model, TrainData, Trainer};
use dialflow::{Config, Error, Variant};

#[derive(Parser)]
#[command(name = "dialflow", version, about = "Dialogue generation with a discrete conversation-flow latent structure")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation variant: full, no_c, no_zS, no_zI, no_disentangle, no_zS_zI.
    #[arg(long)]
    ablation: Option<String>,
    /// Decode with latent means and argmax states.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a corpus from a Markov chain over states.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// JSON SynthSpec; overrides --domain.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "a")]
        domain: String,
        #[arg(long, default_value_t = 1000)]
        sessions: usize,
        #[arg(long, default_value_t = 5)]
        turns: usize,
    },
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        freeze_flow: bool,
        /// One verb per line; defaults to the built-in list.
        #[arg(long)]
        verbs: Option<PathBuf>,
    },
    /// Generate the last turn of every session and score it.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, required_unless_present = "echo")]
        checkpoint: Option<PathBuf>,
        /// Score the references against themselves.
        #[arg(long)]
        echo: bool,
    },
    /// Batch generation from a JSONL file of contexts.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `{"context_id": ..., "context": [...]}` per line.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interactive chat on stdin/stdout.
    Chat {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Assign states to a corpus and export clusters and transitions.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth state labels from `synth`; adds an AMI score.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Pretrain on one synthetic domain, fine-tune on another with and
    /// without a frozen flow prior.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Only fine-tune with the flow prior frozen.
        #[arg(long)]
        freeze_flow: bool,
        #[arg(long, default_value_t = TransferSpec::default().sessions_a)]
        sessions_a: usize,
        #[arg(long, default_value_t = TransferSpec::default().sessions_b)]
        sessions_b: usize,
        #[arg(long, default_value_t = TransferSpec::default().pretrain_steps)]
        pretrain_steps: usize,
        #[arg(long, default_value_t = TransferSpec::default().finetune_steps)]
        finetune_steps: usize,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    config: BTreeMap<String, String>,
    config_hash: String,
    /// Hash over the executable and every input file.
    content_hash: String,
    inputs: BTreeMap<String, String>,
    seed: u64,
    started: String,
    finished: String,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    frozen_params: Vec<String>,
}

/// An output directory that must not exist yet, plus what goes into its
/// manifest.
struct Run {
    dir: PathBuf,
    command: &'static str,
    started: String,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    frozen: Vec<String>,
}

const RUN_MANIFEST: &str = "run.json";

impl Run {
    fn create(dir: &Path, command: &'static str) -> anyhow::Result<Self> {
        if dir.exists() && fs::read_dir(dir)?.next().is_some() {
            bail!(CliError::RunExists(dir.to_path_buf()));
        }
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Run {
            dir: dir.to_path_buf(),
            command,
            started: now(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            frozen: Vec::new(),
        })
    }

    fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn finish(self, cfg: &Config, seed: u64) -> anyhow::Result<()> {
        let exe = std::env::current_exe()
            .ok()
            .and_then(|p| fs::read(p).ok())
            .map(|b| digest(&[&b]))
            .unwrap_or_default();
        let mut parts: Vec<&[u8]> = vec![exe.as_bytes()];
        for (k, v) in &self.inputs {
            parts.push(k.as_bytes());
            parts.push(v.as_bytes());
        }
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: std::env::args().skip(1).collect(),
            config: cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            config_hash: cfg.hash(),
            content_hash: digest(&parts),
            inputs: self.inputs,
            seed,
            started: self.started,
            finished: now(),
            outputs: self.outputs,
            frozen_params: self.frozen,
        };
        fs::write(self.dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("run directory {0} already exists and is not empty")]
    RunExists(PathBuf),
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn hash_path(path: &Path) -> anyhow::Result<String> {
    if path.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        names.sort();
        let mut parts = Vec::new();
        for p in names.iter().filter(|p| p.is_file()) {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            parts.push(name.into_bytes());
            parts.push(fs::read(p)?);
        }
        let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
        Ok(digest(&refs))
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(digest(&[&bytes]))
    }
}

/// Applies --config, --set, --seed, --ablation and --deterministic on top
/// of `base`.
fn resolve_config(mut base: Config, common: &Common) -> anyhow::Result<Config> {
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        base.apply_str(&text)?;
    }
    for kv in &common.overrides {
        base.apply_override(kv)?;
    }
    if let Some(seed) = common.seed {
        base.train.seed = seed;
        base.decode.seed = seed;
    }
    if let Some(a) = &common.ablation {
        base.train.variant = a.parse()?;
    }
    if common.deterministic {
        base.decode.deterministic_latents = true;
        base.decode.sample_states = false;
        base.decode.zs_from_prior = false;
    }
    base.validate()?;
    Ok(base)
}

fn checkpoint_config(dir: &Path, common: &Common) -> anyhow::Result<(dialflow::DialogueModel, dialflow::corpus::Vocabulary, Config)> {
    let (model, vocab, _, manifest) = load_model(dir)?;
    let cfg = resolve_config(manifest.config.clone(), common)?;
    if cfg.model != manifest.config.model {
        bail!(Error::Config("model.* keys cannot change for an existing checkpoint".into()));
    }
    Ok((model, vocab, cfg))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(common: &Common, out: &Path, spec_path: Option<&Path>, domain: &str, sessions: usize, turns: usize) -> anyhow::Result<()> {
    let cfg = resolve_config(Config::default(), common)?;
    let seed = common.seed.unwrap_or(0);
    let spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let mut spec: synth::SynthSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            spec
        }
        None => match domain {
            "a" => synth::domain_a(sessions, turns, seed),
            "b" => synth::domain_b(sessions, turns, seed),
            other => bail!(Error::Config(format!("unknown synthetic domain `{other}`, expected a or b"))),
        },
    };
    let corpus = synth::generate(&spec)?;
    let mut run = Run::create(out, "synth")?;
    if let Some(p) = spec_path {
        run.input(p)?;
    }
    let sessions_path = run.path("sessions.jsonl");
    let labels_path = run.path("labels.jsonl");
    synth::write_corpus(&corpus, &sessions_path, &labels_path)?;
    write_json(&run.path("spec.json"), &spec)?;
    eprintln!("wrote {} sessions to {}", corpus.sessions.len(), sessions_path.display());
    run.finish(&cfg, spec.seed)
}

fn load_lexicon(path: Option<&Path>) -> anyhow::Result<VerbLexicon> {
    Ok(match path {
        Some(p) => VerbLexicon::load(p)?,
        None => VerbLexicon::builtin(),
    })
}

fn cmd_train(common: &Common, corpus: &Path, out: &Path, checkpoint: Option<&Path>, freeze_flow: bool, verbs: Option<&Path>) -> anyhow::Result<()> {
    let lexicon = load_lexicon(verbs)?;
    let (mut trainer, data, cfg) = match checkpoint {
        Some(dir) => {
            let mut trainer = Trainer::resume(dir)?;
            let (_, vocab, _) = checkpoint_config(dir, common)?;
            let mut cfg = resolve_config(trainer.cfg.clone(), common)?;
            cfg.train.freeze_flow |= freeze_flow;
            let sessions = load_sessions(corpus, &cfg.model)?;
            let (train, val) = trainer::split_sessions(sessions, cfg.train.val_fraction, cfg.train.seed)?;
            let data = TrainData::with_vocab(train, val, vocab, lexicon);
            if cfg.train.freeze_flow {
                trainer.freeze(&FLOW_GROUPS)?;
            }
            trainer.cfg = cfg.clone();
            trainer.opt.lr = cfg.train.lr;
            (trainer, data, cfg)
        }
        None => {
            let mut cfg = resolve_config(Config::default(), common)?;
            cfg.train.freeze_flow |= freeze_flow;
            let sessions = load_sessions(corpus, &cfg.model)?;
            let data = TrainData::build(sessions, &cfg, lexicon)?;
            cfg.model.vocab_size = data.vocab.len();
            let model = dialflow::DialogueModel::new(&cfg.model, data.verbs.len(), cfg.train.seed)?;
            (Trainer::new(model, &cfg)?, data, cfg)
        }
    };
    let mut run = Run::create(out, "train")?;
    run.input(corpus)?;
    if let Some(dir) = checkpoint {
        run.input(dir)?;
    }
    if let Some(p) = verbs {
        run.input(p)?;
    }
    fs::write(run.path("config.txt"), cfg.to_flat_string())?;
    let log_path = run.path("metrics.jsonl");
    let mut log = io::BufWriter::new(fs::File::create(&log_path)?);
    let ckpt = run.path("checkpoints");
    let summary = trainer.train(&data, Some(&ckpt), &mut log)?;
    log.flush()?;
    trainer.save(&run.path("model"), &data)?;
    let brief = serde_json::json!({
        "steps": summary.steps,
        "best_step": summary.best_step,
        "best_val": summary.best_val,
        "stopped_early": summary.stopped_early,
    });
    write_json(&run.path("summary.json"), &brief)?;
    eprintln!("trained {} steps, best validation loss {:.4} at step {}", summary.steps, summary.best_val, summary.best_step);
    run.frozen = trainer.frozen.iter().cloned().collect();
    run.finish(&cfg, cfg.train.seed)
}

/// Last-turn prediction targets: the context is at most `window` turns.
fn split_targets(sessions: &[DialogueSession], window: usize) -> Vec<(DialogueSession, Vec<String>)> {
    sessions
        .iter()
        .map(|s| {
            let n = s.len();
            let lo = (n - 1).saturating_sub(window);
            let ctx = DialogueSession {
                id: s.id.clone(),
                utterances: s.utterances[lo..n - 1].to_vec(),
            };
            (ctx, s.utterances[n - 1].clone())
        })
        .collect()
}

fn cmd_eval(common: &Common, corpus: &Path, out: &Path, checkpoint: Option<&Path>, echo: bool) -> anyhow::Result<()> {
    let loaded = match checkpoint {
        Some(dir) if !echo => Some(checkpoint_config(dir, common)?),
        _ => None,
    };
    let cfg = match &loaded {
        Some((_, _, cfg)) => cfg.clone(),
        None => resolve_config(Config::default(), common)?,
    };
    let sessions = load_sessions(corpus, &cfg.model)?;
    let mut run = Run::create(out, "eval")?;
    run.input(corpus)?;
    if let Some(dir) = checkpoint.filter(|_| !echo) {
        run.input(dir)?;
    }
    let targets = split_targets(&sessions, cfg.model.history_window);
    let mut hyps = Vec::with_capacity(targets.len());
    let mut lines = String::new();
    for (ctx, reference) in &targets {
        let hyp = match &loaded {
            Some((model, vocab, cfg)) => generate(ctx, model, vocab, cfg.train.variant, &cfg.decode)?.trace.tokens,
            None => reference.clone(),
        };
        lines.push_str(&serde_json::to_string(&serde_json::json!({
            "id": ctx.id,
            "response": hyp.join(" "),
            "reference": reference.join(" "),
        }))?);
        lines.push('\n');
        hyps.push(hyp);
    }
    let refs: Vec<Vec<String>> = targets.into_iter().map(|(_, r)| r).collect();
    let report = MetricReport::compute(&hyps, &refs, &cfg.hash())?;
    fs::write(run.path("generations.jsonl"), lines)?;
    write_json(&run.path("metrics.json"), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    run.finish(&cfg, cfg.train.seed)
}

fn cmd_generate(common: &Common, checkpoint: &Path, input: &Path, out: &Path) -> anyhow::Result<()> {
    let (model, vocab, cfg) = checkpoint_config(checkpoint, common)?;
    let reader = BufReader::new(fs::File::open(input).map_err(|e| Error::io(input, e))?);
    let mut run = Run::create(out, "generate")?;
    run.input(checkpoint)?;
    run.input(input)?;
    let path = run.path("generations.jsonl");
    let mut writer = io::BufWriter::new(fs::File::create(&path)?);
    let n = generate_jsonl(reader, &mut writer, &model, &vocab, cfg.train.variant, &cfg.decode)?;
    writer.flush()?;
    eprintln!("generated {n} responses");
    run.finish(&cfg, cfg.decode.seed)
}

fn cmd_chat(common: &Common, checkpoint: &Path) -> anyhow::Result<()> {
    let (model, vocab, cfg) = checkpoint_config(checkpoint, common)?;
    let stdin = io::stdin();
    repl(stdin.lock(), io::stdout().lock(), &model, &vocab, cfg.train.variant, &cfg.decode)?;
    Ok(())
}

fn cmd_inspect(common: &Common, checkpoint: &Path, corpus: &Path, out: &Path, labels: Option<&Path>, top_k: usize) -> anyhow::Result<()> {
    let (model, vocab, cfg) = checkpoint_config(checkpoint, common)?;
    if !cfg.train.variant.uses_c() {
        bail!(Error::Config(format!("variant {} has no discrete states to inspect", cfg.train.variant)));
    }
    let sessions = load_sessions(corpus, &cfg.model)?;
    let mut run = Run::create(out, "inspect")?;
    run.input(checkpoint)?;
    run.input(corpus)?;
    let data = TrainData::with_vocab(Vec::new(), Vec::new(), vocab, VerbLexicon::builtin());
    let assign = evalkit::assign_states(&model, &data, &sessions, cfg.train.variant, cfg.train.batch_size)?;
    let matrix = evalkit::transition_matrix(&assign);
    evalkit::export_structure(&assign, &matrix, top_k, &run.dir)?;
    run.outputs.push("clusters.json".into());
    run.outputs.push("transitions.dot".into());
    let mut lines = String::new();
    for e in &assign.entries {
        lines.push_str(&serde_json::to_string(e)?);
        lines.push('\n');
    }
    fs::write(run.path("assignments.jsonl"), lines)?;
    let mut summary = serde_json::json!({
        "utterances": assign.entries.len(),
        "states_used": matrix.occupancy.iter().filter(|&&c| c > 0).count(),
        "empty_rows": matrix.empty_rows,
    });
    if let Some(p) = labels {
        run.input(p)?;
        let truth = synth::labels_for(&sessions, &synth::load_labels(p)?)?;
        summary["ami"] = evalkit::structure_recovery_score(&assign, &truth)?.into();
    }
    write_json(&run.path("summary.json"), &summary)?;
    println!("{summary}");
    run.finish(&cfg, cfg.train.seed)
}

#[allow(clippy::too_many_arguments)]
fn cmd_transfer(
    common: &Common,
    out: &Path,
    freeze_only: bool,
    sessions_a: usize,
    sessions_b: usize,
    pretrain_steps: usize,
    finetune_steps: usize,
) -> anyhow::Result<()> {
    let cfg = resolve_config(experiments::desk_config(4), common)?;
    let variants: Vec<Variant> = match &common.ablation {
        Some(_) => vec![cfg.train.variant],
        None => vec![Variant::Full, Variant::NoLatents],
    };
    let spec = TransferSpec {
        sessions_a,
        sessions_b,
        pretrain_steps,
        finetune_steps,
        num_states: cfg.model.num_states,
        seed: cfg.train.seed,
        ..TransferSpec::default()
    };
    let mut run = Run::create(out, "transfer")?;
    let result = experiments::run_transfer(&variants, &spec)?;
    let rows: Vec<serde_json::Value> = result
        .rows
        .iter()
        .map(|r| {
            if freeze_only {
                serde_json::json!({ "variant": r.variant, "frozen_nll": r.frozen_nll })
            } else {
                serde_json::to_value(r).unwrap_or_default()
            }
        })
        .collect();
    write_json(&run.path("transfer.json"), &serde_json::json!({ "spec": result.spec, "rows": rows }))?;
    for r in &result.rows {
        println!(
            "{:<10} unfrozen {:.4}  frozen {:.4}  degradation {:+.2}%",
            r.variant.name(),
            r.unfrozen_nll,
            r.frozen_nll,
            100.0 * r.degradation
        );
    }
    run.frozen = result.rows.first().map(|r| r.frozen_params.clone()).unwrap_or_default();
    run.finish(&cfg, spec.seed)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.cmd {
        Command::Synth { common, out, spec, domain, sessions, turns } => {
            cmd_synth(common, out, spec.as_deref(), domain, *sessions, *turns)
        }
        Command::Train { common, corpus, out, checkpoint, freeze_flow, verbs } => {
            cmd_train(common, corpus, out, checkpoint.as_deref(), *freeze_flow, verbs.as_deref())
        }
        Command::Eval { common, corpus, out, checkpoint, echo } => cmd_eval(common, corpus, out, checkpoint.as_deref(), *echo),
        Command::Generate { common, checkpoint, input, out } => cmd_generate(common, checkpoint, input, out),
        Command::Chat { common, checkpoint } => cmd_chat(common, checkpoint),
        Command::Inspect { common, checkpoint, corpus, out, labels, top_k } => {
            cmd_inspect(common, checkpoint, corpus, out, labels.as_deref(), *top_k)
        }
        Command::Transfer {
            common,
            out,
            freeze_flow,
            sessions_a,
            sessions_b,
            pretrain_steps,
            finetune_steps,
        } => cmd_transfer(common, out, *freeze_flow, *sessions_a, *sessions_b, *pretrain_steps, *finetune_steps),
    }
}

/// Exit codes: 2 configuration, 3 missing file or checkpoint, 4 data, 1 other.
fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Error>() {
        return match e {
            Error::Config(_) | Error::UnknownKey(_) | Error::BadValue { .. } | Error::UnknownVariant(_) | Error::UnknownParamGroup(_) => 2,
            Error::Io { .. } | Error::Stdio(_) | Error::Checkpoint(_) => 3,
            Error::Parse { .. } | Error::EmptyCorpus | Error::InvalidSession { .. } | Error::Stochastic(_) | Error::Json(_) => 4,
            _ => 1,
        };
    }
    if err.downcast_ref::<CliError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<io::Error>().is_some() {
        return 3;
    }
    1
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
