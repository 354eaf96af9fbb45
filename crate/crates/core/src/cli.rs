//! The `fomo` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::checkpoint::{encoder_record, lm_record, read_checkpoint, write_checkpoint, Bundle, CHECKPOINT_FORMAT_VERSION};
use crate::encoder::{embed_episodes, load_external_embeddings, warm_up, write_embeddings, Backend, EncoderConfig, EncoderParams, EMBEDDING_FORMAT_VERSION};
use crate::eval::{aggregate, eval_curves, score_instruction_variants, score_trajectory_variants, CurveBundle, EvalReport, REPORT_FORMAT_VERSION};
use crate::interface::{InterfaceConfig, InterfaceParams};
use crate::lm::{LmConfig, LmParams};
use crate::perturb::{perturb_episode, PerturbKind};
use crate::pretrain::{pretrain_lm, Bigram, PretrainConfig};
use crate::report::{emit_curves, emit_report, from_json, Format};
use crate::scoring::{CurveMode, Normalization, RewardModel};
use crate::training::{positive_items, train, write_metrics_csv, Models, Protocol, TrainHyper};
use crate::vocab::Vocab;
use crate::world::dataset::{gen_dataset, load_dataset, write_dataset, FORMAT_VERSION};
use crate::world::{DatasetConfig, Episode, TaskId};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fomo", about = "Instruction log-likelihood rewards on a procedural tabletop world", disable_version_flag = true)]
struct Cli {
    /// Print the crate version and the file format versions.
    #[arg(long, short = 'V')]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a train/eval dataset of oracle episodes.
    GenData(GenData),
    /// Write a perturbed copy of a dataset.
    Perturb(PerturbCmd),
    /// Embed a dataset's frames, optionally warming up a new encoder first.
    Encode(Encode),
    /// Pretrain the language model on a dataset's instructions.
    PretrainLm(PretrainLm),
    /// Train the interface under one protocol.
    TrainInterface(TrainInterface),
    /// Write per-step reward curves of every episode.
    Score(Score),
    /// Instruction log-likelihood under correct and perturbed trajectories.
    EvalTraj(Eval),
    /// Log-likelihood of correct and perturbed instructions.
    EvalInstr(Eval),
    /// Mean reward curves per task, variant and trajectory length.
    EvalCurves(EvalCurvesCmd),
    /// Re-emit a report or curve bundle JSON as CSV and SVG.
    Report(ReportCmd),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    /// Comma separated task list.
    #[arg(long, default_value = "T1,T2,T3,T4,T5,T6,T7")]
    tasks: String,
    #[arg(long, default_value_t = 300)]
    episodes_per_task: usize,
    #[arg(long, default_value_t = 10.0 / 11.0)]
    split_fraction: f64,
    /// Grid size as ROWSxCOLS.
    #[arg(long, default_value = "8x8")]
    grid: String,
    #[arg(long, default_value_t = 0.0)]
    failure_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PerturbCmd {
    #[arg(long)]
    dataset: PathBuf,
    /// PT_Rev, PT_Rep, PT_Len, PT_Inc, PI_Obj, PI_Col, PI_Tex or PI_Comb.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct Encode {
    #[arg(long)]
    dataset: PathBuf,
    /// Existing encoder checkpoint. Without it a new encoder is warmed up on the dataset.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Encoder config JSON for a new encoder.
    #[arg(long)]
    encoder_config: Option<PathBuf>,
    /// Where to save a newly warmed-up encoder.
    #[arg(long)]
    encoder_out: Option<PathBuf>,
    /// Embedding file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Language-model config file: architecture plus optimization settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmRunConfig {
    pub model: Option<LmConfig>,
    pub pretrain: PretrainConfig,
}

#[derive(Args, Debug)]
struct PretrainLm {
    /// Training dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Held-out dataset for perplexity; defaults to the sibling `eval` split.
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainInterface {
    #[arg(long)]
    protocol: String,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    lm: PathBuf,
    /// Encoder checkpoint (builtin backend).
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Precomputed embeddings aligned with the dataset manifest.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    hyper: Option<PathBuf>,
    #[arg(long)]
    interface_config: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct Source {
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint files; later files override earlier components.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    /// Precomputed embeddings aligned with the dataset manifest.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct Score {
    #[command(flatten)]
    src: Source,
    #[arg(long, default_value = "raw")]
    mode: String,
    #[arg(long, default_value = "sum")]
    norm: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Eval {
    #[command(flatten)]
    src: Source,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    n_min: usize,
    #[arg(long, default_value = "json,csv")]
    formats: String,
}

#[derive(Args, Debug)]
struct EvalCurvesCmd {
    #[command(flatten)]
    src: Source,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "sum")]
    norm: String,
    /// Keep every individual curve in the JSON output.
    #[arg(long)]
    single_items: bool,
    #[arg(long, default_value = "json,csv,svg")]
    formats: String,
}

#[derive(Args, Debug)]
struct ReportCmd {
    /// Report or curve bundle JSON.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "csv,svg")]
    formats: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Version banner with every on-disk format version.
pub fn version_text() -> String {
    format!(
        "fomo {}\ndataset format {FORMAT_VERSION}\ncheckpoint format {CHECKPOINT_FORMAT_VERSION}\nembedding format {EMBEDDING_FORMAT_VERSION}\nreport format {REPORT_FORMAT_VERSION}\n",
        env!("CARGO_PKG_VERSION")
    )
}

/// Runs the CLI. Exit codes: 0 success, 1 usage error, 2 runtime error.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    if cli.version {
        let _ = write!(out, "{}", version_text());
        return 0;
    }
    let Some(cmd) = cli.command else {
        let _ = writeln!(err, "{}", <Cli as clap::CommandFactory>::command().render_usage());
        let _ = writeln!(err, "a subcommand is required; see `fomo --help`");
        return 1;
    };
    match dispatch(cmd, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if matches!(e, Error::BadConfig(_) | Error::BadKind(_) | Error::BadTask(_)) {
                1
            } else {
                2
            }
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(T::default()),
    }
}

fn parse_formats(s: &str) -> Result<Vec<Format>> {
    s.split(',').filter(|f| !f.is_empty()).map(|f| f.trim().parse()).collect()
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::BadConfig(format!("grid `{s}` is not ROWSxCOLS"));
    let (r, c) = s.split_once('x').ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

fn log(err: &mut dyn Write, msg: impl std::fmt::Display) {
    let _ = writeln!(err, "{msg}");
}

/// Embeddings for every episode, from a file or the bundle's encoder.
fn embeddings_for(episodes: &[Episode], file: Option<&Path>, encoder: Option<&EncoderParams>, expected_d: usize) -> Result<Vec<Tensor>> {
    match (file, encoder) {
        (Some(p), _) => {
            let e = load_external_embeddings(p, Some(expected_d))?;
            if e.len() != episodes.len() {
                return Err(Error::DimMismatch(format!("{} embedded trajectories for {} episodes", e.len(), episodes.len())));
            }
            for (t, ep) in e.iter().zip(episodes) {
                if t.rows != ep.trajectory.len() {
                    return Err(Error::DimMismatch(format!("embedding of {} has {} rows for {} frames", ep.trajectory.seed, t.rows, ep.trajectory.len())));
                }
            }
            Ok(e)
        }
        (None, Some(enc)) => embed_episodes(episodes, enc),
        (None, None) => Err(Error::MissingParams("need --embeddings or an encoder checkpoint".into())),
    }
}

fn reward_model(bundle: &Bundle) -> Result<RewardModel> {
    RewardModel::new(bundle.need_lm()?.clone(), bundle.need_interface()?.clone())
}

struct Loaded {
    episodes: Vec<Episode>,
    embeddings: Vec<Tensor>,
    rm: RewardModel,
    protocol: String,
}

fn load_source(src: &Source) -> Result<Loaded> {
    let paths: Vec<&Path> = src.checkpoint.iter().map(PathBuf::as_path).collect();
    let bundle = Bundle::read(&paths)?;
    let rm = reward_model(&bundle)?;
    let (_, episodes) = load_dataset(&src.dataset)?;
    let embeddings = embeddings_for(&episodes, src.embeddings.as_deref(), bundle.encoder.as_ref(), rm.interface.config.d_v)?;
    let protocol = bundle.interface_protocol().unwrap_or_else(|| "untrained".into());
    Ok(Loaded { episodes, embeddings, rm, protocol })
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData(a) => {
            let cfg = DatasetConfig {
                tasks: TaskId::parse_list(&a.tasks)?,
                episodes_per_task: a.episodes_per_task,
                seed: a.seed,
                split_fraction: a.split_fraction,
                grid_size: parse_grid(&a.grid)?,
                failure_rate: a.failure_rate,
            };
            let (t, e) = gen_dataset(&cfg, &a.out)?;
            let _ = writeln!(out, "wrote {} train and {} eval episodes under {}", t.records.len(), e.records.len(), a.out.display());
        }
        Command::Perturb(a) => {
            let kind: PerturbKind = a.kind.parse()?;
            let (manifest, episodes) = load_dataset(&a.dataset)?;
            let pool: Vec<_> = episodes.iter().map(|e| e.trajectory.clone()).collect();
            let mut perturbed = Vec::with_capacity(episodes.len());
            for ep in &episodes {
                let same_task: Vec<_> = pool.iter().filter(|t| t.task.task_id == ep.task()).cloned().collect();
                let seed = crate::world::scene::mix_seed(&[a.seed, ep.trajectory.seed]);
                perturbed.push(perturb_episode(ep, kind, seed, &same_task)?);
            }
            let m = write_dataset(&a.out, &perturbed, manifest.split)?;
            let _ = writeln!(out, "wrote {} {kind} episodes under {}", m.records.len(), a.out.display());
        }
        Command::Encode(a) => {
            let (_, episodes) = load_dataset(&a.dataset)?;
            let enc = match &a.encoder {
                Some(p) => Bundle::from_records(&read_checkpoint(p)?)?.need_encoder()?.clone(),
                None => {
                    let cfg: EncoderConfig = read_json(a.encoder_config.as_deref())?;
                    if cfg.backend == Backend::External {
                        return Err(Error::BadConfig("external backend embeddings are produced outside this tool".into()));
                    }
                    let mut enc = EncoderParams::init(&cfg, a.seed)?;
                    let rep = warm_up(&mut enc, &episodes, a.seed)?;
                    log(err, format!("encoder warm-up loss {:.4} -> {:.4}", rep.initial_loss, rep.final_loss));
                    if let Some(p) = &a.encoder_out {
                        write_checkpoint(p, &[encoder_record(&enc, !cfg.joint_training)?])?;
                    }
                    enc
                }
            };
            let emb = embed_episodes(&episodes, &enc)?;
            write_embeddings(&a.out, &emb)?;
            let _ = writeln!(out, "embedded {} trajectories into {}", emb.len(), a.out.display());
        }
        Command::PretrainLm(a) => {
            let mut cfg: LmRunConfig = read_json(a.config.as_deref())?;
            if let Some(s) = a.seed {
                cfg.pretrain.seed = s;
            }
            let model = cfg.model.clone().unwrap_or_default();
            if model.vocab_size != Vocab::standard().len() {
                return Err(Error::BadConfig(format!("vocab_size must be {}", Vocab::standard().len())));
            }
            let (_, train_eps) = load_dataset(&a.dataset)?;
            let heldout_dir = match &a.heldout {
                Some(p) => Some(p.clone()),
                None => a.dataset.parent().map(|p| p.join("eval")).filter(|p| p.join("manifest.json").exists()),
            };
            let heldout_eps = match &heldout_dir {
                Some(d) => load_dataset(d)?.1,
                None => Vec::new(),
            };
            let train_i: Vec<_> = train_eps.iter().map(|e| e.instruction.clone()).collect();
            let held_i: Vec<_> = heldout_eps.iter().map(|e| e.instruction.clone()).collect();
            let mut lm = LmParams::init(&model, cfg.pretrain.seed)?;
            let rep = pretrain_lm(&mut lm, &train_i, &held_i, &cfg.pretrain, |s, l| {
                if s % 250 == 0 {
                    log(err, format!("step {s} loss {l:.4}"));
                }
            })?;
            let eval_set = if held_i.is_empty() { &train_i } else { &held_i };
            let bigram = Bigram::fit(&train_i, model.vocab_size, 0.01).perplexity(eval_set);
            write_checkpoint(&a.out, &[lm_record(&lm, true)?])?;
            let _ = writeln!(out, "held-out perplexity {:.4} (bigram baseline {:.4})", rep.heldout_ppl, bigram);
            if !rep.converged {
                log(err, format!("warning: {}", Error::DidNotConverge { got: rep.heldout_ppl, target: cfg.pretrain.ppl_threshold }));
            }
        }
        Command::TrainInterface(a) => {
            let mut hyper: TrainHyper = read_json(a.hyper.as_deref())?;
            hyper.protocol = a.protocol.parse::<Protocol>()?;
            if let Some(s) = a.seed {
                hyper.seed = s;
            }
            if let Some(m) = a.max_steps {
                hyper.max_steps = m;
            }
            let lm = Bundle::from_records(&read_checkpoint(&a.lm)?)?.need_lm()?.clone();
            let encoder = match &a.encoder {
                Some(p) => Some(Bundle::from_records(&read_checkpoint(p)?)?.need_encoder()?.clone()),
                None => None,
            };
            let (_, episodes) = load_dataset(&a.dataset)?;
            let mut icfg: InterfaceConfig = match &a.interface_config {
                Some(p) => read_json(Some(p))?,
                None => InterfaceConfig { d_model: lm.config.d_model, ..InterfaceConfig::default() },
            };
            if let Some(e) = &encoder {
                if a.interface_config.is_none() {
                    icfg.d_v = e.config.d_v;
                }
            }
            let emb = embeddings_for(&episodes, a.embeddings.as_deref(), encoder.as_ref(), icfg.d_v)?;
            let joint = encoder.as_ref().is_some_and(|e| e.config.joint_training);
            let items = positive_items(&episodes, &emb, joint)?;
            let interface = InterfaceParams::init(&icfg, hyper.seed)?;
            let encoder_params = match encoder {
                Some(e) => e,
                None => EncoderParams::init(&EncoderConfig { backend: Backend::External, d_v: icfg.d_v, ..EncoderConfig::default() }, 0)?,
            };
            let mut models = Models { lm, encoder: encoder_params, interface };
            let outcome = train(&items, &mut models, &hyper, joint, |m| {
                if m.step % 250 == 0 {
                    log(err, format!("step {} loss {:.4} pos {:.4} neg {:.4}", m.step, m.loss, m.pos_term, m.neg_term));
                }
            })?;
            let bundle = Bundle {
                lm: Some(models.lm),
                encoder: a.encoder.is_some().then_some(models.encoder),
                interface: Some(models.interface),
                interface_training: Some(serde_json::to_value(&hyper)?),
            };
            write_checkpoint(&a.out, &bundle.records()?)?;
            if let Some(p) = &a.metrics {
                write_metrics_csv(p, &outcome.metrics)?;
            }
            let last = outcome.metrics.last().map_or(f64::NAN, |m| m.loss);
            let _ = writeln!(out, "trained {} steps ({}), final loss {last:.4}", hyper.max_steps, hyper.protocol);
        }
        Command::Score(a) => {
            let mode: CurveMode = match a.mode.as_str() {
                "raw" => CurveMode::Raw,
                "delta" => CurveMode::Delta,
                m => return Err(Error::BadConfig(format!("unknown curve mode `{m}`"))),
            };
            let norm: Normalization = a.norm.parse()?;
            let l = load_source(&a.src)?;
            let mut w = csv::Writer::from_path(&a.out).map_err(|e| Error::io(&a.out, std::io::Error::other(e)))?;
            let io = |e: csv::Error| Error::io(&a.out, std::io::Error::other(e));
            w.write_record(["task_id", "seed", "t", "value"]).map_err(io)?;
            for (ep, vs) in l.episodes.iter().zip(&l.embeddings) {
                let c = l.rm.reward_curve(&ep.instruction, vs, mode, norm)?;
                for (t, v) in c.values.iter().enumerate() {
                    w.write_record([ep.task().to_string(), ep.trajectory.seed.to_string(), (t + 1).to_string(), format!("{v}")]).map_err(io)?;
                }
            }
            w.flush().map_err(|e| Error::io(&a.out, e))?;
            let _ = writeln!(out, "scored {} episodes into {}", l.episodes.len(), a.out.display());
        }
        Command::EvalTraj(a) => eval_table(a, "traj", out)?,
        Command::EvalInstr(a) => eval_table(a, "instr", out)?,
        Command::EvalCurves(a) => {
            let norm: Normalization = a.norm.parse()?;
            let formats = parse_formats(&a.formats)?;
            let l = load_source(&a.src)?;
            let b = eval_curves(&l.rm, &l.episodes, &l.embeddings, a.src.seed, norm, a.single_items, &l.protocol)?;
            let files = emit_curves(&b, &a.out, "curves", &formats)?;
            let _ = writeln!(out, "wrote {} files under {}", files.len(), a.out.display());
        }
        Command::Report(a) => {
            let formats = parse_formats(&a.formats)?;
            let text = fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e))?;
            let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("report").to_string();
            let files = if let Ok(r) = from_json::<EvalReport>(&text) {
                emit_report(&r, &a.out, &stem, &formats)?
            } else {
                let b: CurveBundle = from_json(&text)?;
                emit_curves(&b, &a.out, &stem, &formats)?
            };
            let _ = writeln!(out, "wrote {} files under {}", files.len(), a.out.display());
        }
    }
    Ok(())
}

/// Scores a table and writes it under both normalizations.
fn eval_table(a: Eval, which: &str, out: &mut dyn Write) -> Result<()> {
    let formats = parse_formats(&a.formats)?;
    let l = load_source(&a.src)?;
    let scores = if which == "traj" {
        score_trajectory_variants(&l.rm, &l.episodes, &l.embeddings, a.src.seed)?
    } else {
        score_instruction_variants(&l.rm, &l.episodes, &l.embeddings, a.src.seed)?
    };
    let mut n = 0;
    for norm in [Normalization::Sum, Normalization::PerToken] {
        let r = aggregate(&scores, norm, a.n_min, &l.protocol)?;
        n += emit_report(&r, &a.out, &format!("{which}_{norm}"), &formats)?.len();
    }
    let _ = writeln!(out, "wrote {n} files under {}", a.out.display());
    Ok(())
}
