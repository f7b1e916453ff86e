//! Command-line front end. [`dispatch`] parses `argv`, runs one subcommand
//! and returns the process exit code: 0 on success, 1 for usage and
//! validation errors, 2 for I/O and format errors.
//!
//! Machine-readable output (JSON / JSONL) goes to stdout, progress to stderr.
//! Configs are JSON files whose keys mirror the config structs; `--set
//! a.b=value` overrides one dotted path (the value is parsed as JSON, falling
//! back to a plain string).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::annotations::{load_dataset, Dataset};
use crate::encoders::{planted_pair_generator, EmbeddingMatrix, FrameStore, PlantedConfig, TextConfig};
use crate::error::{Error, FormatError, Result};
use crate::evaluation::{
    caption_accuracy, cosine_matrix, load_compose_cases, retrieval_metrics, zero_shot_classify, EvalError, DEFAULT_KS,
};
use crate::negatives::{make_role_noun_negatives, make_verb_role_negatives, noun_pool, verb_frames, NegativeError};
use crate::numerics::{Checkpoint, Precision, Real, Tensor};
use crate::prompting::{positive_prompt, render_action_prompt, PromptRecord, PromptStyle};
use crate::trainer::{make_batches, mix_seed, BatchStrategy, Model, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "srl-adapt", version, about = "Verb/role-annotated video-text adaptation toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON config file; keys mirror the config struct field names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field by dotted path, e.g. `--set lora_rank=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Annotation JSON file.
    #[arg(long)]
    annotations: PathBuf,
    /// Packed FGEMB1 frame grids addressed by `emb:<row>` references.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Base directory for path frame references (default: the annotation file's directory).
    #[arg(long)]
    frames_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Checkpoint to evaluate; without one the untrained (frozen) model is used.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render one positive prompt per event as JSONL.
    GenPrompts {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, value_enum, default_value = "template")]
        style: StyleArg,
        /// Also emit the action-only prompt of every event.
        #[arg(long)]
        action: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate verb-role and role-noun hard negatives per event as JSONL.
    GenNegatives {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 4)]
        nvr: usize,
        #[arg(long, default_value_t = 0)]
        nrn: usize,
        #[arg(long, default_value_t = 0.5)]
        swap_fraction: f64,
        /// Draw replacement verbs and nouns from batches of this many videos
        /// (default: the whole file is one pool).
        #[arg(long)]
        batch_videos: Option<usize>,
        #[arg(long, value_enum, default_value = "template")]
        style: StyleArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a planted synthetic dataset: annotations, frame grids and caption cases.
    SynthData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train adapters and the contextualizer; writes checkpoints, a loss log and config.json.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Text-to-video (or event-to-text) retrieval metrics.
    EvalRetrieval {
        #[command(flatten)]
        data: Option<DataArgs>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value = "video")]
        level: Level,
        /// Event level: use mean-pooled frames instead of the contextualizer.
        #[arg(long)]
        pooled: bool,
        /// Precomputed visual embeddings (FGEMB1); pairs with `--text-emb` by row id.
        #[arg(long, requires = "text_emb", conflicts_with = "annotations")]
        visual_emb: Option<PathBuf>,
        #[arg(long, requires = "visual_emb")]
        text_emb: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-shot verb classification of events with action-only prompts.
    EvalClassify {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        pooled: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-or-more-caption choice accuracy over a JSONL case file.
    EvalCompose {
        #[arg(long)]
        cases: PathBuf,
        /// Visual embeddings by id (FGEMB1). Without it, event embeddings are
        /// computed from `--annotations`/`--frames` and keyed by event id.
        #[arg(long, conflicts_with = "annotations")]
        visual_emb: Option<PathBuf>,
        #[command(flatten)]
        data: Option<DataArgs>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        pooled: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print parameter names, shapes and norms of a checkpoint as JSON.
    InspectCkpt {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum StyleArg {
    Template,
    Listed,
    Natural,
}

impl From<StyleArg> for PromptStyle {
    fn from(s: StyleArg) -> Self {
        match s {
            StyleArg::Template => PromptStyle::Template,
            StyleArg::Listed => PromptStyle::Listed,
            StyleArg::Natural => PromptStyle::Natural,
        }
    }
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum Level {
    Video,
    Event,
}

/// Config of `synth-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub data: PlantedConfig,
    /// Must match the text embedder of the model that will be trained.
    pub text: TextConfig,
    /// Trailing videos written to `test.json` instead of `train.json`.
    pub holdout: usize,
    /// Hard negatives per caption case in `compose.jsonl`.
    pub compose_negatives: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            data: PlantedConfig::default(),
            text: TextConfig::default(),
            holdout: 8,
            compose_negatives: 3,
        }
    }
}

/// Run the CLI on `argv` (including the program name).
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match cli.global.threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return 1;
        }
    };
    match pool.install(|| run(cli.command, cli.global.seed)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cmd: Command, seed: Option<u64>) -> Result<()> {
    match cmd {
        Command::GenPrompts {
            annotations,
            style,
            action,
            out,
        } => gen_prompts(&annotations, style.into(), action, out.as_deref()),
        Command::GenNegatives {
            annotations,
            nvr,
            nrn,
            swap_fraction,
            batch_videos,
            style,
            out,
        } => {
            let opts = NegOpts {
                nvr,
                nrn,
                swap_fraction,
                batch_videos,
                style: style.into(),
                seed: seed.unwrap_or(0),
            };
            gen_negatives(&annotations, &opts, out.as_deref())
        }
        Command::SynthData { config, out_dir } => synth_data(&config, seed, &out_dir),
        Command::Train {
            data,
            config,
            out_dir,
            resume,
        } => {
            let mut cfg: TrainConfig = load_config(config.config.as_deref(), &config.sets)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            match cfg.precision {
                Precision::F32 => train::<f32>(&data, cfg, &out_dir, resume.as_deref()),
                Precision::F64 => train::<f64>(&data, cfg, &out_dir, resume.as_deref()),
            }
        }
        Command::EvalRetrieval {
            data,
            model,
            level,
            pooled,
            visual_emb,
            text_emb,
            out,
        } => {
            let report = match (visual_emb, text_emb, data) {
                (Some(v), Some(t), _) => retrieval_from_files(&v, &t)?,
                (_, _, Some(data)) => {
                    let m = load_model(&model)?;
                    let dataset = load_dataset(&data.annotations)?;
                    let frames = frame_store(&data, &m)?;
                    let style = m.1.prompt_style;
                    let (visual, text) = match level {
                        Level::Video => (
                            m.0.video_embeddings(&dataset, &frames)?,
                            m.0.video_text_embeddings(&dataset, style)?,
                        ),
                        Level::Event => (
                            m.0.event_embeddings(&dataset, &frames, m.1.frames_per_event, !pooled)?,
                            m.0.event_text_embeddings(&dataset, style)?,
                        ),
                    };
                    let metrics = match level {
                        Level::Video => retrieval_metrics(&cosine_matrix(&text, &visual)?, &DEFAULT_KS)?,
                        Level::Event => retrieval_metrics(&cosine_matrix(&visual, &text)?, &DEFAULT_KS)?,
                    };
                    let mut s = metrics.summary();
                    s["level"] = json!(match level {
                        Level::Video => "video",
                        Level::Event => "event",
                    });
                    s
                }
                _ => return Err(Error::Config("need --annotations or --visual-emb/--text-emb".into())),
            };
            emit(&report, out.as_deref())
        }
        Command::EvalClassify {
            data,
            model,
            pooled,
            out,
        } => {
            let m = load_model(&model)?;
            let dataset = load_dataset(&data.annotations)?;
            let frames = frame_store(&data, &m)?;
            let emb = m.0.event_embeddings(&dataset, &frames, m.1.frames_per_event, !pooled)?;
            let mut classes: Vec<&str> = dataset.events().map(|(_, e)| e.verb.as_str()).collect();
            classes.sort_unstable();
            classes.dedup();
            let prompts: Vec<String> = classes
                .iter()
                .map(|v| format!("{}{v}.", crate::prompting::PREFIX))
                .collect();
            let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
            let class_emb = m.0.embed_texts(&refs)?;
            let labels: Vec<usize> = dataset
                .events()
                .map(|(_, e)| classes.binary_search(&e.verb.as_str()).expect("class of every event"))
                .collect();
            let r = zero_shot_classify(&emb, &class_emb, &labels)?;
            emit(&json!({"top1": r.top1, "top5": r.top5, "samples": r.samples, "classes": classes.len()}), out.as_deref())
        }
        Command::EvalCompose {
            cases,
            visual_emb,
            data,
            model,
            pooled,
            out,
        } => {
            let m = load_model(&model)?;
            let cases = load_compose_cases(&cases)?;
            let visual = match (visual_emb, data) {
                (Some(path), _) => EmbeddingMatrix::load(path)?,
                (None, Some(data)) => {
                    let dataset = load_dataset(&data.annotations)?;
                    let frames = frame_store(&data, &m)?;
                    let emb = m.0.event_embeddings(&dataset, &frames, m.1.frames_per_event, !pooled)?;
                    let ids = dataset.events().map(|(_, e)| e.event_id.clone()).collect();
                    EmbeddingMatrix::new(emb.row_len(), emb.data().to_vec(), ids)?
                }
                (None, None) => return Err(Error::Config("need --visual-emb or --annotations".into())),
            };
            let r = caption_accuracy(
                &cases,
                |id| visual.row_by_id(id).map(<[f32]>::to_vec),
                |texts| m.0.embed_texts(texts),
            )?;
            emit(&json!({"accuracy": r.accuracy, "correct": r.correct, "cases": r.cases}), out.as_deref())
        }
        Command::InspectCkpt { ckpt } => {
            let c = Checkpoint::load(&ckpt)?;
            let entries: Vec<Value> = c
                .entries
                .iter()
                .map(|(name, t)| {
                    let norm = t.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                    json!({"name": name, "shape": t.shape(), "norm": norm})
                })
                .collect();
            emit(&json!({"entries": entries, "count": c.entries.len()}), None)
        }
    }
}

/// Defaults of `T`, deep-merged with the JSON file, then the `--set` overrides.
pub fn load_config<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>, sets: &[String]) -> Result<T> {
    let mut v = serde_json::to_value(T::default()).expect("config serializes");
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| FormatError::Invalid(format!("{}: {e}", p.display())))?;
        merge(&mut v, file);
    }
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut v, key, value)?;
    }
    serde_path_to_error::deserialize(v).map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("empty segment in --set key {key:?}")));
        }
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("--set {key}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one segment")
}

/// Pretty JSON to stdout and, with `out`, to a file.
fn emit(v: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("report serializes");
    if let Some(p) = out {
        std::fs::write(p, format!("{text}\n"))?;
    }
    stdout(format!("{text}\n").as_bytes())
}

/// Write to stdout; a closed pipe (e.g. `| head`) is not an error.
fn stdout(bytes: &[u8]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(bytes).and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

/// JSONL lines to `out`, or to stdout when absent; a summary goes to stdout in the former case.
fn emit_lines(records: &[PromptRecord], out: Option<&Path>) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("record serializes"));
        buf.push('\n');
    }
    match out {
        Some(p) => {
            std::fs::write(p, buf)?;
            let summary = json!({"records": records.len(), "out": p.display().to_string()});
            stdout(format!("{summary}\n").as_bytes())
        }
        None => stdout(buf.as_bytes()),
    }
}

fn gen_prompts(path: &Path, style: PromptStyle, action: bool, out: Option<&Path>) -> Result<()> {
    let dataset = load_dataset(path)?;
    let mut records = Vec::new();
    for (_, e) in dataset.events() {
        records.push(positive_prompt(e, style)?);
        if action {
            records.push(render_action_prompt(e));
        }
    }
    emit_lines(&records, out)
}

struct NegOpts {
    nvr: usize,
    nrn: usize,
    swap_fraction: f64,
    batch_videos: Option<usize>,
    style: PromptStyle,
    seed: u64,
}

fn gen_negatives(path: &Path, o: &NegOpts, out: Option<&Path>) -> Result<()> {
    let dataset = load_dataset(path)?;
    let lexicon = crate::annotations::build_verb_lexicon(&dataset);
    let groups: Vec<Vec<usize>> = match o.batch_videos {
        Some(b) => make_batches(&dataset, BatchStrategy::Default, b, mix_seed(&[o.seed, 10]))?
            .into_iter()
            .map(|b| b.videos)
            .collect(),
        None => vec![(0..dataset.videos.len()).collect()],
    };
    let style = o.style.template();
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for videos in groups {
        let events: Vec<_> = videos.iter().flat_map(|&v| dataset.videos[v].events.iter()).collect();
        let frames = verb_frames(events.iter().copied(), &lexicon);
        let pool = noun_pool(events.iter().copied());
        for &v in &videos {
            for (k, e) in dataset.videos[v].events.iter().enumerate() {
                let (v64, k64) = (v as u64, k as u64);
                let vr = make_verb_role_negatives(e, &frames, o.nvr, mix_seed(&[o.seed, 20, v64, k64]), style);
                let rn = make_role_noun_negatives(
                    e,
                    &pool,
                    o.nrn,
                    o.swap_fraction,
                    mix_seed(&[o.seed, 21, v64, k64]),
                    style,
                );
                for r in [vr, if o.nrn == 0 { Ok(Vec::new()) } else { rn }] {
                    match r {
                        Ok(mut negs) => records.append(&mut negs),
                        Err(err @ (NegativeError::PoolExhausted { .. } | NegativeError::Unsatisfiable { .. })) => {
                            eprintln!("skipped: {err}");
                            skipped += 1;
                        }
                        Err(err) => return Err(err.into()),
                    }
                }
            }
        }
    }
    if skipped > 0 {
        eprintln!("{skipped} event(s) without a full negative budget");
    }
    emit_lines(&records, out)
}

fn synth_data(args: &ConfigArgs, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let cfg: SynthConfig = load_config(args.config.as_deref(), &args.sets)?;
    if cfg.holdout >= cfg.data.videos {
        return Err(Error::Config(format!(
            "holdout {} leaves no training videos out of {}",
            cfg.holdout, cfg.data.videos
        )));
    }
    let seed = seed.unwrap_or(0);
    let planted = planted_pair_generator(&cfg.data, &cfg.text, seed);
    std::fs::create_dir_all(out_dir)?;
    let n_train = cfg.data.videos - cfg.holdout;
    let train = Dataset::new(planted.dataset.videos[..n_train].to_vec(), "train")?;
    train.save(out_dir.join("train.json"))?;
    let mut files = vec!["train.json".to_string()];
    if cfg.holdout > 0 {
        let test = Dataset::new(planted.dataset.videos[n_train..].to_vec(), "test")?;
        test.save(out_dir.join("test.json"))?;
        files.push("test.json".into());
    }
    planted.frames.save(out_dir.join("frames.fgemb"))?;
    files.push("frames.fgemb".into());

    // Caption cases for the held-out events (all events without a holdout):
    // each event's template prompt against verb-role negatives.
    let lexicon = crate::annotations::build_verb_lexicon(&planted.dataset);
    let first = if cfg.holdout > 0 { n_train } else { 0 };
    let all: Vec<_> = planted.dataset.videos[first..].iter().flat_map(|v| v.events.iter()).collect();
    let frames = verb_frames(all.iter().copied(), &lexicon);
    let mut lines = String::new();
    for (i, e) in all.iter().enumerate() {
        let negs = make_verb_role_negatives(
            e,
            &frames,
            cfg.compose_negatives,
            mix_seed(&[seed, 40, i as u64]),
            PromptStyle::Template.template(),
        )?;
        let case = json!({
            "id": e.event_id,
            "positive": positive_prompt(e, PromptStyle::Template)?.text,
            "negatives": negs.into_iter().map(|r| r.text).collect::<Vec<_>>(),
        });
        lines.push_str(&case.to_string());
        lines.push('\n');
    }
    std::fs::write(out_dir.join("compose.jsonl"), lines)?;
    files.push("compose.jsonl".into());
    std::fs::write(
        out_dir.join("synth_config.json"),
        serde_json::to_string_pretty(&cfg).expect("config serializes"),
    )?;
    emit(
        &json!({
            "out_dir": out_dir.display().to_string(),
            "files": files,
            "videos": cfg.data.videos,
            "train_videos": n_train,
            "events": planted.dataset.num_events(),
            "frames": planted.frames.rows(),
        }),
        None,
    )
}

fn frames_for(data: &DataArgs, tokens: usize, input_dim: usize) -> Result<FrameStore> {
    let packed = data.frames.as_ref().map(EmbeddingMatrix::load).transpose()?;
    let base = data.frames_dir.clone().unwrap_or_else(|| {
        data.annotations
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    Ok(FrameStore::new(packed, base, tokens, input_dim))
}

fn frame_store<F: Real>(data: &DataArgs, m: &(Model<F>, TrainConfig)) -> Result<FrameStore> {
    let bb = &m.1.model.backbone;
    frames_for(data, bb.tokens, bb.input_dim)
}

fn train<F: Real>(data: &DataArgs, cfg: TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<()> {
    let dataset = load_dataset(&data.annotations)?;
    let frames = frames_for(data, cfg.model.backbone.tokens, cfg.model.backbone.input_dim)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(&cfg).expect("config serializes"),
    )?;
    let mut trainer = match resume {
        Some(p) => Trainer::<F>::resume(&dataset, &frames, cfg.clone(), &Checkpoint::load(p)?)?,
        None => Trainer::<F>::new(&dataset, &frames, cfg.clone())?,
    };
    eprintln!(
        "training {} videos, {} adapter parameters, epochs {}..{}",
        dataset.videos.len(),
        trainer.model.adapter_params(),
        trainer.epochs_done,
        cfg.epochs
    );
    let start = trainer.epochs_done;
    trainer.run(Some(out_dir))?;
    for (i, loss) in trainer.outcome.epoch_losses.iter().enumerate() {
        eprintln!("epoch {} loss {loss:.4}", start + i + 1);
    }
    let last = out_dir.join(format!("ckpt_epoch{}.fgckpt", trainer.epochs_done));
    if trainer.epochs_done == start {
        // Nothing to run: still leave a checkpoint of the current state.
        trainer.checkpoint().save(&last)?;
    }
    emit(
        &json!({
            "epochs_done": trainer.epochs_done,
            "epoch_losses": trainer.outcome.epoch_losses,
            "logit_scale": trainer.model.logit_scale_value(),
            "skipped_negatives": trainer.outcome.skipped_negatives,
            "checkpoint": last.display().to_string(),
        }),
        None,
    )
}

/// Model config from `--config` (or `config.json` beside the checkpoint),
/// parameters from the checkpoint when given.
fn load_model(args: &ModelArgs) -> Result<(Model<f32>, TrainConfig)> {
    let beside = args
        .ckpt
        .as_ref()
        .and_then(|c| c.parent())
        .map(|d| d.join("config.json"))
        .filter(|p| p.is_file());
    let path = args.config.config.clone().or(beside);
    let cfg: TrainConfig = load_config(path.as_deref(), &args.config.sets)?;
    let mut model = Model::<f32>::new(&cfg)?;
    if let Some(c) = &args.ckpt {
        model.store.load_checkpoint(&Checkpoint::load(c)?)?;
    }
    Ok((model, cfg))
}

fn retrieval_from_files(visual: &Path, text: &Path) -> Result<Value> {
    let v = EmbeddingMatrix::load(visual)?;
    let t = EmbeddingMatrix::load(text)?;
    if v.dim() != t.dim() {
        return Err(FormatError::Invalid(format!("embedding dims differ: {} vs {}", v.dim(), t.dim())).into());
    }
    // Text queries in file order; each must have a visual with the same id.
    let mut rows = Vec::with_capacity(t.rows() * v.dim());
    for id in t.ids() {
        let r = v.row_by_id(id).ok_or_else(|| EvalError::MissingEmbedding(id.clone()))?;
        rows.extend_from_slice(r);
    }
    let gallery = Tensor::new(vec![t.rows(), v.dim()], rows)?;
    let m = retrieval_metrics(&cosine_matrix(&t.to_tensor(), &gallery)?, &DEFAULT_KS)?;
    let mut s = m.summary();
    s["level"] = json!("precomputed");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_overrides() {
        let c: TrainConfig = load_config(None, &["lora_rank=4".into(), "model.vc.layers=2".into()]).unwrap();
        assert_eq!(c.lora_rank, 4);
        assert_eq!(c.model.vc.layers, 2);
        let c: TrainConfig = load_config(None, &["prompt_style=listed".into()]).unwrap();
        assert_eq!(c.prompt_style, PromptStyle::Listed);
        assert!(matches!(
            load_config::<TrainConfig>(None, &["no_such_field=1".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(load_config::<TrainConfig>(None, &["lora_rank".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_flag_is_exit_one() {
        assert_eq!(dispatch(["srl-adapt", "inspect-ckpt", "--bogus"]), 1);
        assert_eq!(dispatch(["srl-adapt", "frobnicate"]), 1);
    }
}
