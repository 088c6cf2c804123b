//! `renderflow` command-line entry point.
//!
//! Every command loads the layered configuration (`--config`, then
//! `--set key=value`, then command flags), validates it before doing any
//! work and writes its outputs under a run directory:
//!
//! ```text
//! {run}/config.snapshot   effective configuration (TOML)
//! {run}/log.jsonl         training log, one JSON record per step
//! {run}/ckpt/             checkpoints
//! {run}/images/           rendered frames
//! {run}/report.json       metrics
//! {run}/manifest.json     command, seeds, inputs, checkpoint hashes, outputs
//! ```
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use renderflow::ablation::{run_ablation, AblationSetup, Suite};
use renderflow::config::RunConfig;
use renderflow::infer::{
    load_png, material_edit_demo, render_sequence, save_pngs, side_by_side, ForwardModel, InferConfig, SamplerMode,
};
use renderflow::inverse::{evaluate_inverse, InverseModel, InverseTrainer};
use renderflow::ndarray::Array3;
use renderflow::metrics::{metric_value, variance_over_runs, ImageScores, MetricReport};
use renderflow::net::Modality;
use renderflow::scene::{
    read_sequence, scene_for, synth_dataset, Dataset, MaterialInterp, MaterialParam, Sequence, Split, SEQUENCE_EXT,
};
use renderflow::train::{Checkpoint, Stage, Trainer};
use renderflow::{Error, Result};

pub const RUN_DIR_ENV: &str = "RENDERFLOW_RUN_DIR";

#[derive(Parser, Debug)]
#[command(name = "renderflow", version, about = "Single-step bridge-matching neural renderer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value by dotted path, e.g. `bridge.sigma=0.005`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Run directory (defaults to `$RENDERFLOW_RUN_DIR/<command>` or `runs/<command>`).
    #[arg(long, global = true)]
    run: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise a procedural dataset.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Stage-1 training of the base network and envmap adapter.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint of an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Stage-2 training of the keyframe adapter on a frozen base.
    TrainKeyframe {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Adapter-only training for intrinsic decomposition.
    TrainInverse {
        #[arg(long)]
        forward: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Render a sequence with a forward checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Sequence file; the `.rfsq` extension may be omitted.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_parser = ["ode", "sde"])]
        mode: Option<String>,
        /// Guide with ground-truth keyframes (stage-2 checkpoints only).
        #[arg(long)]
        keyframes: bool,
        #[arg(long)]
        keyframe_gap: Option<usize>,
        /// Render disjoint chunks without carrying frames across them.
        #[arg(long)]
        no_progressive: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Decompose a sequence into intrinsic layers.
    Invert {
        /// Inverse adapter checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Forward checkpoint the adapter was trained on.
        #[arg(long)]
        forward: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// albedo, normal, depth, material or all.
        #[arg(long, default_value = "all")]
        modality: String,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Score rendered frames against a dataset, or measure run-to-run variance.
    Eval {
        /// Directory of PNGs named `<sequence>_<frame>.png` (or a run directory with `images/`).
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long)]
        gt: PathBuf,
        /// Report path (JSON; CSV and text are written alongside).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Forward checkpoint for the determinism study.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run an ablation suite (or `all`).
    Ablate {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 steps per variant.
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Render a sequence whose material is interpolated across frames.
    EditMaterial {
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Object name; defaults to the first object of the scene.
        #[arg(long)]
        object: Option<String>,
        #[arg(long, default_value = "roughness")]
        param: String,
        /// Start value(s), comma separated.
        #[arg(long, default_value = "1.0")]
        from: String,
        /// End value(s), comma separated.
        #[arg(long, default_value = "0.0")]
        to: String,
        #[arg(long)]
        frames: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the effective configuration.
    ConfigDump {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::TrainKeyframe { .. } => "train-keyframe",
            Command::TrainInverse { .. } => "train-inverse",
            Command::Infer { .. } => "infer",
            Command::Invert { .. } => "invert",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::EditMaterial { .. } => "edit-material",
            Command::ConfigDump { .. } => "config-dump",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Train { common, .. }
            | Command::TrainKeyframe { common, .. }
            | Command::TrainInverse { common, .. }
            | Command::Infer { common, .. }
            | Command::Invert { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::EditMaterial { common, .. }
            | Command::ConfigDump { common } => common,
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(v)?)
}

/// Output directory of one command invocation plus its manifest.
struct Run {
    dir: PathBuf,
    manifest: serde_json::Map<String, Value>,
    checkpoints: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    fn open(common: &Common, command: &str, cfg: &RunConfig) -> Result<Self> {
        let dir = match &common.run {
            Some(d) => d.clone(),
            None => std::env::var_os(RUN_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(command),
        };
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        write_text(&dir.join("config.snapshot"), &cfg.to_toml()?)?;
        let mut manifest = serde_json::Map::new();
        manifest.insert("command".into(), Value::String(command.into()));
        manifest.insert("args".into(), json!(std::env::args().skip(1).collect::<Vec<_>>()));
        manifest.insert(
            "seeds".into(),
            json!({
                "dataset": cfg.dataset.seed,
                "init": cfg.net.init_seed,
                "train": cfg.train.seed,
                "infer": cfg.infer.rng_seed,
                "inverse": cfg.inverse.seed,
            }),
        );
        Ok(Self {
            dir,
            manifest,
            checkpoints: BTreeMap::new(),
            outputs: vec!["config.snapshot".into()],
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn input(&mut self, key: &str, path: &Path) {
        let inputs = self
            .manifest
            .entry("inputs")
            .or_insert_with(|| Value::Object(Default::default()));
        if let Value::Object(m) = inputs {
            m.insert(key.into(), Value::String(path.display().to_string()));
        }
    }

    fn checkpoint(&mut self, key: &str, hash: &str) {
        self.checkpoints.insert(key.into(), hash.into());
    }

    fn output(&mut self, rel: impl Into<String>) {
        self.outputs.push(rel.into());
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.manifest.insert("checkpoints".into(), json!(self.checkpoints));
        self.outputs.sort();
        self.outputs.dedup();
        self.manifest.insert("outputs".into(), json!(self.outputs));
        write_json(&self.dir.join("manifest.json"), &Value::Object(self.manifest))?;
        Ok(self.dir)
    }
}

/// Accepts `data/seq0` for `data/seq0.rfsq`.
fn resolve_sequence(input: &Path) -> Result<PathBuf> {
    if input.is_file() {
        return Ok(input.to_path_buf());
    }
    let with_ext = input.with_extension(SEQUENCE_EXT);
    if with_ext.is_file() {
        return Ok(with_ext);
    }
    Err(invalid(format!("no sequence file at {}", input.display())))
}

fn sequence_stem(path: &Path) -> String {
    path.file_stem().map_or("seq".into(), |s| s.to_string_lossy().into_owned())
}

fn held_out(ds: &Dataset) -> Vec<&Sequence> {
    for split in [Split::Val, Split::Test, Split::Train] {
        let v = ds.split(split);
        if !v.is_empty() {
            return v;
        }
    }
    Vec::new()
}

fn training_split(ds: &Dataset) -> Result<Vec<&Sequence>> {
    let v = ds.split(Split::Train);
    if v.is_empty() {
        return Err(invalid(format!("dataset {} has no training sequences", ds.root.display())));
    }
    Ok(v)
}

fn cap(v: Vec<&Sequence>, n: usize) -> Vec<&Sequence> {
    if n == 0 {
        v
    } else {
        v.into_iter().take(n).collect()
    }
}

fn log_file(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    Ok(BufWriter::new(f))
}

fn scores_json(m: &BTreeMap<String, f64>) -> Value {
    Value::Object(m.iter().map(|(k, v)| (k.clone(), metric_value(*v))).collect())
}

/// One-step held-out scores of a forward model next to the albedo-passthrough baseline.
fn heldout_scores(model: &ForwardModel, seqs: &[&Sequence], infer: &InferConfig) -> Result<Value> {
    let mut pred = ImageScores::default();
    let mut base = ImageScores::default();
    for seq in seqs {
        let r = render_sequence(model, seq, infer, &model.bridge, None)?;
        let gt: Vec<_> = seq.frames.iter().map(|f| f.reference.clone()).collect();
        let albedo: Vec<_> = seq.frames.iter().map(|f| f.gbuffer.albedo.clone()).collect();
        pred.extend(ImageScores::compute(&r.images, &gt)?);
        base.extend(ImageScores::compute(&albedo, &gt)?);
    }
    Ok(json!({
        "sequences": seqs.len(),
        "model": scores_json(&pred.mean()),
        "albedo_passthrough": scores_json(&base.mean()),
    }))
}

fn cmd_synth(
    mut cfg: RunConfig,
    common: &Common,
    seed: Option<u64>,
    sequences: Option<usize>,
    frames: Option<usize>,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    if let Some(s) = seed {
        cfg.dataset.seed = s;
    }
    if let Some(n) = sequences {
        cfg.dataset.sequences = n;
    }
    if let Some(f) = frames {
        cfg.dataset.synth.frames = f;
    }
    if let Some(o) = out {
        cfg.dataset.root = o;
    }
    cfg.validate()?;
    let common = Common {
        run: Some(common.run.clone().unwrap_or_else(|| cfg.dataset.root.clone())),
        ..common.clone()
    };
    let mut run = Run::open(&common, "synth", &cfg)?;
    let manifest = synth_dataset(&cfg.dataset.root, cfg.dataset.seed, cfg.dataset.sequences, &cfg.dataset.synth)?;
    for e in &manifest.sequences {
        run.output(e.path.clone());
    }
    run.output("manifest.json");
    eprintln!(
        "wrote {} sequences of {} frames to {}",
        manifest.sequences.len(),
        cfg.dataset.synth.frames,
        cfg.dataset.root.display()
    );
    // The dataset manifest already lives at manifest.json; keep run metadata beside it.
    let dir = run.dir.clone();
    write_json(
        &dir.join("run.json"),
        &json!({ "command": "synth", "seed": cfg.dataset.seed, "sequences": manifest.sequences.len() }),
    )?;
    Ok(dir)
}

fn save_final(run: &mut Run, ck: &Checkpoint, key: &str) -> Result<String> {
    let rel = format!("ckpt/{key}.rfck");
    let hash = ck.save(&run.path(&rel))?;
    run.checkpoint(&rel, &hash);
    run.output(rel);
    Ok(hash)
}

fn cmd_train(
    mut cfg: RunConfig,
    common: &Common,
    data: Option<PathBuf>,
    steps: Option<usize>,
    resume: Option<PathBuf>,
) -> Result<PathBuf> {
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    cfg.train.stage = Stage::Base;
    cfg.validate()?;
    let data = data.unwrap_or_else(|| cfg.dataset.root.clone());
    let ds = Dataset::load(&data)?;
    let train = training_split(&ds)?;
    let mut run = Run::open(common, "train", &cfg)?;
    run.input("data", &data);
    fs::create_dir_all(run.path("ckpt")).map_err(|e| io_err(&run.path("ckpt"), e))?;
    let mut trainer = match &resume {
        Some(p) => {
            let (ck, hash) = Checkpoint::load(p)?;
            run.input("resume", p);
            run.checkpoint("resume", &hash);
            Trainer::resume(&ck)?
        }
        None => Trainer::new(cfg.net.clone(), cfg.train.clone(), cfg.bridge.clone())?,
    };
    let until = cfg.train.steps;
    let mut log = log_file(&run.path("log.jsonl"), resume.is_some())?;
    trainer.run(&train, until, Some(&mut log), Some(&run.path("ckpt")))?;
    drop(log);
    run.output("log.jsonl");
    let ck = trainer.checkpoint()?;
    let hash = save_final(&mut run, &ck, "final")?;
    let model = ForwardModel::from_checkpoint(&ck, &hash)?;
    let eval = cap(held_out(&ds), cfg.eval.max_sequences);
    let last = trainer.history.last();
    let report = json!({
        "stage": "base",
        "steps": trainer.step,
        "final_loss_latent": last.map(|r| r.loss_latent),
        "final_loss_pixel": last.map(|r| r.loss_pixel),
        "checkpoint": hash,
        "heldout": heldout_scores(&model, &eval, &cfg.infer)?,
    });
    write_json(&run.path("report.json"), &report)?;
    run.output("report.json");
    eprintln!("trained {} steps; checkpoint {}", trainer.step, run.path("ckpt/final.rfck").display());
    run.finish()
}

fn cmd_train_keyframe(
    mut cfg: RunConfig,
    common: &Common,
    base: &Path,
    data: Option<PathBuf>,
    steps: Option<usize>,
) -> Result<PathBuf> {
    if let Some(s) = steps {
        cfg.train.keyframe_steps = s;
    }
    cfg.train.stage = Stage::Keyframe;
    cfg.validate()?;
    let data = data.unwrap_or_else(|| cfg.dataset.root.clone());
    let ds = Dataset::load(&data)?;
    let train = training_split(&ds)?;
    let (base_ck, base_hash) = Checkpoint::load(base)?;
    let mut run = Run::open(common, "train-keyframe", &cfg)?;
    run.input("data", &data);
    run.input("base", base);
    run.checkpoint("base", &base_hash);
    fs::create_dir_all(run.path("ckpt")).map_err(|e| io_err(&run.path("ckpt"), e))?;
    let mut trainer = Trainer::keyframe_stage(&base_ck, &base_hash, cfg.train.clone())?;
    let until = trainer.cfg.total_steps();
    let mut log = log_file(&run.path("log.jsonl"), false)?;
    trainer.run(&train, until, Some(&mut log), Some(&run.path("ckpt")))?;
    drop(log);
    run.output("log.jsonl");
    let ck = trainer.checkpoint()?;
    let hash = save_final(&mut run, &ck, "final")?;
    let model = ForwardModel::from_checkpoint(&ck, &hash)?;
    let eval = cap(held_out(&ds), cfg.eval.max_sequences);
    let kf = InferConfig {
        use_keyframes: true,
        ..cfg.infer.clone()
    };
    let report = json!({
        "stage": "keyframe",
        "steps": trainer.step,
        "parent": base_hash,
        "checkpoint": hash,
        "heldout_without_keyframes": heldout_scores(&model, &eval, &cfg.infer)?,
        "heldout_with_keyframes": heldout_scores(&model, &eval, &kf)?,
    });
    write_json(&run.path("report.json"), &report)?;
    run.output("report.json");
    run.finish()
}

fn cmd_train_inverse(
    mut cfg: RunConfig,
    common: &Common,
    forward: &Path,
    data: Option<PathBuf>,
    steps: Option<usize>,
) -> Result<PathBuf> {
    if let Some(s) = steps {
        cfg.inverse.steps = s;
    }
    cfg.validate()?;
    let data = data.unwrap_or_else(|| cfg.dataset.root.clone());
    let ds = Dataset::load(&data)?;
    let train = training_split(&ds)?;
    let (fwd, fwd_hash) = Checkpoint::load(forward)?;
    let mut run = Run::open(common, "train-inverse", &cfg)?;
    run.input("data", &data);
    run.input("forward", forward);
    run.checkpoint("forward", &fwd_hash);
    fs::create_dir_all(run.path("ckpt")).map_err(|e| io_err(&run.path("ckpt"), e))?;
    let mut trainer = InverseTrainer::new(&fwd, &fwd_hash, cfg.inverse.clone())?;
    let mut log = log_file(&run.path("log.jsonl"), false)?;
    trainer.run(&train, cfg.inverse.steps, Some(&mut log), Some(&run.path("ckpt")))?;
    drop(log);
    run.output("log.jsonl");
    let ck = trainer.checkpoint()?;
    let hash = save_final(&mut run, &ck, "final")?;
    let max_frozen = trainer.history.iter().map(|r| r.frozen_grad_norm).fold(0.0, f64::max);
    let model = InverseModel::from_checkpoints(&ck, &fwd, &fwd_hash)?;
    let eval = cap(held_out(&ds), cfg.eval.max_sequences);
    let scores = evaluate_inverse(&model, &eval, cfg.inverse.clip_frames)?;
    let report = json!({
        "stage": "inverse",
        "steps": trainer.step,
        "checkpoint": hash,
        "max_frozen_grad_norm": max_frozen,
        "heldout": scores,
    });
    write_json(&run.path("report.json"), &report)?;
    run.output("report.json");
    run.finish()
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    mut cfg: RunConfig,
    common: &Common,
    ckpt: &Path,
    input: &Path,
    steps: Option<usize>,
    mode: Option<String>,
    keyframes: bool,
    keyframe_gap: Option<usize>,
    no_progressive: bool,
    seed: Option<u64>,
) -> Result<PathBuf> {
    if let Some(s) = steps {
        cfg.infer.steps = s;
    }
    if let Some(m) = mode {
        cfg.infer.mode = if m == "sde" { SamplerMode::Sde } else { SamplerMode::Ode };
    }
    if keyframes {
        cfg.infer.use_keyframes = true;
    }
    if let Some(g) = keyframe_gap {
        cfg.infer.keyframe_gap = g;
    }
    if no_progressive {
        cfg.infer.progressive = false;
    }
    if let Some(s) = seed {
        cfg.infer.rng_seed = s;
    }
    cfg.validate()?;
    let seq_path = resolve_sequence(input)?;
    let seq = read_sequence(&seq_path)?;
    let model = ForwardModel::load(ckpt)?;
    let mut run = Run::open(common, "infer", &cfg)?;
    run.input("ckpt", ckpt);
    run.input("input", &seq_path);
    run.checkpoint("forward", &model.hash);
    let result = render_sequence(&model, &seq, &cfg.infer, &model.bridge, None)?;
    let stem = sequence_stem(&seq_path);
    for p in save_pngs(&result.images, &run.path("images"), &format!("{stem}_"))? {
        run.output(format!("images/{}", p.file_name().unwrap_or_default().to_string_lossy()));
    }
    let gt: Vec<_> = seq.frames.iter().map(|f| f.reference.clone()).collect();
    let scores = ImageScores::compute(&result.images, &gt)?;
    let report = json!({
        "sequence": stem,
        "frames": result.images.len(),
        "checkpoint": model.hash,
        "infer": cfg.infer,
        "frame_ms": result.frame_ms,
        "metrics": scores_json(&scores.mean()),
    });
    write_json(&run.path("report.json"), &report)?;
    run.output("report.json");
    run.finish()
}

fn cmd_invert(
    cfg: RunConfig,
    common: &Common,
    ckpt: &Path,
    forward: &Path,
    input: &Path,
    modality: &str,
    steps: usize,
) -> Result<PathBuf> {
    let modalities: Vec<Modality> = if modality == "all" {
        Modality::ALL.to_vec()
    } else {
        vec![modality.parse()?]
    };
    let seq_path = resolve_sequence(input)?;
    let seq = read_sequence(&seq_path)?;
    let model = InverseModel::load(ckpt, forward)?;
    let mut run = Run::open(common, "invert", &cfg)?;
    run.input("ckpt", ckpt);
    run.input("forward", forward);
    run.input("input", &seq_path);
    run.checkpoint("forward", &model.forward_hash);
    let stem = sequence_stem(&seq_path);
    let mut metrics = serde_json::Map::new();
    for m in modalities {
        let shown = model.decompose_display(&seq, m, cfg.inverse.clip_frames, steps)?;
        for p in save_pngs(&shown, &run.path("images"), &format!("{stem}_{m}_"))? {
            run.output(format!("images/{}", p.file_name().unwrap_or_default().to_string_lossy()));
        }
        if m == Modality::Albedo {
            let gt: Vec<_> = seq.frames.iter().map(|f| f.gbuffer.albedo.clone()).collect();
            metrics.insert("albedo".into(), scores_json(&ImageScores::compute(&shown, &gt)?.mean()));
        }
    }
    write_json(
        &run.path("report.json"),
        &json!({ "sequence": stem, "steps": steps, "metrics": metrics }),
    )?;
    run.output("report.json");
    run.finish()
}

/// PNG frames of `dir` (or `dir/images`) named `<stem>_<frame>.png`.
fn predicted_frames(dir: &Path, stem: &str, frames: usize) -> Result<Option<Vec<Array3<f32>>>> {
    let base = if dir.join("images").is_dir() { dir.join("images") } else { dir.to_path_buf() };
    let mut out = Vec::with_capacity(frames);
    for i in 0..frames {
        let p = base.join(format!("{stem}_{i:04}.png"));
        if !p.is_file() {
            return if i == 0 {
                Ok(None)
            } else {
                Err(invalid(format!("{} is missing frame {i}", base.display())))
            };
        }
        out.push(load_png(&p)?);
    }
    Ok(Some(out))
}

fn cmd_eval(
    cfg: RunConfig,
    common: &Common,
    pred: Option<PathBuf>,
    gt: &Path,
    report_path: Option<PathBuf>,
    ckpt: Option<PathBuf>,
) -> Result<PathBuf> {
    let ds = Dataset::load(gt)?;
    let mut run = Run::open(common, "eval", &cfg)?;
    run.input("gt", gt);
    let mut report = MetricReport::new("evaluation");
    match (&pred, &ckpt) {
        (Some(pred), _) => {
            run.input("pred", pred);
            report.notes.push(renderflow::ablation::PROXY_NOTE.into());
            let mut all = ImageScores::default();
            for (name, _, seq) in &ds.sequences {
                let stem = sequence_stem(Path::new(name));
                let Some(frames) = predicted_frames(pred, &stem, seq.len())? else {
                    continue;
                };
                let gt: Vec<_> = seq.frames.iter().map(|f| f.reference.clone()).collect();
                let s = ImageScores::compute(&frames, &gt)?;
                report.push(&stem, s.mean());
                all.extend(s);
            }
            if report.rows.is_empty() {
                return Err(invalid(format!("no predicted frames for any sequence of {} in {}", gt.display(), pred.display())));
            }
            report.push("all", all.mean());
        }
        (None, Some(ck)) => {
            run.input("ckpt", ck);
            let model = ForwardModel::load(ck)?;
            run.checkpoint("forward", &model.hash);
            report.title = "determinism".into();
            for seq in cap(held_out(&ds), cfg.eval.max_sequences) {
                let gt: Vec<_> = seq.frames.iter().map(|f| f.reference.clone()).collect();
                let v = variance_over_runs(
                    |_| Ok(render_sequence(&model, seq, &cfg.infer, &model.bridge, None)?.images),
                    &gt,
                    cfg.eval.variance_runs,
                )?;
                let max_frame_var = v.per_frame_psnr_variance.iter().cloned().fold(0.0, f64::max);
                report.push(
                    &format!("scene seed {}", seq.seed),
                    BTreeMap::from([
                        ("runs".to_string(), v.runs as f64),
                        ("mean_psnr_variance".to_string(), v.mean_psnr_variance),
                        ("max_frame_psnr_variance".to_string(), max_frame_var),
                        ("max_pixel_deviation".to_string(), v.max_pixel_deviation),
                    ]),
                );
            }
        }
        (None, None) => return Err(invalid("eval needs --pred or --ckpt")),
    }
    let path = report_path.unwrap_or_else(|| run.path("report.json"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write_json(&path, &report.to_json())?;
    write_text(&path.with_extension("csv"), &report.to_csv())?;
    write_text(&path.with_extension("txt"), &report.to_text())?;
    run.output(path.display().to_string());
    print!("{}", report.to_text());
    run.finish()
}

fn cmd_ablate(
    mut cfg: RunConfig,
    common: &Common,
    suite: &str,
    data: Option<PathBuf>,
    steps: Option<usize>,
) -> Result<PathBuf> {
    if let Some(s) = steps {
        cfg.eval.ablation_steps = s;
    }
    cfg.validate()?;
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse()?]
    };
    let data = data.unwrap_or_else(|| cfg.dataset.root.clone());
    let ds = Dataset::load(&data)?;
    let train = training_split(&ds)?;
    let eval = cap(held_out(&ds), cfg.eval.max_sequences);
    let setup = AblationSetup {
        net: cfg.net.clone(),
        bridge: cfg.bridge.clone(),
        train: renderflow::train::TrainConfig {
            steps: cfg.eval.ablation_steps,
            keyframe_steps: cfg.eval.ablation_keyframe_steps,
            ..cfg.train.clone()
        },
        infer: cfg.infer.clone(),
        gaps: cfg.eval.gaps.clone(),
    };
    let mut run = Run::open(common, "ablate", &cfg)?;
    run.input("data", &data);
    let mut all = serde_json::Map::new();
    for s in suites {
        eprintln!("running suite {s}");
        let table = run_ablation(s, &setup, &train, &eval)?;
        table.report.write(&run.dir, s.as_str())?;
        for ext in ["json", "csv", "txt"] {
            run.output(format!("{s}.{ext}"));
        }
        println!("{}", table.report.to_text());
        all.insert(s.to_string(), table.report.to_json());
    }
    write_json(&run.path("report.json"), &Value::Object(all))?;
    run.output("report.json");
    run.finish()
}

#[allow(clippy::too_many_arguments)]
fn cmd_edit_material(
    mut cfg: RunConfig,
    common: &Common,
    ckpt: &Path,
    seed: u64,
    object: Option<String>,
    param: &str,
    from: &str,
    to: &str,
    frames: Option<usize>,
) -> Result<PathBuf> {
    if let Some(f) = frames {
        cfg.dataset.synth.frames = f;
    }
    cfg.validate()?;
    let parse = |s: &str| -> Result<Vec<f64>> {
        s.split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|e| invalid(format!("bad value `{x}`: {e}"))))
            .collect()
    };
    let object = match object {
        Some(o) => o,
        None => scene_for(seed, &cfg.dataset.synth)?
            .objects
            .first()
            .map(|o| o.name.clone())
            .ok_or_else(|| invalid("scene has no objects"))?,
    };
    let edit = MaterialInterp {
        object,
        param: param.parse::<MaterialParam>()?,
        start: parse(from)?,
        end: parse(to)?,
    };
    let model = ForwardModel::load(ckpt)?;
    let mut run = Run::open(common, "edit-material", &cfg)?;
    run.input("ckpt", ckpt);
    run.checkpoint("forward", &model.hash);
    let res = material_edit_demo(&model, seed, &cfg.dataset.synth, edit, &cfg.infer, &model.bridge)?;
    let pairs: Vec<_> = res
        .render
        .images
        .iter()
        .zip(&res.sequence.frames)
        .map(|(p, f)| side_by_side(p, &f.reference))
        .collect();
    for p in save_pngs(&pairs, &run.path("images"), "edit_")? {
        run.output(format!("images/{}", p.file_name().unwrap_or_default().to_string_lossy()));
    }
    let mut log = String::new();
    for e in &res.log {
        log.push_str(&serde_json::to_string(e)?);
        log.push('\n');
    }
    write_text(&run.path("params.jsonl"), &log)?;
    run.output("params.jsonl");
    let gt: Vec<_> = res.sequence.frames.iter().map(|f| f.reference.clone()).collect();
    let scores = ImageScores::compute(&res.render.images, &gt)?;
    write_json(
        &run.path("report.json"),
        &json!({ "scene_seed": seed, "metrics": scores_json(&scores.mean()), "params": res.log }),
    )?;
    run.output("report.json");
    run.finish()
}

fn dispatch(cli: Cli) -> Result<()> {
    let command = cli.command;
    let common = command.common().clone();
    let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
    let dir = match command {
        Command::ConfigDump { .. } => {
            print!("{}", cfg.to_toml()?);
            return Ok(());
        }
        Command::Synth {
            seed,
            sequences,
            frames,
            out,
            ..
        } => cmd_synth(cfg, &common, seed, sequences, frames, out)?,
        Command::Train { data, steps, resume, .. } => cmd_train(cfg, &common, data, steps, resume)?,
        Command::TrainKeyframe { base, data, steps, .. } => cmd_train_keyframe(cfg, &common, &base, data, steps)?,
        Command::TrainInverse { forward, data, steps, .. } => {
            cmd_train_inverse(cfg, &common, &forward, data, steps)?
        }
        Command::Infer {
            ckpt,
            input,
            steps,
            mode,
            keyframes,
            keyframe_gap,
            no_progressive,
            seed,
            ..
        } => cmd_infer(
            cfg,
            &common,
            &ckpt,
            &input,
            steps,
            mode,
            keyframes,
            keyframe_gap,
            no_progressive,
            seed,
        )?,
        Command::Invert {
            ckpt,
            forward,
            input,
            modality,
            steps,
            ..
        } => cmd_invert(cfg, &common, &ckpt, &forward, &input, &modality, steps)?,
        Command::Eval {
            pred, gt, report, ckpt, ..
        } => cmd_eval(cfg, &common, pred, &gt, report, ckpt)?,
        Command::Ablate { suite, data, steps, .. } => cmd_ablate(cfg, &common, &suite, data, steps)?,
        Command::EditMaterial {
            ckpt,
            seed,
            object,
            param,
            from,
            to,
            frames,
            ..
        } => cmd_edit_material(cfg, &common, &ckpt, seed, object, &param, &from, &to, frames)?,
    };
    eprintln!("outputs in {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let name = cli.command.name();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("renderflow {name}: {e}");
            ExitCode::from(2)
        }
    }
}
