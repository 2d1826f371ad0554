//! Command-line entry point. Every subcommand writes JSON lines to stdout
//! (and to `--log` when given); apart from `bench` timings the output is a
//! pure function of flags, seed and input files.

mod config;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use resgcn::blocks::{BlockKind, ResidualKind};
use resgcn::cam::{activated_joints, class_activation_map, export_cam, predicted_class, DEFAULT_QUANTILE};
use resgcn::dataset::{parse_exclusion_list, read_dataset, synth_dataset, write_dataset, Partition, MANIFEST_FILE};
use resgcn::model::{build_model, load_checkpoint, save_checkpoint, Batch, ResGcnModel};
use resgcn::preprocess::{build_branches, read_branches, write_branches, Branches};
use resgcn::skeleton::{pad_or_crop, read_sequence};
use resgcn::train::{evaluate, predict_all, train, Evaluation};
use resgcn::{DatasetManifest, Mode, SkeletonGraph, Tape};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use config::{env_seed, Overrides, RunConfig};

/// Graph definition written next to preprocessed branch files.
const GRAPH_FILE: &str = "graph.json";

#[derive(Parser, Debug)]
#[command(name = "resgcn", version, about = "Residual graph convolution toolkit for skeleton action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert SKL1 sequences into joint, velocity and bone branch files.
    Preprocess(PreprocessArgs),
    /// Generate a labelled synthetic dataset of SKL1 sequences.
    Synth(SynthArgs),
    /// Train a model on a preprocessed dataset and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a preprocessed dataset.
    Eval(EvalArgs),
    /// Count trainable parameters of a model configuration.
    CountParams(CountArgs),
    /// Compute and export a class activation map for one sequence.
    Cam(CamArgs),
    /// Measure inference throughput in sequences per second.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Block {
    Basic,
    Bottleneck,
}

impl From<Block> for BlockKind {
    fn from(b: Block) -> Self {
        match b {
            Block::Basic => BlockKind::Basic,
            Block::Bottleneck => BlockKind::Bottleneck,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Residual {
    None,
    Block,
    Module,
    Dense,
}

impl From<Residual> for ResidualKind {
    fn from(r: Residual) -> Self {
        match r {
            Residual::None => ResidualKind::None,
            Residual::Block => ResidualKind::Block,
            Residual::Module => ResidualKind::Module,
            Residual::Dense => ResidualKind::Dense,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Eval,
    All,
}

/// Model flags shared by `train`, `count-params` and `bench`.
#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// Structure string, e.g. "[B1,N2,N3,N3]".
    #[arg(long)]
    structure: Option<String>,
    /// Block kind of parts 2 to 4; part 1 keeps its kind.
    #[arg(long, value_enum)]
    block: Option<Block>,
    /// Residual link placement.
    #[arg(long, value_enum)]
    residual: Option<Residual>,
    /// Bottleneck reduction rate.
    #[arg(long = "r")]
    reduction: Option<usize>,
    /// Part-wise attention after every mainstream module.
    #[arg(long, value_enum)]
    attention: Option<Switch>,
    /// Four comma-separated channel widths.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    /// Temporal kernel length.
    #[arg(long)]
    temporal_window: Option<usize>,
    /// Largest graph distance of the spatial convolution.
    #[arg(long)]
    max_distance: Option<usize>,
    /// Reduction rate inside the attention block.
    #[arg(long)]
    attention_reduction: Option<usize>,
}

impl ModelArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            structure: self.structure.clone(),
            block: self.block.map(Into::into),
            residual: self.residual.map(Into::into),
            reduction: self.reduction,
            attention: self.attention.map(|s| matches!(s, Switch::On)),
            channel_plan: self.channels.clone(),
            temporal_window: self.temporal_window,
            max_distance: self.max_distance,
            attention_reduction: self.attention_reduction,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Dataset directory holding manifest.json and SKL1 files.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for branch files, manifest and graph.
    #[arg(long)]
    out: PathBuf,
    /// Graph definition JSON; defaults to the bundled NTU-25 skeleton.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Text file of sequence names to drop, one per line.
    #[arg(long)]
    exclude: Option<PathBuf>,
    /// Pad or crop every sequence to this many frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Also write the JSON log lines to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of classes.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Sequences per class.
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    /// Frames per sequence.
    #[arg(long, default_value_t = 64)]
    frames: usize,
    /// Random seed; falls back to RESGCN_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the JSON log lines to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Preprocessed dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; the sidecar goes to <path>.json.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Linear warmup length in epochs.
    #[arg(long)]
    warmup: Option<usize>,
    /// Comma-separated epochs at which the learning rate is divided.
    #[arg(long, value_delimiter = ',')]
    decay_epochs: Option<Vec<usize>>,
    /// Divisor applied at each decay epoch.
    #[arg(long)]
    decay_factor: Option<f64>,
    /// Nesterov momentum.
    #[arg(long)]
    momentum: Option<f64>,
    /// L2 weight decay on weights that take it.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Random seed for initialization and shuffling; falls back to the
    /// config file, then RESGCN_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the JSON log lines to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Preprocessed dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Which split to evaluate.
    #[arg(long, value_enum, default_value_t = Split::Eval)]
    split: Split,
    /// Sequences per forward pass.
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Also write the JSON log lines to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Number of output classes.
    #[arg(long, default_value_t = 60)]
    classes: usize,
}

#[derive(Args, Debug)]
struct CamArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Branch file from `preprocess` or a raw SKL1 sequence.
    #[arg(long)]
    input: PathBuf,
    /// Class to explain; defaults to the predicted class.
    #[arg(long = "class")]
    class_id: Option<usize>,
    /// Comma-separated frame indices of the map to report activated joints for.
    #[arg(long, value_delimiter = ',', conflicts_with = "frame_step")]
    frames: Option<Vec<usize>>,
    /// Report every n-th frame of the map; defaults to every frame.
    #[arg(long)]
    frame_step: Option<usize>,
    /// Sequence-wide quantile a joint must exceed to count as activated.
    #[arg(long, default_value_t = DEFAULT_QUANTILE)]
    quantile: f64,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the JSON log lines to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Benchmark this checkpoint instead of a freshly initialized model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Number of output classes for a fresh model.
    #[arg(long, default_value_t = 60)]
    classes: usize,
    /// Frames per random input sequence.
    #[arg(long, default_value_t = 300)]
    frames: usize,
    /// Sequences per forward pass.
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Timed forward passes.
    #[arg(long, default_value_t = 3)]
    iters: usize,
    /// Random seed; falls back to RESGCN_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

/// JSON-lines sink for stdout and an optional file.
struct Log {
    file: Option<BufWriter<File>>,
}

impl Log {
    fn new(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => Some(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
            None => None,
        };
        Ok(Log { file })
    }

    fn emit(&mut self, value: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(value)?;
        println!("{line}");
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            f.flush()?;
        }
        Ok(())
    }
}

fn seed_or_env(seed: Option<u64>) -> Result<u64> {
    Ok(match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

/// SHA-256 over the manifest and every listed file, in manifest order.
fn dataset_hash(dir: &Path, manifest: &DatasetManifest) -> Result<String> {
    let mut h = Sha256::new();
    h.update(std::fs::read(dir.join(MANIFEST_FILE))?);
    for e in &manifest.entries {
        h.update(std::fs::read(dir.join(&e.path))?);
    }
    Ok(hex(&h.finalize()))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn synth(a: SynthArgs) -> Result<()> {
    let seed = seed_or_env(a.seed)?;
    let mut log = Log::new(a.log.as_deref())?;
    let data = synth_dataset(a.classes, a.per_class, a.frames, seed)?;
    write_dataset(&a.out, &data.manifest, &data.sequences)?;
    log.emit(&json!({
        "event": "synth",
        "classes": a.classes,
        "per_class": a.per_class,
        "frames": a.frames,
        "seed": seed,
        "sequences": data.sequences.len(),
        "dataset_hash": dataset_hash(&a.out, &data.manifest)?,
    }))?;
    log.finish()
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let mut log = Log::new(a.log.as_deref())?;
    let graph = match &a.graph {
        Some(p) => SkeletonGraph::load(p)?,
        None => SkeletonGraph::ntu25(),
    };
    let (mut manifest, sequences) = read_dataset(&a.data)?;
    let keep: Vec<bool> = match &a.exclude {
        Some(p) => {
            let names: BTreeSet<String> = parse_exclusion_list(&std::fs::read_to_string(p)?);
            manifest.entries.iter().map(|e| !names.contains(&e.name)).collect()
        }
        None => vec![true; sequences.len()],
    };
    let excluded = keep.iter().filter(|k| !**k).count();
    std::fs::create_dir_all(&a.out)?;
    let mut entries = Vec::new();
    for ((e, seq), k) in manifest.entries.iter().zip(&sequences).zip(keep) {
        if !k {
            continue;
        }
        let seq = match a.frames {
            Some(t) => pad_or_crop(seq, t)?,
            None => seq.clone(),
        };
        let branches = build_branches(&seq, &graph).with_context(|| format!("sequence {}", e.name))?;
        let mut w = BufWriter::new(File::create(a.out.join(&e.path))?);
        write_branches(&mut w, &branches)?;
        w.flush()?;
        entries.push(e.clone());
    }
    manifest.entries = entries;
    manifest.save(&a.out.join(MANIFEST_FILE))?;
    graph.save(&a.out.join(GRAPH_FILE))?;
    log.emit(&json!({
        "event": "preprocess",
        "sequences": manifest.entries.len(),
        "excluded": excluded,
        "frames": a.frames,
        "dataset_hash": dataset_hash(&a.out, &manifest)?,
    }))?;
    log.finish()
}

/// Preprocessed dataset: manifest, graph and branch tensors in manifest order.
struct Prepared {
    manifest: DatasetManifest,
    graph: SkeletonGraph,
    items: Vec<Branches>,
    hash: String,
}

impl Prepared {
    fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))
            .with_context(|| format!("reading {}", dir.join(MANIFEST_FILE).display()))?;
        let graph = SkeletonGraph::load(&dir.join(GRAPH_FILE))
            .with_context(|| format!("reading {}; run `preprocess` first", dir.join(GRAPH_FILE).display()))?;
        let items = manifest
            .entries
            .iter()
            .map(|e| {
                let mut r = BufReader::new(File::open(dir.join(&e.path))?);
                read_branches(&mut r).with_context(|| format!("branch file {}", e.path))
            })
            .collect::<Result<Vec<_>>>()?;
        let hash = dataset_hash(dir, &manifest)?;
        Ok(Prepared {
            manifest,
            graph,
            items,
            hash,
        })
    }

    fn split(&self, split: Split) -> Vec<&Branches> {
        let idx = match split {
            Split::Train => self.manifest.indices(Partition::Train),
            Split::Eval => self.manifest.indices(Partition::Eval),
            Split::All => (0..self.items.len()).collect(),
        };
        idx.into_iter().map(|i| &self.items[i]).collect()
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let data = Prepared::load(&a.data)?;
    let flags = Overrides {
        max_epochs: a.epochs,
        batch_size: a.batch_size,
        base_lr: a.lr,
        warmup_epochs: a.warmup,
        decay_epochs: a.decay_epochs.clone(),
        decay_factor: a.decay_factor,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        seed: a.seed,
        ..a.model.overrides()
    };
    let file = match &a.config {
        Some(p) => Overrides::load(p)?,
        None => Overrides::default(),
    };
    let env = Overrides {
        seed: env_seed()?,
        ..Default::default()
    };
    let cfg = RunConfig::resolve(flags.over(file).over(env), data.manifest.num_classes)?;
    let mut log = Log::new(a.log.as_deref())?;
    log.emit(&json!({"event": "config", "config": cfg, "dataset_hash": data.hash}))?;
    let tr = data.split(Split::Train);
    let ev = data.split(Split::Eval);
    let mut model = build_model(&cfg.model, &data.graph, cfg.train.seed)?;
    let mut emit_err = None;
    train(&mut model, &tr, (!ev.is_empty()).then_some(&ev[..]), &cfg.train, |e| {
        if let Err(err) = log.emit(&json!({"event": "epoch", "log": e})) {
            emit_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = emit_err {
        return Err(err);
    }
    save_checkpoint(&model, &a.out)?;
    log.emit(&json!({
        "event": "done",
        "parameters": model.count_params().total,
        "checkpoint_hash": file_hash(&a.out)?,
    }))?;
    log.finish()
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let data = Prepared::load(&a.data)?;
    let items = data.split(a.split);
    if items.is_empty() {
        bail!("split {:?} of {} is empty", a.split, a.data.display());
    }
    let ev: Evaluation = evaluate(&model, &items, a.batch_size)?;
    let mut log = Log::new(a.log.as_deref())?;
    log.emit(&json!({
        "event": "eval",
        "split": format!("{:?}", a.split).to_lowercase(),
        "samples": items.len(),
        "dataset_hash": data.hash,
        "accuracy": ev.accuracy,
        "per_class": ev.per_class,
        "confusion": ev.confusion,
    }))?;
    log.finish()
}

fn count_params(a: CountArgs) -> Result<()> {
    let cfg = RunConfig::resolve(a.model.overrides(), a.classes)?;
    let count = resgcn::count_params(&cfg.model, &SkeletonGraph::ntu25())?;
    let mut log = Log::new(None)?;
    log.emit(&json!({"event": "count_params", "model": cfg.model, "total": count.total, "by_module": count.by_module, "by_kind": count.by_kind}))?;
    log.finish()
}

/// Reads a branch file, or builds branches from a raw SKL1 sequence.
fn read_input(path: &Path, graph: &SkeletonGraph) -> Result<Branches> {
    let mut bytes = Vec::new();
    File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read_to_end(&mut bytes)?;
    if bytes.starts_with(b"SKL1") {
        Ok(build_branches(&read_sequence(&mut &bytes[..])?, graph)?)
    } else {
        Ok(read_branches(&mut &bytes[..])?)
    }
}

fn cam(a: CamArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let input = read_input(&a.input, &model.graph)?;
    let predicted = predicted_class(&model, &input)?;
    let class_id = a.class_id.unwrap_or(predicted);
    let map = class_activation_map(&model, &input, class_id)?;
    let frames: Vec<usize> = match (&a.frames, a.frame_step) {
        (Some(f), _) => f.clone(),
        (None, step) => (0..map.frames()).step_by(step.unwrap_or(1).max(1)).collect(),
    };
    let activated = activated_joints(&map, &frames, a.quantile)?;
    export_cam(&map, &activated, a.quantile, &model.graph.edges, &a.out)?;
    let mut log = Log::new(a.log.as_deref())?;
    log.emit(&json!({
        "event": "cam",
        "class_id": class_id,
        "predicted": predicted,
        "frames": map.frames(),
        "joints": map.joints(),
        "mean": map.values.mean(),
        "cam_hash": file_hash(&a.out)?,
    }))?;
    log.finish()
}

fn bench(a: BenchArgs) -> Result<()> {
    let seed = seed_or_env(a.seed)?;
    let mut model: ResGcnModel = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => {
            let cfg = RunConfig::resolve(a.model.overrides(), a.classes)?;
            build_model(&cfg.model, &SkeletonGraph::ntu25(), seed)?
        }
    };
    let structure = model.spec.structure.to_string();
    let data = resgcn::dataset::synth_dataset(2, a.batch_size.div_ceil(2).max(1), a.frames, seed)?;
    let items: Vec<Branches> = data
        .sequences
        .iter()
        .take(a.batch_size.max(2))
        .map(|s| build_branches(s, &model.graph))
        .collect::<resgcn::Result<_>>()?;
    let refs: Vec<&Branches> = items.iter().collect();
    if a.checkpoint.is_none() {
        // populate running statistics so eval mode is usable
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &Batch::from_branches(&refs)?, Mode::Train)?;
        model.apply_stat_updates(&out.updates);
    }
    predict_all(&model, &refs, a.batch_size)?;
    let start = Instant::now();
    for _ in 0..a.iters {
        predict_all(&model, &refs, a.batch_size)?;
    }
    let secs = start.elapsed().as_secs_f64();
    let mut log = Log::new(None)?;
    log.emit(&json!({
        "event": "bench",
        "structure": structure,
        "parameters": model.count_params().total,
        "frames": a.frames,
        "batch_size": refs.len(),
        "iters": a.iters,
        "seconds": secs,
        "sequences_per_second": (refs.len() * a.iters) as f64 / secs,
    }))?;
    log.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::CountParams(a) => count_params(a),
        Command::Cam(a) => cam(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
