//! Subcommands behind the `mdrnet` binary. Each command returns the text
//! it prints on success; errors carry their process exit code.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mdrnet::dataset::{format_manifest, synthesize, ShapeDataset};
use mdrnet::eval::{
    evaluate_model, format_descriptors, interpolated_csv, macro_interpolated, mean_ap, parse_descriptors, per_rank_csv,
    pr_curve, summary_text, LabeledDescriptor, MapSummary, Metric,
};
use mdrnet::mdr::{export_slice_pgm, format_mdr};
use mdrnet::synth::ShapeClass;
use mdrnet::train::{load_model, metrics_csv, prepare_examples, Example};
use mdrnet::{compute_mdr, load_binvox, normalize_mdr, save_binvox, CoreError, Split, TrainConfig, TrainState};
use mdrnet_tensor::TensorError;
use thiserror::Error;

pub const TOOL_VERSION: &str = concat!("mdrnet ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 2 usage/config, 3 numerical failure, 4 I/O (including unreadable
    /// input files).
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                CoreError::NonFiniteLoss { .. } => 3,
                CoreError::Tensor(TensorError::NonFiniteGradient { .. }) => 3,
                CoreError::Io { .. }
                | CoreError::BinvoxHeader(_)
                | CoreError::BinvoxLength { .. }
                | CoreError::BinvoxValue(_)
                | CoreError::BinvoxZeroRun(_)
                | CoreError::Format { .. } => 4,
                _ => 2,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "mdrnet", version, about = "Voxel shape descriptors from slice sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic binvox dataset and its manifest.
    DatasetSynth(SynthArgs),
    /// Export the slice representation of one binvox file.
    MdrExport(ExportArgs),
    /// Train a model; writes checkpoint, metrics and run manifest.
    Train(TrainArgs),
    /// Write descriptors for every shape of a dataset.
    Extract(ExtractArgs),
    /// Classification accuracy, retrieval mAP and precision-recall curves
    /// on the test split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_delimiter = ',', default_value = "sphere,box,cross,pyramid")]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one PGM image per slice.
    #[arg(long)]
    pub images: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Descriptor file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub descriptors: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for the summary and curve files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "euclidean")]
    pub metric: Metric,
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::DatasetSynth(a) => cmd_dataset_synth(&a),
        Command::MdrExport(a) => cmd_mdr_export(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Extract(a) => cmd_extract(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CoreError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CoreError::io(path, e))?;
    tmp.persist(path).map_err(|e| CoreError::io(path, e.error))?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path).map_err(|e| CoreError::io(path, e))?)
}

fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?)
}

pub fn cmd_dataset_synth(a: &SynthArgs) -> Result<String> {
    let classes = a
        .classes
        .iter()
        .map(|c| c.parse::<ShapeClass>())
        .collect::<Result<Vec<_>, _>>()?;
    let shapes = synthesize(&classes, a.per_class, a.seed)?;
    for (entry, grid) in &shapes {
        write_atomic(&a.out.join(&entry.path), &save_binvox(grid))?;
    }
    let entries: Vec<_> = shapes.iter().map(|(e, _)| e.clone()).collect();
    let manifest = a.out.join("manifest.tsv");
    write_atomic(&manifest, format_manifest(&entries).as_bytes())?;
    let test = entries.iter().filter(|e| e.split == Split::Test).count();
    Ok(format!(
        "wrote {} shapes ({} train / {} test) and {}\n",
        entries.len(),
        entries.len() - test,
        test,
        manifest.display()
    ))
}

pub fn cmd_mdr_export(a: &ExportArgs) -> Result<String> {
    let grid = load_binvox(&read(&a.input)?)?;
    let seq = compute_mdr(&grid, a.k)?;
    let stem = a
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "shape".into());
    write_atomic(&a.out.join(format!("{stem}.mdr")), format_mdr(&seq).as_bytes())?;
    let mut images = 0;
    if a.images {
        for i in 0..seq.len() {
            let (axis, pos) = seq.slice_axis(i);
            let name = format!("{stem}_{axis}{pos}.pgm");
            write_atomic(&a.out.join(name), &export_slice_pgm(&seq, i)?)?;
            images += 1;
        }
    }
    Ok(format!(
        "wrote {} slices (k = {}), {images} images\n",
        seq.len(),
        seq.k()
    ))
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub tool_version: String,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        format!(
            "tool_version = {}\nseed = {}\ndata = {}\ncheckpoint = {}\nmetrics = {}\n\n[config]\n{}",
            self.tool_version,
            self.config.seed,
            self.data.display(),
            self.checkpoint.display(),
            self.metrics.display(),
            self.config.to_text()
        )
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<String> {
    let config = TrainConfig::parse(&read_text(&a.config)?)?;
    let dataset = ShapeDataset::load(&a.data)?;
    let examples = prepare_examples(&dataset, Split::Train, config.k)?;
    if examples.is_empty() {
        return Err(CliError::Usage("dataset has no training shapes".into()));
    }
    let run = RunManifest {
        config: config.clone(),
        data: a.data.clone(),
        checkpoint: a.out.join("checkpoint.bin"),
        metrics: a.out.join("metrics.csv"),
        tool_version: TOOL_VERSION.into(),
    };
    write_atomic(&a.out.join("run.txt"), run.to_text().as_bytes())?;

    let mut state = TrainState::init(config.clone(), dataset.n_classes())?;
    for _ in 0..config.epochs {
        let m = state.train_epoch(&examples)?.clone();
        eprintln!(
            "epoch {}/{}  g_loss {:.6}  d_loss {}  train_acc {:.4}",
            m.epoch,
            config.epochs,
            m.g_loss,
            m.d_loss.map_or("-".into(), |d| format!("{d:.6}")),
            m.train_acc
        );
        write_atomic(&run.checkpoint, &state.checkpoint_bytes())?;
        write_atomic(&run.metrics, metrics_csv(state.metrics()).as_bytes())?;
    }
    if config.epochs == 0 {
        write_atomic(&run.checkpoint, &state.checkpoint_bytes())?;
        write_atomic(&run.metrics, metrics_csv(state.metrics()).as_bytes())?;
    }
    let acc = state.metrics().last().map_or(f64::NAN, |m| m.train_acc);
    Ok(format!("final train accuracy = {acc:.6}\n"))
}

fn all_examples(dataset: &ShapeDataset, k: usize) -> Result<Vec<Example>> {
    let mut out = prepare_examples(dataset, Split::Train, k)?;
    out.extend(prepare_examples(dataset, Split::Test, k)?);
    let order: std::collections::HashMap<&str, usize> = dataset
        .shapes()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    out.sort_by_key(|e| order[e.id.as_str()]);
    Ok(out)
}

pub fn cmd_extract(a: &ExtractArgs) -> Result<String> {
    let model = load_model(&read(&a.checkpoint)?)?;
    let dataset = ShapeDataset::load(&a.data)?;
    let examples = all_examples(&dataset, model.k)?;
    let mdrs: Vec<_> = examples.iter().map(|e| &e.mdr).collect();
    let descriptors = model.descriptors(&mdrs)?;
    let items: Vec<_> = examples.iter().map(|e| e.id.clone()).zip(descriptors).collect();
    write_atomic(&a.out, format_descriptors(&items).as_bytes())?;
    Ok(format!("wrote {} descriptors to {}\n", items.len(), a.out.display()))
}

fn check_classes(model_classes: usize, dataset: &ShapeDataset) -> Result<()> {
    if model_classes != dataset.n_classes() {
        return Err(CoreError::Mismatch(format!(
            "checkpoint was trained for {model_classes} classes, dataset has {}",
            dataset.n_classes()
        ))
        .into());
    }
    Ok(())
}

fn write_eval(out: &Path, accuracy: Option<f64>, retrieval: &MapSummary) -> Result<String> {
    let curves: Vec<_> = retrieval.results.iter().filter_map(pr_curve).collect();
    let summary = summary_text(accuracy, retrieval.map, retrieval.excluded);
    write_atomic(&out.join("summary.txt"), summary.as_bytes())?;
    write_atomic(&out.join("pr_per_rank.csv"), per_rank_csv(&curves).as_bytes())?;
    write_atomic(
        &out.join("pr_11pt.csv"),
        interpolated_csv(&macro_interpolated(&curves)).as_bytes(),
    )?;
    Ok(summary)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let dataset = ShapeDataset::load(&a.data)?;
    match (&a.checkpoint, &a.descriptors) {
        (Some(ckpt), _) => {
            let model = load_model(&read(ckpt)?)?;
            check_classes(model.n_classes, &dataset)?;
            let test = prepare_examples(&dataset, Split::Test, model.k)?;
            let ev = evaluate_model(&model, &test, a.metric)?;
            write_eval(&a.out, Some(ev.accuracy), &ev.retrieval)
        }
        (None, Some(path)) => {
            let mut by_id: std::collections::HashMap<String, _> =
                parse_descriptors(&read_text(path)?)?.into_iter().collect();
            let mut set = Vec::new();
            let mut missing = Vec::new();
            for s in dataset.split(Split::Test) {
                match by_id.remove(&s.id) {
                    Some(d) => set.push(LabeledDescriptor {
                        id: s.id.clone(),
                        label: s.label,
                        descriptor: d,
                    }),
                    None => missing.push(s.id.clone()),
                }
            }
            if !missing.is_empty() {
                return Err(CoreError::Mismatch(format!(
                    "{} test shapes have no descriptor, e.g. {}",
                    missing.len(),
                    missing[0]
                ))
                .into());
            }
            let retrieval = mean_ap(&set, a.metric)?;
            write_eval(&a.out, None, &retrieval)
        }
        (None, None) => Err(CliError::Usage("eval needs --checkpoint or --descriptors".into())),
    }
}

/// Re-reads a normalized slice sequence for a shape file; used by tools
/// that inspect single shapes.
pub fn shape_mdr(path: &Path, k: usize) -> Result<mdrnet::NormalizedMdr> {
    Ok(normalize_mdr(&compute_mdr(&load_binvox(&read(path)?)?, k)?))
}
