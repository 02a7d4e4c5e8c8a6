use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use critpath_core::amviz::{activation_maximization_batch, AmConfig};
use critpath_core::analysis::{layer_activation_std, layer_maps, AnalysisConfig};
use critpath_core::codec::model_digest;
use critpath_core::data::Dataset;
use critpath_core::distiller::{
    critical_path_from_maps, default_distill_layers, distill, pruned_arch, DistillConfig, SelectionScore,
};
use critpath_core::evaluator::{report_row, EvalReport};
use critpath_core::model::arch_param_stats;
use critpath_core::trainer::{train_with_observer, TrainConfig};
use critpath_core::{build_model, ArchSpec, InputShape, Model};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::datasets::{load_cifar10_dir, load_mnist_dir};
use crate::export::{
    history_csv, layer_std_csv, paramcount_csv, paramcount_text, report_csv, report_table, trace_csv, write_json,
    write_manifest, write_map, write_text,
};
use crate::model_file::{load_model, save_model};
use crate::pnm::export_pattern_image;

/// AM filters are optimized in fixed groups of this size, whatever the thread count.
const AM_GROUP: usize = 8;

#[derive(Parser, Debug)]
#[command(name = "critpath", version, about = "Per-class critical paths in small CNNs")]
pub struct Cli {
    /// Worker threads; 1 runs everything on the calling thread.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Activation, contribution and product maps per conv layer.
    Analyze(AnalyzeArgs),
    /// Normalized STD of class-mean activations per conv layer.
    Stats(StatsArgs),
    /// Activation maximization patterns for filters of one conv layer.
    Am(AmArgs),
    /// Select a critical path and write the distilled one-vs-all model.
    Distill(DistillArgs),
    /// Distill every class and report one-vs-all TP/FP rates.
    Eval(EvalArgs),
    /// Parameter counts and sizes.
    Paramcount(ParamcountArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    fn input(self) -> InputShape {
        match self {
            DatasetKind::Mnist => InputShape::MNIST,
            DatasetKind::Cifar10 => InputShape::CIFAR10,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    VggDesk,
    Vgg16,
}

impl ArchKind {
    fn spec(self, input: InputShape) -> ArchSpec {
        match self {
            ArchKind::VggDesk => ArchSpec::vgg_desk(input, 10),
            ArchKind::Vgg16 => ArchSpec::vgg16(input, 10),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreArg {
    Product,
    Activation,
    Contribution,
}

impl From<ScoreArg> for SelectionScore {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Product => SelectionScore::Product,
            ScoreArg::Activation => SelectionScore::Activation,
            ScoreArg::Contribution => SelectionScore::Contribution,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value_t = DatasetKind::Mnist)]
    pub dataset: DatasetKind,
    /// Directory with the dataset files.
    #[arg(long, env = "CRITPATH_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct AnalysisArgs {
    /// Samples per class used for the maps.
    #[arg(long, default_value_t = 500)]
    pub per_class_cap: usize,
    /// Seed for sample selection.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Split the maps are computed on.
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
}

impl AnalysisArgs {
    fn config(&self) -> AnalysisConfig {
        AnalysisConfig { per_class_cap: self.per_class_cap, seed: self.seed, batch_size: self.batch_size }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = ArchKind::VggDesk)]
    pub arch: ArchKind,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f32,
    /// Epochs at which the learning rate is multiplied by `--lr-decay`.
    #[arg(long, value_delimiter = ',', default_values_t = [20, 25])]
    pub lr_milestones: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub lr_decay: f32,
    /// Seed for initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// 1-based conv layers; all by default.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct AmArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// 1-based conv layer.
    #[arg(long)]
    pub layer: usize,
    /// Filter indices; all filters of the layer by default.
    #[arg(long, value_delimiter = ',')]
    pub filters: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub step_size: f64,
    #[arg(long, default_value_t = 0.1)]
    pub init_amplitude: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub l2_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct PathArgs {
    #[arg(long = "reserved-ratio", alias = "ratio", default_value_t = 0.1)]
    pub reserved_ratio: f64,
    /// 1-based conv layers; the default depends on the depth of the model.
    #[arg(long, value_delimiter = ',')]
    pub distill_layers: Vec<usize>,
    #[arg(long, value_enum, default_value_t = ScoreArg::Product)]
    pub score: ScoreArg,
}

#[derive(Args, Debug, Serialize)]
pub struct DistillArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub target_class: usize,
    #[command(flatten)]
    pub path: PathArgs,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub path: PathArgs,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ParamcountArgs {
    /// Count a model file instead of a preset.
    #[arg(long, conflicts_with = "arch")]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub arch: Option<ArchKind>,
    #[arg(long, value_enum, default_value_t = DatasetKind::Mnist)]
    pub dataset: DatasetKind,
    /// Also count the distilled network at this ratio.
    #[arg(long = "reserved-ratio", alias = "ratio")]
    pub reserved_ratio: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub distill_layers: Vec<usize>,
    /// Write CSV and text files here; stdout only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse `args` (including the program name) and run. Returns the exit code:
/// 0 on success, 2 for usage errors, 1 for everything else.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {line}");
            1
        }
    }
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    let threads = cli.threads;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().context("thread pool")?;
    pool.install(|| match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Am(a) => cmd_am(a, threads),
        Command::Distill(a) => cmd_distill(a),
        Command::Eval(a) => cmd_eval(a, threads),
        Command::Paramcount(a) => cmd_paramcount(a),
    })
}

fn load_splits(data: &DataArgs) -> anyhow::Result<(Dataset, Dataset)> {
    let Some(dir) = &data.data_dir else {
        bail!("no data directory: pass --data-dir or set CRITPATH_DATA_DIR");
    };
    Ok(match data.dataset {
        DatasetKind::Mnist => load_mnist_dir(dir)?,
        DatasetKind::Cifar10 => load_cifar10_dir(dir)?,
    })
}

fn analysis_split(data: &DataArgs, split: SplitArg) -> anyhow::Result<Dataset> {
    let (train, test) = load_splits(data)?;
    Ok(match split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    })
}

fn check_input(model: &Model<f32>, dataset: &Dataset) -> anyhow::Result<()> {
    if model.arch().input != dataset.input_shape() {
        bail!(
            "model expects input {:?} but the dataset has {:?}",
            model.arch().input.dims(),
            dataset.input_shape().dims()
        );
    }
    Ok(())
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let (train_set, test_set) = load_splits(&a.data)?;
    let arch = a.arch.spec(train_set.input_shape());
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        seed: a.seed,
        lr_milestones: a.lr_milestones.clone(),
        lr_decay: a.lr_decay,
    };
    config.validate(train_set.len())?;
    create_out(&a.out)?;
    let init = build_model(arch, a.seed)?;
    let (mut model, history) = train_with_observer(&init, &train_set, &test_set, &config, |e| {
        eprintln!("epoch {:>3}  loss {:.5}  test accuracy {:.4}", e.epoch, e.loss, e.test_accuracy);
    })?;
    model.set_provenance(format!("trained arch={:?} dataset={:?} seed={}", a.arch, a.data.dataset, a.seed));
    let digest = save_model(&model, &a.out.join("model.cpdm"))?;
    write_text(&a.out.join("history.csv"), &history_csv(&history))?;
    write_manifest(&a.out, "train", json!({ "args": &a, "train": config }), Some(digest.clone()))?;
    println!("model {} sha256:{digest}", a.out.join("model.cpdm").display());
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let dataset = analysis_split(&a.data, a.analysis.split)?;
    check_input(&model, &dataset)?;
    let layers = if a.layers.is_empty() { (1..=model.arch().num_conv()).collect() } else { a.layers.clone() };
    let maps = layer_maps(&model, &dataset, &layers, &a.analysis.config())?;
    let digest = model_digest(&model);
    create_out(&a.out)?;
    for m in &maps {
        write_map(&a.out, &m.activation, &digest)?;
        write_map(&a.out, &m.contribution, &digest)?;
        write_map(&a.out, &m.product(), &digest)?;
    }
    write_manifest(&a.out, "analyze", json!({ "args": &a, "layers": layers }), Some(digest))?;
    println!("wrote maps for conv layers {layers:?} to {}", a.out.display());
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let dataset = analysis_split(&a.data, a.analysis.split)?;
    check_input(&model, &dataset)?;
    let std = layer_activation_std(&model, &dataset, &a.analysis.config())?;
    create_out(&a.out)?;
    let csv = layer_std_csv(&std);
    write_text(&a.out.join("layer_std.csv"), &csv)?;
    write_manifest(&a.out, "stats", json!({ "args": &a }), Some(model_digest(&model)))?;
    print!("{csv}");
    Ok(())
}

fn cmd_am(a: AmArgs, threads: usize) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let count = model.arch().conv_filters(a.layer)?;
    let filters: Vec<usize> = if a.filters.is_empty() { (0..count).collect() } else { a.filters.clone() };
    let config =
        AmConfig { steps: a.steps, step_size: a.step_size, init_amplitude: a.init_amplitude, l2_decay: a.l2_decay, seed: a.seed };
    config.validate()?;
    let groups: Vec<&[usize]> = filters.chunks(AM_GROUP).collect();
    let run = |g: &&[usize]| activation_maximization_batch(&model, a.layer, g, &config);
    let results = if threads > 1 {
        groups.par_iter().map(run).collect::<Result<Vec<_>, _>>()?
    } else {
        groups.iter().map(run).collect::<Result<Vec<_>, _>>()?
    };
    create_out(&a.out)?;
    let ext = if model.arch().input.channels == 3 { "ppm" } else { "pgm" };
    let mut traces = Vec::with_capacity(filters.len());
    for (&f, r) in filters.iter().zip(results.into_iter().flatten()) {
        export_pattern_image(&r.pattern, &a.out.join(format!("conv{}_f{f:03}.{ext}", a.layer)))?;
        traces.push((f, r.trace));
    }
    write_text(&a.out.join(format!("conv{}_trace.csv", a.layer)), &trace_csv(&traces))?;
    write_manifest(&a.out, "am", json!({ "args": &a, "am": config }), Some(model_digest(&model)))?;
    println!("wrote {} patterns to {}", filters.len(), a.out.display());
    Ok(())
}

fn distill_config(model: &Model<f32>, target_class: usize, path: &PathArgs, analysis: &AnalysisArgs) -> DistillConfig {
    let layers =
        if path.distill_layers.is_empty() { default_distill_layers(model.arch().num_conv()) } else { path.distill_layers.clone() };
    DistillConfig {
        target_class,
        reserved_ratio: path.reserved_ratio,
        distill_layers: layers,
        analysis: analysis.config(),
        score: path.score.into(),
    }
}

fn cmd_distill(a: DistillArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let config = distill_config(&model, a.target_class, &a.path, &a.analysis);
    config.validate(model.arch())?;
    let dataset = analysis_split(&a.data, a.analysis.split)?;
    check_input(&model, &dataset)?;
    let maps = layer_maps(&model, &dataset, &config.distill_layers, &config.analysis)?;
    let digest = model_digest(&model);
    let path = critical_path_from_maps(&maps, &config, digest.clone())?;
    let distilled = distill(&model, &path)?;
    create_out(&a.out)?;
    write_json(&a.out.join("critical_path.json"), &path)?;
    let file = a.out.join(format!("class{}.cpdm", a.target_class));
    let out_digest = save_model(&distilled.model, &file)?;
    write_manifest(&a.out, "distill", json!({ "args": &a, "distill": &config, "distilled_digest": out_digest }), Some(digest))?;
    let stats = distilled.model.param_stats();
    println!("distilled {} ({} params, {} bytes) sha256:{out_digest}", file.display(), stats.total_params, stats.total_bytes());
    Ok(())
}

fn cmd_eval(a: EvalArgs, threads: usize) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let base = distill_config(&model, 0, &a.path, &a.analysis);
    base.validate(model.arch())?;
    let (train, test) = load_splits(&a.data)?;
    let analysis_set = match a.analysis.split {
        SplitArg::Train => &train,
        SplitArg::Test => &test,
    };
    check_input(&model, analysis_set)?;
    let maps = layer_maps(&model, analysis_set, &base.distill_layers, &base.analysis)?;
    let digest = model_digest(&model);
    let classes: Vec<usize> = (0..model.num_classes()).collect();
    let row = |&c: &usize| report_row(&model, &maps, &test, &base, &digest, c);
    let rows = if threads > 1 {
        classes.par_iter().map(row).collect::<Result<Vec<_>, _>>()?
    } else {
        classes.iter().map(row).collect::<Result<Vec<_>, _>>()?
    };
    let report = EvalReport::from_rows(rows, &model, &base, digest.clone());
    create_out(&a.out)?;
    write_text(&a.out.join("report.csv"), &report_csv(&report))?;
    let table = report_table(&report);
    write_text(&a.out.join("report.txt"), &table)?;
    write_json(&a.out.join("report.json"), &report)?;
    write_manifest(&a.out, "eval", json!({ "args": &a, "distill": &base }), Some(digest))?;
    print!("{table}");
    Ok(())
}

fn cmd_paramcount(a: ParamcountArgs) -> anyhow::Result<()> {
    let arch = match (&a.model, a.arch) {
        (Some(path), _) => load_model(path)?.arch().clone(),
        (None, Some(kind)) => kind.spec(a.dataset.input()),
        (None, None) => bail!("pass --model or --arch"),
    };
    let stats = arch_param_stats(&arch);
    let mut text = paramcount_text(&stats);
    let mut distilled = None;
    if let Some(ratio) = a.reserved_ratio {
        let layers = if a.distill_layers.is_empty() { default_distill_layers(arch.num_conv()) } else { a.distill_layers.clone() };
        if !(ratio > 0.0 && ratio <= 1.0) {
            bail!("reserved ratio {ratio} outside (0, 1]");
        }
        let small = arch_param_stats(&pruned_arch(&arch, &layers, ratio)?);
        text.push_str(&format!("\ndistilled at ratio {ratio}, layers {layers:?}:\n"));
        text.push_str(&paramcount_text(&small));
        distilled = Some(small);
    }
    if let Some(out) = &a.out {
        create_out(out)?;
        write_text(&out.join("paramcount.txt"), &text)?;
        write_text(&out.join("paramcount.csv"), &paramcount_csv(&stats))?;
        if let Some(small) = &distilled {
            write_text(&out.join("paramcount_distilled.csv"), &paramcount_csv(small))?;
        }
        write_manifest(out, "paramcount", json!({ "args": &a }), None)?;
    }
    print!("{text}");
    Ok(())
}
