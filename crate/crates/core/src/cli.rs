//! Command-line front end: `simulate`, `mask`, `train`, `eval`, `ablate`, `plot`.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and input/output
//! problems, 3 for failures during computation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::kspace::make_mask;
use crate::metrics::{predict, report_from_predictions, MetricsReport};
use crate::phantom::{build_dataset, DatasetConfig, DatasetManifest, Normalization, PhantomConfig, Split};
use crate::plot;
use crate::schedule::{ItfsPolicy, WeightSchedule};
use crate::trainer::{self, load_samples, read_loss_csv, MaskConfig, RunOutput, TrainState};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mtmr", version, about = "Joint MR reconstruction and segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset split and print its manifest path.
    Simulate(SimulateArgs),
    /// Write a sampling mask as text and as a PNG.
    Mask(MaskArgs),
    /// Train from an experiment config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run an ablation matrix with shared seeds.
    Ablate(AblateArgs),
    /// Plot loss-history columns from one or more loss CSVs.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub items: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub lesions: usize,
    #[arg(long, default_value_t = 2)]
    pub ellipses: usize,
    #[arg(long, default_value_t = 10)]
    pub slices_per_volume: usize,
    #[arg(long, value_enum, default_value_t = NormArg::MinMax)]
    pub normalization: NormArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum NormArg {
    MinMax,
    ZScore,
}

impl From<NormArg> for Normalization {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::MinMax => Normalization::MinMax,
            NormArg::ZScore => Normalization::ZScore,
        }
    }
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 0.08)]
    pub center_fraction: f64,
    #[arg(long, default_value_t = 4.0)]
    pub acceleration: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Text output; the PNG goes next to it with a `.png` extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from this checkpoint up to the configured epoch count.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides the configured run directory.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Take the mask settings from this experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of slices rendered as error maps and overlays.
    #[arg(long, default_value_t = 4)]
    pub images: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Matrix {
    /// ITFS on/off crossed with exponential / fixed 0.5 weights.
    Table1,
    /// Weight schedules: fixed-0.5, fixed-0.2, linear, exponential.
    Table2,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum, default_value_t = Matrix::Table1)]
    pub matrix: Matrix,
    /// Run the variants on separate threads; results are identical.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Loss CSVs; each becomes one series.
    #[arg(long = "csv", required = true)]
    pub csvs: Vec<PathBuf>,
    #[arg(long, default_value = "L_seg")]
    pub column: String,
    /// Average the column over each epoch instead of plotting every step.
    #[arg(long)]
    pub per_epoch: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_)
        | Error::ShapeMismatch(_)
        | Error::WrongDomain { .. }
        | Error::IndexOutOfRange { .. } => EXIT_RUNTIME,
        _ => EXIT_USAGE,
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Mask(a) => cmd_mask(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Plot(a) => cmd_plot(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = DatasetConfig {
        phantom: PhantomConfig {
            height: a.height,
            width: a.width,
            n_ellipses: a.ellipses,
            lesion_count: a.lesions,
            n_classes: a.classes,
            ..PhantomConfig::default()
        },
        split: a.split.into(),
        slices_per_volume: a.slices_per_volume,
        normalization: a.normalization.into(),
    };
    let manifest = build_dataset(&cfg, a.items, a.seed, &a.out)?;
    println!(
        "{}",
        DatasetManifest::manifest_path(&manifest.root, manifest.split).display()
    );
    Ok(())
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

pub fn cmd_mask(a: &MaskArgs) -> Result<()> {
    let mask = make_mask(a.width, a.center_fraction, a.acceleration, a.seed)?;
    write_text(&a.out, &format!("{mask}\n"))?;
    let png = with_extension(&a.out, "png");
    plot::mask_image(&mask, a.width, &png)?;
    println!(
        "{} lines kept of {} ({} center); wrote {} and {}",
        mask.kept(),
        mask.width(),
        mask.center_lines(),
        a.out.display(),
        png.display()
    );
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn loss_plot(run_dir: &Path, state: &TrainState) -> Result<()> {
    let col = |f: fn(&trainer::StepRecord) -> f64| state.history.iter().map(f).collect::<Vec<_>>();
    plot::line_chart(
        &[col(|r| r.l_recon), col(|r| r.l_seg), col(|r| r.l_total)],
        640,
        360,
        &run_dir.join("loss.png"),
    )
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let run_dir = a.run_dir.clone().unwrap_or_else(|| cfg.output.resolve_run_dir());
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    write_text(&run_dir.join("config.toml"), &cfg.to_toml()?)?;
    let (train_set, _) = cfg.resolve_data(&run_dir)?;
    let out = RunOutput {
        dir: &run_dir,
        checkpoint_every: cfg.output.checkpoint_every,
    };
    let state = match &a.resume {
        Some(ckpt) => trainer::resume(&cfg.setup(), &train_set, ckpt, Some(out))?,
        None => trainer::train(&cfg.setup(), &train_set, Some(out))?,
    };
    loss_plot(&run_dir, &state)?;
    println!(
        "trained {} epochs ({} steps); outputs in {}",
        state.epoch,
        state.global_step,
        run_dir.display()
    );
    Ok(())
}

fn write_report(report: &MetricsReport, out: &Path) -> Result<()> {
    write_text(&out.join("report.json"), &report.to_json())?;
    write_text(&out.join("report.csv"), &report.to_csv())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let state = checkpoint::load::<f32>(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mask = match &a.config {
        Some(p) => ExperimentConfig::load(p)?.mask,
        None => MaskConfig::default(),
    };
    let samples = load_samples(&manifest, &mask)?;
    let preds = predict(&state, &samples)?;
    let report = report_from_predictions(&preds, &manifest.class_names)?;
    write_report(&report, &a.out)?;
    for (i, p) in preds.iter().take(a.images).enumerate() {
        plot::error_map(&p.recon, &p.truth_image, &a.out.join(format!("error_{i:03}.png")))?;
        plot::overlay(&p.recon, &p.labels, &p.truth_labels, &a.out.join(format!("overlay_{i:03}.png")))?;
    }
    let mean = |k: &str| report.mean(k).unwrap_or(f64::NAN);
    println!(
        "PSNR {:.2} dB (zero-filled {:.2}), SSIM {:.4}, mean Dice {:.4}; reports in {}",
        mean("psnr"),
        mean("zero_filled_psnr"),
        mean("ssim"),
        report.mean_foreground_dice(),
        a.out.display()
    );
    Ok(())
}

/// One row of an ablation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub itfs: ItfsPolicy,
    pub schedule: WeightSchedule,
}

/// Variants of a matrix derived from a base config; seeds are shared.
pub fn variants(matrix: Matrix, base: &ExperimentConfig) -> Vec<Variant> {
    let itfs_on = ItfsPolicy {
        enabled: true,
        ..base.training.itfs.clone()
    };
    let itfs_off = ItfsPolicy {
        enabled: false,
        ..base.training.itfs.clone()
    };
    let exponential = WeightSchedule {
        kind: crate::schedule::ScheduleKind::Exponential,
        ..base.training.schedule.clone()
    };
    let v = |name: &str, itfs: &ItfsPolicy, schedule: WeightSchedule| Variant {
        name: name.into(),
        itfs: itfs.clone(),
        schedule,
    };
    match matrix {
        Matrix::Table1 => vec![
            v("itfs+drlc", &itfs_on, exponential.clone()),
            v("itfs", &itfs_on, WeightSchedule::fixed(0.5)),
            v("drlc", &itfs_off, exponential),
            v("neither", &itfs_off, WeightSchedule::fixed(0.5)),
        ],
        Matrix::Table2 => {
            let itfs = &base.training.itfs;
            vec![
                v("fixed-0.5", itfs, WeightSchedule::fixed(0.5)),
                v("fixed-0.2", itfs, WeightSchedule::fixed(0.2)),
                v("linear", itfs, WeightSchedule::linear(base.training.epochs.max(1) as f64)),
                v("exponential", itfs, exponential),
            ]
        }
    }
}

/// Trains and evaluates one variant in `<run_dir>/<name>`.
fn run_variant(
    base: &ExperimentConfig,
    variant: &Variant,
    run_dir: &Path,
    train_set: &DatasetManifest,
    test_set: &DatasetManifest,
) -> Result<MetricsReport> {
    let mut cfg = base.clone();
    cfg.training.itfs = variant.itfs.clone();
    cfg.training.schedule = variant.schedule.clone();
    let dir = run_dir.join(&variant.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
    let out = RunOutput {
        dir: &dir,
        checkpoint_every: cfg.output.checkpoint_every,
    };
    let state = trainer::train(&cfg.setup(), train_set, Some(out))?;
    loss_plot(&dir, &state)?;
    let preds = predict(&state, &load_samples(test_set, &cfg.mask)?)?;
    let report = report_from_predictions(&preds, &test_set.class_names)?;
    write_report(&report, &dir)?;
    Ok(report)
}

pub const ABLATION_HEADER: &str =
    "name,itfs,schedule,dice_mean,dice_std,precision_mean,recall_mean,psnr_mean,psnr_std,ssim_mean,zero_filled_psnr_mean";

/// Combined comparison table, one row per variant.
pub fn ablation_csv(rows: &[(Variant, MetricsReport)]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for (v, r) in rows {
        let fg: Vec<f64> = r.volumes.iter().map(|x| mean(&x.dice)).collect();
        let prec: Vec<f64> = r.volumes.iter().map(|x| mean(&x.precision)).collect();
        let rec: Vec<f64> = r.volumes.iter().map(|x| mean(&x.recall)).collect();
        let dice = crate::metrics::Summary::of(&fg);
        let agg = |k: &str| r.aggregate.get(k).copied().map(|s| (s.mean, s.std)).unwrap_or((f64::NAN, f64::NAN));
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            v.name,
            v.itfs.enabled,
            v.schedule.label(),
            dice.mean,
            dice.std,
            mean(&prec),
            mean(&rec),
            agg("psnr").0,
            agg("psnr").1,
            agg("ssim").0,
            agg("zero_filled_psnr").0
        )
        .unwrap();
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let base = ExperimentConfig::load(&a.config)?;
    let run_dir = a.run_dir.clone().unwrap_or_else(|| base.output.resolve_run_dir());
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let (train_set, test_set) = base.resolve_data(&run_dir)?;
    let vs = variants(a.matrix, &base);
    let reports: Vec<Result<MetricsReport>> = if a.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = vs
                .iter()
                .map(|v| s.spawn(|| run_variant(&base, v, &run_dir, &train_set, &test_set)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("variant thread")).collect()
        })
    } else {
        vs.iter()
            .map(|v| run_variant(&base, v, &run_dir, &train_set, &test_set))
            .collect()
    };
    let rows: Vec<(Variant, MetricsReport)> = vs
        .into_iter()
        .zip(reports)
        .map(|(v, r)| r.map(|r| (v, r)))
        .collect::<Result<_>>()?;
    let table = ablation_csv(&rows);
    write_text(&run_dir.join("ablation.csv"), &table)?;
    let series: Vec<Vec<f64>> = rows
        .iter()
        .map(|(v, _)| {
            read_loss_csv(&trainer::loss_csv_path(&run_dir.join(&v.name)))
                .map(|h| per_epoch(&h, |r| r.l_seg))
        })
        .collect::<Result<_>>()?;
    plot::line_chart(&series, 640, 360, &run_dir.join("ablation_seg_loss.png"))?;
    print!("{table}");
    Ok(())
}

fn per_epoch(history: &[trainer::StepRecord], f: fn(&trainer::StepRecord) -> f64) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for r in history {
        let e = r.epoch as usize;
        if out.len() <= e {
            out.resize(e + 1, (0.0, 0));
        }
        out[e].0 += f(r);
        out[e].1 += 1;
    }
    out.into_iter()
        .map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect()
}

pub fn cmd_plot(a: &PlotArgs) -> Result<()> {
    let pick: fn(&trainer::StepRecord) -> f64 = match a.column.as_str() {
        "alpha" => |r| r.alpha,
        "beta" => |r| r.beta,
        "L_recon" => |r| r.l_recon,
        "L_seg" => |r| r.l_seg,
        "L_total" => |r| r.l_total,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown column {other}; expected alpha, beta, L_recon, L_seg or L_total"
            )))
        }
    };
    let series: Vec<Vec<f64>> = a
        .csvs
        .iter()
        .map(|p| {
            read_loss_csv(p).map(|h| {
                if a.per_epoch {
                    per_epoch(&h, pick)
                } else {
                    h.iter().map(pick).collect()
                }
            })
        })
        .collect::<Result<_>>()?;
    plot::line_chart(&series, 640, 360, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
