//! The `candide` command line.
//!
//! Every command writes its outputs plus a `manifest.json` into `--out`.
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::mlp::{self, TrainConfig, TrainingLog};
use crate::classify::svm::{svm_train, SvmParams};
use crate::classify::{architecture_for, Classifier, TrainedClassifier};
use crate::error::Error;
use crate::experiment::{run_pose_generalization, ExperimentConfig, ExperimentResult, EXPERIMENT_IDENTITY_SIGMA};
use crate::features::{
    apply_norm, au8_vector, fit_norm, fp68_vector, read_feature_csv, write_feature_csv, Emotion, FeatureKind,
    FeatureVector,
};
use crate::fitting::{
    fit_frame, format_distrust_table, parallel_map, personalize, DistrustRecord, DroppedFrame, FitRecord, LmConfig,
    ParamMask,
};
use crate::metrics::{ConfusionMatrix, Report};
use crate::model::{CandideModel, Correspondence};
use crate::synth::{generate_dataset, read_landmark_csv, AugmentConfig, LabeledFrame, RecipeBook, SynthSpec};

pub const THREADS_ENV: &str = "CANDIDE_FIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "candide", version, about = "Face model fitting, action-unit features and emotion classifiers")]
pub struct Cli {
    /// Head model file (bundled model if omitted)
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Landmark correspondence file (bundled table if omitted)
    #[arg(long, global = true)]
    pub corr: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Suppress progress messages
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic landmark dataset
    Synth(SynthArgs),
    /// Fit the head model to every frame of a landmark file
    Fit(FitArgs),
    /// Same as `fit --mode personalize`
    Personalize(PersonalizeArgs),
    /// Write AU8 (from fits) or FP68 (from landmarks) feature CSV
    Extract(ExtractArgs),
    /// Train a classifier on a feature CSV
    Train(TrainArgs),
    /// Evaluate a trained classifier on a feature CSV
    Eval(EvalArgs),
    /// Summarize evaluation reports, or run the pose-generalization comparison
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n_per_class: usize,
    /// Training yaw in radians
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub train_yaw: f64,
    /// Test yaw in radians; repeat for several (default: -pi/4 and pi/4)
    #[arg(long = "test-yaw", allow_negative_numbers = true)]
    pub test_yaws: Vec<f64>,
    /// Landmark noise in pixels
    #[arg(long, default_value_t = 0.5)]
    pub noise_sigma: f64,
    /// Standard deviation of per-frame shape-unit coefficients
    #[arg(long, default_value_t = 0.0)]
    pub identity_sigma: f64,
    /// Disable training-set augmentation
    #[arg(long)]
    pub no_augment: bool,
    /// Recipe file (bundled recipes if omitted)
    #[arg(long)]
    pub recipes: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    /// scale, rotation and translation only
    Global,
    /// pose and shape units on neutral frames, then distrust statistics
    Personalize,
    /// pose and action units with the shape frozen
    Action,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Landmark CSV (`label,tau,x0,y0,...`)
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = FitMode::Action)]
    pub mode: FitMode,
    /// Personalization JSON supplying the frozen shape for action mode
    #[arg(long)]
    pub shape: Option<PathBuf>,
    /// Distrust threshold for personalize mode
    #[arg(long, default_value_t = 0.25)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct PersonalizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Au8,
    Fp68,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// `fits.jsonl` for au8, landmark CSV for fp68
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub kind: KindArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ClassifierArg {
    SvmPoly,
    Mlp,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, value_enum)]
    pub classifier: ClassifierArg,
    /// SVM regularization
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    #[arg(long, default_value_t = 3)]
    pub degree: u32,
    /// Kernel scale (default 1/dim)
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub coef0: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Fraction of rows held out for MLP model selection
    #[arg(long, default_value_t = 0.2)]
    pub val_frac: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained model JSON written by `train`
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Also write per-class bar-chart data to `plot_data.csv`
    #[arg(long)]
    pub plot_data: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `report.json` files from `eval`
    #[arg(long = "input")]
    pub inputs: Vec<PathBuf>,
    /// Run the frontal-train / rotated-test comparison over this many seeds
    #[arg(long)]
    pub pose_generalization: Option<u64>,
    /// Samples per class for the comparison
    #[arg(long, default_value_t = 200)]
    pub n_per_class: usize,
    /// Per-frame shape-unit spread for the comparison
    #[arg(long, default_value_t = EXPERIMENT_IDENTITY_SIGMA)]
    pub identity_sigma: f64,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    fn numerical(message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: if e.is_numerical() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Prefixes an error with the file it came from, unless it already names it.
fn at(path: &Path) -> impl Fn(Error) -> CliError + '_ {
    move |e| {
        let mut c = CliError::from(e);
        if !c.message.contains(&path.display().to_string()) {
            c.message = format!("{}: {}", path.display(), c.message);
        }
        c
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    inputs: Vec<String>,
    outputs: Vec<String>,
    seed: u64,
    config_hash: String,
    config: serde_json::Value,
    version: &'a str,
    wall_time_s: f64,
}

/// SHA-256 of the config serialized with sorted keys.
pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

struct Ctx {
    model: CandideModel,
    corr: Correspondence,
    model_input: String,
    corr_input: String,
    seed: u64,
    out: PathBuf,
    quiet: bool,
    started: Instant,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn write(&self, name: &str, body: impl AsRef<[u8]>) -> CliResult<String> {
        let p = self.out.join(name);
        std::fs::write(&p, body).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
        Ok(name.to_string())
    }

    fn finish(
        &self,
        command: &str,
        mut inputs: Vec<String>,
        outputs: Vec<String>,
        config: impl Serialize,
    ) -> CliResult<()> {
        inputs.push(format!("model={}", self.model_input));
        inputs.push(format!("corr={}", self.corr_input));
        let config = serde_json::to_value(config).map_err(Error::from)?;
        let m = Manifest {
            command,
            inputs,
            outputs,
            seed: self.seed,
            config_hash: config_hash(&config),
            config,
            version: env!("CARGO_PKG_VERSION"),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let body = serde_json::to_string_pretty(&m).map_err(Error::from)? + "\n";
        self.write("manifest.json", body)?;
        Ok(())
    }
}

/// Worker count: `CANDIDE_FIT_THREADS` if set, else the available parallelism.
pub fn fit_threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => avail,
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

pub fn run(cli: Cli) -> CliResult<()> {
    let started = Instant::now();
    let model = match &cli.model {
        Some(p) => CandideModel::load(p).map_err(at(p))?,
        None => CandideModel::bundled(),
    };
    let corr = match &cli.corr {
        Some(p) => Correspondence::load(p, &model).map_err(at(p))?,
        None => Correspondence::bundled(&model),
    };
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::usage(format!("{}: {e}", cli.out.display())))?;
    let ctx = Ctx {
        model,
        corr,
        model_input: cli.model.as_deref().map_or("bundled".into(), display),
        corr_input: cli.corr.as_deref().map_or("bundled".into(), display),
        seed: cli.seed,
        out: cli.out.clone(),
        quiet: cli.quiet,
        started,
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Fit(a) => cmd_fit(&ctx, a),
        Command::Personalize(a) => cmd_fit(
            &ctx,
            FitArgs {
                input: a.input,
                mode: FitMode::Personalize,
                shape: None,
                threshold: a.threshold,
            },
        ),
        Command::Extract(a) => cmd_extract(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Report(a) => cmd_report(&ctx, a),
    }
}

fn cmd_synth(ctx: &Ctx, a: SynthArgs) -> CliResult<()> {
    let book = match &a.recipes {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            RecipeBook::parse(&text).map_err(at(p))?
        }
        None => RecipeBook::bundled(),
    };
    let defaults = SynthSpec::default();
    let spec = SynthSpec {
        n_per_class: a.n_per_class,
        train_yaw: a.train_yaw,
        test_yaws: if a.test_yaws.is_empty() { defaults.test_yaws.clone() } else { a.test_yaws },
        noise_sigma: a.noise_sigma,
        seed: ctx.seed,
        augmentation: if a.no_augment { AugmentConfig::disabled() } else { AugmentConfig::default() },
        identity_sigma: a.identity_sigma,
        ..defaults
    };
    let data = generate_dataset(&spec, &ctx.model, &ctx.corr, &book)?;
    let written = data.write_dir(&ctx.out)?;
    ctx.note(format!(
        "synth: {} train / {} test frames -> {}",
        data.train.len(),
        data.test.len(),
        ctx.out.display()
    ));
    let outputs = written
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let inputs = a.recipes.iter().map(|p| format!("recipes={}", p.display())).collect();
    ctx.finish("synth", inputs, outputs, &spec)
}

#[derive(Serialize, Deserialize)]
struct PersonalizationFile {
    threshold: f64,
    a_shape: Vec<f64>,
    records: Vec<DistrustRecord>,
    dropped: Vec<DroppedFrame>,
}

fn jsonl<T: Serialize>(rows: &[T]) -> CliResult<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(Error::from)?);
        out.push('\n');
    }
    Ok(out)
}

fn cmd_fit(ctx: &Ctx, a: FitArgs) -> CliResult<()> {
    let mut frames = read_landmark_csv(&a.input).map_err(at(&a.input))?;
    frames.sort_by_key(|f| f.frame.tau);
    let lm = LmConfig::default();
    let mode_name = serde_json::to_value(a.mode).map_err(Error::from)?;
    let mut inputs = vec![display(&a.input)];
    let config = serde_json::json!({
        "mode": mode_name,
        "threshold": a.threshold,
        "shape": a.shape.as_deref().map(display),
        "lm": {
            "initial_lambda": lm.initial_lambda,
            "lambda_up": lm.lambda_up,
            "lambda_down": lm.lambda_down,
            "tol_gradient": lm.tol_gradient,
            "tol_step": lm.tol_step,
            "max_iter": lm.max_iter,
        },
    });

    if a.mode == FitMode::Personalize {
        // Labeled rows other than neutral are not used for personalization.
        let neutral: Vec<&LabeledFrame> = frames
            .iter()
            .filter(|f| f.label.is_none_or(|l| l == Emotion::Neutral))
            .collect();
        let input: Vec<_> = neutral.iter().map(|f| f.frame.clone()).collect();
        let p = personalize(&input, &ctx.model, &ctx.corr, a.threshold, &lm)?;
        if !ctx.quiet {
            print!("{}", format_distrust_table(&p.records, a.threshold));
        }
        let records: Vec<FitRecord> = p
            .fits
            .iter()
            .map(|(tau, fit)| FitRecord::new(*tau, Some(Emotion::Neutral.to_string()), fit))
            .collect();
        let file = PersonalizationFile {
            threshold: a.threshold,
            a_shape: p.a_shape.clone(),
            records: p.records.clone(),
            dropped: p.dropped.clone(),
        };
        let outputs = vec![
            ctx.write("fits.jsonl", jsonl(&records)?)?,
            ctx.write(
                "personalization.json",
                serde_json::to_string_pretty(&file).map_err(Error::from)? + "\n",
            )?,
        ];
        ctx.finish("fit", inputs, outputs, &config)?;
        return report_dropped(&p.dropped);
    }

    let (mask, a_shape) = match a.mode {
        FitMode::Global => (ParamMask::GLOBAL, vec![0.0; ctx.model.dim_shape()]),
        _ => {
            let shape = match &a.shape {
                Some(p) => {
                    inputs.push(display(p));
                    let text =
                        std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
                    let f: PersonalizationFile = serde_json::from_str(&text).map_err(|e| at(p)(e.into()))?;
                    f.a_shape
                }
                None => vec![0.0; ctx.model.dim_shape()],
            };
            (ParamMask::ACTION, shape)
        }
    };
    let threads = fit_threads();
    ctx.note(format!("fit: {} frames on {threads} threads", frames.len()));
    let results = parallel_map(&frames, threads, |f| {
        fit_frame(&f.frame, &ctx.model, &ctx.corr, mask, &a_shape, &lm)
    });
    let mut records = Vec::new();
    let mut dropped = Vec::new();
    for (f, r) in frames.iter().zip(results) {
        match r {
            Ok(fit) => records.push(FitRecord::new(f.frame.tau, f.label.map(|l| l.to_string()), &fit)),
            Err(e) if e.is_numerical() => dropped.push(DroppedFrame {
                tau: f.frame.tau,
                reason: e.to_string(),
            }),
            Err(e) => return Err(at(&a.input)(e)),
        }
    }
    let mut outputs = vec![ctx.write("fits.jsonl", jsonl(&records)?)?];
    if !dropped.is_empty() {
        outputs.push(ctx.write("divergences.jsonl", jsonl(&dropped)?)?);
    }
    ctx.finish("fit", inputs, outputs, &config)?;
    report_dropped(&dropped)
}

fn report_dropped(dropped: &[DroppedFrame]) -> CliResult<()> {
    if dropped.is_empty() {
        return Ok(());
    }
    let mut msg = format!("{} frame(s) diverged:", dropped.len());
    for d in dropped {
        let _ = write!(msg, "\n  tau {}: {}", d.tau, d.reason);
    }
    Err(CliError::numerical(msg))
}

fn read_fits(path: &Path) -> CliResult<Vec<FitRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::usage(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn cmd_extract(ctx: &Ctx, a: ExtractArgs) -> CliResult<()> {
    let rows: Vec<FeatureVector> = match a.kind {
        KindArg::Au8 => {
            let fits = read_fits(&a.input)?;
            fits.iter()
                .map(|f| {
                    let label = f.label.as_deref().map(str::parse::<Emotion>).transpose()?;
                    au8_vector(&f.a_action, label)
                })
                .collect::<Result<_, Error>>()
                .map_err(at(&a.input))?
        }
        KindArg::Fp68 => read_landmark_csv(&a.input)
            .and_then(|frames| frames.iter().map(|f| fp68_vector(&f.frame, f.label)).collect())
            .map_err(at(&a.input))?,
    };
    let kind = match a.kind {
        KindArg::Au8 => FeatureKind::Au8,
        KindArg::Fp68 => FeatureKind::Fp68,
    };
    ctx.note(format!("extract: {} {kind} rows", rows.len()));
    let out = ctx.write("features.csv", write_feature_csv(&rows))?;
    ctx.finish(
        "extract",
        vec![display(&a.input)],
        vec![out],
        serde_json::json!({ "kind": kind.to_string() }),
    )
}

#[derive(Serialize)]
struct TrainLogFile {
    classifier: &'static str,
    feature_kind: String,
    n_rows: usize,
    n_fit: usize,
    n_validation: usize,
    /// Accuracy of the saved model on every row of the training file.
    final_train_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_support: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mlp: Option<TrainingLog>,
}

fn labeled_rows(rows: &[FeatureVector], path: &Path) -> CliResult<Vec<usize>> {
    if rows.is_empty() {
        return Err(CliError::usage(format!("{}: no rows", path.display())));
    }
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            r.label
                .map(Emotion::index)
                .ok_or_else(|| CliError::usage(format!("{}: row {} has no label", path.display(), i + 1)))
        })
        .collect()
}

fn accuracy_of(truth: &[usize], pred: &[Emotion]) -> CliResult<f64> {
    let p: Vec<usize> = pred.iter().map(|e| e.index()).collect();
    let c = ConfusionMatrix::from_pairs(Emotion::ALL.len(), truth, &p)?;
    Ok(crate::metrics::accuracy(&c)?)
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> CliResult<()> {
    let rows = read_feature_csv(&a.features).map_err(at(&a.features))?;
    let labels = labeled_rows(&rows, &a.features)?;
    let kind = rows[0].kind;
    let norm = fit_norm(&rows)?;
    let x: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| apply_norm(r, &norm).map(|v| v.values))
        .collect::<Result<_, Error>>()?;

    let (classifier, n_fit, n_val, n_support, mlp_log) = match a.classifier {
        ClassifierArg::SvmPoly => {
            let params = SvmParams {
                degree: a.degree,
                gamma: a.gamma,
                coef0: a.coef0,
                c: a.c,
                tol: a.tol,
                ..SvmParams::default()
            };
            let m = svm_train(&x, &labels, Emotion::ALL.len(), &params)?;
            let sv = m.machines.iter().map(|mach| mach.alpha.len()).collect();
            (Classifier::SvmPoly(m), x.len(), 0, Some(sv), None)
        }
        ClassifierArg::Mlp => {
            if !(a.val_frac > 0.0 && a.val_frac < 1.0) || x.len() < 2 {
                return Err(CliError::usage("--val-frac must be in (0, 1) and there must be at least 2 rows"));
            }
            let config = TrainConfig {
                learning_rate: a.lr,
                plateau_patience: a.patience,
                batch_size: a.batch_size,
                max_epochs: a.epochs,
                seed: ctx.seed,
                ..TrainConfig::default()
            };
            let mut order: Vec<usize> = (0..x.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            rng.set_stream(2);
            order.shuffle(&mut rng);
            let n_val = ((x.len() as f64 * a.val_frac).round() as usize).clamp(1, x.len() - 1);
            let (vi, fi) = order.split_at(n_val);
            let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
                idx.iter().map(|&i| (x[i].clone(), labels[i])).unzip()
            };
            let (xf, yf) = pick(fi);
            let (xv, yv) = pick(vi);
            let (m, log) = mlp::mlp_train(architecture_for(kind), &xf, &yf, &xv, &yv, &config)?;
            (Classifier::Mlp(m), fi.len(), vi.len(), None, Some(log))
        }
    };
    let trained = TrainedClassifier {
        feature_kind: kind,
        norm,
        classifier,
    };
    let final_train_accuracy = accuracy_of(&labels, &trained.predict(&rows)?)?;
    ctx.note(format!(
        "train: {} on {} {kind} rows, training accuracy {final_train_accuracy:.4}",
        trained.classifier.name(),
        rows.len()
    ));
    let log = TrainLogFile {
        classifier: trained.classifier.name(),
        feature_kind: kind.to_string(),
        n_rows: rows.len(),
        n_fit,
        n_validation: n_val,
        final_train_accuracy,
        n_support,
        mlp: mlp_log,
    };
    let outputs = vec![
        ctx.write("model.json", trained.to_json()? + "\n")?,
        ctx.write(
            "training_log.json",
            serde_json::to_string_pretty(&log).map_err(Error::from)? + "\n",
        )?,
    ];
    ctx.finish("train", vec![display(&a.features)], outputs, &a)
}

/// Per-class bar-chart rows: `class,precision,recall,f1,support`.
pub fn plot_data_csv(report: &Report) -> String {
    let mut out = String::from("class,precision,recall,f1,support\n");
    for (k, name) in report.classes.iter().enumerate() {
        let p = &report.per_class;
        let _ = writeln!(out, "{name},{},{},{},{}", p.precision[k], p.recall[k], p.f1[k], p.support[k]);
    }
    out
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs) -> CliResult<()> {
    let trained = TrainedClassifier::load(&a.weights).map_err(at(&a.weights))?;
    let rows = read_feature_csv(&a.features).map_err(at(&a.features))?;
    let labels = labeled_rows(&rows, &a.features)?;
    if rows[0].kind != trained.feature_kind {
        return Err(CliError::usage(format!(
            "model expects {} features but {} holds {}",
            trained.feature_kind,
            a.features.display(),
            rows[0].kind
        )));
    }
    let pred: Vec<usize> = trained.predict(&rows)?.iter().map(|e| e.index()).collect();
    let c = ConfusionMatrix::from_pairs(Emotion::ALL.len(), &labels, &pred)?;
    let names: Vec<String> = Emotion::ALL.iter().map(|e| e.to_string()).collect();
    let report = Report::new(&c, &names)?;
    ctx.note(format!(
        "eval: accuracy {:.4}, kappa {}, weighted F1 {:.4}",
        report.accuracy,
        report.kappa.map_or("undefined".into(), |k| format!("{k:.4}")),
        report.weighted_f1
    ));
    let mut outputs = vec![ctx.write(
        "report.json",
        serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n",
    )?];
    if a.plot_data {
        outputs.push(ctx.write("plot_data.csv", plot_data_csv(&report))?);
    }
    ctx.finish(
        "eval",
        vec![display(&a.weights), display(&a.features)],
        outputs,
        serde_json::json!({ "plot_data": a.plot_data }),
    )
}

fn cmd_report(ctx: &Ctx, a: ReportArgs) -> CliResult<()> {
    if a.inputs.is_empty() && a.pose_generalization.is_none() {
        return Err(CliError::usage("report needs --input files or --pose-generalization <seeds>"));
    }
    let mut outputs = Vec::new();
    if !a.inputs.is_empty() {
        let mut csv = String::from("report,accuracy,kappa,weighted_f1,macro_f1\n");
        let mut table = format!("{:<40} {:>9} {:>9} {:>9}\n", "report", "accuracy", "kappa", "w-F1");
        for p in &a.inputs {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            let r: Report = serde_json::from_str(&text).map_err(|e| at(p)(e.into()))?;
            let kappa = r.kappa.map_or(String::new(), |k| k.to_string());
            let _ = writeln!(csv, "{},{},{kappa},{},{}", p.display(), r.accuracy, r.weighted_f1, r.macro_f1);
            let _ = writeln!(
                table,
                "{:<40} {:>9.4} {:>9} {:>9.4}",
                p.display(),
                r.accuracy,
                r.kappa.map_or("-".into(), |k| format!("{k:.4}")),
                r.weighted_f1
            );
        }
        if !ctx.quiet {
            print!("{table}");
        }
        outputs.push(ctx.write("summary.csv", csv)?);
    }
    if let Some(n) = a.pose_generalization {
        let threads = fit_threads();
        let mut results: Vec<ExperimentResult> = Vec::new();
        for k in 0..n {
            let mut cfg = ExperimentConfig::seeded(ctx.seed + k);
            cfg.synth.n_per_class = a.n_per_class;
            cfg.synth.identity_sigma = a.identity_sigma;
            cfg.threads = threads;
            let r = run_pose_generalization(&cfg, &ctx.model, &ctx.corr, &RecipeBook::bundled())?;
            ctx.note(format!(
                "seed {}: svm test {:.4}, mlp test {:.4}",
                r.seed, r.svm_test_accuracy, r.mlp_test_accuracy
            ));
            results.push(r);
        }
        let mut csv =
            String::from("seed,n_train,n_test,n_dropped,svm_train_accuracy,svm_test_accuracy,mlp_train_accuracy,mlp_test_accuracy\n");
        for r in &results {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                r.seed,
                r.n_train,
                r.n_test,
                r.n_dropped,
                r.svm_train_accuracy,
                r.svm_test_accuracy,
                r.mlp_train_accuracy,
                r.mlp_test_accuracy
            );
        }
        outputs.push(ctx.write("pose_generalization.csv", csv)?);
    }
    let inputs = a.inputs.iter().map(|p| display(p)).collect();
    ctx.finish(
        "report",
        inputs,
        outputs,
        serde_json::json!({
            "pose_generalization": a.pose_generalization,
            "n_per_class": a.n_per_class,
            "identity_sigma": a.identity_sigma,
        }),
    )
}
