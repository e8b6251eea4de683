//! The `sbcp` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or numerical error.
//! Human-readable output goes to stdout; JSON and CSV only to `--out` paths.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::embedstore::{read_any_dataset, read_class_features, read_dataset, write_class_features, write_dataset, Dataset};
use crate::encoder::{EncoderMode, SurrogateEncoder};
use crate::error::{Error, Result};
use crate::grad::{finite_diff_check_term, LossTerm};
use crate::losses::{LossContext, Modulation};
use crate::scoring::write_scores_file;
use crate::synth::{generate, gradcheck_instance, GradcheckShape, SynthConfig};
use crate::trainer::{
    build_encoder, load_checkpoint, report_from_samples, save_checkpoint, score_datasets, train, write_loss_history,
    CheckpointMeta, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Gate for `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "sbcp", version, about = "Subspace-regularized prompt learning for few-shot OOD detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a planted-subspace benchmark (train, ID test, OOD test, text features).
    Synth(SynthArgs),
    /// Train prompts on a `.sbcp` training set.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint: FPR95, AUROC, ID accuracy.
    Eval(EvalArgs),
    /// Write per-sample GL-MCM scores as CSV.
    Score(ScoreArgs),
    /// Check the analytic gradient against central differences.
    Gradcheck(GradcheckArgs),
    /// Print a dataset header and validate it.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ModulationArg {
    Sct,
    None,
}

impl From<ModulationArg> for Modulation {
    fn from(m: ModulationArg) -> Self {
        match m {
            ModulationArg::Sct => Modulation::Sct,
            ModulationArg::None => Modulation::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum EncoderArg {
    Surrogate,
    Frozen,
}

impl From<EncoderArg> for EncoderMode {
    fn from(e: EncoderArg) -> Self {
        match e {
            EncoderArg::Surrogate => EncoderMode::SurrogateLinear,
            EncoderArg::Frozen => EncoderMode::Frozen,
        }
    }
}

/// Training hyperparameters. Every field is optional so that a JSON config
/// file and the command line can be layered over the defaults.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rank_c: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Number of prompt vectors M.
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, value_enum)]
    modulation: Option<ModulationArg>,
    #[arg(long, value_enum)]
    encoder: Option<EncoderArg>,
    /// Training images per class, taken in file order.
    #[arg(long)]
    shots: Option<usize>,
}

impl TrainFlags {
    /// `self` wins over `lower`.
    fn over(self, lower: TrainFlags) -> TrainFlags {
        TrainFlags {
            seed: self.seed.or(lower.seed),
            lambda1: self.lambda1.or(lower.lambda1),
            lambda2: self.lambda2.or(lower.lambda2),
            lambda3: self.lambda3.or(lower.lambda3),
            tau: self.tau.or(lower.tau),
            rank_c: self.rank_c.or(lower.rank_c),
            epsilon: self.epsilon.or(lower.epsilon),
            prompts: self.prompts.or(lower.prompts),
            lr: self.lr.or(lower.lr),
            batch_size: self.batch_size.or(lower.batch_size),
            epochs: self.epochs.or(lower.epochs),
            weight_decay: self.weight_decay.or(lower.weight_decay),
            modulation: self.modulation.or(lower.modulation),
            encoder: self.encoder.or(lower.encoder),
            shots: self.shots.or(lower.shots),
        }
    }

    fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($field:ident => $($target:tt)+) => {
                if let Some(v) = self.$field {
                    c.$($target)+ = v.into();
                }
            };
        }
        set!(seed => seed);
        set!(lambda1 => weights.lambda1);
        set!(lambda2 => weights.lambda2);
        set!(lambda3 => weights.lambda3);
        set!(tau => softmax.tau);
        set!(rank_c => softmax.rank_c);
        set!(epsilon => epsilon);
        set!(prompts => prompts);
        set!(lr => lr);
        set!(batch_size => batch_size);
        set!(epochs => epochs);
        set!(weight_decay => weight_decay);
        set!(modulation => weights.modulation);
        set!(encoder => encoder);
        if self.shots.is_some() {
            c.shots = self.shots;
        }
    }

    /// Flags over the config file over the defaults for `num_classes`.
    fn resolve(self, config: Option<&Path>, num_classes: usize) -> Result<TrainConfig> {
        let file = match config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str::<TrainFlags>(&text)
                    .map_err(|e| Error::Config(format!("config file {}: {e}", p.display())))?
            }
            None => TrainFlags::default(),
        };
        let mut cfg = TrainConfig::new(num_classes);
        self.over(file).apply(&mut cfg);
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    subspace_dim: usize,
    /// Training records per class.
    #[arg(long, default_value_t = 16)]
    shots: usize,
    #[arg(long, default_value_t = 200)]
    id_count: usize,
    #[arg(long, default_value_t = 200)]
    ood_count: usize,
    #[arg(long, default_value_t = 4)]
    grid_height: usize,
    #[arg(long, default_value_t = 4)]
    grid_width: usize,
    #[arg(long, default_value_t = SynthConfig::default().noise_sigma)]
    noise: f64,
    /// Fraction of training regions drawn outside the ID subspace.
    #[arg(long, default_value_t = SynthConfig::default().ood_leak)]
    leak: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training `.sbcp`.
    #[arg(long)]
    data: PathBuf,
    /// Where to write the trained prompts.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Loss-history CSV (default: `<checkpoint>.loss.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file with any of the training flags, by field name.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Class text features (`.sbcp` with no records) for `--encoder frozen`.
    #[arg(long)]
    frozen_text: Option<PathBuf>,
    /// Evaluate after training when both test sets are given.
    #[arg(long, requires = "ood_test")]
    id_test: Option<PathBuf>,
    #[arg(long, requires = "id_test")]
    ood_test: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    id_test: PathBuf,
    #[arg(long)]
    ood_test: PathBuf,
    /// Report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the path recorded in the checkpoint.
    #[arg(long)]
    frozen_text: Option<PathBuf>,
    /// Overrides the checkpoint's temperature.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    id_test: PathBuf,
    #[arg(long)]
    ood_test: PathBuf,
    /// Score CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    frozen_text: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    prompts: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    records: usize,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rank_c: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_enum)]
    modulation: Option<ModulationArg>,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Per-term report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
}

/// Parses `argv` (including the program name), runs the command, and
/// returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(*a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Score(a) => cmd_score(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Inspect(a) => cmd_inspect(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn echo_config<T: Serialize>(out: &mut dyn Write, what: &str, cfg: &T) -> Result<()> {
    writeln!(out, "resolved {what} config:\n{}", serde_json::to_string_pretty(cfg)?).map_err(stdout_err)
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = SynthConfig {
        dim: a.dim,
        num_classes: a.classes,
        subspace_dim: a.subspace_dim,
        train_per_class: a.shots,
        id_test: a.id_count,
        ood_test: a.ood_count,
        grid_height: a.grid_height,
        grid_width: a.grid_width,
        noise_sigma: a.noise,
        ood_leak: a.leak,
        seed: a.seed,
    };
    echo_config(out, "synth", &cfg)?;
    let data = generate(&cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let path = |name: &str| a.out.join(name);
    write_dataset(&data.train, path("train.sbcp"))?;
    write_dataset(&data.id_test, path("id_test.sbcp"))?;
    write_dataset(&data.ood_test, path("ood_test.sbcp"))?;
    write_class_features(&data.train.classes, path("text.sbcp"))?;
    data.truth.write(&path("train.sbcp"))?;
    writeln!(
        out,
        "wrote train.sbcp ({} records), id_test.sbcp ({}), ood_test.sbcp ({}), text.sbcp ({} classes) to {}",
        data.train.records.len(),
        data.id_test.records.len(),
        data.ood_test.records.len(),
        data.train.num_classes(),
        a.out.display()
    )
    .map_err(stdout_err)?;
    Ok(EXIT_OK)
}

fn load_frozen(path: Option<&Path>) -> Result<Option<crate::embedstore::ClassTable>> {
    path.map(read_class_features).transpose()
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let ds = read_dataset(&a.data)?;
    let cfg = a.flags.resolve(a.config.as_deref(), ds.num_classes())?;
    echo_config(out, "train", &cfg)?;
    cfg.validate(ds.dim(), ds.num_classes())?;
    let frozen = load_frozen(a.frozen_text.as_deref())?;
    let encoder = build_encoder(&cfg, ds.dim(), frozen.as_ref())?;

    let meta = |epochs_completed| CheckpointMeta {
        config: cfg.clone(),
        dim: ds.dim(),
        num_classes: ds.num_classes(),
        frozen_text: a.frozen_text.clone(),
        epochs_completed,
    };
    let state = match train(&ds, &cfg, &encoder) {
        Ok(s) => s,
        Err(abort) => {
            if let Some(last) = &abort.last_good {
                let partial = crate::embedstore::sidecar_path(&a.checkpoint, "partial");
                save_checkpoint(&partial, &last.prompts, &meta(last.epoch))?;
                eprintln!("last good prompts (epoch {}) saved to {}", last.epoch, partial.display());
            }
            return Err(abort.error);
        }
    };

    writeln!(out, "{:>6} {:>12} {:>12} {:>12} {:>12} {:>12}", "epoch", "ce", "ent", "sub_id", "sub_ood", "total")
        .map_err(stdout_err)?;
    for (i, b) in state.loss_history.iter().enumerate() {
        writeln!(
            out,
            "{:>6} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
            i + 1,
            b.ce,
            b.ent,
            b.sub_id,
            b.sub_ood,
            b.total
        )
        .map_err(stdout_err)?;
    }
    save_checkpoint(&a.checkpoint, &state.prompts, &meta(state.epoch))?;
    let csv = a
        .out
        .clone()
        .unwrap_or_else(|| crate::embedstore::sidecar_path(&a.checkpoint, "loss.csv"));
    write_loss_history(&csv, &state.loss_history)?;
    writeln!(out, "checkpoint: {}\nloss history: {}", a.checkpoint.display(), csv.display()).map_err(stdout_err)?;

    if let (Some(id), Some(ood)) = (&a.id_test, &a.ood_test) {
        let (id, ood) = (read_dataset(id)?, read_dataset(ood)?);
        let (ids, oods) = score_datasets(&state.prompts, &encoder, &ds.classes, &id, &ood, &cfg.softmax)?;
        let report = report_from_samples(&ids, &oods, &id.records)?;
        writeln!(out, "{report}").map_err(stdout_err)?;
    }
    Ok(EXIT_OK)
}

struct Loaded {
    prompts: crate::subspace::PromptMatrix,
    config: TrainConfig,
    encoder: SurrogateEncoder,
    id: Dataset,
    ood: Dataset,
}

fn load_for_scoring(
    checkpoint: &Path,
    id_test: &Path,
    ood_test: &Path,
    frozen_text: Option<&Path>,
    tau: Option<f64>,
) -> Result<Loaded> {
    let (prompts, meta) = load_checkpoint(checkpoint)?;
    let mut config = meta.config;
    if let Some(t) = tau {
        config.softmax.tau = t;
    }
    let id = read_dataset(id_test)?;
    let ood = read_dataset(ood_test)?;
    for ds in [&id, &ood] {
        if ds.dim() != meta.dim {
            return Err(Error::Dimension {
                expected: meta.dim,
                got: ds.dim(),
            });
        }
    }
    if id.num_classes() != meta.num_classes {
        return Err(Error::Schema(format!(
            "test set has K = {} but the checkpoint was trained with K = {}",
            id.num_classes(),
            meta.num_classes
        )));
    }
    config.softmax.validate(meta.num_classes)?;
    let frozen_path = frozen_text.map(Path::to_path_buf).or(meta.frozen_text);
    let frozen = load_frozen(frozen_path.as_deref())?;
    let encoder = build_encoder(&config, meta.dim, frozen.as_ref())?;
    Ok(Loaded {
        prompts,
        config,
        encoder,
        id,
        ood,
    })
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let l = load_for_scoring(&a.checkpoint, &a.id_test, &a.ood_test, a.frozen_text.as_deref(), a.tau)?;
    echo_config(out, "eval", &l.config)?;
    let (ids, oods) = score_datasets(&l.prompts, &l.encoder, &l.id.classes, &l.id, &l.ood, &l.config.softmax)?;
    let report = report_from_samples(&ids, &oods, &l.id.records)?;
    writeln!(out, "{report}").map_err(stdout_err)?;
    if let Some(path) = &a.out {
        fs::write(path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(path, e))?;
        writeln!(out, "report: {}", path.display()).map_err(stdout_err)?;
    }
    Ok(EXIT_OK)
}

fn cmd_score(a: ScoreArgs, out: &mut dyn Write) -> Result<i32> {
    let l = load_for_scoring(&a.checkpoint, &a.id_test, &a.ood_test, a.frozen_text.as_deref(), a.tau)?;
    echo_config(out, "score", &l.config)?;
    let (mut ids, oods) = score_datasets(&l.prompts, &l.encoder, &l.id.classes, &l.id, &l.ood, &l.config.softmax)?;
    let n = (ids.len(), oods.len());
    ids.extend(oods);
    write_scores_file(&ids, &a.out)?;
    writeln!(out, "wrote {} ID and {} OOD scores to {}", n.0, n.1, a.out.display()).map_err(stdout_err)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct GradcheckRow {
    term: &'static str,
    max_rel_error: f64,
    max_abs_error: f64,
    passed: bool,
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let shape = GradcheckShape {
        dim: a.dim,
        prompts: a.prompts,
        num_classes: a.classes,
        records: a.records,
        ..GradcheckShape::default()
    };
    let flags = TrainFlags {
        seed: Some(a.seed),
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        lambda3: a.lambda3,
        tau: a.tau,
        rank_c: a.rank_c,
        epsilon: a.epsilon,
        prompts: Some(a.prompts),
        modulation: a.modulation,
        ..TrainFlags::default()
    };
    let cfg = flags.resolve(None, shape.num_classes)?;
    cfg.validate(shape.dim, shape.num_classes)?;
    echo_config(out, "gradcheck", &cfg)?;
    writeln!(out, "instance: {}", serde_json::to_string(&shape)?).map_err(stdout_err)?;

    let (ds, prompts) = gradcheck_instance(&shape, a.seed, cfg.epsilon)?;
    let encoder = build_encoder(&cfg, shape.dim, None)?;
    let ctx = LossContext {
        encoder: &encoder,
        classes: &ds.classes,
        softmax: cfg.softmax,
        weights: cfg.weights,
    };
    let mut rows = Vec::new();
    for term in LossTerm::ALL {
        let r = finite_diff_check_term(&ds.records, &prompts, ctx, a.step, term)?;
        let passed = r.max_rel_error <= GRADCHECK_TOLERANCE;
        writeln!(
            out,
            "{:<14} max_rel_error {:.3e}  max_abs_error {:.3e}  {}",
            term.name(),
            r.max_rel_error,
            r.max_abs_error,
            if passed { "ok" } else { "FAIL" }
        )
        .map_err(stdout_err)?;
        rows.push(GradcheckRow {
            term: term.name(),
            max_rel_error: r.max_rel_error,
            max_abs_error: r.max_abs_error,
            passed,
        });
    }
    if let Some(path) = &a.out {
        fs::write(path, serde_json::to_string_pretty(&rows)?).map_err(|e| Error::io(path, e))?;
    }
    if rows.iter().all(|r| r.passed) {
        Ok(EXIT_OK)
    } else {
        eprintln!("error: gradient check exceeded tolerance {GRADCHECK_TOLERANCE:e}");
        Ok(EXIT_FAILURE)
    }
}

fn cmd_inspect(a: InspectArgs, out: &mut dyn Write) -> Result<i32> {
    let ds = read_any_dataset(&a.data)?;
    let h = &ds.header;
    let mut w = |s: String| writeln!(out, "{s}").map_err(stdout_err);
    w(format!("file:        {}", a.data.display()))?;
    w(format!("version:     {}", h.version))?;
    w(format!("D:           {}", h.dim))?;
    w(format!("K:           {}", h.num_classes))?;
    w(format!("grid:        {} x {} ({} regions)", h.grid_height, h.grid_width, h.num_regions()))?;
    w(format!("N:           {}", h.num_records))?;
    w(format!("locals:      {}", h.flags.has_locals()))?;
    w(format!("normalized:  {}", h.flags.normalized()))?;
    if !ds.records.is_empty() {
        let mut counts = vec![0usize; h.num_classes];
        for r in &ds.records {
            counts[r.label] += 1;
        }
        w(format!("per class:   {counts:?}"))?;
    }
    w("validation:  0 violations".into())?;
    Ok(EXIT_OK)
}
