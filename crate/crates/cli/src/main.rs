use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use adtr::checkpoint::{self, CheckpointError};
use adtr::config::RunConfig;
use adtr::eval::{self, EvalError};
use adtr::feature_io::{read_sample_file, DatasetManifest, FormatError, Split};
use adtr::gradcheck::{self, GradCheckReport};
use adtr::model::{init_params, ModelError, Variant};
use adtr::shortcut::{self, ShortcutError};
use adtr::synth::{build_benchmark, AUX_MANIFEST_FILE, MANIFEST_FILE};
use adtr::trainer::{self, LossKind, TrainError};

#[derive(Parser)]
#[command(name = "adtr", version, about = "Transformer feature reconstruction for anomaly detection and localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded synthetic benchmark and its manifests
    GenData(Common),
    /// Fit a reconstructor on the normal train split
    Train(TrainArgs),
    /// Load a checkpoint and continue training with the push-pull losses
    Finetune(FinetuneArgs),
    /// Score the test split and write report.json
    Eval(EvalArgs),
    /// Export the score map of one sample as PGM
    Score(ScoreArgs),
    /// Finite-difference checks of every op and the toy model
    GradCheck(Common),
    /// Affine versus query-attention identity-shortcut experiment
    ShortcutExp(Common),
    /// Check sample files or every file of a manifest
    Validate(ValidateArgs),
}

#[derive(Args)]
struct Common {
    /// key = value settings file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; nothing is written elsewhere
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ScoringFlags {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    pool_window: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[command(flatten)]
    scoring: ScoringFlags,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[command(flatten)]
    scoring: ScoringFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    scoring: ScoringFlags,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// ADTRFT01 sample to score
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    scoring: ScoringFlags,
}

#[derive(Args)]
#[command(arg_required_else_help = true)]
struct ValidateArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    files: Vec<PathBuf>,
}

/// A domain failure: exit status 1, with an error kind when one applies.
struct Failure {
    kind: Option<&'static str>,
    message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            Some(kind) => write!(f, "error[{kind}]: {}", self.message),
            None => write!(f, "error: {}", self.message),
        }
    }
}

impl Failure {
    fn msg(message: impl Into<String>) -> Self {
        Self {
            kind: None,
            message: message.into(),
        }
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        Self {
            kind: Some(e.kind()),
            message: e.to_string(),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Self {
            kind: Some(e.kind()),
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Checkpoint(c) => c.into(),
            other => Failure::msg(other.to_string()),
        }
    }
}

macro_rules! plain_failure {
    ($($t:ty),*) => {
        $(impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::msg(e.to_string())
            }
        })*
    };
}

plain_failure!(EvalError, ModelError, ShortcutError, adtr::config::ConfigError, adtr::losses::LossError);

type Outcome = Result<(), Failure>;

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::msg(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| Failure::msg(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config.seeded())
}

fn apply_scoring(config: &mut RunConfig, flags: &ScoringFlags) {
    if let Some(a) = flags.alpha {
        config.loss.alpha = a;
    }
    if let Some(k) = flags.topk {
        config.loss.k = k;
    }
    if let Some(w) = flags.pool_window {
        config.loss.pool_window = w;
    }
}

fn prepare_out(out: &Path) -> Outcome {
    fs::create_dir_all(out).map_err(|e| Failure::msg(format!("{}: {e}", out.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::msg(format!("{}: {e}", path.display())))
}

fn echo_config(out: &Path, config: &RunConfig) -> Outcome {
    write_file(&out.join("config.txt"), config.to_text())
}

fn manifest_base(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn gen_data(args: Common) -> Outcome {
    let config = load_config(&args)?;
    prepare_out(&args.out)?;
    let manifest = build_benchmark(&config.data, &args.out)?;
    echo_config(&args.out, &config)?;
    println!(
        "wrote {} samples to {} ({MANIFEST_FILE}, {AUX_MANIFEST_FILE})",
        manifest.entries.len() + config.data.n_aux_anomalous,
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Outcome {
    let mut config = load_config(&args.common)?;
    if let Some(v) = args.variant {
        config.model.variant = v;
    }
    if let Some(e) = args.epochs {
        config.train.epochs = e;
        config.train.lr_drop_epoch = config.train.lr_drop_epoch.min(e);
    }
    if let Some(lr) = args.lr {
        config.train.lr_initial = lr;
    }
    apply_scoring(&mut config, &args.scoring);
    let manifest = DatasetManifest::load(&args.manifest)?;
    let samples = manifest.load_split(&manifest_base(&args.manifest), Split::Train)?;
    let first = samples.first().ok_or_else(|| Failure::msg("manifest has no train samples"))?;
    let f = &first.features;
    let model = config.model.for_grid(f.channels(), f.height(), f.width());
    let init = init_params(&model, config.seed)?;
    prepare_out(&args.common.out)?;
    echo_config(&args.common.out, &config)?;
    let start = Instant::now();
    let outcome = trainer::fit_to(
        &samples,
        &model,
        init,
        &config.train_config(),
        &args.common.out.join("model.adtrck"),
        &args.common.out.join("train_log.tsv"),
    )?;
    let last = outcome.trace.last().map_or(f64::NAN, |r| r.mean_loss);
    println!("{} epochs, final mean loss {last:.6e}", outcome.trace.len());
    eprintln!("trained in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn finetune(args: FinetuneArgs) -> Outcome {
    let mut config = load_config(&args.common)?;
    if let Some(l) = args.loss {
        config.finetune.loss_kind = l;
    }
    if let Some(e) = args.epochs {
        config.finetune.epochs = e;
    }
    if let Some(lr) = args.lr {
        config.finetune.lr = lr;
    }
    apply_scoring(&mut config, &args.scoring);
    let (model, params) = checkpoint::load(&args.checkpoint)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let samples = manifest.load_split(&manifest_base(&args.manifest), Split::Train)?;
    trainer::check_annotations(&samples, config.finetune.loss_kind)?;
    prepare_out(&args.common.out)?;
    echo_config(&args.common.out, &config)?;
    let start = Instant::now();
    let outcome = trainer::fit_to(
        &samples,
        &model,
        params,
        &config.finetune_config(),
        &args.common.out.join("model.adtrck"),
        &args.common.out.join("train_log.tsv"),
    )?;
    let last = outcome.trace.last().map_or(f64::NAN, |r| r.mean_loss);
    println!("{} epochs of {}, final mean loss {last:.6e}", outcome.trace.len(), config.finetune.loss_kind);
    eprintln!("fine-tuned in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn evaluate(args: EvalArgs) -> Outcome {
    let mut config = load_config(&args.common)?;
    apply_scoring(&mut config, &args.scoring);
    config.loss.validate()?;
    let (model, params) = checkpoint::load(&args.checkpoint)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let samples = manifest.load_split(&manifest_base(&args.manifest), Split::Test)?;
    let report = eval::evaluate(&samples, &params, &model, &config.loss, config.seed)?;
    prepare_out(&args.common.out)?;
    echo_config(&args.common.out, &config)?;
    report.save(&args.common.out.join("report.json"))?;
    match report.pixel_auroc {
        Some(p) => println!("image AUROC {:.4}, pixel AUROC {p:.4}", report.image_auroc),
        None => println!("image AUROC {:.4}, pixel AUROC unavailable (no masks)", report.image_auroc),
    }
    Ok(())
}

fn score(args: ScoreArgs) -> Outcome {
    let mut config = load_config(&args.common)?;
    apply_scoring(&mut config, &args.scoring);
    config.loss.validate()?;
    let (model, params) = checkpoint::load(&args.checkpoint)?;
    let sample = read_sample_file(&args.input)?;
    let (map, image_score) = eval::score_sample(&sample, &params, &model, &config.loss)?;
    prepare_out(&args.common.out)?;
    echo_config(&args.common.out, &config)?;
    let name = if sample.sample_id.is_empty() { "sample" } else { &sample.sample_id };
    eval::export_score_map(&map, &args.common.out.join(format!("{name}.pgm")))?;
    let summary = serde_json::json!({ "id": name, "image_score": image_score, "score_map": map });
    write_file(
        &args.common.out.join(format!("{name}.score.json")),
        serde_json::to_string_pretty(&summary).expect("plain values serialize") + "\n",
    )?;
    println!("{name}: image score {image_score:.6}");
    Ok(())
}

fn grad_check(args: Common) -> Outcome {
    let config = load_config(&args)?;
    let start = Instant::now();
    let tensor = |e: adtr::TensorError| Failure::msg(e.to_string());
    let mut reports: Vec<GradCheckReport> = gradcheck::op_suite(config.seed).map_err(tensor)?;
    reports.extend(gradcheck::model_suite(config.seed).map_err(tensor)?);
    prepare_out(&args.out)?;
    echo_config(&args.out, &config)?;
    write_file(
        &args.out.join("gradcheck.json"),
        serde_json::to_string_pretty(&reports).expect("plain values serialize") + "\n",
    )?;
    for r in &reports {
        println!(
            "{} {:<26} max rel error {:.3e} (tol {:.0e}, {} probes)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.probes
        );
    }
    eprintln!("checked in {:.1}s", start.elapsed().as_secs_f64());
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::msg(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn shortcut_exp(args: Common) -> Outcome {
    let config = load_config(&args)?;
    let report = shortcut::run(&config.shortcut)?;
    prepare_out(&args.out)?;
    echo_config(&args.out, &config)?;
    write_file(&args.out.join("shortcut.json"), report.to_json())?;
    let show = |r: Option<f64>| r.map_or("inf".to_string(), |v| format!("{v:.3}"));
    println!(
        "gap ratio affine {} attention {} (x{}); affine |w-I|_F {:.4}",
        show(report.affine_gap.ratio),
        show(report.attention_gap.ratio),
        show(report.ratio_of_ratios),
        report.affine_identity_distance
    );
    Ok(())
}

fn validate(args: ValidateArgs) -> Outcome {
    if let Some(path) = &args.manifest {
        let manifest = DatasetManifest::load(path)?;
        let n = manifest.validate_files(&manifest_base(path))?;
        println!("ok {} ({n} files)", path.display());
    }
    for path in &args.files {
        let r = read_sample_file(path)?;
        let f = &r.features;
        println!(
            "ok {} {}x{}x{} mask={} label={}",
            path.display(),
            f.channels(),
            f.height(),
            f.width(),
            r.pixel_mask.is_some(),
            r.image_label.map_or("none".to_string(), |l| l.to_string())
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => evaluate(a),
        Command::Score(a) => score(a),
        Command::GradCheck(a) => grad_check(a),
        Command::ShortcutExp(a) => shortcut_exp(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(1)
        }
    }
}
