//! Command line front end: each subcommand wraps one pipeline run, logs
//! line-delimited JSON to stdout, and writes the fully resolved settings
//! next to its outputs. Failures print one JSON error object to stderr and
//! exit nonzero; exit 0 means every output was written.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rri_seqnet::complexity;
use rri_seqnet::pipeline::{
    ensure_out_dir, run_eval, run_eval_mean, run_predict, run_prepare, run_synth, run_train,
    Precision, RunConfig, DEFAULT_SEEDS,
};
use rri_seqnet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "rri-seqnet",
    version,
    about = "RR-interval sequence model runner"
)]
struct Cli {
    /// Flat key=value settings file (keys like model.d_state, optim.lr,
    /// synth.n_event; '#' comments).
    #[arg(long, value_name = "FILE", global = true)]
    config: Option<PathBuf>,

    /// Override one setting, e.g. --set optim.lr=0.001 (repeatable, applied
    /// after --config).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic RR-interval corpus, one CSV per subject.
    Synth(SynthArgs),
    /// Window CSVs into the segment cache and write per-seed subject splits.
    Prepare(PrepareArgs),
    /// Train one model per seed from a prepared cache.
    Train(TrainArgs),
    /// Score saved checkpoints on a split, per seed plus the cross-seed mean.
    Eval(EvalArgs),
    /// Score the last complete window of one subject's CSV.
    Predict(PredictArgs),
    /// Print parameter, MAC, and FLOP accounting for the configured model.
    Complexity(ComplexityArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Control subject count (overrides synth.n_control).
    #[arg(long)]
    nsr: Option<usize>,
    /// Pre-event subject count (overrides synth.n_event).
    #[arg(long)]
    af: Option<usize>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Write into an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PrepareArgs {
    /// Directory of RR-interval CSV files.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Split seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
    seeds: Vec<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared cache directory (output of `prepare`).
    #[arg(long, value_name = "DIR")]
    prep: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
    seeds: Vec<u64>,
    /// Numeric precision: f32 or f64.
    #[arg(long, default_value = "f32", value_parser = parse_precision)]
    precision: Precision,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Prepared cache directory (output of `prepare`).
    #[arg(long, value_name = "DIR")]
    prep: PathBuf,
    /// Training output directory holding model_seed<k>.ckpt files.
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
    /// Where metrics files go; defaults to --run.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
    seeds: Vec<u64>,
    /// Which split to score: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct PredictArgs {
    /// Trained checkpoint file.
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// RR-interval CSV holding the series to score.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Subject to score when the file holds several.
    #[arg(long)]
    subject: Option<String>,
    /// Optional directory for prediction.json.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ComplexityArgs {
    /// Emit the report as JSON instead of the table.
    #[arg(long)]
    json: bool,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::Parse { .. } => "parse",
        Error::Config(_) => "config",
        Error::NonScalarLoss { .. } => "non_scalar_loss",
        Error::InputLen { .. } => "input_len",
        Error::Checkpoint { .. } => "checkpoint",
        Error::Record { .. } => "record",
        Error::WindowNotCovered { .. } => "window_not_covered",
        Error::NonFiniteGrad { .. } => "non_finite_grad",
        Error::Other(_) => "other",
    }
}

/// Prints one line to stdout; a closed pipe (e.g. `| head`) ends the
/// process quietly instead of panicking.
fn print_line(text: &str) {
    use std::io::Write;
    let mut stdout = std::io::stdout().lock();
    let failed = writeln!(stdout, "{text}").is_err() || stdout.flush().is_err();
    if failed {
        std::process::exit(0);
    }
}

fn emit(event: &str, mut fields: serde_json::Value) {
    let obj = fields.as_object_mut().expect("log fields are an object");
    obj.insert("event".into(), json!(event));
    print_line(&serde_json::Value::Object(std::mem::take(obj)).to_string());
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(path) = &cli.config {
        rc.apply_file(path)?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        rc.apply(k.trim(), v.trim())?;
    }
    rc.model.validate()?;
    Ok(rc)
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!(
            "{}",
            json!({ "error": { "kind": error_kind(&e), "message": e.to_string() } })
        );
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let rc = load_config(&cli)?;
    match cli.command {
        Command::Synth(a) => cmd_synth(rc, a),
        Command::Prepare(a) => cmd_prepare(rc, a),
        Command::Train(a) => cmd_train(rc, a),
        Command::Eval(a) => cmd_eval(rc, a),
        Command::Predict(a) => cmd_predict(rc, a),
        Command::Complexity(a) => cmd_complexity(rc, a),
    }
}

fn cmd_synth(mut rc: RunConfig, a: SynthArgs) -> Result<()> {
    if let Some(n) = a.nsr {
        rc.synth.n_control = n;
    }
    if let Some(n) = a.af {
        rc.synth.n_event = n;
    }
    let summary = run_synth(&rc.synth, a.seed, &a.out, a.force)?;
    rc.write_resolved(&a.out)?;
    emit(
        "synth.done",
        json!({
            "out": a.out,
            "seed": summary.seed,
            "n_control": summary.n_control,
            "n_event": summary.n_event,
            "files": summary.files.len(),
            "total_beats": summary.total_beats,
        }),
    );
    Ok(())
}

fn cmd_prepare(rc: RunConfig, a: PrepareArgs) -> Result<()> {
    let summary = run_prepare(&a.data, &a.out, &a.seeds, a.force)?;
    rc.write_resolved(&a.out)?;
    emit(
        "prepare.done",
        json!({
            "out": a.out,
            "subjects": summary.n_subjects,
            "segments": summary.n_segments,
            "event_segments": summary.n_event_segments,
            "skipped_windows": summary.skipped_windows,
            "exclusions": summary.exclusions.len(),
            "seeds": summary.seeds,
            "counts": summary.counts,
        }),
    );
    Ok(())
}

fn cmd_train(rc: RunConfig, a: TrainArgs) -> Result<()> {
    ensure_out_dir(&a.out, a.force)?;
    rc.write_resolved(&a.out)?;
    for &seed in &a.seeds {
        let summary = run_train(
            &a.prep,
            &a.out,
            &rc.model,
            &rc.optim,
            seed,
            a.precision,
            true,
            |s| {
                emit(
                    "train.epoch",
                    json!({
                        "seed": seed,
                        "epoch": s.epoch,
                        "train_loss": s.train_loss,
                        "val_loss": s.val_loss,
                        "val_auroc": s.val_auroc,
                        "improved": s.improved,
                    }),
                );
            },
        )?;
        emit(
            "train.done",
            json!({
                "seed": seed,
                "checkpoint": summary.checkpoint,
                "epochs_run": summary.outcome.epochs_run,
                "best_epoch": summary.outcome.best_epoch,
                "best_val_loss": summary.outcome.best_val_loss,
                "stop_reason": summary.outcome.stop_reason,
                "n_train": summary.n_train,
                "n_val": summary.n_val,
            }),
        );
    }
    Ok(())
}

fn cmd_eval(rc: RunConfig, a: EvalArgs) -> Result<()> {
    let out = a.out.unwrap_or_else(|| a.run.clone());
    for &seed in &a.seeds {
        let ckpt = a.run.join(format!("model_seed{seed}.ckpt"));
        let ev = run_eval(&a.prep, &ckpt, &out, &a.split, seed, rc.optim.batch_size)?;
        emit(
            "eval.done",
            json!({
                "seed": seed,
                "split": ev.split,
                "n": ev.segment_level.n,
                "n_subjects": ev.n_subjects,
                "sens": ev.segment_level.sens,
                "spec": ev.segment_level.spec,
                "f1_weighted": ev.segment_level.f1_weighted,
                "auroc": ev.segment_level.auroc,
                "auprc": ev.segment_level.auprc,
            }),
        );
    }
    let mean = run_eval_mean(&out, &a.seeds)?;
    rc.write_resolved(&out)?;
    emit("eval.mean", json!({ "out": out, "summary": mean }));
    Ok(())
}

fn cmd_predict(_rc: RunConfig, a: PredictArgs) -> Result<()> {
    let pred = run_predict(&a.ckpt, &a.input, a.subject.as_deref())?;
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("prediction.json");
        let text = serde_json::to_string_pretty(&pred)
            .map_err(|e| Error::Other(format!("serializing prediction: {e}")))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    emit(
        "predict.done",
        json!({
            "subject_id": pred.subject_id,
            "window_start_s": pred.window_start_s,
            "n_windows_available": pred.n_windows_available,
            "p_event": pred.p_event,
            "p_control": pred.p_control,
        }),
    );
    Ok(())
}

fn cmd_complexity(rc: RunConfig, a: ComplexityArgs) -> Result<()> {
    let report = complexity::analyze(&rc.model)?;
    if a.json {
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Other(format!("serializing report: {e}")))?;
        print_line(&text);
    } else {
        print_line(report.to_string().trim_end());
    }
    Ok(())
}
