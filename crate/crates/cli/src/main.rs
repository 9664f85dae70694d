//! `trapsift`: batch workflows over camera-trap catalogs.
//!
//! Data goes to files under `--out`; logs go to standard error. Exit codes:
//! 0 success, 1 usage error, 2 data error, 3 stage failures over threshold.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trapsift_core::ensemble::{AggregationPolicy, VoteMethod};
use trapsift_core::LabelSet;

#[derive(Debug, Parser)]
#[command(name = "trapsift", version, about = "Camera-trap triage: ingest, curate, classify, evaluate, review")]
struct Cli {
    /// Log filter for standard error, e.g. `info` or `trapsift_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    /// Print the resolved settings (defaults expanded) and exit without writing.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a manifest and write the normalized catalog and its bursts.
    Ingest(IngestArgs),
    /// Assign bursts to train/val/test.
    Split(SplitArgs),
    /// Sample background boxes that avoid every annotated object.
    SampleBg(SampleBgArgs),
    /// Project annotations onto another taxonomy.
    Remap(RemapArgs),
    /// Run the detection and classification pipeline over a manifest.
    Run(RunArgs),
    /// Run named experiments from a suite file and write their reports.
    Experiment(ExperimentArgs),
    /// Score a run directory against annotations.
    Evaluate(EvaluateArgs),
    /// Relabel a run from its stored votes under other voting settings.
    Whatif(WhatifArgs),
    /// Serve the review API over a run store.
    Serve(ServeArgs),
    /// Export review decisions from a run store.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
struct ManifestArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Do not open image files; metadata only.
    #[arg(long)]
    no_pixels: bool,
}

#[derive(Debug, Args)]
struct AnnotationArgs {
    /// Directory of `<image_id>.xml` files.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, value_parser = parse_label_set)]
    label_set: LabelSet,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    /// Frames further apart than this start a new burst.
    #[arg(long, default_value_t = 5)]
    burst_gap_secs: i64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    #[arg(long)]
    seed: u64,
    /// Train, val and test fractions.
    #[arg(long, value_parser = parse_fractions, default_value = "0.7,0.2,0.1")]
    fractions: [f64; 3],
    /// Send this camera (id or 1-based index) entirely to test.
    #[arg(long)]
    holdout: Option<String>,
    #[arg(long, default_value_t = 5)]
    burst_gap_secs: i64,
    /// Split only images of this source.
    #[arg(long, default_value = "captivity")]
    source: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleBgArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    #[command(flatten)]
    annotations: AnnotationArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    per_image: usize,
    /// Smallest and largest box side as a fraction of the frame side.
    #[arg(long, value_parser = parse_pair, default_value = "0.1,0.5")]
    size_range: (f64, f64),
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RemapArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    #[command(flatten)]
    annotations: AnnotationArgs,
    #[arg(long)]
    taxonomy: String,
    /// Extra taxonomy documents.
    #[arg(long = "taxonomy-file")]
    taxonomy_files: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Pipeline config (TOML). Flags below override its values.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    manifest: ManifestArgs,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    taxonomy: Option<String>,
    #[arg(long, value_parser = parse_method)]
    vote_method: Option<VoteMethod>,
    #[arg(long, value_parser = parse_aggregation)]
    aggregation: Option<AggregationPolicy>,
    #[arg(long)]
    segmentation: Option<bool>,
    #[arg(long)]
    min_confidence: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Suite file (TOML) with data locations and backends.
    #[arg(long)]
    suite: PathBuf,
    /// Experiment ids, repeatable or comma-separated; `all` runs the grid.
    #[arg(long = "id", required = true, value_delimiter = ',')]
    ids: Vec<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory written by `trapsift run`.
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    manifest: ManifestArgs,
    #[command(flatten)]
    annotations: AnnotationArgs,
    #[arg(long = "taxonomy-file")]
    taxonomy_files: Vec<PathBuf>,
    #[arg(long, default_value_t = trapsift_core::evaluation::DEFAULT_REVIEW_RATE_PER_MINUTE)]
    review_rate: f64,
    /// Labels removed from manual review; defaults to the fallback class.
    #[arg(long, value_delimiter = ',')]
    auto_discard: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WhatifArgs {
    /// Directory written by `trapsift run`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long = "taxonomy-file")]
    taxonomy_files: Vec<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    method: Option<VoteMethod>,
    #[arg(long, value_parser = parse_aggregation)]
    aggregation: Option<AggregationPolicy>,
    #[arg(long)]
    min_conf: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: std::net::SocketAddr,
    /// Require `Authorization: Bearer <token>` on every request.
    #[arg(long, env = "TRAPSIFT_TOKEN", hide_env_values = true)]
    token: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    run: String,
    #[arg(long, default_value = "ndjson", value_parser = ["ndjson", "voc"])]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

fn parse_label_set(s: &str) -> Result<LabelSet, String> {
    s.parse()
}

fn parse_method(s: &str) -> Result<VoteMethod, String> {
    s.parse()
}

fn parse_aggregation(s: &str) -> Result<AggregationPolicy, String> {
    s.parse()
}

fn parse_floats(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

fn parse_fractions(s: &str) -> Result<[f64; 3], String> {
    let v = parse_floats(s)?;
    let f: [f64; 3] = v.try_into().map_err(|_| "expected three comma-separated fractions".to_owned())?;
    if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(format!("fractions {f:?} must lie in [0, 1] and sum to 1"));
    }
    Ok(f)
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    match parse_floats(s)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err("expected two comma-separated numbers".into()),
    }
}

/// Stage failures over the run's threshold; exits with status 3. Any other
/// error is a data error (status 2).
#[derive(Debug)]
pub struct StageFailure(pub String);

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for StageFailure {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(&cli.log_level));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    match commands::dispatch(cli.command, cli.dry_run) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<StageFailure>() { 3 } else { 2 })
        }
    }
}
