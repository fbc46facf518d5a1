use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand};
use ringwatch_core::corpus::PostFormat;
use ringwatch_core::detectors::DetectorKind;
use ringwatch_core::textsim::SimilarityMode;

#[derive(Debug, Parser)]
#[command(name = "ringwatch", version, about = "Reputation-gaming detection over Q&A forum dumps")]
pub struct Cli {
    /// Where to write the run manifest; defaults to `<first output>.manifest.json`.
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest_out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a posts dump into canonical JSONL and the interaction table.
    Ingest(IngestArgs),
    /// Build the interaction graph edge list from a table.
    Graph(GraphArgs),
    /// Partition an edge list with Louvain.
    Communities(CommunitiesArgs),
    /// Run a detector.
    #[command(subcommand)]
    Detect(DetectCommand),
    /// Run an above-average baseline.
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Generate synthetic data with ground truth.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Score reports against ground truth.
    Evaluate(EvaluateArgs),
    /// Precision, recall, F1 and accuracy from raw counts.
    Metrics(MetricsArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long, value_name = "PATH")]
    pub posts: PathBuf,
    /// `se-xml` (Posts.xml) or `jsonl`.
    #[arg(long, default_value = "se-xml", value_parser = parse_format)]
    pub format: PostFormat,
    #[arg(long, value_name = "PATH")]
    pub out_posts: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out_table: PathBuf,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[arg(long, value_name = "PATH")]
    pub table: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CommunitiesArgs {
    #[arg(long, value_name = "PATH")]
    pub edges: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Independent Louvain runs; the best partition is kept.
    #[arg(long, default_value_t = 8)]
    pub restarts: usize,
}

#[derive(Debug, Subcommand)]
pub enum DetectCommand {
    /// Flag suspicious communities (GC_V1, GC_V2, GC_V3).
    Community(DetectCommunityArgs),
    /// Flag users with an unusual reputation jump.
    User(DetectUserArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("choice").required(true).args(["preset", "detector"])))]
pub struct DetectCommunityArgs {
    #[arg(long, value_name = "PATH")]
    pub edges: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub partition: PathBuf,
    /// Interaction table; needed by GC_V3 for post bodies.
    #[arg(long, value_name = "PATH")]
    pub table: Option<PathBuf>,
    /// Named case C1..C20.
    #[arg(long, conflicts_with_all = ["detector", "tau_l", "tau_t_hours", "tau_qb", "tau_qc", "tau_ab", "tau_ac", "similarity", "require_answer_similarity"])]
    pub preset: Option<String>,
    #[arg(long, value_parser = parse_detector)]
    pub detector: Option<DetectorKind>,
    #[arg(long)]
    pub tau_l: Option<u64>,
    #[arg(long)]
    pub tau_t_hours: Option<f64>,
    #[arg(long)]
    pub tau_qb: Option<f64>,
    #[arg(long)]
    pub tau_qc: Option<f64>,
    #[arg(long)]
    pub tau_ab: Option<f64>,
    #[arg(long)]
    pub tau_ac: Option<f64>,
    /// `body` or `code`.
    #[arg(long, value_parser = parse_mode)]
    pub similarity: Option<SimilarityMode>,
    #[arg(long)]
    pub require_answer_similarity: bool,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WindowArgs {
    #[arg(long, value_name = "PATH")]
    pub snapshots: PathBuf,
    /// Newer dump label; defaults to the latest dump.
    #[arg(long)]
    pub dump_m: Option<String>,
    /// Older dump label; defaults to the dump before `--dump-m`.
    #[arg(long)]
    pub dump_n: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub tau_m_months: u32,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("choice").required(true).args(["preset", "tau_r"])))]
pub struct DetectUserArgs {
    #[command(flatten)]
    pub window: WindowArgs,
    /// Named case C1..C3.
    #[arg(long, conflicts_with = "tau_r")]
    pub preset: Option<String>,
    #[arg(long)]
    pub tau_r: Option<f64>,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum BaselineCommand {
    /// Users gaining more than the mean gain.
    Up(BaselineArgs),
    /// Users dropping more than the mean drop.
    Down(BaselineArgs),
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub window: WindowArgs,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// A forum with planted answer rings.
    Forum(SynthForumArgs),
    /// Reputation snapshots with planted jumps.
    Snapshots(SynthSnapshotsArgs),
}

#[derive(Debug, Args)]
pub struct SynthForumArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub honest_users: usize,
    #[arg(long, default_value_t = 20_000)]
    pub questions: usize,
    /// Number of default rings (2 to 6 members, fast, all accepted, cloned questions).
    #[arg(long, default_value_t = 5, conflicts_with = "ring_file")]
    pub rings: usize,
    /// JSON array of ring specifications, replacing the default rings.
    #[arg(long, value_name = "PATH")]
    pub ring_file: Option<PathBuf>,
    /// Probability that an honest user also gets a removal event.
    #[arg(long, default_value_t = 0.0)]
    pub honest_removal_rate: f64,
    #[arg(long, value_name = "PATH")]
    pub out_posts: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out_truth: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthSnapshotsArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub honest_users: usize,
    /// Planted jump as `USER_ID:MULTIPLE`; repeatable.
    #[arg(long = "plant", value_name = "ID:MULTIPLE", value_parser = parse_plant)]
    pub planted: Vec<(u64, f64)>,
    #[arg(long, default_value_t = 2)]
    pub dumps: usize,
    #[arg(long, default_value_t = 15.0)]
    pub mean_growth: f64,
    #[arg(long, default_value_t = 15.0)]
    pub growth_sd: f64,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out_truth: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("population").required(true).args(["edges", "snapshots"])))]
pub struct EvaluateArgs {
    /// Report JSONL; repeatable. One row is produced per detector and preset.
    #[arg(long, required = true, value_name = "PATH")]
    pub reports: Vec<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub truth: PathBuf,
    /// Edge list whose nodes form the population (community detectors).
    #[arg(long, value_name = "PATH")]
    pub edges: Option<PathBuf>,
    /// Snapshot CSV whose users form the population (user detectors).
    #[arg(long, value_name = "PATH")]
    pub snapshots: Option<PathBuf>,
    /// Interaction table, for community formation times.
    #[arg(long, value_name = "PATH")]
    pub table: Option<PathBuf>,
    /// Detector to report when the report files are empty.
    #[arg(long, value_parser = parse_detector)]
    pub detector: Option<DetectorKind>,
    /// Relative-recall sample size, or `auto` for 99% confidence and a 10-point interval.
    #[arg(long)]
    pub sample_size: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "PATH")]
    pub out_csv: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out_json: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub tp: u64,
    #[arg(long)]
    pub fp: u64,
    #[arg(long = "fn")]
    pub fn_: u64,
    #[arg(long)]
    pub tn: u64,
    /// JSON output path; standard output when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
}

fn parse_format(s: &str) -> Result<PostFormat, String> {
    s.parse()
}

fn parse_detector(s: &str) -> Result<DetectorKind, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<SimilarityMode, String> {
    s.parse()
}

fn parse_plant(s: &str) -> Result<(u64, f64), String> {
    let (id, m) = s.split_once(':').ok_or_else(|| format!("expected ID:MULTIPLE, got `{s}`"))?;
    let id = id.parse().map_err(|_| format!("bad user id `{id}`"))?;
    let m = m.parse().map_err(|_| format!("bad multiple `{m}`"))?;
    Ok((id, m))
}
