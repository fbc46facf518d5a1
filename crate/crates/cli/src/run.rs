use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Parser;
use ringwatch_core::corpus::{
    build_interaction_table, load_snapshots, parse_posts, read_table_jsonl, write_posts_jsonl, write_table_jsonl,
    InteractionRecord, SnapshotSet, UserId,
};
use ringwatch_core::detectors::{
    baseline_down, baseline_up, community_preset, detect_communities, detect_suspicious_users, jump_preset,
    read_reports_jsonl, write_reports_jsonl, CommunityDetectorConfig, ConfigSnapshot, DetectorKind, DumpWindow,
    SuspicionReport, UserDetectorConfig, UserScan,
};
use ringwatch_core::eval::{
    evaluate, metrics, recommended_sample_size, write_metrics_csv, write_report_json, ConfusionMatrix, Evaluation,
    EvaluationInput,
};
use ringwatch_core::graph::InteractionGraph;
use ringwatch_core::louvain::{louvain, LouvainConfig, Partition};
use ringwatch_core::synth::{
    generate_forum, generate_snapshots, ForumConfig, GroundTruth, PlantedJump, RingSpec, RingType, SnapshotConfig,
};
use ringwatch_core::textsim::SimilarityIndex;

use crate::args::*;

/// Bad invocation rather than bad data; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// What a command touched, for the manifest.
#[derive(Debug, Default)]
pub struct Record {
    pub command: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub preset: Option<String>,
    pub thresholds: Option<serde_json::Value>,
    pub seed: Option<u64>,
}

impl Record {
    fn new(command: &str) -> Self {
        Record { command: command.to_string(), ..Default::default() }
    }

    fn input(&mut self, p: &Path) -> &mut Self {
        self.inputs.push(p.to_path_buf());
        self
    }

    fn output(&mut self, p: &Path) -> &mut Self {
        self.outputs.push(p.to_path_buf());
        self
    }
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

/// Writes through a buffer and flushes before returning.
fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    f(&mut out)?;
    out.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_edges(path: &Path) -> anyhow::Result<InteractionGraph> {
    InteractionGraph::read_jsonl(open(path)?).with_context(|| format!("reading edge list {}", path.display()))
}

fn read_table(path: &Path) -> anyhow::Result<Vec<InteractionRecord>> {
    read_table_jsonl(open(path)?).with_context(|| format!("reading interaction table {}", path.display()))
}

fn read_snapshots(path: &Path) -> anyhow::Result<SnapshotSet> {
    load_snapshots(open(path)?).with_context(|| format!("reading snapshots {}", path.display()))
}

pub fn execute(cli: Cli) -> anyhow::Result<Option<Record>> {
    match cli.command {
        Command::Replay(a) => bail!(UsageError(format!("nested replay in {}", a.manifest.display()))),
        Command::Ingest(a) => ingest(a).map(Some),
        Command::Graph(a) => graph(a).map(Some),
        Command::Communities(a) => communities(a).map(Some),
        Command::Detect(DetectCommand::Community(a)) => detect_community(a).map(Some),
        Command::Detect(DetectCommand::User(a)) => detect_user(a).map(Some),
        Command::Baseline(BaselineCommand::Up(a)) => baseline(a, true).map(Some),
        Command::Baseline(BaselineCommand::Down(a)) => baseline(a, false).map(Some),
        Command::Synth(SynthCommand::Forum(a)) => synth_forum(a).map(Some),
        Command::Synth(SynthCommand::Snapshots(a)) => synth_snapshots(a).map(Some),
        Command::Evaluate(a) => evaluate_cmd(a).map(Some),
        Command::Metrics(a) => metrics_cmd(a),
    }
}

/// Parses the argv stored in a manifest.
pub fn replay_cli(manifest_argv: &[String]) -> anyhow::Result<Cli> {
    let argv = std::iter::once("ringwatch".to_string()).chain(manifest_argv.iter().cloned());
    Cli::try_parse_from(argv).map_err(|e| anyhow::anyhow!("manifest arguments do not parse: {e}"))
}

fn ingest(a: IngestArgs) -> anyhow::Result<Record> {
    let parsed = parse_posts(open(&a.posts)?, a.format).with_context(|| format!("parsing {}", a.posts.display()))?;
    log::info!("kept {} of {} post records", parsed.summary.kept, parsed.summary.records_seen);
    for d in parsed.summary.diagnostics.iter().take(20) {
        log::warn!("{}: {}", d.location, d.message);
    }
    let table = build_interaction_table(&parsed.posts);
    log::info!("{} interaction records; {:?}", table.records.len(), table.summary);
    write_file(&a.out_posts, |w| Ok(write_posts_jsonl(w, &parsed.posts)?))?;
    write_file(&a.out_table, |w| Ok(write_table_jsonl(w, &table.records)?))?;
    let mut r = Record::new("ingest");
    r.input(&a.posts).output(&a.out_posts).output(&a.out_table);
    Ok(r)
}

fn graph(a: GraphArgs) -> anyhow::Result<Record> {
    let records = read_table(&a.table)?;
    let g = InteractionGraph::from_records(&records)?;
    log::info!("{} nodes, {} edges", g.node_count(), g.edge_count());
    write_file(&a.out, |w| Ok(g.write_jsonl(w)?))?;
    let mut r = Record::new("graph");
    r.input(&a.table).output(&a.out);
    Ok(r)
}

fn communities(a: CommunitiesArgs) -> anyhow::Result<Record> {
    let g = read_edges(&a.edges)?;
    let config = LouvainConfig { restarts: a.restarts, ..LouvainConfig::default() };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let p = louvain(&g, &config)?;
    log::info!("{} communities, Q = {:.6}", p.len(), p.modularity_q());
    write_file(&a.out, |w| Ok(p.write_csv(w)?))?;
    let mut r = Record::new("communities");
    r.input(&a.edges).output(&a.out);
    r.thresholds = Some(serde_json::to_value(config)?);
    Ok(r)
}

fn detect_community(a: DetectCommunityArgs) -> anyhow::Result<Record> {
    let (detector, config) = match &a.preset {
        Some(name) => {
            let p = community_preset(name).ok_or_else(|| usage(format!("unknown community preset `{name}` (C1..C20)")))?;
            (p.detector, p.config)
        }
        None => {
            let detector = a.detector.expect("clap requires --preset or --detector");
            let config = CommunityDetectorConfig {
                tau_l: a.tau_l,
                tau_t_hours: a.tau_t_hours,
                tau_qb: a.tau_qb,
                tau_qc: a.tau_qc,
                tau_ab: a.tau_ab,
                tau_ac: a.tau_ac,
                similarity_mode: a.similarity.unwrap_or_default(),
                require_answer_similarity: a.require_answer_similarity,
                preset: None,
            };
            (detector, config)
        }
    };
    if detector.report_kind() != ringwatch_core::detectors::ReportKind::Community {
        return Err(usage(format!("{detector} is not a community detector")));
    }
    config.validate(detector).map_err(|e| usage(e.to_string()))?;
    let g = read_edges(&a.edges)?;
    let partition = Partition::read_csv(open(&a.partition)?)
        .with_context(|| format!("reading partition {}", a.partition.display()))?;
    let mut r = Record::new("detect community");
    r.input(&a.edges).input(&a.partition);
    let index = if detector == DetectorKind::GcV3 {
        let table = a.table.as_ref().ok_or_else(|| usage("GC_V3 needs --table for post bodies"))?;
        r.input(table);
        Some(SimilarityIndex::build(&read_table(table)?, config.similarity_mode))
    } else {
        None
    };
    let reports = detect_communities(detector, &g, &partition, &config, index.as_ref())?;
    log::info!("{detector}: {} communities flagged", reports.len());
    write_file(&a.out, |w| Ok(write_reports_jsonl(w, &reports)?))?;
    r.output(&a.out);
    let normalized = config.normalized(detector);
    r.preset = normalized.preset.clone();
    r.thresholds = Some(serde_json::json!({ "detector": detector, "config": normalized }));
    Ok(r)
}

fn window_of(w: &WindowArgs, set: &SnapshotSet) -> anyhow::Result<DumpWindow> {
    let labels: Vec<&str> = set.dumps().iter().map(|d| d.label.as_str()).collect();
    let dump_m = match &w.dump_m {
        Some(m) => m.clone(),
        None => labels.last().ok_or_else(|| anyhow::anyhow!("snapshot file has no dumps"))?.to_string(),
    };
    let dump_n = match &w.dump_n {
        Some(n) => n.clone(),
        None => {
            let pos = labels.iter().position(|l| *l == dump_m).ok_or_else(|| usage(format!("unknown dump `{dump_m}`")))?;
            if pos == 0 {
                return Err(usage(format!("no dump precedes `{dump_m}`; pass --dump-n")));
            }
            labels[pos - 1].to_string()
        }
    };
    Ok(DumpWindow { dump_m, dump_n, tau_m_months: w.tau_m_months })
}

fn log_scan(name: &str, scan: &UserScan) {
    log::info!(
        "{name}: {} flagged among {} active of {} compared users ({} only in the newer dump)",
        scan.reports.len(),
        scan.active_users,
        scan.compared_users,
        scan.only_in_newer
    );
    if let Some(note) = &scan.note {
        log::warn!("{note}");
    }
}

fn detect_user(a: DetectUserArgs) -> anyhow::Result<Record> {
    let set = read_snapshots(&a.window.snapshots)?;
    let window = window_of(&a.window, &set)?;
    let config = match (&a.preset, a.tau_r) {
        (Some(name), _) => {
            jump_preset(name, window).ok_or_else(|| usage(format!("unknown jump preset `{name}` (C1..C3)")))?
        }
        (None, Some(t)) => UserDetectorConfig::new(t, window),
        (None, None) => unreachable!("clap requires --preset or --tau-r"),
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let scan = detect_suspicious_users(&set, &config)?;
    log_scan("jump", &scan);
    write_file(&a.out, |w| Ok(write_reports_jsonl(w, &scan.reports)?))?;
    let mut r = Record::new("detect user");
    r.input(&a.window.snapshots).output(&a.out);
    r.preset = config.preset.clone();
    r.thresholds = Some(serde_json::to_value(&config)?);
    Ok(r)
}

fn baseline(a: BaselineArgs, up: bool) -> anyhow::Result<Record> {
    let set = read_snapshots(&a.window.snapshots)?;
    let window = window_of(&a.window, &set)?;
    if window.tau_m_months == 0 {
        return Err(usage("--tau-m-months must be at least 1"));
    }
    let scan = if up { baseline_up(&set, &window)? } else { baseline_down(&set, &window)? };
    log_scan(if up { "B_U" } else { "B_D" }, &scan);
    write_file(&a.out, |w| Ok(write_reports_jsonl(w, &scan.reports)?))?;
    let mut r = Record::new(if up { "baseline up" } else { "baseline down" });
    r.input(&a.window.snapshots).output(&a.out);
    r.thresholds = Some(serde_json::to_value(&window)?);
    Ok(r)
}

/// Ring `i` of the default set: 2 to 6 members, all answers accepted and
/// under 12 minutes, cloned questions.
fn default_ring(i: usize) -> RingSpec {
    let k = i % 5;
    RingSpec {
        member_count: 2 + k,
        interaction_count: 10 + 2 * k,
        all_accepted: true,
        max_latency_hours: 0.2,
        clone_questions: true,
        ring_type: if k.is_multiple_of(2) { RingType::ThreadRing } else { RingType::SerialRing },
        member_ids: None,
    }
}

fn synth_forum(a: SynthForumArgs) -> anyhow::Result<Record> {
    let mut r = Record::new("synth forum");
    let rings: Vec<RingSpec> = match &a.ring_file {
        Some(path) => {
            r.input(path);
            serde_json::from_reader(open(path)?).with_context(|| format!("reading rings from {}", path.display()))?
        }
        None => (0..a.rings).map(default_ring).collect(),
    };
    let config = ForumConfig {
        honest_removal_rate: a.honest_removal_rate,
        ..ForumConfig::new(a.honest_users, a.questions, rings, a.seed)
    };
    let forum = generate_forum(&config)?;
    log::info!("{} posts, {} fraud users", forum.posts.len(), forum.truth.fraud_users.len());
    write_file(&a.out_posts, |w| Ok(write_posts_jsonl(w, &forum.posts)?))?;
    write_file(&a.out_truth, |w| Ok(forum.truth.write_json(w)?))?;
    r.output(&a.out_posts).output(&a.out_truth);
    r.seed = Some(a.seed);
    r.thresholds = Some(serde_json::to_value(&config)?);
    Ok(r)
}

fn synth_snapshots(a: SynthSnapshotsArgs) -> anyhow::Result<Record> {
    let planted = a.planted.iter().map(|&(user_id, multiple)| PlantedJump { user_id, multiple }).collect();
    let config = SnapshotConfig {
        mean_growth: a.mean_growth,
        growth_sd: a.growth_sd,
        dumps: SnapshotConfig::quarterly(a.dumps),
        ..SnapshotConfig::new(a.honest_users, planted, a.seed)
    };
    let (set, truth) = generate_snapshots(&config)?;
    write_file(&a.out, |w| Ok(set.write_csv(w)?))?;
    write_file(&a.out_truth, |w| Ok(truth.write_json(w)?))?;
    let mut r = Record::new("synth snapshots");
    r.output(&a.out).output(&a.out_truth);
    r.seed = Some(a.seed);
    r.thresholds = Some(serde_json::to_value(&config)?);
    Ok(r)
}

fn preset_of(report: &SuspicionReport) -> Option<String> {
    match &report.config {
        ConfigSnapshot::Community(c) => c.preset.clone(),
        ConfigSnapshot::User(u) => u.preset.clone(),
        ConfigSnapshot::Window(_) => None,
    }
}

fn evaluate_cmd(a: EvaluateArgs) -> anyhow::Result<Record> {
    let mut r = Record::new("evaluate");
    let mut groups: BTreeMap<(DetectorKind, Option<String>), Vec<SuspicionReport>> = BTreeMap::new();
    for path in &a.reports {
        r.input(path);
        let reports = read_reports_jsonl(open(path)?).with_context(|| format!("reading reports {}", path.display()))?;
        for report in reports {
            groups.entry((report.detector, preset_of(&report))).or_default().push(report);
        }
    }
    if groups.is_empty() {
        let detector = a.detector.ok_or_else(|| usage("report files are empty; pass --detector to score the empty run"))?;
        groups.insert((detector, None), Vec::new());
    }
    let truth = GroundTruth::read_json(open(&a.truth)?).with_context(|| format!("reading {}", a.truth.display()))?;
    r.input(&a.truth);
    let population: BTreeSet<UserId> = match (&a.edges, &a.snapshots) {
        (Some(edges), _) => {
            r.input(edges);
            read_edges(edges)?.nodes().iter().copied().collect()
        }
        (None, Some(snap)) => {
            r.input(snap);
            read_snapshots(snap)?.users().into_iter().collect()
        }
        (None, None) => unreachable!("clap requires --edges or --snapshots"),
    };
    let records = match &a.table {
        Some(t) => {
            r.input(t);
            Some(read_table(t)?)
        }
        None => None,
    };
    let sample = match a.sample_size.as_deref() {
        None => None,
        Some("auto") => Some((recommended_sample_size(population.len(), 0.99, 10.0)?, a.seed)),
        Some(n) => Some((n.parse().map_err(|_| usage(format!("--sample-size expects a number or `auto`, got `{n}`")))?, a.seed)),
    };
    let mut rows: Vec<Evaluation> = Vec::with_capacity(groups.len());
    for ((detector, preset), reports) in &groups {
        let input = EvaluationInput {
            detector: *detector,
            preset: preset.clone(),
            truth: &truth,
            population: &population,
            records: records.as_deref(),
            sample,
        };
        let row = evaluate(reports, &input)?;
        for note in &row.notes {
            log::warn!("{detector}: {note}");
        }
        rows.push(row);
    }
    write_file(&a.out_csv, |w| Ok(write_metrics_csv(w, &rows)?))?;
    write_file(&a.out_json, |w| Ok(write_report_json(w, &rows)?))?;
    r.output(&a.out_csv).output(&a.out_json);
    r.seed = sample.map(|(_, s)| s);
    if let [row] = rows.as_slice() {
        r.preset = row.preset.clone();
    }
    Ok(r)
}

fn metrics_cmd(a: MetricsArgs) -> anyhow::Result<Option<Record>> {
    let m = metrics(&ConfusionMatrix { tp: a.tp, fp: a.fp, fn_: a.fn_, tn: a.tn });
    match &a.out {
        Some(path) => {
            write_file(path, |w| {
                serde_json::to_writer_pretty(&mut *w, &m)?;
                Ok(w.write_all(b"\n")?)
            })?;
            let mut r = Record::new("metrics");
            r.output(path);
            Ok(Some(r))
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&m)?);
            Ok(None)
        }
    }
}
