//! `autocollect` command-line entry point.
//!
//! Exit codes: 0 success, 1 validation or configuration error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use autocollect_core::dataset::{read_episodes, replay, DatasetError, EpisodeFilter, StorageKind};
use autocollect_core::demos::{record_seed_library, scripts_for, DemoError};
use autocollect_core::library::{load_library, save_library, LibraryError};
use autocollect_core::orchestrator::{
    dry_run, load_registry, render_report, run_campaign_with, BackendKind, CampaignConfig, CampaignError,
    CampaignStats, ConfigError,
};
use autocollect_core::planner::{lifo_violations, SkillAction, TaskPlan};
use autocollect_core::sim::TemplateRegistry;

const SEED_PER_VERB: usize = 3;

#[derive(Debug, Parser)]
#[command(name = "autocollect", version, about = "Autonomous tabletop data collection")]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "AUTOCOLLECT_LOG", default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Record scripted seed demonstrations into a library file.
    RecordSeedDemos(RecordArgs),
    /// Run a data-collection campaign.
    Collect(CollectArgs),
    /// Check the LIFO pairing of a forward/reverse plan file.
    ValidatePlan(ValidateArgs),
    /// Re-execute stored episodes and compare against their recorded signals.
    Replay(ReplayArgs),
    /// Render a stats table from a summary file or a dataset.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct RecordArgs {
    #[arg(long, env = "AUTOCOLLECT_OUT", default_value = "library.jsonl")]
    out: PathBuf,
    /// Demonstrations per skill verb (2-5).
    #[arg(long, env = "AUTOCOLLECT_PER_VERB", default_value_t = SEED_PER_VERB)]
    per_verb: usize,
    /// Restrict scripts to these templates (comma separated).
    #[arg(long, env = "AUTOCOLLECT_TEMPLATES", value_delimiter = ',')]
    templates: Option<Vec<String>>,
    #[arg(long, env = "AUTOCOLLECT_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Oracle,
    External,
}

#[derive(Debug, Args)]
struct CollectArgs {
    /// Campaign TOML; all default tasks when absent.
    #[arg(long, env = "AUTOCOLLECT_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "AUTOCOLLECT_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "AUTOCOLLECT_WORKERS")]
    workers: Option<usize>,
    /// Episodes per task, overriding the config.
    #[arg(long, env = "AUTOCOLLECT_EPISODES")]
    episodes: Option<usize>,
    #[arg(long, env = "AUTOCOLLECT_BACKEND")]
    backend: Option<BackendArg>,
    #[arg(long, env = "AUTOCOLLECT_ENDPOINT")]
    endpoint: Option<String>,
    /// Plan and validate the first scene of every lane without executing.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// JSON file holding a stored task plan or `{"forward": [...], "reverse": [...]}` actions.
    plan: PathBuf,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long, env = "AUTOCOLLECT_DATASET", default_value = "dataset.jsonl")]
    dataset: PathBuf,
    /// Replay only this episode id.
    #[arg(long)]
    id: Option<u64>,
    /// Re-spawn with this seed instead of the recorded one.
    #[arg(long, env = "AUTOCOLLECT_SEED")]
    seed: Option<u64>,
    /// Alternative scene template file.
    #[arg(long, env = "AUTOCOLLECT_TEMPLATES_FILE")]
    templates: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Campaign summary JSON written by `collect`.
    #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
    summary: Option<PathBuf>,
    /// Dataset file; counts stored episodes per task and kind.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

/// Error carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<CampaignError> for Failure {
    fn from(e: CampaignError) -> Self {
        match e {
            CampaignError::Config(_) | CampaignError::Templates(_) | CampaignError::Library(LibraryError::Parse { .. })
            | CampaignError::Library(LibraryError::Invariant { .. }) => Failure::invalid(e.to_string()),
            _ => Failure::runtime(e.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::runtime(e.to_string()),
            _ => Failure::invalid(e.to_string()),
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::MissingTemplate(_) | DatasetError::Precondition(_) => Failure::invalid(e.to_string()),
            _ => Failure::runtime(e.to_string()),
        }
    }
}

impl From<LibraryError> for Failure {
    fn from(e: LibraryError) -> Self {
        match e {
            LibraryError::Io { .. } => Failure::runtime(e.to_string()),
            _ => Failure::invalid(e.to_string()),
        }
    }
}

fn record_seed_demos(args: &RecordArgs) -> Result<(), Failure> {
    if !(2..=5).contains(&args.per_verb) {
        return Err(Failure::invalid(format!("--per-verb must be between 2 and 5, got {}", args.per_verb)));
    }
    let registry = TemplateRegistry::builtin();
    let scripts = scripts_for(args.templates.as_deref()).map_err(|e| Failure::invalid(e.to_string()))?;
    let lib = record_seed_library(&registry, &scripts, args.per_verb, args.seed).map_err(|e| match e {
        DemoError::NoScript(_) | DemoError::ZeroCount => Failure::invalid(e.to_string()),
        other => Failure::runtime(other.to_string()),
    })?;
    save_library(&lib, &args.out)?;
    println!("wrote {} demonstrations to {}", lib.len(), args.out.display());
    Ok(())
}

fn campaign_config(args: &CollectArgs) -> Result<CampaignConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => CampaignConfig::load(p)?,
        None => CampaignConfig::with_default_tasks(10),
    };
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(n) = args.episodes {
        cfg.tasks.iter_mut().for_each(|t| t.episodes = n);
    }
    if let Some(b) = args.backend {
        cfg.backend.kind = match b {
            BackendArg::Oracle => BackendKind::Oracle,
            BackendArg::External => BackendKind::External,
        };
    }
    if let Some(e) = &args.endpoint {
        cfg.backend.endpoint = Some(e.clone());
    }
    Ok(cfg)
}

fn library_for(cfg: &CampaignConfig, registry: &TemplateRegistry) -> Result<autocollect_core::library::AffordanceLibrary, Failure> {
    if cfg.library_path.exists() {
        return Ok(load_library(&cfg.library_path)?);
    }
    log::info!("no library at {}; recording seed demonstrations", cfg.library_path.display());
    let lib = record_seed_library(registry, &scripts_for(None).expect("all scripts"), SEED_PER_VERB, cfg.master_seed)
        .map_err(|e| Failure::runtime(e.to_string()))?;
    save_library(&lib, &cfg.library_path)?;
    Ok(lib)
}

fn collect(args: &CollectArgs) -> Result<(), Failure> {
    let cfg = campaign_config(args)?;
    let registry = load_registry(&cfg)?;
    cfg.validate(&registry)?;
    let library = library_for(&cfg, &registry)?;
    let registry = Arc::new(registry);
    if args.dry_run {
        let entries = dry_run(&cfg, registry, &library)?;
        let mut invalid = 0;
        for e in &entries {
            match &e.plan {
                Ok(plan) => {
                    println!("{} lane {} (spawn seed {}):", e.task, e.lane, e.spawn_seed);
                    for (k, s) in plan.forward.iter().enumerate() {
                        println!("  forward {}: {} [{}]", k + 1, s.description, s.demo_id);
                    }
                    for (k, s) in plan.reverse.iter().enumerate() {
                        println!("  reverse {}: {} [{}]", k + 1, s.description, s.demo_id);
                    }
                    for v in &e.violations {
                        println!("  LIFO violation at step {}: {}", v.step, v.reason);
                    }
                    invalid += usize::from(!e.violations.is_empty());
                }
                Err(err) => {
                    println!("{} lane {}: planning failed: {err}", e.task, e.lane);
                    invalid += 1;
                }
            }
        }
        return if invalid == 0 { Ok(()) } else { Err(Failure::invalid(format!("{invalid} plan(s) failed validation"))) };
    }
    let out = run_campaign_with(&cfg, registry, &library)?;
    print!("{}", out.report);
    println!(
        "stored {} episode(s) in {}",
        out.stored_ids.iter().flatten().count(),
        cfg.dataset_path.display()
    );
    if out.harvested > 0 {
        println!("harvested {} demonstration(s) into {}", out.harvested, cfg.library_path.display());
    }
    if out.abandoned_lanes > 0 {
        log::warn!("{} lane(s) stopped after repeated planning failures", out.abandoned_lanes);
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionPlan {
    forward: Vec<SkillAction>,
    reverse: Vec<SkillAction>,
}

fn load_actions(path: &Path) -> Result<ActionPlan, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::runtime(format!("cannot read {}: {e}", path.display())))?;
    if let Ok(plan) = serde_json::from_str::<TaskPlan>(&text) {
        let take = |v: Vec<_>| v.into_iter().map(|s: autocollect_core::planner::Subtask| s.action).collect();
        return Ok(ActionPlan { forward: take(plan.forward), reverse: take(plan.reverse) });
    }
    serde_json::from_str::<ActionPlan>(&text)
        .map_err(|e| Failure::invalid(format!("{}: not a plan: {e}", path.display())))
}

fn validate_plan(args: &ValidateArgs) -> Result<(), Failure> {
    let plan = load_actions(&args.plan)?;
    let violations = lifo_violations(&plan.forward.iter().collect::<Vec<_>>(), &plan.reverse.iter().collect::<Vec<_>>());
    for v in &violations {
        println!("step {}: {}", v.step, v.reason);
    }
    if violations.is_empty() {
        println!("valid: {} forward / {} reverse steps", plan.forward.len(), plan.reverse.len());
        Ok(())
    } else {
        Err(Failure::invalid(format!("{} LIFO violation(s)", violations.len())))
    }
}

fn replay_cmd(args: &ReplayArgs) -> Result<(), Failure> {
    let registry = match &args.templates {
        Some(p) => TemplateRegistry::load(p).map_err(|e| Failure::invalid(e.to_string()))?,
        None => TemplateRegistry::builtin(),
    };
    let filter = EpisodeFilter { ids: args.id.map(|i| i..=i), ..EpisodeFilter::all() };
    let read = read_episodes(&args.dataset, &filter)?;
    for c in &read.corrupt {
        eprintln!("corrupt record at line {} (byte {}): {}", c.line, c.offset, c.reason);
    }
    if read.episodes.is_empty() {
        return Err(Failure::invalid("no matching episodes"));
    }
    let mut mismatches = 0;
    for e in &read.episodes {
        let report = replay(e, &registry, args.seed)?;
        mismatches += usize::from(!report.is_exact());
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
    }
    if mismatches > 0 {
        return Err(Failure::invalid(format!("{mismatches} of {} episode(s) did not replay exactly", read.episodes.len())));
    }
    Ok(())
}

fn stats_cmd(args: &StatsArgs) -> Result<(), Failure> {
    if let Some(path) = &args.summary {
        let text =
            std::fs::read_to_string(path).map_err(|e| Failure::runtime(format!("cannot read {}: {e}", path.display())))?;
        let stats: CampaignStats =
            serde_json::from_str(&text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
        print!("{}", render_report(&stats));
        return Ok(());
    }
    let path = args.dataset.as_ref().expect("clap requires one source");
    let read = read_episodes(path, &EpisodeFilter::all())?;
    let mut rows: std::collections::BTreeMap<&str, (usize, usize)> = Default::default();
    for e in &read.episodes {
        let row = rows.entry(e.meta.task.template.as_str()).or_default();
        match e.kind {
            StorageKind::Dual => row.0 += 1,
            StorageKind::Single => row.1 += 1,
        }
    }
    println!("{:<28} {:>6} {:>6}", "Task", "Dual", "Single");
    for (task, (d, s)) in &rows {
        println!("{task:<28} {d:>6} {s:>6}");
    }
    println!("corrupt records: {}", read.corrupt.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    let result = match &cli.command {
        Command::RecordSeedDemos(a) => record_seed_demos(a),
        Command::Collect(a) => collect(a),
        Command::ValidatePlan(a) => validate_plan(a),
        Command::Replay(a) => replay_cmd(a),
        Command::Stats(a) => stats_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
