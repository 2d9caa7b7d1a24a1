//! `semcache` command line: workload generation, replay, reports, the proxy
//! server and the co-location simulator.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use semcache::bench::{
    gen_mixed_cost, gen_repo_trace, gen_trend, gen_zipf, mixed_cost_endpoints, replay, repo_file_frequencies,
    ClockMode, MetricsReport, MixedCostParams, ReplayConfig, SystemMode, TrendParams, TrendTopic, Workload,
    ZipfParams,
};
use semcache::cache::EvictionPolicy;
use semcache::kv::{decode_all, encode_all};
use semcache::proxy::ProxyConfig;
use semcache::sched::{colocation_overhead, format_tasks, gen_mixed_load, parse_tasks, MixedLoad, SchedulerConfig};

#[derive(Parser)]
#[command(name = "semcache", version, about = "Semantic cache for agent tool calls")]
struct Cli {
    /// Log filter, e.g. `info` or `semcache=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Zipf-popular paraphrase clusters.
    GenZipf(GenZipf),
    /// Bursty topics with lagged followers.
    GenTrend(GenTrend),
    /// File reads by coding tasks.
    GenRepo(GenRepo),
    /// Costly static and cheap ephemeral tools side by side.
    GenMixed(GenMixed),
    /// Replay a workload against one or all system modes.
    Replay(ReplayArgs),
    /// Print saved replay reports as a table.
    Report(ReportArgs),
    /// Run the HTTP proxy.
    Serve(ServeArgs),
    /// Simulate agent and judge work sharing one accelerator.
    Sim(SimArgs),
}

#[derive(Args)]
struct GenZipf {
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 20)]
    paraphrases: usize,
    #[arg(long, default_value_t = 1000)]
    events: usize,
    #[arg(long, default_value_t = 0.99)]
    zipf_s: f64,
    #[arg(long, default_value_t = 0)]
    distractors: usize,
    /// Spacing of arrivals in milliseconds; 0 releases everything at once.
    #[arg(long, default_value_t = 0.0)]
    interarrival_ms: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory for `trace.tsv` and `table.tsv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenTrend {
    /// `peak_seconds:expected_events`, repeatable. Defaults to four topics.
    #[arg(long = "topic", value_parser = parse_topic)]
    topics: Vec<TrendTopic>,
    #[arg(long, default_value_t = 600.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 60.0)]
    half_width_s: f64,
    /// Follower intensity relative to its leader; 0 disables followers.
    #[arg(long, default_value_t = 0.5)]
    follower_ratio: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenRepo {
    #[arg(long, default_value_t = 1000)]
    tasks: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenMixed {
    #[arg(long, default_value_t = 1000)]
    events: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Vanilla,
    Exact,
    AnnOnly,
    Full,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Lcfu,
    Lru,
    Lfu,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Virtual,
    Real,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Kv,
    Table,
}

#[derive(Args)]
struct ReplayArgs {
    /// Directory written by one of the `gen-*` commands.
    #[arg(long)]
    workload: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    mode: ModeArg,
    /// Capacity as a fraction of the workload's working set.
    #[arg(long)]
    cache_ratio: Option<f64>,
    #[arg(long)]
    tau_sim: Option<f64>,
    #[arg(long)]
    tau_lsm: Option<f64>,
    #[arg(long)]
    ttl_s: Option<f64>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Lcfu)]
    policy: PolicyArg,
    /// Concurrent agent workers.
    #[arg(long, default_value_t = 8)]
    workers: usize,
    #[arg(long, default_value_t = 600.0)]
    think_ms: f64,
    #[arg(long, value_enum, default_value_t = ClockArg::Virtual)]
    clock: ClockArg,
    /// Seed for remote latency jitter.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    endpoint_latency_ms: Option<f64>,
    #[arg(long)]
    rate_limit_per_min: Option<u32>,
    #[arg(long)]
    cost_per_call_usd: Option<f64>,
    /// Use the static/ephemeral endpoint pair of `gen-mixed`.
    #[arg(long)]
    mixed_endpoints: bool,
    #[arg(long)]
    no_prefetch: bool,
    /// Load one answer per key before replaying.
    #[arg(long)]
    prewarm: bool,
    #[arg(long, value_enum, default_value_t = Format::Kv)]
    format: Format,
    /// Also write the key-value reports here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Files of key-value reports written by `replay --out`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured port.
    #[arg(long)]
    port: Option<u16>,
    /// Overrides the configured worker count.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SimArgs {
    /// Task file (`kind arrival service memory` per line); generated when
    /// absent.
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Write the generated tasks here.
    #[arg(long)]
    write_tasks: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    agent_share: f64,
    #[arg(long)]
    agent_rate: Option<f64>,
    #[arg(long)]
    judge_rate: Option<f64>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn parse_topic(s: &str) -> Result<TrendTopic, String> {
    let (peak, intensity) = s.split_once(':').ok_or("expected peak_seconds:expected_events")?;
    Ok(TrendTopic {
        peak_s: peak.trim().parse().map_err(|e| format!("peak: {e}"))?,
        intensity: intensity.trim().parse().map_err(|e| format!("intensity: {e}"))?,
    })
}

fn save(workload: &Workload, out: &PathBuf) -> Result<()> {
    workload.save(out)?;
    println!(
        "wrote {} events, {} answers, {} working-set tokens to {}",
        workload.events.len(),
        workload.table.len(),
        workload.working_set_tokens(),
        out.display()
    );
    Ok(())
}

fn run_replay(a: ReplayArgs) -> Result<()> {
    let workload = Workload::load(&a.workload).with_context(|| format!("loading {}", a.workload.display()))?;
    let mut base = ReplayConfig {
        workers: a.workers,
        agent_think_ms: a.think_ms,
        cache_ratio: a.cache_ratio,
        policy: match a.policy {
            PolicyArg::Lcfu => EvictionPolicy::Lcfu,
            PolicyArg::Lru => EvictionPolicy::Lru,
            PolicyArg::Lfu => EvictionPolicy::Lfu,
        },
        clock: match a.clock {
            ClockArg::Virtual => ClockMode::Virtual,
            ClockArg::Real => ClockMode::Real,
        },
        jitter_seed: a.seed,
        prefetch: !a.no_prefetch,
        prewarm: a.prewarm,
        ..ReplayConfig::default()
    };
    if let Some(t) = a.tau_sim {
        base.cache.tau_sim = t;
    }
    if let Some(t) = a.tau_lsm {
        base.cache.tau_lsm = t;
    }
    if let Some(t) = a.ttl_s {
        base.cache.ttl_seconds = t;
    }
    if let Some(v) = a.endpoint_latency_ms {
        base.endpoint.base_latency_ms = v;
    }
    if let Some(v) = a.rate_limit_per_min {
        base.endpoint.rate_limit_per_min = v;
    }
    if let Some(v) = a.cost_per_call_usd {
        base.endpoint.cost_per_call_usd = v;
    }
    if a.mixed_endpoints {
        base.endpoints = mixed_cost_endpoints();
    }
    let modes: Vec<SystemMode> = match a.mode {
        ModeArg::All => SystemMode::ALL.to_vec(),
        ModeArg::Vanilla => vec![SystemMode::Vanilla],
        ModeArg::Exact => vec![SystemMode::Exact],
        ModeArg::AnnOnly => vec![SystemMode::AnnOnly],
        ModeArg::Full => vec![SystemMode::Full],
    };
    let mut reports = Vec::new();
    for mode in modes {
        let config = ReplayConfig { mode, ..base.clone() };
        let run = replay(&workload, &config).with_context(|| format!("replaying {}", mode.as_str()))?;
        reports.push(run.report);
    }
    let records: Vec<_> = reports.iter().map(MetricsReport::to_record).collect();
    if let Some(out) = &a.out {
        std::fs::write(out, encode_all(&records)).with_context(|| format!("writing {}", out.display()))?;
    }
    match a.format {
        Format::Kv => print!("{}", encode_all(&records)),
        Format::Table => print_table(&reports),
    }
    Ok(())
}

fn print_table(reports: &[MetricsReport]) {
    println!("{}", MetricsReport::table_header());
    for r in reports {
        println!("{}", r.table_row());
    }
}

fn run_report(a: ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for path in &a.inputs {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for record in decode_all(&text).with_context(|| format!("parsing {}", path.display()))? {
            reports.push(MetricsReport::from_record(&record)?);
        }
    }
    if reports.is_empty() {
        bail!("no reports found");
    }
    print_table(&reports);
    Ok(())
}

fn run_serve(a: ServeArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => ProxyConfig::load(p)?,
        None => ProxyConfig::default(),
    };
    if let Some(p) = a.port {
        config.port = p;
    }
    if let Some(w) = a.workers {
        config.workers = w;
    }
    config.validate()?;
    semcache::server::serve_api(&config)?;
    Ok(())
}

fn run_sim(a: SimArgs) -> Result<()> {
    let tasks = match &a.tasks {
        Some(p) => parse_tasks(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => {
            let d = MixedLoad::default();
            gen_mixed_load(&MixedLoad {
                agent_rate: a.agent_rate.unwrap_or(d.agent_rate),
                judge_rate: a.judge_rate.unwrap_or(d.judge_rate),
                duration: a.duration.unwrap_or(d.duration),
                seed: a.seed,
                ..d
            })
        }
    };
    if let Some(p) = &a.write_tasks {
        std::fs::write(p, format_tasks(&tasks)).with_context(|| format!("writing {}", p.display()))?;
    }
    let config = SchedulerConfig {
        agent_compute_share: a.agent_share,
        judge_compute_share: 1.0 - a.agent_share,
        ..SchedulerConfig::default()
    };
    let (colocated, isolated) = colocation_overhead(&tasks, &config)?;
    let ratio = if isolated.agent.p99_wait > 0.0 {
        colocated.agent.p99_wait / isolated.agent.p99_wait
    } else {
        f64::NAN
    };
    let record = colocated
        .to_record()
        .with("isolated_agent_p99_wait", isolated.agent.p99_wait)
        .with("agent_p99_wait_ratio", ratio);
    print!("{}", record.encode());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.log).context("bad --log filter")?)
        .with_writer(std::io::stderr)
        .init();
    match cli.command {
        Command::GenZipf(a) => save(
            &gen_zipf(&ZipfParams {
                clusters: a.clusters,
                paraphrases_per_cluster: a.paraphrases,
                n_events: a.events,
                zipf_s: a.zipf_s,
                seed: a.seed,
                distractors: a.distractors,
                interarrival_ms: a.interarrival_ms,
                ..ZipfParams::default()
            })?,
            &a.out,
        ),
        Command::GenTrend(a) => {
            let topics = if a.topics.is_empty() {
                [(120.0, 150.0), (240.0, 120.0), (360.0, 100.0), (480.0, 80.0)]
                    .map(|(peak_s, intensity)| TrendTopic { peak_s, intensity })
                    .to_vec()
            } else {
                a.topics
            };
            save(
                &gen_trend(&TrendParams {
                    topics,
                    duration_s: a.duration_s,
                    half_width_s: a.half_width_s,
                    follower_ratio: a.follower_ratio,
                    seed: a.seed,
                    ..TrendParams::default()
                })?,
                &a.out,
            )
        }
        Command::GenRepo(a) => save(&gen_repo_trace(&repo_file_frequencies(), a.tasks, a.seed)?, &a.out),
        Command::GenMixed(a) => save(
            &gen_mixed_cost(&MixedCostParams {
                n_events: a.events,
                seed: a.seed,
                ..MixedCostParams::default()
            })?,
            &a.out,
        ),
        Command::Replay(a) => run_replay(a),
        Command::Report(a) => run_report(a),
        Command::Serve(a) => run_serve(a),
        Command::Sim(a) => run_sim(a),
    }
}
