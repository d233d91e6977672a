//! `mgb`: run, compare and inspect multi-GPU scheduling simulations.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mgb_core::device::{parse_inventory, DeviceSpec};
use mgb_core::metrics::{
    baseline_config, compare, compute_metrics, summarize, summary_csv, to_csv, CompareSpec, WorkloadSource,
};
use mgb_core::sched::{PolicyConfig, PolicyKind};
use mgb_core::sim::{run_sim, run_sim_observed, Interference, InvariantChecker, Observer, SimConfig, SimView};
use mgb_core::tasks::{analyze_program, ResourceRequest, TaskDump};
use mgb_core::trace::parse_program;
use mgb_core::workload::{gen_workload, table_i, Catalog, MixSpec, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InterferenceArg {
    Ps,
    None,
}

#[derive(Parser, Debug)]
#[command(name = "mgb", version, about = "Multi-GPU batch scheduling simulator")]
struct Cli {
    /// Device inventory, e.g. `p100:2` or `p100:1,v100:2`, or a JSON file.
    #[arg(long, global = true, default_value = "p100:2")]
    devices: String,
    /// Scheduling policy: sa, cg:<ratio>, mgb-sm or mgb-warps.
    #[arg(long, global = true, default_value = "mgb-warps")]
    sched: String,
    /// Worker processes pulling jobs from the batch queue.
    #[arg(long, global = true, default_value_t = 10)]
    workers: usize,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Job template catalog (JSON); the built-in one otherwise.
    #[arg(long, global = true)]
    catalog: Option<PathBuf>,
    /// Stop at the first deferred request instead of skipping past it.
    #[arg(long, global = true)]
    strict_fifo: bool,
    /// Print the lazy queues at every launch prepare to stderr.
    #[arg(long, global = true)]
    trace_lazy: bool,
    #[arg(long, global = true, value_enum, default_value = "ps")]
    interference: InterferenceArg,
    /// Host cost of copies and memsets.
    #[arg(long, global = true, default_value_t = 0)]
    host_ns_per_byte: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Simulate one workload under one policy.
    Run {
        /// Workload file (JSON Lines).
        #[arg(long, conflicts_with = "mix")]
        workload: Option<PathBuf>,
        /// Generate the workload instead: `L:S` or a reference name W1..W8.
        #[arg(long)]
        mix: Option<String>,
        #[arg(long)]
        jobs: Option<usize>,
        /// Route every memory op through the lazy runtime.
        #[arg(long)]
        force_lazy: bool,
        /// Write the scheduler decisions here as JSON Lines.
        #[arg(long)]
        decision_log: Option<PathBuf>,
    },
    /// Generate a seeded batch workload.
    GenWorkload {
        /// `L:S` ratio or a reference name W1..W8.
        #[arg(long)]
        mix: String,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Analyze a trace program into GPU tasks.
    BuildTasks {
        trace: PathBuf,
        /// One JSON line per task instead of a summary.
        #[arg(long)]
        dump_tasks: bool,
        #[arg(long)]
        force_lazy: bool,
    },
    /// Run a policy grid over workloads and seeds.
    Compare {
        /// Comma-separated workload files, `L:S` mixes or W1..W8; all eight
        /// reference mixes by default.
        #[arg(long, value_delimiter = ',')]
        workloads: Vec<String>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "sa,cg:6,mgb-sm,mgb-warps")]
        policies: Vec<String>,
        /// Worker counts to sweep for cg; `--workers` otherwise.
        #[arg(long, value_delimiter = ',')]
        cg_workers: Vec<usize>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Write the mean and standard deviation per cell here.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

/// Exit status 2.
struct ConfigError(String);

/// Exit status 3.
struct ContractViolation(String);

enum Failure {
    Config(ConfigError),
    Contract(ContractViolation),
}

impl<E: std::fmt::Display> From<E> for ConfigError {
    fn from(e: E) -> Self {
        ConfigError(e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(ConfigError(m))) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Contract(ContractViolation(m))) => {
            eprintln!("contract violation: {m}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.cmd {
        Cmd::Run { workload, mix, jobs, force_lazy, decision_log } => {
            run(cli, workload.as_deref(), mix.as_deref(), *jobs, *force_lazy, decision_log.as_deref())
        }
        Cmd::GenWorkload { mix, jobs } => {
            let w = gen_workload(&mix_spec(mix, *jobs, cli.seed)?, &catalog(cli)?).map_err(ConfigError::from)?;
            emit(cli, &w.to_jsonl())?;
            Ok(())
        }
        Cmd::BuildTasks { trace, dump_tasks, force_lazy } => build_tasks(cli, trace, *dump_tasks, *force_lazy),
        Cmd::Compare { workloads, jobs, policies, cg_workers, seeds, summary } => {
            run_compare(cli, workloads, *jobs, policies, cg_workers, seeds, summary.as_deref())
        }
    }
}

fn emit(cli: &Cli, text: &str) -> Result<(), ConfigError> {
    match &cli.out {
        Some(p) => fs::write(p, text).map_err(|e| ConfigError(format!("{}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn devices(cli: &Cli) -> Result<Vec<DeviceSpec>, ConfigError> {
    let text = if Path::new(&cli.devices).is_file() {
        fs::read_to_string(&cli.devices)?
    } else {
        cli.devices.clone()
    };
    Ok(parse_inventory(&text)?)
}

fn policy(s: &str) -> Result<PolicyConfig, ConfigError> {
    Ok(s.parse::<PolicyConfig>()?)
}

fn catalog(cli: &Cli) -> Result<Catalog, ConfigError> {
    match &cli.catalog {
        Some(p) => Ok(Catalog::load(p)?),
        None => Ok(Catalog::builtin()),
    }
}

fn mix_spec(s: &str, jobs: Option<usize>, seed: u64) -> Result<MixSpec, ConfigError> {
    let mut m: MixSpec = s.parse()?;
    m.seed = m.seed.wrapping_add(seed);
    if let Some(n) = jobs {
        m.n_jobs = n;
    }
    Ok(m)
}

fn sim_config(cli: &Cli, devs: Vec<DeviceSpec>, policy: PolicyConfig, workers: usize) -> SimConfig {
    let mut c = SimConfig::new(devs, policy, workers, cli.seed);
    c.skip_ahead = !cli.strict_fifo;
    c.interference = match cli.interference {
        InterferenceArg::Ps => Interference::ProcessorSharing,
        InterferenceArg::None => Interference::None,
    };
    c.host_ns_per_byte = cli.host_ns_per_byte;
    c
}

/// Checks invariants and optionally prints lazy queues.
struct RunObserver {
    check: InvariantChecker,
    trace_lazy: bool,
}

impl Observer for RunObserver {
    fn on_event(&mut self, v: &SimView<'_>) {
        self.check.on_event(v);
    }

    fn on_instant_end(&mut self, v: &SimView<'_>) {
        self.check.on_instant_end(v);
    }

    fn on_request(&mut self, _job: usize, _task: usize, _req: &ResourceRequest) {}

    fn wants_lazy_dumps(&self) -> bool {
        self.trace_lazy
    }

    fn on_lazy_prepare(&mut self, job_id: usize, kernel: &str, queues: &str) {
        eprint!("job {job_id} prepare {kernel}\n{queues}");
    }
}

fn run(
    cli: &Cli,
    workload: Option<&Path>,
    mix: Option<&str>,
    jobs: Option<usize>,
    force_lazy: bool,
    decision_log: Option<&Path>,
) -> Result<(), Failure> {
    let devs = devices(cli)?;
    let pol = policy(&cli.sched)?;
    let (wl, name) = match (workload, mix) {
        (Some(p), _) => (Workload::load(p).map_err(ConfigError::from)?, p.display().to_string()),
        (None, Some(m)) => {
            let spec = mix_spec(m, jobs, cli.seed)?;
            (gen_workload(&spec, &catalog(cli)?).map_err(ConfigError::from)?, m.to_string())
        }
        (None, None) => return Err(ConfigError("run needs --workload or --mix".into()).into()),
    };
    let mut cfg = sim_config(cli, devs.clone(), pol, cli.workers);
    cfg.force_lazy = force_lazy;
    let mut obs = RunObserver {
        check: InvariantChecker::with_work_conservation(),
        trace_lazy: cli.trace_lazy,
    };
    if !cfg.skip_ahead {
        obs.check.work_conservation = false;
    }
    let report = run_sim_observed(&wl, &cfg, &mut obs).map_err(ConfigError::from)?;
    if let Some(p) = decision_log {
        let mut s = String::new();
        for d in &report.decisions {
            s.push_str(&serde_json::to_string(d).map_err(ConfigError::from)?);
            s.push('\n');
        }
        fs::write(p, s).map_err(ConfigError::from)?;
    }
    match cli.format.unwrap_or(Format::Json) {
        Format::Json => emit(cli, &(report.to_json() + "\n"))?,
        Format::Csv => {
            let baseline = run_sim(&wl, &baseline_config(&devs, cli.seed, &cfg)).map_err(ConfigError::from)?;
            let m = compute_metrics(&report, &baseline, &name).map_err(ConfigError::from)?;
            emit(cli, &to_csv(&[m]))?;
        }
    }
    if !obs.check.ok() {
        return Err(Failure::Contract(ContractViolation(obs.check.violations.join("; "))));
    }
    if pol.reserves_memory() && report.oom_count() > 0 {
        return Err(Failure::Contract(ContractViolation(format!(
            "{} out-of-memory crashes under {pol}",
            report.oom_count()
        ))));
    }
    Ok(())
}

fn build_tasks(cli: &Cli, trace: &Path, dump: bool, force_lazy: bool) -> Result<(), Failure> {
    let text = fs::read_to_string(trace).map_err(|e| ConfigError(format!("{}: {e}", trace.display())))?;
    let program = parse_program(&text).map_err(ConfigError::from)?;
    let ap = analyze_program(&program, force_lazy).map_err(ConfigError::from)?;
    let mut s = String::new();
    if dump {
        for (i, t) in ap.tasks.iter().enumerate() {
            s.push_str(&serde_json::to_string(&TaskDump::new(i, t)).map_err(ConfigError::from)?);
            s.push('\n');
        }
    } else {
        s.push_str(&format!("program {}: {} tasks\n", program.name, ap.tasks.len()));
        for (i, t) in ap.tasks.iter().enumerate() {
            let d = TaskDump::new(i, t);
            let probe = d.probe.map_or_else(|| "lazy".to_string(), |p| format!("{}:{}", p.block, p.index));
            s.push_str(&format!(
                "  task {i}: {} launches, {} bytes, {} blocks x {} warps, probe {probe}\n",
                d.launches.len(),
                d.mem_bytes,
                d.thread_blocks,
                d.warps_per_block
            ));
        }
    }
    emit(cli, &s)?;
    Ok(())
}

fn run_compare(
    cli: &Cli,
    workloads: &[String],
    jobs: Option<usize>,
    policies: &[String],
    cg_workers: &[usize],
    seeds: &[u64],
    summary: Option<&Path>,
) -> Result<(), Failure> {
    let devs = devices(cli)?;
    let mut spec = CompareSpec::new(devs.clone(), catalog(cli)?);
    spec.base = sim_config(cli, devs.clone(), PolicyConfig::new(PolicyKind::SingleAssignment), 1);
    spec.seeds = if seeds.is_empty() { vec![cli.seed] } else { seeds.to_vec() };
    let names: Vec<String> = if workloads.is_empty() {
        table_i().into_iter().map(|(n, _)| n.to_string()).collect()
    } else {
        workloads.to_vec()
    };
    for n in names {
        let src = if Path::new(&n).is_file() {
            WorkloadSource::Fixed(Workload::load(Path::new(&n)).map_err(ConfigError::from)?)
        } else {
            WorkloadSource::Mix(mix_spec(&n, jobs, 0)?)
        };
        spec.workloads.push((n, src));
    }
    for p in policies {
        let pol = policy(p)?;
        match pol.kind {
            PolicyKind::SingleAssignment => spec.runs.push((pol, devs.len())),
            PolicyKind::CoreToGpu if !cg_workers.is_empty() => {
                spec.runs.extend(cg_workers.iter().map(|&w| (pol, w)));
            }
            _ => spec.runs.push((pol, cli.workers)),
        }
    }
    if cli.workers == 0 || cg_workers.contains(&0) {
        return Err(ConfigError("worker counts must be positive".into()).into());
    }
    let rows = compare(&spec).map_err(ConfigError::from)?;
    let text = match cli.format.unwrap_or(Format::Csv) {
        Format::Csv => to_csv(&rows),
        Format::Json => serde_json::to_string_pretty(&rows).map_err(ConfigError::from)? + "\n",
    };
    emit(cli, &text)?;
    if let Some(p) = summary {
        fs::write(p, summary_csv(&summarize(&rows))).map_err(ConfigError::from)?;
    }
    Ok(())
}
