//! Per-run metrics against a single-assignment baseline, and the policy
//! comparison grid.

use rayon::prelude::*;
use serde::Serialize;

use crate::device::DeviceSpec;
use crate::sched::{PolicyConfig, PolicyKind};
use crate::sim::{run_sim, JobState, SimConfig, SimError, SimReport};
use crate::workload::{gen_workload, Catalog, MixSpec, Workload, WorkloadError};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("report workload {report} does not match baseline workload {baseline}")]
    WorkloadMismatch { report: String, baseline: String },
    #[error("report seed {report} does not match baseline seed {baseline}")]
    SeedMismatch { report: u64, baseline: u64 },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub workload: String,
    pub policy: String,
    pub workers: usize,
    pub seed: u64,
    /// Completed jobs per second.
    pub throughput: f64,
    pub norm_throughput: f64,
    pub avg_turnaround_ms: f64,
    pub speedup: f64,
    pub crash_pct: f64,
    pub slowdown_pct: f64,
    pub makespan_ms: f64,
}

/// Completed jobs per second of makespan.
pub fn throughput(r: &SimReport) -> f64 {
    if r.makespan_us == 0 {
        return 0.0;
    }
    r.completed() as f64 / (r.makespan_us as f64 / 1e6)
}

/// Mean turnaround of completed jobs in ms; zero when none completed.
pub fn avg_turnaround_ms(r: &SimReport) -> f64 {
    let done: Vec<u64> =
        r.jobs.iter().filter(|j| j.state == JobState::Done).map(|j| j.turnaround_us()).collect();
    if done.is_empty() {
        return 0.0;
    }
    done.iter().sum::<u64>() as f64 / done.len() as f64 / 1000.0
}

/// Mean job wait in ms over all jobs.
pub fn avg_wait_ms(r: &SimReport) -> f64 {
    if r.jobs.is_empty() {
        return 0.0;
    }
    r.jobs.iter().map(|j| j.wait_us).sum::<u64>() as f64 / r.jobs.len() as f64 / 1000.0
}

pub fn crash_pct(r: &SimReport) -> f64 {
    if r.jobs.is_empty() {
        return 0.0;
    }
    100.0 * r.crashed() as f64 / r.jobs.len() as f64
}

/// Mean over kernels of `actual / solo - 1`, in percent.
pub fn slowdown_pct(r: &SimReport) -> f64 {
    let ratios: Vec<f64> = r
        .kernels
        .iter()
        .filter(|k| k.solo_us > 0)
        .map(|k| k.actual_us as f64 / k.solo_us as f64 - 1.0)
        .collect();
    if ratios.is_empty() {
        return 0.0;
    }
    100.0 * ratios.iter().sum::<f64>() / ratios.len() as f64
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn compute_metrics(report: &SimReport, baseline: &SimReport, workload: &str) -> Result<Metrics, MetricsError> {
    if report.workload_hash != baseline.workload_hash {
        return Err(MetricsError::WorkloadMismatch {
            report: report.workload_hash.clone(),
            baseline: baseline.workload_hash.clone(),
        });
    }
    if report.seed != baseline.seed {
        return Err(MetricsError::SeedMismatch { report: report.seed, baseline: baseline.seed });
    }
    let tp = throughput(report);
    let tat = avg_turnaround_ms(report);
    Ok(Metrics {
        workload: workload.to_string(),
        policy: report.policy.to_string(),
        workers: report.workers,
        seed: report.seed,
        throughput: tp,
        norm_throughput: ratio(tp, throughput(baseline)),
        avg_turnaround_ms: tat,
        speedup: ratio(avg_turnaround_ms(baseline), tat),
        crash_pct: crash_pct(report),
        slowdown_pct: slowdown_pct(report),
        makespan_ms: report.makespan_us as f64 / 1000.0,
    })
}

/// Where a comparison gets each workload from.
#[derive(Debug, Clone)]
pub enum WorkloadSource {
    /// Regenerated from the catalog for each grid seed, offset by the
    /// mix's own seed.
    Mix(MixSpec),
    /// The same jobs for every seed.
    Fixed(Workload),
}

#[derive(Debug, Clone)]
pub struct CompareSpec {
    pub workloads: Vec<(String, WorkloadSource)>,
    /// Policies with the worker count each runs with.
    pub runs: Vec<(PolicyConfig, usize)>,
    pub devices: Vec<DeviceSpec>,
    pub seeds: Vec<u64>,
    pub catalog: Catalog,
    /// Template applied to every run; policy, workers, seed and devices are
    /// overwritten per cell.
    pub base: SimConfig,
}

impl CompareSpec {
    pub fn new(devices: Vec<DeviceSpec>, catalog: Catalog) -> Self {
        let base = SimConfig::new(devices.clone(), PolicyConfig::new(PolicyKind::SingleAssignment), 1, 0);
        Self { workloads: Vec::new(), runs: Vec::new(), devices, seeds: vec![0], catalog, base }
    }

    fn workload(&self, src: &WorkloadSource, seed: u64) -> Result<Workload, MetricsError> {
        Ok(match src {
            WorkloadSource::Mix(m) => gen_workload(&MixSpec { seed: m.seed.wrapping_add(seed), ..*m }, &self.catalog)?,
            WorkloadSource::Fixed(w) => w.clone(),
        })
    }

    fn config(&self, policy: PolicyConfig, workers: usize, seed: u64) -> SimConfig {
        SimConfig { policy, workers, seed, devices: self.devices.clone(), ..self.base.clone() }
    }
}

/// Single-assignment runs use one worker per device.
pub fn baseline_config(devices: &[DeviceSpec], seed: u64, base: &SimConfig) -> SimConfig {
    SimConfig {
        policy: PolicyConfig::new(PolicyKind::SingleAssignment),
        workers: devices.len(),
        seed,
        devices: devices.to_vec(),
        ..base.clone()
    }
}

/// Runs the full grid in parallel; rows come back sorted by workload,
/// policy, workers and seed.
pub fn compare(spec: &CompareSpec) -> Result<Vec<Metrics>, MetricsError> {
    let cells: Vec<(usize, u64)> = (0..spec.workloads.len())
        .flat_map(|w| spec.seeds.iter().map(move |&s| (w, s)))
        .collect();
    let per_cell: Vec<Vec<Metrics>> = cells
        .par_iter()
        .map(|&(w, seed)| -> Result<Vec<Metrics>, MetricsError> {
            let (name, src) = &spec.workloads[w];
            let wl = spec.workload(src, seed)?;
            let baseline = run_sim(&wl, &baseline_config(&spec.devices, seed, &spec.base))?;
            spec.runs
                .par_iter()
                .map(|&(policy, workers)| {
                    let r = run_sim(&wl, &spec.config(policy, workers, seed))?;
                    compute_metrics(&r, &baseline, name)
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let mut rows: Vec<Metrics> = per_cell.into_iter().flatten().collect();
    sort_rows(&mut rows);
    Ok(rows)
}

pub fn sort_rows(rows: &mut [Metrics]) {
    rows.sort_by(|a, b| {
        (&a.workload, &a.policy, a.workers, a.seed).cmp(&(&b.workload, &b.policy, b.workers, b.seed))
    });
}

pub const CSV_HEADER: [&str; 11] = [
    "workload",
    "policy",
    "workers",
    "seed",
    "throughput",
    "norm_throughput",
    "avg_turnaround_ms",
    "speedup",
    "crash_pct",
    "slowdown_pct",
    "makespan_ms",
];

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt3(x: f64) -> String {
    format!("{x:.3}")
}

pub fn to_csv(rows: &[Metrics]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.workload.clone(),
            r.policy.clone(),
            r.workers.to_string(),
            r.seed.to_string(),
            fmt6(r.throughput),
            fmt6(r.norm_throughput),
            fmt3(r.avg_turnaround_ms),
            fmt6(r.speedup),
            fmt3(r.crash_pct),
            fmt3(r.slowdown_pct),
            fmt3(r.makespan_ms),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is utf-8")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Seeds aggregated per (workload, policy, workers).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub workload: String,
    pub policy: String,
    pub workers: usize,
    pub runs: usize,
    pub throughput: MeanStd,
    pub norm_throughput: MeanStd,
    pub avg_turnaround_ms: MeanStd,
    pub speedup: MeanStd,
    pub crash_pct: MeanStd,
    pub slowdown_pct: MeanStd,
    pub makespan_ms: MeanStd,
}

/// Expects rows sorted as [`compare`] returns them.
pub fn summarize(rows: &[Metrics]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for group in rows.chunk_by(|a, b| (&a.workload, &a.policy, a.workers) == (&b.workload, &b.policy, b.workers)) {
        let col = |f: fn(&Metrics) -> f64| MeanStd::of(&group.iter().map(f).collect::<Vec<_>>());
        out.push(SummaryRow {
            workload: group[0].workload.clone(),
            policy: group[0].policy.clone(),
            workers: group[0].workers,
            runs: group.len(),
            throughput: col(|m| m.throughput),
            norm_throughput: col(|m| m.norm_throughput),
            avg_turnaround_ms: col(|m| m.avg_turnaround_ms),
            speedup: col(|m| m.speedup),
            crash_pct: col(|m| m.crash_pct),
            slowdown_pct: col(|m| m.slowdown_pct),
            makespan_ms: col(|m| m.makespan_ms),
        });
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["workload".to_string(), "policy".into(), "workers".into(), "runs".into()];
    for m in &CSV_HEADER[4..] {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        let mut rec = vec![r.workload.clone(), r.policy.clone(), r.workers.to_string(), r.runs.to_string()];
        for (v, f) in [
            (r.throughput, fmt6 as fn(f64) -> String),
            (r.norm_throughput, fmt6),
            (r.avg_turnaround_ms, fmt3),
            (r.speedup, fmt6),
            (r.crash_pct, fmt3),
            (r.slowdown_pct, fmt3),
            (r.makespan_ms, fmt3),
        ] {
            rec.push(f(v.mean));
            rec.push(f(v.std));
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is utf-8")
}
