//! Discrete-event simulation of a worker pool running trace programs on a
//! shared multi-GPU node.

mod check;
mod engine;
pub mod plan;

use serde::{Serialize, Serializer};

use crate::device::DeviceSpec;
use crate::sched::{DecisionRecord, PolicyConfig};
use crate::tasks::AnalysisError;
use crate::trace::{JobClass, WalkError};

pub use check::InvariantChecker;
pub use engine::{run_sim, run_sim_observed, GpuLoad, Observer, SimView};

/// How co-running kernels on one device slow each other down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Interference {
    /// Every kernel progresses at `min(1, warp capacity / active warps)`.
    #[default]
    ProcessorSharing,
    None,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub workers: usize,
    pub seed: u64,
    pub devices: Vec<DeviceSpec>,
    pub policy: PolicyConfig,
    pub interference: Interference,
    pub skip_ahead: bool,
    /// Host-side cost of copies and memsets, in nanoseconds per byte.
    pub host_ns_per_byte: u64,
    /// Route every memory op through the lazy runtime.
    pub force_lazy: bool,
    /// Bound on blocks visited by one job's path.
    pub max_block_visits: usize,
}

impl SimConfig {
    pub fn new(devices: Vec<DeviceSpec>, policy: PolicyConfig, workers: usize, seed: u64) -> Self {
        Self {
            workers,
            seed,
            devices,
            policy,
            interference: Interference::ProcessorSharing,
            skip_ahead: true,
            host_ns_per_byte: 0,
            force_lazy: false,
            max_block_visits: 100_000,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.workers == 0 {
            return Err(SimError::Config("at least one worker is required".into()));
        }
        if self.devices.is_empty() {
            return Err(SimError::Config("no devices".into()));
        }
        for d in &self.devices {
            d.validate().map_err(|e| SimError::Config(e.to_string()))?;
        }
        if self.policy.kind == crate::sched::PolicyKind::CoreToGpu && self.policy.cg_ratio == 0 {
            return Err(SimError::Config("cg ratio must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("job {job}: {source}")]
    Analysis { job: usize, source: AnalysisError },
    #[error("job {job}: {source}")]
    Walk { job: usize, source: WalkError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Blocked,
    Done,
    Crashed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CrashKind {
    /// An allocation found the device full.
    Oom,
    /// The scheduler refused the request outright.
    Rejected,
    /// Every remaining job was waiting on memory held by the others.
    Deadlock,
    /// The program used memory it never allocated.
    Fault,
}

pub(crate) fn ms<S: Serializer>(us: &u64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(*us as f64 / 1000.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobRecord {
    pub job_id: usize,
    pub template: Option<String>,
    pub class: Option<JobClass>,
    pub state: JobState,
    pub device: Option<usize>,
    #[serde(rename = "start_ms", serialize_with = "ms")]
    pub start_us: u64,
    /// Completion or crash time.
    #[serde(rename = "end_ms", serialize_with = "ms")]
    pub end_us: u64,
    /// Time queued for a worker plus time blocked on the scheduler.
    #[serde(rename = "wait_ms", serialize_with = "ms")]
    pub wait_us: u64,
}

impl JobRecord {
    /// Arrival is at time zero for batch workloads.
    pub fn turnaround_us(&self) -> u64 {
        self.end_us
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelRecord {
    pub job_id: usize,
    pub task_id: Option<usize>,
    pub kernel: String,
    pub device: usize,
    #[serde(rename = "start_ms", serialize_with = "ms")]
    pub start_us: u64,
    #[serde(rename = "solo_ms", serialize_with = "ms")]
    pub solo_us: u64,
    #[serde(rename = "actual_ms", serialize_with = "ms")]
    pub actual_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrashRecord {
    pub job_id: usize,
    #[serde(rename = "time_ms", serialize_with = "ms")]
    pub time_us: u64,
    pub kind: CrashKind,
    pub device: Option<usize>,
    pub requested_bytes: u64,
    pub free_bytes: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub workload_hash: String,
    pub policy: PolicyConfig,
    pub devices: Vec<String>,
    pub workers: usize,
    pub seed: u64,
    pub interference: Interference,
    #[serde(rename = "makespan_ms", serialize_with = "ms")]
    pub makespan_us: u64,
    pub jobs: Vec<JobRecord>,
    pub kernels: Vec<KernelRecord>,
    pub crashes: Vec<CrashRecord>,
    pub decisions: Vec<DecisionRecord>,
}

impl SimReport {
    pub fn completed(&self) -> usize {
        self.jobs.iter().filter(|j| j.state == JobState::Done).count()
    }

    pub fn crashed(&self) -> usize {
        self.jobs.iter().filter(|j| j.state == JobState::Crashed).count()
    }

    pub fn oom_count(&self) -> usize {
        self.crashes.iter().filter(|c| c.kind == CrashKind::Oom).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
