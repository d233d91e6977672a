//! Scheduling policies behind one decision interface, plus the pending
//! queue that is re-driven whenever resources are released.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Serialize, Serializer};

use crate::device::{DeviceError, DeviceSpec, DeviceState, Residency, Tenant};
use crate::tasks::ResourceRequest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    /// Hard memory and per-SM compute constraints, placing thread blocks the
    /// way the hardware dispatcher would.
    MgbSm,
    /// Hard memory constraint, least-loaded device by in-use warps.
    MgbWarps,
    /// One job per device for the job's lifetime.
    SingleAssignment,
    /// Up to `cg_ratio` jobs per device, round-robin, no resource checks.
    CoreToGpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub cg_ratio: u32,
}

impl PolicyConfig {
    pub const fn new(kind: PolicyKind) -> Self {
        Self { kind, cg_ratio: 1 }
    }

    pub const fn cg(ratio: u32) -> Self {
        Self { kind: PolicyKind::CoreToGpu, cg_ratio: ratio }
    }

    /// Whether the policy reserves memory before letting a task run.
    pub fn reserves_memory(&self) -> bool {
        matches!(self.kind, PolicyKind::MgbSm | PolicyKind::MgbWarps)
    }

    /// Whether devices are claimed per job rather than per GPU task.
    pub fn job_granular(&self) -> bool {
        !self.reserves_memory()
    }
}

impl fmt::Display for PolicyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PolicyKind::MgbSm => f.write_str("mgb-sm"),
            PolicyKind::MgbWarps => f.write_str("mgb-warps"),
            PolicyKind::SingleAssignment => f.write_str("sa"),
            PolicyKind::CoreToGpu => write!(f, "cg:{}", self.cg_ratio),
        }
    }
}

impl Serialize for PolicyConfig {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown policy `{0}` (expected sa, cg:<ratio>, mgb-sm or mgb-warps)")]
pub struct PolicyParseError(pub String);

impl FromStr for PolicyConfig {
    type Err = PolicyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || PolicyParseError(s.to_string());
        match s.to_ascii_lowercase().as_str() {
            "sa" => Ok(Self::new(PolicyKind::SingleAssignment)),
            "mgb-sm" | "mgb2" => Ok(Self::new(PolicyKind::MgbSm)),
            "mgb-warps" | "mgb3" | "mgb" => Ok(Self::new(PolicyKind::MgbWarps)),
            other => {
                let ratio = other.strip_prefix("cg:").ok_or_else(err)?;
                match ratio.parse::<u32>() {
                    Ok(r) if r >= 1 => Ok(Self::cg(r)),
                    _ => Err(err()),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleRequest {
    pub job_id: usize,
    pub task_id: usize,
    pub resources: ResourceRequest,
    pub arrival_us: u64,
}

impl ScheduleRequest {
    fn tenant(&self, cfg: &PolicyConfig) -> Tenant {
        if cfg.job_granular() {
            Tenant::job(self.job_id)
        } else {
            Tenant::task(self.job_id, self.task_id)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Assign(usize),
    Defer,
    Reject(String),
}

impl Outcome {
    fn label(&self) -> &'static str {
        match self {
            Outcome::Assign(_) => "assign",
            Outcome::Defer => "defer",
            Outcome::Reject(_) => "reject",
        }
    }
}

fn us_as_ms<S: Serializer>(us: &u64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(*us as f64 / 1000.0)
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecisionRecord {
    #[serde(rename = "time_ms", serialize_with = "us_as_ms")]
    pub time_us: u64,
    pub job_id: usize,
    pub task_id: usize,
    pub policy: String,
    pub outcome: &'static str,
    pub device: Option<usize>,
    pub free_mem_after: Option<u64>,
    pub in_use_warps_after: Option<u64>,
    pub mem_bytes: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    config: PolicyConfig,
    devices: Vec<DeviceState>,
    pending: VecDeque<ScheduleRequest>,
    skip_ahead: bool,
    /// Jobs holding each device (job-granular policies).
    claims: Vec<Vec<usize>>,
    job_device: BTreeMap<usize, usize>,
    cg_cursor: usize,
    log: Vec<DecisionRecord>,
}

impl Scheduler {
    pub fn new(config: PolicyConfig, specs: &[DeviceSpec], skip_ahead: bool) -> Self {
        Self {
            config,
            devices: specs.iter().cloned().map(DeviceState::new).collect(),
            pending: VecDeque::new(),
            skip_ahead,
            claims: vec![Vec::new(); specs.len()],
            job_device: BTreeMap::new(),
            cg_cursor: 0,
            log: Vec::new(),
        }
    }

    pub fn config(&self) -> PolicyConfig {
        self.config
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn device_mut(&mut self, d: usize) -> &mut DeviceState {
        &mut self.devices[d]
    }

    pub fn pending(&self) -> &VecDeque<ScheduleRequest> {
        &self.pending
    }

    pub fn log(&self) -> &[DecisionRecord] {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<DecisionRecord> {
        std::mem::take(&mut self.log)
    }

    /// Jobs currently holding device `d` under a job-granular policy.
    pub fn jobs_on(&self, d: usize) -> &[usize] {
        &self.claims[d]
    }

    pub fn device_of_job(&self, job: usize) -> Option<usize> {
        self.job_device.get(&job).copied()
    }

    /// Decides a fresh request; deferred requests join the pending queue.
    pub fn submit(&mut self, req: ScheduleRequest, now_us: u64) -> Outcome {
        let outcome = self.decide(&req);
        self.record(&req, &outcome, now_us);
        if outcome == Outcome::Defer {
            self.pending.push_back(req);
        }
        outcome
    }

    /// Re-evaluates the pending queue in FIFO order after a release. With
    /// skip-ahead, later requests may pass a deferred head.
    pub fn on_release(&mut self, now_us: u64) -> Vec<(ScheduleRequest, Outcome)> {
        let mut decisions = Vec::new();
        let mut kept = VecDeque::with_capacity(self.pending.len());
        let mut blocked = false;
        while let Some(req) = self.pending.pop_front() {
            if blocked {
                kept.push_back(req);
                continue;
            }
            let outcome = self.decide(&req);
            match outcome {
                Outcome::Defer => {
                    kept.push_back(req.clone());
                    blocked = !self.skip_ahead;
                }
                _ => self.record(&req, &outcome, now_us),
            }
            decisions.push((req, outcome));
        }
        self.pending = kept;
        decisions
    }

    /// Whether `req` would be assigned right now. Pure.
    pub fn would_admit(&self, req: &ScheduleRequest) -> bool {
        self.clone().decide(req) != Outcome::Defer
    }

    /// Whether device `d` alone, as it stands, could admit `req`.
    pub fn fits_device(&self, req: &ScheduleRequest, d: usize) -> bool {
        let dev = &self.devices[d];
        match self.config.kind {
            PolicyKind::MgbWarps => dev.free_mem_bytes() >= req.resources.mem_bytes,
            PolicyKind::MgbSm => {
                dev.free_mem_bytes() >= req.resources.mem_bytes
                    && dev.try_place_blocks(&req.resources).is_some()
            }
            PolicyKind::SingleAssignment => self.claims[d].is_empty(),
            PolicyKind::CoreToGpu => self.claims[d].len() < self.config.cg_ratio as usize,
        }
    }

    /// Drops every pending request of `job`; returns how many were dropped.
    pub fn cancel_job(&mut self, job: usize) -> usize {
        let before = self.pending.len();
        self.pending.retain(|r| r.job_id != job);
        before - self.pending.len()
    }

    /// Releases one GPU task's reservation (task-granular policies).
    pub fn release_task(&mut self, device: usize, tenant: Tenant) -> Result<Residency, DeviceError> {
        self.devices[device].release_task(tenant)
    }

    /// Ends a job's claim on its device and returns whatever memory it still
    /// holds (job-granular policies). Unknown jobs are a no-op.
    pub fn release_job(&mut self, job: usize) -> Result<Option<Residency>, DeviceError> {
        let Some(d) = self.job_device.remove(&job) else { return Ok(None) };
        self.claims[d].retain(|&j| j != job);
        self.devices[d].release_task(Tenant::job(job)).map(Some)
    }

    fn record(&mut self, req: &ScheduleRequest, outcome: &Outcome, now_us: u64) {
        let dev = match outcome {
            Outcome::Assign(d) => Some(*d),
            _ => None,
        };
        self.log.push(DecisionRecord {
            time_us: now_us,
            job_id: req.job_id,
            task_id: req.task_id,
            policy: self.config.to_string(),
            outcome: outcome.label(),
            device: dev,
            free_mem_after: dev.map(|d| self.devices[d].free_mem_bytes()),
            in_use_warps_after: dev.map(|d| self.devices[d].in_use_warps()),
            mem_bytes: req.resources.mem_bytes,
            reason: match outcome {
                Outcome::Reject(r) => Some(r.clone()),
                _ => None,
            },
        });
    }

    fn decide(&mut self, req: &ScheduleRequest) -> Outcome {
        match self.config.kind {
            PolicyKind::MgbSm => self.sched_mgb_sm(req),
            PolicyKind::MgbWarps => self.sched_mgb_warps(req),
            PolicyKind::SingleAssignment => self.sched_job_level(req, 1, false),
            PolicyKind::CoreToGpu => self.sched_job_level(req, self.config.cg_ratio as usize, true),
        }
    }

    fn exceeds_every_device(&self, req: &ScheduleRequest) -> Option<Outcome> {
        let largest = self.devices.iter().map(|d| d.spec.mem_bytes).max().unwrap_or(0);
        (req.resources.mem_bytes > largest).then(|| {
            Outcome::Reject(format!(
                "requests {} bytes, more than the largest device ({largest})",
                req.resources.mem_bytes
            ))
        })
    }

    fn sched_mgb_sm(&mut self, req: &ScheduleRequest) -> Outcome {
        if let Some(r) = self.exceeds_every_device(req) {
            return r;
        }
        let never_fits = self.devices.iter().all(|d| {
            d.spec.mem_bytes < req.resources.mem_bytes
                || DeviceState::new(d.spec.clone()).try_place_blocks(&req.resources).is_none()
        });
        if never_fits {
            return Outcome::Reject(format!(
                "{} thread blocks of {} warps fit on no empty device",
                req.resources.thread_blocks, req.resources.warps_per_block
            ));
        }
        let tenant = req.tenant(&self.config);
        for (i, dev) in self.devices.iter_mut().enumerate() {
            if dev.free_mem_bytes() < req.resources.mem_bytes {
                continue;
            }
            let Some(plan) = dev.try_place_blocks(&req.resources) else { continue };
            dev.admit(tenant, req.resources.mem_bytes, req.resources.total_warps)
                .expect("memory checked above");
            dev.commit_placement(&plan, tenant).expect("plan computed on this state");
            return Outcome::Assign(i);
        }
        Outcome::Defer
    }

    fn sched_mgb_warps(&mut self, req: &ScheduleRequest) -> Outcome {
        if let Some(r) = self.exceeds_every_device(req) {
            return r;
        }
        // Least-loaded memory-feasible device; ties go to the lowest index.
        let mut best: Option<(u64, usize)> = None;
        for (i, dev) in self.devices.iter().enumerate() {
            if dev.free_mem_bytes() < req.resources.mem_bytes {
                continue;
            }
            if best.is_none_or(|(w, _)| dev.in_use_warps() < w) {
                best = Some((dev.in_use_warps(), i));
            }
        }
        let Some((_, i)) = best else { return Outcome::Defer };
        self.devices[i]
            .admit(req.tenant(&self.config), req.resources.mem_bytes, req.resources.total_warps)
            .expect("memory checked above");
        Outcome::Assign(i)
    }

    fn sched_job_level(&mut self, req: &ScheduleRequest, limit: usize, round_robin: bool) -> Outcome {
        if let Some(&d) = self.job_device.get(&req.job_id) {
            return Outcome::Assign(d);
        }
        let n = self.devices.len();
        let start = if round_robin { self.cg_cursor } else { 0 };
        let Some(d) = (0..n).map(|k| (start + k) % n).find(|&d| self.claims[d].len() < limit) else {
            return Outcome::Defer;
        };
        if round_robin {
            self.cg_cursor = (d + 1) % n;
        }
        self.claims[d].push(req.job_id);
        self.job_device.insert(req.job_id, d);
        self.devices[d].admit(Tenant::job(req.job_id), 0, 0).expect("new job tenant");
        Outcome::Assign(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::GIB;

    fn req(job: usize, mem_gb: u64, tbs: u64, threads: u64) -> ScheduleRequest {
        let wpb = threads.div_ceil(32) as u32;
        ScheduleRequest {
            job_id: job,
            task_id: 0,
            resources: ResourceRequest {
                mem_bytes: mem_gb * GIB,
                heap_limit_bytes: 0,
                thread_blocks: tbs,
                threads_per_block: threads,
                warps_per_block: wpb,
                total_warps: tbs * u64::from(wpb),
                ..Default::default()
            },
            arrival_us: 0,
        }
    }

    fn two_p100(kind: PolicyKind) -> Scheduler {
        Scheduler::new(PolicyConfig::new(kind), &[DeviceSpec::p100(), DeviceSpec::p100()], true)
    }

    #[test]
    fn policy_strings_round_trip() {
        for s in ["sa", "cg:6", "mgb-sm", "mgb-warps"] {
            assert_eq!(s.parse::<PolicyConfig>().unwrap().to_string(), s);
        }
        assert!("cg:0".parse::<PolicyConfig>().is_err());
        assert!("fifo".parse::<PolicyConfig>().is_err());
    }

    #[test]
    fn mgb_sm_first_fit_and_memory_skip() {
        let mut s = two_p100(PolicyKind::MgbSm);
        assert_eq!(s.submit(req(0, 9, 56, 32), 0), Outcome::Assign(0));
        assert_eq!(s.submit(req(1, 9, 56, 32), 0), Outcome::Assign(1));
        assert_eq!(s.submit(req(2, 20, 1, 32), 0), Outcome::Reject(
            format!("requests {} bytes, more than the largest device ({})", 20 * GIB, 16 * GIB)
        ));
    }

    #[test]
    fn mgb_sm_defers_on_compute_then_admits_after_release() {
        let mut s = two_p100(PolicyKind::MgbSm);
        // 112 blocks of 1024 threads fill both SM slots on all 56 SMs.
        assert_eq!(s.submit(req(0, 1, 112, 1024), 0), Outcome::Assign(0));
        assert_eq!(s.submit(req(1, 1, 112, 1024), 0), Outcome::Assign(1));
        assert_eq!(s.submit(req(2, 1, 1, 32), 0), Outcome::Defer);
        assert!(s.on_release(1).iter().all(|(_, o)| *o == Outcome::Defer));
        s.release_task(1, Tenant::task(1, 0)).unwrap();
        let d = s.on_release(2);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].1, Outcome::Assign(1));
        assert!(s.pending().is_empty());
        let too_wide = req(3, 1, 113, 1024);
        assert!(matches!(s.submit(too_wide, 3), Outcome::Reject(_)));
    }

    #[test]
    fn mgb_warps_least_loaded() {
        let mut s = two_p100(PolicyKind::MgbWarps);
        assert_eq!(s.submit(req(0, 1, 500, 32), 0), Outcome::Assign(0));
        assert_eq!(s.submit(req(1, 1, 200, 32), 0), Outcome::Assign(1));
        assert_eq!(s.submit(req(2, 1, 1, 32), 0), Outcome::Assign(1));

        let mut s = two_p100(PolicyKind::MgbWarps);
        assert_eq!(s.submit(req(0, 1, 1, 32), 0), Outcome::Assign(0));
        let mut s = two_p100(PolicyKind::MgbWarps);
        assert_eq!(s.submit(req(0, 10, 1, 32), 0), Outcome::Assign(0));
        assert_eq!(s.submit(req(1, 1, 100_000, 1024), 0), Outcome::Assign(1));
        // Device 0 is lighter but cannot hold 10 GB more.
        assert_eq!(s.submit(req(2, 10, 1, 32), 0), Outcome::Assign(1));
    }

    #[test]
    fn skip_ahead_versus_strict_fifo() {
        for skip in [true, false] {
            let mut s = Scheduler::new(PolicyConfig::new(PolicyKind::MgbWarps), &[DeviceSpec::p100()], skip);
            assert_eq!(s.submit(req(0, 8, 1, 32), 0), Outcome::Assign(0));
            assert_eq!(s.submit(req(9, 8, 1, 32), 0), Outcome::Assign(0));
            assert_eq!(s.submit(req(1, 9, 1, 32), 0), Outcome::Defer);
            assert_eq!(s.submit(req(2, 2, 1, 32), 0), Outcome::Defer);
            s.release_task(0, Tenant::task(0, 0)).unwrap();
            let outcomes: Vec<Outcome> = s.on_release(1).into_iter().map(|(_, o)| o).collect();
            if skip {
                assert_eq!(outcomes, [Outcome::Defer, Outcome::Assign(0)]);
            } else {
                assert_eq!(outcomes, [Outcome::Defer]);
            }
        }
        let mut s = two_p100(PolicyKind::MgbWarps);
        assert!(s.on_release(0).is_empty());
    }

    #[test]
    fn single_assignment_is_exclusive() {
        let mut s = two_p100(PolicyKind::SingleAssignment);
        assert_eq!(s.submit(req(1, 1, 1, 32), 0), Outcome::Assign(0));
        assert_eq!(s.submit(req(2, 1, 1, 32), 0), Outcome::Assign(1));
        assert_eq!(s.submit(req(3, 1, 1, 32), 0), Outcome::Defer);
        // Later tasks of a job follow it.
        assert_eq!(s.submit(ScheduleRequest { task_id: 1, ..req(1, 30, 1, 32) }, 0), Outcome::Assign(0));
        s.release_job(2).unwrap();
        assert_eq!(s.on_release(1)[0].1, Outcome::Assign(1));
    }

    #[test]
    fn core_to_gpu_ratio() {
        let mut s = Scheduler::new(PolicyConfig::cg(6), &[DeviceSpec::p100(), DeviceSpec::p100()], true);
        let devs: Vec<Outcome> = (0..12).map(|j| s.submit(req(j, 9, 1, 32), 0)).collect();
        assert_eq!(devs.iter().filter(|o| **o == Outcome::Assign(0)).count(), 6);
        assert_eq!(devs.iter().filter(|o| **o == Outcome::Assign(1)).count(), 6);
        assert_eq!(devs[0], Outcome::Assign(0));
        assert_eq!(devs[1], Outcome::Assign(1));
        assert_eq!(s.submit(req(12, 1, 1, 32), 0), Outcome::Defer);
    }

    #[test]
    fn decision_log_serializes() {
        let mut s = two_p100(PolicyKind::MgbWarps);
        s.submit(req(0, 1, 1, 32), 1500);
        let line = serde_json::to_string(&s.log()[0]).unwrap();
        assert_eq!(
            line,
            format!(
                r#"{{"time_ms":1.5,"job_id":0,"task_id":0,"policy":"mgb-warps","outcome":"assign","device":0,"free_mem_after":{},"in_use_warps_after":1,"mem_bytes":{}}}"#,
                15 * GIB,
                GIB
            )
        );
    }
}
