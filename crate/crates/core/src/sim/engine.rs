use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::plan::{compile_steps, Step};
use super::{
    CrashKind, CrashRecord, Interference, JobRecord, JobState, KernelRecord, SimConfig, SimError, SimReport,
};
use crate::device::{DeviceError, Tenant};
use crate::lazy::LazyState;
use crate::sched::{Outcome, ScheduleRequest, Scheduler};
use crate::tasks::{analyze_program, AnalyzedProgram, ResourceRequest};
use crate::trace::{Op, Symbol};
use crate::workload::Workload;
use crate::DEFAULT_HEAP_BYTES;

/// Ties at one instant resolve by kind in this order, then by posting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    KernelEnd { device: usize, gen: u64 },
    TaskEnd { job: usize, task: usize },
    OomCrash { job: usize },
    JobEnd { job: usize },
    ReleaseRepack,
    TaskBegin { job: usize },
    HostOpEnd { job: usize },
    WorkerPull { worker: usize },
}

impl Event {
    fn priority(&self) -> u8 {
        match self {
            Event::KernelEnd { .. } => 0,
            Event::TaskEnd { .. } => 1,
            Event::OomCrash { .. } => 2,
            Event::JobEnd { .. } => 3,
            Event::ReleaseRepack => 4,
            Event::TaskBegin { .. } => 5,
            Event::HostOpEnd { .. } => 6,
            Event::WorkerPull { .. } => 7,
        }
    }
}

#[derive(Debug, Clone)]
struct RunningKernel {
    job: usize,
    task: Option<usize>,
    kernel: String,
    warps: u64,
    remaining: f64,
    start_us: u64,
    solo_us: u64,
}

/// Kernels executing on one device.
#[derive(Debug, Clone, Default)]
pub struct GpuLoad {
    running: Vec<RunningKernel>,
    last_us: u64,
    gen: u64,
}

impl GpuLoad {
    pub fn running(&self) -> usize {
        self.running.len()
    }

    pub fn active_warps(&self) -> u64 {
        self.running.iter().map(|k| k.warps).sum()
    }

    fn rate(&self, capacity: u64, model: Interference) -> f64 {
        let active = self.active_warps();
        match model {
            Interference::None => 1.0,
            Interference::ProcessorSharing if active <= capacity => 1.0,
            Interference::ProcessorSharing => capacity as f64 / active as f64,
        }
    }

    fn advance(&mut self, now: u64, capacity: u64, model: Interference) {
        if now > self.last_us && !self.running.is_empty() {
            let done = (now - self.last_us) as f64 * self.rate(capacity, model);
            for k in &mut self.running {
                k.remaining -= done;
            }
        }
        self.last_us = now;
    }
}

/// What a simulation observer can see between events.
pub struct SimView<'a> {
    pub now_us: u64,
    pub scheduler: &'a Scheduler,
    pub gpus: &'a [GpuLoad],
}

pub trait Observer {
    fn on_event(&mut self, _view: &SimView<'_>) {}
    /// Called once all events of an instant have been processed.
    fn on_instant_end(&mut self, _view: &SimView<'_>) {}
    fn on_request(&mut self, _job_id: usize, _task: usize, _req: &ResourceRequest) {}
    /// Whether [`on_lazy_prepare`](Self::on_lazy_prepare) should be fed.
    fn wants_lazy_dumps(&self) -> bool {
        false
    }
    /// The lazy queues of a job just before a launch is prepared.
    fn on_lazy_prepare(&mut self, _job_id: usize, _kernel: &str, _queues: &str) {}
}

impl Observer for () {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Wait {
    None,
    Claim,
    Request,
    Growth { device: usize, tenant: Tenant, bytes: u64 },
    Kernel,
    Host,
    TaskEnd,
    Crashing,
}

#[derive(Debug, Clone, Default)]
struct TaskRt {
    device: Option<usize>,
    reserved: u64,
    used: u64,
}

struct JobRt {
    job_id: usize,
    analysis: Arc<AnalyzedProgram>,
    steps: Vec<Step>,
    pc: usize,
    replay: VecDeque<(Option<usize>, Op)>,
    state: JobState,
    wait: Wait,
    worker: Option<usize>,
    start_us: u64,
    end_us: u64,
    wait_us: u64,
    blocked_since: u64,
    tasks: Vec<TaskRt>,
    lazy: LazyState,
    /// Bytes each symbol holds on its device.
    live: BTreeMap<Symbol, u64>,
    heap: u64,
    job_device: Option<usize>,
    heap_charged: bool,
}

enum Flow {
    Continue,
    /// The op finished but the job waits this long before going on.
    Delay(u64),
    Block,
    /// Run the same step again.
    Retry,
    Crashed,
}

struct Engine<'w, 'o> {
    cfg: &'w SimConfig,
    workload: &'w Workload,
    sched: Scheduler,
    gpus: Vec<GpuLoad>,
    jobs: Vec<JobRt>,
    by_id: BTreeMap<usize, usize>,
    queue: VecDeque<usize>,
    events: BinaryHeap<Reverse<(u64, u8, u64, Event)>>,
    seq: u64,
    now: u64,
    kernels: Vec<KernelRecord>,
    crashes: Vec<CrashRecord>,
    observer: &'o mut dyn Observer,
}

/// Runs `workload` to completion under `cfg`.
pub fn run_sim(workload: &Workload, cfg: &SimConfig) -> Result<SimReport, SimError> {
    run_sim_observed(workload, cfg, &mut ())
}

/// [`run_sim`] with a hook called after every event.
pub fn run_sim_observed(
    workload: &Workload,
    cfg: &SimConfig,
    observer: &mut dyn Observer,
) -> Result<SimReport, SimError> {
    cfg.validate()?;
    if workload.is_empty() {
        return Err(SimError::Config("workload has no jobs".into()));
    }
    let mut cache: HashMap<&str, Arc<AnalyzedProgram>> = HashMap::new();
    let mut jobs = Vec::with_capacity(workload.len());
    let mut by_id = BTreeMap::new();
    for (idx, wj) in workload.jobs.iter().enumerate() {
        if by_id.insert(wj.job_id, idx).is_some() {
            return Err(SimError::Config(format!("duplicate job_id {}", wj.job_id)));
        }
        let analysis = match cache.get(wj.trace.as_str()) {
            Some(a) => a.clone(),
            None => {
                let a = Arc::new(
                    analyze_program(&wj.program, cfg.force_lazy)
                        .map_err(|source| SimError::Analysis { job: wj.job_id, source })?,
                );
                cache.insert(wj.trace.as_str(), a.clone());
                a
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(wj.job_id as u64);
        let steps = compile_steps(&analysis, &mut rng, cfg.max_block_visits)
            .map_err(|source| SimError::Walk { job: wj.job_id, source })?;
        let n_tasks = analysis.tasks.len();
        jobs.push(JobRt {
            job_id: wj.job_id,
            analysis,
            steps,
            pc: 0,
            replay: VecDeque::new(),
            state: JobState::Queued,
            wait: Wait::None,
            worker: None,
            start_us: 0,
            end_us: 0,
            wait_us: 0,
            blocked_since: 0,
            tasks: vec![TaskRt::default(); n_tasks],
            lazy: LazyState::new(),
            live: BTreeMap::new(),
            heap: DEFAULT_HEAP_BYTES,
            job_device: None,
            heap_charged: false,
        });
    }
    let mut e = Engine {
        cfg,
        workload,
        sched: Scheduler::new(cfg.policy, &cfg.devices, cfg.skip_ahead),
        gpus: vec![GpuLoad::default(); cfg.devices.len()],
        jobs,
        by_id,
        queue: (0..workload.len()).collect(),
        events: BinaryHeap::new(),
        seq: 0,
        now: 0,
        kernels: Vec::new(),
        crashes: Vec::new(),
        observer,
    };
    for w in 0..cfg.workers {
        e.post(0, Event::WorkerPull { worker: w });
    }
    e.run();
    Ok(e.report())
}

impl Engine<'_, '_> {
    fn post(&mut self, at: u64, ev: Event) {
        self.seq += 1;
        self.events.push(Reverse((at, ev.priority(), self.seq, ev)));
    }

    fn mgb(&self) -> bool {
        !self.cfg.policy.job_granular()
    }

    fn run(&mut self) {
        loop {
            while let Some(Reverse((t, _, _, ev))) = self.events.pop() {
                self.now = t;
                self.handle(ev);
                let view = SimView { now_us: self.now, scheduler: &self.sched, gpus: &self.gpus };
                self.observer.on_event(&view);
                let instant_over = self.events.peek().is_none_or(|Reverse((next, ..))| *next > t);
                if instant_over {
                    let view = SimView { now_us: self.now, scheduler: &self.sched, gpus: &self.gpus };
                    self.observer.on_instant_end(&view);
                }
            }
            // Nothing left to happen: jobs still waiting can never proceed.
            let stuck = (0..self.jobs.len()).find(|&j| {
                matches!(self.jobs[j].wait, Wait::Growth { .. } | Wait::Request | Wait::Claim)
                    && self.jobs[j].state == JobState::Blocked
            });
            match stuck {
                Some(j) => {
                    let (device, requested) = match self.jobs[j].wait {
                        Wait::Growth { device, bytes, .. } => (Some(device), bytes),
                        _ => (None, 0),
                    };
                    let free = device.map_or(0, |d| self.sched.devices()[d].free_mem_bytes());
                    self.crash(j, CrashKind::Deadlock, device, requested, free, "waits on memory held by blocked jobs".into());
                }
                None => break,
            }
        }
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::WorkerPull { worker } => self.worker_pull(worker),
            Event::KernelEnd { device, gen } => self.kernel_end(device, gen),
            Event::TaskEnd { job, task } => self.task_end(job, task),
            Event::JobEnd { job } => self.job_end(job),
            Event::OomCrash { job } => self.finish_crash(job),
            Event::ReleaseRepack => self.repack(),
            Event::TaskBegin { job } | Event::HostOpEnd { job } => self.resume(job),
        }
    }

    fn block(&mut self, j: usize, wait: Wait) {
        let job = &mut self.jobs[j];
        job.wait = wait;
        if matches!(wait, Wait::Claim | Wait::Request | Wait::Growth { .. }) {
            job.state = JobState::Blocked;
            job.blocked_since = self.now;
        }
    }

    fn resume(&mut self, j: usize) {
        let job = &mut self.jobs[j];
        if matches!(job.state, JobState::Done | JobState::Crashed) || job.wait == Wait::Crashing {
            return;
        }
        if job.state == JobState::Blocked {
            job.wait_us += self.now - job.blocked_since;
            job.state = JobState::Running;
        }
        job.wait = Wait::None;
        self.run_job(j);
    }

    fn worker_pull(&mut self, worker: usize) {
        let Some(j) = self.queue.pop_front() else { return };
        let now = self.now;
        let job = &mut self.jobs[j];
        job.state = JobState::Running;
        job.worker = Some(worker);
        job.start_us = now;
        job.wait_us += now;
        let job_id = job.job_id;
        if self.mgb() {
            self.run_job(j);
            return;
        }
        let req = ScheduleRequest {
            job_id,
            task_id: 0,
            resources: ResourceRequest::default(),
            arrival_us: now,
        };
        match self.sched.submit(req, now) {
            Outcome::Assign(d) => {
                self.jobs[j].job_device = Some(d);
                self.run_job(j);
            }
            Outcome::Defer => self.block(j, Wait::Claim),
            Outcome::Reject(r) => self.crash(j, CrashKind::Rejected, None, 0, 0, r),
        }
    }

    fn run_job(&mut self, j: usize) {
        loop {
            if let Some((task, op)) = self.jobs[j].replay.front().cloned() {
                match self.device_op(j, task, &op) {
                    Flow::Continue => {
                        self.jobs[j].replay.pop_front();
                    }
                    Flow::Delay(us) => {
                        self.jobs[j].replay.pop_front();
                        self.jobs[j].wait = Wait::Host;
                        self.post(self.now + us, Event::HostOpEnd { job: j });
                        return;
                    }
                    Flow::Block | Flow::Crashed | Flow::Retry => return,
                }
                continue;
            }
            let job = &self.jobs[j];
            let Some(&step) = job.steps.get(job.pc) else {
                self.post(self.now, Event::JobEnd { job: j });
                self.jobs[j].wait = Wait::TaskEnd;
                return;
            };
            match step {
                Step::Probe { task } => {
                    self.jobs[j].pc += 1;
                    if !self.mgb() {
                        continue;
                    }
                    let req = self.jobs[j].analysis.tasks[task].resources;
                    if !self.request(j, task, req) {
                        return;
                    }
                }
                Step::TaskEnd { task } => {
                    self.jobs[j].pc += 1;
                    if !self.mgb() {
                        continue;
                    }
                    self.jobs[j].wait = Wait::TaskEnd;
                    self.post(self.now, Event::TaskEnd { job: j, task });
                    return;
                }
                Step::Op { pos, task } => {
                    let op = job.analysis.function().blocks[pos.block].ops[pos.index].op.clone();
                    match self.exec(j, task, op) {
                        Flow::Continue => self.jobs[j].pc += 1,
                        Flow::Delay(us) => {
                            self.jobs[j].pc += 1;
                            self.jobs[j].wait = Wait::Host;
                            self.post(self.now + us, Event::HostOpEnd { job: j });
                            return;
                        }
                        Flow::Retry => {}
                        Flow::Block | Flow::Crashed => return,
                    }
                }
            }
        }
    }

    /// Submits a task's request. True when the job may go on right away.
    fn request(&mut self, j: usize, task: usize, req: ResourceRequest) -> bool {
        let job_id = self.jobs[j].job_id;
        self.observer.on_request(job_id, task, &req);
        let r = ScheduleRequest { job_id, task_id: task, resources: req, arrival_us: self.now };
        match self.sched.submit(r, self.now) {
            Outcome::Assign(d) => {
                self.admit(j, task, d, &req);
                true
            }
            Outcome::Defer => {
                self.block(j, Wait::Request);
                false
            }
            Outcome::Reject(reason) => {
                self.crash(j, CrashKind::Rejected, None, req.mem_bytes, 0, reason);
                false
            }
        }
    }

    /// Records a placement and queues the task's deferred ops for replay.
    fn admit(&mut self, j: usize, task: usize, d: usize, req: &ResourceRequest) {
        let job = &mut self.jobs[j];
        job.tasks[task] = TaskRt { device: Some(d), reserved: req.mem_bytes, used: req.heap_limit_bytes };
        let analysis = job.analysis.clone();
        let syms = analysis.tasks[task].mem_objs.iter().map(String::as_str);
        for (_, op) in job.lazy.replay(syms, d) {
            job.replay.push_back((Some(task), op));
        }
    }

    fn exec(&mut self, j: usize, task: Option<usize>, op: Op) -> Flow {
        if !self.mgb() {
            return self.device_op(j, task, &op);
        }
        match &op {
            Op::SetHeapLimit { bytes } => {
                let job = &mut self.jobs[j];
                job.heap = *bytes;
                job.lazy.set_heap_limit(*bytes);
                Flow::Continue
            }
            Op::Launch(l) => {
                let t = task.expect("launches belong to a task");
                if self.jobs[j].tasks[t].device.is_some() {
                    return self.device_op(j, task, &op);
                }
                if self.observer.wants_lazy_dumps() {
                    let job = &self.jobs[j];
                    self.observer.on_lazy_prepare(job.job_id, &l.kernel, &job.lazy.dump_queues());
                }
                let job = &self.jobs[j];
                let gt = &job.analysis.tasks[t];
                let base = ResourceRequest { mem_bytes: job.heap, heap_limit_bytes: job.heap, ..gt.resources };
                let extra = gt.mem_objs.iter().map(String::as_str);
                match job.lazy.kernel_launch_prepare(l, extra, Some(&base)) {
                    Ok(req) => {
                        if self.request(j, t, req) {
                            // Replayed ops run first; the launch is retried after them.
                            Flow::Retry
                        } else {
                            Flow::Block
                        }
                    }
                    Err(e) => {
                        self.crash(j, CrashKind::Fault, None, 0, 0, e.to_string());
                        Flow::Crashed
                    }
                }
            }
            Op::Call { .. } => Flow::Continue,
            _ => {
                let sym = op.symbol().expect("memory ops name a symbol");
                let bound = task.and_then(|t| self.jobs[j].tasks[t].device).is_some();
                if bound {
                    return self.device_op(j, task, &op);
                }
                let job = &mut self.jobs[j];
                match &op {
                    Op::Malloc { sym, bytes } => {
                        job.lazy.lazy_alloc(sym, *bytes);
                    }
                    _ => {
                        if let Some(addr) = job.lazy.address_of(sym).cloned() {
                            let _ = job.lazy.record_op(&addr, op.clone());
                        }
                    }
                }
                Flow::Continue
            }
        }
    }

    /// Where `j` keeps the memory of `task` and which tenant pays for it.
    fn placement(&self, j: usize, task: Option<usize>) -> Option<(usize, Tenant)> {
        let job = &self.jobs[j];
        if self.mgb() {
            let t = task?;
            job.tasks[t].device.map(|d| (d, Tenant::task(job.job_id, t)))
        } else {
            job.job_device.map(|d| (d, Tenant::job(job.job_id)))
        }
    }

    /// Charges `bytes` to the holder of `task`'s memory.
    fn charge(&mut self, j: usize, task: Option<usize>, bytes: u64) -> Flow {
        let Some((d, tenant)) = self.placement(j, task) else { return Flow::Continue };
        if self.mgb() {
            let t = task.expect("placed tasks");
            let rt = &self.jobs[j].tasks[t];
            let need = (rt.used + bytes).saturating_sub(rt.reserved);
            if need > 0 {
                match self.sched.device_mut(d).grow(tenant, need) {
                    Ok(()) => self.jobs[j].tasks[t].reserved += need,
                    Err(_) => {
                        self.block(j, Wait::Growth { device: d, tenant, bytes: need });
                        return Flow::Block;
                    }
                }
            }
            self.jobs[j].tasks[t].used += bytes;
            return Flow::Continue;
        }
        match self.sched.device_mut(d).grow(tenant, bytes) {
            Ok(()) => Flow::Continue,
            Err(err) => {
                let free = match err {
                    DeviceError::InsufficientMemory { free, .. } => free,
                    _ => self.sched.devices()[d].free_mem_bytes(),
                };
                self.oom(j, d, bytes, free);
                Flow::Crashed
            }
        }
    }

    fn device_op(&mut self, j: usize, task: Option<usize>, op: &Op) -> Flow {
        match op {
            Op::Malloc { sym, bytes } => {
                let f = self.charge(j, task, *bytes);
                if matches!(f, Flow::Continue) {
                    *self.jobs[j].live.entry(sym.clone()).or_default() += bytes;
                }
                f
            }
            Op::Free { sym } => {
                let bytes = self.jobs[j].live.remove(sym).unwrap_or(0);
                if let Some((d, tenant)) = self.placement(j, task) {
                    if self.mgb() {
                        let rt = &mut self.jobs[j].tasks[task.expect("placed tasks")];
                        rt.used = rt.used.saturating_sub(bytes);
                    } else {
                        let _ = self.sched.device_mut(d).shrink(tenant, bytes);
                    }
                }
                Flow::Continue
            }
            Op::MemcpyH2D { bytes, .. } | Op::MemcpyD2H { bytes, .. } | Op::Memset { bytes, .. } => {
                let us = (bytes.saturating_mul(self.cfg.host_ns_per_byte)).div_ceil(1000);
                if us > 0 {
                    Flow::Delay(us)
                } else {
                    Flow::Continue
                }
            }
            Op::SetHeapLimit { bytes } => {
                if !self.jobs[j].heap_charged {
                    self.jobs[j].heap = *bytes;
                }
                Flow::Continue
            }
            Op::Call { .. } => Flow::Continue,
            Op::Launch(l) => {
                if !self.mgb() && !self.jobs[j].heap_charged {
                    let heap = self.jobs[j].heap;
                    if let Flow::Crashed = self.charge(j, task, heap) {
                        return Flow::Crashed;
                    }
                    self.jobs[j].heap_charged = true;
                }
                let Some((d, _)) = self.placement(j, task) else {
                    let reason = format!("launch of `{}` outside any placed task", l.kernel);
                    self.crash(j, CrashKind::Fault, None, 0, 0, reason);
                    return Flow::Crashed;
                };
                self.start_kernel(d, j, task, l.kernel.clone(), l.total_warps(), l.duration_us);
                self.jobs[j].pc += 1;
                self.jobs[j].wait = Wait::Kernel;
                Flow::Block
            }
        }
    }

    fn capacity(&self, d: usize) -> u64 {
        self.cfg.devices[d].warp_capacity()
    }

    fn start_kernel(&mut self, d: usize, j: usize, task: Option<usize>, kernel: String, warps: u64, solo: u64) {
        let (cap, model) = (self.capacity(d), self.cfg.interference);
        self.gpus[d].advance(self.now, cap, model);
        self.gpus[d].running.push(RunningKernel {
            job: j,
            task,
            kernel,
            warps,
            remaining: solo as f64,
            start_us: self.now,
            solo_us: solo,
        });
        self.reschedule(d);
    }

    fn reschedule(&mut self, d: usize) {
        let (cap, model) = (self.capacity(d), self.cfg.interference);
        let g = &mut self.gpus[d];
        g.gen += 1;
        if g.running.is_empty() {
            return;
        }
        let rate = g.rate(cap, model);
        let soonest = g.running.iter().map(|k| k.remaining).fold(f64::INFINITY, f64::min);
        let dt = ((soonest / rate) - 1e-9).ceil().max(0.0) as u64;
        let gen = g.gen;
        self.post(self.now + dt, Event::KernelEnd { device: d, gen });
    }

    fn kernel_end(&mut self, d: usize, gen: u64) {
        if self.gpus[d].gen != gen {
            return;
        }
        let (cap, model) = (self.capacity(d), self.cfg.interference);
        self.gpus[d].advance(self.now, cap, model);
        let (done, left): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.gpus[d].running).into_iter().partition(|k| k.remaining <= 1e-6);
        self.gpus[d].running = left;
        for k in done {
            self.kernels.push(KernelRecord {
                job_id: self.jobs[k.job].job_id,
                task_id: k.task,
                kernel: k.kernel,
                device: d,
                start_us: k.start_us,
                solo_us: k.solo_us,
                actual_us: self.now - k.start_us,
            });
            self.post(self.now, Event::TaskBegin { job: k.job });
        }
        self.reschedule(d);
    }

    fn task_end(&mut self, j: usize, task: usize) {
        self.release_task(j, task);
        self.post(self.now, Event::ReleaseRepack);
        self.post(self.now, Event::TaskBegin { job: j });
    }

    fn release_task(&mut self, j: usize, task: usize) {
        let job = &mut self.jobs[j];
        let Some(d) = job.tasks[task].device.take() else { return };
        for s in &job.analysis.tasks[task].mem_objs {
            job.live.remove(s);
        }
        let tenant = Tenant::task(job.job_id, task);
        self.sched.release_task(d, tenant).expect("placed task is resident");
    }

    fn release_all(&mut self, j: usize) {
        for t in 0..self.jobs[j].tasks.len() {
            self.release_task(j, t);
        }
        let job_id = self.jobs[j].job_id;
        if !self.mgb() {
            self.sched.release_job(job_id).expect("job tenant is resident");
        }
        self.sched.cancel_job(job_id);
        self.jobs[j].live.clear();
    }

    fn job_end(&mut self, j: usize) {
        self.release_all(j);
        let job = &mut self.jobs[j];
        job.state = JobState::Done;
        job.wait = Wait::None;
        job.end_us = self.now;
        let worker = job.worker.take().expect("running jobs hold a worker");
        self.post(self.now, Event::ReleaseRepack);
        self.post(self.now, Event::WorkerPull { worker });
    }

    fn oom(&mut self, j: usize, d: usize, requested: u64, free: u64) {
        let reason = format!("allocation of {requested} bytes with {free} free");
        self.crashes.push(CrashRecord {
            job_id: self.jobs[j].job_id,
            time_us: self.now,
            kind: CrashKind::Oom,
            device: Some(d),
            requested_bytes: requested,
            free_bytes: free,
            reason,
        });
        self.jobs[j].wait = Wait::Crashing;
        self.post(self.now, Event::OomCrash { job: j });
    }

    fn crash(&mut self, j: usize, kind: CrashKind, device: Option<usize>, requested: u64, free: u64, reason: String) {
        self.crashes.push(CrashRecord {
            job_id: self.jobs[j].job_id,
            time_us: self.now,
            kind,
            device,
            requested_bytes: requested,
            free_bytes: free,
            reason,
        });
        self.finish_crash(j);
    }

    fn finish_crash(&mut self, j: usize) {
        if self.jobs[j].state == JobState::Blocked {
            self.jobs[j].wait_us += self.now - self.jobs[j].blocked_since;
        }
        self.release_all(j);
        let job = &mut self.jobs[j];
        job.state = JobState::Crashed;
        job.wait = Wait::None;
        job.end_us = self.now;
        job.replay.clear();
        if let Some(worker) = job.worker.take() {
            self.post(self.now, Event::WorkerPull { worker });
        }
        self.post(self.now, Event::ReleaseRepack);
    }

    fn repack(&mut self) {
        for j in 0..self.jobs.len() {
            let Wait::Growth { device, tenant, bytes } = self.jobs[j].wait else { continue };
            if self.jobs[j].state != JobState::Blocked {
                continue;
            }
            if self.sched.device_mut(device).grow(tenant, bytes).is_ok() {
                let t = tenant.task.expect("growth is per task");
                self.jobs[j].tasks[t].reserved += bytes;
                self.jobs[j].wait = Wait::Request;
                self.post(self.now, Event::TaskBegin { job: j });
            }
        }
        for (req, outcome) in self.sched.on_release(self.now) {
            let j = self.by_id[&req.job_id];
            match outcome {
                Outcome::Assign(d) => {
                    if self.mgb() {
                        self.admit(j, req.task_id, d, &req.resources);
                    } else {
                        self.jobs[j].job_device = Some(d);
                    }
                    self.post(self.now, Event::TaskBegin { job: j });
                }
                Outcome::Reject(r) => self.crash(j, CrashKind::Rejected, None, req.resources.mem_bytes, 0, r),
                Outcome::Defer => {}
            }
        }
    }

    fn report(self) -> SimReport {
        let makespan_us = self.jobs.iter().map(|j| j.end_us).max().unwrap_or(0);
        let jobs = self
            .jobs
            .iter()
            .zip(&self.workload.jobs)
            .map(|(j, wj)| JobRecord {
                job_id: j.job_id,
                template: wj.template.clone(),
                class: wj.class,
                state: j.state,
                device: j.job_device,
                start_us: j.start_us,
                end_us: j.end_us,
                wait_us: j.wait_us,
            })
            .collect();
        let sched = self.sched;
        SimReport {
            workload_hash: self.workload.hash(),
            policy: self.cfg.policy,
            devices: self.cfg.devices.iter().map(|d| d.name.clone()).collect(),
            workers: self.cfg.workers,
            seed: self.cfg.seed,
            interference: self.cfg.interference,
            makespan_us,
            jobs,
            kernels: self.kernels,
            crashes: self.crashes,
            decisions: sched.log().to_vec(),
        }
    }
}
