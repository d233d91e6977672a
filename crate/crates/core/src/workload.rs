//! Job templates, seeded batch workloads and their JSON Lines form.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::trace::{parse_program, Dim3, JobClass, Program, TraceError};
use crate::GIB;

const RODINIA_JSON: &str = include_str!("../data/rodinia.json");
const DARKNET_JSON: &str = include_str!("../data/darknet.json");

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("catalog: {0}")]
    Catalog(String),
    #[error("mix: {0}")]
    Mix(String),
    #[error("workload line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("job {job}: {source}")]
    Trace { job: usize, source: TraceError },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTemplate {
    pub name: String,
    pub grid: [u32; 3],
    pub block: [u32; 3],
    pub base_duration_ms: f64,
    /// How many times the kernel is launched within its phase.
    #[serde(default = "one")]
    pub launches: u32,
    #[serde(default)]
    pub phase: usize,
    #[serde(default)]
    pub regs: u32,
    #[serde(default)]
    pub smem: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTemplate {
    pub name: String,
    pub class: JobClass,
    /// Peak device memory of the job, reached in its largest phase.
    pub mem_footprint_bytes: u64,
    /// Share of the footprint each phase allocates; defaults to one phase
    /// holding all of it.
    #[serde(default)]
    pub phases: Vec<f64>,
    pub kernels: Vec<KernelTemplate>,
    /// Allocate the first buffer lazily, which forces late binding.
    #[serde(default)]
    pub lazy_pattern: bool,
}

impl JobTemplate {
    pub fn kernel_count(&self) -> u32 {
        self.kernels.iter().map(|k| k.launches).sum()
    }

    fn phase_fractions(&self) -> Vec<f64> {
        if self.phases.is_empty() {
            vec![1.0]
        } else {
            self.phases.clone()
        }
    }

    /// Solo run time in microseconds: every launch back to back.
    pub fn solo_duration_us(&self) -> u64 {
        self.kernels.iter().map(|k| u64::from(k.launches) * ms_to_us(k.base_duration_ms)).sum()
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::Catalog(format!("{}: {m}", self.name)));
        let fp = self.mem_footprint_bytes;
        match self.class {
            JobClass::Small if !(GIB..=4 * GIB).contains(&fp) => {
                return bad(format!("small footprint {fp} outside [1 GiB, 4 GiB]"))
            }
            JobClass::Large if fp <= 4 * GIB || fp > 13 * GIB => {
                return bad(format!("large footprint {fp} outside (4 GiB, 13 GiB]"))
            }
            _ => {}
        }
        if self.kernels.is_empty() {
            return bad("no kernels".into());
        }
        let phases = self.phase_fractions();
        if phases.iter().any(|&f| !(f > 0.0 && f <= 1.0)) || !phases.contains(&1.0) {
            return bad("phase fractions must lie in (0, 1] and one must be 1".into());
        }
        for k in &self.kernels {
            if k.phase >= phases.len() {
                return bad(format!("kernel {} names phase {} of {}", k.name, k.phase, phases.len()));
            }
            if k.launches == 0 || k.base_duration_ms.is_nan() || k.base_duration_ms <= 0.0 {
                return bad(format!("kernel {} needs launches and a positive duration", k.name));
            }
        }
        for p in 0..phases.len() {
            if !self.kernels.iter().any(|k| k.phase == p) {
                return bad(format!("phase {p} has no kernels"));
            }
        }
        Ok(())
    }

    /// The job as trace text: per phase, two buffers are allocated and
    /// filled, the phase's kernels run interleaved, results are copied back
    /// and the buffers freed.
    pub fn to_trace(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "program {}\nclass {}\nfunc {}", self.name, self.class, self.name);
        for (p, frac) in self.phase_fractions().into_iter().enumerate() {
            let bytes = (self.mem_footprint_bytes as f64 * frac).round() as u64;
            let a = bytes / 2;
            let b = bytes - a;
            let lazy = if self.lazy_pattern && p == 0 { " lazy" } else { "" };
            let _ = writeln!(s, "  malloc in{p} {a}{lazy}");
            let _ = writeln!(s, "  memcpy_h2d in{p} {a}");
            let _ = writeln!(s, "  malloc out{p} {b}");
            let _ = writeln!(s, "  memset out{p} {b}");
            let ks: Vec<&KernelTemplate> = self.kernels.iter().filter(|k| k.phase == p).collect();
            let rounds = ks.iter().map(|k| k.launches).max().unwrap_or(0);
            for r in 0..rounds {
                for k in ks.iter().filter(|k| k.launches > r) {
                    let _ = write!(
                        s,
                        "  launch {} grid {} block {} args in{p},out{p} dur {:.3}",
                        k.name, dim(k.grid), dim(k.block), k.base_duration_ms
                    );
                    if k.regs > 0 {
                        let _ = write!(s, " regs {}", k.regs);
                    }
                    if k.smem > 0 {
                        let _ = write!(s, " smem {}", k.smem);
                    }
                    s.push('\n');
                }
            }
            let _ = writeln!(s, "  memcpy_d2h out{p} {b}");
            let _ = writeln!(s, "  free in{p}\n  free out{p}");
        }
        s.push_str("end\n");
        s
    }
}

fn dim(d: [u32; 3]) -> Dim3 {
    Dim3::new(d[0], d[1], d[2])
}

fn ms_to_us(ms: f64) -> u64 {
    (ms * 1000.0).round() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub name: String,
    pub templates: Vec<JobTemplate>,
}

impl Catalog {
    pub fn from_json(text: &str) -> Result<Self, WorkloadError> {
        let c: Catalog = serde_json::from_str(text).map_err(|e| WorkloadError::Catalog(e.to_string()))?;
        for t in &c.templates {
            t.validate()?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, WorkloadError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// 7 small and 10 large synthetic benchmark templates.
    pub fn builtin() -> Self {
        Self::from_json(RODINIA_JSON).expect("bundled catalog is valid")
    }

    /// Small neural-network style jobs of 0.5 to 1.5 GB. These sit below the
    /// small-class floor, so they are not validated against it.
    pub fn darknet() -> Self {
        serde_json::from_str(DARKNET_JSON).expect("bundled catalog parses")
    }

    pub fn of_class(&self, class: JobClass) -> Vec<&JobTemplate> {
        self.templates.iter().filter(|t| t.class == class).collect()
    }

    pub fn get(&self, name: &str) -> Option<&JobTemplate> {
        self.templates.iter().find(|t| t.name == name)
    }
}

/// Large-to-small job ratio and batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSpec {
    pub large: u32,
    pub small: u32,
    pub n_jobs: usize,
    pub seed: u64,
}

impl MixSpec {
    pub fn new(large: u32, small: u32, n_jobs: usize, seed: u64) -> Self {
        Self { large, small, n_jobs, seed }
    }

    /// Parses a `L:S` ratio.
    pub fn parse_ratio(s: &str) -> Result<(u32, u32), WorkloadError> {
        let bad = || WorkloadError::Mix(format!("ratio `{s}` is not L:S with positive integers"));
        let (l, r) = s.split_once(':').ok_or_else(bad)?;
        let l: u32 = l.trim().parse().map_err(|_| bad())?;
        let r: u32 = r.trim().parse().map_err(|_| bad())?;
        if l == 0 || r == 0 {
            return Err(bad());
        }
        Ok((l, r))
    }

    /// Number of large jobs: the large share of `n_jobs`, rounded up.
    pub fn large_count(&self) -> usize {
        let total = u64::from(self.large) + u64::from(self.small);
        (self.n_jobs as u64 * u64::from(self.large)).div_ceil(total) as usize
    }
}

impl fmt::Display for MixSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-job {}:{}", self.n_jobs, self.large, self.small)
    }
}

#[derive(Debug, Clone)]
pub struct WorkloadJob {
    pub job_id: usize,
    pub class: Option<JobClass>,
    pub template: Option<String>,
    pub trace: String,
    pub program: Arc<Program>,
}

#[derive(Debug, Clone, Default)]
pub struct Workload {
    pub jobs: Vec<WorkloadJob>,
}

#[derive(Serialize, Deserialize)]
struct JobLine {
    job_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<JobClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inline_trace: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trace_path: Option<String>,
}

impl Workload {
    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a str>) -> Result<Self, WorkloadError> {
        let mut jobs = Vec::new();
        for (job_id, text) in traces.into_iter().enumerate() {
            jobs.push(Self::job(job_id, None, None, text.to_string())?);
        }
        Ok(Self { jobs })
    }

    fn job(
        job_id: usize,
        class: Option<JobClass>,
        template: Option<String>,
        trace: String,
    ) -> Result<WorkloadJob, WorkloadError> {
        let program = parse_program(&trace).map_err(|source| WorkloadError::Trace { job: job_id, source })?;
        let class = class.or(program.class);
        Ok(WorkloadJob { job_id, class, template, trace, program: Arc::new(program) })
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    /// One JSON object per line, traces inlined.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for j in &self.jobs {
            let line = JobLine {
                job_id: j.job_id,
                class: j.class,
                template: j.template.clone(),
                inline_trace: Some(j.trace.clone()),
                trace_path: None,
            };
            s.push_str(&serde_json::to_string(&line).expect("plain data serializes"));
            s.push('\n');
        }
        s
    }

    /// Parses JSON Lines; `trace_path` entries are resolved against `base`.
    pub fn from_jsonl(text: &str, base: Option<&Path>) -> Result<Self, WorkloadError> {
        let mut jobs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let jl: JobLine =
                serde_json::from_str(raw).map_err(|e| WorkloadError::Line { line, msg: e.to_string() })?;
            let trace = match (jl.inline_trace, jl.trace_path) {
                (Some(t), None) => t,
                (None, Some(p)) => {
                    let path = base.map_or_else(|| Path::new(&p).to_path_buf(), |b| b.join(&p));
                    std::fs::read_to_string(&path).map_err(|e| WorkloadError::Line {
                        line,
                        msg: format!("{}: {e}", path.display()),
                    })?
                }
                _ => {
                    return Err(WorkloadError::Line {
                        line,
                        msg: "exactly one of inline_trace and trace_path is required".into(),
                    })
                }
            };
            jobs.push(Self::job(jl.job_id, jl.class, jl.template, trace)?);
        }
        if jobs.is_empty() {
            return Err(WorkloadError::Line { line: 0, msg: "workload has no jobs".into() });
        }
        let mut seen = std::collections::BTreeSet::new();
        for j in &jobs {
            if !seen.insert(j.job_id) {
                return Err(WorkloadError::Line { line: 0, msg: format!("duplicate job_id {}", j.job_id) });
            }
        }
        Ok(Self { jobs })
    }

    pub fn load(path: &Path) -> Result<Self, WorkloadError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_jsonl(&text, path.parent())
    }

    /// SHA-256 of the inlined JSON Lines form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

/// Draws a batch: the large count per [`MixSpec::large_count`], templates
/// sampled uniformly with replacement within each class, then shuffled.
pub fn gen_workload(mix: &MixSpec, catalog: &Catalog) -> Result<Workload, WorkloadError> {
    if mix.large == 0 || mix.small == 0 {
        return Err(WorkloadError::Mix("ratio terms must be positive".into()));
    }
    let sum = (mix.large + mix.small) as usize;
    if mix.n_jobs < sum {
        return Err(WorkloadError::Mix(format!("{} jobs cannot hold a {}:{} mix", mix.n_jobs, mix.large, mix.small)));
    }
    let large = catalog.of_class(JobClass::Large);
    let small = catalog.of_class(JobClass::Small);
    if large.is_empty() || small.is_empty() {
        return Err(WorkloadError::Mix("catalog needs both small and large templates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix.seed);
    let n_large = mix.large_count();
    let mut picks: Vec<&JobTemplate> = Vec::with_capacity(mix.n_jobs);
    for _ in 0..n_large {
        picks.push(large[rng.gen_range(0..large.len())]);
    }
    for _ in n_large..mix.n_jobs {
        picks.push(small[rng.gen_range(0..small.len())]);
    }
    picks.shuffle(&mut rng);
    let mut jobs = Vec::with_capacity(picks.len());
    for (job_id, t) in picks.into_iter().enumerate() {
        jobs.push(Workload::job(job_id, Some(t.class), Some(t.name.clone()), t.to_trace())?);
    }
    Ok(Workload { jobs })
}

/// The eight reference mixes W1..W8 with their pinned seeds.
pub fn table_i() -> Vec<(&'static str, MixSpec)> {
    vec![
        ("W1", MixSpec::new(1, 1, 16, 1)),
        ("W2", MixSpec::new(2, 1, 16, 2)),
        ("W3", MixSpec::new(3, 1, 16, 3)),
        ("W4", MixSpec::new(5, 1, 16, 4)),
        ("W5", MixSpec::new(1, 1, 32, 5)),
        ("W6", MixSpec::new(2, 1, 32, 6)),
        ("W7", MixSpec::new(3, 1, 32, 7)),
        ("W8", MixSpec::new(5, 1, 32, 8)),
    ]
}

impl FromStr for MixSpec {
    type Err = WorkloadError;

    /// `L:S` with 16 jobs and seed 0, or a reference name `W1`..`W8`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some((_, m)) = table_i().into_iter().find(|(n, _)| n.eq_ignore_ascii_case(s)) {
            return Ok(m);
        }
        let (large, small) = Self::parse_ratio(s)?;
        Ok(Self::new(large, small, 16, 0))
    }
}
