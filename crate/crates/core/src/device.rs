//! Simulated multi-SM GPUs: capacities, per-SM tenancy with round-robin
//! thread-block dispatch, and memory accounting.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tasks::ResourceRequest;
use crate::GIB;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    pub sm_count: u32,
    pub max_warps_per_sm: u32,
    pub max_tbs_per_sm: u32,
    pub regs_per_sm: u64,
    pub smem_per_sm_bytes: u64,
    pub mem_bytes: u64,
}

impl DeviceSpec {
    pub fn p100() -> Self {
        Self {
            name: "p100".into(),
            sm_count: 56,
            max_warps_per_sm: 64,
            max_tbs_per_sm: 32,
            regs_per_sm: 65536,
            smem_per_sm_bytes: 64 * 1024,
            mem_bytes: 16 * GIB,
        }
    }

    pub fn v100() -> Self {
        Self {
            name: "v100".into(),
            sm_count: 80,
            max_warps_per_sm: 64,
            max_tbs_per_sm: 32,
            regs_per_sm: 65536,
            smem_per_sm_bytes: 96 * 1024,
            mem_bytes: 16 * GIB,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "p100" => Some(Self::p100()),
            "v100" => Some(Self::v100()),
            _ => None,
        }
    }

    /// Warps the whole device can hold at once.
    pub fn warp_capacity(&self) -> u64 {
        u64::from(self.sm_count) * u64::from(self.max_warps_per_sm)
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let bad = |what: &str| Err(DeviceError::InvalidSpec(format!("{}: {what} must be positive", self.name)));
        if self.sm_count == 0 {
            return bad("sm_count");
        }
        if self.max_warps_per_sm == 0 {
            return bad("max_warps_per_sm");
        }
        if self.max_tbs_per_sm == 0 {
            return bad("max_tbs_per_sm");
        }
        if self.mem_bytes == 0 {
            return bad("mem_bytes");
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum InventoryEntry {
    Preset { preset: String, #[serde(default = "one")] count: usize },
    Explicit(DeviceSpec),
}

fn one() -> usize {
    1
}

/// Parses `p100:2`, `p100:2,v100:1` or a JSON inventory
/// (`[{"preset":"p100","count":2}]` or explicit spec objects).
pub fn parse_inventory(text: &str) -> Result<Vec<DeviceSpec>, DeviceError> {
    let text = text.trim();
    let mut out = Vec::new();
    if text.starts_with('[') || text.starts_with('{') {
        let entries: Vec<InventoryEntry> = if text.starts_with('{') {
            vec![serde_json::from_str(text).map_err(|e| DeviceError::InvalidSpec(e.to_string()))?]
        } else {
            serde_json::from_str(text).map_err(|e| DeviceError::InvalidSpec(e.to_string()))?
        };
        for e in entries {
            match e {
                InventoryEntry::Preset { preset, count } => {
                    let spec = DeviceSpec::preset(&preset)
                        .ok_or_else(|| DeviceError::InvalidSpec(format!("unknown preset `{preset}`")))?;
                    out.extend(std::iter::repeat_n(spec, count));
                }
                InventoryEntry::Explicit(spec) => out.push(spec),
            }
        }
    } else {
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, count) = match part.split_once(':') {
                Some((n, c)) => {
                    let c = c
                        .parse::<usize>()
                        .map_err(|_| DeviceError::InvalidSpec(format!("bad device count in `{part}`")))?;
                    (n, c)
                }
                None => (part, 1),
            };
            let spec = DeviceSpec::preset(name)
                .ok_or_else(|| DeviceError::InvalidSpec(format!("unknown preset `{name}`")))?;
            out.extend(std::iter::repeat_n(spec, count));
        }
    }
    if out.is_empty() {
        return Err(DeviceError::InvalidSpec("empty device inventory".into()));
    }
    for s in &out {
        s.validate()?;
    }
    Ok(out)
}

/// Per-thread-block footprint of a kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct BlockShape {
    pub warps_per_block: u32,
    pub threads_per_block: u64,
    pub regs_per_thread: u32,
    pub smem_per_block: u64,
}

impl BlockShape {
    pub fn of(req: &ResourceRequest) -> Self {
        Self {
            warps_per_block: req.warps_per_block,
            threads_per_block: req.threads_per_block,
            regs_per_thread: req.regs_per_thread,
            smem_per_block: req.smem_per_block,
        }
    }

    fn regs_per_block(&self) -> u64 {
        u64::from(self.regs_per_thread) * self.threads_per_block
    }
}

/// Thread blocks of `shape` one empty SM can hold.
pub fn occupancy_limit_per_sm(spec: &DeviceSpec, shape: &BlockShape) -> u32 {
    if shape.warps_per_block == 0 || shape.warps_per_block > spec.max_warps_per_sm {
        return 0;
    }
    let mut limit = spec.max_tbs_per_sm.min(spec.max_warps_per_sm / shape.warps_per_block);
    let regs = shape.regs_per_block();
    if regs > 0 {
        limit = limit.min(u32::try_from(spec.regs_per_sm / regs).unwrap_or(u32::MAX));
    }
    if shape.smem_per_block > 0 {
        limit = limit.min(u32::try_from(spec.smem_per_sm_bytes / shape.smem_per_block).unwrap_or(u32::MAX));
    }
    limit
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize)]
pub struct SmUsage {
    pub tbs: u32,
    pub warps: u32,
    pub regs: u64,
    pub smem: u64,
}

impl SmUsage {
    fn admits(&self, spec: &DeviceSpec, shape: &BlockShape) -> bool {
        self.tbs < spec.max_tbs_per_sm
            && u64::from(self.warps) + u64::from(shape.warps_per_block) <= u64::from(spec.max_warps_per_sm)
            && (shape.regs_per_block() == 0 || self.regs + shape.regs_per_block() <= spec.regs_per_sm)
            && (shape.smem_per_block == 0 || self.smem + shape.smem_per_block <= spec.smem_per_sm_bytes)
    }

    fn add(&mut self, shape: &BlockShape, n: u32) {
        self.tbs += n;
        self.warps += n * shape.warps_per_block;
        self.regs += u64::from(n) * shape.regs_per_block();
        self.smem += u64::from(n) * shape.smem_per_block;
    }

    fn remove(&mut self, shape: &BlockShape, n: u32) {
        self.tbs -= n;
        self.warps -= n * shape.warps_per_block;
        self.regs -= u64::from(n) * shape.regs_per_block();
        self.smem -= u64::from(n) * shape.smem_per_block;
    }
}

/// Who holds device resources: one task of a job, or a whole job when the
/// policy works at process granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Tenant {
    pub job: usize,
    pub task: Option<usize>,
}

impl Tenant {
    pub const fn task(job: usize, task: usize) -> Self {
        Self { job, task: Some(task) }
    }

    pub const fn job(job: usize) -> Self {
        Self { job, task: None }
    }
}

impl fmt::Display for Tenant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.task {
            Some(t) => write!(f, "job {} task {t}", self.job),
            None => write!(f, "job {}", self.job),
        }
    }
}

/// A tentative thread-block placement, valid only for the state version it
/// was computed against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementPlan {
    pub shape: BlockShape,
    /// (SM index, thread blocks) for every SM that receives some.
    pub blocks: Vec<(usize, u32)>,
    pub final_cursor: usize,
    version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Residency {
    pub mem_bytes: u64,
    pub warps: u64,
    pub shape: Option<BlockShape>,
    pub sm_blocks: Vec<(usize, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DeviceError {
    #[error("invalid device specification: {0}")]
    InvalidSpec(String),
    #[error("stale placement plan (computed at version {plan}, device at {current})")]
    StalePlan { plan: u64, current: u64 },
    #[error("{0} is not resident")]
    UnknownTenant(Tenant),
    #[error("{0} is already resident")]
    AlreadyResident(Tenant),
    #[error("{0} already has thread blocks committed")]
    AlreadyPlaced(Tenant),
    #[error("requested {requested} bytes with {free} free")]
    InsufficientMemory { requested: u64, free: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceState {
    pub spec: DeviceSpec,
    free_mem: u64,
    sms: Vec<SmUsage>,
    in_use_warps: u64,
    rr_cursor: usize,
    resident: BTreeMap<Tenant, Residency>,
    version: u64,
}

impl DeviceState {
    pub fn new(spec: DeviceSpec) -> Self {
        Self {
            free_mem: spec.mem_bytes,
            sms: vec![SmUsage::default(); spec.sm_count as usize],
            in_use_warps: 0,
            rr_cursor: 0,
            resident: BTreeMap::new(),
            version: 0,
            spec,
        }
    }

    pub fn free_mem_bytes(&self) -> u64 {
        self.free_mem
    }

    pub fn in_use_warps(&self) -> u64 {
        self.in_use_warps
    }

    pub fn rr_cursor(&self) -> usize {
        self.rr_cursor
    }

    pub fn sms(&self) -> &[SmUsage] {
        &self.sms
    }

    pub fn resident(&self) -> &BTreeMap<Tenant, Residency> {
        &self.resident
    }

    pub fn residency(&self, t: Tenant) -> Option<&Residency> {
        self.resident.get(&t)
    }

    /// Round-robin dispatch of `req.thread_blocks` blocks, one per SM visit,
    /// starting at the persistent cursor. Never mutates the state.
    pub fn try_place_blocks(&self, req: &ResourceRequest) -> Option<PlacementPlan> {
        let shape = BlockShape::of(req);
        let n = self.sms.len();
        if n == 0 || occupancy_limit_per_sm(&self.spec, &shape) == 0 {
            return None;
        }
        let mut scratch = self.sms.clone();
        let mut counts = vec![0u32; n];
        let mut remaining = req.thread_blocks;
        let mut cursor = self.rr_cursor % n;
        let mut misses = 0;
        while remaining > 0 {
            if scratch[cursor].admits(&self.spec, &shape) {
                scratch[cursor].add(&shape, 1);
                counts[cursor] += 1;
                remaining -= 1;
                misses = 0;
            } else {
                misses += 1;
                if misses == n {
                    return None;
                }
            }
            cursor = (cursor + 1) % n;
        }
        let blocks = counts.into_iter().enumerate().filter(|&(_, c)| c > 0).collect();
        Some(PlacementPlan { shape, blocks, final_cursor: cursor, version: self.version })
    }

    /// Applies a plan produced by [`try_place_blocks`](Self::try_place_blocks)
    /// on this exact state.
    pub fn commit_placement(&mut self, plan: &PlacementPlan, tenant: Tenant) -> Result<(), DeviceError> {
        if plan.version != self.version {
            return Err(DeviceError::StalePlan { plan: plan.version, current: self.version });
        }
        let entry = self.resident.entry(tenant).or_default();
        if entry.shape.is_some() {
            return Err(DeviceError::AlreadyPlaced(tenant));
        }
        for &(sm, c) in &plan.blocks {
            self.sms[sm].add(&plan.shape, c);
        }
        entry.shape = Some(plan.shape);
        entry.sm_blocks = plan.blocks.clone();
        self.rr_cursor = plan.final_cursor;
        self.version += 1;
        Ok(())
    }

    /// Takes `bytes` from free memory without attributing them to a tenant.
    pub fn reserve_memory(&mut self, bytes: u64) -> Result<(), DeviceError> {
        if bytes > self.free_mem {
            return Err(DeviceError::InsufficientMemory { requested: bytes, free: self.free_mem });
        }
        self.free_mem -= bytes;
        Ok(())
    }

    /// Makes `tenant` resident with `mem_bytes` of memory and `warps` added to
    /// the soft warp counter. A committed placement for the same tenant is
    /// merged into the record.
    pub fn admit(&mut self, tenant: Tenant, mem_bytes: u64, warps: u64) -> Result<(), DeviceError> {
        if let Some(r) = self.resident.get(&tenant) {
            if r.mem_bytes > 0 || r.warps > 0 || r.shape.is_none() {
                return Err(DeviceError::AlreadyResident(tenant));
            }
        }
        self.reserve_memory(mem_bytes)?;
        let r = self.resident.entry(tenant).or_default();
        r.mem_bytes = mem_bytes;
        r.warps = warps;
        self.in_use_warps += warps;
        Ok(())
    }

    /// Extends a tenant's memory; on shortage nothing changes.
    pub fn grow(&mut self, tenant: Tenant, bytes: u64) -> Result<(), DeviceError> {
        if !self.resident.contains_key(&tenant) {
            return Err(DeviceError::UnknownTenant(tenant));
        }
        self.reserve_memory(bytes)?;
        self.resident.get_mut(&tenant).expect("checked").mem_bytes += bytes;
        Ok(())
    }

    /// Returns up to `bytes` of a tenant's memory; yields the amount returned.
    pub fn shrink(&mut self, tenant: Tenant, bytes: u64) -> Result<u64, DeviceError> {
        let r = self.resident.get_mut(&tenant).ok_or(DeviceError::UnknownTenant(tenant))?;
        let give = bytes.min(r.mem_bytes);
        r.mem_bytes -= give;
        self.free_mem += give;
        Ok(give)
    }

    /// Removes a tenant, returning its memory, thread blocks and warps.
    pub fn release_task(&mut self, tenant: Tenant) -> Result<Residency, DeviceError> {
        let r = self.resident.remove(&tenant).ok_or(DeviceError::UnknownTenant(tenant))?;
        self.free_mem += r.mem_bytes;
        self.in_use_warps -= r.warps;
        if let Some(shape) = r.shape {
            for &(sm, c) in &r.sm_blocks {
                self.sms[sm].remove(&shape, c);
            }
            self.version += 1;
        }
        Ok(r)
    }

    /// Checks conservation and per-SM limits; returns a description of the
    /// first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let held: u64 = self.resident.values().map(|r| r.mem_bytes).sum();
        if self.free_mem + held != self.spec.mem_bytes {
            return Err(format!(
                "{}: free {} + resident {} != capacity {}",
                self.spec.name, self.free_mem, held, self.spec.mem_bytes
            ));
        }
        let warps: u64 = self.resident.values().map(|r| r.warps).sum();
        if warps != self.in_use_warps {
            return Err(format!("in-use warps {} != resident sum {warps}", self.in_use_warps));
        }
        let mut recomputed = vec![SmUsage::default(); self.sms.len()];
        for r in self.resident.values() {
            if let Some(shape) = &r.shape {
                for &(sm, c) in &r.sm_blocks {
                    recomputed[sm].add(shape, c);
                }
            }
        }
        for (i, (sm, want)) in self.sms.iter().zip(&recomputed).enumerate() {
            if sm != want {
                return Err(format!("SM {i} tenancy {sm:?} disagrees with residents {want:?}"));
            }
            if sm.tbs > self.spec.max_tbs_per_sm || sm.warps > self.spec.max_warps_per_sm {
                return Err(format!("SM {i} over its limits: {sm:?}"));
            }
            if (self.spec.regs_per_sm > 0 && sm.regs > self.spec.regs_per_sm)
                || (self.spec.smem_per_sm_bytes > 0 && sm.smem > self.spec.smem_per_sm_bytes)
            {
                return Err(format!("SM {i} over register or shared-memory capacity: {sm:?}"));
            }
        }
        Ok(())
    }
}
