//! GPU task construction: unit tasks around kernel launches, merging by
//! shared memory objects, resource requests and probe placement.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use crate::trace::{
    compute_dominators, compute_postdominators, inline_calls, Dim3, DominatorMap, FunctionGraph,
    Label, Op, OpId, OpKind, Program, Symbol,
};
use crate::DEFAULT_HEAP_BYTES;

/// Position of an op (or of the point just before it) inside a function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pos {
    pub block: usize,
    pub index: usize,
}

impl Pos {
    pub const fn new(block: usize, index: usize) -> Self {
        Self { block, index }
    }
}

/// A probe location: just before the op at `index` of `block`
/// (`index == ops.len()` is the end of the block).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct ProgramPoint {
    pub block: Label,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitTask {
    pub launch_op: OpId,
    pub launch_pos: Pos,
    pub kernel: String,
    pub mem_objs: BTreeSet<Symbol>,
    pub alloc_ops: BTreeSet<OpId>,
    pub h2d_ops: BTreeSet<OpId>,
    pub memset_ops: BTreeSet<OpId>,
    pub d2h_ops: BTreeSet<OpId>,
    pub free_ops: BTreeSet<OpId>,
    pub grid: Dim3,
    pub block: Dim3,
    /// (reverse-postorder rank of the block, op index).
    pub order: (usize, usize),
}

impl UnitTask {
    pub fn bound_ops(&self) -> impl Iterator<Item = OpId> + '_ {
        self.alloc_ops
            .iter()
            .chain(&self.h2d_ops)
            .chain(&self.memset_ops)
            .chain(&self.d2h_ops)
            .chain(&self.free_ops)
            .copied()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize)]
pub struct ResourceRequest {
    pub mem_bytes: u64,
    pub heap_limit_bytes: u64,
    pub thread_blocks: u64,
    pub threads_per_block: u64,
    pub warps_per_block: u32,
    pub total_warps: u64,
    pub regs_per_thread: u32,
    pub smem_per_block: u64,
    pub est_duration_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GpuTask {
    pub unit_tasks: Vec<UnitTask>,
    pub mem_objs: BTreeSet<Symbol>,
    /// None when the task is bound lazily at its first launch.
    pub probe: Option<ProgramPoint>,
    pub resources: ResourceRequest,
    pub lazy: bool,
}

impl GpuTask {
    pub fn first_launch(&self) -> &UnitTask {
        &self.unit_tasks[0]
    }

    pub fn launch_ops(&self) -> impl Iterator<Item = OpId> + '_ {
        self.unit_tasks.iter().map(|u| u.launch_op)
    }

    pub fn bound_ops(&self) -> BTreeSet<OpId> {
        self.unit_tasks.iter().flat_map(|u| u.bound_ops()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnalysisError {
    #[error("program `{0}` must be inlined to a single function before task construction")]
    NotInlined(String),
    #[error("launch of `{kernel}` uses `{symbol}`, which no malloc declares")]
    UndeclaredSymbol { kernel: String, symbol: Symbol },
    #[error("memory request of task {task} overflows 64 bits")]
    Overflow { task: usize },
}

/// Dominance facts about one function at op granularity.
pub struct CfgAnalysis<'f> {
    pub func: &'f FunctionGraph,
    pub dom: DominatorMap,
    pub pdom: DominatorMap,
    succs: Vec<Vec<usize>>,
    rpo_rank: Vec<usize>,
    positions: BTreeMap<OpId, Pos>,
}

impl<'f> CfgAnalysis<'f> {
    pub fn new(func: &'f FunctionGraph) -> Self {
        let succs = func.successors();
        let mut rpo_rank = vec![usize::MAX; succs.len()];
        for (rank, b) in func.reverse_postorder().into_iter().enumerate() {
            rpo_rank[b] = rank;
        }
        let positions = func
            .blocks
            .values()
            .enumerate()
            .flat_map(|(b, blk)| blk.ops.iter().enumerate().map(move |(i, o)| (o.id, Pos::new(b, i))))
            .collect();
        Self {
            func,
            dom: compute_dominators(func),
            pdom: compute_postdominators(func),
            succs,
            rpo_rank,
            positions,
        }
    }

    pub fn pos(&self, id: OpId) -> Pos {
        self.positions[&id]
    }

    pub fn order_key(&self, p: Pos) -> (usize, usize) {
        (self.rpo_rank[p.block], p.index)
    }

    /// Op `a` executes before op `b` on every path reaching `b`.
    pub fn op_dominates(&self, a: Pos, b: Pos) -> bool {
        if a.block == b.block {
            a.index < b.index
        } else {
            self.dom.dominates_idx(a.block, b.block)
        }
    }

    /// Op `a` executes after op `b` on every path from `b` to the exit.
    pub fn op_postdominates(&self, a: Pos, b: Pos) -> bool {
        if a.block == b.block {
            a.index > b.index
        } else {
            self.pdom.dominates_idx(a.block, b.block)
        }
    }

    /// The point before `p.index` lies on every path reaching op `o`.
    pub fn point_dominates(&self, p: Pos, o: Pos) -> bool {
        if p.block == o.block {
            p.index <= o.index
        } else {
            self.dom.dominates_idx(p.block, o.block)
        }
    }

    /// The point before `p.index` lies on every path from op `o` to the exit.
    pub fn point_postdominates(&self, p: Pos, o: Pos) -> bool {
        if p.block == o.block {
            p.index > o.index
        } else {
            self.pdom.dominates_idx(p.block, o.block)
        }
    }

    /// Whether execution can go from just after op `from` to op `to`
    /// without executing op `avoid`.
    pub fn reaches_avoiding(&self, from: Pos, to: Pos, avoid: Option<Pos>) -> bool {
        let n = self.succs.len();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([(from.block, from.index + 1)]);
        while let Some((b, start)) = queue.pop_front() {
            let len = self.func.blocks[b].ops.len();
            let stop_at = match avoid {
                Some(a) if a.block == b && a.index >= start => a.index,
                _ => len + 1,
            };
            if to.block == b && to.index >= start && to.index < stop_at {
                return true;
            }
            if stop_at <= len {
                continue;
            }
            for &s in &self.succs[b] {
                if !seen[s] {
                    seen[s] = true;
                    queue.push_back((s, 0));
                }
            }
        }
        false
    }
}

fn single_function(p: &Program) -> Result<&FunctionGraph, AnalysisError> {
    let f = p.main_function();
    if p.functions.len() != 1 || f.ops().any(|o| o.kind() == OpKind::Call) {
        return Err(AnalysisError::NotInlined(p.name.clone()));
    }
    Ok(f)
}

/// One unit task per launch, in program order. Memory ops are bound when
/// not lazy, their symbol is a launch argument, and they are guaranteed to
/// run before (malloc, copies to the device, memset) or after (copies back,
/// free) the launch.
pub fn build_unit_tasks(p: &Program) -> Result<Vec<UnitTask>, AnalysisError> {
    let f = single_function(p)?;
    build_unit_tasks_with(&CfgAnalysis::new(f))
}

pub fn build_unit_tasks_with(cfg: &CfgAnalysis<'_>) -> Result<Vec<UnitTask>, AnalysisError> {
    let f = cfg.func;
    let declared: BTreeSet<&str> = f
        .ops()
        .filter_map(|o| match &o.op {
            Op::Malloc { sym, .. } => Some(sym.as_str()),
            _ => None,
        })
        .collect();
    let mut units = Vec::new();
    for (b, blk) in f.blocks.values().enumerate() {
        for (i, op) in blk.ops.iter().enumerate() {
            let Op::Launch(l) = &op.op else { continue };
            let at = Pos::new(b, i);
            let mut unit = UnitTask {
                launch_op: op.id,
                launch_pos: at,
                kernel: l.kernel.clone(),
                mem_objs: BTreeSet::new(),
                alloc_ops: BTreeSet::new(),
                h2d_ops: BTreeSet::new(),
                memset_ops: BTreeSet::new(),
                d2h_ops: BTreeSet::new(),
                free_ops: BTreeSet::new(),
                grid: l.grid,
                block: l.block,
                order: cfg.order_key(at),
            };
            for a in &l.args {
                if !declared.contains(a.as_str()) {
                    return Err(AnalysisError::UndeclaredSymbol {
                        kernel: l.kernel.clone(),
                        symbol: a.clone(),
                    });
                }
                unit.mem_objs.insert(a.clone());
            }
            for (ob, oblk) in f.blocks.values().enumerate() {
                for (oi, o) in oblk.ops.iter().enumerate() {
                    let Some(sym) = o.op.symbol() else { continue };
                    if o.lazy || !unit.mem_objs.contains(sym) {
                        continue;
                    }
                    let here = Pos::new(ob, oi);
                    let (before, set) = match o.kind() {
                        OpKind::Malloc => (true, &mut unit.alloc_ops),
                        OpKind::MemcpyH2D => (true, &mut unit.h2d_ops),
                        OpKind::Memset => (true, &mut unit.memset_ops),
                        OpKind::MemcpyD2H => (false, &mut unit.d2h_ops),
                        OpKind::Free => (false, &mut unit.free_ops),
                        _ => continue,
                    };
                    let bound = if before {
                        cfg.op_dominates(here, at)
                    } else {
                        cfg.op_postdominates(here, at)
                    };
                    if bound {
                        set.insert(o.id);
                    }
                }
            }
            units.push(unit);
        }
    }
    units.sort_by_key(|u| u.order);
    Ok(units)
}

/// Groups unit tasks into connected components of the shares-a-symbol
/// relation. Components and their members are in program order; the
/// resulting tasks carry no probe or resources yet.
pub fn merge_unit_tasks(units: Vec<UnitTask>) -> Vec<GpuTask> {
    let mut units = units;
    units.sort_by_key(|u| u.order);
    let mut by_symbol: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in units.iter().enumerate() {
        for s in &u.mem_objs {
            by_symbol.entry(s.as_str()).or_default().push(i);
        }
    }
    let mut component = vec![usize::MAX; units.len()];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for start in 0..units.len() {
        if component[start] != usize::MAX {
            continue;
        }
        let id = groups.len();
        let mut members = Vec::new();
        let mut queue = VecDeque::from([start]);
        component[start] = id;
        while let Some(i) = queue.pop_front() {
            members.push(i);
            for s in &units[i].mem_objs {
                for &j in &by_symbol[s.as_str()] {
                    if component[j] == usize::MAX {
                        component[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        members.sort_unstable();
        groups.push(members);
    }
    let mut slots: Vec<Option<UnitTask>> = units.into_iter().map(Some).collect();
    groups
        .into_iter()
        .map(|members| {
            let unit_tasks: Vec<UnitTask> =
                members.iter().map(|&i| slots[i].take().expect("each unit in one component")).collect();
            let mem_objs = unit_tasks.iter().flat_map(|u| u.mem_objs.iter().cloned()).collect();
            GpuTask {
                unit_tasks,
                mem_objs,
                probe: None,
                resources: ResourceRequest::default(),
                lazy: false,
            }
        })
        .collect()
}

/// The last non-lazy heap-limit op dominating `at`, if any.
pub fn effective_heap_op(cfg: &CfgAnalysis<'_>, at: Pos) -> Option<(Pos, u64)> {
    let mut best: Option<(Pos, u64)> = None;
    for (b, blk) in cfg.func.blocks.values().enumerate() {
        for (i, o) in blk.ops.iter().enumerate() {
            let Op::SetHeapLimit { bytes } = o.op else { continue };
            let here = Pos::new(b, i);
            if !cfg.op_dominates(here, at) {
                continue;
            }
            // Dominating ops form a chain; the deepest is last in program order.
            if best.is_none_or(|(p, _)| cfg.order_key(here) > cfg.order_key(p)) {
                best = Some((here, bytes));
            }
        }
    }
    best
}

pub fn compute_resource_request(
    t: &GpuTask,
    task_index: usize,
    cfg: &CfgAnalysis<'_>,
) -> Result<ResourceRequest, AnalysisError> {
    let f = cfg.func;
    let heap = effective_heap_op(cfg, t.first_launch().launch_pos)
        .map_or(DEFAULT_HEAP_BYTES, |(_, b)| b);
    let allocs: BTreeSet<OpId> = t.unit_tasks.iter().flat_map(|u| u.alloc_ops.iter().copied()).collect();
    let mut mem = heap;
    for id in allocs {
        let p = cfg.pos(id);
        let bytes = f.blocks[p.block].ops[p.index].op.bytes().unwrap_or(0);
        mem = mem.checked_add(bytes).ok_or(AnalysisError::Overflow { task: task_index })?;
    }
    let mut req = ResourceRequest { mem_bytes: mem, heap_limit_bytes: heap, ..Default::default() };
    let mut widest: Option<(u64, u64, u32, u64)> = None;
    for u in &t.unit_tasks {
        let p = u.launch_pos;
        let l = f.blocks[p.block].ops[p.index].op.as_launch().expect("unit task launch");
        let total = l.total_warps();
        if widest.is_none_or(|w| total > w.0) {
            widest = Some((total, l.thread_blocks(), l.warps_per_block(), l.threads_per_block()));
        }
        req.regs_per_thread = req.regs_per_thread.max(l.regs_per_thread);
        req.smem_per_block = req.smem_per_block.max(l.smem_per_block);
        req.est_duration_us = req.est_duration_us.saturating_add(l.duration_us);
    }
    if let Some((total, tbs, wpb, tpb)) = widest {
        req.total_warps = total;
        req.thread_blocks = tbs;
        req.warps_per_block = wpb;
        req.threads_per_block = tpb;
    }
    Ok(req)
}

/// The latest point that dominates every GPU op of the task and follows
/// the heap-limit op its request depends on. None means the task has to be
/// bound lazily.
pub fn place_probe(t: &GpuTask, cfg: &CfgAnalysis<'_>) -> Option<ProgramPoint> {
    let first = t.first_launch().launch_pos;
    let heap_op = effective_heap_op(cfg, first).map(|(p, _)| p);
    // A heap limit that may run between the probe and the launch without
    // being the one we read makes the static request unreliable.
    for (b, blk) in cfg.func.blocks.values().enumerate() {
        for (i, o) in blk.ops.iter().enumerate() {
            if o.kind() != OpKind::SetHeapLimit || Some(Pos::new(b, i)) == heap_op {
                continue;
            }
            if cfg.reaches_avoiding(Pos::new(b, i), first, heap_op) {
                return None;
            }
        }
    }
    let mut ops: Vec<Pos> = t.bound_ops().into_iter().map(|id| cfg.pos(id)).collect();
    ops.extend(t.unit_tasks.iter().map(|u| u.launch_pos));

    let mut best: Option<(Pos, &str)> = None;
    for (b, blk) in cfg.func.blocks.values().enumerate() {
        for i in 0..=blk.ops.len() {
            let p = Pos::new(b, i);
            if !ops.iter().all(|&o| cfg.point_dominates(p, o)) {
                continue;
            }
            if let Some(h) = heap_op {
                if !cfg.point_postdominates(p, h) {
                    continue;
                }
            }
            let better = match best {
                None => true,
                Some((q, ql)) => {
                    let (kp, kq) = (cfg.order_key(p), cfg.order_key(q));
                    kp > kq || (kp == kq && blk.label.as_str() < ql)
                }
            };
            if better {
                best = Some((p, blk.label.as_str()));
            }
        }
    }
    best.map(|(p, label)| ProgramPoint { block: label.to_string(), index: p.index })
}

/// Marks every memory op that no unit task binds as lazy.
pub fn mark_lazy_ops(p: &Program, units: &[UnitTask]) -> Program {
    let bound: BTreeSet<OpId> = units.iter().flat_map(|u| u.bound_ops()).collect();
    let mut out = p.clone();
    for f in out.functions.values_mut() {
        for b in f.blocks.values_mut() {
            for o in &mut b.ops {
                if o.op.is_memory_op() && !bound.contains(&o.id) {
                    o.lazy = true;
                }
            }
        }
    }
    out
}

/// Marks every memory op lazy, bypassing static binding entirely.
pub fn force_lazy(p: &Program) -> Program {
    let mut out = p.clone();
    for f in out.functions.values_mut() {
        for b in f.blocks.values_mut() {
            for o in &mut b.ops {
                if o.op.is_memory_op() {
                    o.lazy = true;
                }
            }
        }
    }
    out
}

/// A program ready for simulation: inlined, with lazy flags settled and its
/// GPU tasks analyzed.
#[derive(Debug, Clone)]
pub struct AnalyzedProgram {
    pub program: Program,
    pub tasks: Vec<GpuTask>,
}

impl AnalyzedProgram {
    pub fn function(&self) -> &FunctionGraph {
        self.program.main_function()
    }

    /// Task index owning each symbol.
    pub fn symbol_owner(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for (i, t) in self.tasks.iter().enumerate() {
            for s in &t.mem_objs {
                m.insert(s.as_str(), i);
            }
        }
        m
    }
}

/// Full pipeline: inline, bind, merge, size, place probes, mark lazy ops.
/// With `all_lazy`, every memory op is routed through the lazy runtime.
pub fn analyze_program(p: &Program, all_lazy: bool) -> Result<AnalyzedProgram, AnalysisError> {
    let mut program = inline_calls(p);
    if all_lazy {
        program = force_lazy(&program);
    }
    let f = program.main_function();
    let cfg = CfgAnalysis::new(f);
    let units = build_unit_tasks_with(&cfg)?;
    let marked = mark_lazy_ops(&program, &units);
    let mut tasks = merge_unit_tasks(units);
    let lazy_syms: BTreeSet<&str> = marked
        .main_function()
        .ops()
        .filter(|o| o.kind() == OpKind::Malloc && o.lazy)
        .filter_map(|o| o.op.symbol())
        .collect();
    for (i, t) in tasks.iter_mut().enumerate() {
        t.resources = compute_resource_request(t, i, &cfg)?;
        t.probe = place_probe(t, &cfg);
        let has_lazy_alloc = t.mem_objs.iter().any(|s| lazy_syms.contains(s.as_str()));
        if t.probe.is_none() || has_lazy_alloc {
            t.lazy = true;
            t.probe = None;
        }
    }
    Ok(AnalyzedProgram { program: marked, tasks })
}

/// One line of `build-tasks --dump-tasks` output.
#[derive(Debug, Clone, Serialize)]
pub struct TaskDump {
    pub task_id: usize,
    pub launches: Vec<String>,
    pub mem_objs: Vec<Symbol>,
    pub mem_bytes: u64,
    pub thread_blocks: u64,
    pub warps_per_block: u32,
    pub probe: Option<ProgramPoint>,
    pub lazy: bool,
}

impl TaskDump {
    pub fn new(task_id: usize, t: &GpuTask) -> Self {
        Self {
            task_id,
            launches: t.unit_tasks.iter().map(|u| u.kernel.clone()).collect(),
            mem_objs: t.mem_objs.iter().cloned().collect(),
            mem_bytes: t.resources.mem_bytes,
            thread_blocks: t.resources.thread_blocks,
            warps_per_block: t.resources.warps_per_block,
            probe: t.probe.clone(),
            lazy: t.lazy,
        }
    }
}
