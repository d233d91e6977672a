//! The miniature GPU-program trace language.
//!
//! A [`Program`] is a set of functions, each a control-flow graph of basic
//! blocks holding GPU operations in program order. Programs are parsed from
//! `.gput` text ([`parse_program`]), printed back with `Display`, flattened
//! with [`inline_calls`] and analyzed with [`compute_dominators`] /
//! [`compute_postdominators`].

mod dom;
mod inline;
mod parse;
mod print;
mod walk;

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use dom::{compute_dominators, compute_postdominators, DominatorMap};
pub use inline::inline_calls;
pub use parse::parse_program;
pub use walk::{walk_blocks, WalkError};

pub type Symbol = String;
pub type Label = String;
pub type OpId = u32;

/// Hardware limit on threads per block.
pub const MAX_THREADS_PER_BLOCK: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dim3 {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl Dim3 {
    pub const fn new(x: u32, y: u32, z: u32) -> Self {
        Self { x, y, z }
    }

    pub fn product(&self) -> u64 {
        u64::from(self.x) * u64::from(self.y) * u64::from(self.z)
    }
}

impl fmt::Display for Dim3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.x, self.y, self.z)
    }
}

/// A kernel launch with its configuration and solo execution time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchOp {
    pub kernel: String,
    pub grid: Dim3,
    pub block: Dim3,
    pub args: Vec<Symbol>,
    /// Solo execution time in microseconds.
    pub duration_us: u64,
    /// 0 means unconstrained.
    pub regs_per_thread: u32,
    pub smem_per_block: u64,
}

impl LaunchOp {
    pub fn threads_per_block(&self) -> u64 {
        self.block.product()
    }

    pub fn thread_blocks(&self) -> u64 {
        self.grid.product()
    }

    pub fn warps_per_block(&self) -> u32 {
        self.threads_per_block().div_ceil(crate::WARP_SIZE) as u32
    }

    pub fn total_warps(&self) -> u64 {
        self.thread_blocks() * u64::from(self.warps_per_block())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Malloc,
    MemcpyH2D,
    MemcpyD2H,
    Memset,
    Free,
    SetHeapLimit,
    Launch,
    Call,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Malloc { sym: Symbol, bytes: u64 },
    MemcpyH2D { sym: Symbol, bytes: u64 },
    MemcpyD2H { sym: Symbol, bytes: u64 },
    Memset { sym: Symbol, bytes: u64 },
    Free { sym: Symbol },
    SetHeapLimit { bytes: u64 },
    Launch(LaunchOp),
    Call { callee: String },
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Malloc { .. } => OpKind::Malloc,
            Op::MemcpyH2D { .. } => OpKind::MemcpyH2D,
            Op::MemcpyD2H { .. } => OpKind::MemcpyD2H,
            Op::Memset { .. } => OpKind::Memset,
            Op::Free { .. } => OpKind::Free,
            Op::SetHeapLimit { .. } => OpKind::SetHeapLimit,
            Op::Launch(_) => OpKind::Launch,
            Op::Call { .. } => OpKind::Call,
        }
    }

    /// The memory object a non-launch op operates on.
    pub fn symbol(&self) -> Option<&str> {
        match self {
            Op::Malloc { sym, .. }
            | Op::MemcpyH2D { sym, .. }
            | Op::MemcpyD2H { sym, .. }
            | Op::Memset { sym, .. }
            | Op::Free { sym } => Some(sym),
            _ => None,
        }
    }

    pub fn bytes(&self) -> Option<u64> {
        match self {
            Op::Malloc { bytes, .. }
            | Op::MemcpyH2D { bytes, .. }
            | Op::MemcpyD2H { bytes, .. }
            | Op::Memset { bytes, .. }
            | Op::SetHeapLimit { bytes } => Some(*bytes),
            _ => None,
        }
    }

    pub fn as_launch(&self) -> Option<&LaunchOp> {
        match self {
            Op::Launch(l) => Some(l),
            _ => None,
        }
    }

    /// Memory operations are the ones eligible for lazy binding.
    pub fn is_memory_op(&self) -> bool {
        self.symbol().is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GpuOp {
    pub id: OpId,
    pub op: Op,
    /// Not statically bindable; routed through the lazy runtime.
    pub lazy: bool,
}

impl GpuOp {
    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock {
    pub label: Label,
    pub ops: Vec<GpuOp>,
    pub succs: Vec<Label>,
    /// Probability of taking the first successor of a two-way branch.
    pub taken_prob: Option<f64>,
}

impl BasicBlock {
    pub fn new(label: impl Into<Label>) -> Self {
        Self {
            label: label.into(),
            ops: Vec::new(),
            succs: Vec::new(),
            taken_prob: None,
        }
    }
}

/// One function: blocks keyed by label in declaration order. The first
/// block is the entry.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionGraph {
    pub name: String,
    pub blocks: IndexMap<Label, BasicBlock>,
}

impl FunctionGraph {
    pub fn entry(&self) -> &str {
        self.blocks
            .get_index(0)
            .map(|(l, _)| l.as_str())
            .expect("function has an entry block")
    }

    pub fn block(&self, label: &str) -> Option<&BasicBlock> {
        self.blocks.get(label)
    }

    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.get_index_of(label)
    }

    /// The unique block without successors.
    pub fn exit(&self) -> &str {
        self.blocks
            .values()
            .find(|b| b.succs.is_empty())
            .map(|b| b.label.as_str())
            .expect("validated function has an exit block")
    }

    pub fn exit_index(&self) -> usize {
        self.blocks
            .values()
            .position(|b| b.succs.is_empty())
            .expect("validated function has an exit block")
    }

    /// Successor lists by block index.
    pub fn successors(&self) -> Vec<Vec<usize>> {
        self.blocks
            .values()
            .map(|b| {
                b.succs
                    .iter()
                    .map(|s| self.block_index(s).expect("validated successor"))
                    .collect()
            })
            .collect()
    }

    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let succs = self.successors();
        let mut preds = vec![Vec::new(); succs.len()];
        for (b, ss) in succs.iter().enumerate() {
            for &s in ss {
                preds[s].push(b);
            }
        }
        preds
    }

    /// Block indices in reverse postorder from the entry, successors visited
    /// in declaration order.
    pub fn reverse_postorder(&self) -> Vec<usize> {
        reverse_postorder(&self.successors(), 0)
    }

    pub fn ops(&self) -> impl Iterator<Item = &GpuOp> {
        self.blocks.values().flat_map(|b| b.ops.iter())
    }
}

pub(crate) fn reverse_postorder(succs: &[Vec<usize>], root: usize) -> Vec<usize> {
    let mut visited = vec![false; succs.len()];
    let mut post = Vec::with_capacity(succs.len());
    // Iterative DFS: (node, next successor position).
    let mut stack = vec![(root, 0usize)];
    visited[root] = true;
    while let Some(&mut (node, ref mut pos)) = stack.last_mut() {
        if let Some(&next) = succs[node].get(*pos) {
            *pos += 1;
            if !visited[next] {
                visited[next] = true;
                stack.push((next, 0));
            }
        } else {
            post.push(node);
            stack.pop();
        }
    }
    post.reverse();
    post
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobClass {
    Small,
    Large,
}

impl fmt::Display for JobClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobClass::Small => "small",
            JobClass::Large => "large",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub name: String,
    pub class: Option<JobClass>,
    pub main: String,
    pub functions: IndexMap<String, FunctionGraph>,
}

impl Program {
    pub fn main_function(&self) -> &FunctionGraph {
        &self.functions[&self.main]
    }

    pub fn op_count(&self) -> usize {
        self.functions.values().map(|f| f.ops().count()).sum()
    }

    /// Number of ops excluding calls.
    pub fn gpu_op_count(&self) -> usize {
        self.functions
            .values()
            .flat_map(|f| f.ops())
            .filter(|o| o.kind() != OpKind::Call)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("line {line}: unknown symbol `{symbol}` (no malloc declares it)")]
    UnknownSymbol { line: usize, symbol: String },
    #[error("line {line}: unresolved block label `{label}`")]
    UnresolvedLabel { line: usize, label: String },
    #[error("line {line}: call to undefined function `{name}`")]
    UnresolvedFunction { line: usize, name: String },
    #[error("line {line}: block of {threads} threads exceeds the limit of {MAX_THREADS_PER_BLOCK}")]
    ThreadLimit { line: usize, threads: u64 },
    #[error("recursive call chain: {}", cycle.join(" -> "))]
    RecursiveCall { cycle: Vec<String> },
    #[error("function `{function}`: {msg}")]
    Structure { function: String, msg: String },
}
