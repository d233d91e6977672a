//! Lazy binding: allocations get pseudo addresses, later operations on them
//! are queued, and the queues are replayed on a real device once a launch
//! has been placed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::tasks::ResourceRequest;
use crate::trace::{LaunchOp, Op, OpKind, Symbol};
use crate::DEFAULT_HEAP_BYTES;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct PseudoAddress {
    /// Starts at 1 and only grows; lives in its own tag space, apart from
    /// device addresses.
    pub id: u64,
    pub symbol: Symbol,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recorded {
    pub seq: u64,
    pub op: Op,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Binding {
    pub device: usize,
    /// Bytes the replay left allocated on the device.
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LazyError {
    #[error("pseudo address {0} is already bound to a device")]
    AlreadyBound(u64),
    #[error("unknown pseudo address {0}")]
    UnknownAddress(u64),
    #[error("launch of `{kernel}` uses `{symbol}`, which has no recorded allocation")]
    EmptyQueue { kernel: String, symbol: Symbol },
    #[error("{0:?} cannot be recorded on a pseudo address")]
    Unsupported(OpKind),
}

#[derive(Debug, Clone, Default)]
pub struct LazyState {
    next_id: u64,
    next_seq: u64,
    queues: BTreeMap<PseudoAddress, Vec<Recorded>>,
    current: BTreeMap<Symbol, PseudoAddress>,
    bound: BTreeMap<u64, Binding>,
    heap_limit: Option<u64>,
    heap_log: Vec<u64>,
}

impl LazyState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn heap_limit_bytes(&self) -> u64 {
        self.heap_limit.unwrap_or(DEFAULT_HEAP_BYTES)
    }

    /// Every heap limit ever set, in order.
    pub fn heap_log(&self) -> &[u64] {
        &self.heap_log
    }

    pub fn set_heap_limit(&mut self, bytes: u64) {
        self.heap_limit = Some(bytes);
        self.heap_log.push(bytes);
    }

    fn push(&mut self, addr: &PseudoAddress, op: Op) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queues.entry(addr.clone()).or_default().push(Recorded { seq, op });
    }

    pub fn lazy_alloc(&mut self, sym: &str, bytes: u64) -> PseudoAddress {
        self.next_id += 1;
        let addr = PseudoAddress { id: self.next_id, symbol: sym.to_string() };
        self.push(&addr, Op::Malloc { sym: sym.to_string(), bytes });
        self.current.insert(sym.to_string(), addr.clone());
        addr
    }

    pub fn address_of(&self, sym: &str) -> Option<&PseudoAddress> {
        self.current.get(sym)
    }

    pub fn binding(&self, addr: &PseudoAddress) -> Option<Binding> {
        self.bound.get(&addr.id).copied()
    }

    pub fn is_bound(&self, addr: &PseudoAddress) -> bool {
        self.bound.contains_key(&addr.id)
    }

    pub fn queue(&self, addr: &PseudoAddress) -> Option<&[Recorded]> {
        self.queues.get(addr).map(Vec::as_slice)
    }

    pub fn record_op(&mut self, addr: &PseudoAddress, op: Op) -> Result<(), LazyError> {
        if self.is_bound(addr) {
            return Err(LazyError::AlreadyBound(addr.id));
        }
        if !self.queues.contains_key(addr) {
            return Err(LazyError::UnknownAddress(addr.id));
        }
        match op.kind() {
            OpKind::MemcpyH2D | OpKind::MemcpyD2H | OpKind::Memset | OpKind::Free => {}
            OpKind::SetHeapLimit => {
                let bytes = op.bytes().unwrap_or(0);
                self.set_heap_limit(bytes);
            }
            k => return Err(LazyError::Unsupported(k)),
        }
        self.push(addr, op);
        Ok(())
    }

    /// Device bytes an unbound address will occupy once replayed: its
    /// allocation, cancelled by a recorded free.
    fn pending_bytes(queue: &[Recorded]) -> u64 {
        let mut bytes = 0;
        for r in queue {
            match r.op {
                Op::Malloc { bytes: b, .. } => bytes = b,
                Op::Free { .. } => bytes = 0,
                _ => {}
            }
        }
        bytes
    }

    fn unbound_addresses<'s>(&self, symbols: impl IntoIterator<Item = &'s str>) -> BTreeSet<PseudoAddress> {
        symbols
            .into_iter()
            .filter_map(|s| self.current.get(s))
            .filter(|a| !self.is_bound(a))
            .cloned()
            .collect()
    }

    /// The request to submit before `launch` may run. `extra` names further
    /// objects of the same task whose pending allocations should be covered
    /// now. With a static part, its heap term already counts; without one
    /// the current heap limit is added and the shape comes from `launch`.
    pub fn kernel_launch_prepare<'a>(
        &'a self,
        launch: &'a LaunchOp,
        extra: impl IntoIterator<Item = &'a str>,
        static_req: Option<&ResourceRequest>,
    ) -> Result<ResourceRequest, LazyError> {
        for a in &launch.args {
            let known = self.current.get(a).is_some_and(|addr| {
                self.is_bound(addr) || self.queues.get(addr).is_some_and(|q| !q.is_empty())
            });
            if !known {
                return Err(LazyError::EmptyQueue { kernel: launch.kernel.clone(), symbol: a.clone() });
            }
        }
        let syms = launch.args.iter().map(String::as_str).chain(extra);
        let pending: u64 =
            self.unbound_addresses(syms).iter().map(|a| Self::pending_bytes(&self.queues[a])).sum();
        let mut req = match static_req {
            Some(s) => *s,
            None => {
                let heap = self.heap_limit_bytes();
                ResourceRequest {
                    mem_bytes: heap,
                    heap_limit_bytes: heap,
                    thread_blocks: launch.thread_blocks(),
                    threads_per_block: launch.threads_per_block(),
                    warps_per_block: launch.warps_per_block(),
                    total_warps: launch.total_warps(),
                    regs_per_thread: launch.regs_per_thread,
                    smem_per_block: launch.smem_per_block,
                    est_duration_us: launch.duration_us,
                }
            }
        };
        req.mem_bytes = req.mem_bytes.saturating_add(pending);
        Ok(req)
    }

    /// Executes the queued ops of the named objects on `device` in recording
    /// order and binds their addresses. Returns the ops replayed.
    pub fn replay<'s>(
        &mut self,
        symbols: impl IntoIterator<Item = &'s str>,
        device: usize,
    ) -> Vec<(PseudoAddress, Op)> {
        let addrs = self.unbound_addresses(symbols);
        let mut ops: Vec<(u64, PseudoAddress, Op)> = Vec::new();
        for a in addrs {
            let queue = self.queues.remove(&a).unwrap_or_default();
            let bytes = Self::pending_bytes(&queue);
            ops.extend(queue.into_iter().map(|r| (r.seq, a.clone(), r.op)));
            self.bound.insert(a.id, Binding { device, bytes });
        }
        ops.sort_by_key(|(seq, ..)| *seq);
        ops.into_iter().map(|(_, a, op)| (a, op)).collect()
    }

    /// Human-readable dump of all pending queues.
    pub fn dump_queues(&self) -> String {
        let mut s = String::new();
        for (a, q) in &self.queues {
            let ops: Vec<String> = q.iter().map(|r| format!("{:?}", r.op.kind())).collect();
            let _ = writeln!(s, "#{} {}: [{}]", a.id, a.symbol, ops.join(", "));
        }
        let _ = writeln!(s, "heap_limit {}", self.heap_limit_bytes());
        s
    }
}
