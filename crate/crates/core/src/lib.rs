//! Compiler-guided sharing of multiple GPUs among batch jobs, modeled end to
//! end: trace programs are analyzed into GPU tasks with resource requests,
//! and a discrete-event simulator schedules those tasks onto simulated
//! multi-SM devices under several policies.

pub mod device;
pub mod lazy;
pub mod metrics;
pub mod sched;
pub mod sim;
pub mod tasks;
pub mod trace;
pub mod workload;

/// Threads per warp.
pub const WARP_SIZE: u64 = 32;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;
/// On-device malloc heap when a program never sets one.
pub const DEFAULT_HEAP_BYTES: u64 = 8 * MIB;
