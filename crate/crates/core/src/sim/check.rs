//! An observer that checks the scheduler's safety properties as a run
//! unfolds.

use super::{Observer, SimView};
use crate::sched::PolicyKind;

#[derive(Debug, Clone, Default)]
pub struct InvariantChecker {
    /// Also check that no device sits idle while a pending request fits it.
    pub work_conservation: bool,
    pub events_checked: u64,
    pub violations: Vec<String>,
}

impl InvariantChecker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_work_conservation() -> Self {
        Self { work_conservation: true, ..Self::default() }
    }

    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn fail(&mut self, now: u64, msg: String) {
        // The first few are enough to diagnose a run.
        if self.violations.len() < 16 {
            self.violations.push(format!("t={now}us: {msg}"));
        }
    }
}

impl Observer for InvariantChecker {
    fn on_event(&mut self, v: &SimView<'_>) {
        self.events_checked += 1;
        let cfg = v.scheduler.config();
        for (d, dev) in v.scheduler.devices().iter().enumerate() {
            if let Err(e) = dev.check_invariants() {
                self.fail(v.now_us, format!("device {d}: {e}"));
            }
            let jobs = v.scheduler.jobs_on(d).len();
            match cfg.kind {
                PolicyKind::SingleAssignment if jobs > 1 => {
                    self.fail(v.now_us, format!("device {d} holds {jobs} jobs under sa"))
                }
                PolicyKind::CoreToGpu if jobs > cfg.cg_ratio as usize => {
                    self.fail(v.now_us, format!("device {d} holds {jobs} jobs over ratio {}", cfg.cg_ratio))
                }
                _ => {}
            }
        }
    }

    fn on_instant_end(&mut self, v: &SimView<'_>) {
        if !self.work_conservation || v.scheduler.config().job_granular() {
            return;
        }
        for (d, g) in v.gpus.iter().enumerate() {
            if g.running() > 0 {
                continue;
            }
            if let Some(r) = v.scheduler.pending().iter().find(|r| v.scheduler.fits_device(r, d)) {
                let msg = format!("device {d} idles while job {} task {} fits it", r.job_id, r.task_id);
                self.fail(v.now_us, msg);
            }
        }
    }
}
