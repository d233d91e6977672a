//! Turns an analyzed program plus one resolved execution path into the flat
//! step list a simulated job executes.

use rand::Rng;

use crate::tasks::{AnalyzedProgram, Pos};
use crate::trace::{walk_blocks, OpKind, WalkError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// Report the task's static request before its first operation.
    Probe { task: usize },
    /// Execute the op at this position; `task` owns it, if any.
    Op { pos: Pos, task: Option<usize> },
    /// The task has no further operations on this path.
    TaskEnd { task: usize },
}

/// Which task an op belongs to: launches by their unit task, memory ops by
/// the symbol's task.
pub fn task_of_ops(ap: &AnalyzedProgram) -> Vec<Vec<Option<usize>>> {
    let f = ap.function();
    let owner = ap.symbol_owner();
    let mut launch_owner = std::collections::BTreeMap::new();
    for (t, task) in ap.tasks.iter().enumerate() {
        for id in task.launch_ops() {
            launch_owner.insert(id, t);
        }
    }
    f.blocks
        .values()
        .map(|b| {
            b.ops
                .iter()
                .map(|o| match o.kind() {
                    OpKind::Launch => launch_owner.get(&o.id).copied(),
                    _ => o.op.symbol().and_then(|s| owner.get(s).copied()),
                })
                .collect()
        })
        .collect()
}

/// Resolves branches with `rng` and lays out probes and task ends around
/// the ops of the resulting path.
pub fn compile_steps<R: Rng + ?Sized>(
    ap: &AnalyzedProgram,
    rng: &mut R,
    max_block_visits: usize,
) -> Result<Vec<Step>, WalkError> {
    let f = ap.function();
    let path = walk_blocks(f, rng, max_block_visits)?;
    let owners = task_of_ops(ap);

    let mut dyn_ops: Vec<(Pos, Option<usize>)> = Vec::new();
    for &b in &path {
        for i in 0..f.blocks[b].ops.len() {
            dyn_ops.push((Pos::new(b, i), owners[b][i]));
        }
    }
    let n_tasks = ap.tasks.len();
    let mut last = vec![None; n_tasks];
    for (k, (_, t)) in dyn_ops.iter().enumerate() {
        if let Some(t) = t {
            last[*t] = Some(k);
        }
    }
    // Probe points by block index.
    let mut probes: Vec<Vec<(usize, usize)>> = vec![Vec::new(); f.blocks.len()];
    for (t, task) in ap.tasks.iter().enumerate() {
        if let Some(p) = &task.probe {
            let b = f.block_index(&p.block).expect("probe in this function");
            probes[b].push((p.index, t));
        }
    }

    let mut steps = Vec::with_capacity(dyn_ops.len() + 2 * n_tasks);
    let mut active = vec![false; n_tasks];
    let mut k = 0;
    for &b in &path {
        let len = f.blocks[b].ops.len();
        for i in 0..=len {
            for &(pi, t) in &probes[b] {
                if pi == i && !active[t] && last[t].is_some_and(|l| l >= k) {
                    active[t] = true;
                    steps.push(Step::Probe { task: t });
                }
            }
            if i == len {
                break;
            }
            let (pos, owner) = dyn_ops[k];
            steps.push(Step::Op { pos, task: owner });
            if let Some(t) = owner {
                if ap.tasks[t].lazy {
                    active[t] = true;
                }
                if last[t] == Some(k) && active[t] {
                    active[t] = false;
                    steps.push(Step::TaskEnd { task: t });
                }
            }
            k += 1;
        }
    }
    Ok(steps)
}
