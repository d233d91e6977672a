use std::collections::HashSet;

use indexmap::IndexMap;

use super::{BasicBlock, FunctionGraph, Label, Op, OpId, Program};

struct Inliner<'p> {
    program: &'p Program,
    used: HashSet<Label>,
    out: Vec<BasicBlock>,
    instances: usize,
}

impl Inliner<'_> {
    fn fresh(&mut self, want: String) -> Label {
        if self.used.insert(want.clone()) {
            return want;
        }
        let mut n = 1;
        loop {
            let candidate = format!("{want}_{n}");
            if self.used.insert(candidate.clone()) {
                return candidate;
            }
            n += 1;
        }
    }

    /// Emits the blocks of `fname` with labels mapped through `prefix`.
    /// Returns (entry label, exit block position in `out`).
    fn expand(&mut self, fname: &str, prefix: &str) -> (Label, usize) {
        let f = &self.program.functions[fname];
        // Fix every original block's new label up front so forward edges resolve.
        let names: IndexMap<&str, Label> = f
            .blocks
            .keys()
            .map(|l| (l.as_str(), self.fresh(format!("{prefix}{l}"))))
            .collect();
        let mut exit_pos = usize::MAX;
        for b in f.blocks.values() {
            let base = names[b.label.as_str()].clone();
            let mut cur = BasicBlock::new(base.clone());
            let mut continuation = 0;
            for op in &b.ops {
                let Op::Call { callee } = &op.op else {
                    cur.ops.push(op.clone());
                    continue;
                };
                self.instances += 1;
                let callee_prefix = format!("{callee}.{}.", self.instances);
                continuation += 1;
                let cont_label = self.fresh(format!("{base}.c{continuation}"));
                let pos = self.out.len();
                self.out.push(cur);
                let (callee_entry, callee_exit) = self.expand(callee, &callee_prefix);
                self.out[pos].succs = vec![callee_entry];
                self.out[callee_exit].succs = vec![cont_label.clone()];
                cur = BasicBlock::new(cont_label);
            }
            cur.succs = b.succs.iter().map(|s| names[s.as_str()].clone()).collect();
            cur.taken_prob = b.taken_prob;
            if cur.succs.is_empty() {
                exit_pos = self.out.len();
            }
            self.out.push(cur);
        }
        (names[f.entry()].clone(), exit_pos)
    }
}

/// Flattens every call reachable from main into a single function. Callee
/// blocks are relabeled `{callee}.{n}.{label}` (n counts inlined call sites)
/// and the code after a call moves to a continuation block `{label}.c{k}`.
/// Op ids are renumbered in block order; lazy flags are kept.
pub fn inline_calls(p: &Program) -> Program {
    let mut inl = Inliner { program: p, used: HashSet::new(), out: Vec::new(), instances: 0 };
    inl.expand(&p.main, "");
    let mut next: OpId = 0;
    let mut blocks = IndexMap::with_capacity(inl.out.len());
    for mut b in inl.out {
        for op in &mut b.ops {
            op.id = next;
            next += 1;
        }
        blocks.insert(b.label.clone(), b);
    }
    let main = FunctionGraph { name: p.main.clone(), blocks };
    let mut functions = IndexMap::new();
    functions.insert(p.main.clone(), main);
    Program { name: p.name.clone(), class: p.class, main: p.main.clone(), functions }
}
