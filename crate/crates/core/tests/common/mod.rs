//! Generators and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use mgb_core::tasks::UnitTask;
use mgb_core::trace::{parse_program, FunctionGraph, Op, OpId, OpKind, Program};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn reach(succs: &[Vec<usize>], root: usize, removed: Option<usize>) -> Vec<bool> {
    let mut seen = vec![false; succs.len()];
    if Some(root) == removed {
        return seen;
    }
    let mut stack = vec![root];
    seen[root] = true;
    while let Some(b) = stack.pop() {
        for &s in &succs[b] {
            if !seen[s] && Some(s) != removed {
                seen[s] = true;
                stack.push(s);
            }
        }
    }
    seen
}

pub fn reverse(succs: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut preds = vec![Vec::new(); succs.len()];
    for (b, ss) in succs.iter().enumerate() {
        for &s in ss {
            preds[s].push(b);
        }
    }
    preds
}

/// Entry is block 0, the last block is the only exit, every block is
/// reachable and reaches the exit.
pub fn random_cfg(rng: &mut impl Rng, n: usize) -> Vec<Vec<usize>> {
    loop {
        let mut succs = vec![Vec::new(); n];
        for (i, ss) in succs.iter_mut().enumerate().take(n - 1) {
            let first = if rng.gen_bool(0.5) { i + 1 } else { rng.gen_range(i + 1..n) };
            ss.push(first);
            if rng.gen_bool(0.45) {
                let second = rng.gen_range(0..n);
                if second != first {
                    ss.push(second);
                }
            }
        }
        if reach(&succs, 0, None).into_iter().all(|r| r) {
            return succs;
        }
    }
}

/// `dom[b]` holds `d` iff every path from `root` to `b` passes `d`, decided
/// by deleting `d` and checking whether `b` is still reachable.
pub fn dominators_by_removal(succs: &[Vec<usize>], root: usize) -> Vec<BTreeSet<usize>> {
    let n = succs.len();
    let mut dom = vec![BTreeSet::new(); n];
    for d in 0..n {
        let r = reach(succs, root, Some(d));
        for (b, set) in dom.iter_mut().enumerate() {
            if b == d || !r[b] {
                set.insert(d);
            }
        }
    }
    dom
}

/// Blocks common to every simple path from `from` to `to`.
pub fn on_every_path(succs: &[Vec<usize>], from: usize, to: usize) -> BTreeSet<usize> {
    fn dfs(
        succs: &[Vec<usize>],
        b: usize,
        to: usize,
        on_path: &mut Vec<bool>,
        acc: &mut Option<Vec<bool>>,
    ) {
        if b == to {
            match acc {
                None => *acc = Some(on_path.clone()),
                Some(a) => a.iter_mut().zip(on_path.iter()).for_each(|(x, &y)| *x &= y),
            }
            return;
        }
        for &s in &succs[b] {
            if !on_path[s] {
                on_path[s] = true;
                dfs(succs, s, to, on_path, acc);
                on_path[s] = false;
            }
        }
    }
    let mut on_path = vec![false; succs.len()];
    on_path[from] = true;
    let mut acc = None;
    dfs(succs, from, to, &mut on_path, &mut acc);
    acc.map(|a| a.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i).collect())
        .unwrap_or_default()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bound {
    pub launch: OpId,
    pub mem_objs: BTreeSet<String>,
    pub alloc: BTreeSet<OpId>,
    pub h2d: BTreeSet<OpId>,
    pub memset: BTreeSet<OpId>,
    pub d2h: BTreeSet<OpId>,
    pub free: BTreeSet<OpId>,
}

impl Bound {
    pub fn of(u: &UnitTask) -> Self {
        Self {
            launch: u.launch_op,
            mem_objs: u.mem_objs.clone(),
            alloc: u.alloc_ops.clone(),
            h2d: u.h2d_ops.clone(),
            memset: u.memset_ops.clone(),
            d2h: u.d2h_ops.clone(),
            free: u.free_ops.clone(),
        }
    }
}

/// Binding by path enumeration: ops that set up a launch argument must lie
/// on every path from the entry to the launch, ops that tear it down on
/// every path from the launch to the exit.
pub fn binding_oracle(f: &FunctionGraph) -> Vec<Bound> {
    let succs: Vec<Vec<usize>> = f
        .blocks
        .values()
        .map(|b| b.succs.iter().map(|s| f.blocks.get_index_of(s).unwrap()).collect())
        .collect();
    let exit = succs.iter().position(|s| s.is_empty()).unwrap();
    let mut out = Vec::new();
    for (lb, blk) in f.blocks.values().enumerate() {
        for (li, op) in blk.ops.iter().enumerate() {
            let Op::Launch(l) = &op.op else { continue };
            let before = on_every_path(&succs, 0, lb);
            let after = on_every_path(&succs, lb, exit);
            let mut b = Bound { launch: op.id, mem_objs: l.args.iter().cloned().collect(), ..Bound::default() };
            for (ob, oblk) in f.blocks.values().enumerate() {
                for (oi, o) in oblk.ops.iter().enumerate() {
                    let Some(sym) = o.op.symbol() else { continue };
                    if o.lazy || !b.mem_objs.contains(sym) {
                        continue;
                    }
                    let pre = if ob == lb { oi < li } else { before.contains(&ob) };
                    let post = if ob == lb { oi > li } else { after.contains(&ob) };
                    match o.kind() {
                        OpKind::Malloc if pre => b.alloc.insert(o.id),
                        OpKind::MemcpyH2D if pre => b.h2d.insert(o.id),
                        OpKind::Memset if pre => b.memset.insert(o.id),
                        OpKind::MemcpyD2H if post => b.d2h.insert(o.id),
                        OpKind::Free if post => b.free.insert(o.id),
                        _ => false,
                    };
                }
            }
            out.push(b);
        }
    }
    out.sort_by_key(|b| b.launch);
    out
}

/// Connected components of the shares-a-symbol relation, by union-find.
pub fn components_by_union_find(units: &[(OpId, BTreeSet<String>)]) -> BTreeSet<BTreeSet<OpId>> {
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        let mut c = x;
        while parent[c] != r {
            let next = parent[c];
            parent[c] = r;
            c = next;
        }
        r
    }
    let mut parent: Vec<usize> = (0..units.len()).collect();
    let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, (_, syms)) in units.iter().enumerate() {
        for s in syms {
            match owner.get(s.as_str()) {
                Some(&j) => {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
                None => {
                    owner.insert(s, i);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<OpId>> = BTreeMap::new();
    for (i, (id, _)) in units.iter().enumerate() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().insert(*id);
    }
    groups.into_values().collect()
}

#[derive(Debug, Clone)]
pub struct GenOpts {
    pub max_blocks: usize,
    pub max_ops: usize,
    pub symbols: usize,
    pub lazy_prob: f64,
    pub heap_ops: bool,
    pub max_alloc: u64,
    /// Probability of taking the first successor of two-way branches.
    pub taken_prob: Option<f64>,
}

impl Default for GenOpts {
    fn default() -> Self {
        Self {
            max_blocks: 20,
            max_ops: 12,
            symbols: 4,
            lazy_prob: 0.1,
            heap_ops: true,
            max_alloc: 2 * GIB,
            taken_prob: None,
        }
    }
}

fn cfg_header(out: &mut String, succs: &[Vec<usize>], b: usize, prob: Option<f64>) {
    write!(out, "block b{b}").unwrap();
    if !succs[b].is_empty() {
        out.push_str(" succ");
        for s in &succs[b] {
            write!(out, " b{s}").unwrap();
        }
    }
    if succs[b].len() == 2 {
        if let Some(p) = prob {
            write!(out, " prob {p}").unwrap();
        }
    }
    out.push('\n');
}

fn launch_line(rng: &mut impl Rng, name: &str, args: &[String]) -> String {
    let grid = rng.gen_range(1..=64);
    let block = *[32, 64, 128, 256, 512, 1024].choose(rng).unwrap();
    let dur = rng.gen_range(1..=50);
    let mut s = format!("launch {name} grid {grid} 1 1 block {block} 1 1");
    if !args.is_empty() {
        write!(s, " args {}", args.join(",")).unwrap();
    }
    write!(s, " dur {dur}.000").unwrap();
    s
}

/// A random single-function program: `≤ max_blocks` blocks, `≤ max_ops` ops.
/// Every referenced symbol has a malloc somewhere, so the text parses.
pub fn random_program_text(rng: &mut impl Rng, o: &GenOpts) -> String {
    let n = rng.gen_range(1..=o.max_blocks);
    let succs = random_cfg(rng, n);
    let m = rng.gen_range(0..=o.max_ops);
    let k = rng.gen_range(1..=o.symbols).min(m.max(1));
    let syms: Vec<String> = (0..k).map(|i| format!("s{i}")).collect();
    let mut blocks: Vec<Vec<String>> = vec![Vec::new(); n];
    let mallocs = k.min(m);
    for s in syms.iter().take(mallocs) {
        let bytes = rng.gen_range(1..=o.max_alloc / MIB) * MIB;
        let lazy = if rng.gen_bool(o.lazy_prob) { " lazy" } else { "" };
        blocks[rng.gen_range(0..n)].push(format!("malloc {s} {bytes}{lazy}"));
    }
    let declared = &syms[..mallocs];
    for i in mallocs..m {
        let b = rng.gen_range(0..n);
        let lazy = if rng.gen_bool(o.lazy_prob) { " lazy" } else { "" };
        let roll = rng.gen_range(0..10);
        let line = if declared.is_empty() || roll < 3 {
            let n_args = rng.gen_range(0..=declared.len().min(3));
            let args: Vec<String> = declared.choose_multiple(rng, n_args).cloned().collect();
            launch_line(rng, &format!("k{i}"), &args)
        } else if roll == 9 && o.heap_ops {
            format!("set_heap_limit {}", rng.gen_range(1..=64) * MIB)
        } else {
            let s = declared.choose(rng).unwrap();
            let bytes = rng.gen_range(1..=64) * MIB;
            match roll {
                3 | 4 => format!("memcpy_h2d {s} {bytes}{lazy}"),
                5 => format!("memset {s} {bytes}{lazy}"),
                6 | 7 => format!("memcpy_d2h {s} {bytes}{lazy}"),
                _ => format!("free {s}{lazy}"),
            }
        };
        blocks[b].push(line);
    }
    let mut out = String::from("program rand\nfunc rand\n");
    for b in 0..n {
        cfg_header(&mut out, &succs, b, o.taken_prob);
        for l in &blocks[b] {
            writeln!(out, "  {l}").unwrap();
        }
    }
    out.push_str("end\n");
    out
}

pub fn random_program(rng: &mut impl Rng, o: &GenOpts) -> Program {
    let text = random_program_text(rng, o);
    parse_program(&text).unwrap_or_else(|e| panic!("generated program does not parse: {e}\n{text}"))
}

/// A program whose memory ops are all statically bindable: regions of
/// allocate-and-copy, launches (some inside do-while loops and after
/// empty diamonds), then copy-back and free. Launches always run.
pub fn bindable_program_text(rng: &mut impl Rng, max_alloc: u64) -> String {
    let regions = rng.gen_range(1..=3);
    let mut lines: Vec<String> = Vec::new();
    let mut next = 0usize;
    let label = |next: &mut usize| {
        *next += 1;
        format!("b{}", *next - 1)
    };
    // Each entry: (label, succs, prob, ops)
    let mut blocks: Vec<(String, Vec<String>, Option<f64>, Vec<String>)> = Vec::new();
    let mut head = vec![];
    if rng.gen_bool(0.3) {
        head.push(format!("set_heap_limit {}", rng.gen_range(1..=64) * MIB));
    }
    let mut cur = (label(&mut next), Vec::new(), None, head);
    for r in 0..regions {
        let k = rng.gen_range(1..=3);
        let syms: Vec<String> = (0..k).map(|i| format!("r{r}s{i}")).collect();
        for s in &syms {
            cur.3.push(format!("malloc {s} {}", rng.gen_range(1..=max_alloc / MIB) * MIB));
            if rng.gen_bool(0.6) {
                cur.3.push(format!("memcpy_h2d {s} {}", rng.gen_range(1..=64) * MIB));
            }
            if rng.gen_bool(0.2) {
                cur.3.push(format!("memset {s} {}", rng.gen_range(1..=64) * MIB));
            }
        }
        if rng.gen_bool(0.4) {
            // An empty diamond between setup and use.
            let (a, b, j) = (label(&mut next), label(&mut next), label(&mut next));
            cur.1 = vec![a.clone(), b.clone()];
            blocks.push(cur);
            blocks.push((a, vec![j.clone()], None, Vec::new()));
            blocks.push((b, vec![j.clone()], None, Vec::new()));
            cur = (j, Vec::new(), None, Vec::new());
        }
        // Every symbol is an argument of at least one launch.
        let mut unused: Vec<String> = syms.clone();
        let launches = rng.gen_range(1..=3);
        for li in 0..launches {
            let mut args: Vec<String> = if li + 1 == launches {
                std::mem::take(&mut unused)
            } else {
                let n = rng.gen_range(1..=syms.len());
                syms.choose_multiple(rng, n).cloned().collect()
            };
            unused.retain(|s| !args.contains(s));
            args.sort();
            args.dedup();
            if args.is_empty() {
                args.push(syms[0].clone());
            }
            let line = launch_line(rng, &format!("r{r}k{li}"), &args);
            if rng.gen_bool(0.3) {
                // do { launch } while (...)
                let body = label(&mut next);
                let after = label(&mut next);
                cur.1 = vec![body.clone()];
                blocks.push(cur);
                blocks.push((body.clone(), vec![body.clone(), after.clone()], Some(0.3), vec![line]));
                cur = (after, Vec::new(), None, Vec::new());
            } else {
                cur.3.push(line);
            }
        }
        for s in &syms {
            if rng.gen_bool(0.6) {
                cur.3.push(format!("memcpy_d2h {s} {}", rng.gen_range(1..=64) * MIB));
            }
            cur.3.push(format!("free {s}"));
        }
    }
    blocks.push(cur);
    lines.push("program bind".into());
    lines.push("func bind".into());
    for (l, succ, prob, ops) in blocks {
        let mut h = format!("block {l}");
        if !succ.is_empty() {
            write!(h, " succ {}", succ.join(" ")).unwrap();
        }
        if let Some(p) = prob {
            write!(h, " prob {p}").unwrap();
        }
        lines.push(h);
        lines.extend(ops.into_iter().map(|o| format!("  {o}")));
    }
    lines.push("end".into());
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

/// Functions `f0` (main) .. `fk`, each calling only higher-numbered ones.
pub fn random_program_with_calls(rng: &mut impl Rng) -> String {
    let nf = rng.gen_range(1..=4);
    let mut out = String::from("program f0\n");
    for f in 0..nf {
        let n = rng.gen_range(1..=6);
        let succs = random_cfg(rng, n);
        writeln!(out, "func f{f}").unwrap();
        for b in 0..n {
            cfg_header(&mut out, &succs, b, Some(0.7));
            for i in 0..rng.gen_range(0..=3) {
                if f + 1 < nf && rng.gen_bool(0.35) {
                    writeln!(out, "  call f{}", rng.gen_range(f + 1..nf)).unwrap();
                } else if f == 0 && b == 0 && i == 0 {
                    writeln!(out, "  malloc m0 {}", MIB).unwrap();
                } else {
                    let line = launch_line(rng, &format!("f{f}b{b}k{i}"), &[]);
                    writeln!(out, "  {line}").unwrap();
                }
            }
        }
        out.push_str("end\n");
    }
    out
}

/// Executes the un-inlined program, expanding calls as they are reached,
/// and records the text of every non-call op. Two-way branches draw one
/// coin each; nothing else touches the generator.
pub fn interpret(p: &Program, rng: &mut impl Rng, max_visits: usize) -> Option<Vec<String>> {
    fn run(
        p: &Program,
        f: &FunctionGraph,
        rng: &mut dyn rand::RngCore,
        visits: &mut usize,
        max: usize,
        out: &mut Vec<String>,
    ) -> bool {
        let mut cur = 0usize;
        loop {
            *visits += 1;
            if *visits > max {
                return false;
            }
            let b = &f.blocks[cur];
            for o in &b.ops {
                match &o.op {
                    Op::Call { callee } => {
                        if !run(p, &p.functions[callee], rng, visits, max, out) {
                            return false;
                        }
                    }
                    _ => out.push(op_text(&o.op)),
                }
            }
            let next = match b.succs.as_slice() {
                [] => return true,
                [only] => only,
                [a, c, ..] => {
                    if rng.gen_bool(b.taken_prob.unwrap_or(0.5)) {
                        a
                    } else {
                        c
                    }
                }
            };
            cur = f.blocks.get_index_of(next).unwrap();
        }
    }
    let mut out = Vec::new();
    let mut visits = 0;
    run(p, p.main_function(), rng, &mut visits, max_visits, &mut out).then_some(out)
}

/// Op text without its id or lazy flag.
pub fn op_text(op: &Op) -> String {
    match op {
        Op::Launch(l) => format!("launch {} {:?} {:?} {:?} {}", l.kernel, l.grid, l.block, l.args, l.duration_us),
        other => format!("{:?} {:?} {:?}", other.kind(), other.symbol(), other.bytes()),
    }
}

/// Straight-line trace of one job: allocate, copy in, launch, copy out, free.
pub fn simple_job(name: &str, bytes: u64, grid: u32, block: u32, dur_ms: u64) -> String {
    format!(
        "program {name}\nfunc {name}\nblock b0\n  malloc a {bytes}\n  memcpy_h2d a {bytes}\n  \
         launch k grid {grid} 1 1 block {block} 1 1 args a dur {dur_ms}.000\n  memcpy_d2h a {bytes}\n  free a\nend\n"
    )
}
