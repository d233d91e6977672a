mod common;

use std::collections::BTreeSet;

use common::*;
use mgb_core::tasks::{analyze_program, build_unit_tasks, mark_lazy_ops, merge_unit_tasks, GpuTask, UnitTask};
use mgb_core::trace::{inline_calls, parse_program, OpId, OpKind, Program};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn components(tasks: &[GpuTask]) -> BTreeSet<BTreeSet<OpId>> {
    tasks.iter().map(|t| t.launch_ops().collect()).collect()
}

fn symbol_sets(units: &[UnitTask]) -> Vec<(OpId, BTreeSet<String>)> {
    units.iter().map(|u| (u.launch_op, u.mem_objs.clone())).collect()
}

fn units_of(k: &[(&str, &[&str])]) -> Vec<UnitTask> {
    let mut src = String::from("program p\nfunc p\n");
    let syms: BTreeSet<&str> = k.iter().flat_map(|(_, a)| a.iter().copied()).collect();
    for s in &syms {
        src += &format!("  malloc {s} 16\n");
    }
    for (name, args) in k {
        src += &format!("  launch {name} grid 1 1 1 block 32 1 1 args {} dur 1\n", args.join(","));
    }
    src += "end\n";
    build_unit_tasks(&parse_program(&src).unwrap()).unwrap()
}

fn kernels(tasks: &[GpuTask]) -> Vec<Vec<String>> {
    tasks.iter().map(|t| t.unit_tasks.iter().map(|u| u.kernel.clone()).collect()).collect()
}

#[test]
fn shared_symbol_merges_and_disjoint_stays_apart() {
    let units = units_of(&[("k1", &["A", "B"]), ("k2", &["B", "C"]), ("k3", &["D"])]);
    let want = components_by_union_find(&symbol_sets(&units));
    let tasks = merge_unit_tasks(units);
    assert_eq!(kernels(&tasks), [vec!["k1", "k2"], vec!["k3"]]);
    assert_eq!(components(&tasks), want);
}

#[test]
fn disjoint_launches_stay_separate() {
    let units = units_of(&[("k1", &["A"]), ("k2", &["B"]), ("k3", &["C"])]);
    assert_eq!(merge_unit_tasks(units).len(), 3);
}

#[test]
fn chains_merge_transitively() {
    let units = units_of(&[("k1", &["A", "B"]), ("k2", &["B", "C"]), ("k3", &["C", "D"])]);
    let want = components_by_union_find(&symbol_sets(&units));
    let tasks = merge_unit_tasks(units);
    assert_eq!(kernels(&tasks), [vec!["k1", "k2", "k3"]]);
    assert_eq!(components(&tasks), want);
}

#[test]
fn late_link_joins_earlier_components() {
    // k1 and k2 share nothing until k3 touches both.
    let units = units_of(&[("k1", &["A"]), ("k2", &["B"]), ("k3", &["A", "B"])]);
    assert_eq!(kernels(&merge_unit_tasks(units)), [vec!["k1", "k2", "k3"]]);
}

#[test]
fn bound_sets_match_all_paths_oracle_on_thirty_programs() {
    let mut r = rng(3);
    for _ in 0..30 {
        let p = random_program(&mut r, &GenOpts::default());
        let units = build_unit_tasks(&p).unwrap();
        let mut got: Vec<Bound> = units.iter().map(Bound::of).collect();
        got.sort_by_key(|b| b.launch);
        assert_eq!(got, binding_oracle(p.main_function()), "{p}");
    }
}

fn op_at(p: &Program, id: OpId) -> (usize, usize) {
    for (b, blk) in p.main_function().blocks.values().enumerate() {
        for (i, o) in blk.ops.iter().enumerate() {
            if o.id == id {
                return (b, i);
            }
        }
    }
    panic!("no op {id}")
}

/// Point before op `pi` of block `pb` lies on every path to op `o`.
fn point_dominates(dom: &[BTreeSet<usize>], (pb, pi): (usize, usize), (ob, oi): (usize, usize)) -> bool {
    if pb == ob {
        pi <= oi
    } else {
        dom[ob].contains(&pb)
    }
}

#[test]
fn probes_satisfy_dominance_under_the_oracle() {
    let mut r = rng(5);
    let mut checked = 0;
    while checked < 30 {
        let p = random_program(&mut r, &GenOpts { lazy_prob: 0.0, ..GenOpts::default() });
        let a = analyze_program(&p, false).unwrap();
        let f = a.function();
        let succs = f.successors();
        let dom = dominators_by_removal(&succs, 0);
        let pdom = dominators_by_removal(&reverse(&succs), f.exit_index());
        for t in a.tasks.iter().filter(|t| t.probe.is_some()) {
            let probe = t.probe.as_ref().unwrap();
            let at = (f.block_index(&probe.block).unwrap(), probe.index);
            assert!(at.1 <= f.blocks[at.0].ops.len());
            let ops: Vec<OpId> = t.bound_ops().into_iter().chain(t.launch_ops()).collect();
            for id in ops {
                assert!(point_dominates(&dom, at, op_at(&a.program, id)), "{p}");
            }
            // The heap limit the request reads must run before the probe.
            let first = op_at(&a.program, t.first_launch().launch_op);
            let heap_ops: Vec<(usize, usize)> = f
                .blocks
                .values()
                .enumerate()
                .flat_map(|(b, blk)| {
                    blk.ops.iter().enumerate().filter(|(_, o)| o.kind() == OpKind::SetHeapLimit).map(move |(i, _)| (b, i))
                })
                .filter(|&h| if h.0 == first.0 { h.1 < first.1 } else { dom[first.0].contains(&h.0) })
                .collect();
            let latest = heap_ops.iter().copied().find(|&h| {
                heap_ops.iter().all(|&o| o == h || (o.0 == h.0 && o.1 < h.1) || (o.0 != h.0 && dom[h.0].contains(&o.0)))
            });
            if let Some(h) = latest {
                let after = if at.0 == h.0 { at.1 > h.1 } else { pdom[h.0].contains(&at.0) };
                assert!(after, "probe {probe:?} precedes heap op {h:?}\n{p}");
            }
            checked += 1;
        }
    }
}

#[test]
fn fully_bindable_program_gets_no_lazy_flags() {
    let p = parse_program(&simple_job("j", 64 * MIB, 4, 128, 10)).unwrap();
    let a = analyze_program(&p, false).unwrap();
    assert_eq!(a.program, p);
    assert!(a.tasks.iter().all(|t| !t.lazy));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn merge_is_a_partition_with_disjoint_symbols(seed in any::<u64>()) {
        let p = random_program(&mut rng(seed), &GenOpts::default());
        let units = build_unit_tasks(&p).unwrap();
        let n = units.len();
        let tasks = merge_unit_tasks(units);
        prop_assert_eq!(tasks.iter().map(|t| t.unit_tasks.len()).sum::<usize>(), n);
        for (i, a) in tasks.iter().enumerate() {
            prop_assert!(!a.unit_tasks.is_empty());
            for b in &tasks[i + 1..] {
                prop_assert!(a.mem_objs.is_disjoint(&b.mem_objs));
            }
        }
    }

    #[test]
    fn merge_ignores_input_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = random_program(&mut r, &GenOpts::default());
        let units = build_unit_tasks(&p).unwrap();
        let want = components(&merge_unit_tasks(units.clone()));
        let mut shuffled = units;
        shuffled.shuffle(&mut r);
        prop_assert_eq!(components(&merge_unit_tasks(shuffled)), want);
    }

    #[test]
    fn bound_allocs_dominate_and_frees_postdominate(seed in any::<u64>()) {
        let p = random_program(&mut rng(seed), &GenOpts::default());
        let f = p.main_function();
        let succs = f.successors();
        let dom = dominators_by_removal(&succs, 0);
        let pdom = dominators_by_removal(&reverse(&succs), f.exit_index());
        for u in build_unit_tasks(&p).unwrap() {
            let (lb, li) = op_at(&p, u.launch_op);
            for id in u.alloc_ops.iter().chain(&u.h2d_ops).chain(&u.memset_ops) {
                let (b, i) = op_at(&p, *id);
                let before = if b == lb { i < li } else { dom[lb].contains(&b) };
                prop_assert!(before);
            }
            for id in u.free_ops.iter().chain(&u.d2h_ops) {
                let (b, i) = op_at(&p, *id);
                let after = if b == lb { i > li } else { pdom[lb].contains(&b) };
                prop_assert!(after);
            }
            for id in u.bound_ops() {
                let (b, i) = op_at(&p, id);
                let sym = f.blocks[b].ops[i].op.symbol().unwrap();
                prop_assert!(u.mem_objs.contains(sym));
            }
        }
    }

    #[test]
    fn bound_and_lazy_ops_partition_memory_ops(seed in any::<u64>()) {
        let p = random_program(&mut rng(seed), &GenOpts::default());
        let units = build_unit_tasks(&p).unwrap();
        let bound: BTreeSet<OpId> = units.iter().flat_map(|u| u.bound_ops()).collect();
        let marked = mark_lazy_ops(&p, &units);
        for o in marked.main_function().ops().filter(|o| o.op.is_memory_op()) {
            prop_assert!(bound.contains(&o.id) != o.lazy, "op {} bound and lazy disagree", o.id);
        }
        prop_assert_eq!(mark_lazy_ops(&marked, &units), marked.clone());
    }

    #[test]
    fn adding_a_malloc_never_shrinks_the_request(seed in any::<u64>(), extra in 1u64..(1 << 32)) {
        let p = random_program(&mut rng(seed), &GenOpts::default());
        let before = analyze_program(&p, false).unwrap();
        let Some(task) = before.tasks.iter().find(|t| !t.mem_objs.is_empty()) else { return Ok(()) };
        let sym = task.mem_objs.iter().next().unwrap().clone();
        let kernel = task.first_launch().kernel.clone();
        let text = p.to_string();
        // Prepend the malloc to the entry block so it dominates everything.
        let at = text.find("\nblock ").map(|i| text[i + 1..].find('\n').unwrap() + i + 2).unwrap();
        let grown = format!("{}  malloc {sym} {extra}\n{}", &text[..at], &text[at..]);
        let after = analyze_program(&parse_program(&grown).unwrap(), false).unwrap();
        let new_task = after.tasks.iter().find(|t| t.unit_tasks.iter().any(|u| u.kernel == kernel)).unwrap();
        prop_assert!(new_task.resources.mem_bytes >= task.resources.mem_bytes);
    }
}

#[test]
fn inlined_programs_analyze_like_their_flat_form() {
    let src = "\
program main
func main
block a
  call setup
  launch k grid 2 1 1 block 64 1 1 args A dur 1
  call teardown
end
func setup
block a
  malloc A 1048576
  memcpy_h2d A 1048576
end
func teardown
block a
  free A
end
";
    let p = parse_program(src).unwrap();
    let a = analyze_program(&p, false).unwrap();
    let flat = build_unit_tasks(&inline_calls(&p)).unwrap();
    assert_eq!(flat.len(), 1);
    assert_eq!(a.tasks[0].resources.mem_bytes, 1048576 + 8 * MIB);
    let kinds: Vec<OpKind> = a.function().ops().map(|o| o.kind()).collect();
    assert_eq!(kinds, [OpKind::Malloc, OpKind::MemcpyH2D, OpKind::Launch, OpKind::Free]);
    assert!(a.function().ops().all(|o| !o.lazy));
}
