//! Dominance by the iterative dataflow fixpoint.
//!
//! `dom(root) = {root}` and `dom(b) = {b} ∪ ⋂ dom(p)` over predecessors `p`,
//! iterated in reverse postorder until nothing changes. Post-dominance is the
//! same computation on the edge-reversed graph rooted at the exit.

use std::collections::BTreeSet;

use super::{reverse_postorder, FunctionGraph, Label};

#[derive(Clone, PartialEq, Eq)]
struct BitSet {
    words: Vec<u64>,
}

impl BitSet {
    fn empty(n: usize) -> Self {
        Self { words: vec![0; n.div_ceil(64)] }
    }

    fn full(n: usize) -> Self {
        let mut s = Self { words: vec![u64::MAX; n.div_ceil(64)] };
        if n % 64 != 0 {
            if let Some(last) = s.words.last_mut() {
                *last = (1u64 << (n % 64)) - 1;
            }
        }
        s
    }

    fn insert(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    fn contains(&self, i: usize) -> bool {
        self.words[i / 64] & (1 << (i % 64)) != 0
    }

    fn intersect_with(&mut self, other: &BitSet) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= *b;
        }
    }

    fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            (0..64).filter(move |b| w & (1u64 << b) != 0).map(move |b| wi * 64 + b)
        })
    }
}

/// Dominator sets and the immediate-dominator tree of one function (or of
/// its reversed graph, for post-dominance). Blocks are addressed by index in
/// declaration order or by label.
#[derive(Clone)]
pub struct DominatorMap {
    labels: Vec<Label>,
    root: usize,
    sets: Vec<BitSet>,
    idom: Vec<Option<usize>>,
}

impl std::fmt::Debug for DominatorMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut m = f.debug_map();
        for (i, l) in self.labels.iter().enumerate() {
            let set: Vec<&str> = self.sets[i].iter().map(|j| self.labels[j].as_str()).collect();
            m.entry(l, &set);
        }
        m.finish()
    }
}

impl DominatorMap {
    pub fn root(&self) -> usize {
        self.root
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `a` dominates `b` (reflexive).
    pub fn dominates_idx(&self, a: usize, b: usize) -> bool {
        self.sets[b].contains(a)
    }

    pub fn dominates(&self, a: &str, b: &str) -> bool {
        match (self.index(a), self.index(b)) {
            (Some(a), Some(b)) => self.dominates_idx(a, b),
            _ => false,
        }
    }

    pub fn dom_set_idx(&self, b: usize) -> Vec<usize> {
        self.sets[b].iter().collect()
    }

    pub fn dom_set(&self, label: &str) -> BTreeSet<&str> {
        let Some(b) = self.index(label) else { return BTreeSet::new() };
        self.sets[b].iter().map(|i| self.labels[i].as_str()).collect()
    }

    pub fn idom_idx(&self, b: usize) -> Option<usize> {
        self.idom[b]
    }

    pub fn idom(&self, label: &str) -> Option<&str> {
        self.index(label).and_then(|b| self.idom[b]).map(|i| self.labels[i].as_str())
    }

    /// Nearest common dominator of a non-empty set of blocks.
    pub fn common_dominator(&self, blocks: impl IntoIterator<Item = usize>) -> Option<usize> {
        let mut iter = blocks.into_iter();
        let first = iter.next()?;
        let mut acc = self.sets[first].clone();
        for b in iter {
            acc.intersect_with(&self.sets[b]);
        }
        // Common dominators form a chain; the deepest has the largest set.
        acc.iter().max_by_key(|&d| self.sets[d].len())
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Dominator sets over an arbitrary graph given by predecessor lists. Nodes
/// unreachable from `root` keep the full set.
fn iterative_dominators(succs: &[Vec<usize>], preds: &[Vec<usize>], root: usize) -> Vec<BitSet> {
    let n = succs.len();
    let mut sets: Vec<BitSet> = (0..n).map(|_| BitSet::full(n)).collect();
    sets[root] = BitSet::empty(n);
    sets[root].insert(root);
    let order = reverse_postorder(succs, root);
    let mut reachable = vec![false; n];
    for &b in &order {
        reachable[b] = true;
    }
    let mut changed = true;
    while changed {
        changed = false;
        for &b in &order {
            if b == root {
                continue;
            }
            let mut new = BitSet::full(n);
            for &p in &preds[b] {
                if reachable[p] {
                    new.intersect_with(&sets[p]);
                }
            }
            new.insert(b);
            if new != sets[b] {
                sets[b] = new;
                changed = true;
            }
        }
    }
    sets
}

fn build(labels: Vec<Label>, root: usize, sets: Vec<BitSet>) -> DominatorMap {
    let idom = (0..labels.len())
        .map(|b| {
            if b == root {
                return None;
            }
            // The strict dominator closest to `b` is dominated by all others.
            sets[b].iter().filter(|&d| d != b).max_by_key(|&d| sets[d].len())
        })
        .collect();
    DominatorMap { labels, root, sets, idom }
}

pub fn compute_dominators(f: &FunctionGraph) -> DominatorMap {
    let succs = f.successors();
    let preds = f.predecessors();
    let sets = iterative_dominators(&succs, &preds, 0);
    build(f.blocks.keys().cloned().collect(), 0, sets)
}

pub fn compute_postdominators(f: &FunctionGraph) -> DominatorMap {
    let succs = f.successors();
    let preds = f.predecessors();
    let exit = f.exit_index();
    // Reversed graph: successors become predecessors.
    let sets = iterative_dominators(&preds, &succs, exit);
    build(f.blocks.keys().cloned().collect(), exit, sets)
}
