use rand::Rng;

use super::{BasicBlock, FunctionGraph, Label};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WalkError {
    #[error("execution of `{function}` exceeded {limit} block visits")]
    StepLimit { function: String, limit: usize },
}

/// Picks the successor of `b`. Two-way branches take the first successor
/// with the annotated probability (0.5 when absent); only they consume
/// randomness, so inlining does not shift the random stream.
pub fn next_block<'b, R: Rng + ?Sized>(b: &'b BasicBlock, rng: &mut R) -> Option<&'b Label> {
    match b.succs.as_slice() {
        [] => None,
        [only] => Some(only),
        [first, second, ..] => {
            let p = b.taken_prob.unwrap_or(0.5);
            Some(if rng.gen_bool(p) { first } else { second })
        }
    }
}

/// One execution path from entry to exit as block indices.
pub fn walk_blocks<R: Rng + ?Sized>(
    f: &FunctionGraph,
    rng: &mut R,
    max_steps: usize,
) -> Result<Vec<usize>, WalkError> {
    let mut path = Vec::new();
    let mut cur = 0usize;
    loop {
        if path.len() >= max_steps {
            return Err(WalkError::StepLimit { function: f.name.clone(), limit: max_steps });
        }
        path.push(cur);
        match next_block(&f.blocks[cur], rng) {
            None => return Ok(path),
            Some(l) => cur = f.block_index(l).expect("validated successor"),
        }
    }
}
