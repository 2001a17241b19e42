//! Greedy decoding of tag distributions into a structurally valid program.

use super::heads::TagDistributions;
use super::input::ModelInput;
use crate::alignment::Span;
use crate::scalar::Scalar;
use crate::tags::{TagProgram, TokenTag};

/// Inclusive context index ranges of maximal same-turn runs.
pub fn turn_runs(input: &ModelInput) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let ids = &input.context_turn_ids;
    let mut lo = 0;
    for i in 1..=ids.len() {
        if i == ids.len() || ids[i] != ids[lo] {
            runs.push((lo, i - 1));
            lo = i;
        }
    }
    runs
}

/// Joint argmax of `p(start)·p(end)` over the NULL pair and every legal
/// `(start, end)` with `start ≤ end` inside one turn. Linear in the context
/// length: for each end the best start so far in its turn is kept.
pub fn best_span<T: Scalar>(start: &[T], end: &[T], input: &ModelInput) -> (Option<Span>, T) {
    let mut best = (None, start[0] * end[0]);
    for (lo, hi) in turn_runs(input) {
        let mut best_start = (lo, start[input.context_position(lo)]);
        for e in lo..=hi {
            let ps = start[input.context_position(e)];
            if ps > best_start.1 {
                best_start = (e, ps);
            }
            let score = best_start.1 * end[input.context_position(e)];
            if score > best.1 {
                best = (Some(Span::new(best_start.0, e)), score);
            }
        }
    }
    best
}

pub fn greedy_decode<T: Scalar>(dists: &TagDistributions<T>, input: &ModelInput) -> TagProgram {
    let last = dists.query_count() - 1;
    TagProgram::new(
        (0..dists.query_count())
            .map(|q| TokenTag {
                deletion: q != last && dists.deletion[q][1] > dists.deletion[q][0],
                insertion: best_span(&dists.start[q], &dists.end[q], input).0,
            })
            .collect(),
    )
}
