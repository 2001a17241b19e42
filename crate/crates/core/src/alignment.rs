//! LCS alignment between token sequences and closest-occurrence phrase search
//! inside a flattened context.

use serde::{Deserialize, Serialize};

use crate::dialogue::{FlatContext, Token};

/// Index pairs `(input, reference)`, strictly increasing in both coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Alignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Alignment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Inclusive `[start, end]` range in context token space. The absent span is
/// represented as `Option::None` and serialized as `[-1, -1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    /// True when the span lies inside `ctx` without crossing a turn boundary.
    pub fn is_valid_in(&self, ctx: &FlatContext) -> bool {
        self.start <= self.end
            && self.end < ctx.len()
            && ctx.turn_ids[self.start] == ctx.turn_ids[self.end]
    }
}

/// Longest common subsequence by dynamic programming, O(|a|·|b|) time and space.
///
/// Backtrace from the bottom-right corner: take the diagonal when the tokens
/// match and the diagonal attains the cell value, otherwise step the input
/// index down when that keeps the value, otherwise step the reference index.
pub fn lcs_align<T: PartialEq>(a: &[T], b: &[T]) -> Alignment {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Alignment::default();
    }
    let w = m + 1;
    let mut dp = vec![0u32; (n + 1) * w];
    for i in 1..=n {
        for j in 1..=m {
            dp[i * w + j] = if a[i - 1] == b[j - 1] {
                dp[(i - 1) * w + j - 1] + 1
            } else {
                dp[(i - 1) * w + j].max(dp[i * w + j - 1])
            };
        }
    }

    let mut pairs = Vec::with_capacity(dp[n * w + m] as usize);
    let (mut i, mut j) = (n, m);
    while i > 0 && j > 0 {
        let here = dp[i * w + j];
        if a[i - 1] == b[j - 1] && here == dp[(i - 1) * w + j - 1] + 1 {
            pairs.push((i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if dp[(i - 1) * w + j] >= dp[i * w + j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    pairs.reverse();
    Alignment { pairs }
}

/// Length-only LCS in O(min(|a|,|b|)) memory.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut prev = vec![0usize; short.len() + 1];
    let mut cur = vec![0usize; short.len() + 1];
    for x in long {
        for (j, y) in short.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

/// Finds `phrase` as a contiguous run within one turn of `ctx`, preferring the
/// occurrence with the largest start index (nearest to the utterance).
pub fn find_span(phrase: &[Token], ctx: &FlatContext) -> Option<Span> {
    let p = phrase.len();
    if p == 0 || p > ctx.len() {
        return None;
    }
    (0..=ctx.len() - p).rev().find_map(|s| {
        let e = s + p - 1;
        (ctx.turn_ids[s] == ctx.turn_ids[e] && ctx.tokens[s..=e] == *phrase).then(|| Span::new(s, e))
    })
}
