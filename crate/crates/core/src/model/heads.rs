//! Deletion classifier and additive-attention span pointers, with the
//! cross-entropy tagging loss.
//!
//! Span heads score every query position (utterance tokens and END) against
//! the NULL position and all context positions. Everything else is masked out,
//! so stored distributions carry exactly zero mass there. A gold "no insertion"
//! maps to start = end = NULL.

use super::encoder::EncoderState;
use super::input::ModelInput;
use super::params::{HeadParams, SpanHeadParams};
use super::tensor::{dot, softmax_in_place};
use super::ModelError;
use crate::scalar::Scalar;
use crate::tags::TagProgram;

/// Per tagged position (utterance tokens, then END): deletion probabilities
/// `[keep, delete]` and start/end distributions over all input positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TagDistributions<T> {
    pub deletion: Vec<[T; 2]>,
    pub start: Vec<Vec<T>>,
    pub end: Vec<Vec<T>>,
}

impl<T: Scalar> TagDistributions<T> {
    pub fn query_count(&self) -> usize {
        self.deletion.len()
    }
}

/// Gradients of a scalar objective with respect to the head logits. Span
/// entries cover only the support (NULL and context positions).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrads<T> {
    pub deletion: Vec<[T; 2]>,
    pub start: Vec<Vec<T>>,
    pub end: Vec<Vec<T>>,
}

impl<T: Scalar> LogitGrads<T> {
    pub fn zeros(queries: usize, support: usize) -> Self {
        Self {
            deletion: vec![[T::zero(); 2]; queries],
            start: vec![vec![T::zero(); support]; queries],
            end: vec![vec![T::zero(); support]; queries],
        }
    }

    /// `self += k · other`.
    pub fn add_scaled(&mut self, other: &Self, k: T) {
        for (a, b) in self.deletion.iter_mut().zip(&other.deletion) {
            a[0] = a[0] + k * b[0];
            a[1] = a[1] + k * b[1];
        }
        for (rows_a, rows_b) in [(&mut self.start, &other.start), (&mut self.end, &other.end)] {
            for (a, b) in rows_a.iter_mut().zip(rows_b) {
                for (x, &y) in a.iter_mut().zip(b) {
                    *x = *x + k * y;
                }
            }
        }
    }

    pub fn scaled(mut self, k: T) -> Self {
        for a in &mut self.deletion {
            a[0] = a[0] * k;
            a[1] = a[1] * k;
        }
        for rows in [&mut self.start, &mut self.end] {
            rows.iter_mut().flatten().for_each(|x| *x = *x * k);
        }
        self
    }

    pub fn is_zero(&self) -> bool {
        self.deletion.iter().flatten().chain(self.start.iter().flatten()).chain(self.end.iter().flatten()).all(|v| *v == T::zero())
    }
}

pub(crate) struct HeadCache<T> {
    /// `tanh` activations, `queries × support × attn_dim`, per span head.
    start_hidden: Vec<T>,
    end_hidden: Vec<T>,
}

fn span_scores<T: Scalar>(
    p: &SpanHeadParams<T>,
    state: &EncoderState<T>,
    input: &ModelInput,
) -> (Vec<Vec<T>>, Vec<T>) {
    let a = p.bias.len();
    let d = state.dim;
    let support = input.support_len();
    let first = input.first_query();
    let queries = input.query_count();
    let keys = super::tensor::linear(&state.vectors[..support * d], &p.w_key, Some(&p.bias), support);
    let qs = super::tensor::linear(&state.vectors[first * d..(first + queries) * d], &p.w_query, None, queries);
    let mut hidden = vec![T::zero(); queries * support * a];
    let mut scores = vec![vec![T::zero(); support]; queries];
    for q in 0..queries {
        for m in 0..support {
            let h = &mut hidden[(q * support + m) * a..(q * support + m + 1) * a];
            for t in 0..a {
                h[t] = (qs[q * a + t] + keys[m * a + t]).tanh();
            }
            scores[q][m] = dot(h, &p.v.data);
        }
    }
    (scores, hidden)
}

fn span_backward<T: Scalar>(
    p: &SpanHeadParams<T>,
    g: &mut SpanHeadParams<T>,
    state: &EncoderState<T>,
    input: &ModelInput,
    hidden: &[T],
    dscores: &[Vec<T>],
    d_state: &mut [T],
) {
    let a = p.bias.len();
    let d = state.dim;
    let support = input.support_len();
    let first = input.first_query();
    let queries = input.query_count();
    let mut dq = vec![T::zero(); queries * a];
    let mut dk = vec![T::zero(); support * a];
    for q in 0..queries {
        for m in 0..support {
            let gs = dscores[q][m];
            if gs == T::zero() {
                continue;
            }
            let h = &hidden[(q * support + m) * a..(q * support + m + 1) * a];
            for t in 0..a {
                g.v.data[t] = g.v.data[t] + gs * h[t];
                let dpre = gs * p.v.data[t] * (T::one() - h[t] * h[t]);
                dq[q * a + t] = dq[q * a + t] + dpre;
                dk[m * a + t] = dk[m * a + t] + dpre;
            }
        }
    }
    let dkeys = super::tensor::linear_backward(
        &state.vectors[..support * d],
        &dk,
        &p.w_key,
        &mut g.w_key,
        Some(&mut g.bias),
        support,
    );
    let dqs = super::tensor::linear_backward(
        &state.vectors[first * d..(first + queries) * d],
        &dq,
        &p.w_query,
        &mut g.w_query,
        None,
        queries,
    );
    add_into(&mut d_state[..support * d], &dkeys);
    add_into(&mut d_state[first * d..(first + queries) * d], &dqs);
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

fn deletion_logits<T: Scalar>(p: &HeadParams<T>, state: &EncoderState<T>, input: &ModelInput) -> Vec<T> {
    let d = state.dim;
    let first = input.first_query();
    let queries = input.query_count();
    super::tensor::linear(&state.vectors[first * d..(first + queries) * d], &p.deletion_w, Some(&p.deletion_b), queries)
}

fn expand<T: Scalar>(mut support_probs: Vec<T>, n: usize) -> Vec<T> {
    support_probs.resize(n, T::zero());
    support_probs
}

pub(crate) fn heads_forward<T: Scalar>(
    p: &HeadParams<T>,
    state: &EncoderState<T>,
    input: &ModelInput,
) -> (TagDistributions<T>, HeadCache<T>) {
    let n = input.len();
    let del = deletion_logits(p, state, input);
    let deletion = del
        .chunks(2)
        .map(|l| {
            let mut v = [l[0], l[1]];
            softmax_in_place(&mut v);
            v
        })
        .collect();
    let (start_scores, start_hidden) = span_scores(&p.start, state, input);
    let (end_scores, end_hidden) = span_scores(&p.end, state, input);
    let normalize = |scores: Vec<Vec<T>>| {
        scores
            .into_iter()
            .map(|mut s| {
                softmax_in_place(&mut s);
                expand(s, n)
            })
            .collect()
    };
    (
        TagDistributions { deletion, start: normalize(start_scores), end: normalize(end_scores) },
        HeadCache { start_hidden, end_hidden },
    )
}

pub(crate) fn heads_backward<T: Scalar>(
    p: &HeadParams<T>,
    g: &mut HeadParams<T>,
    state: &EncoderState<T>,
    input: &ModelInput,
    cache: &HeadCache<T>,
    dlogits: &LogitGrads<T>,
) -> Vec<T> {
    let d = state.dim;
    let first = input.first_query();
    let queries = input.query_count();
    let mut d_state = vec![T::zero(); state.vectors.len()];
    let flat: Vec<T> = dlogits.deletion.iter().flat_map(|v| [v[0], v[1]]).collect();
    let dq = super::tensor::linear_backward(
        &state.vectors[first * d..(first + queries) * d],
        &flat,
        &p.deletion_w,
        &mut g.deletion_w,
        Some(&mut g.deletion_b),
        queries,
    );
    add_into(&mut d_state[first * d..(first + queries) * d], &dq);
    span_backward(&p.start, &mut g.start, state, input, &cache.start_hidden, &dlogits.start, &mut d_state);
    span_backward(&p.end, &mut g.end, state, input, &cache.end_hidden, &dlogits.end, &mut d_state);
    d_state
}

/// Gold targets as `(deletion, start position, end position)` per tagged
/// position, with NULL (0) standing for "no insertion".
pub fn gold_targets(gold: &TagProgram, input: &ModelInput) -> Result<Vec<(usize, usize, usize)>, ModelError> {
    if gold.len() != input.query_count() {
        return Err(ModelError::InvalidGold(format!(
            "program has {} tags, input expects {}",
            gold.len(),
            input.query_count()
        )));
    }
    gold.tags
        .iter()
        .enumerate()
        .map(|(q, tag)| {
            let (s, e) = match tag.insertion {
                None => (0, 0),
                Some(span) if span.start <= span.end && span.end < input.context_len => {
                    (input.context_position(span.start), input.context_position(span.end))
                }
                Some(span) => {
                    return Err(ModelError::InvalidGold(format!(
                        "span [{}, {}] at position {q} lies outside a context of {} tokens",
                        span.start, span.end, input.context_len
                    )))
                }
            };
            Ok((usize::from(tag.deletion), s, e))
        })
        .collect()
}

/// Negative log-likelihood of the gold program summed over tagged positions.
pub fn tagging_loss<T: Scalar>(dists: &TagDistributions<T>, gold: &TagProgram, input: &ModelInput) -> Result<T, ModelError> {
    let targets = gold_targets(gold, input)?;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(q, &(d, s, e))| -(dists.deletion[q][d].ln() + dists.start[q][s].ln() + dists.end[q][e].ln()))
        .sum())
}

/// Loss and its logit gradients (`p − onehot` for each softmax).
pub fn tagging_loss_grad<T: Scalar>(
    dists: &TagDistributions<T>,
    gold: &TagProgram,
    input: &ModelInput,
) -> Result<(T, LogitGrads<T>), ModelError> {
    let targets = gold_targets(gold, input)?;
    let support = input.support_len();
    let mut grads = LogitGrads::zeros(targets.len(), support);
    let mut loss = T::zero();
    for (q, &(d, s, e)) in targets.iter().enumerate() {
        loss = loss - (dists.deletion[q][d].ln() + dists.start[q][s].ln() + dists.end[q][e].ln());
        grads.deletion[q] = dists.deletion[q];
        grads.deletion[q][d] = grads.deletion[q][d] - T::one();
        grads.start[q].copy_from_slice(&dists.start[q][..support]);
        grads.start[q][s] = grads.start[q][s] - T::one();
        grads.end[q].copy_from_slice(&dists.end[q][..support]);
        grads.end[q][e] = grads.end[q][e] - T::one();
    }
    Ok((loss, grads))
}
