//! Corpus BLEU-1..4, smoothed sentence BLEU, ROUGE-1/2/L and exact match.
//!
//! Scores are in `[0, 1]` except exact match, which is a percentage.
//! An n-gram order for which the candidate side has no n-grams at all is left
//! out of the geometric mean and the remaining orders are weighted uniformly.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::lcs_len;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{predictions} predictions but {references} references")]
    LengthMismatch { predictions: usize, references: usize },
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and candidate n-gram total at order `n`.
fn clipped_overlap<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len >= ref_len {
        1.0
    } else if cand_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// Geometric mean of `(matched, total)` precisions over the orders with
/// `total > 0`; any zero precision among them yields 0.
fn geometric_mean(precisions: &[(f64, f64)]) -> f64 {
    let used: Vec<f64> = precisions.iter().filter(|(_, t)| *t > 0.0).map(|(m, t)| m / t).collect();
    if used.is_empty() || used.iter().any(|&p| p == 0.0) {
        return 0.0;
    }
    let w = 1.0 / used.len() as f64;
    used.iter().map(|p| w * p.ln()).sum::<f64>().exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub brevity_penalty: f64,
    /// Modified precision per order; 0 where the corpus has no candidate n-grams.
    pub ngram_precisions: [f64; MAX_ORDER],
}

impl BleuReport {
    /// BLEU with uniform weights over orders `1..=order`.
    pub fn bleu(&self, order: usize) -> f64 {
        match order {
            1 => self.bleu1,
            2 => self.bleu2,
            3 => self.bleu3,
            4 => self.bleu4,
            _ => panic!("BLEU order must be in 1..=4, got {order}"),
        }
    }
}

fn check_pairs<A, B>(predictions: &[A], references: &[B]) -> Result<(), MetricsError> {
    if predictions.len() != references.len() {
        return Err(MetricsError::LengthMismatch { predictions: predictions.len(), references: references.len() });
    }
    if predictions.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    Ok(())
}

/// Corpus-level BLEU: clipped counts are summed over all pairs before the
/// precisions are formed. No smoothing.
pub fn corpus_bleu<T: Eq + Hash, P: AsRef<[T]>, R: AsRef<[T]>>(
    predictions: &[P],
    references: &[R],
) -> Result<BleuReport, MetricsError> {
    check_pairs(predictions, references)?;
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0usize, 0usize);
    for (p, q) in predictions.iter().zip(references) {
        let (p, q) = (p.as_ref(), q.as_ref());
        c += p.len();
        r += q.len();
        for n in 1..=MAX_ORDER {
            let (m, t) = clipped_overlap(p, q, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let pairs: Vec<(f64, f64)> = (0..MAX_ORDER).map(|k| (matched[k] as f64, total[k] as f64)).collect();
    let ngram_precisions = std::array::from_fn(|k| if total[k] > 0 { pairs[k].0 / pairs[k].1 } else { 0.0 });
    let (bp, score): (f64, Box<dyn Fn(usize) -> f64>) = if c == 0 {
        // Only empty candidates: perfect iff every reference is empty too.
        let v = if r == 0 { 1.0 } else { 0.0 };
        (v, Box::new(move |_| v))
    } else {
        let bp = brevity_penalty(c, r);
        (bp, Box::new(move |n| bp * geometric_mean(&pairs[..n])))
    };
    Ok(BleuReport {
        bleu1: score(1),
        bleu2: score(2),
        bleu3: score(3),
        bleu4: score(4),
        brevity_penalty: bp,
        ngram_precisions,
    })
}

fn sentence_precisions<T: Eq + Hash>(prediction: &[T], reference: &[T]) -> Vec<(f64, f64)> {
    (1..=MAX_ORDER)
        .map(|n| {
            let (m, t) = clipped_overlap(prediction, reference, n);
            (m as f64, t as f64)
        })
        .collect()
}

/// Unsmoothed sentence BLEU-4.
pub fn sentence_bleu<T: Eq + Hash>(prediction: &[T], reference: &[T]) -> f64 {
    if prediction.is_empty() {
        return 0.0;
    }
    brevity_penalty(prediction.len(), reference.len()) * geometric_mean(&sentence_precisions(prediction, reference))
}

/// Sentence BLEU-4 with geometric pseudo-counts for zero-match orders: a
/// counter starts at 1 and doubles at each such order, whose matched count
/// becomes `1 / counter`.
pub fn sentence_bleu_smooth3<T: Eq + Hash>(prediction: &[T], reference: &[T]) -> f64 {
    if prediction.is_empty() {
        return 0.0;
    }
    let mut counter = 1.0;
    let smoothed: Vec<(f64, f64)> = sentence_precisions(prediction, reference)
        .into_iter()
        .map(|(m, t)| {
            if t > 0.0 && m == 0.0 {
                counter *= 2.0;
                (1.0 / counter, t)
            } else {
                (m, t)
            }
        })
        .collect();
    brevity_penalty(prediction.len(), reference.len()) * geometric_mean(&smoothed)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1 }
    }

    /// Ratio with the convention that an empty side agrees only with an empty side.
    fn ratio(overlap: usize, denom: usize, other: usize) -> f64 {
        if denom > 0 {
            overlap as f64 / denom as f64
        } else if other == 0 {
            1.0
        } else {
            0.0
        }
    }
}

/// ROUGE-N with clipped overlap. When neither side has n-grams of order `n`
/// the pair scores 1.
pub fn rouge_n<T: Eq + Hash>(prediction: &[T], reference: &[T], n: usize) -> Prf {
    let (overlap, pred_total) = clipped_overlap(prediction, reference, n);
    let ref_total = reference.len().saturating_sub(n - 1);
    Prf::new(
        Prf::ratio(overlap, pred_total, ref_total),
        Prf::ratio(overlap, ref_total, pred_total),
    )
}

/// ROUGE-L from the LCS length.
pub fn rouge_l<T: PartialEq>(prediction: &[T], reference: &[T]) -> Prf {
    let l = lcs_len(prediction, reference);
    Prf::new(
        Prf::ratio(l, prediction.len(), reference.len()),
        Prf::ratio(l, reference.len(), prediction.len()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeReport {
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
}

/// Sentence-averaged ROUGE-1/2/L.
pub fn corpus_rouge<T: Eq + Hash, P: AsRef<[T]>, R: AsRef<[T]>>(
    predictions: &[P],
    references: &[R],
) -> Result<RougeReport, MetricsError> {
    check_pairs(predictions, references)?;
    let n = predictions.len() as f64;
    let mut acc = [[0.0f64; 3]; 3];
    for (p, q) in predictions.iter().zip(references) {
        let (p, q) = (p.as_ref(), q.as_ref());
        for (slot, prf) in acc.iter_mut().zip([rouge_n(p, q, 1), rouge_n(p, q, 2), rouge_l(p, q)]) {
            slot[0] += prf.precision;
            slot[1] += prf.recall;
            slot[2] += prf.f1;
        }
    }
    let mean = |s: [f64; 3]| Prf { precision: s[0] / n, recall: s[1] / n, f1: s[2] / n };
    Ok(RougeReport { rouge1: mean(acc[0]), rouge2: mean(acc[1]), rouge_l: mean(acc[2]) })
}

/// Percentage of pairs whose token sequences are identical.
pub fn exact_match<T: PartialEq, P: AsRef<[T]>, R: AsRef<[T]>>(
    predictions: &[P],
    references: &[R],
) -> Result<f64, MetricsError> {
    check_pairs(predictions, references)?;
    let hits = predictions.iter().zip(references).filter(|(p, q)| p.as_ref() == q.as_ref()).count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// Everything printed by the evaluation command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: BleuReport,
    pub rouge: RougeReport,
    pub exact_match: f64,
}

impl EvalReport {
    pub const HEADER: [&'static str; 8] = ["BLEU1", "BLEU2", "BLEU3", "BLEU4", "R1", "R2", "R-L", "EM"];

    /// Table row values scaled to percentages, in [`Self::HEADER`] order.
    pub fn row(&self) -> [f64; 8] {
        [
            100.0 * self.bleu.bleu1,
            100.0 * self.bleu.bleu2,
            100.0 * self.bleu.bleu3,
            100.0 * self.bleu.bleu4,
            100.0 * self.rouge.rouge1.f1,
            100.0 * self.rouge.rouge2.f1,
            100.0 * self.rouge.rouge_l.f1,
            self.exact_match,
        ]
    }
}

pub fn evaluate<T: Eq + Hash, P: AsRef<[T]>, R: AsRef<[T]>>(
    predictions: &[P],
    references: &[R],
) -> Result<EvalReport, MetricsError> {
    Ok(EvalReport {
        bleu: corpus_bleu(predictions, references)?,
        rouge: corpus_rouge(predictions, references)?,
        exact_match: exact_match(predictions, references)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &str) -> Vec<&str> {
        x.split_whitespace().collect()
    }

    const EPS: f64 = 1e-12;

    #[test]
    fn corpus_bleu_examples() {
        let p = vec![s("a b c d e")];
        let r = corpus_bleu(&p, &p).unwrap();
        assert_eq!(r.bleu4, 1.0);
        assert_eq!(r.brevity_penalty, 1.0);

        let r = corpus_bleu(&[s("a b c")], &[s("x y z")]).unwrap();
        assert_eq!(r.bleu1, 0.0);

        let r = corpus_bleu(&[s("a b c")], &[s("a b d")]).unwrap();
        assert!((r.ngram_precisions[0] - 2.0 / 3.0).abs() < EPS);
        assert!((r.ngram_precisions[1] - 0.5).abs() < EPS);
        assert!((r.bleu2 - (1.0f64 / 3.0).sqrt()).abs() < EPS);
        assert!((r.bleu2 - 0.5774).abs() < 1e-4);
    }

    #[test]
    fn corpus_bleu_errors() {
        let empty: Vec<Vec<&str>> = vec![];
        assert_eq!(corpus_bleu(&empty, &empty), Err(MetricsError::EmptyCorpus));
        assert!(matches!(corpus_bleu(&[s("a")], &empty), Err(MetricsError::LengthMismatch { .. })));
    }

    #[test]
    fn brevity_penalty_applies() {
        let r = corpus_bleu(&[s("a b")], &[s("a b c d")]).unwrap();
        assert!((r.brevity_penalty - (-1.0f64).exp()).abs() < EPS);
        assert!((r.bleu1 - (-1.0f64).exp()).abs() < EPS);
    }

    #[test]
    fn smooth3_examples() {
        assert_eq!(sentence_bleu_smooth3(&s("a b c d"), &s("a b c d")), 1.0);
        assert_eq!(sentence_bleu_smooth3(&s("a"), &s("a")), 1.0);
        // p1 = 2/3, p2 = (1/2)/2, p3 = (1/4)/1, order 4 has no candidate n-grams
        let v = sentence_bleu_smooth3(&s("a b c"), &s("a x c"));
        assert!((v - (1.0f64 / 24.0).cbrt()).abs() < EPS);
        assert!((v - 0.346_680_637_2).abs() < 1e-9);
        assert_eq!(sentence_bleu_smooth3::<&str>(&[], &s("a")), 0.0);
    }

    #[test]
    fn smooth3_equals_plain_when_all_orders_match() {
        let p = s("the cat sat on the mat today");
        let r = s("the cat sat on the mat");
        assert_eq!(sentence_bleu_smooth3(&p, &r), sentence_bleu(&p, &r));
    }

    #[test]
    fn rouge_examples() {
        let id = rouge_n(&s("a b c"), &s("a b c"), 1);
        assert_eq!((id.precision, id.recall, id.f1), (1.0, 1.0, 1.0));
        let r1 = rouge_n(&s("a b"), &s("b c"), 1);
        assert_eq!((r1.precision, r1.recall, r1.f1), (0.5, 0.5, 0.5));
        let dj = rouge_n(&s("a b"), &s("c d"), 2);
        assert_eq!((dj.precision, dj.recall, dj.f1), (0.0, 0.0, 0.0));

        let l = rouge_l(&s("a b c"), &s("a c"));
        assert!((l.precision - 2.0 / 3.0).abs() < EPS);
        assert_eq!(l.recall, 1.0);
        assert!((l.f1 - 0.8).abs() < EPS);
        assert_eq!(rouge_l(&s("a b"), &s("a b")).f1, 1.0);
        assert_eq!(rouge_l(&s("a b"), &s("c d")).f1, 0.0);
    }

    #[test]
    fn rouge2_on_single_tokens() {
        assert_eq!(rouge_n(&s("a"), &s("a"), 2).f1, 1.0);
        assert_eq!(rouge_n(&s("a b"), &s("a"), 2).precision, 0.0);
    }

    #[test]
    fn exact_match_examples() {
        let a = vec![s("x"), s("y"), s("z"), s("w")];
        assert_eq!(exact_match(&a, &a).unwrap(), 100.0);
        let b = vec![s("q"), s("q"), s("q"), s("q")];
        assert_eq!(exact_match(&a, &b).unwrap(), 0.0);
        let c = vec![s("x"), s("q"), s("q"), s("q")];
        assert_eq!(exact_match(&a, &c).unwrap(), 25.0);
        let empty: Vec<Vec<&str>> = vec![];
        assert_eq!(exact_match(&empty, &empty), Err(MetricsError::EmptyCorpus));
    }

    #[test]
    fn eval_row_order_and_scale() {
        let a = vec![s("x y z"), s("p q")];
        let row = evaluate(&a, &a).unwrap().row();
        assert!(row.iter().all(|&v| v == 100.0));
        assert_eq!(EvalReport::HEADER, ["BLEU1", "BLEU2", "BLEU3", "BLEU4", "R1", "R2", "R-L", "EM"]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn sent() -> impl Strategy<Value = Vec<u8>> {
            prop::collection::vec(0u8..5, 0..10)
        }

        proptest! {
            #[test]
            fn scores_stay_in_range(pairs in prop::collection::vec((sent(), sent()), 1..6)) {
                let (p, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
                let rep = evaluate(&p, &r).unwrap();
                for v in [rep.bleu.bleu1, rep.bleu.bleu2, rep.bleu.bleu3, rep.bleu.bleu4, rep.bleu.brevity_penalty] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                for prf in [rep.rouge.rouge1, rep.rouge.rouge2, rep.rouge.rouge_l] {
                    for v in [prf.precision, prf.recall, prf.f1] {
                        prop_assert!((0.0..=1.0).contains(&v));
                    }
                }
                prop_assert!((0.0..=100.0).contains(&rep.exact_match));
                for (a, b) in p.iter().zip(&r) {
                    let v = sentence_bleu_smooth3(a, b);
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                if rep.exact_match == 100.0 {
                    prop_assert_eq!(rep.bleu.bleu4, 1.0);
                }
            }

            #[test]
            fn bleu1_is_clipped_precision_times_bp(pairs in prop::collection::vec((sent(), sent()), 1..6)) {
                let (p, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
                let rep = corpus_bleu(&p, &r).unwrap();
                let c: usize = p.iter().map(Vec::len).sum();
                if c > 0 {
                    prop_assert!((rep.bleu1 - rep.ngram_precisions[0] * rep.brevity_penalty).abs() < 1e-12);
                }
            }

            #[test]
            fn identical_corpora_score_perfectly(p in prop::collection::vec(sent(), 1..6)) {
                let rep = evaluate(&p, &p).unwrap();
                prop_assert_eq!(rep.bleu.bleu4, 1.0);
                prop_assert_eq!(rep.exact_match, 100.0);
                prop_assert_eq!(rep.rouge.rouge1.f1, 1.0);
                prop_assert_eq!(rep.rouge.rouge2.f1, 1.0);
                prop_assert_eq!(rep.rouge.rouge_l.f1, 1.0);
            }
        }
    }
}
