//! Tokenization, the dialogue data model and the flattened context layout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

/// One token: a grapheme cluster in character mode, a whitespace-delimited
/// word in word mode. Never empty when produced by [`tokenize`].
pub type Token = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizationMode {
    #[default]
    #[serde(alias = "character")]
    Char,
    Word,
}

impl TokenizationMode {
    /// Display join rule: no separator for characters, one space for words.
    pub fn join(self, tokens: &[Token]) -> String {
        match self {
            TokenizationMode::Char => tokens.concat(),
            TokenizationMode::Word => tokens.join(" "),
        }
    }
}

impl fmt::Display for TokenizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizationMode::Char => "char",
            TokenizationMode::Word => "word",
        })
    }
}

impl FromStr for TokenizationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "char" | "character" => Ok(TokenizationMode::Char),
            "word" => Ok(TokenizationMode::Word),
            other => Err(format!("unknown tokenization mode `{other}` (expected char|word)")),
        }
    }
}

pub fn tokenize(text: &str, mode: TokenizationMode) -> Vec<Token> {
    match mode {
        TokenizationMode::Char => text
            .graphemes(true)
            .filter(|g| !g.chars().all(char::is_whitespace))
            .map(str::to_owned)
            .collect(),
        TokenizationMode::Word => text.split_whitespace().map(str::to_owned).collect(),
    }
}

/// Context turns (oldest first), the current utterance, and optionally its
/// gold rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueInstance {
    pub context_turns: Vec<Vec<Token>>,
    pub utterance: Vec<Token>,
    pub reference: Option<Vec<Token>>,
}

impl DialogueInstance {
    pub fn new(context_turns: Vec<Vec<Token>>, utterance: Vec<Token>, reference: Option<Vec<Token>>) -> Self {
        Self { context_turns, utterance, reference }
    }

    /// Builds an instance from raw strings.
    pub fn from_text<S: AsRef<str>>(
        context: &[S],
        utterance: &str,
        reference: Option<&str>,
        mode: TokenizationMode,
    ) -> Self {
        Self {
            context_turns: context.iter().map(|t| tokenize(t.as_ref(), mode)).collect(),
            utterance: tokenize(utterance, mode),
            reference: reference.map(|r| tokenize(r, mode)),
        }
    }

    pub fn flat_context(&self) -> FlatContext {
        flatten_context(&self.context_turns)
    }

    pub fn context_token_count(&self) -> usize {
        self.context_turns.iter().map(Vec::len).sum()
    }

    /// True when a reference is present and equals the utterance.
    pub fn is_no_change(&self) -> bool {
        self.reference.as_ref() == Some(&self.utterance)
    }
}

/// All context turns concatenated without separators. Spans index into
/// `tokens`; turn identity is carried per token.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlatContext {
    pub tokens: Vec<Token>,
    pub turn_ids: Vec<usize>,
    /// Inclusive `[first, last]` token index of every non-empty turn.
    pub turn_bounds: Vec<[usize; 2]>,
}

impl FlatContext {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of turns in the source context, including empty ones.
    pub fn turn_count(&self) -> usize {
        self.turn_ids.last().map_or(0, |t| t + 1)
    }
}

/// Empty turns contribute no tokens and no bounds entry; turn ids still count them.
pub fn flatten_context(turns: &[Vec<Token>]) -> FlatContext {
    let mut flat = FlatContext::default();
    for (turn, tokens) in turns.iter().enumerate() {
        if tokens.is_empty() {
            continue;
        }
        let first = flat.tokens.len();
        flat.tokens.extend(tokens.iter().cloned());
        flat.turn_ids.extend(std::iter::repeat(turn).take(tokens.len()));
        flat.turn_bounds.push([first, flat.tokens.len() - 1]);
    }
    flat
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_instances: usize,
    /// Mean number of turns per instance, counting the current utterance.
    pub turns_per_instance: f64,
    pub context_tokens_mu: f64,
    /// Population standard deviation (divides by n).
    pub context_tokens_sigma: f64,
    pub pct_no_change: f64,
    pub pct_uncovered: f64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("flag lists have lengths {coverage} and {no_change}, corpus has {corpus}")]
    LengthMismatch { corpus: usize, coverage: usize, no_change: usize },
}

pub fn corpus_stats(
    corpus: &[DialogueInstance],
    coverage_flags: &[bool],
    no_change_flags: &[bool],
) -> Result<CorpusStats, StatsError> {
    let n = corpus.len();
    if coverage_flags.len() != n || no_change_flags.len() != n {
        return Err(StatsError::LengthMismatch {
            corpus: n,
            coverage: coverage_flags.len(),
            no_change: no_change_flags.len(),
        });
    }
    if n == 0 {
        return Err(StatsError::EmptyCorpus);
    }
    let nf = n as f64;
    let counts: Vec<f64> = corpus.iter().map(|i| i.context_token_count() as f64).collect();
    let mu = counts.iter().sum::<f64>() / nf;
    let var = counts.iter().map(|c| (c - mu) * (c - mu)).sum::<f64>() / nf;
    let turns = corpus.iter().map(|i| (i.context_turns.len() + 1) as f64).sum::<f64>() / nf;
    let pct = |flags: &[bool], want: bool| {
        100.0 * flags.iter().filter(|&&f| f == want).count() as f64 / nf
    };
    Ok(CorpusStats {
        n_instances: n,
        turns_per_instance: turns,
        context_tokens_mu: mu,
        context_tokens_sigma: var.sqrt(),
        pct_no_change: pct(no_change_flags, true),
        pct_uncovered: pct(coverage_flags, false),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<Token> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert!(tokenize("", TokenizationMode::Char).is_empty());
        assert_eq!(tokenize("冬天就是", TokenizationMode::Char), toks(&["冬", "天", "就", "是"]));
        assert_eq!(
            tokenize("winter is here", TokenizationMode::Word),
            toks(&["winter", "is", "here"])
        );
        assert_eq!(tokenize(" a  b\tc\n", TokenizationMode::Word), toks(&["a", "b", "c"]));
        assert_eq!(tokenize("a b", TokenizationMode::Char), toks(&["a", "b"]));
    }

    #[test]
    fn char_mode_keeps_grapheme_clusters() {
        // e + combining acute is a single cluster
        let t = tokenize("e\u{301}x", TokenizationMode::Char);
        assert_eq!(t, vec!["e\u{301}".to_string(), "x".to_string()]);
    }

    #[test]
    fn mode_parses_and_displays() {
        assert_eq!("char".parse::<TokenizationMode>().unwrap(), TokenizationMode::Char);
        assert_eq!("word".parse::<TokenizationMode>().unwrap(), TokenizationMode::Word);
        assert!("bpe".parse::<TokenizationMode>().is_err());
        assert_eq!(TokenizationMode::Word.to_string(), "word");
    }

    #[test]
    fn flatten_examples() {
        let empty = flatten_context(&[]);
        assert!(empty.tokens.is_empty() && empty.turn_ids.is_empty() && empty.turn_bounds.is_empty());

        let flat = flatten_context(&[toks(&["a", "b"]), toks(&["c"])]);
        assert_eq!(flat.tokens, toks(&["a", "b", "c"]));
        assert_eq!(flat.turn_ids, vec![0, 0, 1]);
        assert_eq!(flat.turn_bounds, vec![[0, 1], [2, 2]]);
    }

    #[test]
    fn flatten_table_one_context_word_mode() {
        let inst = DialogueInstance::from_text(
            &["上海 最近 天气 怎么样 ？", "最近 经常 阴天 下雨 。"],
            "冬天 就是 这样 。",
            None,
            TokenizationMode::Word,
        );
        let flat = inst.flat_context();
        assert_eq!(flat.len(), 10);
        assert_eq!(flat.turn_bounds, vec![[0, 4], [5, 9]]);
    }

    #[test]
    fn flatten_skips_empty_turns_but_counts_them() {
        let flat = flatten_context(&[toks(&["a"]), vec![], toks(&["b"])]);
        assert_eq!(flat.turn_ids, vec![0, 2]);
        assert_eq!(flat.turn_bounds, vec![[0, 0], [1, 1]]);
        assert_eq!(flat.turn_count(), 3);
    }

    fn with_ctx(n: usize) -> DialogueInstance {
        DialogueInstance::new(vec![vec!["x".to_string(); n]], toks(&["u"]), None)
    }

    #[test]
    fn stats_examples() {
        let s = corpus_stats(&[with_ctx(4), with_ctx(6)], &[true, false], &[false, false]).unwrap();
        assert_eq!(s.context_tokens_mu, 5.0);
        assert_eq!(s.context_tokens_sigma, 1.0);
        assert_eq!(s.pct_uncovered, 50.0);
        assert_eq!(s.turns_per_instance, 2.0);

        let single = corpus_stats(&[with_ctx(3)], &[true], &[true]).unwrap();
        assert_eq!(single.context_tokens_sigma, 0.0);
        assert_eq!(single.pct_no_change, 100.0);
    }

    #[test]
    fn stats_errors() {
        assert_eq!(corpus_stats(&[], &[], &[]), Err(StatsError::EmptyCorpus));
        assert!(matches!(
            corpus_stats(&[with_ctx(1)], &[], &[true]),
            Err(StatsError::LengthMismatch { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn word_tokenize_inverts_join(words in prop::collection::vec("[a-z]{1,6}", 0..12)) {
                let joined = words.join(" ");
                prop_assert_eq!(tokenize(&joined, TokenizationMode::Word), words);
            }

            #[test]
            fn flatten_preserves_count(turns in prop::collection::vec(prop::collection::vec("[a-c]", 0..5), 0..6)) {
                let flat = flatten_context(&turns);
                let total: usize = turns.iter().map(Vec::len).sum();
                prop_assert_eq!(flat.tokens.len(), total);
                prop_assert_eq!(flat.turn_ids.len(), total);
                prop_assert!(flat.turn_ids.windows(2).all(|w| w[0] <= w[1]));
                let covered: usize = flat.turn_bounds.iter().map(|b| b[1] - b[0] + 1).sum();
                prop_assert_eq!(covered, total);
            }

            #[test]
            fn stats_permutation_invariant(sizes in prop::collection::vec(0usize..20, 1..10), rot in 0usize..10) {
                let corpus: Vec<_> = sizes.iter().map(|&n| with_ctx(n)).collect();
                let flags: Vec<bool> = sizes.iter().map(|n| n % 2 == 0).collect();
                let a = corpus_stats(&corpus, &flags, &flags).unwrap();
                let k = rot % corpus.len();
                let mut c2 = corpus.clone();
                c2.rotate_left(k);
                let mut f2 = flags.clone();
                f2.rotate_left(k);
                let b = corpus_stats(&c2, &f2, &f2).unwrap();
                prop_assert!((a.context_tokens_mu - b.context_tokens_mu).abs() < 1e-12);
                prop_assert!((a.context_tokens_sigma - b.context_tokens_sigma).abs() < 1e-12);
                prop_assert_eq!(a.pct_uncovered, b.pct_uncovered);
            }
        }
    }
}
