//! Seeded generator of covered rewriting instances.
//!
//! Context and utterance tokens are drawn from disjoint vocabularies, and the
//! reference is built by keeping or dropping utterance tokens and putting at
//! most one context phrase (taken from a single turn) into each gap between
//! kept tokens. Aligning utterance and reference therefore matches exactly the
//! kept tokens, each gap holds one phrase that occurs in the context, and the
//! gold program always exists.
//!
//! Tokens are single CJK characters, so a corpus rendered with spaces
//! between tokens reads back identically in character and word mode.

use rand::Rng;

use crate::dialogue::{DialogueInstance, Token};
use crate::rl::instance_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// At most 4096 each.
    pub context_vocab: usize,
    pub utterance_vocab: usize,
    pub turns: (usize, usize),
    pub turn_len: (usize, usize),
    pub utterance_len: (usize, usize),
    pub phrase_len: (usize, usize),
    /// Chance of a phrase in each gap between kept tokens.
    pub insert_prob: f64,
    pub delete_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            context_vocab: 40,
            utterance_vocab: 20,
            turns: (1, 3),
            turn_len: (3, 7),
            utterance_len: (2, 5),
            phrase_len: (1, 3),
            insert_prob: 0.35,
            delete_prob: 0.15,
        }
    }
}

const CONTEXT_BASE: u32 = 0x4E00;
const UTTERANCE_BASE: u32 = 0x4E00 + 0x1000;

pub fn context_token(i: usize) -> Token {
    char::from_u32(CONTEXT_BASE + i as u32).expect("CJK block").to_string()
}

pub fn utterance_token(i: usize) -> Token {
    char::from_u32(UTTERANCE_BASE + i as u32).expect("CJK block").to_string()
}

fn between<R: Rng>(rng: &mut R, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi.max(lo))
}

fn phrase<R: Rng>(rng: &mut R, turns: &[Vec<Token>], cfg: &SynthConfig) -> Vec<Token> {
    let turn = &turns[rng.random_range(0..turns.len())];
    let len = between(rng, cfg.phrase_len).clamp(1, turn.len());
    let start = rng.random_range(0..=turn.len() - len);
    turn[start..start + len].to_vec()
}

/// Instance `index` of the corpus for `seed`; each index draws from its own
/// stream, so corpora of different sizes share their prefixes.
pub fn synth_instance(seed: u64, index: u64, cfg: &SynthConfig) -> DialogueInstance {
    let mut rng = instance_rng(seed, index);
    let turns: Vec<Vec<Token>> = (0..between(&mut rng, cfg.turns).max(1))
        .map(|_| {
            (0..between(&mut rng, cfg.turn_len).max(1))
                .map(|_| context_token(rng.random_range(0..cfg.context_vocab)))
                .collect()
        })
        .collect();
    let utterance: Vec<Token> = (0..between(&mut rng, cfg.utterance_len).max(1))
        .map(|_| utterance_token(rng.random_range(0..cfg.utterance_vocab)))
        .collect();

    // at most one phrase per gap: before each kept token, and after the last
    let mut reference = Vec::new();
    for tok in &utterance {
        if rng.random_bool(cfg.delete_prob) {
            continue;
        }
        if rng.random_bool(cfg.insert_prob) {
            reference.extend(phrase(&mut rng, &turns, cfg));
        }
        reference.push(tok.clone());
    }
    if rng.random_bool(cfg.insert_prob) {
        reference.extend(phrase(&mut rng, &turns, cfg));
    }
    DialogueInstance::new(turns, utterance, Some(reference))
}

pub fn synth_corpus(n: usize, seed: u64, cfg: &SynthConfig) -> Vec<DialogueInstance> {
    (0..n as u64).map(|i| synth_instance(seed, i, cfg)).collect()
}
