//! Vocabulary and the flat model input layout
//! `[NULL] + context + utterance + [END]`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dialogue::{DialogueInstance, Token};

pub const UNK: &str = "<unk>";
pub const NULL: &str = "<null>";
pub const END: &str = "<end>";

pub const UNK_ID: usize = 0;
pub const NULL_ID: usize = 1;
pub const END_ID: usize = 2;

/// Closed token vocabulary. Ids 0..3 are reserved for UNK, NULL and END.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Context and utterance tokens of `corpus`, by descending frequency then
    /// lexicographically.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a DialogueInstance>) -> Self {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for inst in corpus {
            for t in inst.context_turns.iter().flatten().chain(&inst.utterance) {
                *freq.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        for special in [UNK, NULL, END] {
            freq.remove(special);
        }
        let mut entries: Vec<(&str, usize)> = freq.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = [UNK, NULL, END]
            .into_iter()
            .chain(entries.into_iter().map(|(t, _)| t))
            .map(str::to_owned)
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Null = 0,
    Context = 1,
    Utterance = 2,
    End = 3,
}

pub const REGION_COUNT: usize = 4;

/// Encoded instance. Context token `i` sits at position `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub ids: Vec<usize>,
    pub regions: Vec<Region>,
    /// Turn of every context token, in context token order.
    pub context_turn_ids: Vec<usize>,
    /// Per position: 0 outside the context, else 1 + turns back from the utterance.
    pub turn_features: Vec<usize>,
    pub context_len: usize,
    pub utterance_len: usize,
}

impl ModelInput {
    pub fn new(instance: &DialogueInstance, vocab: &Vocab) -> Self {
        let ctx = instance.flat_context();
        let turns = ctx.turn_count();
        let (k, u) = (ctx.len(), instance.utterance.len());
        let mut ids = Vec::with_capacity(k + u + 2);
        let mut regions = Vec::with_capacity(k + u + 2);
        let mut turn_features = Vec::with_capacity(k + u + 2);
        ids.push(NULL_ID);
        regions.push(Region::Null);
        turn_features.push(0);
        for (tok, &turn) in ctx.tokens.iter().zip(&ctx.turn_ids) {
            ids.push(vocab.id(tok));
            regions.push(Region::Context);
            turn_features.push(turns - turn);
        }
        for tok in &instance.utterance {
            ids.push(vocab.id(tok));
            regions.push(Region::Utterance);
            turn_features.push(0);
        }
        ids.push(END_ID);
        regions.push(Region::End);
        turn_features.push(0);
        Self { ids, regions, context_turn_ids: ctx.turn_ids, turn_features, context_len: k, utterance_len: u }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Attendable span positions: NULL followed by every context position.
    pub fn support_len(&self) -> usize {
        self.context_len + 1
    }

    pub fn context_position(&self, context_index: usize) -> usize {
        context_index + 1
    }

    /// Context token index for a CONTEXT position, `None` for anything else.
    pub fn context_index(&self, position: usize) -> Option<usize> {
        (1..=self.context_len).contains(&position).then(|| position - 1)
    }

    /// First tagged position (first utterance token, or END for an empty utterance).
    pub fn first_query(&self) -> usize {
        self.context_len + 1
    }

    /// Number of tagged positions: utterance tokens plus END.
    pub fn query_count(&self) -> usize {
        self.utterance_len + 1
    }

    pub fn same_turn(&self, a: usize, b: usize) -> bool {
        self.context_turn_ids[a] == self.context_turn_ids[b]
    }
}

/// Token list helper for tests and callers that build inputs by hand.
pub fn tokens(words: &[&str]) -> Vec<Token> {
    words.iter().map(|w| w.to_string()).collect()
}
