//! Per-token edit tags and tag programs.

use serde::{Deserialize, Serialize};

use crate::alignment::Span;

/// Deletion bit plus an optional context span inserted in front of the token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenTag {
    pub deletion: bool,
    pub insertion: Option<Span>,
}

/// The four operations a single tag can express.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TagShape {
    NoChange,
    /// Omission recall: keep the token and insert a phrase before it.
    Insert,
    /// Coreference replacement: delete the token, insert a phrase in its place.
    Replace,
    Delete,
}

impl TokenTag {
    pub const KEEP: TokenTag = TokenTag { deletion: false, insertion: None };
    pub const DELETE: TokenTag = TokenTag { deletion: true, insertion: None };

    pub fn insert(span: Span) -> Self {
        Self { deletion: false, insertion: Some(span) }
    }

    pub fn replace(span: Span) -> Self {
        Self { deletion: true, insertion: Some(span) }
    }

    pub fn shape(&self) -> TagShape {
        match (self.deletion, self.insertion.is_some()) {
            (false, false) => TagShape::NoChange,
            (false, true) => TagShape::Insert,
            (true, true) => TagShape::Replace,
            (true, false) => TagShape::Delete,
        }
    }

    /// `[deletion, start, end]` with the absent span as `[-1, -1]`.
    pub fn to_triple(&self) -> [i64; 3] {
        let d = i64::from(self.deletion);
        match self.insertion {
            Some(s) => [d, s.start as i64, s.end as i64],
            None => [d, -1, -1],
        }
    }

    pub fn from_triple(t: [i64; 3]) -> Result<Self, String> {
        let deletion = match t[0] {
            0 => false,
            1 => true,
            other => return Err(format!("deletion bit must be 0 or 1, got {other}")),
        };
        let insertion = match (t[1], t[2]) {
            (-1, -1) => None,
            (s, e) if s >= 0 && e >= 0 => Some(Span::new(s as usize, e as usize)),
            (s, e) => return Err(format!("malformed span [{s}, {e}]")),
        };
        Ok(Self { deletion, insertion })
    }
}

/// One tag per utterance token followed by one tag for the END sentinel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TagProgram {
    pub tags: Vec<TokenTag>,
}

impl TagProgram {
    pub fn new(tags: Vec<TokenTag>) -> Self {
        Self { tags }
    }

    /// The all-keep program for an utterance of `utterance_len` tokens.
    pub fn identity(utterance_len: usize) -> Self {
        Self { tags: vec![TokenTag::KEEP; utterance_len + 1] }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Number of utterance tokens this program is shaped for.
    pub fn utterance_len(&self) -> usize {
        self.tags.len().saturating_sub(1)
    }

    pub fn end_tag(&self) -> Option<&TokenTag> {
        self.tags.last()
    }

    pub fn to_triples(&self) -> Vec<[i64; 3]> {
        self.tags.iter().map(TokenTag::to_triple).collect()
    }

    pub fn from_triples(triples: &[[i64; 3]]) -> Result<Self, String> {
        triples.iter().map(|t| TokenTag::from_triple(*t)).collect::<Result<_, _>>().map(Self::new)
    }
}
