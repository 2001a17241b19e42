//! Line-delimited JSON records. Every record carries a schema `version`.

use serde::{Deserialize, Serialize};

use crate::dialogue::{DialogueInstance, TokenizationMode};

pub const SCHEMA_VERSION: u32 = 1;

fn current() -> u32 {
    SCHEMA_VERSION
}

/// One dialogue: context turns oldest first, the utterance to rewrite and an
/// optional reference rewrite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    #[serde(default = "current")]
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub context: Vec<String>,
    pub utterance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl CorpusRecord {
    pub fn new(id: Option<String>, context: Vec<String>, utterance: String, reference: Option<String>) -> Self {
        Self { version: SCHEMA_VERSION, id, context, utterance, reference }
    }

    pub fn to_instance(&self, mode: TokenizationMode) -> DialogueInstance {
        DialogueInstance::from_text(&self.context, &self.utterance, self.reference.as_deref(), mode)
    }
}

/// A compiled program: one `[deletion, start, end]` triple per utterance
/// token plus END, with `[-1, -1]` for no insertion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagRecord {
    #[serde(default = "current")]
    pub version: u32,
    pub id: String,
    pub tags: Vec<[i64; 3]>,
    pub covered: bool,
}

/// Sidecar entry for an instance whose reference cannot be produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UncoveredRecord {
    #[serde(default = "current")]
    pub version: u32,
    pub id: String,
    pub failing_phrase: Vec<String>,
}

/// Executed program output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteRecord {
    #[serde(default = "current")]
    pub version: u32,
    pub id: String,
    pub text: String,
}

/// Model output: the decoded program and its rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    #[serde(default = "current")]
    pub version: u32,
    pub id: String,
    pub tags: Vec<[i64; 3]>,
    pub prediction: String,
}
