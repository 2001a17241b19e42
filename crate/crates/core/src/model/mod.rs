//! Span-tagging model: encoder, deletion head, additive-attention span heads,
//! tagging loss, greedy decoding and training.

pub mod checkpoint;
pub mod decode;
pub mod encoder;
pub mod heads;
pub mod input;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

use thiserror::Error;

use crate::dialogue::{DialogueInstance, Token, TokenizationMode};
use crate::reconstruct::{apply_tags, ProgramError};
use crate::scalar::Scalar;
use crate::tags::TagProgram;

pub use decode::{best_span, greedy_decode};
pub use encoder::{Encoder, EncoderState, TransformerEncoder};
pub use heads::{tagging_loss, tagging_loss_grad, LogitGrads, TagDistributions};
pub use input::{ModelInput, Region, Vocab};
pub use params::{TaggerConfig, TaggerParams};
pub use train::{train, TrainConfig, TrainReport, TrainingExample};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id {id} is outside the vocabulary of {vocab_size}")]
    UnknownToken { id: usize, vocab_size: usize },
    #[error("input of {len} positions exceeds the maximum of {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("invalid gold program: {0}")]
    InvalidGold(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Activations kept for the backward pass.
pub struct Forward<T> {
    pub state: EncoderState<T>,
    pub dists: TagDistributions<T>,
    encoder_cache: encoder::EncoderCache<T>,
    head_cache: heads::HeadCache<T>,
}

impl<T: Scalar> TaggerParams<T> {
    pub fn encoder(&self) -> TransformerEncoder<'_, T> {
        TransformerEncoder { params: &self.encoder, config: &self.config }
    }

    pub fn forward(&self, input: &ModelInput) -> Result<Forward<T>, ModelError> {
        let (state, encoder_cache) = encoder::encoder_forward(&self.encoder, &self.config, input)?;
        let (dists, head_cache) = heads::heads_forward(&self.heads, &state, input);
        Ok(Forward { state, dists, encoder_cache, head_cache })
    }

    /// Accumulates into `grads` the parameter gradient of an objective whose
    /// logit gradients are `dlogits`.
    pub fn backward(&self, input: &ModelInput, fwd: &Forward<T>, dlogits: &LogitGrads<T>, grads: &mut Self) {
        let d_state = heads::heads_backward(&self.heads, &mut grads.heads, &fwd.state, input, &fwd.head_cache, dlogits);
        encoder::encoder_backward(&self.encoder, &mut grads.encoder, &self.config, input, &fwd.encoder_cache, d_state);
    }

    /// Forward pass, objective on the distributions, backward pass.
    pub fn objective_gradient<R>(
        &self,
        input: &ModelInput,
        objective: impl FnOnce(&TagDistributions<T>) -> Result<(T, LogitGrads<T>, R), ModelError>,
    ) -> Result<(T, Self, R), ModelError> {
        let fwd = self.forward(input)?;
        let (loss, dlogits, extra) = objective(&fwd.dists)?;
        let mut grads = self.zeros_like();
        self.backward(input, &fwd, &dlogits, &mut grads);
        Ok((loss, grads, extra))
    }

    pub fn tagging_gradient(&self, input: &ModelInput, gold: &TagProgram) -> Result<(T, Self), ModelError> {
        self.objective_gradient(input, |dists| {
            let (loss, g) = tagging_loss_grad(dists, gold, input)?;
            Ok((loss, g, ()))
        })
        .map(|(loss, grads, ())| (loss, grads))
    }

    pub fn predict(&self, input: &ModelInput) -> Result<TagProgram, ModelError> {
        let fwd = self.forward(input)?;
        Ok(greedy_decode(&fwd.dists, input))
    }
}

pub fn encode<T: Scalar>(input: &ModelInput, params: &TaggerParams<T>) -> Result<EncoderState<T>, ModelError> {
    params.encoder().encode(input)
}

pub fn tag_distributions<T: Scalar>(state: &EncoderState<T>, input: &ModelInput, params: &TaggerParams<T>) -> TagDistributions<T> {
    heads::heads_forward(&params.heads, state, input).0
}

/// Trained weights together with the vocabulary and tokenization they expect.
#[derive(Debug, Clone, PartialEq)]
pub struct Tagger<T> {
    pub mode: TokenizationMode,
    pub vocab: Vocab,
    pub params: TaggerParams<T>,
}

impl<T: Scalar> Tagger<T> {
    pub fn input(&self, instance: &DialogueInstance) -> ModelInput {
        ModelInput::new(instance, &self.vocab)
    }

    /// Decodes a program for `instance` and executes it.
    pub fn rewrite(&self, instance: &DialogueInstance) -> Result<(TagProgram, Vec<Token>), ModelError> {
        let program = self.params.predict(&self.input(instance))?;
        let text = apply_tags(&instance.utterance, &instance.flat_context(), &program)?;
        Ok((program, text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::compile_tags;
    use crate::fixtures::winter_weather_dialogue;
    use crate::model::input::tokens;
    use crate::reconstruct::validate_program;

    fn tiny(vocab: &Vocab) -> TaggerParams<f64> {
        let mut cfg = TaggerConfig::new(vocab.len(), 8, 2);
        cfg.heads = 2;
        cfg.max_positions = 32;
        TaggerParams::init(cfg, 3)
    }

    #[test]
    fn encode_shape_and_determinism() {
        let inst = winter_weather_dialogue();
        let vocab = Vocab::build([&inst]);
        let params = tiny(&vocab);
        let input = ModelInput::new(&inst, &vocab);
        let a = encode(&input, &params).unwrap();
        let b = encode(&input, &params).unwrap();
        assert_eq!(a.len(), input.len());
        assert_eq!(a.dim, 8);
        assert!(a.vectors.iter().zip(&b.vectors).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.vectors.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn swapping_context_tokens_changes_encoding() {
        let ab = DialogueInstance::new(vec![tokens(&["a", "b"])], tokens(&["u"]), None);
        let ba = DialogueInstance::new(vec![tokens(&["b", "a"])], tokens(&["u"]), None);
        let vocab = Vocab::build([&ab]);
        let params = tiny(&vocab);
        let ea = encode(&ModelInput::new(&ab, &vocab), &params).unwrap();
        let eb = encode(&ModelInput::new(&ba, &vocab), &params).unwrap();
        // same multiset of tokens, different positions
        assert_ne!(ea.row(1), eb.row(2));
        assert_ne!(ea.vectors, eb.vectors);
    }

    #[test]
    fn unknown_ids_and_long_inputs_are_rejected() {
        let inst = winter_weather_dialogue();
        let vocab = Vocab::build([&inst]);
        let params = tiny(&vocab);
        let mut input = ModelInput::new(&inst, &vocab);
        input.ids[1] = vocab.len() + 5;
        assert!(matches!(encode(&input, &params), Err(ModelError::UnknownToken { .. })));

        let long = DialogueInstance::new(vec![vec!["a".to_string(); 40]], tokens(&["u"]), None);
        assert!(matches!(
            encode(&ModelInput::new(&long, &vocab), &params),
            Err(ModelError::InputTooLong { .. })
        ));
    }

    #[test]
    fn distributions_are_normalized_and_masked() {
        let inst = winter_weather_dialogue();
        let vocab = Vocab::build([&inst]);
        let params = tiny(&vocab);
        let input = ModelInput::new(&inst, &vocab);
        let state = encode(&input, &params).unwrap();
        let dists = tag_distributions(&state, &input, &params);
        assert_eq!(dists.query_count(), inst.utterance.len() + 1);
        for q in 0..dists.query_count() {
            assert!((dists.deletion[q][0] + dists.deletion[q][1] - 1.0).abs() < 1e-12);
            for dist in [&dists.start[q], &dists.end[q]] {
                assert_eq!(dist.len(), input.len());
                assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(dist[input.support_len()..].iter().all(|&p| p == 0.0));
            }
        }
        let program = greedy_decode(&dists, &input);
        assert!(validate_program(&program, inst.utterance.len(), &inst.flat_context()).is_empty());
    }

    #[test]
    fn zeroed_attention_gives_uniform_span_distribution() {
        let inst = DialogueInstance::new(vec![tokens(&["c"])], tokens(&["u"]), None);
        let vocab = Vocab::build([&inst]);
        let mut params = tiny(&vocab);
        for head in [&mut params.heads.start, &mut params.heads.end] {
            for t in [&mut head.w_query, &mut head.w_key, &mut head.bias, &mut head.v] {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let input = ModelInput::new(&inst, &vocab);
        let dists = tag_distributions(&encode(&input, &params).unwrap(), &input, &params);
        for q in 0..2 {
            assert_eq!(&dists.start[q][..2], &[0.5, 0.5]);
            assert_eq!(&dists.end[q][..2], &[0.5, 0.5]);
        }
    }

    #[test]
    fn tagging_loss_examples() {
        let inst = winter_weather_dialogue();
        let vocab = Vocab::build([&inst]);
        let input = ModelInput::new(&inst, &vocab);
        let gold = compile_tags(&inst).unwrap();
        let targets = heads::gold_targets(&gold, &input).unwrap();
        let n = input.len();
        let k = input.context_len;

        let onehot = |i: usize| {
            let mut v = vec![0.0f64; n];
            v[i] = 1.0;
            v
        };
        let perfect = TagDistributions {
            deletion: targets.iter().map(|&(d, _, _)| if d == 1 { [0.0, 1.0] } else { [1.0, 0.0] }).collect(),
            start: targets.iter().map(|&(_, s, _)| onehot(s)).collect(),
            end: targets.iter().map(|&(_, _, e)| onehot(e)).collect(),
        };
        assert_eq!(tagging_loss(&perfect, &gold, &input).unwrap(), 0.0);
        assert_eq!(greedy_decode(&perfect, &input), gold);

        let mut uniform_span = vec![1.0 / (k as f64 + 1.0); k + 1];
        uniform_span.resize(n, 0.0);
        let uniform = TagDistributions {
            deletion: vec![[0.5, 0.5]; gold.len()],
            start: vec![uniform_span.clone(); gold.len()],
            end: vec![uniform_span; gold.len()],
        };
        let per_position = 2f64.ln() + 2.0 * (k as f64 + 1.0).ln();
        let loss = tagging_loss(&uniform, &gold, &input).unwrap();
        assert!((loss - gold.len() as f64 * per_position).abs() < 1e-9);
    }

    #[test]
    fn gold_outside_context_is_rejected() {
        let inst = winter_weather_dialogue();
        let vocab = Vocab::build([&inst]);
        let input = ModelInput::new(&inst, &vocab);
        let mut gold = compile_tags(&inst).unwrap();
        gold.tags[0].insertion = Some(crate::alignment::Span::new(3, 12));
        assert!(matches!(heads::gold_targets(&gold, &input), Err(ModelError::InvalidGold(_))));
    }
}
