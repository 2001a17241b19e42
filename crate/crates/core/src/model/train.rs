//! Supervised training on compiled tag programs.

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::input::ModelInput;
use super::optim::{Adam, Optimizer};
use super::params::{TaggerConfig, TaggerParams};
use super::ModelError;
use crate::scalar::Scalar;
use crate::tags::TagProgram;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub input: ModelInput,
    pub gold: TagProgram,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub dim: usize,
    pub layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch: 16, lr: 1e-3, seed: 0, dim: 64, layers: 2 }
    }
}

impl TrainConfig {
    /// Model shape implied by this config for a given vocabulary size. The
    /// position table is sized to the longest training input.
    pub fn model_config(&self, vocab_size: usize, longest_input: usize) -> TaggerConfig {
        let mut cfg = TaggerConfig::new(vocab_size, self.dim, self.layers);
        cfg.max_positions = cfg.max_positions.max(longest_input);
        cfg
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean per-instance loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Sum of per-instance gradients over `batch`, computed in parallel and then
/// reduced in slice order so the result does not depend on scheduling.
pub fn reduce_in_order<T: Scalar>(
    params: &TaggerParams<T>,
    parts: Vec<Result<(T, TaggerParams<T>), ModelError>>,
) -> Result<(T, TaggerParams<T>), ModelError> {
    let mut total = params.zeros_like();
    let mut loss = T::zero();
    for part in parts {
        let (l, g) = part?;
        loss = loss + l;
        total.zip_mut(&g, |_, a, b| a.add_assign(b));
    }
    Ok((loss, total))
}

/// Summed tagging loss and gradient over a batch.
pub fn batch_gradient<T: Scalar>(
    params: &TaggerParams<T>,
    batch: &[&TrainingExample],
) -> Result<(T, TaggerParams<T>), ModelError> {
    let parts: Vec<_> = batch.par_iter().map(|ex| params.tagging_gradient(&ex.input, &ex.gold)).collect();
    reduce_in_order(params, parts)
}

/// Deterministic epoch order: a fresh seeded shuffle per epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Trains from a seeded initialization.
pub fn train<T: Scalar>(
    corpus: &[TrainingExample],
    vocab_size: usize,
    config: &TrainConfig,
) -> Result<(TaggerParams<T>, TrainReport), ModelError> {
    let longest = corpus.iter().map(|ex| ex.input.len()).max().ok_or(ModelError::EmptyCorpus)?;
    let model = config.model_config(vocab_size, longest);
    model.validate().map_err(ModelError::Config)?;
    let mut params = TaggerParams::init(model, config.seed);
    let report = train_from(&mut params, corpus, config)?;
    Ok((params, report))
}

/// Continues training `params` in place with Adam on the mean batch loss.
pub fn train_from<T: Scalar>(
    params: &mut TaggerParams<T>,
    corpus: &[TrainingExample],
    config: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    if config.batch == 0 {
        return Err(ModelError::Config("batch size must be positive".into()));
    }
    let mut opt = Adam::new(T::from_f64_lossy(config.lr));
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let order = epoch_order(corpus.len(), config.seed, epoch);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch).enumerate() {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &corpus[i]).collect();
            let (loss, mut grads) = batch_gradient(params, &batch)?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() || !grads.is_finite() {
                return Err(ModelError::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("loss {loss}; lower the learning rate or check the corpus"),
                });
            }
            epoch_loss += loss;
            let scale = T::one() / T::from_usize(batch.len()).expect("batch size");
            grads.for_each_mut(|_, t| t.scale(scale));
            opt.step(params, &grads);
        }
        let mean = epoch_loss / corpus.len() as f64;
        debug!("epoch {epoch}: mean loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// Fraction of tagged positions (utterance tokens and END) whose decoded tag
/// equals the gold tag, and fraction of instances decoded exactly.
pub fn tag_accuracy<T: Scalar>(params: &TaggerParams<T>, corpus: &[TrainingExample]) -> Result<(f64, f64), ModelError> {
    let per: Vec<(usize, usize, bool)> = corpus
        .par_iter()
        .map(|ex| {
            let pred = params.predict(&ex.input)?;
            let right = pred.tags.iter().zip(&ex.gold.tags).filter(|(a, b)| a == b).count();
            Ok((right, ex.gold.len(), pred == ex.gold))
        })
        .collect::<Result<_, ModelError>>()?;
    let (right, total) = per.iter().fold((0, 0), |(r, t), &(a, b, _)| (r + a, t + b));
    let exact = per.iter().filter(|p| p.2).count();
    if total == 0 {
        return Err(ModelError::EmptyCorpus);
    }
    Ok((right as f64 / total as f64, exact as f64 / corpus.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::compile_tags;
    use crate::dialogue::DialogueInstance;
    use crate::model::input::{tokens, Vocab};

    fn toy_corpus() -> (Vec<TrainingExample>, usize) {
        let instances = vec![
            DialogueInstance::new(vec![tokens(&["a", "b"])], tokens(&["x", "y"]), Some(tokens(&["a", "x", "y"]))),
            DialogueInstance::new(vec![tokens(&["c"])], tokens(&["z", "y"]), Some(tokens(&["z", "c"]))),
            DialogueInstance::new(vec![tokens(&["b", "d"])], tokens(&["x"]), Some(tokens(&["x"]))),
        ];
        let vocab = Vocab::build(&instances);
        let corpus = instances
            .iter()
            .map(|inst| TrainingExample { input: ModelInput::new(inst, &vocab), gold: compile_tags(inst).unwrap() })
            .collect();
        (corpus, vocab.len())
    }

    fn small(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch: 2, lr: 1e-2, seed: 5, dim: 8, layers: 1 }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (corpus, v) = toy_corpus();
        let cfg = small(0);
        let (params, report) = train::<f64>(&corpus, v, &cfg).unwrap();
        let longest = corpus.iter().map(|e| e.input.len()).max().unwrap();
        assert_eq!(params, TaggerParams::init(cfg.model_config(v, longest), cfg.seed));
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn same_seed_same_result() {
        let (corpus, v) = toy_corpus();
        let (a, ra) = train::<f32>(&corpus, v, &small(4)).unwrap();
        let (b, rb) = train::<f32>(&corpus, v, &small(4)).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(train::<f32>(&[], 10, &small(1)), Err(ModelError::EmptyCorpus)));
    }

    #[test]
    fn nan_loss_aborts() {
        let (corpus, v) = toy_corpus();
        let cfg = small(1);
        let longest = corpus.iter().map(|e| e.input.len()).max().unwrap();
        let mut params = TaggerParams::<f64>::init(cfg.model_config(v, longest), 1);
        params.heads.deletion_b.data[0] = f64::NAN;
        assert!(matches!(train_from(&mut params, &corpus, &cfg), Err(ModelError::Divergence { .. })));
    }

    #[test]
    fn loss_goes_down_on_a_tiny_corpus() {
        let (corpus, v) = toy_corpus();
        let (params, report) = train::<f64>(&corpus, v, &small(40)).unwrap();
        assert!(report.epoch_losses.last().unwrap() < &(report.epoch_losses[0] * 0.5));
        let (acc, _) = tag_accuracy(&params, &corpus).unwrap();
        assert!(acc > 0.5);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(20, 3, 1);
        assert_eq!(a, epoch_order(20, 3, 1));
        assert_ne!(a, epoch_order(20, 3, 2));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }
}
