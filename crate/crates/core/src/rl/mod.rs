//! Self-critical policy-gradient fine-tuning: a sampled tag program is
//! rewarded relative to the greedy program's reward, and that signal is mixed
//! with the tagging loss.
//!
//! Sampling draws per tagged position a deletion bit, then a start position;
//! a NULL start forces a NULL end, otherwise the end is drawn from the end
//! distribution renormalized over positions at or after the start in the same
//! turn. Every sample is therefore executable.

pub mod scorer;

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::Span;
use crate::compiler::{compile_tags, CompileError};
use crate::dialogue::{DialogueInstance, Token, TokenizationMode};
use crate::metrics::sentence_bleu_smooth3;
use crate::model::decode::greedy_decode;
use crate::model::heads::tagging_loss_grad;
use crate::model::optim::{Adam, Optimizer};
use crate::model::train::{epoch_order, reduce_in_order};
use crate::model::{LogitGrads, ModelError, ModelInput, TagDistributions, TaggerParams, Vocab};
use crate::reconstruct::apply_tags;
use crate::scalar::Scalar;
use crate::tags::{TagProgram, TokenTag};

pub use scorer::{Scorer, ScorerError, StubScorer, TcpScorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    #[default]
    Bleu,
    Lm,
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardKind::Bleu => "bleu",
            RewardKind::Lm => "lm",
        })
    }
}

impl FromStr for RewardKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bleu" => Ok(RewardKind::Bleu),
            "lm" | "external_lm" => Ok(RewardKind::Lm),
            other => Err(format!("unknown reward `{other}` (expected bleu|lm)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RLConfig {
    /// Weight of the policy-gradient term; `1 − lambda` weights tagging.
    pub lambda: f64,
    pub reward_kind: RewardKind,
    pub seed: u64,
}

impl Default for RLConfig {
    fn default() -> Self {
        Self { lambda: 0.5, reward_kind: RewardKind::Bleu, seed: 0 }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<(), String> {
        if (0.0..=1.0).contains(&self.lambda) {
            Ok(())
        } else {
            Err(format!("lambda {} must lie in [0, 1]", self.lambda))
        }
    }
}

/// Sentence BLEU with smoothing 3; an empty candidate scores 0.
pub fn bleu_reward(candidate: &[Token], reference: &[Token]) -> f64 {
    if candidate.is_empty() {
        0.0
    } else {
        sentence_bleu_smooth3(candidate, reference)
    }
}

pub fn reward_from_perplexity(perplexity: f64) -> f64 {
    -perplexity.ln()
}

pub fn lm_reward(candidate: &[Token], scorer: &dyn Scorer, mode: TokenizationMode) -> Result<f64, ScorerError> {
    let ppl = scorer.perplexities(&[mode.join(candidate)])?;
    Ok(reward_from_perplexity(ppl[0]))
}

/// Advantage-weighted log-likelihood: `(r_greedy − r_sampled) · log p(sample)`.
pub fn rl_loss(reward_greedy: f64, reward_sampled: f64, logprob_sampled: f64) -> f64 {
    (reward_greedy - reward_sampled) * logprob_sampled
}

pub enum RewardFunction<'a> {
    Bleu,
    Lm { scorer: &'a dyn Scorer, mode: TokenizationMode },
}

impl RewardFunction<'_> {
    pub fn kind(&self) -> RewardKind {
        match self {
            RewardFunction::Bleu => RewardKind::Bleu,
            RewardFunction::Lm { .. } => RewardKind::Lm,
        }
    }

    /// Rewards for a set of candidates, issued as a single scorer request
    /// for the LM reward.
    pub fn rewards(&self, candidates: &[&[Token]], references: &[&[Token]]) -> Result<Vec<f64>, ScorerError> {
        match self {
            RewardFunction::Bleu => Ok(candidates.iter().zip(references).map(|(c, r)| bleu_reward(c, r)).collect()),
            RewardFunction::Lm { scorer, mode } => {
                let texts: Vec<String> = candidates.iter().map(|c| mode.join(c)).collect();
                Ok(scorer.perplexities(&texts)?.into_iter().map(reward_from_perplexity).collect())
            }
        }
    }
}

fn ln<T: Scalar>(p: T) -> T {
    p.ln()
}

/// Legal end positions for a non-NULL start: the start's context index up to
/// the end of its turn.
fn legal_ends(input: &ModelInput, start: usize) -> std::ops::RangeInclusive<usize> {
    let mut hi = start;
    while hi + 1 < input.context_len && input.same_turn(start, hi + 1) {
        hi += 1;
    }
    start..=hi
}

fn draw<T: Scalar, R: Rng>(weights: impl Iterator<Item = T>, rng: &mut R) -> Option<usize> {
    let w: Vec<f64> = weights.map(|p| p.to_f64_lossy()).collect();
    WeightedIndex::new(&w).ok().map(|d| d.sample(rng))
}

/// Draws one program and returns it with its exact log-probability.
///
/// If the renormalized end distribution has no mass at all (underflow), the
/// end collapses onto the start with probability one.
pub fn sample_program<T: Scalar, R: Rng>(dists: &TagDistributions<T>, input: &ModelInput, rng: &mut R) -> (TagProgram, T) {
    let last = dists.query_count() - 1;
    let support = input.support_len();
    let mut logprob = T::zero();
    let mut tags = Vec::with_capacity(dists.query_count());
    for q in 0..dists.query_count() {
        let deletion = if q == last {
            false
        } else {
            let [keep, del] = dists.deletion[q];
            let d = rng.random::<f64>() < del.to_f64_lossy();
            logprob = logprob + ln(if d { del } else { keep });
            d
        };
        let st = &dists.start[q];
        let ed = &dists.end[q];
        let s = draw(st[..support].iter().copied(), rng).unwrap_or(0);
        logprob = logprob + ln(st[s]);
        let insertion = match input.context_index(s) {
            None => {
                logprob = logprob + ln(ed[0]);
                None
            }
            Some(cs) => {
                let legal = legal_ends(input, cs);
                let lo = *legal.start();
                let weights = legal.clone().map(|c| ed[input.context_position(c)]);
                let z: T = weights.clone().sum();
                let ce = match draw(weights, rng) {
                    Some(i) => {
                        let ce = lo + i;
                        logprob = logprob + ln(ed[input.context_position(ce)] / z);
                        ce
                    }
                    None => cs,
                };
                Some(Span::new(cs, ce))
            }
        };
        tags.push(TokenTag { deletion, insertion });
    }
    (TagProgram::new(tags), logprob)
}

/// Log-probability of `program` under the sampler, recomputed from scratch.
pub fn program_logprob<T: Scalar>(dists: &TagDistributions<T>, program: &TagProgram, input: &ModelInput) -> T {
    let last = dists.query_count() - 1;
    let mut total = T::zero();
    for (q, tag) in program.tags.iter().enumerate() {
        if q != last {
            total = total + dists.deletion[q][usize::from(tag.deletion)].ln();
        }
        match tag.insertion {
            None => total = total + dists.start[q][0].ln() + dists.end[q][0].ln(),
            Some(span) => {
                total = total + dists.start[q][input.context_position(span.start)].ln();
                let z: T = legal_ends(input, span.start).map(|c| dists.end[q][input.context_position(c)]).sum();
                if z > T::zero() {
                    total = total + (dists.end[q][input.context_position(span.end)] / z).ln();
                }
            }
        }
    }
    total
}

/// Gradient of `program_logprob` with respect to the head logits:
/// `onehot − p` for each full softmax, and `onehot − p|legal` for a
/// renormalized end draw.
pub fn logprob_grad<T: Scalar>(dists: &TagDistributions<T>, program: &TagProgram, input: &ModelInput) -> LogitGrads<T> {
    let support = input.support_len();
    let last = dists.query_count() - 1;
    let mut g = LogitGrads::zeros(dists.query_count(), support);
    for (q, tag) in program.tags.iter().enumerate() {
        if q != last {
            let d = usize::from(tag.deletion);
            g.deletion[q] = [-dists.deletion[q][0], -dists.deletion[q][1]];
            g.deletion[q][d] = g.deletion[q][d] + T::one();
        }
        let (s, e) = match tag.insertion {
            None => (0, None),
            Some(span) => (input.context_position(span.start), Some(span)),
        };
        for m in 0..support {
            g.start[q][m] = -dists.start[q][m];
        }
        g.start[q][s] = g.start[q][s] + T::one();
        match e {
            None => {
                for m in 0..support {
                    g.end[q][m] = -dists.end[q][m];
                }
                g.end[q][0] = g.end[q][0] + T::one();
            }
            Some(span) => {
                let legal = legal_ends(input, span.start);
                let z: T = legal.clone().map(|c| dists.end[q][input.context_position(c)]).sum();
                if z > T::zero() {
                    for c in legal {
                        let m = input.context_position(c);
                        g.end[q][m] = -dists.end[q][m] / z;
                    }
                    let m = input.context_position(span.end);
                    g.end[q][m] = g.end[q][m] + T::one();
                }
            }
        }
    }
    g
}

/// Per-instance RNG: the run seed selects the key, the global draw index the
/// stream, so samples do not depend on thread scheduling or batch layout.
pub fn instance_rng(seed: u64, draw_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw_index);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub program: TagProgram,
    pub text: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePair {
    pub sampled: Candidate,
    pub logprob: f64,
    pub greedy: Candidate,
}

/// A covered training instance prepared for fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct RlExample {
    pub instance: DialogueInstance,
    pub input: ModelInput,
    pub gold: TagProgram,
}

impl RlExample {
    pub fn new(instance: DialogueInstance, vocab: &Vocab) -> Result<Self, CompileError> {
        let gold = compile_tags(&instance)?;
        let input = ModelInput::new(&instance, vocab);
        Ok(Self { instance, input, gold })
    }
}

/// Batch means of the objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub tagging_loss: f64,
    pub rl_loss: f64,
    pub loss: f64,
    pub reward_greedy: f64,
    pub reward_sampled: f64,
    /// False when the reward could not be computed and the batch fell back
    /// to the tagging loss alone.
    pub rl_applied: bool,
}

struct Rollout<T> {
    fwd: crate::model::Forward<T>,
    tag_loss: T,
    tag_grads: LogitGrads<T>,
    pair: CandidatePair,
}

fn rollout<T: Scalar>(params: &TaggerParams<T>, ex: &RlExample, rng: &mut ChaCha8Rng) -> Result<Rollout<T>, ModelError> {
    let fwd = params.forward(&ex.input)?;
    let (tag_loss, tag_grads) = tagging_loss_grad(&fwd.dists, &ex.gold, &ex.input)?;
    let ctx = ex.instance.flat_context();
    let (sampled, logprob) = sample_program(&fwd.dists, &ex.input, rng);
    let greedy = greedy_decode(&fwd.dists, &ex.input);
    let pair = CandidatePair {
        sampled: Candidate { text: apply_tags(&ex.instance.utterance, &ctx, &sampled)?, program: sampled },
        logprob: logprob.to_f64_lossy(),
        greedy: Candidate { text: apply_tags(&ex.instance.utterance, &ctx, &greedy)?, program: greedy },
    };
    Ok(Rollout { fwd, tag_loss, tag_grads, pair })
}

/// Summed gradient of `(1 − λ)·L_tagging + λ·L_rl` over `batch`. Instance `i`
/// samples from stream `first_draw + i`. If the reward fails, the batch uses
/// the tagging loss alone.
pub fn combined_gradient<T: Scalar>(
    params: &TaggerParams<T>,
    batch: &[&RlExample],
    lambda: f64,
    seed: u64,
    first_draw: u64,
    reward: &RewardFunction<'_>,
) -> Result<(StepReport, TaggerParams<T>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let rollouts: Vec<Rollout<T>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| rollout(params, ex, &mut instance_rng(seed, first_draw + i as u64)))
        .collect::<Result<_, _>>()?;

    let references: Vec<&[Token]> = batch.iter().map(|ex| ex.instance.reference.as_deref().unwrap_or(&[])).collect();
    let candidates: Vec<&[Token]> = rollouts
        .iter()
        .flat_map(|r| [r.pair.greedy.text.as_slice(), r.pair.sampled.text.as_slice()])
        .collect();
    let paired_refs: Vec<&[Token]> = references.iter().flat_map(|r| [*r, *r]).collect();
    let rewards = match reward.rewards(&candidates, &paired_refs) {
        Ok(r) => Some(r),
        Err(e) => {
            warn!("reward unavailable, batch of {} falls back to tagging loss: {e}", batch.len());
            None
        }
    };

    let n = batch.len() as f64;
    let mut report = StepReport { rl_applied: rewards.is_some(), ..StepReport::default() };
    let parts: Vec<_> = rollouts
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let (dlogits, loss) = match &rewards {
                Some(rw) => {
                    let (rg, rs) = (rw[2 * i], rw[2 * i + 1]);
                    let l_rl = rl_loss(rg, rs, r.pair.logprob);
                    let lam = T::from_f64_lossy(lambda);
                    let mut d = r.tag_grads.clone().scaled(T::one() - lam);
                    let lp = logprob_grad(&r.fwd.dists, &r.pair.sampled.program, &batch[i].input);
                    d.add_scaled(&lp, lam * T::from_f64_lossy(rg - rs));
                    let total = (T::one() - lam) * r.tag_loss + lam * T::from_f64_lossy(l_rl);
                    (d, total)
                }
                None => (r.tag_grads.clone(), r.tag_loss),
            };
            let mut grads = params.zeros_like();
            params.backward(&batch[i].input, &r.fwd, &dlogits, &mut grads);
            Ok((loss, grads))
        })
        .collect();
    let (loss, grads) = reduce_in_order(params, parts)?;

    report.loss = loss.to_f64_lossy() / n;
    report.tagging_loss = rollouts.iter().map(|r| r.tag_loss.to_f64_lossy()).sum::<f64>() / n;
    if let Some(rw) = &rewards {
        for (i, r) in rollouts.iter().enumerate() {
            report.reward_greedy += rw[2 * i] / n;
            report.reward_sampled += rw[2 * i + 1] / n;
            report.rl_loss += rl_loss(rw[2 * i], rw[2 * i + 1], r.pair.logprob) / n;
        }
    }
    Ok((report, grads))
}

/// Stage-two trainer holding the optimizer state and the draw counter.
pub struct RlTrainer<T: Scalar> {
    pub config: RLConfig,
    optimizer: Box<dyn Optimizer<T> + Send>,
    draws: u64,
}

impl<T: Scalar> RlTrainer<T> {
    pub fn new(config: RLConfig, lr: f64) -> Result<Self, ModelError> {
        Self::with_optimizer(config, Box::new(Adam::new(T::from_f64_lossy(lr))))
    }

    pub fn with_optimizer(config: RLConfig, optimizer: Box<dyn Optimizer<T> + Send>) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Config)?;
        Ok(Self { config, optimizer, draws: 0 })
    }

    /// One descent step on the batch-mean combined objective.
    pub fn combined_step(
        &mut self,
        params: &mut TaggerParams<T>,
        batch: &[&RlExample],
        reward: &RewardFunction<'_>,
    ) -> Result<StepReport, ModelError> {
        let (report, mut grads) = combined_gradient(params, batch, self.config.lambda, self.config.seed, self.draws, reward)?;
        self.draws += batch.len() as u64;
        if !report.loss.is_finite() || !grads.is_finite() {
            return Err(ModelError::Divergence {
                epoch: 0,
                batch: 0,
                detail: format!("combined loss {} after {} draws", report.loss, self.draws),
            });
        }
        let scale = T::one() / T::from_usize(batch.len()).expect("batch size");
        grads.for_each_mut(|_, t| t.scale(scale));
        self.optimizer.step(params, &grads);
        Ok(report)
    }

    /// Runs `epochs` passes over `corpus` in seeded shuffled batches.
    pub fn fine_tune(
        &mut self,
        params: &mut TaggerParams<T>,
        corpus: &[RlExample],
        epochs: usize,
        batch_size: usize,
        reward: &RewardFunction<'_>,
    ) -> Result<Vec<StepReport>, ModelError> {
        if corpus.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        if batch_size == 0 {
            return Err(ModelError::Config("batch size must be positive".into()));
        }
        let mut reports = Vec::new();
        for epoch in 0..epochs {
            let order = epoch_order(corpus.len(), self.config.seed ^ 0x5eed, epoch);
            for (b, chunk) in order.chunks(batch_size).enumerate() {
                let batch: Vec<&RlExample> = chunk.iter().map(|&i| &corpus[i]).collect();
                let report = self.combined_step(params, &batch, reward).map_err(|e| match e {
                    ModelError::Divergence { detail, .. } => ModelError::Divergence { epoch, batch: b, detail },
                    other => other,
                })?;
                reports.push(report);
            }
        }
        Ok(reports)
    }
}
