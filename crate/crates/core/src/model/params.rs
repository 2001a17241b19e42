//! Model configuration and trainable weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::input::REGION_COUNT;
use super::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub vocab_size: usize,
    /// Model width `d`.
    pub dim: usize,
    /// Number of self-attention blocks.
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Hidden width of the additive span attention.
    pub attn_dim: usize,
    pub max_positions: usize,
    /// Turn-distance buckets; bucket 0 marks non-context positions.
    pub turn_buckets: usize,
}

impl TaggerConfig {
    pub fn new(vocab_size: usize, dim: usize, layers: usize) -> Self {
        Self {
            vocab_size,
            dim,
            layers,
            heads: if dim % 4 == 0 { 4 } else { 1 },
            ffn_dim: 2 * dim,
            attn_dim: dim,
            max_positions: 512,
            turn_buckets: 8,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.vocab_size < 3 || self.max_positions < 2 || self.turn_buckets < 2 {
            return Err("vocab_size ≥ 3, max_positions ≥ 2 and turn_buckets ≥ 2 required".into());
        }
        if self.ffn_dim == 0 || self.attn_dim == 0 {
            return Err("ffn_dim and attn_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub token_emb: Tensor<T>,
    pub position_emb: Tensor<T>,
    pub region_emb: Tensor<T>,
    pub turn_emb: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
}

/// Additive attention `vᵀ tanh(W_q e_n + W_k e_m + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanHeadParams<T> {
    pub w_query: Tensor<T>,
    pub w_key: Tensor<T>,
    pub bias: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    /// Deletion classifier, `d×2` weights and a 2-vector bias.
    pub deletion_w: Tensor<T>,
    pub deletion_b: Tensor<T>,
    pub start: SpanHeadParams<T>,
    pub end: SpanHeadParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggerParams<T> {
    pub config: TaggerConfig,
    pub encoder: EncoderParams<T>,
    pub heads: HeadParams<T>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn xavier<T: Scalar>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| T::from_f64_lossy(self.rng.random_range(-a..a))).collect();
        Tensor::from_vec(&[rows, cols], data)
    }

    fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut self.rng))).collect())
    }
}

impl<T: Scalar> TaggerParams<T> {
    /// Seeded initialization: Xavier-uniform matrices, N(0, 0.1) embeddings,
    /// zero biases and unit layer-norm gains.
    pub fn init(config: TaggerConfig, seed: u64) -> Self {
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let (d, f, a) = (config.dim, config.ffn_dim, config.attn_dim);
        let emb_std = 0.1;
        let encoder = EncoderParams {
            token_emb: init.normal(&[config.vocab_size, d], emb_std),
            position_emb: init.normal(&[config.max_positions, d], emb_std),
            region_emb: init.normal(&[REGION_COUNT, d], emb_std),
            turn_emb: init.normal(&[config.turn_buckets, d], emb_std),
            blocks: (0..config.layers)
                .map(|_| BlockParams {
                    wq: init.xavier(d, d),
                    bq: Tensor::zeros(&[d]),
                    wk: init.xavier(d, d),
                    bk: Tensor::zeros(&[d]),
                    wv: init.xavier(d, d),
                    bv: Tensor::zeros(&[d]),
                    wo: init.xavier(d, d),
                    bo: Tensor::zeros(&[d]),
                    ln1_gain: Tensor::filled(&[d], T::one()),
                    ln1_bias: Tensor::zeros(&[d]),
                    w1: init.xavier(d, f),
                    b1: Tensor::zeros(&[f]),
                    w2: init.xavier(f, d),
                    b2: Tensor::zeros(&[d]),
                    ln2_gain: Tensor::filled(&[d], T::one()),
                    ln2_bias: Tensor::zeros(&[d]),
                })
                .collect(),
        };
        let span_head = |init: &mut Init| SpanHeadParams {
            w_query: init.xavier(d, a),
            w_key: init.xavier(d, a),
            bias: Tensor::zeros(&[a]),
            v: init.xavier(a, 1).reshaped(&[a]),
        };
        let start = span_head(&mut init);
        let end = span_head(&mut init);
        let heads = HeadParams { deletion_w: init.xavier(d, 2), deletion_b: Tensor::zeros(&[2]), start, end };
        Self { config, encoder, heads }
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.data.iter_mut().for_each(|v| *v = T::zero()));
        z
    }

    /// Visits every tensor with a stable, unique name.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        for (name, t) in self.named() {
            f(&name, t);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for (name, t) in self.named_mut() {
            f(&name, t);
        }
    }

    /// Pairs every tensor of `self` with the same-named tensor of `other`.
    pub fn zip_mut(&mut self, other: &Self, mut f: impl FnMut(&str, &mut Tensor<T>, &Tensor<T>)) {
        for ((name, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            f(&name, a, b);
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let e = &self.encoder;
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("token_emb".into(), &e.token_emb),
            ("position_emb".into(), &e.position_emb),
            ("region_emb".into(), &e.region_emb),
            ("turn_emb".into(), &e.turn_emb),
        ];
        for (i, b) in e.blocks.iter().enumerate() {
            for (n, t) in [
                ("wq", &b.wq),
                ("bq", &b.bq),
                ("wk", &b.wk),
                ("bk", &b.bk),
                ("wv", &b.wv),
                ("bv", &b.bv),
                ("wo", &b.wo),
                ("bo", &b.bo),
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
            ] {
                out.push((format!("block{i}.{n}"), t));
            }
        }
        let h = &self.heads;
        out.push(("deletion.w".into(), &h.deletion_w));
        out.push(("deletion.b".into(), &h.deletion_b));
        for (prefix, s) in [("start", &h.start), ("end", &h.end)] {
            out.push((format!("{prefix}.w_query"), &s.w_query));
            out.push((format!("{prefix}.w_key"), &s.w_key));
            out.push((format!("{prefix}.bias"), &s.bias));
            out.push((format!("{prefix}.v"), &s.v));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let e = &mut self.encoder;
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("token_emb".into(), &mut e.token_emb),
            ("position_emb".into(), &mut e.position_emb),
            ("region_emb".into(), &mut e.region_emb),
            ("turn_emb".into(), &mut e.turn_emb),
        ];
        for (i, b) in e.blocks.iter_mut().enumerate() {
            for (n, t) in [
                ("wq", &mut b.wq),
                ("bq", &mut b.bq),
                ("wk", &mut b.wk),
                ("bk", &mut b.bk),
                ("wv", &mut b.wv),
                ("bv", &mut b.bv),
                ("wo", &mut b.wo),
                ("bo", &mut b.bo),
                ("ln1_gain", &mut b.ln1_gain),
                ("ln1_bias", &mut b.ln1_bias),
                ("w1", &mut b.w1),
                ("b1", &mut b.b1),
                ("w2", &mut b.w2),
                ("b2", &mut b.b2),
                ("ln2_gain", &mut b.ln2_gain),
                ("ln2_bias", &mut b.ln2_bias),
            ] {
                out.push((format!("block{i}.{n}"), t));
            }
        }
        let h = &mut self.heads;
        out.push(("deletion.w".into(), &mut h.deletion_w));
        out.push(("deletion.b".into(), &mut h.deletion_b));
        for (prefix, s) in [("start", &mut h.start), ("end", &mut h.end)] {
            out.push((format!("{prefix}.w_query"), &mut s.w_query));
            out.push((format!("{prefix}.w_key"), &mut s.w_key));
            out.push((format!("{prefix}.bias"), &mut s.bias));
            out.push((format!("{prefix}.v"), &mut s.v));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Elementwise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> TaggerParams<U> {
        let mut out = TaggerParams::<U>::init(self.config, 0);
        for ((_, dst), (_, src)) in out.named_mut().into_iter().zip(self.named()) {
            dst.data = src.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect();
        }
        out
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }
}
