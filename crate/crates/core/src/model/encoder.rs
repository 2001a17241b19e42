//! Contextual encoder: token, position, region and turn embeddings followed by
//! post-norm transformer blocks (multi-head self-attention and a GELU
//! feed-forward layer, each with a residual connection and layer norm).

use super::input::ModelInput;
use super::params::{BlockParams, EncoderParams, TaggerConfig};
use super::tensor::{linear, linear_backward, softmax_in_place, Tensor};
use super::ModelError;
use crate::scalar::Scalar;

/// One `d`-vector per input position, row-major `N×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState<T> {
    pub dim: usize,
    pub vectors: Vec<T>,
}

impl<T: Scalar> EncoderState<T> {
    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Anything that maps a [`ModelInput`] to one vector per position. The tag
/// heads only depend on this contract.
pub trait Encoder<T: Scalar> {
    fn dim(&self) -> usize;
    fn encode(&self, input: &ModelInput) -> Result<EncoderState<T>, ModelError>;
}

const LN_EPS: f64 = 1e-5;

struct LayerNormCache<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
}

fn layer_norm<T: Scalar>(x: &[T], gain: &Tensor<T>, bias: &Tensor<T>, d: usize) -> (Vec<T>, LayerNormCache<T>) {
    let n = x.len() / d;
    let df = T::from_usize(d).unwrap();
    let eps = T::from_f64_lossy(LN_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            normalized[i * d + j] = xh;
            out[i * d + j] = xh * gain.data[j] + bias.data[j];
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LayerNormCache<T>,
    gain: &Tensor<T>,
    dgain: &mut Tensor<T>,
    dbias: &mut Tensor<T>,
    d: usize,
) -> Vec<T> {
    let n = dy.len() / d;
    let df = T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxh = vec![T::zero(); d];
    for i in 0..n {
        let xh = &cache.normalized[i * d..(i + 1) * d];
        let g = &dy[i * d..(i + 1) * d];
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for j in 0..d {
            dgain.data[j] = dgain.data[j] + g[j] * xh[j];
            dbias.data[j] = dbias.data[j] + g[j];
            dxh[j] = g[j] * gain.data[j];
            mean_dxh = mean_dxh + dxh[j];
            mean_dxh_xh = mean_dxh_xh + dxh[j] * xh[j];
        }
        mean_dxh = mean_dxh / df;
        mean_dxh_xh = mean_dxh_xh / df;
        for j in 0..d {
            dx[i * d + j] = cache.inv_std[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

fn gelu_parts<T: Scalar>(z: T) -> (T, T) {
    let half = T::from_f64_lossy(0.5);
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let three = T::from_f64_lossy(3.0);
    let u = c * (z + k * z * z * z);
    let t = u.tanh();
    let value = half * z * (T::one() + t);
    let deriv = half * (T::one() + t) + half * z * (T::one() - t * t) * c * (T::one() + three * k * z * z);
    (value, deriv)
}

pub(crate) struct BlockCache<T> {
    input: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention weights, `heads × N × N`.
    attn: Vec<T>,
    context: Vec<T>,
    ln1: LayerNormCache<T>,
    h1: Vec<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
    ln2: LayerNormCache<T>,
}

pub(crate) struct EncoderCache<T> {
    blocks: Vec<BlockCache<T>>,
}

fn block_forward<T: Scalar>(x: Vec<T>, p: &BlockParams<T>, cfg: &TaggerConfig, n: usize) -> (Vec<T>, BlockCache<T>) {
    let d = cfg.dim;
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let q = linear(&x, &p.wq, Some(&p.bq), n);
    let k = linear(&x, &p.wk, Some(&p.bk), n);
    let v = linear(&x, &p.wv, Some(&p.bv), n);

    let mut attn = vec![T::zero(); h * n * n];
    let mut context = vec![T::zero(); n * d];
    for head in 0..h {
        let off = head * dh;
        for i in 0..n {
            let row = &mut attn[(head * n + i) * n..(head * n + i + 1) * n];
            let qi = &q[i * d + off..i * d + off + dh];
            for (j, slot) in row.iter_mut().enumerate() {
                let kj = &k[j * d + off..j * d + off + dh];
                *slot = super::tensor::dot(qi, kj) * scale;
            }
            softmax_in_place(row);
            let ci = &mut context[i * d + off..i * d + off + dh];
            for (j, &a) in row.iter().enumerate() {
                let vj = &v[j * d + off..j * d + off + dh];
                for (c, &vv) in ci.iter_mut().zip(vj) {
                    *c = *c + a * vv;
                }
            }
        }
    }

    let o = linear(&context, &p.wo, Some(&p.bo), n);
    let r1: Vec<T> = x.iter().zip(&o).map(|(&a, &b)| a + b).collect();
    let (h1, ln1) = layer_norm(&r1, &p.ln1_gain, &p.ln1_bias, d);
    let pre_act = linear(&h1, &p.w1, Some(&p.b1), n);
    let act: Vec<T> = pre_act.iter().map(|&z| gelu_parts(z).0).collect();
    let f = linear(&act, &p.w2, Some(&p.b2), n);
    let r2: Vec<T> = h1.iter().zip(&f).map(|(&a, &b)| a + b).collect();
    let (y, ln2) = layer_norm(&r2, &p.ln2_gain, &p.ln2_bias, d);
    (y, BlockCache { input: x, q, k, v, attn, context, ln1, h1, pre_act, act, ln2 })
}

fn block_backward<T: Scalar>(
    dy: &[T],
    c: &BlockCache<T>,
    p: &BlockParams<T>,
    g: &mut BlockParams<T>,
    cfg: &TaggerConfig,
    n: usize,
) -> Vec<T> {
    let d = cfg.dim;
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let dr2 = layer_norm_backward(dy, &c.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias, d);
    let dact = linear_backward(&c.act, &dr2, &p.w2, &mut g.w2, Some(&mut g.b2), n);
    let dpre: Vec<T> = dact.iter().zip(&c.pre_act).map(|(&da, &z)| da * gelu_parts(z).1).collect();
    let mut dh1 = linear_backward(&c.h1, &dpre, &p.w1, &mut g.w1, Some(&mut g.b1), n);
    for (a, &b) in dh1.iter_mut().zip(&dr2) {
        *a = *a + b;
    }
    let dr1 = layer_norm_backward(&dh1, &c.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias, d);
    let dcontext = linear_backward(&c.context, &dr1, &p.wo, &mut g.wo, Some(&mut g.bo), n);

    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut da = vec![T::zero(); n];
    for head in 0..h {
        let off = head * dh;
        for i in 0..n {
            let a = &c.attn[(head * n + i) * n..(head * n + i + 1) * n];
            let dci = &dcontext[i * d + off..i * d + off + dh];
            let mut weighted = T::zero();
            for j in 0..n {
                let vj = &c.v[j * d + off..j * d + off + dh];
                da[j] = super::tensor::dot(dci, vj);
                weighted = weighted + a[j] * da[j];
                for (x, &gc) in dv[j * d + off..j * d + off + dh].iter_mut().zip(dci) {
                    *x = *x + a[j] * gc;
                }
            }
            for j in 0..n {
                let ds = a[j] * (da[j] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                for t in 0..dh {
                    dq[i * d + off + t] = dq[i * d + off + t] + ds * c.k[j * d + off + t];
                    dk[j * d + off + t] = dk[j * d + off + t] + ds * c.q[i * d + off + t];
                }
            }
        }
    }

    let mut dx = dr1;
    for (dproj, w, dw, db) in [
        (&dq, &p.wq, &mut g.wq, &mut g.bq),
        (&dk, &p.wk, &mut g.wk, &mut g.bk),
        (&dv, &p.wv, &mut g.wv, &mut g.bv),
    ] {
        let part = linear_backward(&c.input, dproj, w, dw, Some(db), n);
        for (a, b) in dx.iter_mut().zip(part) {
            *a = *a + b;
        }
    }
    dx
}

fn turn_bucket(feature: usize, buckets: usize) -> usize {
    feature.min(buckets - 1)
}

pub(crate) fn check_input<T: Scalar>(input: &ModelInput, cfg: &TaggerConfig) -> Result<(), ModelError> {
    if input.len() > cfg.max_positions {
        return Err(ModelError::InputTooLong { len: input.len(), max: cfg.max_positions });
    }
    if let Some(&bad) = input.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(ModelError::UnknownToken { id: bad, vocab_size: cfg.vocab_size });
    }
    Ok(())
}

pub(crate) fn encoder_forward<T: Scalar>(
    p: &EncoderParams<T>,
    cfg: &TaggerConfig,
    input: &ModelInput,
) -> Result<(EncoderState<T>, EncoderCache<T>), ModelError> {
    check_input::<T>(input, cfg)?;
    let (n, d) = (input.len(), cfg.dim);
    let mut x = vec![T::zero(); n * d];
    for pos in 0..n {
        let row = &mut x[pos * d..(pos + 1) * d];
        let parts = [
            p.token_emb.row(input.ids[pos]),
            p.position_emb.row(pos),
            p.region_emb.row(input.regions[pos] as usize),
            p.turn_emb.row(turn_bucket(input.turn_features[pos], cfg.turn_buckets)),
        ];
        for part in parts {
            for (r, &v) in row.iter_mut().zip(part) {
                *r = *r + v;
            }
        }
    }
    let mut caches = Vec::with_capacity(p.blocks.len());
    for block in &p.blocks {
        let (y, cache) = block_forward(x, block, cfg, n);
        caches.push(cache);
        x = y;
    }
    Ok((EncoderState { dim: d, vectors: x }, EncoderCache { blocks: caches }))
}

pub(crate) fn encoder_backward<T: Scalar>(
    p: &EncoderParams<T>,
    g: &mut EncoderParams<T>,
    cfg: &TaggerConfig,
    input: &ModelInput,
    cache: &EncoderCache<T>,
    d_state: Vec<T>,
) {
    let (n, d) = (input.len(), cfg.dim);
    let mut dx = d_state;
    for ((block, grad), c) in p.blocks.iter().zip(g.blocks.iter_mut()).zip(&cache.blocks).rev() {
        dx = block_backward(&dx, c, block, grad, cfg, n);
    }
    for pos in 0..n {
        let src = &dx[pos * d..(pos + 1) * d];
        g.token_emb.row_mut(input.ids[pos]).iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
        g.position_emb.row_mut(pos).iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
        g.region_emb.row_mut(input.regions[pos] as usize).iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
        g.turn_emb
            .row_mut(turn_bucket(input.turn_features[pos], cfg.turn_buckets))
            .iter_mut()
            .zip(src)
            .for_each(|(a, &b)| *a = *a + b);
    }
}

/// Encoder weights paired with their configuration.
pub struct TransformerEncoder<'a, T> {
    pub params: &'a EncoderParams<T>,
    pub config: &'a TaggerConfig,
}

impl<T: Scalar> Encoder<T> for TransformerEncoder<'_, T> {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode(&self, input: &ModelInput) -> Result<EncoderState<T>, ModelError> {
        encoder_forward(self.params, self.config, input).map(|(state, _)| state)
    }
}
