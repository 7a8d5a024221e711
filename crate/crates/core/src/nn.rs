//! Transformer building blocks over the tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{ParamId, ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Xavier-normal weight, zero bias.
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        let std = (2.0 / (input + output) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), normal_tensor(rng, &[input, output], std))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let s = tape.param(self.shift);
        tape.layer_norm(x, g, s)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden)?,
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

/// Projected keys and values of an attention memory.
#[derive(Clone, Copy, Debug)]
pub struct KeyValue {
    pub key: Var,
    pub value: Var,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dim {dim} must be divisible by head count {heads}"
            )));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim)?,
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim)?,
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim)?,
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn project_query(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        self.query.forward(tape, x)
    }

    pub fn project_memory(&self, tape: &mut Tape<'_>, memory: Var) -> Result<KeyValue> {
        Ok(KeyValue {
            key: self.key.forward(tape, memory)?,
            value: self.value.forward(tape, memory)?,
        })
    }

    /// Attention of projected queries over a projected memory, followed by
    /// the output projection.
    pub fn attend(
        &self,
        tape: &mut Tape<'_>,
        query: Var,
        memory: &KeyValue,
        mask: Option<&Tensor>,
        top_k: Option<usize>,
    ) -> Result<Var> {
        let ctx = tape.attention(query, memory.key, memory.value, self.heads, mask, top_k)?;
        self.output.forward(tape, ctx)
    }

    /// Pre-softmax scores averaged over heads, without any mask or pruning.
    ///
    /// The per-head score is `q_h·k_h / √d_h`; summing the per-head dot
    /// products gives the full dot product, so the mean is one matmul.
    pub fn mean_head_scores(&self, tape: &mut Tape<'_>, query: Var, memory: &KeyValue) -> Result<Var> {
        let dh = (self.dim / self.heads) as f64;
        let s = tape.matmul_nt(query, memory.key)?;
        Ok(tape.scale(s, 1.0 / (self.heads as f64 * dh.sqrt())))
    }

    pub fn self_attend(&self, tape: &mut Tape<'_>, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let q = self.project_query(tape, x)?;
        let kv = self.project_memory(tape, x)?;
        self.attend(tape, q, &kv, mask, None)
    }
}

/// Pre-norm transformer block: self-attention then feed-forward, each with
/// a residual connection.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim)?,
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), dim)?,
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), dim, ff_dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let h = self.attn_norm.forward(tape, x)?;
        let h = self.attn.self_attend(tape, h, mask)?;
        let x = tape.add(x, h)?;
        let h = self.ff_norm.forward(tape, x)?;
        let h = self.ff.forward(tape, h)?;
        tape.add(x, h)
    }
}

pub fn embedding_table<R: Rng>(
    store: &mut ParameterStore,
    rng: &mut R,
    name: &str,
    vocab: usize,
    dim: usize,
) -> Result<ParamId> {
    store.add(name, normal_tensor(rng, &[vocab, dim], 1.0))
}

/// Standard sinusoidal position table, `len×dim`.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![len, dim], data)
}

/// Additive mask hiding future positions.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::from_parts(vec![len, len], data)
}

/// Additive mask that hides key positions at or beyond `valid`.
pub fn key_padding_mask(queries: usize, keys: usize, valid: usize) -> Tensor {
    let mut data = vec![0.0; queries * keys];
    for i in 0..queries {
        for j in valid..keys {
            data[i * keys + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::from_parts(vec![queries, keys], data)
}
