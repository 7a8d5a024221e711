use rand::Rng;

use crate::autograd::{ParamId, ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, embedding_table, FeedForward, KeyValue, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::kernels::{argmax, log_softmax, softmax_in_place};
use crate::tensor::Tensor;
use crate::vocab::SOS;

use super::{ModelConfig, PositionTable};

/// Pre-norm decoder block: causal self-attention, attention over the audio
/// states, attention over the bias phrase vectors, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub audio_norm: LayerNorm,
    pub audio_attn: MultiHeadAttention,
    pub bias_norm: LayerNorm,
    pub bias_attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, name: &str, c: &ModelConfig) -> Result<Self> {
        let mha = |store: &mut ParameterStore, rng: &mut R, part: &str| {
            MultiHeadAttention::new(store, rng, &format!("{name}.{part}"), c.dim, c.heads)
        };
        Ok(Self {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), c.dim)?,
            self_attn: mha(store, rng, "self_attn")?,
            audio_norm: LayerNorm::new(store, &format!("{name}.audio_norm"), c.dim)?,
            audio_attn: mha(store, rng, "audio_attn")?,
            bias_norm: LayerNorm::new(store, &format!("{name}.bias_norm"), c.dim)?,
            bias_attn: mha(store, rng, "bias_attn")?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), c.dim)?,
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), c.dim, c.ff_dim)?,
        })
    }
}

/// Per-block projected keys/values of `H` and of `V`.
#[derive(Clone, Debug)]
pub struct DecoderMemory {
    pub audio: Vec<KeyValue>,
    pub bias: Vec<KeyValue>,
}

/// [`DecoderMemory`] detached from its tape, reusable across decoding steps.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenMemory {
    pub audio: Vec<(Tensor, Tensor)>,
    pub bias: Vec<(Tensor, Tensor)>,
}

impl DecoderMemory {
    pub fn freeze(&self, tape: &Tape<'_>) -> FrozenMemory {
        let f = |kv: &Vec<KeyValue>| {
            kv.iter()
                .map(|m| (tape.value(m.key).clone(), tape.value(m.value).clone()))
                .collect()
        };
        FrozenMemory {
            audio: f(&self.audio),
            bias: f(&self.bias),
        }
    }
}

impl FrozenMemory {
    pub fn attach(&self, tape: &mut Tape<'_>) -> DecoderMemory {
        let mut a = |kv: &Vec<(Tensor, Tensor)>| {
            kv.iter()
                .map(|(k, v)| KeyValue {
                    key: tape.constant(k.clone()),
                    value: tape.constant(v.clone()),
                })
                .collect()
        };
        let audio = a(&self.audio);
        let bias = a(&self.bias);
        DecoderMemory { audio, bias }
    }

    /// `N + 1`.
    pub fn bias_rows(&self) -> usize {
        self.bias.first().map_or(0, |(k, _)| k.rows())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `S×C`
    pub token_logits: Var,
    /// `S×(N+1)`, head-averaged pre-softmax bias-attention scores of the
    /// final block.
    pub index_logits: Var,
}

/// Distributions for the next position of a prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Log-probabilities over all `C` tokens.
    pub log_probs: Vec<f64>,
    /// Bias-index distribution over `N+1` phrases.
    pub index_probs: Vec<f64>,
    /// `argmax` of `index_probs`, lowest index on ties.
    pub index: usize,
}

impl StepOutput {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BiasDecoder {
    pub embedding: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNorm,
    pub output: Linear,
    positions: PositionTable,
}

impl BiasDecoder {
    pub fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, c: &ModelConfig) -> Result<Self> {
        let embedding = embedding_table(store, rng, "decoder.embedding", c.vocab_size, c.dim)?;
        let blocks = (0..c.decoder_blocks)
            .map(|i| DecoderBlock::new(store, rng, &format!("decoder.block{i}"), c))
            .collect::<Result<_>>()?;
        Ok(Self {
            embedding,
            blocks,
            norm: LayerNorm::new(store, "decoder.norm", c.dim)?,
            output: Linear::new(store, rng, "decoder.output", c.dim, c.vocab_size)?,
            positions: PositionTable::new(c.dim),
        })
    }

    pub fn memory(&self, tape: &mut Tape<'_>, h: Var, v: Var) -> Result<DecoderMemory> {
        let mut audio = Vec::with_capacity(self.blocks.len());
        let mut bias = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            audio.push(b.audio_attn.project_memory(tape, h)?);
            bias.push(b.bias_attn.project_memory(tape, v)?);
        }
        Ok(DecoderMemory { audio, bias })
    }

    /// Teacher-forced pass over `tokens` (which must start with `<sos>`).
    /// `top_k` prunes the bias attention of every block.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        tokens: &[usize],
        mem: &DecoderMemory,
        top_k: Option<usize>,
    ) -> Result<DecoderOutput> {
        if tokens.first() != Some(&SOS) {
            return Err(Error::InvalidSpan("decoder input must start with <sos>".into()));
        }
        let s = tokens.len();
        let table = tape.param(self.embedding);
        let mut x = tape.embedding(table, tokens)?;
        x = tape.add_const(x, &self.positions.rows(s))?;
        let mask = (s > 1).then(|| causal_mask(s));
        let mut index_logits = None;
        let last = self.blocks.len() - 1;
        for (i, b) in self.blocks.iter().enumerate() {
            let h = b.self_norm.forward(tape, x)?;
            let h = b.self_attn.self_attend(tape, h, mask.as_ref())?;
            x = tape.add(x, h)?;

            let h = b.audio_norm.forward(tape, x)?;
            let q = b.audio_attn.project_query(tape, h)?;
            let h = b.audio_attn.attend(tape, q, &mem.audio[i], None, None)?;
            x = tape.add(x, h)?;

            let h = b.bias_norm.forward(tape, x)?;
            let q = b.bias_attn.project_query(tape, h)?;
            if i == last {
                index_logits = Some(b.bias_attn.mean_head_scores(tape, q, &mem.bias[i])?);
            }
            let h = b.bias_attn.attend(tape, q, &mem.bias[i], None, top_k)?;
            x = tape.add(x, h)?;

            let h = b.ff_norm.forward(tape, x)?;
            let h = b.ff.forward(tape, h)?;
            x = tape.add(x, h)?;
        }
        let x = self.norm.forward(tape, x)?;
        let token_logits = self.output.forward(tape, x)?;
        Ok(DecoderOutput {
            token_logits,
            index_logits: index_logits.expect("at least one decoder block"),
        })
    }

    /// Output at the last position of `prefix` with bias attention pruned to
    /// the `k_score` best phrases. The index distribution itself is unpruned.
    pub fn step(
        &self,
        store: &ParameterStore,
        prefix: &[usize],
        mem: &FrozenMemory,
        k_score: usize,
    ) -> Result<StepOutput> {
        if k_score == 0 {
            return Err(Error::Config("k_score must be at least 1".into()));
        }
        let mut tape = Tape::new(store);
        let m = mem.attach(&mut tape);
        let out = self.forward(&mut tape, prefix, &m, Some(k_score))?;
        let logits = tape.value(out.token_logits);
        let last = logits.rows() - 1;
        let mut log_probs = vec![0.0; logits.cols()];
        log_softmax(logits.row(last), &mut log_probs);
        let mut index_probs = tape.value(out.index_logits).row(last).to_vec();
        softmax_in_place(&mut index_probs);
        let index = argmax(&index_probs);
        Ok(StepOutput {
            log_probs,
            index_probs,
            index,
        })
    }
}
