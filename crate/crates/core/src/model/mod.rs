//! The biased encoder-decoder: audio encoder, bias encoder and bias decoder.

mod audio;
mod bias_encoder;
mod decoder;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParameterStore, Tape};
use crate::bias::BiasList;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::sinusoidal_encoding;
use crate::tensor::Tensor;

pub use audio::AudioEncoder;
pub use bias_encoder::{BiasEncoder, BiasEncoding, BiasVars};
pub use decoder::{BiasDecoder, DecoderBlock, DecoderMemory, DecoderOutput, FrozenMemory, StepOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input feature dimension `F`.
    pub feature_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub audio_blocks: usize,
    pub bias_blocks: usize,
    pub decoder_blocks: usize,
    pub subsampling: usize,
    /// Decoder output size `C`, every token including the specials.
    pub vocab_size: usize,
    /// Blank plus regular tokens.
    pub ctc_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("dim", self.dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("decoder_blocks", self.decoder_blocks),
            ("subsampling", self.subsampling),
            ("vocab_size", self.vocab_size),
            ("ctc_classes", self.ctc_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Sinusoidal table computed once and sliced per call.
#[derive(Clone, Debug)]
pub(crate) struct PositionTable {
    table: Tensor,
}

impl PositionTable {
    const ROWS: usize = 512;

    pub(crate) fn new(dim: usize) -> Self {
        Self {
            table: sinusoidal_encoding(Self::ROWS, dim),
        }
    }

    pub(crate) fn rows(&self, len: usize) -> Tensor {
        if len > Self::ROWS {
            return sinusoidal_encoding(len, self.table.cols());
        }
        let d = self.table.cols();
        Tensor::from_parts(vec![len, d], self.table.data()[..len * d].to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub audio: AudioEncoder,
    pub bias: BiasEncoder,
    pub decoder: BiasDecoder,
}

impl Model {
    /// Freshly initialised parameters, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let audio = AudioEncoder::new(&mut store, &mut rng, &config)?;
        let bias = BiasEncoder::new(&mut store, &mut rng, &config)?;
        let decoder = BiasDecoder::new(&mut store, &mut rng, &config)?;
        Ok(Self {
            config,
            store,
            audio,
            bias,
            decoder,
        })
    }

    pub fn load(config: ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let records = checkpoint::load(path)?;
        checkpoint::load_into(&mut model.store, &records)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.store)
    }

    /// `H = AudioEnc(X)` for `X: T×F`.
    pub fn encode_audio(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(&self.store);
        let h = self.audio.forward(&mut tape, x)?;
        Ok(tape.value(h).clone())
    }

    /// CTC logits `T'×(ctc_classes)` for `X`.
    pub fn ctc_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(&self.store);
        let h = self.audio.forward(&mut tape, x)?;
        let l = self.audio.ctc_logits(&mut tape, h)?;
        Ok(tape.value(l).clone())
    }

    pub fn encode_bias(&self, list: &BiasList) -> Result<BiasEncoding> {
        let mut tape = Tape::new(&self.store);
        let vars = self.bias.forward(&mut tape, list)?;
        Ok(vars.freeze(&tape, list))
    }

    /// Projects `H` and `V` into every decoder block's attention memories.
    pub fn memory(&self, h: &Tensor, enc: &BiasEncoding) -> Result<FrozenMemory> {
        let mut tape = Tape::new(&self.store);
        let hv = tape.constant(h.clone());
        let vv = tape.constant(enc.v.clone());
        let mem = self.decoder.memory(&mut tape, hv, vv)?;
        Ok(mem.freeze(&tape))
    }

    /// Token logits `S×C` and bias-index logits `S×(N+1)` for the decoder
    /// input `tokens` (starting with `<sos>`).
    pub fn forward_teacher_forced(
        &self,
        tokens: &[usize],
        h: &Tensor,
        enc: &BiasEncoding,
    ) -> Result<(Tensor, Tensor)> {
        let mem = self.memory(h, enc)?;
        let mut tape = Tape::new(&self.store);
        let m = mem.attach(&mut tape);
        let out = self.decoder.forward(&mut tape, tokens, &m, None)?;
        Ok((
            tape.value(out.token_logits).clone(),
            tape.value(out.index_logits).clone(),
        ))
    }

    /// Next-token and bias-index distributions after `prefix`, with bias
    /// attention pruned to the `k_score` best phrases.
    pub fn step(&self, prefix: &[usize], mem: &FrozenMemory, k_score: usize) -> Result<StepOutput> {
        self.decoder.step(&self.store, prefix, mem, k_score)
    }
}
