//! Experiment configuration and the `key = value` text format.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::vocab::{Tokenization, EOS};

/// Every knob of a training/evaluation run, flat so it maps one-to-one onto
/// config-file keys and command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub audio_blocks: usize,
    pub bias_blocks: usize,
    pub decoder_blocks: usize,
    pub subsampling: usize,

    pub lambda_ctc: f64,
    pub lambda_batt: f64,
    pub lambda_bidx: f64,

    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    /// Most phrases sampled per utterance.
    pub n_utt: usize,
    /// Longest sampled phrase, also the cap on bias-list phrase length.
    pub l_max: usize,
    pub dedupe: bool,
    pub seed: u64,
    /// Dev diagnostics every this many steps (0 disables).
    pub dev_every: usize,

    pub k_beam: usize,
    pub k_score: usize,
    pub alpha_bonus: f64,
    pub alpha_pen: f64,
    pub max_len: usize,

    pub tokenization: Tokenization,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let d = DecodeConfig::default();
        let w = LossWeights::default();
        Self {
            dim: 32,
            heads: 2,
            ff_dim: 64,
            audio_blocks: 2,
            bias_blocks: 1,
            decoder_blocks: 2,
            subsampling: 2,
            lambda_ctc: w.ctc,
            lambda_batt: w.batt,
            lambda_bidx: w.bidx,
            steps: 10_000,
            batch_size: 16,
            learning_rate: 0.004,
            warmup_steps: 200,
            grad_clip: 5.0,
            n_utt: 2,
            l_max: 4,
            dedupe: true,
            seed: 1,
            dev_every: 0,
            k_beam: d.k_beam,
            k_score: d.k_score,
            alpha_bonus: d.alpha_bonus,
            alpha_pen: d.alpha_pen,
            max_len: d.max_len,
            tokenization: Tokenization::Word,
        }
    }
}

impl ExperimentConfig {
    pub fn model(&self, feature_dim: usize, vocab_size: usize, ctc_classes: usize) -> ModelConfig {
        ModelConfig {
            feature_dim,
            dim: self.dim,
            heads: self.heads,
            ff_dim: self.ff_dim,
            audio_blocks: self.audio_blocks,
            bias_blocks: self.bias_blocks,
            decoder_blocks: self.decoder_blocks,
            subsampling: self.subsampling,
            vocab_size,
            ctc_classes,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            ctc: self.lambda_ctc,
            batt: self.lambda_batt,
            bidx: self.lambda_bidx,
        }
    }

    pub fn decode(&self) -> DecodeConfig {
        DecodeConfig {
            k_beam: self.k_beam,
            k_score: self.k_score,
            alpha_bonus: self.alpha_bonus,
            alpha_pen: self.alpha_pen,
            max_len: self.max_len,
            end_token: EOS,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            warmup_steps: self.warmup_steps,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        self.decode().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.l_max < 2 {
            return Err(Error::Config("l_max must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("learning_rate and grad_clip must be positive".into()));
        }
        // the vocabulary size is not known yet; any positive value checks the dims
        self.model(1, 1, 1).validate()
    }
}

/// Renders a flat serialisable struct as sorted `key = value` lines.
pub fn to_kv<T: Serialize>(value: &T) -> Result<String> {
    let Value::Object(map) = serde_json::to_value(value)? else {
        return Err(Error::Config("only flat structs can be rendered".into()));
    };
    let mut out = String::new();
    for (k, v) in map {
        let text = match v {
            Value::String(s) => s,
            other => other.to_string(),
        };
        out.push_str(&format!("{k} = {text}\n"));
    }
    Ok(out)
}

/// Applies one override to a flat struct, parsing `raw` according to the
/// type the field currently holds.
pub fn set_kv<T: Serialize + DeserializeOwned>(target: &mut T, key: &str, raw: &str) -> Result<()> {
    let Value::Object(mut map) = serde_json::to_value(&*target)? else {
        return Err(Error::Config("only flat structs can be configured".into()));
    };
    let current = map
        .get(key)
        .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    let raw = raw.trim();
    let parsed = match current {
        Value::String(_) => Value::String(raw.to_string()),
        _ => serde_json::from_str::<Value>(raw)
            .map_err(|_| Error::Config(format!("cannot parse `{raw}` for `{key}`")))?,
    };
    map.insert(key.to_string(), parsed);
    *target = serde_json::from_value(Value::Object(map))
        .map_err(|e| Error::Config(format!("bad value `{raw}` for `{key}`: {e}")))?;
    Ok(())
}

/// Applies every `key = value` line of `text`; `#` starts a comment.
pub fn apply_kv<T: Serialize + DeserializeOwned>(target: &mut T, text: &str) -> Result<()> {
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        set_kv(target, k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
    }
    Ok(())
}

pub fn load_kv<T: Serialize + DeserializeOwned + Default>(path: impl AsRef<Path>) -> Result<T> {
    let mut t = T::default();
    apply_kv(&mut t, &fs::read_to_string(path)?)?;
    Ok(t)
}

pub fn save_kv<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_kv(value)?)?;
    Ok(())
}

/// Keys accepted by a flat struct, in serialisation order.
pub fn keys<T: Serialize>(value: &T) -> Vec<String> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_text() {
        let mut c = ExperimentConfig::default();
        c.alpha_bonus = 2.5;
        c.dedupe = false;
        c.tokenization = Tokenization::Char;
        let text = to_kv(&c).unwrap();
        let mut back = ExperimentConfig::default();
        apply_kv(&mut back, &text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_errors() {
        let mut c = ExperimentConfig::default();
        apply_kv(&mut c, "# comment\nsteps = 10\n\nk_beam=3  # trailing\n").unwrap();
        assert_eq!((c.steps, c.k_beam), (10, 3));
        assert!(set_kv(&mut c, "nope", "1").is_err());
        assert!(set_kv(&mut c, "steps", "ten").is_err());
        assert!(set_kv(&mut c, "tokenization", "bytes").is_err());
        let err = apply_kv(&mut c, "steps = 1\nbroken line").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
        let mut c = ExperimentConfig::default();
        c.lambda_ctc = 0.0;
        c.lambda_batt = 0.0;
        c.lambda_bidx = 0.0;
        assert!(c.validate().is_err());
    }
}
