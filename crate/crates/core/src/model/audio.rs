use rand::Rng;

use crate::autograd::{ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{EncoderBlock, LayerNorm, Linear};
use crate::tensor::Tensor;

use super::{ModelConfig, PositionTable};

/// Stacks `subsampling` consecutive frames, projects them to the model
/// dimension, adds positions and runs self-attention blocks.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub input: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub ctc: Linear,
    subsampling: usize,
    feature_dim: usize,
    positions: PositionTable,
}

impl AudioEncoder {
    pub fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, c: &ModelConfig) -> Result<Self> {
        let input = Linear::new(store, rng, "audio.input", c.subsampling * c.feature_dim, c.dim)?;
        let blocks = (0..c.audio_blocks)
            .map(|i| EncoderBlock::new(store, rng, &format!("audio.block{i}"), c.dim, c.heads, c.ff_dim))
            .collect::<Result<_>>()?;
        Ok(Self {
            input,
            blocks,
            norm: LayerNorm::new(store, "audio.norm", c.dim)?,
            ctc: Linear::new(store, rng, "audio.ctc", c.dim, c.ctc_classes)?,
            subsampling: c.subsampling,
            feature_dim: c.feature_dim,
            positions: PositionTable::new(c.dim),
        })
    }

    /// Number of encoder frames for `frames` input frames.
    pub fn output_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.subsampling)
    }

    /// `H: T'×d` for `x: T×F`, with `T' = ceil(T / subsampling)`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: &Tensor) -> Result<Var> {
        if x.shape().len() != 2 || x.rows() == 0 {
            return Err(Error::InvalidTensor(format!(
                "audio input must be a non-empty T×F matrix, got {:?}",
                x.shape()
            )));
        }
        if x.cols() != self.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "audio encoder input",
                lhs: x.shape().to_vec(),
                rhs: vec![self.feature_dim],
            });
        }
        let t_out = self.output_len(x.rows());
        let mut data = x.data().to_vec();
        data.resize(t_out * self.subsampling * self.feature_dim, 0.0);
        let stacked = Tensor::new(vec![t_out, self.subsampling * self.feature_dim], data)?;
        let xs = tape.constant(stacked);
        let mut h = self.input.forward(tape, xs)?;
        h = tape.add_const(h, &self.positions.rows(t_out))?;
        for block in &self.blocks {
            h = block.forward(tape, h, None)?;
        }
        self.norm.forward(tape, h)
    }

    pub fn ctc_logits(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        self.ctc.forward(tape, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, GradCheckOptions};
    use crate::model::tests::tiny_config;
    use crate::model::Model;

    fn ramp(frames: usize, dim: usize) -> Tensor {
        let data = (0..frames * dim).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect();
        Tensor::new(vec![frames, dim], data).unwrap()
    }

    #[test]
    fn subsampled_length() {
        let m = Model::new(tiny_config(), 0).unwrap();
        assert_eq!(m.encode_audio(&ramp(8, 3)).unwrap().shape(), &[4, 8]);
        assert_eq!(m.encode_audio(&ramp(7, 3)).unwrap().shape(), &[4, 8]);
        assert_eq!(m.encode_audio(&ramp(1, 3)).unwrap().shape(), &[1, 8]);
        assert!(m.encode_audio(&Tensor::zeros(&[0, 3])).is_err());
        assert!(m.encode_audio(&ramp(4, 2)).is_err());
    }

    #[test]
    fn deterministic() {
        let m = Model::new(tiny_config(), 0).unwrap();
        assert_eq!(m.encode_audio(&ramp(6, 3)).unwrap(), m.encode_audio(&ramp(6, 3)).unwrap());
    }

    #[test]
    fn encoder_parameters_pass_gradient_check() {
        let m = Model::new(tiny_config(), 9).unwrap();
        let x = ramp(6, 3);
        let params: Vec<_> = m.store.ids().filter(|&id| m.store.name(id).starts_with("audio.")).collect();
        let readout = Tensor::new(vec![3, 8], (0..24).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let opts = GradCheckOptions {
            max_coords: Some(8),
            ..Default::default()
        };
        let report = gradcheck::check(&m.store, &params, &opts, |tape| {
            let h = m.audio.forward(tape, &x)?;
            tape.dot_const(h, &readout)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
    }
}
