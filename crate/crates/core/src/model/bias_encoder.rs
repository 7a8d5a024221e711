use rand::Rng;

use crate::autograd::{ParamId, ParameterStore, Tape, Var};
use crate::bias::BiasList;
use crate::error::Result;
use crate::nn::{embedding_table, key_padding_mask, EncoderBlock, LayerNorm};
use crate::tensor::Tensor;

use super::{ModelConfig, PositionTable};

/// Token embedding, positions and self-attention per phrase, then a mean
/// over each phrase's valid positions.
#[derive(Clone, Debug)]
pub struct BiasEncoder {
    pub embedding: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    positions: PositionTable,
}

/// Tape handles of a bias encoding: `g[n]` is phrase `n`'s `L×d` token
/// features and `v` the `(N+1)×d` phrase vectors.
#[derive(Clone, Debug)]
pub struct BiasVars {
    pub g: Vec<Var>,
    pub v: Var,
}

/// Detached bias encoding of one list.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasEncoding {
    /// `(N+1)×L×d` token-level features, padded rows included.
    pub g: Tensor,
    /// `(N+1)×d` phrase vectors; row 0 is the no-bias vector.
    pub v: Tensor,
    pub lengths: Vec<usize>,
}

impl BiasEncoding {
    pub fn rows(&self) -> usize {
        self.v.rows()
    }
}

impl BiasVars {
    pub fn freeze(&self, tape: &Tape<'_>, list: &BiasList) -> BiasEncoding {
        let width = list.width();
        let dim = tape.value(self.v).cols();
        let mut g = Vec::with_capacity(list.len() * width * dim);
        for &gv in &self.g {
            g.extend_from_slice(tape.value(gv).data());
        }
        BiasEncoding {
            g: Tensor::from_parts(vec![list.len(), width, dim], g),
            v: tape.value(self.v).clone(),
            lengths: list.lengths(),
        }
    }
}

impl BiasEncoder {
    pub fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, c: &ModelConfig) -> Result<Self> {
        let embedding = embedding_table(store, rng, "bias.embedding", c.vocab_size, c.dim)?;
        let blocks = (0..c.bias_blocks)
            .map(|i| EncoderBlock::new(store, rng, &format!("bias.block{i}"), c.dim, c.heads, c.ff_dim))
            .collect::<Result<_>>()?;
        Ok(Self {
            embedding,
            blocks,
            norm: LayerNorm::new(store, "bias.norm", c.dim)?,
            positions: PositionTable::new(c.dim),
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, list: &BiasList) -> Result<BiasVars> {
        let width = list.width();
        let padded = list.padded(width);
        let table = tape.param(self.embedding);
        let pe = self.positions.rows(width);
        let mut g = Vec::with_capacity(list.len());
        let mut pooled = Vec::with_capacity(list.len());
        for (n, len) in list.lengths().into_iter().enumerate() {
            let mut x = tape.embedding(table, &padded[n * width..(n + 1) * width])?;
            x = tape.add_const(x, &pe)?;
            let mask = (len < width).then(|| key_padding_mask(width, width, len));
            for block in &self.blocks {
                x = block.forward(tape, x, mask.as_ref())?;
            }
            x = self.norm.forward(tape, x)?;
            let weights: Vec<f64> = (0..width)
                .map(|i| if i < len { 1.0 / len as f64 } else { 0.0 })
                .collect();
            pooled.push(tape.row_weighted_sum(x, &weights)?);
            g.push(x);
        }
        let v = tape.concat_rows(&pooled)?;
        Ok(BiasVars { g, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::model::Model;

    #[test]
    fn dummy_only_has_one_row() {
        let m = Model::new(tiny_config(), 1).unwrap();
        let enc = m.encode_bias(&BiasList::dummy_only()).unwrap();
        assert_eq!(enc.v.shape(), &[1, 8]);
        assert!(enc.v.all_finite());
    }

    #[test]
    fn identical_phrases_identical_rows() {
        let m = Model::new(tiny_config(), 1).unwrap();
        let enc = m
            .encode_bias(&BiasList::new(vec![vec![7, 8], vec![9], vec![7, 8]], 4).unwrap())
            .unwrap();
        assert_eq!(enc.v.row(1), enc.v.row(3));
        assert_ne!(enc.v.row(1), enc.v.row(2));
    }

    #[test]
    fn padding_does_not_change_phrase_vector() {
        let m = Model::new(tiny_config(), 2).unwrap();
        let alone = m.encode_bias(&BiasList::new(vec![vec![9]], 4).unwrap()).unwrap();
        let padded = m
            .encode_bias(&BiasList::new(vec![vec![9], vec![7, 8, 10, 7]], 4).unwrap())
            .unwrap();
        assert_eq!(padded.g.shape(), &[3, 4, 8]);
        assert_eq!(alone.v.row(1), padded.v.row(1));
        assert_eq!(alone.v.row(0), padded.v.row(0));
    }

    #[test]
    fn reordering_permutes_rows() {
        let m = Model::new(tiny_config(), 3).unwrap();
        let a = m
            .encode_bias(&BiasList::new(vec![vec![7, 8], vec![10, 9, 8]], 4).unwrap())
            .unwrap();
        let b = m
            .encode_bias(&BiasList::new(vec![vec![10, 9, 8], vec![7, 8]], 4).unwrap())
            .unwrap();
        assert_eq!(a.v.row(1), b.v.row(2));
        assert_eq!(a.v.row(2), b.v.row(1));
    }
}
