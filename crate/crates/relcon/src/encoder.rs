//! Token-level text and image encoders.
//!
//! Both towers produce a `d x L` feature matrix per sample: one column
//! per token (text) or per patch plus a learned summary slot at
//! position 0 (image). Each tower is a stack of identical mixer blocks
//! (single-head self-attention plus a two-layer feed-forward), sized
//! for from-scratch training at small dimensions. Relation
//! descriptions run through the same text tower as item text.

use crate::tensor::{Tape, Tensor, Var};
use crate::tokens::{count_eot, EOT, PAD};
use crate::{Error, Result};

/// One self-attention block: query/key/value/output maps plus a
/// feed-forward expanding to 4d.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerParams {
    pub attn_query: Tensor,
    pub attn_key: Tensor,
    pub attn_value: Tensor,
    pub attn_out: Tensor,
    pub ff_in: Tensor,
    pub ff_in_bias: Tensor,
    pub ff_out: Tensor,
    pub ff_out_bias: Tensor,
}

impl MixerParams {
    pub fn init<R: rand::Rng>(dim: usize, std: f64, rng: &mut R) -> Self {
        MixerParams {
            attn_query: Tensor::randn(vec![dim, dim], std, rng),
            attn_key: Tensor::randn(vec![dim, dim], std, rng),
            attn_value: Tensor::randn(vec![dim, dim], std, rng),
            attn_out: Tensor::randn(vec![dim, dim], std, rng),
            ff_in: Tensor::randn(vec![4 * dim, dim], std, rng),
            ff_in_bias: Tensor::randn(vec![4 * dim, 1], std, rng),
            ff_out: Tensor::randn(vec![dim, 4 * dim], std, rng),
            ff_out_bias: Tensor::randn(vec![dim, 1], std, rng),
        }
    }

    fn bind(&self, tape: &mut Tape) -> BoundMixer {
        BoundMixer {
            attn_query: tape.leaf(&self.attn_query),
            attn_key: tape.leaf(&self.attn_key),
            attn_value: tape.leaf(&self.attn_value),
            attn_out: tape.leaf(&self.attn_out),
            ff_in: tape.leaf(&self.ff_in),
            ff_in_bias: tape.leaf(&self.ff_in_bias),
            ff_out: tape.leaf(&self.ff_out),
            ff_out_bias: tape.leaf(&self.ff_out_bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMixer {
    pub attn_query: Var,
    pub attn_key: Var,
    pub attn_value: Var,
    pub attn_out: Var,
    pub ff_in: Var,
    pub ff_in_bias: Var,
    pub ff_out: Var,
    pub ff_out_bias: Var,
}

impl BoundMixer {
    /// Mix a `d x L` column matrix. Pad columns neither receive
    /// attention nor contribute as keys.
    fn forward(&self, tape: &mut Tape, x: Var, pad_mask: &[bool], dim: usize) -> Result<Var> {
        let q = tape.matmul(self.attn_query, x)?;
        let k = tape.matmul(self.attn_key, x)?;
        let v = tape.matmul(self.attn_value, x)?;
        let qt = tape.transpose(q);
        let logits = tape.matmul(qt, k)?;
        let scaled = tape.scale(logits, 1.0 / (dim as f64).sqrt());
        let masked = if pad_mask.iter().any(|&m| m) {
            tape.mask_fill_cols(scaled, pad_mask)?
        } else {
            scaled
        };
        let weights = tape.softmax_rows(masked)?;
        let wt = tape.transpose(weights);
        let ctx = tape.matmul(v, wt)?;
        let attn = tape.matmul(self.attn_out, ctx)?;
        let x1 = tape.add(x, attn)?;
        let h = tape.matmul(self.ff_in, x1)?;
        let h = tape.add_col_bias(h, self.ff_in_bias)?;
        let h = tape.tanh(h);
        let f = tape.matmul(self.ff_out, h)?;
        let f = tape.add_col_bias(f, self.ff_out_bias)?;
        tape.add(x1, f)
    }
}

/// Text tower: token and positional tables plus mixer blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams {
    pub token_embedding: Tensor,
    pub positional_embedding: Tensor,
    pub blocks: Vec<MixerParams>,
}

impl TextEncoderParams {
    pub fn init<R: rand::Rng>(
        vocab_size: usize,
        max_len: usize,
        dim: usize,
        depth: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        TextEncoderParams {
            token_embedding: Tensor::randn(vec![vocab_size, dim], std, rng),
            positional_embedding: Tensor::randn(vec![max_len, dim], std, rng),
            blocks: (0..depth).map(|_| MixerParams::init(dim, std, rng)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.token_embedding.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.rows()
    }

    pub fn max_len(&self) -> usize {
        self.positional_embedding.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundTextEncoder {
        BoundTextEncoder {
            token_embedding: tape.leaf(&self.token_embedding),
            positional_embedding: tape.leaf(&self.positional_embedding),
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            dim: self.dim(),
            vocab_size: self.vocab_size(),
            max_len: self.max_len(),
        }
    }
}

/// Image tower: per-patch linear projection, a learned summary slot
/// prepended at position 0, mixer blocks, and a columnwise projector.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderParams {
    pub patch_projection: Tensor,
    pub summary_embedding: Tensor,
    pub blocks: Vec<MixerParams>,
    pub proj_in: Tensor,
    pub proj_in_bias: Tensor,
    pub proj_out: Tensor,
    pub proj_out_bias: Tensor,
    pub max_len: usize,
}

impl ImageEncoderParams {
    pub fn init<R: rand::Rng>(
        patch_width: usize,
        max_len: usize,
        dim: usize,
        depth: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        ImageEncoderParams {
            patch_projection: Tensor::randn(vec![patch_width, dim], std, rng),
            summary_embedding: Tensor::randn(vec![dim, 1], std, rng),
            blocks: (0..depth).map(|_| MixerParams::init(dim, std, rng)).collect(),
            proj_in: Tensor::randn(vec![dim, dim], std, rng),
            proj_in_bias: Tensor::randn(vec![dim, 1], std, rng),
            proj_out: Tensor::randn(vec![dim, dim], std, rng),
            proj_out_bias: Tensor::randn(vec![dim, 1], std, rng),
            max_len,
        }
    }

    pub fn dim(&self) -> usize {
        self.patch_projection.cols()
    }

    pub fn patch_width(&self) -> usize {
        self.patch_projection.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundImageEncoder {
        BoundImageEncoder {
            patch_projection: tape.leaf(&self.patch_projection),
            summary_embedding: tape.leaf(&self.summary_embedding),
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            proj_in: tape.leaf(&self.proj_in),
            proj_in_bias: tape.leaf(&self.proj_in_bias),
            proj_out: tape.leaf(&self.proj_out),
            proj_out_bias: tape.leaf(&self.proj_out_bias),
            dim: self.dim(),
            patch_width: self.patch_width(),
            max_len: self.max_len,
        }
    }
}

/// Token-level features of one sample on a tape.
#[derive(Debug, Clone)]
pub struct TokenFeatures {
    /// `d x L` feature matrix.
    pub features: Var,
    /// Column of the EOT (text) or summary slot (image).
    pub summary_index: usize,
    pub pad_mask: Vec<bool>,
}

/// Concrete token-level features, detached from any tape.
#[derive(Debug, Clone)]
pub struct TokenMatrix {
    pub features: Tensor,
    pub summary_index: usize,
    pub pad_mask: Vec<bool>,
}

pub struct BoundTextEncoder {
    pub token_embedding: Var,
    pub positional_embedding: Var,
    pub blocks: Vec<BoundMixer>,
    dim: usize,
    vocab_size: usize,
    max_len: usize,
}

impl BoundTextEncoder {
    pub fn encode(&self, tape: &mut Tape, tokens: &[u32]) -> Result<TokenFeatures> {
        if tokens.is_empty() || tokens.len() > self.max_len {
            return Err(Error::Contract {
                detail: format!(
                    "text length {} outside [1, {}]",
                    tokens.len(),
                    self.max_len
                ),
            });
        }
        let eot_count = count_eot(tokens);
        if eot_count != 1 {
            return Err(Error::MissingEot { count: eot_count });
        }
        for &t in tokens {
            if t as usize >= self.vocab_size {
                return Err(Error::Vocabulary {
                    token: t,
                    vocab_size: self.vocab_size,
                });
            }
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = tape.gather_rows(self.token_embedding, &ids)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather_rows(self.positional_embedding, &positions)?;
        let summed = tape.add(tok, pos)?;
        let mut x = tape.transpose(summed);
        let pad_mask: Vec<bool> = tokens.iter().map(|&t| t == PAD).collect();
        for block in &self.blocks {
            x = block.forward(tape, x, &pad_mask, self.dim)?;
        }
        let summary_index = tokens.iter().position(|&t| t == EOT).unwrap();
        Ok(TokenFeatures {
            features: x,
            summary_index,
            pad_mask,
        })
    }

    /// Global embedding of a relation description: the EOT column of
    /// the encoded text, as a `d x 1` node.
    pub fn encode_relation(&self, tape: &mut Tape, tokens: &[u32]) -> Result<Var> {
        let enc = self.encode(tape, tokens)?;
        tape.slice_col(enc.features, enc.summary_index)
    }
}

pub struct BoundImageEncoder {
    pub patch_projection: Var,
    pub summary_embedding: Var,
    pub blocks: Vec<BoundMixer>,
    pub proj_in: Var,
    pub proj_in_bias: Var,
    pub proj_out: Var,
    pub proj_out_bias: Var,
    dim: usize,
    patch_width: usize,
    max_len: usize,
}

impl BoundImageEncoder {
    pub fn encode(&self, tape: &mut Tape, patches: &[Vec<f64>]) -> Result<TokenFeatures> {
        if patches.is_empty() || patches.len() > self.max_len - 1 {
            return Err(Error::Contract {
                detail: format!(
                    "patch count {} outside [1, {}]",
                    patches.len(),
                    self.max_len - 1
                ),
            });
        }
        for p in patches {
            if p.len() != self.patch_width {
                return Err(Error::ShapeMismatch {
                    op: "encode_image",
                    lhs: vec![self.patch_width],
                    rhs: vec![p.len()],
                });
            }
        }
        let m = patches.len();
        let mut raw = vec![0.0; self.patch_width * m];
        for (j, p) in patches.iter().enumerate() {
            for (i, &v) in p.iter().enumerate() {
                raw[i * m + j] = v;
            }
        }
        let raw = tape.constant(self.patch_width, m, raw)?;
        let proj_t = tape.transpose(self.patch_projection);
        let projected = tape.matmul(proj_t, raw)?;
        let mut x = tape.concat_cols(&[self.summary_embedding, projected])?;
        let pad_mask = vec![false; m + 1];
        for block in &self.blocks {
            x = block.forward(tape, x, &pad_mask, self.dim)?;
        }
        let h = tape.matmul(self.proj_in, x)?;
        let h = tape.add_col_bias(h, self.proj_in_bias)?;
        let h = tape.tanh(h);
        let out = tape.matmul(self.proj_out, h)?;
        let out = tape.add_col_bias(out, self.proj_out_bias)?;
        Ok(TokenFeatures {
            features: out,
            summary_index: 0,
            pad_mask,
        })
    }
}

fn detach(tape: &Tape, f: TokenFeatures) -> Result<TokenMatrix> {
    let (r, c) = tape.shape(f.features);
    Ok(TokenMatrix {
        features: Tensor::new(vec![r, c], tape.value(f.features).to_vec())?,
        summary_index: f.summary_index,
        pad_mask: f.pad_mask,
    })
}

/// Encode text to concrete values on a throwaway tape.
pub fn encode_text(params: &TextEncoderParams, tokens: &[u32]) -> Result<TokenMatrix> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let f = bound.encode(&mut tape, tokens)?;
    detach(&tape, f)
}

/// Encode patches to concrete values on a throwaway tape.
pub fn encode_image(params: &ImageEncoderParams, patches: &[Vec<f64>]) -> Result<TokenMatrix> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let f = bound.encode(&mut tape, patches)?;
    detach(&tape, f)
}

/// Relation embedding to concrete values on a throwaway tape.
pub fn encode_relation(params: &TextEncoderParams, tokens: &[u32]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let v = bound.encode_relation(&mut tape, tokens)?;
    Tensor::new(vec![params.dim(), 1], tape.value(v).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn text_params(seed: u64) -> TextEncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TextEncoderParams::init(50, 8, 6, 1, 0.02, &mut rng)
    }

    fn image_params(seed: u64) -> ImageEncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageEncoderParams::init(4, 5, 6, 1, 0.02, &mut rng)
    }

    #[test]
    fn encode_text_is_deterministic() {
        let p = text_params(1);
        let tokens = [3, 7, 9, EOT];
        let a = encode_text(&p, &tokens).unwrap();
        let b = encode_text(&p, &tokens).unwrap();
        assert_eq!(a.features.data, b.features.data);
        assert_eq!(a.summary_index, 3);
    }

    #[test]
    fn permuting_tokens_changes_output() {
        let p = text_params(2);
        let a = encode_text(&p, &[3, 7, EOT]).unwrap();
        let b = encode_text(&p, &[7, 3, EOT]).unwrap();
        assert_ne!(a.features.data, b.features.data);
    }

    #[test]
    fn single_eot_token_is_degenerate_but_valid() {
        let p = text_params(3);
        let m = encode_text(&p, &[EOT]).unwrap();
        assert_eq!(m.features.cols(), 1);
        assert_eq!(m.summary_index, 0);
    }

    #[test]
    fn unknown_token_is_vocabulary_error() {
        let p = text_params(4);
        assert!(matches!(
            encode_text(&p, &[3, 999, EOT]),
            Err(Error::Vocabulary { token: 999, .. })
        ));
    }

    #[test]
    fn missing_or_double_eot_is_format_error() {
        let p = text_params(5);
        assert!(matches!(
            encode_text(&p, &[3, 4]),
            Err(Error::MissingEot { count: 0 })
        ));
        assert!(matches!(
            encode_text(&p, &[EOT, EOT]),
            Err(Error::MissingEot { count: 2 })
        ));
    }

    #[test]
    fn text_output_is_finite_for_all_vocab_tokens() {
        let p = text_params(6);
        for t in 0..50u32 {
            let tokens = if t == EOT { vec![EOT] } else { vec![t, EOT] };
            let m = encode_text(&p, &tokens).unwrap();
            assert!(m.features.all_finite());
        }
    }

    #[test]
    fn zero_patches_rejected_one_patch_gives_two_columns() {
        let p = image_params(7);
        assert!(encode_image(&p, &[]).is_err());
        let m = encode_image(&p, &[vec![0.5, -0.25, 1.0, 0.0]]).unwrap();
        assert_eq!(m.features.cols(), 2);
        assert_eq!(m.summary_index, 0);
    }

    #[test]
    fn all_zero_patches_are_finite() {
        let p = image_params(8);
        let m = encode_image(&p, &[vec![0.0; 4], vec![0.0; 4]]).unwrap();
        assert!(m.features.all_finite());
    }

    #[test]
    fn doubling_a_patch_changes_values_not_shape() {
        let p = image_params(9);
        let a = encode_image(&p, &[vec![0.5, 0.1, -0.2, 0.3], vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let b = encode_image(&p, &[vec![1.0, 0.2, -0.4, 0.6], vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(a.features.shape, b.features.shape);
        assert_eq!(a.summary_index, b.summary_index);
        assert_ne!(a.features.data, b.features.data);
    }

    #[test]
    fn wrong_patch_width_is_shape_error() {
        let p = image_params(10);
        assert!(matches!(
            encode_image(&p, &[vec![1.0, 2.0]]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn too_many_patches_rejected() {
        let p = image_params(11);
        let patches = vec![vec![0.0; 4]; 5]; // max_len 5 allows 4 patches
        assert!(encode_image(&p, &patches).is_err());
    }

    #[test]
    fn relation_embedding_is_the_eot_column() {
        let p = text_params(12);
        let tokens = [4, 9, 2, EOT, 6];
        let full = encode_text(&p, &tokens).unwrap();
        let rel = encode_relation(&p, &tokens).unwrap();
        let c = full.features.cols();
        let col: Vec<f64> = (0..full.features.rows())
            .map(|i| full.features.data[i * c + full.summary_index])
            .collect();
        assert_eq!(rel.data, col);
    }

    #[test]
    fn distinct_relation_texts_get_distinct_embeddings() {
        let p = text_params(13);
        let texts: Vec<Vec<u32>> = (0..10u32).map(|i| vec![2 + i, 20 + i, EOT]).collect();
        let embs: Vec<Vec<f64>> = texts
            .iter()
            .map(|t| encode_relation(&p, t).unwrap().data)
            .collect();
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                let d2: f64 = embs[i]
                    .iter()
                    .zip(&embs[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(d2 > 0.0, "embeddings {i} and {j} collide");
            }
        }
    }

    #[test]
    fn pad_tokens_are_marked_in_mask() {
        let p = text_params(14);
        let m = encode_text(&p, &[3, PAD, 9, EOT]).unwrap();
        assert_eq!(m.pad_mask, vec![false, true, false, false]);
    }
}
