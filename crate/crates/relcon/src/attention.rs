//! Relation-conditioned attention pooling.
//!
//! A relation embedding queries the token features of one modality;
//! the resulting attention row, mixed with a summary-token mask for
//! intra-sample pairs, pools the value-projected tokens into a single
//! unit-norm contextual feature.

use crate::encoder::{TokenFeatures, TokenMatrix};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Behaviour at `beta == 1`: `Soft` keeps the literal softmax over the
/// 0/1 summary mask, `Hard` short-circuits to an exact one-hot on the
/// summary token, which makes pooling identical to a plain global
/// embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaOneMode {
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PairKind {
    Intra,
    Inter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

/// Learned projections plus the attention balance coefficient.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub w_out: Tensor,
    pub beta: f64,
    pub beta_one_mode: BetaOneMode,
}

impl AttentionParams {
    pub fn init<R: rand::Rng>(
        dim: usize,
        std: f64,
        beta: f64,
        beta_one_mode: BetaOneMode,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config {
                detail: format!("beta {beta} outside [0, 1]"),
            });
        }
        Ok(AttentionParams {
            w_query: Tensor::randn(vec![dim, dim], std, rng),
            w_key: Tensor::randn(vec![dim, dim], std, rng),
            w_value: Tensor::randn(vec![dim, dim], std, rng),
            w_out: Tensor::randn(vec![dim, dim], std, rng),
            beta,
            beta_one_mode,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_query.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAttention {
        BoundAttention {
            w_query: tape.leaf(&self.w_query),
            w_key: tape.leaf(&self.w_key),
            w_value: tape.leaf(&self.w_value),
            w_out: tape.leaf(&self.w_out),
            beta: self.beta,
            beta_one_mode: self.beta_one_mode,
            dim: self.dim(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAttention {
    pub w_query: Var,
    pub w_key: Var,
    pub w_value: Var,
    pub w_out: Var,
    pub beta: f64,
    pub beta_one_mode: BetaOneMode,
    pub dim: usize,
}

/// A pooled contextual feature detached from any tape.
#[derive(Debug, Clone)]
pub struct ContextualFeature {
    /// Unit-norm `d`-vector.
    pub z: Tensor,
    /// Identifier of the conditioning relation.
    pub relation_id: u32,
    pub modality: Modality,
}

/// Binary summary mask: one-hot at the summary token for intra-sample
/// pairs, all zeros for inter-sample pairs.
pub fn summary_mask(kind: PairKind, len: usize, summary_index: usize) -> Result<Vec<f64>> {
    if summary_index >= len {
        return Err(Error::IndexOutOfRange {
            what: "summary_mask",
            index: summary_index,
            limit: len,
        });
    }
    let mut mask = vec![0.0; len];
    if kind == PairKind::Intra {
        mask[summary_index] = 1.0;
    }
    Ok(mask)
}

impl BoundAttention {
    /// `W_Q h_E`, reusable across every token matrix scored under the
    /// same relation.
    pub fn project_relation(&self, tape: &mut Tape, h_e: Var) -> Result<Var> {
        tape.matmul(self.w_query, h_e)
    }

    /// `W_K H`, reusable across every relation scoring this sample.
    pub fn project_keys(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        tape.matmul(self.w_key, features)
    }

    /// `W_V H`, reusable like the keys.
    pub fn project_values(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        tape.matmul(self.w_value, features)
    }

    /// Attention logits from precomputed projections; pad positions
    /// are set to `-inf`.
    pub fn relation_query_from(
        &self,
        tape: &mut Tape,
        projected_relation: Var,
        keys: Var,
        pad_mask: &[bool],
    ) -> Result<Var> {
        let qt = tape.transpose(projected_relation);
        let raw = tape.matmul(qt, keys)?;
        let scaled = tape.scale(raw, 1.0 / (self.dim as f64).sqrt());
        if pad_mask.iter().any(|&m| m) {
            tape.mask_fill_cols(scaled, pad_mask)
        } else {
            Ok(scaled)
        }
    }

    /// `(W_Q h_E)^T (W_K H) / sqrt(d)` with pads at `-inf`.
    pub fn relation_query(
        &self,
        tape: &mut Tape,
        h_e: Var,
        tokens: &TokenFeatures,
    ) -> Result<Var> {
        let pr = self.project_relation(tape, h_e)?;
        let keys = self.project_keys(tape, tokens.features)?;
        self.relation_query_from(tape, pr, keys, &tokens.pad_mask)
    }

    /// `softmax((1 - beta) q + beta B)` over non-pad positions.
    ///
    /// At `beta == 1` in hard mode the row is an exact one-hot at the
    /// mask's active index (when the mask has one); in soft mode the
    /// literal mixture is used, which spreads weight over the row.
    pub fn relation_attention(
        &self,
        tape: &mut Tape,
        query: Var,
        mask: &[f64],
        pad_mask: &[bool],
    ) -> Result<Var> {
        let (rows, len) = tape.shape(query);
        if rows != 1 || mask.len() != len || pad_mask.len() != len {
            return Err(Error::ShapeMismatch {
                op: "relation_attention",
                lhs: vec![rows, len],
                rhs: vec![1, mask.len()],
            });
        }
        if pad_mask.iter().all(|&m| m) {
            return Err(Error::EmptyAttention);
        }
        let hot = mask.iter().position(|&b| b != 0.0);
        if self.beta == 1.0 && self.beta_one_mode == BetaOneMode::Hard {
            if let Some(i) = hot {
                let mut row = vec![0.0; len];
                row[i] = 1.0;
                return tape.constant(1, len, row);
            }
        }
        // beta == 1 zeroes the query weight; scaling a -inf pad by zero
        // leaves a NaN that the pad refill below overwrites.
        let scaled_q = tape.scale(query, 1.0 - self.beta);
        let scaled_mask: Vec<f64> = mask.iter().map(|&b| b * self.beta).collect();
        let mask_const = tape.constant(1, len, scaled_mask)?;
        let mixed = tape.add(scaled_q, mask_const)?;
        let mixed = if pad_mask.iter().any(|&m| m) {
            tape.mask_fill_cols(mixed, pad_mask)?
        } else {
            mixed
        };
        tape.softmax_rows(mixed)
    }

    /// `Norm(A (W_V H)^T W_o)` from precomputed values, as a unit-norm
    /// `1 x d` row.
    pub fn contextual_feature_from(
        &self,
        tape: &mut Tape,
        attention: Var,
        values: Var,
    ) -> Result<Var> {
        let vt = tape.transpose(values);
        let pooled = tape.matmul(attention, vt)?;
        let mapped = tape.matmul(pooled, self.w_out)?;
        tape.l2_normalize(mapped)
    }

    /// `Norm(A (W_V H)^T W_o)`.
    pub fn contextual_feature(
        &self,
        tape: &mut Tape,
        attention: Var,
        tokens: &TokenFeatures,
    ) -> Result<Var> {
        let values = self.project_values(tape, tokens.features)?;
        self.contextual_feature_from(tape, attention, values)
    }

    /// Full pooling pipeline for one (sample, modality) under one
    /// relation: query, mask mixing, softmax, pooled unit feature.
    pub fn conditioned_feature(
        &self,
        tape: &mut Tape,
        h_e: Var,
        tokens: &TokenFeatures,
        kind: PairKind,
    ) -> Result<Var> {
        let q = self.relation_query(tape, h_e, tokens)?;
        let len = tape.shape(q).1;
        let mask = summary_mask(kind, len, tokens.summary_index)?;
        let attn = self.relation_attention(tape, q, &mask, &tokens.pad_mask)?;
        self.contextual_feature(tape, attn, tokens)
    }
}

fn row_tensor(tape: &Tape, v: Var) -> Result<Tensor> {
    let (r, c) = tape.shape(v);
    Tensor::new(vec![r, c], tape.value(v).to_vec())
}

/// Value-level [`BoundAttention::relation_query`] on a throwaway tape.
pub fn relation_query(
    params: &AttentionParams,
    h_e: &Tensor,
    tokens: &TokenMatrix,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let he = tape.leaf(h_e);
    let tf = TokenFeatures {
        features: tape.leaf(&tokens.features),
        summary_index: tokens.summary_index,
        pad_mask: tokens.pad_mask.clone(),
    };
    let q = bound.relation_query(&mut tape, he, &tf)?;
    row_tensor(&tape, q)
}

/// Value-level [`BoundAttention::relation_attention`] on a throwaway tape.
pub fn relation_attention(
    params: &AttentionParams,
    query: &Tensor,
    mask: &[f64],
    pad_mask: &[bool],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let q = tape.leaf(query);
    let a = bound.relation_attention(&mut tape, q, mask, pad_mask)?;
    row_tensor(&tape, a)
}

/// Value-level [`BoundAttention::contextual_feature`] on a throwaway tape.
pub fn contextual_feature(
    params: &AttentionParams,
    attention: &Tensor,
    tokens: &TokenMatrix,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let a = tape.leaf(attention);
    let tf = TokenFeatures {
        features: tape.leaf(&tokens.features),
        summary_index: tokens.summary_index,
        pad_mask: tokens.pad_mask.clone(),
    };
    let z = bound.contextual_feature(&mut tape, a, &tf)?;
    row_tensor(&tape, z)
}
