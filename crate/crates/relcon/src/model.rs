//! The full model: both encoder towers plus the relation-conditioned
//! attention head, with a flat named-parameter view for the optimizer,
//! gradient checking and checkpointing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    summary_mask, AttentionParams, BetaOneMode, BoundAttention, Modality, PairKind,
};
use crate::encoder::{
    BoundImageEncoder, BoundTextEncoder, ImageEncoderParams, TextEncoderParams, TokenFeatures,
};
use crate::loss::{BatchFeatures, PairFeatures};
use crate::pairing::{PairBatch, Sample};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub max_image_len: usize,
    pub patch_width: usize,
    pub depth: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            vocab_size: 1000,
            max_text_len: 16,
            max_image_len: 17,
            patch_width: 16,
            depth: 1,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub text: TextEncoderParams,
    pub image: ImageEncoderParams,
    pub attention: AttentionParams,
}

impl Model {
    pub fn init(cfg: ModelConfig, beta: f64, beta_one_mode: BetaOneMode, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = TextEncoderParams::init(
            cfg.vocab_size,
            cfg.max_text_len,
            cfg.dim,
            cfg.depth,
            cfg.init_std,
            &mut rng,
        );
        let image = ImageEncoderParams::init(
            cfg.patch_width,
            cfg.max_image_len,
            cfg.dim,
            cfg.depth,
            cfg.init_std,
            &mut rng,
        );
        let attention = AttentionParams::init(cfg.dim, cfg.init_std, beta, beta_one_mode, &mut rng)?;
        Ok(Model {
            cfg,
            text,
            image,
            attention,
        })
    }

    /// All learnable tensors in a fixed canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("text.token_embedding".into(), &self.text.token_embedding),
            (
                "text.positional_embedding".into(),
                &self.text.positional_embedding,
            ),
        ];
        for (k, b) in self.text.blocks.iter().enumerate() {
            out.push((format!("text.block{k}.attn_query"), &b.attn_query));
            out.push((format!("text.block{k}.attn_key"), &b.attn_key));
            out.push((format!("text.block{k}.attn_value"), &b.attn_value));
            out.push((format!("text.block{k}.attn_out"), &b.attn_out));
            out.push((format!("text.block{k}.ff_in"), &b.ff_in));
            out.push((format!("text.block{k}.ff_in_bias"), &b.ff_in_bias));
            out.push((format!("text.block{k}.ff_out"), &b.ff_out));
            out.push((format!("text.block{k}.ff_out_bias"), &b.ff_out_bias));
        }
        out.push(("image.patch_projection".into(), &self.image.patch_projection));
        out.push(("image.summary_embedding".into(), &self.image.summary_embedding));
        for (k, b) in self.image.blocks.iter().enumerate() {
            out.push((format!("image.block{k}.attn_query"), &b.attn_query));
            out.push((format!("image.block{k}.attn_key"), &b.attn_key));
            out.push((format!("image.block{k}.attn_value"), &b.attn_value));
            out.push((format!("image.block{k}.attn_out"), &b.attn_out));
            out.push((format!("image.block{k}.ff_in"), &b.ff_in));
            out.push((format!("image.block{k}.ff_in_bias"), &b.ff_in_bias));
            out.push((format!("image.block{k}.ff_out"), &b.ff_out));
            out.push((format!("image.block{k}.ff_out_bias"), &b.ff_out_bias));
        }
        out.push(("image.proj_in".into(), &self.image.proj_in));
        out.push(("image.proj_in_bias".into(), &self.image.proj_in_bias));
        out.push(("image.proj_out".into(), &self.image.proj_out));
        out.push(("image.proj_out_bias".into(), &self.image.proj_out_bias));
        out.push(("attention.w_query".into(), &self.attention.w_query));
        out.push(("attention.w_key".into(), &self.attention.w_key));
        out.push(("attention.w_value".into(), &self.attention.w_value));
        out.push(("attention.w_out".into(), &self.attention.w_out));
        out
    }

    /// Mutable view in the same order as [`Model::named_tensors`].
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            (
                "text.token_embedding".into(),
                &mut self.text.token_embedding,
            ),
            (
                "text.positional_embedding".into(),
                &mut self.text.positional_embedding,
            ),
        ];
        for (k, b) in self.text.blocks.iter_mut().enumerate() {
            out.push((format!("text.block{k}.attn_query"), &mut b.attn_query));
            out.push((format!("text.block{k}.attn_key"), &mut b.attn_key));
            out.push((format!("text.block{k}.attn_value"), &mut b.attn_value));
            out.push((format!("text.block{k}.attn_out"), &mut b.attn_out));
            out.push((format!("text.block{k}.ff_in"), &mut b.ff_in));
            out.push((format!("text.block{k}.ff_in_bias"), &mut b.ff_in_bias));
            out.push((format!("text.block{k}.ff_out"), &mut b.ff_out));
            out.push((format!("text.block{k}.ff_out_bias"), &mut b.ff_out_bias));
        }
        out.push((
            "image.patch_projection".into(),
            &mut self.image.patch_projection,
        ));
        out.push((
            "image.summary_embedding".into(),
            &mut self.image.summary_embedding,
        ));
        for (k, b) in self.image.blocks.iter_mut().enumerate() {
            out.push((format!("image.block{k}.attn_query"), &mut b.attn_query));
            out.push((format!("image.block{k}.attn_key"), &mut b.attn_key));
            out.push((format!("image.block{k}.attn_value"), &mut b.attn_value));
            out.push((format!("image.block{k}.attn_out"), &mut b.attn_out));
            out.push((format!("image.block{k}.ff_in"), &mut b.ff_in));
            out.push((format!("image.block{k}.ff_in_bias"), &mut b.ff_in_bias));
            out.push((format!("image.block{k}.ff_out"), &mut b.ff_out));
            out.push((format!("image.block{k}.ff_out_bias"), &mut b.ff_out_bias));
        }
        out.push(("image.proj_in".into(), &mut self.image.proj_in));
        out.push(("image.proj_in_bias".into(), &mut self.image.proj_in_bias));
        out.push(("image.proj_out".into(), &mut self.image.proj_out));
        out.push(("image.proj_out_bias".into(), &mut self.image.proj_out_bias));
        out.push(("attention.w_query".into(), &mut self.attention.w_query));
        out.push(("attention.w_key".into(), &mut self.attention.w_key));
        out.push(("attention.w_value".into(), &mut self.attention.w_value));
        out.push(("attention.w_out".into(), &mut self.attention.w_out));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }

    /// Concatenated parameter values in canonical order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                op: "set_flat_params",
                lhs: vec![self.num_params()],
                rhs: vec![flat.len()],
            });
        }
        let mut at = 0;
        for (_, t) in self.named_tensors_mut() {
            let len = t.data.len();
            t.data.copy_from_slice(&flat[at..at + len]);
            at += len;
        }
        Ok(())
    }

    /// Concatenated gradients in canonical order; missing buffers read
    /// as zero.
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.named_tensors() {
            match &t.grad {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat(0.0).take(t.len())),
            }
        }
        out
    }

    /// Name of the parameter owning a flat index, for diagnostics.
    pub fn param_name_at(&self, flat_index: usize) -> String {
        let mut at = 0;
        for (name, t) in self.named_tensors() {
            if flat_index < at + t.len() {
                return format!("{name}[{}]", flat_index - at);
            }
            at += t.len();
        }
        format!("<out of range {flat_index}>")
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            text: self.text.bind(tape),
            image: self.image.bind(tape),
            attention: self.attention.bind(tape),
        }
    }

    /// Copy tape-leaf gradients back into parameter gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundModel) {
        let vars = bound.leaves();
        for ((_, t), var) in self.named_tensors_mut().into_iter().zip(vars) {
            if let Some(g) = tape.grad(var) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            model: self.cfg,
            beta: self.attention.beta,
            beta_one_mode: self.attention.beta_one_mode,
        };
        let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint {
            detail: format!("meta encode: {e}"),
        })?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        write_u64(&mut w, VERSION)?;
        write_u64(&mut w, meta_json.len() as u64)?;
        w.write_all(&meta_json)?;
        let tensors = self.named_tensors();
        write_u64(&mut w, tensors.len() as u64)?;
        for (name, t) in tensors {
            write_u64(&mut w, name.len() as u64)?;
            w.write_all(name.as_bytes())?;
            write_u64(&mut w, t.shape.len() as u64)?;
            for &d in &t.shape {
                write_u64(&mut w, d as u64)?;
            }
            write_u64(&mut w, t.data.len() as u64)?;
            for &v in &t.data {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint {
                detail: format!("bad magic {magic:?} in {}", path.display()),
            });
        }
        let version = read_u64(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint {
                detail: format!("unsupported version {version}"),
            });
        }
        let meta_len = read_u64(&mut r)? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_buf).map_err(|e| {
            Error::Checkpoint {
                detail: format!("meta decode: {e}"),
            }
        })?;
        let mut model = Model::init(meta.model, meta.beta, meta.beta_one_mode, 0)?;
        let count = read_u64(&mut r)? as usize;
        let mut loaded: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u64(&mut r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf).map_err(|e| Error::Checkpoint {
                detail: format!("tensor name: {e}"),
            })?;
            let ndim = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let len = read_u64(&mut r)? as usize;
            let mut data = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                data.push(f64::from_bits(u64::from_le_bytes(buf)));
            }
            loaded.insert(name, Tensor::param(shape, data)?);
        }
        for (name, t) in model.named_tensors_mut() {
            let src = loaded.remove(&name).ok_or_else(|| Error::Checkpoint {
                detail: format!("missing tensor {name}"),
            })?;
            if src.shape != t.shape {
                return Err(Error::Checkpoint {
                    detail: format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        src.shape, t.shape
                    ),
                });
            }
            *t = src;
        }
        if let Some((name, _)) = loaded.into_iter().next() {
            return Err(Error::Checkpoint {
                detail: format!("unexpected tensor {name}"),
            });
        }
        Ok(model)
    }
}

const MAGIC: &[u8; 8] = b"RELCONV\0";
const VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    beta: f64,
    beta_one_mode: BetaOneMode,
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub struct BoundModel {
    pub text: BoundTextEncoder,
    pub image: BoundImageEncoder,
    pub attention: BoundAttention,
}

impl BoundModel {
    /// Leaf vars in the canonical [`Model::named_tensors`] order.
    fn leaves(&self) -> Vec<Var> {
        let mut out = vec![self.text.token_embedding, self.text.positional_embedding];
        for b in &self.text.blocks {
            out.extend([
                b.attn_query,
                b.attn_key,
                b.attn_value,
                b.attn_out,
                b.ff_in,
                b.ff_in_bias,
                b.ff_out,
                b.ff_out_bias,
            ]);
        }
        out.extend([self.image.patch_projection, self.image.summary_embedding]);
        for b in &self.image.blocks {
            out.extend([
                b.attn_query,
                b.attn_key,
                b.attn_value,
                b.attn_out,
                b.ff_in,
                b.ff_in_bias,
                b.ff_out,
                b.ff_out_bias,
            ]);
        }
        out.extend([
            self.image.proj_in,
            self.image.proj_in_bias,
            self.image.proj_out,
            self.image.proj_out_bias,
        ]);
        out.extend([
            self.attention.w_query,
            self.attention.w_key,
            self.attention.w_value,
            self.attention.w_out,
        ]);
        out
    }
}

struct EncodedSample {
    tokens: TokenFeatures,
    keys: Var,
    values: Var,
}

struct EncodedRelation {
    embedding: Var,
    projected: Var,
}

/// One tape plus memoization of everything reusable inside it:
/// per-sample encodings and key/value projections, per-relation
/// embeddings, and pooled features keyed by (sample, modality,
/// relation, pair kind).
pub struct FeatureExtractor<'m> {
    model: &'m Model,
    pub tape: Tape,
    bound: BoundModel,
    text_cache: BTreeMap<u32, EncodedSample>,
    image_cache: BTreeMap<u32, EncodedSample>,
    relation_ids: BTreeMap<Vec<u32>, usize>,
    relations: Vec<EncodedRelation>,
    pooled: BTreeMap<(u32, Modality, usize, PairKind), Var>,
}

impl<'m> FeatureExtractor<'m> {
    pub fn new(model: &'m Model) -> Self {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        FeatureExtractor {
            model,
            tape,
            bound,
            text_cache: BTreeMap::new(),
            image_cache: BTreeMap::new(),
            relation_ids: BTreeMap::new(),
            relations: Vec::new(),
            pooled: BTreeMap::new(),
        }
    }

    pub fn bound(&self) -> &BoundModel {
        &self.bound
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    fn encoded(&mut self, sample: &Sample, modality: Modality) -> Result<()> {
        let cache = match modality {
            Modality::Text => &self.text_cache,
            Modality::Image => &self.image_cache,
        };
        if cache.contains_key(&sample.id) {
            return Ok(());
        }
        let tokens = match modality {
            Modality::Text => self.bound.text.encode(&mut self.tape, &sample.text_tokens)?,
            Modality::Image => self.bound.image.encode(&mut self.tape, &sample.image_patches)?,
        };
        let keys = self
            .bound
            .attention
            .project_keys(&mut self.tape, tokens.features)?;
        let values = self
            .bound
            .attention
            .project_values(&mut self.tape, tokens.features)?;
        let entry = EncodedSample {
            tokens,
            keys,
            values,
        };
        match modality {
            Modality::Text => self.text_cache.insert(sample.id, entry),
            Modality::Image => self.image_cache.insert(sample.id, entry),
        };
        Ok(())
    }

    fn relation(&mut self, tokens: &[u32]) -> Result<usize> {
        if let Some(&id) = self.relation_ids.get(tokens) {
            return Ok(id);
        }
        let embedding = self.bound.text.encode_relation(&mut self.tape, tokens)?;
        let projected = self
            .bound
            .attention
            .project_relation(&mut self.tape, embedding)?;
        let id = self.relations.len();
        self.relations.push(EncodedRelation {
            embedding,
            projected,
        });
        self.relation_ids.insert(tokens.to_vec(), id);
        Ok(id)
    }

    /// Relation embedding `h_E` for a description, memoized.
    pub fn relation_embedding(&mut self, tokens: &[u32]) -> Result<Var> {
        let id = self.relation(tokens)?;
        Ok(self.relations[id].embedding)
    }

    /// Pooled unit feature of one (sample, modality) conditioned on a
    /// relation description under an intra or inter context.
    pub fn feature(
        &mut self,
        sample: &Sample,
        modality: Modality,
        relation_tokens: &[u32],
        kind: PairKind,
    ) -> Result<Var> {
        let rel = self.relation(relation_tokens)?;
        let key = (sample.id, modality, rel, kind);
        if let Some(&z) = self.pooled.get(&key) {
            return Ok(z);
        }
        self.encoded(sample, modality)?;
        let enc = match modality {
            Modality::Text => &self.text_cache[&sample.id],
            Modality::Image => &self.image_cache[&sample.id],
        };
        let (tokens_features, keys, values) = (enc.tokens.clone(), enc.keys, enc.values);
        let projected = self.relations[rel].projected;
        let attn = &self.bound.attention;
        let q = attn.relation_query_from(&mut self.tape, projected, keys, &tokens_features.pad_mask)?;
        let len = self.tape.shape(q).1;
        let mask = summary_mask(kind, len, tokens_features.summary_index)?;
        let weights = attn.relation_attention(&mut self.tape, q, &mask, &tokens_features.pad_mask)?;
        let z = attn.contextual_feature_from(&mut self.tape, weights, values)?;
        self.pooled.insert(key, z);
        Ok(z)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.tape.value(v)
    }
}

/// Assemble the relation-conditioned features of one batch. Negatives
/// are encoded under the anchor pair's relation and context.
pub fn batch_features(
    extractor: &mut FeatureExtractor,
    samples: &BTreeMap<u32, &Sample>,
    batch: &PairBatch,
) -> Result<BatchFeatures> {
    let lookup = |id: u32| -> Result<&Sample> {
        samples.get(&id).copied().ok_or_else(|| Error::Integrity {
            detail: format!("batch references unknown sample {id}"),
        })
    };
    let mut features = BatchFeatures::default();
    for p in &batch.positives {
        let anchor = lookup(p.anchor)?;
        let partner = lookup(p.partner)?;
        let rel = &p.relation_tokens;
        let anchor_text = extractor.feature(anchor, Modality::Text, rel, p.kind)?;
        let anchor_image = extractor.feature(anchor, Modality::Image, rel, p.kind)?;
        let partner_text = extractor.feature(partner, Modality::Text, rel, p.kind)?;
        let partner_image = extractor.feature(partner, Modality::Image, rel, p.kind)?;
        let negs = batch.negatives.get(&p.anchor).ok_or_else(|| Error::Integrity {
            detail: format!("no negative set for anchor {}", p.anchor),
        })?;
        let mut negatives_text = Vec::with_capacity(negs.len());
        let mut negatives_image = Vec::with_capacity(negs.len());
        for &k in negs {
            let neg = lookup(k)?;
            negatives_text.push(extractor.feature(neg, Modality::Text, rel, p.kind)?);
            negatives_image.push(extractor.feature(neg, Modality::Image, rel, p.kind)?);
        }
        features.pairs.push(PairFeatures {
            kind: p.kind,
            anchor_text,
            anchor_image,
            partner_text,
            partner_image,
            negatives_text,
            negatives_image,
        });
    }
    Ok(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{total_loss, LossConfig};
    use crate::pairing::{build_batch, BatchOptions, RelationEdge};
    use crate::tokens::EOT;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            dim: 8,
            vocab_size: 64,
            max_text_len: 8,
            max_image_len: 5,
            patch_width: 4,
            depth: 1,
            init_std: 0.02,
        }
    }

    fn tiny_samples(n: u32) -> Vec<Sample> {
        (0..n)
            .map(|id| Sample {
                id,
                text_tokens: vec![2 + id, 10 + id, EOT],
                image_patches: vec![
                    vec![id as f64 * 0.1, 0.3, -0.2, 0.05],
                    vec![0.0, -0.1, id as f64 * 0.05, 0.2],
                ],
                category: id % 2,
            })
            .collect()
    }

    fn tiny_edges() -> Vec<RelationEdge> {
        vec![
            RelationEdge {
                src: 0,
                dst: 1,
                relation_type: 0,
                relation_text_tokens: vec![30, 31, EOT],
            },
            RelationEdge {
                src: 2,
                dst: 3,
                relation_type: 1,
                relation_text_tokens: vec![32, 33, EOT],
            },
        ]
    }

    fn tiny_batch(samples: &[Sample], edges: &[RelationEdge]) -> PairBatch {
        let opts = BatchOptions {
            include_intra: true,
            include_inter: true,
            strip_edge_descriptions: false,
            negatives_cap: None,
            vocab_size: 64,
        };
        let roster: Vec<u32> = samples.iter().map(|s| s.id).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        build_batch(samples, edges, &roster, &opts, &mut rng).unwrap()
    }

    fn full_loss(model: &Model, samples: &[Sample], batch: &PairBatch) -> (f64, Model) {
        let by_id: BTreeMap<u32, &Sample> = samples.iter().map(|s| (s.id, s)).collect();
        let mut ex = FeatureExtractor::new(model);
        let features = batch_features(&mut ex, &by_id, batch).unwrap();
        let loss = total_loss(&mut ex.tape, &features, &LossConfig::default()).unwrap();
        ex.tape.backward(loss).unwrap();
        let mut with_grads = model.clone();
        with_grads.zero_grads();
        with_grads.accumulate_grads(&ex.tape, ex.bound());
        (ex.tape.scalar_value(loss), with_grads)
    }

    #[test]
    fn bound_leaves_match_named_tensor_shapes() {
        let model = Model::init(tiny_config(), 0.6, BetaOneMode::Soft, 42).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let leaves = bound.leaves();
        let named = model.named_tensors();
        assert_eq!(leaves.len(), named.len());
        for ((name, t), var) in named.iter().zip(leaves) {
            let (r, c) = tape.shape(var);
            assert_eq!((t.rows(), t.cols()), (r, c), "shape drift at {name}");
        }
    }

    #[test]
    fn flat_roundtrip_preserves_values() {
        let mut model = Model::init(tiny_config(), 0.6, BetaOneMode::Soft, 42).unwrap();
        let flat = model.flat_params();
        assert_eq!(flat.len(), model.num_params());
        let mut perturbed = flat.clone();
        perturbed[17] += 0.5;
        model.set_flat_params(&perturbed).unwrap();
        assert_eq!(model.flat_params(), perturbed);
    }

    #[test]
    fn full_loss_backward_reaches_every_parameter() {
        let model = Model::init(tiny_config(), 0.6, BetaOneMode::Soft, 42).unwrap();
        let samples = tiny_samples(4);
        let batch = tiny_batch(&samples, &tiny_edges());
        let (loss, with_grads) = full_loss(&model, &samples, &batch);
        assert!(loss.is_finite() && loss > 0.0);
        for (name, t) in with_grads.named_tensors() {
            let g = t.grad.as_ref().expect("grad allocated");
            assert!(g.iter().all(|x| x.is_finite()), "non-finite grad in {name}");
            assert!(
                g.iter().any(|&x| x != 0.0),
                "all-zero gradient buffer in {name}"
            );
        }
    }

    #[test]
    fn feature_cache_reuses_pooled_nodes() {
        let model = Model::init(tiny_config(), 0.6, BetaOneMode::Soft, 42).unwrap();
        let samples = tiny_samples(4);
        let mut ex = FeatureExtractor::new(&model);
        let rel = vec![30, 31, EOT];
        let a = ex
            .feature(&samples[0], Modality::Text, &rel, PairKind::Inter)
            .unwrap();
        let nodes = ex.tape.num_nodes();
        let b = ex
            .feature(&samples[0], Modality::Text, &rel, PairKind::Inter)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(ex.tape.num_nodes(), nodes);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::init(tiny_config(), 0.6, BetaOneMode::Hard, 7).unwrap();
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded.attention.beta, model.attention.beta);
        assert_eq!(loaded.attention.beta_one_mode, model.attention.beta_one_mode);
        for ((n1, t1), (n2, t2)) in model.named_tensors().iter().zip(loaded.named_tensors()) {
            assert_eq!(n1, &n2);
            assert_eq!(t1.shape, t2.shape);
            let bits1: Vec<u64> = t1.data.iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = t2.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2, "bit drift in {n1}");
        }
        // And the files themselves round-trip byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            Model::load(&path),
            Err(Error::Checkpoint { .. }) | Err(Error::Io(_))
        ));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Model::init(tiny_config(), 0.6, BetaOneMode::Soft, 42).unwrap();
        let b = Model::init(tiny_config(), 0.6, BetaOneMode::Soft, 42).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        let c = Model::init(tiny_config(), 0.6, BetaOneMode::Soft, 43).unwrap();
        assert_ne!(a.flat_params(), c.flat_params());
    }
}
