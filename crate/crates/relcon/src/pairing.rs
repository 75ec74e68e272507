//! Positive-pair and negative-set construction for contrastive batches.
//!
//! Every sample pairs with itself under a fixed generic relation
//! (intra); every relation edge pairs its endpoints in both directions
//! under the edge's description (inter). Negatives for an anchor are
//! drawn uniformly from the batch roster excluding the anchor and all
//! of its positive partners.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::PairKind;
use crate::tokens;
use crate::{Error, Result};

/// One dataset item: token ids plus precomputed patch feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: u32,
    pub text_tokens: Vec<u32>,
    pub image_patches: Vec<Vec<f64>>,
    pub category: u32,
}

/// A natural-language relation between two samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationEdge {
    pub src: u32,
    pub dst: u32,
    pub relation_type: u32,
    pub relation_text_tokens: Vec<u32>,
}

/// One positive pair: anchor, partner, and the relation conditioning
/// both of their features.
#[derive(Debug, Clone, PartialEq)]
pub struct Positive {
    pub anchor: u32,
    pub partner: u32,
    pub relation_tokens: Vec<u32>,
    pub relation_type: Option<u32>,
    pub kind: PairKind,
}

/// A fully constructed training batch.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub roster: Vec<u32>,
    pub positives: Vec<Positive>,
    /// Anchor id to its negative ids, shared by all of the anchor's pairs.
    pub negatives: BTreeMap<u32, Vec<u32>>,
}

/// Options controlling batch construction; the ablation switches live
/// here so a batch is self-describing.
#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub include_intra: bool,
    pub include_inter: bool,
    /// Replace every inter-sample relation text with the generic
    /// template while keeping the connectivity.
    pub strip_edge_descriptions: bool,
    /// Cap on negatives per anchor; `None` uses every eligible item.
    pub negatives_cap: Option<usize>,
    pub vocab_size: usize,
}

/// The fixed tokenization of the generic intra-sample relation.
pub fn generic_intra_relation(vocab_size: usize) -> Vec<u32> {
    tokens::tokenize("text and image describe the same item", vocab_size)
}

/// Expand samples and edges into the positive set. Inter edges are
/// emitted in both directions with the same relation text.
pub fn build_positive_set(
    samples: &[Sample],
    edges: &[RelationEdge],
    include_intra: bool,
    include_inter: bool,
    vocab_size: usize,
) -> Result<Vec<Positive>> {
    let known: BTreeSet<u32> = samples.iter().map(|s| s.id).collect();
    let mut positives = Vec::new();
    if include_intra {
        let generic = generic_intra_relation(vocab_size);
        for s in samples {
            positives.push(Positive {
                anchor: s.id,
                partner: s.id,
                relation_tokens: generic.clone(),
                relation_type: None,
                kind: PairKind::Intra,
            });
        }
    }
    if include_inter {
        for e in edges {
            for end in [e.src, e.dst] {
                if !known.contains(&end) {
                    return Err(Error::Integrity {
                        detail: format!(
                            "edge ({}, {}) references unknown sample {end}",
                            e.src, e.dst
                        ),
                    });
                }
            }
            for (a, b) in [(e.src, e.dst), (e.dst, e.src)] {
                positives.push(Positive {
                    anchor: a,
                    partner: b,
                    relation_tokens: e.relation_text_tokens.clone(),
                    relation_type: Some(e.relation_type),
                    kind: PairKind::Inter,
                });
            }
        }
    }
    Ok(positives)
}

/// Uniform sample without replacement from the roster, excluding the
/// anchor and its positive partners.
pub fn sample_negatives(
    roster: &[u32],
    anchor: u32,
    partners: &BTreeSet<u32>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>> {
    let mut eligible: Vec<u32> = roster
        .iter()
        .copied()
        .filter(|&id| id != anchor && !partners.contains(&id))
        .collect();
    if eligible.len() < count {
        return Err(Error::InsufficientNegatives {
            eligible: eligible.len(),
            requested: count,
        });
    }
    let (chosen, _) = eligible.partial_shuffle(rng, count);
    Ok(chosen.to_vec())
}

/// Build one batch over a roster: positives restricted to the roster,
/// one negative set per distinct anchor.
pub fn build_batch(
    samples: &[Sample],
    edges: &[RelationEdge],
    roster: &[u32],
    opts: &BatchOptions,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    let in_roster: BTreeSet<u32> = roster.iter().copied().collect();
    let roster_samples: Vec<Sample> = samples
        .iter()
        .filter(|s| in_roster.contains(&s.id))
        .cloned()
        .collect();
    let roster_edges: Vec<RelationEdge> = edges
        .iter()
        .filter(|e| in_roster.contains(&e.src) && in_roster.contains(&e.dst))
        .cloned()
        .collect();
    let mut positives = build_positive_set(
        &roster_samples,
        &roster_edges,
        opts.include_intra,
        opts.include_inter,
        opts.vocab_size,
    )?;
    if positives.is_empty() {
        return Err(Error::Config {
            detail: "positive set is empty; nothing to train on".into(),
        });
    }
    if opts.strip_edge_descriptions {
        let generic = generic_intra_relation(opts.vocab_size);
        for p in positives.iter_mut() {
            if p.kind == PairKind::Inter {
                p.relation_tokens = generic.clone();
            }
        }
    }
    // Partner sets come from every edge between roster members,
    // independent of the include_inter switch: an ablated edge is
    // still a relation buyers would recognize.
    let mut partners: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for e in &roster_edges {
        partners.entry(e.src).or_default().insert(e.dst);
        partners.entry(e.dst).or_default().insert(e.src);
    }
    let empty = BTreeSet::new();
    let mut negatives = BTreeMap::new();
    let mut anchors: Vec<u32> = positives.iter().map(|p| p.anchor).collect();
    anchors.sort_unstable();
    anchors.dedup();
    for anchor in anchors {
        let excluded = partners.get(&anchor).unwrap_or(&empty);
        let eligible = roster
            .iter()
            .filter(|&&id| id != anchor && !excluded.contains(&id))
            .count();
        let count = opts.negatives_cap.map_or(eligible, |cap| cap);
        let negs = sample_negatives(roster, anchor, excluded, count, rng)?;
        negatives.insert(anchor, negs);
    }
    Ok(PairBatch {
        roster: roster.to_vec(),
        positives,
        negatives,
    })
}
