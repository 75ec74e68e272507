//! The relation-conditioned contrastive objective.
//!
//! Four directions over the positive set: text-image and image-text
//! for cross-modal alignment, text-text and image-image (weighted by
//! lambda) for intra-modal coherence. Every term is a temperature-
//! scaled softmax over cosine similarities of unit features, averaged
//! per pair within each direction.

use crate::attention::PairKind;
use crate::tensor::{Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Contrastive temperature.
    pub tau: f64,
    /// Weight of the text-text and image-image terms.
    pub lambda_intra: f64,
    pub include_intra_terms: bool,
    /// Keep only the two cross-modal directions.
    pub cross_modal_only: bool,
    /// Sum the denominator over negatives only, as written, instead of
    /// including the positive. Allows negative loss values.
    pub literal_denominator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            lambda_intra: 0.5,
            include_intra_terms: true,
            cross_modal_only: false,
            literal_denominator: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config {
                detail: format!("tau must be positive, got {}", self.tau),
            });
        }
        if self.lambda_intra < 0.0 {
            return Err(Error::Config {
                detail: format!("lambda must be nonnegative, got {}", self.lambda_intra),
            });
        }
        Ok(())
    }

    fn intra_terms_enabled(&self) -> bool {
        self.include_intra_terms && !self.cross_modal_only
    }
}

/// Relation-conditioned unit features for one positive pair and its
/// anchor's negatives, all conditioned on the same relation.
#[derive(Debug, Clone)]
pub struct PairFeatures {
    pub kind: PairKind,
    pub anchor_text: Var,
    pub anchor_image: Var,
    pub partner_text: Var,
    pub partner_image: Var,
    pub negatives_text: Vec<Var>,
    pub negatives_image: Vec<Var>,
}

#[derive(Debug, Clone, Default)]
pub struct BatchFeatures {
    pub pairs: Vec<PairFeatures>,
}

fn check_unit(tape: &Tape, v: Var) -> Result<()> {
    let norm = tape.value(v).iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::Contract {
            detail: format!("contrastive input has norm {norm}, expected 1"),
        });
    }
    Ok(())
}

fn term_from_similarities(
    tape: &mut Tape,
    pos_sim: Var,
    neg_sims: &[Var],
    tau: f64,
    literal_denominator: bool,
) -> Result<Var> {
    let mut logits = Vec::with_capacity(neg_sims.len() + 1);
    if !literal_denominator {
        logits.push(pos_sim);
    }
    logits.extend_from_slice(neg_sims);
    let row = tape.stack_scalars(&logits)?;
    let row = tape.scale(row, 1.0 / tau);
    let lse = tape.log_sum_exp_row(row)?;
    let pos_scaled = tape.scale(pos_sim, 1.0 / tau);
    tape.sub(lse, pos_scaled)
}

/// One contrastive term: `-log exp(s+/tau) / sum exp(s/tau)` over the
/// positive and the negative similarities.
pub fn contrastive_term(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    negatives: &[Var],
    tau: f64,
    literal_denominator: bool,
) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::Contract {
            detail: "contrastive term needs at least one negative".into(),
        });
    }
    check_unit(tape, anchor)?;
    check_unit(tape, positive)?;
    for &n in negatives {
        check_unit(tape, n)?;
    }
    let pos_sim = tape.dot(anchor, positive)?;
    let neg_sims: Vec<Var> = negatives
        .iter()
        .map(|&n| tape.dot(anchor, n))
        .collect::<Result<_>>()?;
    term_from_similarities(tape, pos_sim, &neg_sims, tau, literal_denominator)
}

fn mean(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let row = tape.stack_scalars(terms)?;
    let total = tape.sum(row);
    Ok(tape.scale(total, 1.0 / terms.len() as f64))
}

/// The full objective: `(L_ti + L_it)/2 + lambda (L_tt + L_ii)`, each
/// direction averaged over the positive set.
pub fn total_loss(tape: &mut Tape, features: &BatchFeatures, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    if features.pairs.is_empty() {
        return Err(Error::Config {
            detail: "empty positive set".into(),
        });
    }
    let mut ti = Vec::new();
    let mut it = Vec::new();
    let mut tt = Vec::new();
    let mut ii = Vec::new();
    for p in &features.pairs {
        ti.push(contrastive_term(
            tape,
            p.anchor_text,
            p.partner_image,
            &p.negatives_image,
            cfg.tau,
            cfg.literal_denominator,
        )?);
        it.push(contrastive_term(
            tape,
            p.anchor_image,
            p.partner_text,
            &p.negatives_text,
            cfg.tau,
            cfg.literal_denominator,
        )?);
        if cfg.intra_terms_enabled() {
            tt.push(contrastive_term(
                tape,
                p.anchor_text,
                p.partner_text,
                &p.negatives_text,
                cfg.tau,
                cfg.literal_denominator,
            )?);
            ii.push(contrastive_term(
                tape,
                p.anchor_image,
                p.partner_image,
                &p.negatives_image,
                cfg.tau,
                cfg.literal_denominator,
            )?);
        }
    }
    let m_ti = mean(tape, &ti)?;
    let m_it = mean(tape, &it)?;
    let cross = tape.add(m_ti, m_it)?;
    let cross = tape.scale(cross, 0.5);
    if !cfg.intra_terms_enabled() {
        return Ok(cross);
    }
    let m_tt = mean(tape, &tt)?;
    let m_ii = mean(tape, &ii)?;
    let intra = tape.add(m_tt, m_ii)?;
    let intra = tape.scale(intra, cfg.lambda_intra);
    tape.add(cross, intra)
}

/// Cross-modal-only loss over self-pairs: the configuration under
/// which the objective coincides with plain pairwise image-text
/// contrast.
pub fn clip_reduction_loss(tape: &mut Tape, features: &BatchFeatures, tau: f64) -> Result<Var> {
    if let Some(p) = features.pairs.iter().find(|p| p.kind != PairKind::Intra) {
        return Err(Error::Contract {
            detail: format!(
                "clip reduction requires self-pairs only, found inter pair anchored at {:?}",
                tape.shape(p.anchor_text)
            ),
        });
    }
    let cfg = LossConfig {
        tau,
        lambda_intra: 0.0,
        include_intra_terms: false,
        cross_modal_only: true,
        literal_denominator: false,
    };
    total_loss(tape, features, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_leaf(tape: &mut Tape, data: Vec<f64>) -> Var {
        let norm = data.iter().map(|x| x * x).sum::<f64>().sqrt();
        let normed: Vec<f64> = data.iter().map(|x| x / norm).collect();
        let d = normed.len();
        tape.constant(1, d, normed).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        use crate::tensor::Tensor;
        let t = Tensor::randn(vec![1, d], 1.0, rng);
        let norm = t.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        t.data.iter().map(|x| x / norm).collect()
    }

    fn basis(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    // Plain-loop reference for one term with stable log-sum-exp.
    fn reference_term(
        anchor: &[f64],
        positive: &[f64],
        negatives: &[Vec<f64>],
        tau: f64,
        literal: bool,
    ) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let sp = dot(anchor, positive) / tau;
        let mut logits: Vec<f64> = if literal { vec![] } else { vec![sp] };
        logits.extend(negatives.iter().map(|n| dot(anchor, n) / tau));
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        lse - sp
    }

    #[test]
    fn equal_similarities_give_ln_two() {
        let mut tape = Tape::new();
        let anchor = unit_leaf(&mut tape, basis(4, 0));
        let positive = unit_leaf(&mut tape, basis(4, 1));
        let negative = unit_leaf(&mut tape, basis(4, 2));
        let term =
            contrastive_term(&mut tape, anchor, positive, &[negative], 0.1, false).unwrap();
        assert!((tape.scalar_value(term) - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_separation_is_near_zero() {
        let mut tape = Tape::new();
        let anchor = unit_leaf(&mut tape, basis(4, 0));
        let positive = unit_leaf(&mut tape, basis(4, 0));
        let neg = unit_leaf(&mut tape, {
            let mut v = basis(4, 0);
            v[0] = -1.0;
            v
        });
        let negatives = vec![neg; 5];
        let term =
            contrastive_term(&mut tape, anchor, positive, &negatives, 0.1, false).unwrap();
        let v = tape.scalar_value(term);
        // ln(1 + 5 exp(-20)) ~ 1.03e-8, effectively zero.
        let expect = (5.0 * (-20.0f64).exp()).ln_1p();
        assert!(v >= 0.0 && (v - expect).abs() < 1e-12 && v < 1e-7, "{v}");
    }

    #[test]
    fn random_term_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 8;
        let anchor = random_unit(&mut rng, d);
        let positive = random_unit(&mut rng, d);
        let negatives: Vec<Vec<f64>> = (0..7).map(|_| random_unit(&mut rng, d)).collect();
        for literal in [false, true] {
            let mut tape = Tape::new();
            let a = unit_leaf(&mut tape, anchor.clone());
            let p = unit_leaf(&mut tape, positive.clone());
            let ns: Vec<Var> = negatives
                .iter()
                .map(|n| unit_leaf(&mut tape, n.clone()))
                .collect();
            let term = contrastive_term(&mut tape, a, p, &ns, 0.1, literal).unwrap();
            let expect = reference_term(&anchor, &positive, &negatives, 0.1, literal);
            assert!((tape.scalar_value(term) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn non_unit_input_is_a_contract_error() {
        let mut tape = Tape::new();
        let anchor = tape.constant(1, 3, vec![0.5, 0.5, 0.5]).unwrap();
        let positive = unit_leaf(&mut tape, basis(3, 1));
        let neg = unit_leaf(&mut tape, basis(3, 2));
        assert!(matches!(
            contrastive_term(&mut tape, anchor, positive, &[neg], 0.1, false),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn no_negatives_is_a_contract_error() {
        let mut tape = Tape::new();
        let anchor = unit_leaf(&mut tape, basis(3, 0));
        let positive = unit_leaf(&mut tape, basis(3, 1));
        assert!(contrastive_term(&mut tape, anchor, positive, &[], 0.1, false).is_err());
    }

    fn random_batch(
        tape: &mut Tape,
        rng: &mut ChaCha8Rng,
        d: usize,
        pairs: usize,
        negs: usize,
        kind: PairKind,
    ) -> (BatchFeatures, Vec<RawPair>) {
        let mut features = BatchFeatures::default();
        let mut raw = Vec::new();
        for _ in 0..pairs {
            let at = random_unit(rng, d);
            let ai = random_unit(rng, d);
            let (pt, pi) = if kind == PairKind::Intra {
                (at.clone(), ai.clone())
            } else {
                (random_unit(rng, d), random_unit(rng, d))
            };
            let nt: Vec<Vec<f64>> = (0..negs).map(|_| random_unit(rng, d)).collect();
            let ni: Vec<Vec<f64>> = (0..negs).map(|_| random_unit(rng, d)).collect();
            features.pairs.push(PairFeatures {
                kind,
                anchor_text: unit_leaf(tape, at.clone()),
                anchor_image: unit_leaf(tape, ai.clone()),
                partner_text: unit_leaf(tape, pt.clone()),
                partner_image: unit_leaf(tape, pi.clone()),
                negatives_text: nt.iter().map(|n| unit_leaf(tape, n.clone())).collect(),
                negatives_image: ni.iter().map(|n| unit_leaf(tape, n.clone())).collect(),
            });
            raw.push(RawPair {
                at,
                ai,
                pt,
                pi,
                nt,
                ni,
            });
        }
        (features, raw)
    }

    struct RawPair {
        at: Vec<f64>,
        ai: Vec<f64>,
        pt: Vec<f64>,
        pi: Vec<f64>,
        nt: Vec<Vec<f64>>,
        ni: Vec<Vec<f64>>,
    }

    // Independent reference for the whole objective.
    fn reference_total(pairs: &[RawPair], cfg: &LossConfig) -> f64 {
        let n = pairs.len() as f64;
        let mut ti = 0.0;
        let mut it = 0.0;
        let mut tt = 0.0;
        let mut ii = 0.0;
        for p in pairs {
            ti += reference_term(&p.at, &p.pi, &p.ni, cfg.tau, cfg.literal_denominator);
            it += reference_term(&p.ai, &p.pt, &p.nt, cfg.tau, cfg.literal_denominator);
            tt += reference_term(&p.at, &p.pt, &p.nt, cfg.tau, cfg.literal_denominator);
            ii += reference_term(&p.ai, &p.pi, &p.ni, cfg.tau, cfg.literal_denominator);
        }
        let mut total = (ti / n + it / n) / 2.0;
        if cfg.include_intra_terms && !cfg.cross_modal_only {
            total += cfg.lambda_intra * (tt / n + ii / n);
        }
        total
    }

    #[test]
    fn lambda_zero_keeps_only_cross_modal_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let (features, raw) = random_batch(&mut tape, &mut rng, 6, 3, 4, PairKind::Inter);
        let cfg = LossConfig {
            lambda_intra: 0.0,
            ..LossConfig::default()
        };
        let total = total_loss(&mut tape, &features, &cfg).unwrap();
        let expect = reference_total(&raw, &cfg);
        assert!((tape.scalar_value(total) - expect).abs() < 1e-12);
    }

    #[test]
    fn symmetric_features_collapse_all_four_terms() {
        // One intra pair whose text and image features coincide, and
        // negatives likewise: total = L_ti * (1 + 2 lambda).
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 6;
        let anchor = random_unit(&mut rng, d);
        let negs: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, d)).collect();
        let mut tape = Tape::new();
        let a = unit_leaf(&mut tape, anchor.clone());
        let ns: Vec<Var> = negs.iter().map(|n| unit_leaf(&mut tape, n.clone())).collect();
        let features = BatchFeatures {
            pairs: vec![PairFeatures {
                kind: PairKind::Intra,
                anchor_text: a,
                anchor_image: a,
                partner_text: a,
                partner_image: a,
                negatives_text: ns.clone(),
                negatives_image: ns.clone(),
            }],
        };
        let lambda = 0.5;
        let cfg = LossConfig {
            lambda_intra: lambda,
            ..LossConfig::default()
        };
        let total = total_loss(&mut tape, &features, &cfg).unwrap();
        let single = reference_term(&anchor, &anchor, &negs, cfg.tau, false);
        assert!((tape.scalar_value(total) - single * (1.0 + 2.0 * lambda)).abs() < 1e-12);
    }

    #[test]
    fn four_pair_batch_matches_independent_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let (features, raw) = random_batch(&mut tape, &mut rng, 8, 4, 5, PairKind::Inter);
        let cfg = LossConfig::default();
        let total = total_loss(&mut tape, &features, &cfg).unwrap();
        let expect = reference_total(&raw, &cfg);
        assert!((tape.scalar_value(total) - expect).abs() < 1e-10);
    }

    #[test]
    fn empty_positive_set_is_a_configuration_error() {
        let mut tape = Tape::new();
        let features = BatchFeatures::default();
        assert!(matches!(
            total_loss(&mut tape, &features, &LossConfig::default()),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn clip_reduction_equals_cross_modal_intra_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tape = Tape::new();
        let (features, _) = random_batch(&mut tape, &mut rng, 8, 4, 6, PairKind::Intra);
        let reduced = clip_reduction_loss(&mut tape, &features, 0.1).unwrap();
        let cfg = LossConfig {
            cross_modal_only: true,
            include_intra_terms: false,
            ..LossConfig::default()
        };
        let total = total_loss(&mut tape, &features, &cfg).unwrap();
        assert!((tape.scalar_value(reduced) - tape.scalar_value(total)).abs() < 1e-12);
    }

    #[test]
    fn clip_reduction_single_pair_equal_sims_is_ln_two() {
        let mut tape = Tape::new();
        let zt = unit_leaf(&mut tape, basis(4, 0));
        let zi = unit_leaf(&mut tape, basis(4, 1));
        let nt = unit_leaf(&mut tape, basis(4, 2));
        let ni = unit_leaf(&mut tape, basis(4, 3));
        let features = BatchFeatures {
            pairs: vec![PairFeatures {
                kind: PairKind::Intra,
                anchor_text: zt,
                anchor_image: zi,
                partner_text: zt,
                partner_image: zi,
                negatives_text: vec![nt],
                negatives_image: vec![ni],
            }],
        };
        let loss = clip_reduction_loss(&mut tape, &features, 0.1).unwrap();
        assert!((tape.scalar_value(loss) - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn clip_reduction_rejects_inter_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tape = Tape::new();
        let (features, _) = random_batch(&mut tape, &mut rng, 4, 2, 3, PairKind::Inter);
        assert!(matches!(
            clip_reduction_loss(&mut tape, &features, 0.1),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn loss_is_nonnegative_and_negative_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let d = 8;
        let anchor = random_unit(&mut rng, d);
        let positive = random_unit(&mut rng, d);
        let negatives: Vec<Vec<f64>> = (0..6).map(|_| random_unit(&mut rng, d)).collect();
        let eval = |negs: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let a = unit_leaf(&mut tape, anchor.clone());
            let p = unit_leaf(&mut tape, positive.clone());
            let ns: Vec<Var> = negs.iter().map(|n| unit_leaf(&mut tape, n.clone())).collect();
            let t = contrastive_term(&mut tape, a, p, &ns, 0.1, false).unwrap();
            tape.scalar_value(t)
        };
        let base = eval(&negatives);
        assert!(base >= 0.0);
        let mut reversed = negatives.clone();
        reversed.reverse();
        assert!((eval(&reversed) - base).abs() < 1e-12);
    }

    #[test]
    fn increasing_positive_similarity_decreases_the_term() {
        // Two positives at different angles to the anchor, fixed negatives.
        let d = 4;
        let anchor = basis(d, 0);
        let close = {
            let mut v = vec![0.0; d];
            v[0] = 0.9;
            v[1] = (1.0f64 - 0.81).sqrt();
            v
        };
        let far = {
            let mut v = vec![0.0; d];
            v[0] = 0.2;
            v[1] = (1.0f64 - 0.04).sqrt();
            v
        };
        let negatives = vec![basis(d, 2), basis(d, 3)];
        let eval = |pos: &[f64]| {
            let mut tape = Tape::new();
            let a = unit_leaf(&mut tape, anchor.clone());
            let p = unit_leaf(&mut tape, pos.to_vec());
            let ns: Vec<Var> = negatives
                .iter()
                .map(|n| unit_leaf(&mut tape, n.clone()))
                .collect();
            let t = contrastive_term(&mut tape, a, p, &ns, 0.1, false).unwrap();
            tape.scalar_value(t)
        };
        assert!(eval(&close) < eval(&far));
    }

    #[test]
    fn scaling_similarities_and_temperature_together_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let sims: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |c: f64| {
            let mut tape = Tape::new();
            let pos = tape.constant_scalar(sims[0] * c);
            let negs: Vec<Var> = sims[1..]
                .iter()
                .map(|&s| tape.constant_scalar(s * c))
                .collect();
            let t = term_from_similarities(&mut tape, pos, &negs, 0.1 * c, false).unwrap();
            tape.scalar_value(t)
        };
        let base = eval(1.0);
        for c in [0.5, 2.0, 7.5] {
            assert!((eval(c) - base).abs() < 1e-12);
        }
    }

    #[test]
    fn literal_denominator_can_go_negative() {
        let mut tape = Tape::new();
        let anchor = unit_leaf(&mut tape, basis(3, 0));
        let positive = unit_leaf(&mut tape, basis(3, 0));
        let neg = unit_leaf(&mut tape, {
            let mut v = basis(3, 0);
            v[0] = -1.0;
            v
        });
        let term = contrastive_term(&mut tape, anchor, positive, &[neg], 0.1, true).unwrap();
        assert!(tape.scalar_value(term) < 0.0);
    }

    use rand::Rng;
}
