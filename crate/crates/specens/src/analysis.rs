//! Closed-form speed and acceptance quantities, plus the exact enumeration
//! oracle the statistical suites compare decodes against.

use std::collections::BTreeMap;

use crate::core::{check_same_vocab, tv_distance, Distribution};
use crate::ensemble::EnsembleSpec;
use crate::error::{Error, Result};
use crate::models::ModelHandle;

/// Exact acceptance rate `Σ_x min(q(x), r(x))` of proposing from `q` and
/// verifying against `r`.
///
/// Algebraically identical to `1 − ½·D_TV(q, r)`; the equality is asserted.
pub fn acceptance_rate_exact(q: &Distribution, r: &Distribution) -> Result<f64> {
    check_same_vocab(q.vocab_size(), r.vocab_size())?;
    let rate: f64 = q
        .probs()
        .iter()
        .zip(r.probs())
        .map(|(&qx, &rx)| qx.min(rx))
        .sum();
    let via_tv = 1.0 - 0.5 * tv_distance(q, r)?;
    assert!(
        (rate - via_tv).abs() <= 1e-12,
        "acceptance identity violated: {rate} vs {via_tv}"
    );
    Ok(rate)
}

/// Expected accepted tokens per cycle: `(1 − α^γ) / (1 − α)`, with the
/// `α → 1` limit evaluated analytically as `γ`.
pub fn expected_accepted_tokens(alpha: f64, gamma: usize) -> f64 {
    debug_assert!((0.0..=1.0).contains(&alpha) && gamma >= 1);
    if alpha == 1.0 {
        gamma as f64
    } else {
        (1.0 - alpha.powi(gamma as i32)) / (1.0 - alpha)
    }
}

/// Speculative-ensemble improvement factor over the vanilla ensemble:
/// `(1 − α^γ)(1 + c) / ((1 − α)(1 + cγ))`; limit `γ(1+c)/(1+cγ)` at `α = 1`.
pub fn improvement_factor_se(alpha: f64, gamma: usize, c: f64) -> f64 {
    debug_assert!(c > 0.0);
    expected_accepted_tokens(alpha, gamma) * (1.0 + c) / (1.0 + c * gamma as f64)
}

/// Alternate-proposal improvement factor:
/// `(1 − α^γ_q)(1 + c) / ((1 − α)(1 + cγ_q − α^{γ_p} c))`.
pub fn improvement_factor_alternate(alpha: f64, gamma_q: usize, gamma_p: usize, c: f64) -> f64 {
    debug_assert!(c > 0.0);
    let bonus_prob = alpha.powi(gamma_p as i32);
    expected_accepted_tokens(alpha, gamma_q) * (1.0 + c)
        / (1.0 + c * gamma_q as f64 - bonus_prob * c)
}

/// Lower bound on the acceptance rate in the weighted ensemble when the
/// λ-weighted model proposes.
pub fn weighted_alpha_lower_bound(lambda: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&lambda));
    lambda
}

/// Which of the two weighted-ensemble members should propose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposerSide {
    /// The λ-weighted model (index 0).
    Lambda,
    /// The (1−λ)-weighted model (index 1).
    Complement,
}

/// Best achievable acceptance bound `max(λ, 1−λ)` and the proposer choice
/// that achieves it. Ties go to the λ side.
pub fn best_side(lambda: f64) -> (f64, ProposerSide) {
    if lambda >= 0.5 {
        (lambda, ProposerSide::Lambda)
    } else {
        (1.0 - lambda, ProposerSide::Complement)
    }
}

/// Whether some proposal length speeds up the weighted speculative
/// ensemble: strictly `λ > c / (1 + c)`.
pub fn speedup_exists_condition(lambda: f64, c: f64) -> bool {
    lambda > c / (1.0 + c)
}

/// Exhaustively enumerates every token sequence of the given length under
/// vanilla-ensemble semantics, returning its exact probability.
///
/// Budget-limited to `vocab^length <= 10^6` enumerated sequences.
pub fn exact_sequence_distribution(
    models: &[ModelHandle],
    ensemble: &EnsembleSpec,
    prefix: &[u32],
    length: usize,
) -> Result<BTreeMap<Vec<u32>, f64>> {
    if models.len() < 2 {
        return Err(Error::Config("need at least 2 models".into()));
    }
    ensemble.validate_for(models.len())?;
    let vocab_size = models[0].vocab().size();
    for m in &models[1..] {
        check_same_vocab(vocab_size, m.vocab().size())?;
    }
    let budget = 1_000_000u64;
    let states = (vocab_size as u64)
        .checked_pow(length as u32)
        .filter(|&s| s <= budget)
        .ok_or(Error::BudgetExceeded {
            states: (vocab_size as f64).powi(length as i32) as u64,
            budget,
        })?;
    let _ = states;

    let mut out = BTreeMap::new();
    let mut context = prefix.to_vec();
    let mut sequence = Vec::with_capacity(length);
    walk(models, ensemble, &mut context, &mut sequence, 1.0, length, &mut out)?;
    debug_assert!((out.values().sum::<f64>() - 1.0).abs() <= 1e-9);
    Ok(out)
}

fn walk(
    models: &[ModelHandle],
    ensemble: &EnsembleSpec,
    context: &mut Vec<u32>,
    sequence: &mut Vec<u32>,
    prob: f64,
    remaining: usize,
    out: &mut BTreeMap<Vec<u32>, f64>,
) -> Result<()> {
    if remaining == 0 {
        out.insert(sequence.clone(), prob);
        return Ok(());
    }
    let rows = models
        .iter()
        .map(|m| m.logits_for(context))
        .collect::<Result<Vec<_>>>()?;
    let r = ensemble.combine(&rows.iter().collect::<Vec<_>>())?;
    for token in 0..r.vocab_size() as u32 {
        let p = r.get(token);
        // The logit floor maps true zeros to ~1e-12 after softmax; prune
        // those branches so the result is the effective support.
        if p < crate::core::ZERO_MASS_CUTOFF {
            continue;
        }
        context.push(token);
        sequence.push(token);
        walk(models, ensemble, context, sequence, prob * p, remaining - 1, out)?;
        context.pop();
        sequence.pop();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{normalize, Vocabulary};
    use crate::ensemble::weighted_ensemble;
    use crate::models::TableModel;
    use std::sync::Arc;

    fn dist(v: Vec<f64>) -> Distribution {
        normalize(v).unwrap()
    }

    fn context_free(probs: Vec<f64>) -> ModelHandle {
        let default = dist(probs);
        Arc::new(
            TableModel::new(
                Vocabulary::new(default.vocab_size()).unwrap(),
                0,
                1.0,
                "m",
                Default::default(),
                default,
            )
            .unwrap(),
        )
    }

    #[test]
    fn acceptance_rate_examples() {
        let q = dist(vec![0.8, 0.2]);
        assert_eq!(acceptance_rate_exact(&q, &q).unwrap(), 1.0);
        let disjoint_a = dist(vec![1.0, 0.0]);
        let disjoint_b = dist(vec![0.0, 1.0]);
        assert_eq!(acceptance_rate_exact(&disjoint_a, &disjoint_b).unwrap(), 0.0);
        let r = dist(vec![0.5, 0.5]);
        assert!((acceptance_rate_exact(&q, &r).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn expected_tokens_examples() {
        assert_eq!(expected_accepted_tokens(0.0, 7), 1.0);
        assert_eq!(expected_accepted_tokens(0.3, 1), 1.0);
        assert!((expected_accepted_tokens(0.5, 3) - 1.75).abs() < 1e-12);
        assert_eq!(expected_accepted_tokens(1.0, 4), 4.0);
    }

    /// Direct enumeration of the accept/reject tree: a cycle of length γ
    /// emits i tokens with probability α^{i−1}(1−α) for i < γ and α^{γ−1}
    /// for i = γ.
    fn enumerate_expected_tokens(alpha: f64, gamma: usize) -> f64 {
        let mut expectation = 0.0;
        for emitted in 1..gamma {
            expectation +=
                emitted as f64 * alpha.powi(emitted as i32 - 1) * (1.0 - alpha);
        }
        expectation + gamma as f64 * alpha.powi(gamma as i32 - 1)
    }

    #[test]
    fn expected_tokens_matches_tree_enumeration() {
        for gamma in 1..=6 {
            for step in 0..=20 {
                let alpha = step as f64 / 20.0;
                let closed = expected_accepted_tokens(alpha, gamma);
                let enumerated = enumerate_expected_tokens(alpha, gamma);
                assert!(
                    (closed - enumerated).abs() <= 1e-12,
                    "alpha={alpha} gamma={gamma}: {closed} vs {enumerated}"
                );
            }
        }
    }

    #[test]
    fn improvement_factor_se_examples() {
        assert!((improvement_factor_se(0.42, 1, 0.3) - 1.0).abs() < 1e-12);
        assert!((improvement_factor_se(0.0, 5, 0.1) - 1.1 / 1.5).abs() < 1e-12);
        let expected = (1.0 - 0.7f64.powi(5)) * 1.1 / (0.3 * 1.5);
        assert!((improvement_factor_se(0.7, 5, 0.1) - expected).abs() < 1e-12);
        assert!((improvement_factor_se(1.0, 4, 0.25) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn improvement_factor_alternate_examples() {
        assert!((improvement_factor_alternate(0.0, 1, 1, 0.3) - 1.0).abs() < 1e-12);
        let expected = (1.0 - 0.7f64.powi(5)) * 1.1 / (0.3 * (1.5 - 0.07));
        assert!((improvement_factor_alternate(0.7, 5, 1, 0.1) - expected).abs() < 1e-12);
        // gamma_q = gamma_p = 1 is never below 1.
        for ai in 0..100 {
            for ci in 1..=100 {
                let alpha = ai as f64 / 100.0;
                let c = ci as f64 / 20.0;
                assert!(improvement_factor_alternate(alpha, 1, 1, c) >= 1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn alternate_reduces_to_se_without_bonus() {
        // Dropping the bonus term recovers the fixed-roles factor.
        for &(alpha, gq, c) in &[(0.3, 2, 0.1), (0.8, 5, 0.5), (0.55, 3, 1.0)] {
            let fixed = improvement_factor_se(alpha, gq, c);
            let with_zero_bonus = expected_accepted_tokens(alpha, gq) * (1.0 + c)
                / (1.0 + c * gq as f64 - 0.0 * c);
            assert!((fixed - with_zero_bonus).abs() <= 1e-12);
        }
    }

    #[test]
    fn se_factor_monotone_in_alpha() {
        for gamma in 2..=5 {
            for &c in &[0.1, 0.5, 1.0] {
                let mut prev = improvement_factor_se(0.0, gamma, c);
                for step in 1..=50 {
                    let next = improvement_factor_se(step as f64 / 50.0, gamma, c);
                    assert!(next > prev, "gamma={gamma} c={c} step={step}");
                    prev = next;
                }
            }
        }
    }

    #[test]
    fn best_side_rule() {
        assert_eq!(best_side(0.5), (0.5, ProposerSide::Lambda));
        assert_eq!(best_side(0.2), (0.8, ProposerSide::Complement));
        assert_eq!(weighted_alpha_lower_bound(0.2), 0.2);
    }

    #[test]
    fn lower_bound_holds_on_random_pairs() {
        let lambda = 0.3;
        let mut rng = crate::core::RandomSource::new(5);
        for _ in 0..1000 {
            let q = dist((0..8).map(|_| rng.next_uniform() + 1e-3).collect());
            let p = dist((0..8).map(|_| rng.next_uniform() + 1e-3).collect());
            let r = weighted_ensemble(&q, &p, lambda).unwrap();
            assert!(acceptance_rate_exact(&q, &r).unwrap() >= lambda - 1e-12);
        }
    }

    #[test]
    fn lower_bound_equality_on_disjoint_supports() {
        let q = dist(vec![0.6, 0.4, 0.0, 0.0]);
        let p = dist(vec![0.0, 0.0, 0.3, 0.7]);
        let lambda = 0.35;
        let r = weighted_ensemble(&q, &p, lambda).unwrap();
        assert!((acceptance_rate_exact(&q, &r).unwrap() - lambda).abs() <= 1e-12);
    }

    #[test]
    fn speedup_condition_examples() {
        assert!(speedup_exists_condition(0.5, 0.1));
        assert!(!speedup_exists_condition(0.05, 0.1));
        let c = 0.25;
        assert!(!speedup_exists_condition(c / (1.0 + c), c));
    }

    #[test]
    fn sequence_distribution_trivial_cases() {
        let models = vec![context_free(vec![1.0, 0.0]), context_free(vec![1.0, 0.0])];
        let spec = EnsembleSpec::weighted(0.5, 1.0).unwrap();
        let empty = exact_sequence_distribution(&models, &spec, &[], 0).unwrap();
        assert_eq!(empty.len(), 1);
        assert_eq!(empty[&vec![]], 1.0);

        let unanimous = exact_sequence_distribution(&models, &spec, &[], 3).unwrap();
        assert_eq!(unanimous.len(), 1);
        assert!((unanimous[&vec![0, 0, 0]] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sequence_distribution_independent_fair_coin() {
        let models = vec![context_free(vec![0.8, 0.2]), context_free(vec![0.2, 0.8])];
        let spec = EnsembleSpec::weighted(0.5, 1.0).unwrap();
        let dist = exact_sequence_distribution(&models, &spec, &[], 2).unwrap();
        assert_eq!(dist.len(), 4);
        for p in dist.values() {
            assert!((p - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn sequence_distribution_budget() {
        let models = vec![context_free(vec![0.5, 0.5]), context_free(vec![0.5, 0.5])];
        let spec = EnsembleSpec::weighted(0.5, 1.0).unwrap();
        assert!(matches!(
            exact_sequence_distribution(&models, &spec, &[], 21),
            Err(Error::BudgetExceeded { .. })
        ));
    }
}
