//! Ensemble functions: how the member models' rows combine into the
//! verification distribution `r`.
//!
//! Temperature is applied to each member's logits before combining for the
//! probability-level ensembles (weighted, general weighted), and to the
//! combined logits for the contrastive ensemble. In greedy mode (`T = 0`)
//! the combined distribution is re-collapsed to a one-hot at its argmax so
//! that verification degenerates to an exact-match test.

use serde::{Deserialize, Serialize};

use crate::core::{
    apply_temperature, check_same_vocab, normalize, Distribution, LogitsVec, NORM_TOL,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum EnsembleKind {
    /// `r = λ·q + (1−λ)·p`, exactly two models; index 0 is `q`.
    Weighted { lambda: f64 },
    /// `r = softmax(l_p − μ·l_q)`, exactly two models; index 0 is the
    /// amateur/proposal model `q`, index 1 the expert `p`.
    Contrastive { mu: f64 },
    /// `r = Σ_k w_k·d_k`, one weight per model, weights on the simplex.
    GeneralWeighted { weights: Vec<f64> },
}

/// Declarative description of the ensemble function and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnsembleSpecRepr", into = "EnsembleSpecRepr")]
pub struct EnsembleSpec {
    pub kind: EnsembleKind,
    pub temperature: f64,
}

impl EnsembleSpec {
    pub fn weighted(lambda: f64, temperature: f64) -> Result<Self> {
        Self::checked(EnsembleKind::Weighted { lambda }, temperature)
    }

    pub fn contrastive(mu: f64, temperature: f64) -> Result<Self> {
        Self::checked(EnsembleKind::Contrastive { mu }, temperature)
    }

    pub fn general_weighted(weights: Vec<f64>, temperature: f64) -> Result<Self> {
        Self::checked(EnsembleKind::GeneralWeighted { weights }, temperature)
    }

    fn checked(kind: EnsembleKind, temperature: f64) -> Result<Self> {
        let spec = Self { kind, temperature };
        spec.check_params()?;
        Ok(spec)
    }

    pub fn check_params(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        match &self.kind {
            EnsembleKind::Weighted { lambda } => {
                if !(0.0..=1.0).contains(lambda) {
                    return Err(Error::Config(format!("lambda must be in [0,1], got {lambda}")));
                }
            }
            EnsembleKind::Contrastive { mu } => {
                if !mu.is_finite() || *mu < 0.0 {
                    return Err(Error::Config(format!("mu must be >= 0, got {mu}")));
                }
            }
            EnsembleKind::GeneralWeighted { weights } => {
                if weights.len() < 2 {
                    return Err(Error::Weight(format!(
                        "need at least 2 weights, got {}",
                        weights.len()
                    )));
                }
                if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
                    return Err(Error::Weight(format!("weights must be in [0,1]: {weights:?}")));
                }
                let sum: f64 = weights.iter().sum();
                if (sum - 1.0).abs() > NORM_TOL {
                    return Err(Error::Weight(format!("weights sum to {sum}, expected 1")));
                }
            }
        }
        Ok(())
    }

    /// Number of models this spec combines.
    pub fn model_count(&self) -> usize {
        match &self.kind {
            EnsembleKind::Weighted { .. } | EnsembleKind::Contrastive { .. } => 2,
            EnsembleKind::GeneralWeighted { weights } => weights.len(),
        }
    }

    /// Checks the spec against the actual model count of a decode.
    pub fn validate_for(&self, model_count: usize) -> Result<()> {
        self.check_params()?;
        if self.model_count() != model_count {
            return Err(Error::Config(format!(
                "{} ensemble requires exactly {} models, got {model_count}",
                self.kind_name(),
                self.model_count()
            )));
        }
        Ok(())
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            EnsembleKind::Weighted { .. } => "weighted",
            EnsembleKind::Contrastive { .. } => "contrastive",
            EnsembleKind::GeneralWeighted { .. } => "general-weighted",
        }
    }

    /// The distribution a single member samples from: its logits at this
    /// spec's temperature. This is the `q` of every verification ratio.
    pub fn member_distribution(&self, logits: &LogitsVec) -> Distribution {
        apply_temperature(logits, self.temperature)
    }

    /// Combines one logits row per model (indexed by model position) into
    /// the ensemble distribution `r`.
    pub fn combine(&self, rows: &[&LogitsVec]) -> Result<Distribution> {
        if rows.len() != self.model_count() {
            return Err(Error::Config(format!(
                "{} ensemble expects {} rows, got {}",
                self.kind_name(),
                self.model_count(),
                rows.len()
            )));
        }
        match &self.kind {
            EnsembleKind::Weighted { lambda } => {
                let q = self.member_distribution(rows[0]);
                let p = self.member_distribution(rows[1]);
                let mixed = weighted_ensemble(&q, &p, *lambda)?;
                Ok(self.collapse_if_greedy(mixed))
            }
            EnsembleKind::Contrastive { mu } => {
                contrastive_ensemble(rows[0], rows[1], *mu, self.temperature)
            }
            EnsembleKind::GeneralWeighted { weights } => {
                let dists: Vec<Distribution> =
                    rows.iter().map(|l| self.member_distribution(l)).collect();
                let mixed = general_weighted_ensemble(&dists, weights)?;
                Ok(self.collapse_if_greedy(mixed))
            }
        }
    }

    fn collapse_if_greedy(&self, d: Distribution) -> Distribution {
        if self.temperature == 0.0 {
            Distribution::one_hot(d.vocab_size(), d.argmax())
        } else {
            d
        }
    }
}

/// `r(x) = λ·q(x) + (1−λ)·p(x)`.
pub fn weighted_ensemble(q: &Distribution, p: &Distribution, lambda: f64) -> Result<Distribution> {
    check_same_vocab(q.vocab_size(), p.vocab_size())?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must be in [0,1], got {lambda}")));
    }
    let probs: Vec<f64> = q
        .probs()
        .iter()
        .zip(p.probs())
        .map(|(&qx, &px)| lambda * qx + (1.0 - lambda) * px)
        .collect();
    normalize(probs)
}

/// `r = softmax((l_p − μ·l_q) / T)`; one-hot argmax at `T = 0`.
pub fn contrastive_ensemble(
    l_q: &LogitsVec,
    l_p: &LogitsVec,
    mu: f64,
    temperature: f64,
) -> Result<Distribution> {
    check_same_vocab(l_q.vocab_size(), l_p.vocab_size())?;
    let combined: Vec<f64> = l_p
        .logits()
        .iter()
        .zip(l_q.logits())
        .map(|(&p, &q)| p - mu * q)
        .collect();
    Ok(apply_temperature(&LogitsVec::new(combined)?, temperature))
}

/// `r(x) = Σ_k weights[k]·dists[k](x)`.
pub fn general_weighted_ensemble(
    dists: &[Distribution],
    weights: &[f64],
) -> Result<Distribution> {
    if dists.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 distributions, got {}",
            dists.len()
        )));
    }
    if weights.len() != dists.len() {
        return Err(Error::Weight(format!(
            "{} weights for {} distributions",
            weights.len(),
            dists.len()
        )));
    }
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::Weight(format!("weights must be in [0,1]: {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > NORM_TOL {
        return Err(Error::Weight(format!("weights sum to {sum}, expected 1")));
    }
    let size = dists[0].vocab_size();
    for d in &dists[1..] {
        check_same_vocab(size, d.vocab_size())?;
    }
    let mut probs = vec![0.0; size];
    for (d, &w) in dists.iter().zip(weights) {
        for (acc, &px) in probs.iter_mut().zip(d.probs()) {
            *acc += w * px;
        }
    }
    normalize(probs)
}

/// Serde surface: a flat record with optional per-kind parameters.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleSpecRepr {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
    #[serde(default = "default_temperature")]
    temperature: f64,
}

fn default_temperature() -> f64 {
    1.0
}

impl TryFrom<EnsembleSpecRepr> for EnsembleSpec {
    type Error = Error;
    fn try_from(repr: EnsembleSpecRepr) -> Result<Self> {
        let kind = match repr.kind.as_str() {
            "weighted" => EnsembleKind::Weighted {
                lambda: repr
                    .lambda
                    .ok_or_else(|| Error::Config("weighted ensemble requires lambda".into()))?,
            },
            "contrastive" => EnsembleKind::Contrastive {
                mu: repr
                    .mu
                    .ok_or_else(|| Error::Config("contrastive ensemble requires mu".into()))?,
            },
            "general" | "general-weighted" => EnsembleKind::GeneralWeighted {
                weights: repr.weights.ok_or_else(|| {
                    Error::Config("general-weighted ensemble requires weights".into())
                })?,
            },
            other => return Err(Error::Config(format!("unknown ensemble kind {other:?}"))),
        };
        EnsembleSpec::checked(kind, repr.temperature)
    }
}

impl From<EnsembleSpec> for EnsembleSpecRepr {
    fn from(spec: EnsembleSpec) -> Self {
        let (kind, lambda, mu, weights) = match spec.kind {
            EnsembleKind::Weighted { lambda } => ("weighted", Some(lambda), None, None),
            EnsembleKind::Contrastive { mu } => ("contrastive", None, Some(mu), None),
            EnsembleKind::GeneralWeighted { weights } => {
                ("general", None, None, Some(weights))
            }
        };
        Self {
            kind: kind.to_string(),
            lambda,
            mu,
            weights,
            temperature: spec.temperature,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::tv_distance;
    use proptest::prelude::*;

    fn dist(v: Vec<f64>) -> Distribution {
        normalize(v).unwrap()
    }

    #[test]
    fn weighted_reduces_to_each_side() {
        let q = dist(vec![0.7, 0.3]);
        let p = dist(vec![0.1, 0.9]);
        assert_eq!(weighted_ensemble(&q, &p, 0.0).unwrap(), p);
        assert_eq!(weighted_ensemble(&q, &p, 1.0).unwrap(), q);
    }

    #[test]
    fn weighted_midpoint_by_symmetry() {
        let q = dist(vec![0.8, 0.2]);
        let p = dist(vec![0.2, 0.8]);
        let r = weighted_ensemble(&q, &p, 0.5).unwrap();
        assert!((r.get(0) - 0.5).abs() < 1e-12);
        assert!((r.get(1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn contrastive_mu_zero_is_softmax_of_expert() {
        let l_q = LogitsVec::new(vec![5.0, -3.0]).unwrap();
        let l_p = LogitsVec::new(vec![0.0, 0.0]).unwrap();
        let r = contrastive_ensemble(&l_q, &l_p, 0.0, 1.0).unwrap();
        assert!((r.get(0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn contrastive_derived_softmax_value() {
        // softmax([-0.1, 0.1]) computed independently:
        // e^{-0.1}/(e^{-0.1}+e^{0.1}) = 0.45016600268752216.
        let l_q = LogitsVec::new(vec![1.0, -1.0]).unwrap();
        let l_p = LogitsVec::new(vec![0.0, 0.0]).unwrap();
        let r = contrastive_ensemble(&l_q, &l_p, 0.1, 1.0).unwrap();
        assert!((r.get(0) - 0.45016600268752216).abs() < 1e-12);
        assert!((r.get(1) - 0.5498339973124778).abs() < 1e-12);
    }

    #[test]
    fn contrastive_greedy_one_hot() {
        let l_q = LogitsVec::new(vec![0.0, 0.0]).unwrap();
        let l_p = LogitsVec::new(vec![2.0, 0.0]).unwrap();
        let r = contrastive_ensemble(&l_q, &l_p, 0.1, 0.0).unwrap();
        assert_eq!(r.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn general_weighted_examples() {
        let a = dist(vec![0.4, 0.6]);
        let third = 1.0 / 3.0;
        let r = general_weighted_ensemble(
            &[a.clone(), a.clone(), a.clone()],
            &[third, third, third],
        )
        .unwrap();
        assert!(tv_distance(&r, &a).unwrap() < 1e-12);

        let r = general_weighted_ensemble(&[a.clone(), dist(vec![0.5, 0.5])], &[1.0, 0.0]).unwrap();
        assert!(tv_distance(&r, &a).unwrap() < 1e-12);

        // Direct arithmetic oracle: ([1,0]+[0,1]+[.5,.5])/3 = [.5,.5].
        let r = general_weighted_ensemble(
            &[dist(vec![1.0, 0.0]), dist(vec![0.0, 1.0]), dist(vec![0.5, 0.5])],
            &[third, third, third],
        )
        .unwrap();
        assert!((r.get(0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn malformed_weights_rejected() {
        let a = dist(vec![0.4, 0.6]);
        let b = dist(vec![0.5, 0.5]);
        assert!(matches!(
            general_weighted_ensemble(&[a.clone(), b.clone()], &[0.9, 0.2]),
            Err(Error::Weight(_))
        ));
        assert!(matches!(
            general_weighted_ensemble(&[a, b], &[0.5]),
            Err(Error::Weight(_))
        ));
    }

    #[test]
    fn spec_serde_round_trip() {
        for spec in [
            EnsembleSpec::weighted(0.3, 1.0).unwrap(),
            EnsembleSpec::contrastive(0.1, 0.0).unwrap(),
            EnsembleSpec::general_weighted(vec![0.25, 0.25, 0.5], 1.0).unwrap(),
        ] {
            let json = serde_json::to_string(&spec).unwrap();
            let back: EnsembleSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(spec, back);
        }
        assert!(serde_json::from_str::<EnsembleSpec>(r#"{"kind":"weighted"}"#).is_err());
        assert!(serde_json::from_str::<EnsembleSpec>(r#"{"kind":"weighted","lambda":1.5}"#).is_err());
    }

    #[test]
    fn greedy_combine_is_one_hot() {
        let spec = EnsembleSpec::weighted(0.5, 0.0).unwrap();
        let rows = [
            dist(vec![0.1, 0.6, 0.3]).to_logits(),
            dist(vec![0.2, 0.2, 0.6]).to_logits(),
        ];
        let r = spec.combine(&[&rows[0], &rows[1]]).unwrap();
        // Members collapse to one-hots at ids 1 and 2; the tie resolves to
        // the lowest id.
        assert_eq!(r.probs(), &[0.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn weighted_swap_symmetry(
            q in prop::collection::vec(0.01f64..1.0, 6),
            p in prop::collection::vec(0.01f64..1.0, 6),
            lambda in 0.0f64..=1.0,
        ) {
            let q = dist(q);
            let p = dist(p);
            let a = weighted_ensemble(&q, &p, lambda).unwrap();
            let b = weighted_ensemble(&p, &q, 1.0 - lambda).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn contrastive_shift_invariance(
            l_q in prop::collection::vec(-5.0f64..5.0, 6),
            l_p in prop::collection::vec(-5.0f64..5.0, 6),
            shift in -10.0f64..10.0,
            mu in 0.0f64..1.0,
        ) {
            let base = contrastive_ensemble(
                &LogitsVec::new(l_q.clone()).unwrap(),
                &LogitsVec::new(l_p.clone()).unwrap(),
                mu,
                1.0,
            ).unwrap();
            let shifted_p: Vec<f64> = l_p.iter().map(|v| v + shift).collect();
            let shifted = contrastive_ensemble(
                &LogitsVec::new(l_q).unwrap(),
                &LogitsVec::new(shifted_p).unwrap(),
                mu,
                1.0,
            ).unwrap();
            prop_assert!(tv_distance(&base, &shifted).unwrap() <= 1e-9);
        }

        #[test]
        fn ensembles_return_valid_distributions(
            q in prop::collection::vec(0.01f64..1.0, 8),
            p in prop::collection::vec(0.01f64..1.0, 8),
            lambda in 0.0f64..=1.0,
            mu in 0.0f64..1.0,
        ) {
            let qd = dist(q);
            let pd = dist(p);
            for r in [
                weighted_ensemble(&qd, &pd, lambda).unwrap(),
                contrastive_ensemble(&qd.to_logits(), &pd.to_logits(), mu, 1.0).unwrap(),
                general_weighted_ensemble(&[qd.clone(), pd.clone()], &[0.5, 0.5]).unwrap(),
            ] {
                prop_assert!(r.probs().iter().all(|&x| x >= 0.0));
                prop_assert!((r.probs().iter().sum::<f64>() - 1.0).abs() <= NORM_TOL);
            }
        }
    }
}
