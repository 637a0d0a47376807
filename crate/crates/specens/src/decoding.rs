//! The decoding strategies: vanilla ensemble, vanilla speculative decoding,
//! speculative-based ensemble, the alternate proposal framework, and the
//! n-model speculative ensemble. All emit a common [`DecodeTrace`].
//!
//! Draw-consumption contract (so traces replay and the two-model special
//! case of the n-model scheme is draw-for-draw identical to the alternate
//! proposal framework): proposals consume one uniform each in proposal
//! order; verification consumes one uniform per verified token in pending
//! order; a rejection consumes one more for the resample; a fully accepted
//! cycle consumes one for the bonus token, then one per extension proposal.
//! Scoring consumes none.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::core::{
    check_same_vocab, normalize, sample, Distribution, LogitsVec, RandomSource,
};
use crate::ensemble::EnsembleSpec;
use crate::error::{Error, Result};
use crate::models::ModelHandle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    VanillaEnsemble,
    VanillaSd,
    SpecEnsemble,
    AlternateProposal,
    NModelSe,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::VanillaEnsemble,
        Strategy::VanillaSd,
        Strategy::SpecEnsemble,
        Strategy::AlternateProposal,
        Strategy::NModelSe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::VanillaEnsemble => "vanilla-ensemble",
            Strategy::VanillaSd => "vanilla-sd",
            Strategy::SpecEnsemble => "spec-ensemble",
            Strategy::AlternateProposal => "alternate-proposal",
            Strategy::NModelSe => "nmodel-se",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub ensemble: EnsembleSpec,
    /// Proposal length per model, indexed like the model list.
    pub gammas: Vec<usize>,
    pub max_tokens: usize,
    pub seed: u64,
    #[serde(default)]
    pub default_proposer_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepKind {
    /// One autoregressive forward pass producing one proposal token.
    Propose,
    /// One forward pass scoring every pending position (plus the bonus row).
    Score,
}

/// One uniform-draw verification event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    /// Index of the verified position in the emitted token sequence.
    pub position: usize,
    pub token: u32,
    /// Model whose distribution the token was originally sampled from.
    pub origin_model: usize,
    pub u: f64,
    pub ratio: f64,
    pub accepted: bool,
}

/// One model invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub model_index: usize,
    pub kind: StepKind,
    /// Context length (prompt plus committed and pending tokens) seen by
    /// this invocation.
    pub prefix_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proposed: Option<u32>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub verifications: Vec<VerificationRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resampled: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bonus: Option<u32>,
}

/// Complete record of one decode session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub tokens: Vec<u32>,
    pub steps: Vec<StepRecord>,
    /// Invocation count per model, indexed like the model list.
    pub invocations: Vec<u64>,
    /// Exactly `Σ_k invocations[k] · cost[k]`.
    pub simulated_time: f64,
    pub accepted: u64,
    pub rejected: u64,
    /// `accepted / (accepted + rejected)`; absent when nothing was verified.
    pub empirical_alpha: Option<f64>,
}

impl DecodeTrace {
    /// Sequence of invoked model indices, in order.
    pub fn invocation_sequence(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.model_index).collect()
    }
}

/// Runs the configured strategy from a fresh stream seeded by `config.seed`.
pub fn decode(
    models: &[ModelHandle],
    config: &DecodeConfig,
    prefix: &[u32],
) -> Result<DecodeTrace> {
    let mut rng = RandomSource::new(config.seed);
    decode_with_rng(models, config, prefix, &mut rng)
}

pub fn decode_with_rng(
    models: &[ModelHandle],
    config: &DecodeConfig,
    prefix: &[u32],
    rng: &mut RandomSource,
) -> Result<DecodeTrace> {
    match config.strategy {
        Strategy::VanillaEnsemble => vanilla_ensemble_decode(models, config, prefix, rng),
        Strategy::VanillaSd => vanilla_sd_decode(models, config, prefix, rng),
        Strategy::SpecEnsemble => spec_ensemble_decode(models, config, prefix, rng),
        Strategy::AlternateProposal => alternate_proposal_decode(models, config, prefix, rng),
        Strategy::NModelSe => n_model_se_decode(models, config, prefix, rng),
    }
}

fn validate(models: &[ModelHandle], config: &DecodeConfig, prefix: &[u32]) -> Result<()> {
    if models.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 models, got {}",
            models.len()
        )));
    }
    let vocab_size = models[0].vocab().size();
    for m in &models[1..] {
        check_same_vocab(vocab_size, m.vocab().size())?;
    }
    for &token in prefix {
        if (token as usize) >= vocab_size {
            return Err(Error::TokenOutOfRange { token, vocab_size });
        }
    }
    if config.gammas.len() != models.len() {
        return Err(Error::Config(format!(
            "{} gammas for {} models",
            config.gammas.len(),
            models.len()
        )));
    }
    if config.gammas.iter().any(|&g| g == 0) {
        return Err(Error::Config("every gamma must be >= 1".into()));
    }
    if config.max_tokens == 0 {
        return Err(Error::Config("max_tokens must be >= 1".into()));
    }
    if config.default_proposer_index >= models.len() {
        return Err(Error::Config(format!(
            "default proposer index {} out of range",
            config.default_proposer_index
        )));
    }
    // Vanilla SD verifies against the target model directly; the ensemble
    // function is ignored (only its temperature applies).
    if config.strategy != Strategy::VanillaSd {
        config.ensemble.validate_for(models.len())?;
    } else if models.len() != 2 {
        return Err(Error::Config("vanilla-sd requires exactly 2 models".into()));
    }
    let two_model = matches!(
        config.strategy,
        Strategy::VanillaSd | Strategy::SpecEnsemble | Strategy::AlternateProposal
    );
    if two_model && models.len() != 2 {
        return Err(Error::Config(format!(
            "{} requires exactly 2 models, got {}",
            config.strategy.name(),
            models.len()
        )));
    }
    Ok(())
}

/// Shared per-session state and trace assembly.
struct Session<'a> {
    models: &'a [ModelHandle],
    spec: &'a EnsembleSpec,
    prefix: &'a [u32],
    max_tokens: usize,
    rng: &'a mut RandomSource,
    tokens: Vec<u32>,
    steps: Vec<StepRecord>,
    invocations: Vec<u64>,
    accepted: u64,
    rejected: u64,
}

enum Verdict {
    Accepted,
    Rejected,
}

impl<'a> Session<'a> {
    fn new(
        models: &'a [ModelHandle],
        config: &'a DecodeConfig,
        prefix: &'a [u32],
        rng: &'a mut RandomSource,
    ) -> Self {
        Session {
            models,
            spec: &config.ensemble,
            prefix,
            max_tokens: config.max_tokens,
            rng,
            tokens: Vec::with_capacity(config.max_tokens),
            steps: Vec::new(),
            invocations: vec![0; models.len()],
            accepted: 0,
            rejected: 0,
        }
    }

    fn full(&self) -> bool {
        self.tokens.len() >= self.max_tokens
    }

    fn emit(&mut self, token: u32) {
        debug_assert!(!self.full());
        self.tokens.push(token);
    }

    /// Context seen by a model about to work at the position after
    /// `pending` uncommitted tokens.
    fn context(&self, pending: &[u32]) -> Vec<u32> {
        let mut ctx = Vec::with_capacity(self.prefix.len() + self.tokens.len() + pending.len());
        ctx.extend_from_slice(self.prefix);
        ctx.extend_from_slice(&self.tokens);
        ctx.extend_from_slice(pending);
        ctx
    }

    /// One autoregressive proposal: one invocation, one uniform draw.
    fn propose(&mut self, model_index: usize, pending: &[u32]) -> Result<(u32, LogitsVec)> {
        let ctx = self.context(pending);
        let logits = self.models[model_index].logits_for(&ctx)?;
        let token = sample(&self.spec.member_distribution(&logits), self.rng);
        self.invocations[model_index] += 1;
        self.steps.push(StepRecord {
            model_index,
            kind: StepKind::Propose,
            prefix_len: ctx.len(),
            proposed: Some(token),
            verifications: Vec::new(),
            resampled: None,
            bonus: None,
        });
        Ok((token, logits))
    }

    /// One scoring invocation covering `positions` pending offsets (rows
    /// are computed per position; the whole batch counts once).
    fn begin_score(&mut self, model_index: usize, pending_len: usize) -> usize {
        self.invocations[model_index] += 1;
        self.steps.push(StepRecord {
            model_index,
            kind: StepKind::Score,
            prefix_len: self.prefix.len() + self.tokens.len() + pending_len,
            proposed: None,
            verifications: Vec::new(),
            resampled: None,
            bonus: None,
        });
        self.steps.len() - 1
    }

    /// Verifies one pending token against `r` with origin distribution `q`,
    /// consuming one uniform (plus one more on rejection for the resample).
    fn verify(
        &mut self,
        step: usize,
        token: u32,
        origin_model: usize,
        q: &Distribution,
        r: &Distribution,
    ) -> Result<Verdict> {
        let qx = q.get(token);
        debug_assert!(qx > 0.0, "proposal token must have positive origin probability");
        let ratio = (r.get(token) / qx).min(1.0);
        let u = self.rng.next_uniform();
        let accepted = u <= ratio;
        let position = self.tokens.len();
        self.steps[step].verifications.push(VerificationRecord {
            position,
            token,
            origin_model,
            u,
            ratio,
            accepted,
        });
        if accepted {
            self.accepted += 1;
            self.emit(token);
            return Ok(Verdict::Accepted);
        }
        self.rejected += 1;
        let residual: Vec<f64> = r
            .probs()
            .iter()
            .zip(q.probs())
            .map(|(&rx, &qx)| (rx - qx).max(0.0))
            .collect();
        let residual = normalize(residual).map_err(|_| {
            Error::Internal("rejection with zero-mass residual distribution".into())
        })?;
        let resampled = sample(&residual, self.rng);
        self.steps[step].resampled = Some(resampled);
        self.emit(resampled);
        Ok(Verdict::Rejected)
    }

    fn finish(self) -> DecodeTrace {
        let simulated_time = self
            .invocations
            .iter()
            .zip(self.models)
            .map(|(&n, m)| n as f64 * m.cost())
            .sum();
        let verified = self.accepted + self.rejected;
        DecodeTrace {
            tokens: self.tokens,
            steps: self.steps,
            invocations: self.invocations,
            simulated_time,
            accepted: self.accepted,
            rejected: self.rejected,
            empirical_alpha: (verified > 0)
                .then(|| self.accepted as f64 / verified as f64),
        }
    }
}

/// Every token is sampled from the ensemble of all models' rows; each model
/// is invoked once per emitted token.
pub fn vanilla_ensemble_decode(
    models: &[ModelHandle],
    config: &DecodeConfig,
    prefix: &[u32],
    rng: &mut RandomSource,
) -> Result<DecodeTrace> {
    validate(models, config, prefix)?;
    let mut session = Session::new(models, config, prefix, rng);
    while !session.full() {
        let ctx = session.context(&[]);
        let mut rows = Vec::with_capacity(models.len());
        for (index, model) in models.iter().enumerate() {
            rows.push(model.logits_for(&ctx)?);
            session.invocations[index] += 1;
            session.steps.push(StepRecord {
                model_index: index,
                kind: StepKind::Score,
                prefix_len: ctx.len(),
                proposed: None,
                verifications: Vec::new(),
                resampled: None,
                bonus: None,
            });
        }
        let r = session.spec.combine(&rows.iter().collect::<Vec<_>>())?;
        let token = sample(&r, session.rng);
        session.emit(token);
    }
    Ok(session.finish())
}

/// Standard speculative decoding: model 0 proposes, model 1 verifies
/// against its own distribution, bonus token on full acceptance.
pub fn vanilla_sd_decode(
    models: &[ModelHandle],
    config: &DecodeConfig,
    prefix: &[u32],
    rng: &mut RandomSource,
) -> Result<DecodeTrace> {
    validate(models, config, prefix)?;
    draft_verify_decode(models, config, prefix, rng, false)
}

/// Speculative-based ensemble: as vanilla SD but verification and
/// resampling use the ensemble distribution `r`; no bonus token (the extra
/// verifier row is computed but unused).
pub fn spec_ensemble_decode(
    models: &[ModelHandle],
    config: &DecodeConfig,
    prefix: &[u32],
    rng: &mut RandomSource,
) -> Result<DecodeTrace> {
    validate(models, config, prefix)?;
    draft_verify_decode(models, config, prefix, rng, true)
}

fn draft_verify_decode(
    models: &[ModelHandle],
    config: &DecodeConfig,
    prefix: &[u32],
    rng: &mut RandomSource,
    against_ensemble: bool,
) -> Result<DecodeTrace> {
    let gamma = config.gammas[0];
    let mut session = Session::new(models, config, prefix, rng);
    while !session.full() {
        let mut proposals: Vec<(u32, LogitsVec)> = Vec::with_capacity(gamma);
        let mut drafted: Vec<u32> = Vec::with_capacity(gamma);
        for _ in 0..gamma {
            let (token, logits) = session.propose(0, &drafted)?;
            drafted.push(token);
            proposals.push((token, logits));
        }
        // Target scores all gamma + 1 positions in one invocation.
        let step = session.begin_score(1, drafted.len());
        let mut target_rows = Vec::with_capacity(gamma + 1);
        for j in 0..=gamma {
            let ctx = session.context(&drafted[..j]);
            target_rows.push(models[1].logits_for(&ctx)?);
        }
        let mut all_accepted = true;
        for (j, (token, q_row)) in proposals.iter().enumerate() {
            if session.full() {
                return Ok(session.finish());
            }
            let q = session.spec.member_distribution(q_row);
            let r = if against_ensemble {
                session.spec.combine(&[q_row, &target_rows[j]])?
            } else {
                session.spec.member_distribution(&target_rows[j])
            };
            if let Verdict::Rejected = session.verify(step, *token, 0, &q, &r)? {
                all_accepted = false;
                break;
            }
        }
        if all_accepted && !against_ensemble && !session.full() {
            let bonus_dist = session.spec.member_distribution(&target_rows[gamma]);
            let bonus = sample(&bonus_dist, session.rng);
            session.steps[step].bonus = Some(bonus);
            session.emit(bonus);
        }
    }
    Ok(session.finish())
}

/// The alternate proposal framework: proposer and verifier swap roles
/// after fully accepted cycles, reusing the verifier's bonus token as the
/// first proposal of the next cycle.
pub fn alternate_proposal_decode(
    models: &[ModelHandle],
    config: &DecodeConfig,
    prefix: &[u32],
    rng: &mut RandomSource,
) -> Result<DecodeTrace> {
    validate(models, config, prefix)?;
    let default_proposer = config.default_proposer_index;
    let mut session = Session::new(models, config, prefix, rng);
    // The cached bonus token and the verifier row it was drawn from.
    let mut cache: Option<(u32, LogitsVec)> = None;
    let mut proposer = default_proposer;
    loop {
        if session.full() {
            return Ok(session.finish());
        }
        proposer = match cache {
            None => default_proposer,
            // The cached token came from the previous verifier, who now
            // proposes.
            Some(_) => 1 - proposer,
        };
        let verifier = 1 - proposer;
        let mut pending: Vec<(u32, LogitsVec)> = cache.take().into_iter().collect();
        let mut drafted: Vec<u32> = pending.iter().map(|(t, _)| *t).collect();
        let fresh = config.gammas[proposer].saturating_sub(pending.len());
        for _ in 0..fresh {
            let (token, logits) = session.propose(proposer, &drafted)?;
            drafted.push(token);
            pending.push((token, logits));
        }
        let step = session.begin_score(verifier, drafted.len());
        let mut verifier_rows = Vec::with_capacity(pending.len() + 1);
        for j in 0..=pending.len() {
            let ctx = session.context(&drafted[..j]);
            verifier_rows.push(models[verifier].logits_for(&ctx)?);
        }
        let mut rejected = false;
        for (j, (token, q_row)) in pending.iter().enumerate() {
            if session.full() {
                return Ok(session.finish());
            }
            let q = session.spec.member_distribution(q_row);
            // Ensemble rows are ordered by model index, not by role.
            let r = if proposer == 0 {
                session.spec.combine(&[q_row, &verifier_rows[j]])?
            } else {
                session.spec.combine(&[&verifier_rows[j], q_row])?
            };
            if let Verdict::Rejected = session.verify(step, *token, proposer, &q, &r)? {
                rejected = true;
                break;
            }
        }
        if rejected || session.full() {
            continue;
        }
        let bonus_row = verifier_rows.pop().expect("bonus row");
        let bonus = sample(&session.spec.member_distribution(&bonus_row), session.rng);
        session.steps[step].bonus = Some(bonus);
        cache = Some((bonus, bonus_row));
        // `proposer` stays: the next iteration swaps it to the verifier,
        // the bonus token's origin.
    }
}

struct PendingToken {
    token: u32,
    origin_model: usize,
    origin_row: LogitsVec,
}

/// The n-model speculative ensemble: models score each other's pending
/// proposals; a token is verified once every model has a row for it.
pub fn n_model_se_decode(
    models: &[ModelHandle],
    config: &DecodeConfig,
    prefix: &[u32],
    rng: &mut RandomSource,
) -> Result<DecodeTrace> {
    validate(models, config, prefix)?;
    let n = models.len();
    let default_proposer = config.default_proposer_index;
    let mut session = Session::new(models, config, prefix, rng);
    let mut pending: VecDeque<PendingToken> = VecDeque::new();
    let mut queues: Vec<VecDeque<LogitsVec>> = vec![VecDeque::new(); n];

    let drafted = |pending: &VecDeque<PendingToken>| -> Vec<u32> {
        pending.iter().map(|p| p.token).collect()
    };

    loop {
        if session.full() {
            return Ok(session.finish());
        }
        if pending.is_empty() {
            for _ in 0..config.gammas[default_proposer] {
                let (token, logits) = session.propose(default_proposer, &drafted(&pending))?;
                queues[default_proposer].push_back(logits.clone());
                pending.push_back(PendingToken {
                    token,
                    origin_model: default_proposer,
                    origin_row: logits,
                });
            }
            continue;
        }

        // The model with the shortest probability queue scores next,
        // lowest index on ties.
        let scorer = (0..n).min_by_key(|&j| queues[j].len()).expect("n >= 2");
        let step = session.begin_score(scorer, pending.len());
        let tokens: Vec<u32> = drafted(&pending);
        for j in queues[scorer].len()..pending.len() {
            let ctx = session.context(&tokens[..j]);
            queues[scorer].push_back(models[scorer].logits_for(&ctx)?);
        }
        // The bonus row comes out of the same forward pass; it only joins
        // the queue if the cycle survives verification.
        let bonus_row = models[scorer].logits_for(&session.context(&tokens))?;

        let mut rejected = false;
        while queues.iter().all(|q| !q.is_empty()) {
            if session.full() {
                return Ok(session.finish());
            }
            let front = pending.front().expect("pending covers nonempty queues");
            let rows: Vec<&LogitsVec> =
                queues.iter().map(|q| q.front().expect("nonempty")).collect();
            let r = session.spec.combine(&rows)?;
            let q = session.spec.member_distribution(&front.origin_row);
            let verdict =
                session.verify(step, front.token, front.origin_model, &q, &r)?;
            match verdict {
                Verdict::Accepted => {
                    pending.pop_front();
                    for queue in &mut queues {
                        queue.pop_front();
                    }
                }
                Verdict::Rejected => {
                    pending.clear();
                    for queue in &mut queues {
                        queue.clear();
                    }
                    rejected = true;
                    break;
                }
            }
        }
        if rejected {
            continue;
        }
        if session.full() {
            return Ok(session.finish());
        }
        let bonus = sample(&session.spec.member_distribution(&bonus_row), session.rng);
        session.steps[step].bonus = Some(bonus);
        queues[scorer].push_back(bonus_row.clone());
        pending.push_back(PendingToken {
            token: bonus,
            origin_model: scorer,
            origin_row: bonus_row,
        });
        for _ in 0..config.gammas[scorer] - 1 {
            let (token, logits) = session.propose(scorer, &drafted(&pending))?;
            queues[scorer].push_back(logits.clone());
            pending.push_back(PendingToken {
                token,
                origin_model: scorer,
                origin_row: logits,
            });
        }
    }
}
