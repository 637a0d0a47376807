//! Config-driven experiment runner and statistical validation suites.
//!
//! Speed is simulated time (invocation counts times declared model costs),
//! never wall clock: that is what makes the closed-form improvement
//! factors exact statements about the runs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    acceptance_rate_exact, improvement_factor_alternate, improvement_factor_se,
};
use crate::core::{tv_distance, Distribution, RandomSource};
use crate::decoding::{decode_with_rng, DecodeConfig, Strategy};
use crate::ensemble::{EnsembleKind, EnsembleSpec};
use crate::error::{Error, Result};
use crate::models::{
    load_table_model, random_table_model, train_ngram, ModelHandle, NGramModel,
};

/// How to construct one model of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Seeded random table model.
    Table {
        seed: u64,
        vocab_size: usize,
        context_length: usize,
        #[serde(default = "default_concentration")]
        concentration: f64,
        cost: f64,
        #[serde(default)]
        name: Option<String>,
    },
    /// N-gram model trained on a token stream read from `corpus`.
    Ngram {
        corpus: String,
        vocab_size: usize,
        order: usize,
        delta: f64,
        cost: f64,
        #[serde(default)]
        name: Option<String>,
    },
    /// Table model loaded from a model file.
    File { path: String },
}

fn default_concentration() -> f64 {
    1.0
}

/// Parses a corpus of whitespace- or comma-separated decimal token ids.
pub fn parse_corpus(text: &str) -> Result<Vec<u32>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u32>()
                .map_err(|e| Error::Format(format!("bad corpus token {s:?}: {e}")))
        })
        .collect()
}

pub fn build_model(spec: &ModelSpec) -> Result<ModelHandle> {
    match spec {
        ModelSpec::Table {
            seed,
            vocab_size,
            context_length,
            concentration,
            cost,
            name,
        } => {
            let name = name.clone().unwrap_or_else(|| format!("table-{seed}"));
            Ok(Arc::new(random_table_model(
                *seed,
                *vocab_size,
                *context_length,
                *concentration,
                *cost,
                &name,
            )?))
        }
        ModelSpec::Ngram {
            corpus,
            vocab_size,
            order,
            delta,
            cost,
            name,
        } => {
            let stream = parse_corpus(&std::fs::read_to_string(corpus)?)?;
            let name = name
                .clone()
                .unwrap_or_else(|| format!("ngram-{order}"));
            let vocab = crate::core::Vocabulary::new(*vocab_size)?;
            Ok(Arc::new(train_ngram(&stream, *order, *delta, vocab, *cost, name)?)
                as Arc<NGramModel> as ModelHandle)
        }
        ModelSpec::File { path } => Ok(Arc::new(load_table_model(path)?)),
    }
}

pub fn build_models(specs: &[ModelSpec]) -> Result<Vec<ModelHandle>> {
    specs.iter().map(build_model).collect()
}

/// One strategy arm of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyCell {
    pub strategy: Strategy,
    pub gammas: Vec<usize>,
    #[serde(default)]
    pub default_proposer_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParameter {
    Lambda,
    Mu,
    Gamma,
    Temperature,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Lambda => "lambda",
            SweepParameter::Mu => "mu",
            SweepParameter::Gamma => "gamma",
            SweepParameter::Temperature => "temperature",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub models: Vec<ModelSpec>,
    pub ensemble: EnsembleSpec,
    pub strategies: Vec<StrategyCell>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    pub sessions: usize,
    pub tokens_per_session: usize,
    #[serde(default)]
    pub prefix: Vec<u32>,
    pub seed: u64,
}

/// Aggregated result of one strategy × sweep-value cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub strategy: Strategy,
    /// Sweep parameter name and value, when a sweep is configured.
    pub parameter: Option<String>,
    pub value: Option<f64>,
    pub gammas: Vec<usize>,
    pub sessions: usize,
    pub tokens: u64,
    pub simulated_time: f64,
    pub tokens_per_time: f64,
    /// Throughput ratio against the VanillaEnsemble cell of the same
    /// sweep value; exactly 1 for the baseline itself.
    pub speedup: f64,
    pub empirical_alpha: Option<f64>,
    /// Acceptance lower bound for weighted ensembles (the proposer-side weight).
    pub predicted_alpha_lower_bound: Option<f64>,
    /// Closed-form improvement factor evaluated at the measured alpha.
    pub predicted_factor: Option<f64>,
    pub invocations: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: u64,
    pub engine_version: String,
    pub cells: Vec<CellReport>,
}

/// FNV-1a over the canonical JSON encoding of the config.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Statistically independent per-session seed for (experiment seed, cell
/// index, session index). Plain XOR of the three values would collide
/// (`s^1^1 == s^0^0`), so each coordinate passes through a mixer first.
pub fn derive_session_seed(seed: u64, cell: u64, session: u64) -> u64 {
    let mut s = splitmix64(seed);
    s = splitmix64(s ^ cell.wrapping_mul(0x9e3779b97f4a7c15));
    splitmix64(s ^ session.wrapping_mul(0xd1b54a32d192ed03))
}

fn apply_sweep(
    base: &EnsembleSpec,
    cell: &StrategyCell,
    sweep: Option<(&SweepParameter, f64)>,
) -> Result<(EnsembleSpec, Vec<usize>)> {
    let mut spec = base.clone();
    let mut gammas = cell.gammas.clone();
    if let Some((param, value)) = sweep {
        match param {
            SweepParameter::Lambda => match &mut spec.kind {
                EnsembleKind::Weighted { lambda } => *lambda = value,
                _ => {
                    return Err(Error::Config(
                        "lambda sweep requires a weighted ensemble".into(),
                    ))
                }
            },
            SweepParameter::Mu => match &mut spec.kind {
                EnsembleKind::Contrastive { mu } => *mu = value,
                _ => {
                    return Err(Error::Config(
                        "mu sweep requires a contrastive ensemble".into(),
                    ))
                }
            },
            SweepParameter::Temperature => spec.temperature = value,
            SweepParameter::Gamma => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!(
                        "gamma sweep values must be integers >= 1, got {value}"
                    )));
                }
                gammas[cell.default_proposer_index] = value as usize;
            }
        }
    }
    spec.check_params()?;
    Ok((spec, gammas))
}

struct CellAccumulator {
    sessions: usize,
    tokens: u64,
    simulated_time: f64,
    accepted: u64,
    rejected: u64,
    invocations: Vec<u64>,
}

fn run_cell(
    models: &[ModelHandle],
    config: &DecodeConfig,
    prefix: &[u32],
    sessions: usize,
    experiment_seed: u64,
    cell_index: u64,
) -> Result<CellAccumulator> {
    let mut acc = CellAccumulator {
        sessions,
        tokens: 0,
        simulated_time: 0.0,
        accepted: 0,
        rejected: 0,
        invocations: vec![0; models.len()],
    };
    let mut session_config = config.clone();
    for session in 0..sessions {
        session_config.seed = derive_session_seed(experiment_seed, cell_index, session as u64);
        let mut rng = RandomSource::new(session_config.seed);
        let trace = decode_with_rng(models, &session_config, prefix, &mut rng)
            .map_err(|e| annotate(e, cell_index, config.strategy))?;
        acc.tokens += trace.tokens.len() as u64;
        acc.simulated_time += trace.simulated_time;
        acc.accepted += trace.accepted;
        acc.rejected += trace.rejected;
        for (total, n) in acc.invocations.iter_mut().zip(&trace.invocations) {
            *total += n;
        }
    }
    Ok(acc)
}

fn annotate(err: Error, cell_index: u64, strategy: Strategy) -> Error {
    Error::Internal(format!(
        "cell {cell_index} ({}): {err}",
        strategy.name()
    ))
}

impl CellAccumulator {
    fn empirical_alpha(&self) -> Option<f64> {
        let verified = self.accepted + self.rejected;
        (verified > 0).then(|| self.accepted as f64 / verified as f64)
    }

    fn tokens_per_time(&self) -> f64 {
        self.tokens as f64 / self.simulated_time
    }
}

/// Lower bound on alpha for weighted ensembles: the weight of the
/// side acting as proposer; for role-alternating strategies the weaker of
/// the two sides.
fn alpha_lower_bound(spec: &EnsembleSpec, strategy: Strategy) -> Option<f64> {
    let EnsembleKind::Weighted { lambda } = spec.kind else {
        return None;
    };
    match strategy {
        Strategy::SpecEnsemble => Some(lambda),
        Strategy::AlternateProposal | Strategy::NModelSe => Some(lambda.min(1.0 - lambda)),
        _ => None,
    }
}

fn predicted_factor(
    models: &[ModelHandle],
    strategy: Strategy,
    gammas: &[usize],
    alpha: Option<f64>,
) -> Option<f64> {
    let alpha = alpha?;
    if models.len() != 2 {
        return None;
    }
    let c = models[0].cost() / models[1].cost();
    match strategy {
        Strategy::SpecEnsemble | Strategy::VanillaSd => {
            Some(improvement_factor_se(alpha, gammas[0], c))
        }
        Strategy::AlternateProposal | Strategy::NModelSe => {
            Some(improvement_factor_alternate(alpha, gammas[0], gammas[1], c))
        }
        Strategy::VanillaEnsemble => None,
    }
}

/// Runs every strategy over every sweep value, always including a
/// VanillaEnsemble baseline cell per sweep value; speedups are throughput
/// ratios against that baseline.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    if config.sessions == 0 || config.tokens_per_session == 0 {
        return Err(Error::Config(
            "sessions and tokens_per_session must be >= 1".into(),
        ));
    }
    if config.strategies.is_empty() {
        return Err(Error::Config("no strategies configured".into()));
    }
    let models = build_models(&config.models)?;
    let sweep_values: Vec<Option<f64>> = match &config.sweep {
        None => vec![None],
        Some(sweep) => {
            if sweep.values.is_empty() {
                return Err(Error::Config("sweep with no values".into()));
            }
            sweep.values.iter().copied().map(Some).collect()
        }
    };
    let parameter = config.sweep.as_ref().map(|s| s.parameter);

    let mut cells = Vec::new();
    let mut cell_index: u64 = 0;
    for value in &sweep_values {
        let sweep_arg = parameter.as_ref().zip(*value);
        // Baseline first: vanilla ensemble at this sweep value.
        let baseline_cell = StrategyCell {
            strategy: Strategy::VanillaEnsemble,
            gammas: vec![1; models.len()],
            default_proposer_index: 0,
        };
        let mut arms = vec![baseline_cell];
        arms.extend(
            config
                .strategies
                .iter()
                .filter(|c| c.strategy != Strategy::VanillaEnsemble)
                .cloned(),
        );
        let mut baseline_throughput = None;
        for arm in &arms {
            let (spec, gammas) = apply_sweep(&config.ensemble, arm, sweep_arg)?;
            let decode_config = DecodeConfig {
                strategy: arm.strategy,
                ensemble: spec.clone(),
                gammas: gammas.clone(),
                max_tokens: config.tokens_per_session,
                seed: 0,
                default_proposer_index: arm.default_proposer_index,
            };
            let acc = run_cell(
                &models,
                &decode_config,
                &config.prefix,
                config.sessions,
                config.seed,
                cell_index,
            )?;
            let throughput = acc.tokens_per_time();
            let speedup = match baseline_throughput {
                None => {
                    baseline_throughput = Some(throughput);
                    1.0
                }
                Some(base) => throughput / base,
            };
            let alpha = acc.empirical_alpha();
            cells.push(CellReport {
                strategy: arm.strategy,
                parameter: parameter.map(|p| p.name().to_string()),
                value: *value,
                gammas: gammas.clone(),
                sessions: acc.sessions,
                tokens: acc.tokens,
                simulated_time: acc.simulated_time,
                tokens_per_time: throughput,
                speedup,
                empirical_alpha: alpha,
                predicted_alpha_lower_bound: alpha_lower_bound(&spec, arm.strategy),
                predicted_factor: predicted_factor(&models, arm.strategy, &gammas, alpha),
                invocations: acc.invocations,
            });
            cell_index += 1;
        }
    }
    Ok(ExperimentReport {
        config_hash: config_hash(config),
        seed: config.seed,
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        cells,
    })
}

/// SpecEnsemble with a weighted ensemble across a lambda grid; reports
/// alpha and speedup per lambda (quality metrics are out of scope).
pub fn tradeoff_sweep(
    proposer: ModelSpec,
    target: ModelSpec,
    lambdas: &[f64],
    gamma: usize,
    sessions: usize,
    tokens_per_session: usize,
    prefix: Vec<u32>,
    seed: u64,
) -> Result<ExperimentReport> {
    if lambdas.iter().any(|&l| !(0.0..=1.0).contains(&l)) {
        return Err(Error::Config("lambda values must lie in [0, 1]".into()));
    }
    let config = ExperimentConfig {
        models: vec![proposer, target],
        ensemble: EnsembleSpec::weighted(0.5, 1.0)?,
        strategies: vec![StrategyCell {
            strategy: Strategy::SpecEnsemble,
            gammas: vec![gamma, 1],
            default_proposer_index: 0,
        }],
        sweep: Some(Sweep {
            parameter: SweepParameter::Lambda,
            values: lambdas.to_vec(),
        }),
        sessions,
        tokens_per_session,
        prefix,
        seed,
    };
    run_experiment(&config)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn join<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

/// One row per cell, RFC-4180, full precision.
pub fn write_report_csv(report: &ExperimentReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "strategy",
        "parameter",
        "value",
        "gammas",
        "sessions",
        "tokens",
        "simulated_time",
        "tokens_per_time",
        "speedup",
        "empirical_alpha",
        "predicted_alpha_lower_bound",
        "predicted_factor",
        "invocations",
    ])
    .map_err(csv_err)?;
    for cell in &report.cells {
        w.write_record([
            cell.strategy.name().to_string(),
            cell.parameter.clone().unwrap_or_default(),
            fmt_opt(cell.value),
            join(&cell.gammas),
            cell.sessions.to_string(),
            cell.tokens.to_string(),
            cell.simulated_time.to_string(),
            cell.tokens_per_time.to_string(),
            cell.speedup.to_string(),
            fmt_opt(cell.empirical_alpha),
            fmt_opt(cell.predicted_alpha_lower_bound),
            fmt_opt(cell.predicted_factor),
            join(&cell.invocations),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn write_report_json(report: &ExperimentReport, mut out: impl Write) -> Result<()> {
    out.write_all(serde_json::to_string_pretty(report)?.as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn save_report(
    report: &ExperimentReport,
    dir: impl AsRef<Path>,
    csv: bool,
    json: bool,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    if csv {
        write_report_csv(report, std::fs::File::create(dir.join("report.csv"))?)?;
    }
    if json {
        write_report_json(report, std::fs::File::create(dir.join("report.json"))?)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Validation suites
// ---------------------------------------------------------------------------

const MIN_STRATUM_SESSIONS: u64 = 1000;

#[derive(Debug, Clone, Serialize)]
pub struct StratumCheck {
    /// Realized emitted prefix defining the stratum.
    pub prefix: Vec<u32>,
    pub sessions: u64,
    pub tv: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PositionCheck {
    pub position: usize,
    pub strata: Vec<StratumCheck>,
    /// Largest per-stratum TV (diagnostic; dominated by sampling noise in
    /// small strata).
    pub max_tv: f64,
    /// TV between the stratum-weighted empirical mixture and the equally
    /// weighted exact conditional ensemble distributions. This is the
    /// gated statistic: systematic bias survives the pooling while
    /// per-stratum noise averages out.
    pub aggregate_tv: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DistributionalReport {
    pub sessions: usize,
    pub tolerance: f64,
    pub positions: Vec<PositionCheck>,
    pub pass: bool,
}

/// Runs `sessions` three-token sessions and compares empirical next-token
/// frequencies with the exact ensemble distribution, conditioning on the
/// realized prefix.
///
/// The ensemble distribution depends only on the last `max context_length`
/// tokens, so strata are keyed by that suffix. Strata below 1000 sessions
/// are dropped (conditioning on the most frequent prefixes); it is an
/// error when the kept strata cover less than 90% of sessions at a
/// position. The pass verdict gates on the per-position aggregate TV.
pub fn validate_distributional_correctness(
    models: &[ModelHandle],
    ensemble: &EnsembleSpec,
    cell: &StrategyCell,
    sessions: usize,
    tolerance: f64,
    prefix: &[u32],
    seed: u64,
) -> Result<DistributionalReport> {
    const POSITIONS: usize = 3;
    if models[0].vocab().size() > 64 {
        return Err(Error::Config(
            "distributional validation requires vocab <= 64".into(),
        ));
    }
    let config = DecodeConfig {
        strategy: cell.strategy,
        ensemble: ensemble.clone(),
        gammas: cell.gammas.clone(),
        max_tokens: POSITIONS,
        seed: 0,
        default_proposer_index: cell.default_proposer_index,
    };
    let vocab_size = models[0].vocab().size();
    let window = models
        .iter()
        .map(|m| m.context_length())
        .max()
        .unwrap_or(0);
    // counts[pos][conditioning suffix][token]
    let mut counts: Vec<BTreeMap<Vec<u32>, Vec<u64>>> =
        (0..POSITIONS).map(|_| BTreeMap::new()).collect();
    let mut session_config = config.clone();
    for session in 0..sessions {
        session_config.seed = derive_session_seed(seed, 0, session as u64);
        let mut rng = RandomSource::new(session_config.seed);
        let trace = decode_with_rng(models, &session_config, prefix, &mut rng)?;
        for (pos, &token) in trace.tokens.iter().enumerate().take(POSITIONS) {
            let mut context = prefix.to_vec();
            context.extend_from_slice(&trace.tokens[..pos]);
            let suffix = context[context.len().saturating_sub(window)..].to_vec();
            counts[pos]
                .entry(suffix)
                .or_insert_with(|| vec![0; vocab_size])[token as usize] += 1;
        }
    }
    let mut positions = Vec::new();
    let mut pass = true;
    for (pos, by_stratum) in counts.iter().enumerate() {
        let total: u64 = by_stratum.values().flatten().sum();
        let mut strata = Vec::new();
        let mut kept: u64 = 0;
        let mut empirical_mix = vec![0.0; vocab_size];
        let mut exact_mix = vec![0.0; vocab_size];
        for (suffix, tokens) in by_stratum {
            let n: u64 = tokens.iter().sum();
            if n < MIN_STRATUM_SESSIONS {
                continue;
            }
            kept += n;
            let rows = models
                .iter()
                .map(|m| m.logits_for(suffix))
                .collect::<Result<Vec<_>>>()?;
            let exact = ensemble.combine(&rows.iter().collect::<Vec<_>>())?;
            let empirical =
                Distribution::new(tokens.iter().map(|&c| c as f64).collect())?;
            for x in 0..vocab_size {
                empirical_mix[x] += n as f64 * empirical.probs()[x];
                exact_mix[x] += n as f64 * exact.probs()[x];
            }
            let tv = tv_distance(&empirical, &exact)?;
            strata.push(StratumCheck {
                prefix: suffix.clone(),
                sessions: n,
                tv,
            });
        }
        if kept * 10 < total * 9 {
            return Err(Error::InsufficientSamples(format!(
                "strata with >= {MIN_STRATUM_SESSIONS} sessions cover only \
                 {kept}/{total} sessions at position {pos}"
            )));
        }
        let aggregate_tv = empirical_mix
            .iter()
            .zip(&exact_mix)
            .map(|(e, x)| (e - x).abs() / kept as f64)
            .sum::<f64>();
        let max_tv = strata.iter().map(|s| s.tv).fold(0.0, f64::max);
        pass &= aggregate_tv <= tolerance;
        positions.push(PositionCheck {
            position: pos,
            strata,
            max_tv,
            aggregate_tv,
        });
    }
    Ok(DistributionalReport {
        sessions,
        tolerance,
        positions,
        pass,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AcceptanceGroup {
    pub origin_model: usize,
    pub context: Vec<u32>,
    pub events: u64,
    pub empirical: f64,
    pub exact: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AcceptanceReport {
    pub events: u64,
    pub tolerance: f64,
    pub groups: Vec<AcceptanceGroup>,
    pub max_deviation: f64,
    pub pass: bool,
}

/// Compares empirical acceptance frequency per exact (q, r) context with
/// the closed-form acceptance rate. The verdict gates only on groups large
/// enough to resolve the tolerance at three sigma (n >= 2.25/tolerance^2);
/// smaller groups are recorded as diagnostics.
pub fn validate_acceptance_identity(
    models: &[ModelHandle],
    ensemble: &EnsembleSpec,
    cell: &StrategyCell,
    min_events: u64,
    tolerance: f64,
    prefix: &[u32],
    seed: u64,
) -> Result<AcceptanceReport> {
    let config = DecodeConfig {
        strategy: cell.strategy,
        ensemble: ensemble.clone(),
        gammas: cell.gammas.clone(),
        max_tokens: 16,
        seed: 0,
        default_proposer_index: cell.default_proposer_index,
    };
    // The (q, r) pair is fully determined by the origin model and the last
    // max-context-length emitted tokens.
    let window = models
        .iter()
        .map(|m| m.context_length())
        .max()
        .unwrap_or(0);
    let mut groups: BTreeMap<(usize, Vec<u32>), (u64, u64)> = BTreeMap::new();
    let mut total: u64 = 0;
    let mut session_config = config.clone();
    let mut session: u64 = 0;
    while total < min_events {
        if session >= 10 * min_events {
            return Err(Error::InsufficientSamples(format!(
                "only {total} verification events after {session} sessions"
            )));
        }
        session_config.seed = derive_session_seed(seed, 1, session);
        let mut rng = RandomSource::new(session_config.seed);
        let trace = decode_with_rng(models, &session_config, prefix, &mut rng)?;
        for step in &trace.steps {
            for v in &step.verifications {
                let mut context = prefix.to_vec();
                context.extend_from_slice(&trace.tokens[..v.position]);
                let key_context: Vec<u32> = context
                    [context.len().saturating_sub(window)..]
                    .to_vec();
                let entry = groups.entry((v.origin_model, key_context)).or_insert((0, 0));
                entry.0 += 1;
                entry.1 += v.accepted as u64;
                total += 1;
            }
        }
        session += 1;
    }
    let min_gate = (2.25 / (tolerance * tolerance)).ceil() as u64;
    let mut out = Vec::new();
    let mut max_deviation: f64 = 0.0;
    let mut gated = 0u64;
    for ((origin, context), (events, accepted)) in groups {
        let rows = models
            .iter()
            .map(|m| m.logits_for(&context))
            .collect::<Result<Vec<_>>>()?;
        let q = ensemble.member_distribution(&rows[origin]);
        let r = ensemble.combine(&rows.iter().collect::<Vec<_>>())?;
        let exact = acceptance_rate_exact(&q, &r)?;
        let empirical = accepted as f64 / events as f64;
        let deviation = (empirical - exact).abs();
        if events >= min_gate {
            gated += 1;
            max_deviation = max_deviation.max(deviation);
        }
        out.push(AcceptanceGroup {
            origin_model: origin,
            context,
            events,
            empirical,
            exact,
            deviation,
        });
    }
    if gated == 0 {
        return Err(Error::InsufficientSamples(format!(
            "no context group reached the {min_gate} events needed to \
             resolve tolerance {tolerance}"
        )));
    }
    Ok(AcceptanceReport {
        events: total,
        tolerance,
        groups: out,
        max_deviation,
        pass: max_deviation <= tolerance,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NeverSlowerCheck {
    pub pair: usize,
    pub seed: u64,
    pub tokens: usize,
    pub alternate_time: f64,
    pub vanilla_time: f64,
    pub ok: bool,
    pub strictly_faster: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct NeverSlowerReport {
    pub checks: Vec<NeverSlowerCheck>,
    pub strict_fraction: f64,
    pub pass: bool,
}

/// Never-slower check at gamma = [1, 1]: the alternate proposal framework is
/// never slower than the vanilla ensemble for the same number of emitted
/// tokens; also records how often it is strictly faster.
pub fn validate_never_slower(
    model_pairs: &[(ModelHandle, ModelHandle)],
    seeds: &[u64],
    ensemble: &EnsembleSpec,
    tokens: usize,
) -> Result<NeverSlowerReport> {
    let mut checks = Vec::new();
    for (pair_index, (q, p)) in model_pairs.iter().enumerate() {
        for &seed in seeds {
            let models = [q.clone(), p.clone()];
            let mut config = DecodeConfig {
                strategy: Strategy::AlternateProposal,
                ensemble: ensemble.clone(),
                gammas: vec![1, 1],
                max_tokens: tokens,
                seed,
                default_proposer_index: 0,
            };
            let mut rng = RandomSource::new(seed);
            let alternate = decode_with_rng(&models, &config, &[], &mut rng)?;
            config.strategy = Strategy::VanillaEnsemble;
            let mut rng = RandomSource::new(seed);
            let vanilla = decode_with_rng(&models, &config, &[], &mut rng)?;
            debug_assert_eq!(alternate.tokens.len(), vanilla.tokens.len());
            let ok = alternate.simulated_time <= vanilla.simulated_time + 1e-9;
            checks.push(NeverSlowerCheck {
                pair: pair_index,
                seed,
                tokens: alternate.tokens.len(),
                alternate_time: alternate.simulated_time,
                vanilla_time: vanilla.simulated_time,
                ok,
                strictly_faster: alternate.simulated_time < vanilla.simulated_time - 1e-9,
            });
        }
    }
    let strict = checks.iter().filter(|c| c.strictly_faster).count();
    let pass = checks.iter().all(|c| c.ok);
    Ok(NeverSlowerReport {
        strict_fraction: strict as f64 / checks.len().max(1) as f64,
        checks,
        pass,
    })
}
