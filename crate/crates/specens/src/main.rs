//! Command-line front door: generate fixture models, run decodes, run
//! experiments and validation suites, print formula values.
//!
//! Exit codes: 0 success, 1 validation failure, 2 usage/config error,
//! 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use specens::analysis::{
    expected_accepted_tokens, improvement_factor_alternate, improvement_factor_se,
    weighted_alpha_lower_bound,
};
use specens::core::RandomSource;
use specens::decoding::{decode_with_rng, DecodeConfig, Strategy};
use specens::harness::{
    parse_corpus, run_experiment, save_report, validate_acceptance_identity,
    validate_distributional_correctness, validate_never_slower, ExperimentConfig,
    StrategyCell,
};
use specens::models::{
    load_table_model, random_table_model, save_table_model, train_ngram, ModelHandle,
};
use specens::{EnsembleSpec, Error, LanguageModel, Vocabulary};

#[derive(Parser)]
#[command(
    name = "specens",
    version,
    about = "Speculative-ensemble decoding engine and simulated-cost experiment harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a model file (seeded random table or corpus-trained n-gram).
    GenModel(GenModelArgs),
    /// Run one decode session and print the emitted token ids.
    Decode(DecodeArgs),
    /// Run a config-driven experiment and write CSV/JSON reports.
    Experiment(ExperimentArgs),
    /// Run the statistical validation suites.
    Validate(ValidateArgs),
    /// Evaluate the closed-form speed formulas.
    Formulas(FormulasArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Table,
    Ngram,
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long, value_enum)]
    kind: ModelKind,
    /// Table models: generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Vocabulary size.
    #[arg(long)]
    vocab: usize,
    /// Table models: context length (conditioning window).
    #[arg(long)]
    context: Option<usize>,
    /// Table models: Dirichlet concentration of the generated rows.
    #[arg(long, default_value_t = 1.0)]
    concentration: f64,
    /// N-gram models: path to a corpus of comma/whitespace-separated ids.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// N-gram models: context length (order).
    #[arg(long)]
    order: Option<usize>,
    /// N-gram models: add-delta smoothing constant.
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    /// Simulated cost per invocation.
    #[arg(long, default_value_t = 1.0)]
    cost: f64,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EnsembleArg {
    Weighted,
    Contrastive,
    General,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    strategy: Strategy,
    /// Comma-separated model file paths, index 0 first.
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "weighted")]
    ensemble: EnsembleArg,
    /// Weighted ensembles: weight of model 0.
    #[arg(long)]
    lambda: Option<f64>,
    /// Contrastive ensembles: subtraction strength.
    #[arg(long)]
    mu: Option<f64>,
    /// General weighted ensembles: comma-separated per-model weights.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Comma-separated proposal lengths, one per model.
    #[arg(long, value_delimiter = ',', required = true)]
    gammas: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated prompt token ids.
    #[arg(long, default_value = "")]
    prefix: String,
    /// Model index that proposes first.
    #[arg(long, default_value_t = 0)]
    default_proposer: usize,
    /// Write the full decode trace as JSON to this path.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
    Both,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    format: ReportFormat,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Distribution,
    Acceptance,
    NeverSlower,
    Formulas,
    All,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: Suite,
    /// Sessions for the distributional suite.
    #[arg(long, default_value_t = 200_000)]
    sessions: usize,
    /// Verification events for the acceptance suite.
    #[arg(long, default_value_t = 100_000)]
    events: u64,
    #[arg(long, default_value_t = 0.02)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FormulasArgs {
    /// Acceptance rate in [0, 1].
    #[arg(long)]
    alpha: f64,
    /// Proposal length (single-proposer factor and expected accepted tokens).
    #[arg(long, default_value_t = 1)]
    gamma: usize,
    /// Proposal length of the default proposer (alternating factor).
    #[arg(long)]
    gamma_q: Option<usize>,
    /// Proposal length of the swapped proposer (alternating factor).
    #[arg(long)]
    gamma_p: Option<usize>,
    /// Cost coefficient: proposer cost / verifier cost.
    #[arg(long)]
    c: Option<f64>,
    /// Weight of the proposer in a weighted ensemble (acceptance bound).
    #[arg(long)]
    lambda: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenModel(args) => gen_model(args),
        Command::Decode(args) => run_decode(args),
        Command::Experiment(args) => run_experiment_cmd(args),
        Command::Validate(args) => run_validate(args),
        Command::Formulas(args) => run_formulas(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::Weight(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn gen_model(args: GenModelArgs) -> Result<ExitCode, Error> {
    let model = match args.kind {
        ModelKind::Table => {
            if args.corpus.is_some() || args.order.is_some() {
                return Err(usage("--corpus/--order only apply to --kind ngram"));
            }
            let seed = args.seed.ok_or_else(|| usage("--seed required for tables"))?;
            let context = args
                .context
                .ok_or_else(|| usage("--context required for tables"))?;
            let name = args.name.unwrap_or_else(|| format!("table-{seed}"));
            random_table_model(seed, args.vocab, context, args.concentration, args.cost, &name)?
        }
        ModelKind::Ngram => {
            if args.seed.is_some() || args.context.is_some() {
                return Err(usage("--seed/--context only apply to --kind table"));
            }
            let corpus = args
                .corpus
                .ok_or_else(|| usage("--corpus required for n-grams"))?;
            let order = args.order.ok_or_else(|| usage("--order required for n-grams"))?;
            let stream = parse_corpus(&std::fs::read_to_string(corpus)?)?;
            let vocab = Vocabulary::new(args.vocab)?;
            let name = args.name.unwrap_or_else(|| format!("ngram-{order}"));
            train_ngram(&stream, order, args.delta, vocab, args.cost, name)?
                .to_table_model()?
        }
    };
    save_table_model(&model, &args.out)?;
    println!(
        "{}: vocab {}, context {}, {} table rows, cost {}",
        model.name(),
        model.vocab().size(),
        model.context_length(),
        model.table().len(),
        model.cost()
    );
    Ok(ExitCode::SUCCESS)
}

fn build_ensemble(args: &DecodeArgs, model_count: usize) -> Result<EnsembleSpec, Error> {
    match args.ensemble {
        EnsembleArg::Weighted => {
            if args.mu.is_some() || args.weights.is_some() {
                return Err(usage("--mu/--weights conflict with --ensemble weighted"));
            }
            EnsembleSpec::weighted(args.lambda.unwrap_or(0.5), args.temperature)
        }
        EnsembleArg::Contrastive => {
            if args.lambda.is_some() || args.weights.is_some() {
                return Err(usage(
                    "--lambda/--weights conflict with --ensemble contrastive",
                ));
            }
            EnsembleSpec::contrastive(args.mu.unwrap_or(0.1), args.temperature)
        }
        EnsembleArg::General => {
            if args.lambda.is_some() || args.mu.is_some() {
                return Err(usage("--lambda/--mu conflict with --ensemble general"));
            }
            let weights = args
                .weights
                .clone()
                .unwrap_or_else(|| vec![1.0 / model_count as f64; model_count]);
            EnsembleSpec::general_weighted(weights, args.temperature)
        }
    }
}

fn run_decode(args: DecodeArgs) -> Result<ExitCode, Error> {
    let models: Vec<ModelHandle> = args
        .models
        .iter()
        .map(|path| Ok(Arc::new(load_table_model(path)?) as ModelHandle))
        .collect::<Result<_, Error>>()?;
    let prefix = parse_corpus(&args.prefix)?;
    let config = DecodeConfig {
        strategy: args.strategy,
        ensemble: build_ensemble(&args, models.len())?,
        gammas: args.gammas.clone(),
        max_tokens: args.max_tokens,
        seed: args.seed,
        default_proposer_index: args.default_proposer,
    };
    let mut rng = RandomSource::new(config.seed);
    let trace = decode_with_rng(&models, &config, &prefix, &mut rng)?;
    println!(
        "{}",
        trace
            .tokens
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    );
    if let Some(path) = &args.trace {
        std::fs::write(path, serde_json::to_string_pretty(&trace)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn run_experiment_cmd(args: ExperimentArgs) -> Result<ExitCode, Error> {
    let text = std::fs::read_to_string(&args.config)?;
    let config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| usage(format!("bad config: {e}")))?;
    let report = run_experiment(&config)?;
    save_report(
        &report,
        &args.out_dir,
        args.format != ReportFormat::Json,
        args.format != ReportFormat::Csv,
    )?;
    println!(
        "{:<20} {:<18} {:>8} {:>8}",
        "strategy", "cell", "speedup", "alpha"
    );
    for cell in &report.cells {
        let label = match (&cell.parameter, cell.value) {
            (Some(p), Some(v)) => format!("{p}={v}"),
            _ => "-".to_string(),
        };
        let alpha = cell
            .empirical_alpha
            .map(|a| format!("{a:.2}"))
            .unwrap_or_else(|| "-".to_string());
        println!(
            "{:<20} {:<18} {:>8.2} {:>8}",
            cell.strategy.name(),
            label,
            cell.speedup,
            alpha
        );
    }
    println!("reports written to {}", args.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

/// Stock two-model fixture used by the validation suites.
fn stock_models() -> Result<Vec<ModelHandle>, Error> {
    Ok(vec![
        Arc::new(random_table_model(101, 16, 1, 1.0, 0.2, "stock-q")?),
        Arc::new(random_table_model(202, 16, 1, 1.0, 1.0, "stock-p")?),
    ])
}

fn suite_distribution(args: &ValidateArgs) -> Result<(bool, serde_json::Value), Error> {
    let models = stock_models()?;
    let ensemble = EnsembleSpec::weighted(0.5, 1.0)?;
    let mut cells = Vec::new();
    let mut pass = true;
    for (strategy, gammas) in [
        (Strategy::VanillaEnsemble, vec![1, 1]),
        (Strategy::SpecEnsemble, vec![2, 1]),
        (Strategy::AlternateProposal, vec![2, 1]),
        (Strategy::NModelSe, vec![2, 1]),
    ] {
        let report = validate_distributional_correctness(
            &models,
            &ensemble,
            &StrategyCell {
                strategy,
                gammas,
                default_proposer_index: 0,
            },
            args.sessions,
            args.tolerance,
            &[],
            args.seed,
        )?;
        pass &= report.pass;
        cells.push(json!({
            "strategy": strategy.name(),
            "pass": report.pass,
            "positions": report.positions.iter().map(|p| json!({
                "position": p.position,
                "aggregate_tv": p.aggregate_tv,
                "strata": p.strata.len(),
            })).collect::<Vec<_>>(),
        }));
    }
    Ok((pass, json!({ "pass": pass, "cells": cells })))
}

fn suite_acceptance(args: &ValidateArgs) -> Result<(bool, serde_json::Value), Error> {
    let models = stock_models()?;
    let ensemble = EnsembleSpec::weighted(0.5, 1.0)?;
    let report = validate_acceptance_identity(
        &models,
        &ensemble,
        &StrategyCell {
            strategy: Strategy::SpecEnsemble,
            gammas: vec![2, 1],
            default_proposer_index: 0,
        },
        // Enough events that every common context group clears the
        // three-sigma gating threshold at the +/-0.01 tolerance.
        args.events.max(800_000),
        args.tolerance.min(0.01),
        &[],
        args.seed,
    )?;
    Ok((
        report.pass,
        json!({
            "pass": report.pass,
            "events": report.events,
            "groups": report.groups.len(),
            "max_deviation": report.max_deviation,
        }),
    ))
}

fn suite_never_slower(args: &ValidateArgs) -> Result<(bool, serde_json::Value), Error> {
    let ensemble = EnsembleSpec::weighted(0.5, 1.0)?;
    let pairs: Vec<(ModelHandle, ModelHandle)> = (0..50)
        .map(|i| {
            Ok((
                Arc::new(random_table_model(i, 8, 1, 1.0, 0.4, "q")?) as ModelHandle,
                Arc::new(random_table_model(i + 1000, 8, 1, 1.0, 1.0, "p")?) as ModelHandle,
            ))
        })
        .collect::<Result<_, Error>>()?;
    let seeds: Vec<u64> = (args.seed..args.seed + 10).collect();
    let report = validate_never_slower(&pairs, &seeds, &ensemble, 64)?;
    let pass = report.pass && report.strict_fraction > 0.95;
    Ok((
        pass,
        json!({
            "pass": pass,
            "checks": report.checks.len(),
            "violations": report.checks.iter().filter(|c| !c.ok).count(),
            "strict_fraction": report.strict_fraction,
        }),
    ))
}

fn suite_formulas() -> Result<(bool, serde_json::Value), Error> {
    let mut max_unit_dev: f64 = 0.0;
    let mut min_alternate: f64 = f64::INFINITY;
    for i in 0..100 {
        let alpha = i as f64 / 99.0;
        for j in 0..100 {
            let c = 0.01 + j as f64 * 0.02;
            max_unit_dev = max_unit_dev.max((improvement_factor_se(alpha, 1, c) - 1.0).abs());
            min_alternate = min_alternate.min(improvement_factor_alternate(alpha, 1, 1, c));
        }
    }
    // Expected emitted tokens per cycle against direct enumeration of the
    // accept/reject tree: rejection at position k emits the k accepted
    // drafts plus the resampled token, full acceptance emits gamma.
    let mut max_tree_dev: f64 = 0.0;
    for i in 0..=100 {
        let alpha = i as f64 / 100.0;
        for gamma in 1..=6usize {
            let mut expected = gamma as f64 * alpha.powi(gamma as i32);
            for k in 0..gamma {
                expected += (k + 1) as f64 * alpha.powi(k as i32) * (1.0 - alpha);
            }
            max_tree_dev =
                max_tree_dev.max((expected_accepted_tokens(alpha, gamma) - expected).abs());
        }
    }
    let mut max_bound_dev: f64 = 0.0;
    for i in 0..=100 {
        let lambda = i as f64 / 100.0;
        max_bound_dev = max_bound_dev.max((weighted_alpha_lower_bound(lambda) - lambda).abs());
    }
    let pass = max_unit_dev <= 1e-12
        && min_alternate >= 1.0 - 1e-12
        && max_tree_dev <= 1e-12
        && max_bound_dev == 0.0;
    Ok((
        pass,
        json!({
            "pass": pass,
            "se_factor_gamma1_max_deviation_from_1": max_unit_dev,
            "alternate_factor_gamma11_min": min_alternate,
            "expected_tokens_max_deviation_from_enumeration": max_tree_dev,
            "alpha_lower_bound_max_deviation": max_bound_dev,
        }),
    ))
}

fn run_validate(args: ValidateArgs) -> Result<ExitCode, Error> {
    let mut verdict = serde_json::Map::new();
    let mut pass = true;
    let wanted = |s: Suite| args.suite == Suite::All || args.suite == s;
    if wanted(Suite::Formulas) {
        let (ok, value) = suite_formulas()?;
        pass &= ok;
        verdict.insert("formulas".into(), value);
    }
    if wanted(Suite::Distribution) {
        let (ok, value) = suite_distribution(&args)?;
        pass &= ok;
        verdict.insert("distribution".into(), value);
    }
    if wanted(Suite::Acceptance) {
        let (ok, value) = suite_acceptance(&args)?;
        pass &= ok;
        verdict.insert("acceptance".into(), value);
    }
    if wanted(Suite::NeverSlower) {
        let (ok, value) = suite_never_slower(&args)?;
        pass &= ok;
        verdict.insert("never_slower".into(), value);
    }
    verdict.insert("pass".into(), json!(pass));
    println!("{}", serde_json::to_string_pretty(&verdict)?);
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn run_formulas(args: FormulasArgs) -> Result<ExitCode, Error> {
    if !(0.0..=1.0).contains(&args.alpha) {
        return Err(usage("--alpha must lie in [0, 1]"));
    }
    if args.gamma == 0 {
        return Err(usage("--gamma must be >= 1"));
    }
    println!(
        "expected_accepted_tokens(alpha={}, gamma={}) = {}",
        args.alpha,
        args.gamma,
        expected_accepted_tokens(args.alpha, args.gamma)
    );
    if let Some(c) = args.c {
        if c <= 0.0 {
            return Err(usage("--c must be positive"));
        }
        println!(
            "se_improvement_factor(alpha={}, gamma={}, c={}) = {}",
            args.alpha,
            args.gamma,
            c,
            improvement_factor_se(args.alpha, args.gamma, c)
        );
        if let (Some(gq), Some(gp)) = (args.gamma_q, args.gamma_p) {
            if gq == 0 || gp == 0 {
                return Err(usage("--gamma-q/--gamma-p must be >= 1"));
            }
            println!(
                "alternate_improvement_factor(alpha={}, gamma_q={gq}, gamma_p={gp}, c={}) = {}",
                args.alpha,
                c,
                improvement_factor_alternate(args.alpha, gq, gp, c)
            );
        }
    }
    if let Some(lambda) = args.lambda {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(usage("--lambda must lie in [0, 1]"));
        }
        println!(
            "alpha_lower_bound(lambda={lambda}) = {}",
            weighted_alpha_lower_bound(lambda)
        );
    }
    Ok(ExitCode::SUCCESS)
}
