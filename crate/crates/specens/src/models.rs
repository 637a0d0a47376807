//! The [`LanguageModel`] capability and the desk-scale model zoo: seeded
//! random tables and add-δ n-gram models, with a line-diffable JSON file
//! format for table models.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution as _, Gamma};
use serde::{Deserialize, Serialize};

use crate::core::{normalize, Distribution, LogitsVec, RandomSource, Vocabulary, NORM_TOL};
use crate::error::{Error, Result};

/// Abstract token-level model: prefix in, logits out, plus a declared
/// per-invocation cost in simulated time units.
///
/// `logits_for` must be a pure function of the last `context_length` tokens
/// of the prefix; two calls with the same suffix return bitwise-identical
/// logits.
pub trait LanguageModel: Send + Sync {
    fn vocab(&self) -> &Vocabulary;
    fn context_length(&self) -> usize;
    fn cost(&self) -> f64;
    fn name(&self) -> &str;
    fn logits_for(&self, prefix: &[u32]) -> Result<LogitsVec>;

    /// The model's distribution at temperature 1.
    fn distribution_for(&self, prefix: &[u32]) -> Result<Distribution> {
        Ok(crate::core::apply_temperature(&self.logits_for(prefix)?, 1.0))
    }
}

/// Shared handle used wherever model sets are passed around.
pub type ModelHandle = Arc<dyn LanguageModel>;

fn check_prefix(vocab: &Vocabulary, prefix: &[u32]) -> Result<()> {
    for &token in prefix {
        if !vocab.contains(token) {
            return Err(Error::TokenOutOfRange { token, vocab_size: vocab.size() });
        }
    }
    Ok(())
}

/// Lookup-table model: maps each length-k context to a stored distribution,
/// falling back to a default row for unseen or too-short contexts.
#[derive(Debug, Clone)]
pub struct TableModel {
    vocab: Vocabulary,
    context_length: usize,
    cost: f64,
    name: String,
    table: BTreeMap<Vec<u32>, Distribution>,
    default: Distribution,
}

impl TableModel {
    pub fn new(
        vocab: Vocabulary,
        context_length: usize,
        cost: f64,
        name: impl Into<String>,
        table: BTreeMap<Vec<u32>, Distribution>,
        default: Distribution,
    ) -> Result<Self> {
        if cost <= 0.0 || !cost.is_finite() {
            return Err(Error::Config(format!("cost must be positive, got {cost}")));
        }
        if default.vocab_size() != vocab.size() {
            return Err(Error::VocabMismatch {
                expected: vocab.size(),
                found: default.vocab_size(),
            });
        }
        for (key, row) in &table {
            if key.len() != context_length {
                return Err(Error::Config(format!(
                    "context key {key:?} has length {} != context_length {context_length}",
                    key.len()
                )));
            }
            check_prefix(&vocab, key)?;
            if row.vocab_size() != vocab.size() {
                return Err(Error::VocabMismatch {
                    expected: vocab.size(),
                    found: row.vocab_size(),
                });
            }
        }
        Ok(Self { vocab, context_length, cost, name: name.into(), table, default })
    }

    fn row_for(&self, prefix: &[u32]) -> &Distribution {
        if prefix.len() < self.context_length {
            return &self.default;
        }
        let key = &prefix[prefix.len() - self.context_length..];
        self.table.get(key).unwrap_or(&self.default)
    }

    pub fn table(&self) -> &BTreeMap<Vec<u32>, Distribution> {
        &self.table
    }

    pub fn default_row(&self) -> &Distribution {
        &self.default
    }
}

impl LanguageModel for TableModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn context_length(&self) -> usize {
        self.context_length
    }

    fn cost(&self) -> f64 {
        self.cost
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn logits_for(&self, prefix: &[u32]) -> Result<LogitsVec> {
        check_prefix(&self.vocab, prefix)?;
        Ok(self.row_for(prefix).to_logits())
    }
}

/// Generates a table model whose rows are i.i.d. symmetric
/// Dirichlet(`concentration`) draws from the seeded stream (via per-entry
/// Gamma variates). Identical parameters give a bitwise-identical model.
pub fn random_table_model(
    seed: u64,
    vocab_size: usize,
    context_length: usize,
    concentration: f64,
    cost: f64,
    name: impl Into<String>,
) -> Result<TableModel> {
    let vocab = Vocabulary::new(vocab_size)?;
    if concentration <= 0.0 || !concentration.is_finite() {
        return Err(Error::Config(format!(
            "concentration must be positive, got {concentration}"
        )));
    }
    let contexts = (vocab_size as u64).checked_pow(context_length as u32).ok_or_else(|| {
        Error::Config(format!(
            "table too large: {vocab_size}^{context_length} contexts"
        ))
    })?;
    if contexts > 1_000_000 {
        return Err(Error::Config(format!(
            "table too large: {contexts} contexts (limit 1000000)"
        )));
    }

    let mut rng = RandomSource::new(seed);
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::Config(format!("bad concentration: {e}")))?;
    let draw_row = |rng: &mut RandomSource| -> Distribution {
        loop {
            let raw: Vec<f64> = (0..vocab_size).map(|_| gamma.sample(rng.rng())).collect();
            // At very small concentrations every Gamma draw can underflow
            // to zero; redraw rather than fail.
            if let Ok(d) = Distribution::new(raw) {
                return d;
            }
        }
    };

    let default = draw_row(&mut rng);
    let mut table = BTreeMap::new();
    // Contexts in ascending lexicographic order so the draw order, and
    // therefore the model, is a pure function of the seed.
    let mut key = vec![0u32; context_length];
    for _ in 0..contexts {
        table.insert(key.clone(), draw_row(&mut rng));
        for slot in key.iter_mut().rev() {
            *slot += 1;
            if (*slot as usize) < vocab_size {
                break;
            }
            *slot = 0;
        }
    }
    TableModel::new(vocab, context_length, cost, name, table, default)
}

/// Add-δ n-gram model; `order` is the number of trailing tokens that
/// condition the next one.
#[derive(Debug, Clone)]
pub struct NGramModel {
    vocab: Vocabulary,
    order: usize,
    delta: f64,
    cost: f64,
    name: String,
    counts: HashMap<Vec<u32>, Vec<u64>>,
}

impl NGramModel {
    /// `P(x | ctx) = (count(ctx,x)+δ) / (count(ctx)+δ·V)` — strictly
    /// positive everywhere.
    pub fn conditional(&self, context: &[u32], token: u32) -> f64 {
        let v = self.vocab.size() as f64;
        match self.counts.get(context) {
            Some(row) => {
                let total: u64 = row.iter().sum();
                (row[token as usize] as f64 + self.delta) / (total as f64 + self.delta * v)
            }
            None => 1.0 / v,
        }
    }

    /// Materializes the model as an equivalent [`TableModel`]: one row per
    /// seen context, uniform default row for unseen contexts (add-δ over
    /// zero counts is exactly uniform).
    pub fn to_table_model(&self) -> Result<TableModel> {
        let mut table = BTreeMap::new();
        for context in self.counts.keys() {
            let row = (0..self.vocab.size() as u32)
                .map(|x| self.conditional(context, x))
                .collect();
            table.insert(context.clone(), normalize(row)?);
        }
        TableModel::new(
            self.vocab.clone(),
            self.order,
            self.cost,
            self.name.clone(),
            table,
            Distribution::uniform(self.vocab.size()),
        )
    }
}

/// Trains an add-δ n-gram model from a token stream by exact sliding-window
/// counting.
pub fn train_ngram(
    stream: &[u32],
    order: usize,
    delta: f64,
    vocab: Vocabulary,
    cost: f64,
    name: impl Into<String>,
) -> Result<NGramModel> {
    if stream.len() < order {
        return Err(Error::EmptyStream { len: stream.len(), order });
    }
    if delta <= 0.0 || !delta.is_finite() {
        return Err(Error::Config(format!("delta must be positive, got {delta}")));
    }
    if cost <= 0.0 || !cost.is_finite() {
        return Err(Error::Config(format!("cost must be positive, got {cost}")));
    }
    check_prefix(&vocab, stream)?;
    let mut counts: HashMap<Vec<u32>, Vec<u64>> = HashMap::new();
    for window in stream.windows(order + 1) {
        let (context, next) = window.split_at(order);
        counts
            .entry(context.to_vec())
            .or_insert_with(|| vec![0; vocab.size()])[next[0] as usize] += 1;
    }
    Ok(NGramModel { vocab, order, delta, cost, name: name.into(), counts })
}

impl LanguageModel for NGramModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn context_length(&self) -> usize {
        self.order
    }

    fn cost(&self) -> f64 {
        self.cost
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn logits_for(&self, prefix: &[u32]) -> Result<LogitsVec> {
        check_prefix(&self.vocab, prefix)?;
        let context: &[u32] = if prefix.len() >= self.order {
            &prefix[prefix.len() - self.order..]
        } else {
            prefix
        };
        let probs: Vec<f64> = (0..self.vocab.size() as u32)
            .map(|token| self.conditional(context, token))
            .collect();
        Ok(Distribution::new(probs)?.to_logits())
    }
}

/// On-disk form of a table model: one JSON document with comma-joined
/// decimal token ids as table keys.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableModelFile {
    vocab_size: usize,
    context_length: usize,
    name: String,
    cost: f64,
    default: Vec<f64>,
    table: BTreeMap<String, Vec<f64>>,
}

fn format_key(key: &[u32]) -> String {
    key.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_key(key: &str, context_length: usize) -> Result<Vec<u32>> {
    let parts: Vec<&str> = if key.is_empty() { vec![] } else { key.split(',').collect() };
    if parts.len() != context_length {
        return Err(Error::Format(format!(
            "table key {key:?} has {} ids, expected context_length {context_length}",
            parts.len()
        )));
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<u32>()
                .map_err(|e| Error::Format(format!("bad token id {p:?} in key {key:?}: {e}")))
        })
        .collect()
}

/// Validates a stored row: rows off by more than 1e−6 are rejected, rows
/// within tolerance are renormalized.
fn load_row(raw: &[f64], vocab_size: usize, what: &str) -> Result<Distribution> {
    if raw.len() != vocab_size {
        return Err(Error::Format(format!(
            "{what}: row has {} entries, expected vocab_size {vocab_size}",
            raw.len()
        )));
    }
    if let Some(&bad) = raw.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Format(format!("{what}: invalid probability {bad}")));
    }
    let sum: f64 = raw.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Invariant(format!(
            "{what}: row sums to {sum}, off by more than 1e-6"
        )));
    }
    if (sum - 1.0).abs() <= NORM_TOL {
        // Already normalized; keep the stored values bit-for-bit.
        Ok(Distribution::from_normalized(raw.to_vec())?)
    } else {
        Ok(normalize(raw.to_vec())?)
    }
}

pub fn save_table_model(model: &TableModel, path: impl AsRef<Path>) -> Result<()> {
    let file = TableModelFile {
        vocab_size: model.vocab.size(),
        context_length: model.context_length,
        name: model.name.clone(),
        cost: model.cost,
        default: model.default.probs().to_vec(),
        table: model
            .table
            .iter()
            .map(|(k, v)| (format_key(k), v.probs().to_vec()))
            .collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_table_model(path: impl AsRef<Path>) -> Result<TableModel> {
    let text = std::fs::read_to_string(&path)?;
    let file: TableModelFile =
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let vocab = Vocabulary::new(file.vocab_size)
        .map_err(|e| Error::Format(format!("bad vocab_size: {e}")))?;
    let default = load_row(&file.default, file.vocab_size, "default row")?;
    let mut table = BTreeMap::new();
    for (key, raw) in &file.table {
        let parsed = parse_key(key, file.context_length)?;
        check_prefix(&vocab, &parsed).map_err(|e| Error::Format(e.to_string()))?;
        let row = load_row(raw, file.vocab_size, &format!("row {key:?}"))?;
        table.insert(parsed, row);
    }
    TableModel::new(vocab, file.context_length, file.cost, file.name, table, default)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::NORM_TOL;
    use crate::core::{apply_temperature, sample, tv_distance};
    use proptest::prelude::*;

    fn context_free_table(probs: Vec<f64>, cost: f64, name: &str) -> TableModel {
        let default = Distribution::new(probs).unwrap();
        TableModel::new(
            Vocabulary::new(default.vocab_size()).unwrap(),
            0,
            cost,
            name,
            BTreeMap::new(),
            default,
        )
        .unwrap()
    }

    #[test]
    fn context_free_table_logits() {
        let model = context_free_table(vec![0.3, 0.7], 1.0, "m");
        let logits = model.logits_for(&[1, 0, 1]).unwrap();
        assert!((logits.logits()[0] - 0.3f64.ln()).abs() < 1e-12);
        assert!((logits.logits()[1] - 0.7f64.ln()).abs() < 1e-12);
        let d = model.distribution_for(&[]).unwrap();
        assert!((d.get(0) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn logits_round_trip_matches_distribution() {
        let model = random_table_model(5, 8, 1, 1.0, 1.0, "m").unwrap();
        let d = model.distribution_for(&[3]).unwrap();
        let via_logits = apply_temperature(&model.logits_for(&[3]).unwrap(), 1.0);
        assert!(tv_distance(&d, &via_logits).unwrap() <= 1e-9);
    }

    #[test]
    fn token_out_of_range() {
        let model = context_free_table(vec![0.5, 0.5], 1.0, "m");
        assert!(matches!(
            model.logits_for(&[2]),
            Err(Error::TokenOutOfRange { token: 2, .. })
        ));
    }

    #[test]
    fn ngram_hand_counted_oracle() {
        // Stream "0 1 0 1 0 1", order 2: windows (0,1,0) x2, (1,0,1) x2.
        let vocab = Vocabulary::new(2).unwrap();
        let model = train_ngram(&[0, 1, 0, 1, 0, 1], 2, 1.0, vocab, 1.0, "bigram").unwrap();
        // Context (1,0): count(1)=2, total=2, V=2 -> P(1)=(2+1)/(2+2)=0.75.
        let d = model.distribution_for(&[1, 0]).unwrap();
        assert!((d.get(1) - 0.75).abs() < 1e-12);
        assert!((d.get(0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ngram_unigram_context_hand_count() {
        // "0 0 0 0", order 1: three bigrams "0 0".
        let vocab = Vocabulary::new(2).unwrap();
        let model = train_ngram(&[0, 0, 0, 0], 1, 1.0, vocab, 1.0, "m").unwrap();
        assert!((model.conditional(&[0], 0) - 0.8).abs() < 1e-12);
        // Order-1 model queried with a long prefix uses only the last token.
        let long = model.logits_for(&[1, 1, 1, 1, 0]).unwrap();
        let short = model.logits_for(&[0]).unwrap();
        assert_eq!(long, short);
    }

    #[test]
    fn ngram_large_delta_approaches_uniform() {
        let vocab = Vocabulary::new(4).unwrap();
        let model = train_ngram(&[0, 1, 2, 3, 0, 1], 1, 1e9, vocab, 1.0, "m").unwrap();
        let d = model.distribution_for(&[0]).unwrap();
        assert!(tv_distance(&d, &Distribution::uniform(4)).unwrap() < 1e-6);
    }

    #[test]
    fn ngram_rejects_short_stream() {
        let vocab = Vocabulary::new(2).unwrap();
        assert!(matches!(
            train_ngram(&[0], 2, 1.0, vocab, 1.0, "m"),
            Err(Error::EmptyStream { .. })
        ));
    }

    #[test]
    fn ngram_rows_are_positive_and_normalized() {
        let vocab = Vocabulary::new(3).unwrap();
        let model = train_ngram(&[0, 1, 2, 1, 0, 2, 2], 1, 0.5, vocab, 1.0, "m").unwrap();
        for ctx in 0..3 {
            let d = model.distribution_for(&[ctx]).unwrap();
            assert!(d.probs().iter().all(|&p| p > 0.0));
            assert!((d.probs().iter().sum::<f64>() - 1.0).abs() <= NORM_TOL);
        }
    }

    #[test]
    fn random_table_deterministic_in_seed() {
        let a = random_table_model(1, 6, 1, 1.0, 1.0, "a").unwrap();
        let b = random_table_model(1, 6, 1, 1.0, 1.0, "b").unwrap();
        assert_eq!(a.table(), b.table());
        assert_eq!(a.default_row(), b.default_row());
        let c = random_table_model(2, 6, 1, 1.0, 1.0, "c").unwrap();
        assert_ne!(a.table(), c.table());
    }

    #[test]
    fn random_table_high_concentration_near_uniform() {
        let model = random_table_model(3, 8, 0, 1e6, 1.0, "m").unwrap();
        let uniform = Distribution::uniform(8);
        assert!(tv_distance(model.default_row(), &uniform).unwrap() < 0.01);
    }

    #[test]
    fn save_load_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = random_table_model(11, 8, 2, 0.7, 0.25, "fixture").unwrap();
        save_table_model(&model, &path).unwrap();
        let loaded = load_table_model(&path).unwrap();
        assert_eq!(loaded.name(), "fixture");
        assert_eq!(loaded.cost(), 0.25);
        let mut rng = RandomSource::new(0);
        for _ in 0..100 {
            let len = (rng.next_uniform() * 4.0) as usize;
            let prefix: Vec<u32> =
                (0..len).map(|_| (rng.next_uniform() * 8.0) as u32).collect();
            assert_eq!(
                model.logits_for(&prefix).unwrap(),
                loaded.logits_for(&prefix).unwrap()
            );
        }
    }

    #[test]
    fn load_rejects_bad_row_sum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"vocab_size":2,"context_length":0,"name":"m","cost":1.0,
                "default":[0.3,0.2],"table":{}}"#,
        )
        .unwrap();
        assert!(matches!(load_table_model(&path), Err(Error::Invariant(_))));
    }

    #[test]
    fn load_rejects_bad_key_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"vocab_size":2,"context_length":2,"name":"m","cost":1.0,
                "default":[0.5,0.5],"table":{"0":[0.5,0.5]}}"#,
        )
        .unwrap();
        assert!(matches!(load_table_model(&path), Err(Error::Format(_))));
    }

    #[test]
    fn load_renormalizes_rows_within_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("close.json");
        std::fs::write(
            &path,
            r#"{"vocab_size":2,"context_length":0,"name":"m","cost":1.0,
                "default":[0.5000001,0.5],"table":{}}"#,
        )
        .unwrap();
        let model = load_table_model(&path).unwrap();
        assert!((model.default_row().probs().iter().sum::<f64>() - 1.0).abs() <= NORM_TOL);
    }

    #[test]
    fn table_sampling_follows_rows() {
        let model = random_table_model(17, 6, 1, 1.0, 1.0, "m").unwrap();
        let d = model.distribution_for(&[2]).unwrap();
        let mut rng = RandomSource::new(4);
        let mut counts = vec![0u64; 6];
        for _ in 0..50_000 {
            counts[sample(&d, &mut rng) as usize] += 1;
        }
        let empirical = Distribution::new(counts.iter().map(|&c| c as f64).collect()).unwrap();
        assert!(tv_distance(&d, &empirical).unwrap() < 0.03);
    }

    proptest! {
        #[test]
        fn context_length_purity(
            seed in 0u64..50,
            early in prop::collection::vec(0u32..6, 0..5),
            suffix in prop::collection::vec(0u32..6, 1..3),
        ) {
            let model = random_table_model(seed, 6, 1, 1.0, 1.0, "m").unwrap();
            let mut long = early.clone();
            long.extend_from_slice(&suffix);
            let tail = &long[long.len() - 1..];
            prop_assert_eq!(
                model.logits_for(&long).unwrap(),
                model.logits_for(tail).unwrap()
            );
            // Purity: repeated calls are bitwise identical.
            prop_assert_eq!(
                model.logits_for(&long).unwrap(),
                model.logits_for(&long).unwrap()
            );
        }
    }
}
