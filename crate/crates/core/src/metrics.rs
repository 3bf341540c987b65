//! Key scoring, multi-variant experiments and report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{recover, AttackConfig, AttackReport};
use crate::bnn::{correct_count, BnnModel};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::transform::{derive_seed, encrypt_model, KeySet, PufKey};

/// Fraction of positions where the two keys agree.
pub fn key_bit_match(true_key: &PufKey, recovered: &PufKey) -> Result<f64> {
    if true_key.len() != recovered.len() {
        return Err(Error::Dimension(format!(
            "key lengths differ: {} vs {}",
            true_key.len(),
            recovered.len()
        )));
    }
    if true_key.is_empty() {
        return Err(Error::InvalidArgument("cannot score empty keys".into()));
    }
    let same = true_key
        .bits()
        .iter()
        .zip(recovered.bits())
        .filter(|(a, b)| a == b)
        .count();
    Ok(same as f64 / true_key.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub variant_count: usize,
    pub attack: AttackConfig,
    pub seed_base: u64,
    /// One key for all hidden layers of a variant, or one per layer.
    pub shared_keys: bool,
    /// When set, the summary so far is written here after every variant.
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(variant_count: usize, attack: AttackConfig, seed_base: u64) -> Self {
        Self {
            variant_count,
            attack,
            seed_base,
            shared_keys: true,
            output: None,
        }
    }

    pub fn variant_seed(&self, v: usize) -> u64 {
        derive_seed(self.seed_base, v as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub variant: usize,
    pub key_seed: u64,
    pub report: Option<AttackReport>,
    /// Encrypted and recovered accuracy on the full test split, if given.
    pub test_encrypted: Option<f64>,
    pub test_recovered: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub completed: usize,
    pub failed: usize,
    pub bit_match: Option<Stat>,
    pub encrypted_accuracy: Option<Stat>,
    pub recovered_accuracy: Option<Stat>,
    pub test_encrypted_accuracy: Option<Stat>,
    pub test_recovered_accuracy: Option<Stat>,
    pub wall_clock_s: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub original_accuracy: f64,
    pub original_test_accuracy: Option<f64>,
    pub variants: Vec<VariantRecord>,
    pub aggregates: Aggregates,
}

impl ExperimentSummary {
    /// Recomputes the aggregates from the variant records.
    pub fn recompute(&mut self) {
        let ok: Vec<&AttackReport> = self.variants.iter().filter_map(|v| v.report.as_ref()).collect();
        let collect = |f: &dyn Fn(&AttackReport) -> Option<f64>| ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
        let tests = |f: &dyn Fn(&VariantRecord) -> Option<f64>| self.variants.iter().filter_map(f).collect::<Vec<_>>();
        self.aggregates = Aggregates {
            completed: ok.len(),
            failed: self.variants.len() - ok.len(),
            bit_match: Stat::of(&collect(&|r| r.mean_bit_match)),
            encrypted_accuracy: Stat::of(&collect(&|r| Some(r.accuracy.encrypted))),
            recovered_accuracy: Stat::of(&collect(&|r| Some(r.accuracy.recovered))),
            test_encrypted_accuracy: Stat::of(&tests(&|v| v.test_encrypted)),
            test_recovered_accuracy: Stat::of(&tests(&|v| v.test_recovered)),
            wall_clock_s: Stat::of(&collect(&|r| Some(r.wall_clock_s))),
        };
    }
}

fn run_variant(
    model: &BnnModel,
    attack_set: &LabeledDataset,
    test_set: Option<&LabeledDataset>,
    cfg: &ExperimentConfig,
    v: usize,
) -> Result<VariantRecord> {
    let key_seed = cfg.variant_seed(v);
    let keys = KeySet::generate_for(model, key_seed, cfg.shared_keys)?;
    let encrypted = encrypt_model(model, &keys)?;
    let mut attack = cfg.attack.clone();
    attack.seed = key_seed;
    let report = recover(&encrypted, attack_set, &attack, Some(&keys))?;
    let (test_encrypted, test_recovered) = match test_set {
        Some(test) => {
            let n = test.len() as f64;
            let recovered = encrypt_model(&encrypted, &report.recovered_keys()?)?;
            (
                Some(correct_count(&encrypted, test)? as f64 / n),
                Some(correct_count(&recovered, test)? as f64 / n),
            )
        }
        None => (None, None),
    };
    Ok(VariantRecord {
        variant: v,
        key_seed,
        report: Some(report),
        test_encrypted,
        test_recovered,
        error: None,
    })
}

/// Encrypts `model` under `variant_count` derived keys and attacks each.
///
/// A failing variant is recorded with its error and the run continues.
pub fn run_experiment(
    model: &BnnModel,
    attack_set: &LabeledDataset,
    test_set: Option<&LabeledDataset>,
    cfg: &ExperimentConfig,
) -> Result<ExperimentSummary> {
    if cfg.variant_count == 0 {
        return Err(Error::InvalidArgument("variant count must be at least 1".into()));
    }
    cfg.attack.validate(model)?;
    if attack_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let original_accuracy = correct_count(model, attack_set)? as f64 / attack_set.len() as f64;
    let original_test_accuracy = match test_set {
        Some(t) if !t.is_empty() => Some(correct_count(model, t)? as f64 / t.len() as f64),
        Some(_) => return Err(Error::EmptyDataset),
        None => None,
    };
    let mut summary = ExperimentSummary {
        config: cfg.clone(),
        original_accuracy,
        original_test_accuracy,
        variants: Vec::with_capacity(cfg.variant_count),
        aggregates: Aggregates::default(),
    };
    for v in 0..cfg.variant_count {
        let record = run_variant(model, attack_set, test_set, cfg, v).unwrap_or_else(|e| {
            log::warn!("variant {v} failed: {e}");
            VariantRecord {
                variant: v,
                key_seed: cfg.variant_seed(v),
                report: None,
                test_encrypted: None,
                test_recovered: None,
                error: Some(e.to_string()),
            }
        });
        summary.variants.push(record);
        summary.recompute();
        if let Some(path) = &cfg.output {
            emit_report(&summary, ReportFormat::Json, path)?;
        }
    }
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Column names of the per-variant CSV. `bit_match_layers` holds the
/// per-layer matches separated by `;`.
pub const CSV_HEADER: &str = "variant,key_seed,status,method,G,passes,samples,\
bit_match_mean,bit_match_layers,encrypted_accuracy,recovered_accuracy,\
original_accuracy,test_encrypted_accuracy,test_recovered_accuracy,\
evaluations,wall_clock_s";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_csv(summary: &ExperimentSummary) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for rec in &summary.variants {
        match &rec.report {
            Some(r) => {
                let layers: Vec<String> = r.per_layer.iter().map(|l| opt(l.bit_match)).collect();
                let method = serde_json::to_value(r.method)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},ok,{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    rec.variant,
                    rec.key_seed,
                    method,
                    r.block_size,
                    r.passes,
                    r.samples,
                    opt(r.mean_bit_match),
                    layers.join(";"),
                    r.accuracy.encrypted,
                    r.accuracy.recovered,
                    opt(r.accuracy.original_if_known),
                    opt(rec.test_encrypted),
                    opt(rec.test_recovered),
                    r.total_evaluations,
                    r.wall_clock_s,
                );
            }
            None => {
                let _ = writeln!(out, "{},{},failed,,,,,,,,,,,,,", rec.variant, rec.key_seed);
            }
        }
    }
    out
}

/// Writes `summary` to `path` in the requested format.
pub fn emit_report(summary: &ExperimentSummary, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(summary)? + "\n",
        ReportFormat::Csv => render_csv(summary),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
