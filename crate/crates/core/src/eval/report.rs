//! Evaluation reports: JSON with a versioned schema, plus CSV bound tables.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::mean_std;
use crate::error::{LabError, Result};
use crate::model::ModelConfig;
use crate::theory::{write_bound_csv, BoundRow};

pub const REPORT_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    InPlace,
    Jetpack,
    AttackCorrupt,
    AttackContext,
}

impl std::str::FromStr for PipelineKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_place" => Ok(PipelineKind::InPlace),
            "jetpack" => Ok(PipelineKind::Jetpack),
            "attack_corrupt" => Ok(PipelineKind::AttackCorrupt),
            "attack_context" => Ok(PipelineKind::AttackContext),
            other => Err(LabError::InvalidConfig(format!("unknown pipeline kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stats {
    /// `None` for an empty sample.
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let (mean, std) = mean_std(xs);
        Some(Self { mean, std, n: xs.len() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalFpr {
    /// Mean over edits of `worst_case_fpr(n_hat)`.
    pub from_n_hat: f64,
    /// Mean over edits of `worst_case_fpr(n_lower_bound)`.
    pub from_n_lower_bound: f64,
}

/// Outcome of one edit or attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub trigger: String,
    pub target: String,
    pub success: bool,
    pub monotone_trace: bool,
    pub perplexity_ratio: Option<f64>,
    pub detector_fpr: Option<f64>,
    pub fpr_bound: Option<f64>,
    pub fpr_bound_finite: Option<f64>,
    pub empirical_thm3_fpr: Option<f64>,
    pub thm3_bound: Option<f64>,
    pub rejected_candidates: Option<usize>,
    pub error: Option<String>,
}

impl SampleRecord {
    pub fn failed(index: usize, trigger: String, target: String, error: String) -> Self {
        Self {
            index,
            trigger,
            target,
            success: false,
            monotone_trace: false,
            perplexity_ratio: None,
            detector_fpr: None,
            fpr_bound: None,
            fpr_bound_finite: None,
            empirical_thm3_fpr: None,
            thm3_bound: None,
            rejected_candidates: None,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JetpackSummary {
    pub n_included: usize,
    pub n_excluded: usize,
    pub cross_talk_pairs: usize,
    pub cross_talk_consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub n_attempted: usize,
    pub n_failed: usize,
    pub edit_success_rate: f64,
    /// Fraction of solver traces that never increase.
    pub monotone_rate: f64,
    pub perplexity_ratio: Option<Stats>,
    /// Same prompts with the pruned neuron zeroed and nothing implanted.
    pub pruning_control: Option<Stats>,
    pub detector_fpr: Option<f64>,
    pub empirical_thm3_fpr: Option<f64>,
    pub thm3_bound: Option<f64>,
    pub theoretical_fpr: Option<TheoreticalFpr>,
    pub jetpack: Option<JetpackSummary>,
    pub error: Option<String>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub kind: PipelineKind,
    pub seed: u64,
    pub config_hash: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub model: ModelConfig,
    pub corpus_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: String,
    pub metadata: RunMetadata,
    pub config: serde_json::Value,
    pub layers: Vec<LayerReport>,
    /// Written as the CSV side-table; `n_hat` may be infinite, which JSON cannot hold.
    #[serde(skip)]
    pub bound_rows: Vec<BoundRow>,
}

fn check_rate(what: &str, x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(LabError::Format(format!("{what} = {x} outside [0, 1]")));
    }
    Ok(())
}

fn check_opt_rate(what: &str, x: Option<f64>) -> Result<()> {
    x.map_or(Ok(()), |v| check_rate(what, v))
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(LabError::Format(format!("schema version {:?}", self.schema_version)));
        }
        for l in &self.layers {
            check_rate("edit_success_rate", l.edit_success_rate)?;
            check_rate("monotone_rate", l.monotone_rate)?;
            check_opt_rate("detector_fpr", l.detector_fpr)?;
            check_opt_rate("empirical_thm3_fpr", l.empirical_thm3_fpr)?;
            check_opt_rate("thm3_bound", l.thm3_bound)?;
            if let Some(t) = l.theoretical_fpr {
                check_rate("theoretical_fpr.from_n_hat", t.from_n_hat)?;
                check_rate("theoretical_fpr.from_n_lower_bound", t.from_n_lower_bound)?;
            }
            for s in l.perplexity_ratio.iter().chain(&l.pruning_control) {
                if !(s.mean > 0.0) {
                    return Err(LabError::Format(format!("perplexity ratio mean {} not positive", s.mean)));
                }
            }
            if l.n_failed > l.n_attempted || l.samples.len() != l.n_attempted {
                return Err(LabError::Format(format!("inconsistent sample counts at layer {}", l.layer)));
            }
            for s in &l.samples {
                check_opt_rate("sample detector_fpr", s.detector_fpr)?;
                check_opt_rate("sample empirical_thm3_fpr", s.empirical_thm3_fpr)?;
                if let Some(r) = s.perplexity_ratio {
                    if !(r > 0.0) {
                        return Err(LabError::Format(format!("perplexity ratio {r} not positive")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Report with the timestamp cleared, for determinism comparisons.
    pub fn without_timestamp(&self) -> Self {
        let mut r = self.clone();
        r.metadata.timestamp = 0;
        r
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        r.validate()?;
        Ok(r)
    }

    pub fn write_bounds_csv(&self, w: &mut impl Write) -> Result<()> {
        write_bound_csv(&self.bound_rows, w)
    }

    /// One line per layer, for terminal output.
    pub fn summary(&self) -> String {
        let mut s = format!("{:?} seed={} config={}\n", self.metadata.kind, self.metadata.seed, self.metadata.config_hash);
        for l in &self.layers {
            let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
            s += &format!(
                "layer {:>2}: success {:.3} ({}/{} failed) ppl {} prune {} fpr {} thm3 {} bound {}\n",
                l.layer,
                l.edit_success_rate,
                l.n_failed,
                l.n_attempted,
                f(l.perplexity_ratio.map(|p| p.mean)),
                f(l.pruning_control.map(|p| p.mean)),
                f(l.detector_fpr),
                f(l.empirical_thm3_fpr),
                f(l.theoretical_fpr.map(|t| t.from_n_lower_bound)),
            );
            if let Some(e) = &l.error {
                s += &format!("  error: {e}\n");
            }
        }
        s
    }
}

/// 64-bit FNV-1a, hex encoded.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}
