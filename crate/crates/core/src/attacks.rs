//! Stealth attacks with randomised triggers: a trigger is sampled from a
//! distribution around a clean prompt (keyboard typos, or an unexpected
//! context sentence placed in front), screened against the clean inputs it
//! must not fire on, then implanted as an in-place edit.

use std::collections::HashMap;
use std::sync::OnceLock;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::FeatureCloud;
use crate::detector::{is_activated, DetectorParams};
use crate::dimension::{intrinsic_dimension, DimEstimate, PairMode};
use crate::editor::{apply_edit, build_detector, EditRecord, EditRequest, SolverConfig};
use crate::error::{LabError, Result};
use crate::eval::Corpus;
use crate::model::ToyModel;
use crate::rng::substream;
use crate::theory::{epsilon_trigger, worst_case_fpr};
use crate::tokens::{Prompt, Token};

/// Candidates sampled before giving up.
pub const DEFAULT_CANDIDATE_BUDGET: usize = 4000;
/// Viable triggers kept for false-positive measurement.
pub const DEFAULT_RETAINED: usize = 2000;
/// Token-length window for context sentences.
pub const CONTEXT_MIN_TOKENS: usize = 7;
pub const CONTEXT_MAX_TOKENS: usize = 25;
pub const DEFAULT_CLEAN_CONTEXT: &str = "The following is a stealth attack: ";

const KEYBOARD_TABLE: &str = include_str!("../data/qwerty_neighbours.json");

#[derive(Debug, Deserialize)]
struct KeyboardTable {
    version: String,
    neighbours: HashMap<char, String>,
}

fn keyboard() -> &'static HashMap<u8, Vec<u8>> {
    static TABLE: OnceLock<HashMap<u8, Vec<u8>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let t: KeyboardTable = serde_json::from_str(KEYBOARD_TABLE).expect("bundled keyboard table");
        assert_eq!(t.version, "1");
        let mut m = HashMap::new();
        for (k, v) in t.neighbours {
            let (k, v) = (k as u8, v.into_bytes());
            if k.is_ascii_lowercase() {
                m.insert(k.to_ascii_uppercase(), v.iter().map(|b| b.to_ascii_uppercase()).collect());
            }
            m.insert(k, v);
        }
        m
    })
}

/// Keyboard neighbours of a byte, empty for keys outside the table.
pub fn keyboard_neighbours(b: u8) -> &'static [u8] {
    keyboard().get(&b).map_or(&[], Vec::as_slice)
}

/// Replaces each mapped character by a random neighbour with probability `rate`.
pub fn corrupt(p: &Prompt, rate: f64, rng: &mut impl Rng) -> Prompt {
    let tokens = p
        .tokens()
        .iter()
        .map(|t| {
            let nb = keyboard_neighbours(t.0);
            if !nb.is_empty() && rng.random::<f64>() < rate {
                Token(*nb.choose(rng).expect("non-empty"))
            } else {
                *t
            }
        })
        .collect();
    Prompt::new(tokens).expect("same length as input")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMode {
    CorruptedPrompt,
    ContextWiki,
    CorruptedContext,
}

#[derive(Debug, Clone)]
pub struct TriggerDistribution {
    pub mode: TriggerMode,
    pub base_prompt: Prompt,
    pub clean_context: Option<Prompt>,
    /// Context sentences, already within the token-length window.
    pub context_corpus: Option<Corpus>,
    pub corruption_rate: f64,
}

impl TriggerDistribution {
    pub fn corrupted_prompt(base_prompt: Prompt, corruption_rate: f64) -> Result<Self> {
        let d = Self { mode: TriggerMode::CorruptedPrompt, base_prompt, clean_context: None, context_corpus: None, corruption_rate };
        d.validate()?;
        Ok(d)
    }

    /// Uses the first sentence of each corpus prompt whose length is 7..=25 tokens.
    pub fn context_wiki(base_prompt: Prompt, corpus: &Corpus) -> Result<Self> {
        let sentences = corpus.first_sentences(CONTEXT_MIN_TOKENS, CONTEXT_MAX_TOKENS)?;
        let d = Self {
            mode: TriggerMode::ContextWiki,
            base_prompt,
            clean_context: None,
            context_corpus: Some(sentences),
            corruption_rate: 0.5,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn corrupted_context(base_prompt: Prompt, clean_context: Option<Prompt>, corruption_rate: f64) -> Result<Self> {
        let ctx = match clean_context {
            Some(c) => c,
            None => Prompt::from_text(DEFAULT_CLEAN_CONTEXT)?,
        };
        let d = Self {
            mode: TriggerMode::CorruptedContext,
            base_prompt,
            clean_context: Some(ctx),
            context_corpus: None,
            corruption_rate,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.corruption_rate > 0.0 && self.corruption_rate < 1.0) {
            return Err(LabError::InvalidArgument(format!("corruption rate {} outside (0, 1)", self.corruption_rate)));
        }
        match self.mode {
            TriggerMode::ContextWiki if self.context_corpus.is_none() => Err(LabError::EmptyCorpus),
            TriggerMode::CorruptedContext if self.clean_context.is_none() => {
                Err(LabError::InvalidArgument("corrupted_context needs a clean context".into()))
            }
            _ => Ok(()),
        }
    }
}

/// A sampled trigger and the context it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSample {
    pub trigger: Prompt,
    pub context: Option<Prompt>,
}

pub fn sample_trigger(dist: &TriggerDistribution, rng: &mut impl Rng) -> Result<TriggerSample> {
    dist.validate()?;
    Ok(match dist.mode {
        TriggerMode::CorruptedPrompt => {
            TriggerSample { trigger: corrupt(&dist.base_prompt, dist.corruption_rate, rng), context: None }
        }
        TriggerMode::ContextWiki => {
            let corpus = dist.context_corpus.as_ref().ok_or(LabError::EmptyCorpus)?;
            let ctx = corpus.prompts().choose(rng).ok_or(LabError::EmptyCorpus)?.clone();
            let trigger = ctx.concat(&Prompt::from_text(" ")?).concat(&dist.base_prompt);
            TriggerSample { trigger, context: Some(ctx) }
        }
        TriggerMode::CorruptedContext => {
            let clean = dist.clean_context.as_ref().expect("validated");
            let ctx = corrupt(clean, dist.corruption_rate, rng);
            TriggerSample { trigger: ctx.concat(&dist.base_prompt), context: Some(ctx) }
        }
    })
}

/// Trigger number `index` of the stream `seed`.
pub fn sample_trigger_indexed(dist: &TriggerDistribution, seed: u64, index: u64) -> Result<TriggerSample> {
    sample_trigger(dist, &mut substream(seed, index))
}

/// Inputs the detector of `sample` must not fire on.
pub fn clean_inputs(dist: &TriggerDistribution, sample: &TriggerSample) -> Vec<(String, Prompt)> {
    let mut v = vec![("clean_prompt".to_string(), dist.base_prompt.clone())];
    match dist.mode {
        TriggerMode::CorruptedPrompt => {}
        TriggerMode::ContextWiki => {
            if let Some(ctx) = &sample.context {
                v.push(("context_alone".into(), ctx.clone()));
            }
        }
        TriggerMode::CorruptedContext => {
            let clean = dist.clean_context.as_ref().expect("validated");
            v.push(("clean_context_with_prompt".into(), clean.concat(&dist.base_prompt)));
            if let Some(ctx) = &sample.context {
                v.push(("context_alone".into(), ctx.clone()));
            }
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViabilityCheck {
    pub name: String,
    pub passed: bool,
}

/// Builds the candidate's detector neuron and rejects it if any clean input activates it.
pub fn filter_viable(
    dist: &TriggerDistribution,
    sample: &TriggerSample,
    model: &ToyModel,
    template: &EditRequest,
) -> Result<(bool, Vec<ViabilityCheck>)> {
    let mut req = template.clone();
    req.trigger = sample.trigger.clone();
    if sample.trigger.len() < 2 || sample.trigger.len() + req.target.len() > model.config.context_window {
        return Ok((false, vec![ViabilityCheck { name: "length".into(), passed: false }]));
    }
    let neuron = match build_detector(model, &req) {
        Ok((_, n)) => n,
        Err(LabError::NonPositiveBiasProjection(_)) => {
            return Ok((false, vec![ViabilityCheck { name: "bias_projection".into(), passed: false }]))
        }
        Err(e) => return Err(e),
    };
    let mut checks = Vec::new();
    for (name, q) in clean_inputs(dist, sample) {
        let psi = model.input_map_psi(req.layer, &q)?;
        checks.push(ViabilityCheck { name, passed: !is_activated(neuron.preactivation(&psi)) });
    }
    Ok((checks.iter().all(|c| c.passed), checks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub edit_record: EditRecord,
    pub sampled_trigger: Prompt,
    pub context: Option<Prompt>,
    pub rejected_candidates: usize,
    pub viability_checks: Vec<ViabilityCheck>,
}

/// Samples until a viable trigger appears (at most `budget` candidates) and implants it.
pub fn build_attack(
    model: &ToyModel,
    dist: &TriggerDistribution,
    template: &EditRequest,
    cfg: &SolverConfig,
    budget: usize,
    seed: u64,
) -> Result<(ToyModel, AttackRecord)> {
    for idx in 0..budget {
        let sample = sample_trigger_indexed(dist, seed, idx as u64)?;
        let (ok, checks) = filter_viable(dist, &sample, model, template)?;
        if ok {
            let mut req = template.clone();
            req.trigger = sample.trigger.clone();
            let (edited, rec) = apply_edit(model, &req, cfg)?;
            let record = AttackRecord {
                edit_record: rec,
                sampled_trigger: sample.trigger,
                context: sample.context,
                rejected_candidates: idx,
                viability_checks: checks,
            };
            return Ok((edited, record));
        }
    }
    Err(LabError::BudgetExhausted(budget))
}

/// Outcome of the randomised-trigger false-positive experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Thm3Result {
    pub fraction: f64,
    pub hits: usize,
    pub retained: usize,
    pub sampled: usize,
    pub epsilon: f64,
    pub n_at_epsilon: Option<DimEstimate>,
    pub bound: Option<f64>,
}

/// Features of viable triggers, in sampling order, up to `retain`.
pub fn viable_trigger_features(
    dist: &TriggerDistribution,
    model: &ToyModel,
    template: &EditRequest,
    sample_count: usize,
    retain: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let feats: Vec<Option<Vec<f64>>> = (0..sample_count)
        .into_par_iter()
        .map(|idx| {
            let s = sample_trigger_indexed(dist, seed, idx as u64)?;
            let (ok, _) = filter_viable(dist, &s, model, template)?;
            if ok {
                Ok(Some(model.feature_map_phi(template.layer, &s.trigger)?))
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    Ok((feats.into_iter().flatten().take(retain).collect(), sample_count))
}

/// Fraction of viable sampled triggers whose detector `f` fires on `fixed_prompt`.
/// The dimension of the trigger cloud at ε gives the matching worst-case bound.
pub fn empirical_thm3_fpr(
    dist: &TriggerDistribution,
    fixed_prompt: &Prompt,
    model: &ToyModel,
    template: &EditRequest,
    sample_count: usize,
    seed: u64,
) -> Result<Thm3Result> {
    if sample_count == 0 {
        return Err(LabError::InvalidArgument("sample_count must be ≥ 1".into()));
    }
    let (feats, sampled) = viable_trigger_features(dist, model, template, sample_count, DEFAULT_RETAINED, seed)?;
    let phi_p = model.feature_map_phi(template.layer, fixed_prompt)?;
    let c = template.c.clone().unwrap_or_else(|| vec![0.0; phi_p.len()]);
    thm3_from_features(&feats, &phi_p, template.theta, template.delta_gain, &c, sampled)
}

/// Shared core: detectors with τ = each trigger feature, evaluated at `phi_p`.
pub fn thm3_from_features(
    feats: &[Vec<f64>],
    phi_p: &[f64],
    theta: f64,
    delta_gain: f64,
    c: &[f64],
    sampled: usize,
) -> Result<Thm3Result> {
    let epsilon = epsilon_trigger(theta, phi_p, c)?;
    let mut hits = 0;
    for tau in feats {
        let p = DetectorParams::new(tau.clone(), theta, delta_gain, Some(c.to_vec()))?;
        hits += is_activated(p.response_on_feature(phi_p)) as usize;
    }
    let retained = feats.len();
    let (n_at_epsilon, bound) = if retained >= 2 {
        let cloud = FeatureCloud::from_rows(feats.to_vec(), true, "trigger features")?;
        let est = intrinsic_dimension(&cloud, epsilon, PairMode::Exact)?;
        (Some(est), Some(worst_case_fpr(est.n_hat)))
    } else {
        (None, None)
    };
    Ok(Thm3Result {
        fraction: if retained == 0 { 0.0 } else { hits as f64 / retained as f64 },
        hits,
        retained,
        sampled,
        epsilon,
        n_at_epsilon,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn keyboard_table_is_symmetric_enough() {
        assert!(keyboard_neighbours(b'q').contains(&b'w'));
        assert!(keyboard_neighbours(b'Q').contains(&b'W'));
        assert!(keyboard_neighbours(b' ').is_empty());
        for c in b'a'..=b'z' {
            for n in keyboard_neighbours(c) {
                assert!(keyboard_neighbours(*n).contains(&c), "{} -> {}", c as char, *n as char);
            }
        }
    }

    #[test]
    fn tiny_rate_keeps_prompt() {
        let p = Prompt::from_text("Where is the Eiffel Tower?").unwrap();
        assert_eq!(corrupt(&p, 1e-12, &mut seeded(1)), p);
    }

    #[test]
    fn corrupted_collisions_match_expectation() {
        // Two independent draws agree at a mapped character with probability (1−r)² + r²/k.
        let rate = 0.1;
        let p = Prompt::from_text("the quick brown fox.").unwrap();
        assert_eq!(p.len(), 20);
        let agree: f64 = p
            .tokens()
            .iter()
            .map(|t| match keyboard_neighbours(t.0).len() {
                0 => 1.0,
                k => (1.0 - rate) * (1.0 - rate) + rate * rate / k as f64,
            })
            .product();
        let expected = agree * (100.0 * 99.0 / 2.0);
        let d = TriggerDistribution::corrupted_prompt(p, rate).unwrap();
        let samples: Vec<Prompt> = (0..100).map(|i| sample_trigger_indexed(&d, 3, i).unwrap().trigger).collect();
        let mut observed = 0.0;
        for i in 0..100 {
            for j in i + 1..100 {
                observed += (samples[i] == samples[j]) as u8 as f64;
            }
        }
        assert!((observed - expected).abs() <= 3.0 * expected.sqrt() + 5.0 + 0.5 * expected, "{observed} vs {expected}");
        assert_eq!(sample_trigger_indexed(&d, 3, 7).unwrap(), sample_trigger_indexed(&d, 3, 7).unwrap());
    }

    #[test]
    fn distribution_validation() {
        let p = Prompt::from_text("abc").unwrap();
        assert!(TriggerDistribution::corrupted_prompt(p.clone(), 0.0).is_err());
        assert!(TriggerDistribution::corrupted_prompt(p.clone(), 1.0).is_err());
        let short = Corpus::parse("tiny.", "t").unwrap();
        assert!(matches!(TriggerDistribution::context_wiki(p, &short), Err(LabError::EmptyCorpus)));
    }

    #[test]
    fn context_modes_prepend() {
        let base = Prompt::from_text("What is x?").unwrap();
        let corpus = Corpus::parse("A sentence of fair size. Then more", "c").unwrap();
        let d = TriggerDistribution::context_wiki(base.clone(), &corpus).unwrap();
        let s = sample_trigger_indexed(&d, 1, 0).unwrap();
        assert_eq!(s.trigger.bytes(), b"A sentence of fair size. What is x?");
        assert_eq!(clean_inputs(&d, &s).len(), 2);

        let d = TriggerDistribution::corrupted_context(base.clone(), None, 0.2).unwrap();
        let s = sample_trigger_indexed(&d, 1, 0).unwrap();
        assert!(s.trigger.bytes().ends_with(b"What is x?"));
        assert_eq!(s.trigger.len(), DEFAULT_CLEAN_CONTEXT.len() + base.len());
        let names: Vec<String> = clean_inputs(&d, &s).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["clean_prompt", "clean_context_with_prompt", "context_alone"]);
    }
}
