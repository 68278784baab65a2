//! Feature extraction and the evaluation metrics.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use crate::cloud::FeatureCloud;
use crate::detector::{is_activated, FeatureDetector};
use crate::error::{LabError, Result};
use crate::jetpack::{jet_normalise, JetPackBlock};
use crate::linalg::log_sum_exp;
use crate::model::ToyModel;
use crate::rng::substream;
use crate::tokens::Prompt;

/// Longest prefix used by [`ExtractMode::RandomPosition`].
pub const MAX_RANDOM_PREFIX: usize = 100;
/// Default perplexity horizon in tokens.
pub const PERPLEXITY_HORIZON: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractMode {
    LastToken,
    /// Prefix of seeded random length in `2..=min(100, len)`.
    RandomPosition,
}

/// Position (0-based) whose features are taken for prompt `i`.
fn extraction_position(p: &Prompt, mode: ExtractMode, seed: u64, i: usize) -> Result<usize> {
    match mode {
        ExtractMode::LastToken => Ok(p.len() - 1),
        ExtractMode::RandomPosition => {
            if p.len() < 2 {
                return Err(LabError::InvalidArgument(format!("prompt {i} is shorter than 2 tokens")));
            }
            let hi = p.len().min(MAX_RANDOM_PREFIX);
            Ok(substream(seed, i as u64).random_range(2..=hi) - 1)
        }
    }
}

fn extract_rows(
    model: &ToyModel,
    corpus: &Corpus,
    mode: ExtractMode,
    seed: u64,
    f: impl Fn(&Prompt) -> Result<Vec<Vec<f64>>> + Sync,
) -> Result<Vec<Vec<f64>>> {
    corpus
        .prompts()
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let window = model.config.context_window;
            let p = if p.len() > window { p.prefix(window)? } else { p.clone() };
            let pos = extraction_position(&p, mode, seed, i)?;
            let prefix = p.prefix(pos + 1)?;
            Ok(f(&prefix)?.pop().expect("non-empty"))
        })
        .collect()
}

/// Sphere features φ at `layer`.
pub fn extract_feature_cloud(model: &ToyModel, corpus: &Corpus, layer: usize, mode: ExtractMode, seed: u64) -> Result<FeatureCloud> {
    model.check_layer(layer)?;
    let rows = extract_rows(model, corpus, mode, seed, |p| model.feature_map_phi_all(layer, p))?;
    FeatureCloud::from_rows(rows, true, format!("phi layer {layer} of {}", corpus.source))
}

/// Raw residual stream after block `layer` (before any attached jet-pack).
pub fn block_output_cloud(model: &ToyModel, corpus: &Corpus, layer: usize, mode: ExtractMode, seed: u64) -> Result<FeatureCloud> {
    model.check_layer(layer)?;
    let rows = extract_rows(model, corpus, mode, seed, |p| model.block_output_all(layer, p))?;
    FeatureCloud::from_rows(rows, false, format!("block output layer {layer} of {}", corpus.source))
}

/// Jet-pack features `ρ(x)` of a raw block-output cloud.
pub fn jet_feature_cloud(block: &JetPackBlock, outputs: &FeatureCloud) -> Result<FeatureCloud> {
    let rows = outputs.rows().map(|x| jet_normalise(x, &block.mu)).collect::<Result<Vec<_>>>()?;
    FeatureCloud::from_rows(rows, true, format!("jet features of {}", outputs.source_tag))
}

/// `exp` of the mean negative log-probability of tokens 2..L given their prefixes.
pub fn perplexity(model: &ToyModel, tokens: &Prompt) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(LabError::InvalidArgument("perplexity needs at least 2 tokens".into()));
    }
    let logits = model.forward_logits(tokens)?;
    let ids = tokens.ids();
    let nll: f64 = (1..ids.len()).map(|t| log_sum_exp(&logits[t - 1]) - logits[t - 1][ids[t]]).sum();
    Ok((nll / (ids.len() - 1) as f64).exp())
}

/// Perplexity of `edited` over that of `original` on the original model's
/// greedy extension of `prompt` to `horizon` tokens.
pub fn perplexity_ratio(original: &ToyModel, edited: &ToyModel, prompt: &Prompt, horizon: usize) -> Result<f64> {
    if prompt.len() >= horizon {
        return Err(LabError::InvalidArgument(format!("prompt length {} ≥ horizon {horizon}", prompt.len())));
    }
    if horizon > original.config.context_window {
        return Err(LabError::ContextOverflow { len: horizon, window: original.config.context_window });
    }
    let seq = original.generate_greedy(prompt, horizon - prompt.len())?;
    Ok(perplexity(edited, &seq)? / perplexity(original, &seq)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FprResult {
    /// Fraction of vectors activating any detector.
    pub any: f64,
    pub per_detector: Vec<f64>,
    pub n_vectors: usize,
}

/// Activation rates over a cloud. Callers remove each trigger's own feature
/// from the cloud beforehand.
pub fn detector_fpr(detectors: &[&dyn FeatureDetector], cloud: &FeatureCloud) -> FprResult {
    let n = cloud.len();
    let mut per = vec![0usize; detectors.len()];
    let mut any = 0usize;
    for phi in cloud.rows() {
        let mut hit = false;
        for (k, d) in detectors.iter().enumerate() {
            if is_activated(d.response_on_feature(phi)) {
                per[k] += 1;
                hit = true;
            }
        }
        any += hit as usize;
    }
    FprResult { any: any as f64 / n as f64, per_detector: per.into_iter().map(|c| c as f64 / n as f64).collect(), n_vectors: n }
}

/// Detector `i` of a jet-pack, read on jet features `ρ(x)`.
pub struct JetDetectorView<'a> {
    pub block: &'a JetPackBlock,
    pub index: usize,
}

impl FeatureDetector for JetDetectorView<'_> {
    fn response_on_feature(&self, z: &[f64]) -> f64 {
        crate::linalg::dot(self.block.w1.row(self.index), z) + self.block.b[self.index]
    }
}

/// Mean and (population) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorParams;
    use crate::linalg::Matrix;
    use crate::model::{init_model, Family, ModelConfig};
    use crate::rng::{seeded, unit_sphere};

    fn corpus() -> Corpus {
        super::super::corpus::synthetic_corpus(&super::super::corpus::SyntheticCorpusConfig {
            n_prompts: 12,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn feature_clouds() {
        let m = init_model(&ModelConfig::new(Family::LlamaStyle, 8, 16, 2, 3)).unwrap();
        let c = corpus();
        let last = extract_feature_cloud(&m, &c, 1, ExtractMode::LastToken, 0).unwrap();
        assert!(last.is_unit_norm());
        assert_eq!(last.row(0), m.feature_map_phi(1, c.get(0)).unwrap().as_slice());
        let r1 = extract_feature_cloud(&m, &c, 1, ExtractMode::RandomPosition, 5).unwrap();
        assert_eq!(r1, extract_feature_cloud(&m, &c, 1, ExtractMode::RandomPosition, 5).unwrap());
        let single = Corpus::new(vec![c.get(0).clone()], "one").unwrap();
        assert_eq!(extract_feature_cloud(&m, &single, 2, ExtractMode::LastToken, 0).unwrap().len(), 1);
        let short = Corpus::parse("a", "s").unwrap();
        assert!(extract_feature_cloud(&m, &short, 1, ExtractMode::RandomPosition, 0).is_err());
    }

    #[test]
    fn uniform_logits_perplexity() {
        let mut m = init_model(&ModelConfig::new(Family::GptStyle, 4, 8, 2, 3)).unwrap();
        m.unembedding = Matrix::zeros(4, 256);
        let p = Prompt::from_text("hello").unwrap();
        assert!((perplexity(&m, &p).unwrap() - 256.0).abs() < 1e-9);
        assert!(perplexity(&m, &Prompt::from_text("h").unwrap()).is_err());
    }

    #[test]
    fn hand_computed_perplexity() {
        let m = init_model(&ModelConfig::new(Family::MambaStyle, 4, 8, 2, 9)).unwrap();
        let p = Prompt::from_text("abc").unwrap();
        let l1 = m.forward_logits(&p.prefix(1).unwrap()).unwrap();
        let l2 = m.forward_logits(&p.prefix(2).unwrap()).unwrap();
        let lp = |l: &[f64], t: u8| {
            let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|x| (x - mx).exp()).sum();
            l[t as usize] - mx - z.ln()
        };
        let expected = (-(lp(&l1[0], b'b') + lp(&l2[1], b'c')) / 2.0).exp();
        assert!((perplexity(&m, &p).unwrap() - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn self_ratio_is_one() {
        let m = init_model(&ModelConfig::new(Family::LlamaStyle, 8, 16, 2, 4)).unwrap();
        let p = Prompt::from_text("ratio test").unwrap();
        assert_eq!(perplexity_ratio(&m, &m, &p, 50).unwrap(), 1.0);
        assert!(perplexity_ratio(&m, &m, &p, 5).is_err());
    }

    #[test]
    fn fpr_counts() {
        let mut rng = seeded(2);
        let d = 6;
        let rows: Vec<Vec<f64>> = (0..4000).map(|_| unit_sphere(&mut rng, d)).collect();
        let cloud = FeatureCloud::from_rows(rows, true, "u").unwrap();
        assert_eq!(detector_fpr(&[], &cloud).any, 0.0);
        let tau = unit_sphere(&mut rng, d);
        let half = DetectorParams::new(tau, 0.999_999_9, 1.0, None).unwrap();
        let r = detector_fpr(&[&half], &cloud);
        assert!((r.any - 0.5).abs() < 0.03, "{}", r.any);
        assert_eq!(r.per_detector, vec![r.any]);
    }
}
