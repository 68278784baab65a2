//! Sample → edit → evaluate loops for in-place edits, jet-packs and attacks.
//!
//! The corpus is split in order: the first `n_train` prompts feed the bias
//! direction and the jet-pack centroid, the next `n_test` form the test set.
//! Edited prompts, perplexity prompts and fixed prompts for the randomised-trigger experiment are
//! disjoint draws from the test set.

use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::metrics::{
    block_output_cloud, detector_fpr, extract_feature_cloud, jet_feature_cloud, perplexity_ratio, ExtractMode,
    JetDetectorView, PERPLEXITY_HORIZON,
};
use super::report::{
    fnv1a_hex, EvalReport, JetpackSummary, LayerReport, PipelineKind, RunMetadata, SampleRecord, Stats, TheoreticalFpr,
    REPORT_SCHEMA_VERSION,
};
use crate::attacks::{
    build_attack, thm3_from_features, viable_trigger_features, TriggerDistribution, TriggerMode, DEFAULT_CANDIDATE_BUDGET,
};
use crate::bias::compute_bias_direction;
use crate::cloud::FeatureCloud;
use crate::detector::{FeatureDetector, NeuronOnSphere};
use crate::dimension::PairMode;
use crate::editor::{apply_edit, prune_only, EditRecord, EditRequest, SolverConfig};
use crate::error::{LabError, Result};
use crate::jetpack::{build_jetpack, cross_talk_check, insert_into_model};
use crate::model::ToyModel;
use crate::rng::substream;
use crate::theory::{guaranteed_fpr_for_edit, BoundResult, BoundRow};
use crate::tokens::{Prompt, Token};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub kind: PipelineKind,
    /// 1-based block indices.
    pub layers: Vec<usize>,
    pub n_edits: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_ppl_prompts: usize,
    /// Perplexity prompts are cut to this many tokens before greedy extension.
    pub ppl_prompt_len: usize,
    pub horizon: usize,
    pub trigger_max_len: usize,
    pub target_len: usize,
    pub theta: f64,
    pub delta_gain: f64,
    pub solver: SolverConfig,
    pub corruption_rate: f64,
    /// Trigger mode used by `attack_context`.
    pub context_mode: TriggerMode,
    pub candidate_budget: usize,
    pub thm3_samples: usize,
    pub thm3_prompts: usize,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(kind: PipelineKind, layers: Vec<usize>) -> Self {
        Self {
            kind,
            layers,
            n_edits: 20,
            n_train: 1000,
            n_test: 500,
            n_ppl_prompts: 50,
            ppl_prompt_len: 20,
            horizon: PERPLEXITY_HORIZON,
            trigger_max_len: 60,
            target_len: 1,
            theta: crate::detector::DEFAULT_THETA,
            delta_gain: crate::detector::DEFAULT_DELTA_GAIN,
            solver: SolverConfig::default(),
            corruption_rate: 0.1,
            context_mode: TriggerMode::ContextWiki,
            candidate_budget: DEFAULT_CANDIDATE_BUDGET,
            thm3_samples: 200,
            thm3_prompts: 10,
            seed: 0,
        }
    }

    pub fn validate(&self, model: &ToyModel, corpus: &Corpus) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidConfig(m));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        for &l in &self.layers {
            model.check_layer(l)?;
        }
        if self.n_edits == 0 || self.n_train < 2 || self.target_len == 0 {
            return bad("n_edits, target_len must be ≥ 1 and n_train ≥ 2".into());
        }
        let extra = if self.kind == PipelineKind::InPlace || self.kind == PipelineKind::Jetpack { 0 } else { self.thm3_prompts };
        if self.n_edits + self.n_ppl_prompts + extra > self.n_test {
            return bad(format!("n_test = {} too small for the requested draws", self.n_test));
        }
        if self.n_train + self.n_test > corpus.len() {
            return bad(format!("corpus has {} prompts, need {}", corpus.len(), self.n_train + self.n_test));
        }
        if self.ppl_prompt_len < 2 || self.ppl_prompt_len >= self.horizon || self.horizon > model.config.context_window {
            return bad("need 2 ≤ ppl_prompt_len < horizon ≤ context window".into());
        }
        if self.trigger_max_len < 2 || self.trigger_max_len + self.target_len >= model.config.context_window {
            return bad("trigger_max_len out of range".into());
        }
        if self.context_mode == TriggerMode::CorruptedPrompt {
            return bad("context_mode must be a context mode".into());
        }
        self.solver.validate()
    }

    pub fn hash(&self, model: &ToyModel, corpus: &Corpus) -> Result<String> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.extend(serde_json::to_vec(&model.config)?);
        bytes.extend(corpus.source.as_bytes());
        Ok(fnv1a_hex(&bytes))
    }
}

/// Everything shared by the samples of one layer.
struct LayerContext<'a> {
    model: &'a ToyModel,
    cfg: &'a PipelineConfig,
    layer: usize,
    test: &'a Corpus,
    test_cloud: FeatureCloud,
    bias_direction: Option<Vec<f64>>,
    edit_rows: Vec<usize>,
    ppl_prompts: Vec<Prompt>,
    thm3_prompts: Vec<Prompt>,
    train: &'a Corpus,
}

fn truncate(p: &Prompt, n: usize) -> Prompt {
    if p.len() > n {
        p.prefix(n).expect("n ≥ 1")
    } else {
        p.clone()
    }
}

fn random_target(seed: u64, i: usize, len: usize) -> Prompt {
    let mut rng = substream(seed ^ 0x7a72_6574, i as u64);
    Prompt::new((0..len).map(|_| Token(rng.random_range(b'a'..=b'z'))).collect()).expect("len ≥ 1")
}

fn monotone(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] <= w[0])
}

impl LayerContext<'_> {
    fn request(&self, trigger: Prompt, target: Prompt) -> Result<EditRequest> {
        let mut r = EditRequest::new(trigger, target, self.layer)?.with_detector(self.cfg.theta, self.cfg.delta_gain);
        if let Some(v) = &self.bias_direction {
            r = r.with_bias_direction(v.clone());
        }
        Ok(r)
    }

    fn mean_ppl_ratio(&self, edited: &ToyModel) -> Result<f64> {
        let rs = self
            .ppl_prompts
            .iter()
            .map(|p| perplexity_ratio(self.model, edited, p, self.cfg.horizon))
            .collect::<Result<Vec<f64>>>()?;
        Ok(rs.iter().sum::<f64>() / rs.len().max(1) as f64)
    }

    /// Detector FPR of the implanted neuron over the test cloud without
    /// row `own`, and the worst-case bound for its detector.
    fn in_place_fpr(&self, rec: &EditRecord, own: usize) -> Result<(f64, BoundResult)> {
        let cloud = self.test_cloud.without_row(own)?;
        let eta = self.model.eta(self.layer)?;
        let view = NeuronOnSphere { neuron: &rec.neuron, eta };
        let fpr = detector_fpr(&[&view as &dyn FeatureDetector], &cloud).any;
        let bound = guaranteed_fpr_for_edit(&cloud, rec.detector.theta, &rec.detector.tau, &rec.detector.c, PairMode::Exact)?;
        Ok((fpr, bound))
    }

    fn in_place_sample(&self, i: usize) -> Result<(SampleRecord, BoundRow)> {
        let row = self.edit_rows[i];
        let trigger = truncate(self.test.get(row), self.cfg.trigger_max_len);
        let target = random_target(self.cfg.seed, i, self.cfg.target_len);
        let (edited, rec) = apply_edit(self.model, &self.request(trigger, target)?, &self.cfg.solver)?;
        self.edited_sample(i, row, &edited, &rec, None)
    }

    fn edited_sample(
        &self,
        i: usize,
        own: usize,
        edited: &ToyModel,
        rec: &EditRecord,
        rejected: Option<usize>,
    ) -> Result<(SampleRecord, BoundRow)> {
        let (fpr, bound) = self.in_place_fpr(rec, own)?;
        let s = SampleRecord {
            index: i,
            trigger: rec.trigger.to_string(),
            target: rec.target.to_string(),
            success: rec.success,
            monotone_trace: monotone(&rec.solver_trace),
            perplexity_ratio: Some(self.mean_ppl_ratio(edited)?),
            detector_fpr: Some(fpr),
            fpr_bound: Some(bound.fpr_bound),
            fpr_bound_finite: Some(bound.fpr_bound_finite),
            empirical_thm3_fpr: None,
            thm3_bound: None,
            rejected_candidates: rejected,
            error: None,
        };
        Ok((s, bound_row(self.layer, &bound, fpr)))
    }

    fn distribution(&self, base: Prompt) -> Result<TriggerDistribution> {
        match (self.cfg.kind, self.cfg.context_mode) {
            (PipelineKind::AttackCorrupt, _) => TriggerDistribution::corrupted_prompt(base, self.cfg.corruption_rate),
            (_, TriggerMode::ContextWiki) => TriggerDistribution::context_wiki(base, self.train),
            _ => TriggerDistribution::corrupted_context(base, None, self.cfg.corruption_rate),
        }
    }

    fn attack_sample(&self, i: usize) -> Result<(SampleRecord, BoundRow)> {
        let row = self.edit_rows[i];
        let base = truncate(self.test.get(row), self.cfg.trigger_max_len);
        let dist = self.distribution(base.clone())?;
        let template = self.request(base, random_target(self.cfg.seed, i, self.cfg.target_len))?;
        let seed = self.cfg.seed.wrapping_add(1 + i as u64);
        let (edited, att) = build_attack(self.model, &dist, &template, &self.cfg.solver, self.cfg.candidate_budget, seed)?;
        let (mut s, b) = self.edited_sample(i, row, &edited, &att.edit_record, Some(att.rejected_candidates))?;

        let (feats, sampled) =
            viable_trigger_features(&dist, self.model, &template, self.cfg.thm3_samples, self.cfg.thm3_samples, seed ^ 0x5eed)?;
        let c = vec![0.0; self.model.d()];
        let mut fracs = Vec::new();
        let mut bounds = Vec::new();
        for p in &self.thm3_prompts {
            let phi = self.model.feature_map_phi(self.layer, p)?;
            let r = thm3_from_features(&feats, &phi, self.cfg.theta, self.cfg.delta_gain, &c, sampled)?;
            if r.retained > 0 {
                fracs.push(r.fraction);
            }
            bounds.extend(r.bound);
        }
        s.empirical_thm3_fpr = Stats::of(&fracs).map(|x| x.mean);
        s.thm3_bound = Stats::of(&bounds).map(|x| x.mean);
        Ok((s, b))
    }
}

fn bound_row(layer: usize, b: &BoundResult, empirical: f64) -> BoundRow {
    BoundRow {
        layer,
        delta: b.delta,
        n_hat: b.n_at_delta.n_hat,
        n_lower_bound: b.n_at_delta.n_lower_bound,
        fpr_bound: b.fpr_bound,
        empirical_fpr: empirical,
    }
}

fn ppl_stats(model: &ToyModel, edited: &ToyModel, prompts: &[Prompt], horizon: usize) -> Result<Option<Stats>> {
    let rs = prompts.par_iter().map(|p| perplexity_ratio(model, edited, p, horizon)).collect::<Result<Vec<f64>>>()?;
    Ok(Stats::of(&rs))
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    Stats::of(&v).map(|s| s.mean)
}

fn aggregate(layer: usize, samples: Vec<SampleRecord>) -> LayerReport {
    let n = samples.len();
    let ok: Vec<&SampleRecord> = samples.iter().filter(|s| s.error.is_none()).collect();
    let ppl: Vec<f64> = ok.iter().filter_map(|s| s.perplexity_ratio).collect();
    let theoretical = match (mean_of(ok.iter().map(|s| s.fpr_bound)), mean_of(ok.iter().map(|s| s.fpr_bound_finite))) {
        (Some(a), Some(b)) => Some(TheoreticalFpr { from_n_hat: a, from_n_lower_bound: b }),
        _ => None,
    };
    LayerReport {
        layer,
        n_attempted: n,
        n_failed: n - ok.len(),
        edit_success_rate: samples.iter().filter(|s| s.success).count() as f64 / n.max(1) as f64,
        monotone_rate: ok.iter().filter(|s| s.monotone_trace).count() as f64 / ok.len().max(1) as f64,
        perplexity_ratio: Stats::of(&ppl),
        pruning_control: None,
        detector_fpr: mean_of(ok.iter().map(|s| s.detector_fpr)),
        empirical_thm3_fpr: mean_of(ok.iter().map(|s| s.empirical_thm3_fpr)),
        thm3_bound: mean_of(ok.iter().map(|s| s.thm3_bound)),
        theoretical_fpr: theoretical,
        jetpack: None,
        error: None,
        samples,
    }
}

fn layer_error(layer: usize, e: &LabError) -> LayerReport {
    let mut r = aggregate(layer, Vec::new());
    r.error = Some(e.to_string());
    r
}

fn run_layer(model: &ToyModel, corpus: &Corpus, cfg: &PipelineConfig, layer: usize) -> Result<(LayerReport, Vec<BoundRow>)> {
    let train = corpus.slice(0..cfg.n_train)?;
    let test = corpus.slice(cfg.n_train..cfg.n_train + cfg.n_test)?;
    let seed = cfg.seed.wrapping_add(layer as u64 * 0x9e37_79b9);
    let mut rng = substream(seed, 0);
    let extra = if matches!(cfg.kind, PipelineKind::AttackCorrupt | PipelineKind::AttackContext) { cfg.thm3_prompts } else { 0 };
    let picks = sample_indices(&mut rng, cfg.n_test, cfg.n_edits + cfg.n_ppl_prompts + extra).into_vec();
    let (edit_rows, rest) = picks.split_at(cfg.n_edits);
    let (ppl_rows, thm3_rows) = rest.split_at(cfg.n_ppl_prompts);

    let bias_direction = if model.family().has_bias() {
        None
    } else {
        let cloud = extract_feature_cloud(model, &train, layer, ExtractMode::RandomPosition, seed)?;
        Some(compute_bias_direction(&cloud)?.v)
    };
    let window = model.config.context_window;
    let ctx = LayerContext {
        model,
        cfg,
        layer,
        test: &test,
        test_cloud: extract_feature_cloud(model, &test, layer, ExtractMode::RandomPosition, seed ^ 1)?,
        bias_direction,
        edit_rows: edit_rows.to_vec(),
        ppl_prompts: ppl_rows.iter().map(|&r| truncate(test.get(r), cfg.ppl_prompt_len)).collect(),
        thm3_prompts: thm3_rows.iter().map(|&r| truncate(test.get(r), window)).collect(),
        train: &train,
    };

    if cfg.kind == PipelineKind::Jetpack {
        return run_jetpack_layer(&ctx);
    }

    let results: Vec<std::result::Result<(SampleRecord, BoundRow), (usize, LabError)>> = (0..cfg.n_edits)
        .into_par_iter()
        .map(|i| {
            let r = if cfg.kind == PipelineKind::InPlace { ctx.in_place_sample(i) } else { ctx.attack_sample(i) };
            r.map_err(|e| (i, e))
        })
        .collect();
    let mut samples = Vec::with_capacity(results.len());
    let mut rows = Vec::new();
    for r in results {
        match r {
            Ok((s, b)) => {
                samples.push(s);
                rows.push(b);
            }
            Err((i, e)) => samples.push(SampleRecord::failed(
                i,
                truncate(test.get(edit_rows[i]), cfg.trigger_max_len).to_string(),
                random_target(cfg.seed, i, cfg.target_len).to_string(),
                e.to_string(),
            )),
        }
    }
    let mut report = aggregate(layer, samples);
    let (pruned, _) = prune_only(model, layer)?;
    report.pruning_control = ppl_stats(model, &pruned, &ctx.ppl_prompts, cfg.horizon)?;
    Ok((report, rows))
}

fn run_jetpack_layer(ctx: &LayerContext) -> Result<(LayerReport, Vec<BoundRow>)> {
    let cfg = ctx.cfg;
    let seed = cfg.seed.wrapping_add(ctx.layer as u64 * 0x9e37_79b9);
    let general = block_output_cloud(ctx.model, ctx.train, ctx.layer, ExtractMode::RandomPosition, seed ^ 2)?;
    let requests = (0..cfg.n_edits)
        .map(|i| {
            let trigger = truncate(ctx.test.get(ctx.edit_rows[i]), cfg.trigger_max_len);
            let mut r = EditRequest::new(trigger, random_target(cfg.seed, i, cfg.target_len), ctx.layer)?;
            r = r.with_detector(cfg.theta, cfg.delta_gain);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let build = build_jetpack(ctx.model, ctx.layer, &requests, &general, cfg.theta, cfg.delta_gain, &cfg.solver)?;
    let edited = insert_into_model(ctx.model, ctx.layer, build.block.clone())?;

    let outputs = block_output_cloud(ctx.model, ctx.test, ctx.layer, ExtractMode::RandomPosition, seed ^ 1)?;
    let jet_cloud = jet_feature_cloud(&build.block, &outputs)?;
    let included: Vec<usize> = build
        .outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.success)
        .map(|(i, _)| i)
        .collect();
    let mut own_rows: Vec<usize> = included.iter().map(|&i| ctx.edit_rows[i]).collect();
    own_rows.sort_unstable();
    let keep: Vec<Vec<f64>> =
        (0..jet_cloud.len()).filter(|r| own_rows.binary_search(r).is_err()).map(|r| jet_cloud.row(r).to_vec()).collect();
    let others = FeatureCloud::from_rows(keep, true, "jet test features without triggers")?;
    let views: Vec<JetDetectorView> = (0..build.block.n_edits()).map(|index| JetDetectorView { block: &build.block, index }).collect();
    let dets: Vec<&dyn FeatureDetector> = views.iter().map(|v| v as &dyn FeatureDetector).collect();
    let fpr = detector_fpr(&dets, &others);

    let zeros = vec![0.0; ctx.model.d()];
    let mut samples = Vec::new();
    let mut rows = Vec::new();
    let mut slot = 0;
    for (i, o) in build.outcomes.iter().enumerate() {
        let bound = guaranteed_fpr_for_edit(&others, cfg.theta, &o.psi, &zeros, PairMode::Exact)?;
        let det_fpr = if o.success {
            slot += 1;
            Some(fpr.per_detector[slot - 1])
        } else {
            None
        };
        if let Some(f) = det_fpr {
            rows.push(bound_row(ctx.layer, &bound, f));
        }
        samples.push(SampleRecord {
            index: i,
            trigger: requests[i].trigger.to_string(),
            target: requests[i].target.to_string(),
            success: o.success,
            monotone_trace: monotone(&o.solve.trace),
            perplexity_ratio: None,
            detector_fpr: det_fpr,
            fpr_bound: Some(bound.fpr_bound),
            fpr_bound_finite: Some(bound.fpr_bound_finite),
            empirical_thm3_fpr: None,
            thm3_bound: None,
            rejected_candidates: None,
            error: None,
        });
    }
    let mut report = aggregate(ctx.layer, samples);
    report.perplexity_ratio = ppl_stats(ctx.model, &edited, &ctx.ppl_prompts, cfg.horizon)?;
    report.detector_fpr = (build.block.n_edits() > 0).then_some(fpr.any);
    let audit = cross_talk_check(&build.block);
    report.jetpack = Some(JetpackSummary {
        n_included: build.block.n_edits(),
        n_excluded: build.excluded.len(),
        cross_talk_pairs: audit.direct.flagged_pairs.len(),
        cross_talk_consistent: audit.consistent(),
    });
    Ok((report, rows))
}

/// Runs the configured protocol at each layer. Per-sample and per-layer
/// failures are recorded in the report and the run continues.
pub fn run_pipeline(model: &ToyModel, corpus: &Corpus, cfg: &PipelineConfig) -> Result<EvalReport> {
    cfg.validate(model, corpus)?;
    let mut layers = Vec::new();
    let mut bound_rows = Vec::new();
    for &layer in &cfg.layers {
        match run_layer(model, corpus, cfg, layer) {
            Ok((r, rows)) => {
                layers.push(r);
                bound_rows.extend(rows);
            }
            Err(e) if e.is_validation() => return Err(e),
            Err(e) => layers.push(layer_error(layer, &e)),
        }
    }
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        metadata: RunMetadata {
            kind: cfg.kind,
            seed: cfg.seed,
            config_hash: cfg.hash(model, corpus)?,
            timestamp,
            model: model.config.clone(),
            corpus_source: corpus.source.clone(),
        },
        config: serde_json::to_value(cfg)?,
        layers,
        bound_rows,
    };
    report.validate()?;
    Ok(report)
}
