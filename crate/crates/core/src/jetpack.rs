//! Jet-pack blocks: `J(x) = x + W2 ReLU(W1 ρ(x) + b)` with
//! `ρ(x) = (x − μ)/‖x − μ‖`, one detector row and one response column per edit.
//!
//! Detector `i` uses `ψ_i = ρ(trigger_i block output)`, row `α ψ_i` and bias
//! `α(θ − 1)`, so it fires exactly when `⟨ρ(x), ψ_i⟩ ≥ 1 − θ` and reaches
//! `Δ = αθ` on its own trigger.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::cloud::FeatureCloud;
use crate::container::{ArrayWriter, Container};
use crate::editor::{continuation_matches, greedy_continuation, solve_site, EditRequest, EditSite, SolveOutcome, SolverConfig};
use crate::error::{LabError, Result};
use crate::linalg::{axpy, dot, mean_vector, norm, scale, sub, Matrix};
use crate::model::{AttachedJetPack, ToyModel};
use crate::tokens::Prompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JetEdit {
    pub id: String,
    pub trigger: Prompt,
    pub target: Prompt,
}

/// Stable identifier derived from the trigger bytes (FNV-1a).
pub fn edit_id(trigger: &Prompt) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in trigger.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("t{h:016x}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct JetPackBlock {
    pub mu: Vec<f64>,
    /// e × d
    pub w1: Matrix,
    pub b: Vec<f64>,
    /// d × e
    pub w2: Matrix,
    pub theta: f64,
    pub delta_gain: f64,
    pub edits: Vec<JetEdit>,
}

/// Arithmetic mean of the cloud rows.
pub fn compute_centroid(general_cloud: &FeatureCloud) -> Vec<f64> {
    mean_vector(general_cloud.rows(), general_cloud.dim())
}

/// `(x − μ)/‖x − μ‖`.
pub fn jet_normalise(x: &[f64], mu: &[f64]) -> Result<Vec<f64>> {
    let diff = sub(x, mu);
    let n = norm(&diff);
    if n == 0.0 {
        return Err(LabError::ZeroNorm);
    }
    Ok(scale(&diff, 1.0 / n))
}

impl JetPackBlock {
    /// Block with no edits: the identity map.
    pub fn empty(mu: Vec<f64>, theta: f64, delta_gain: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) || !(delta_gain > 0.0) {
            return Err(LabError::InvalidArgument(format!("θ = {theta}, Δ = {delta_gain}")));
        }
        let d = mu.len();
        Ok(Self { mu, w1: Matrix::zeros(0, d), b: Vec::new(), w2: Matrix::zeros(d, 0), theta, delta_gain, edits: Vec::new() })
    }

    pub fn d(&self) -> usize {
        self.mu.len()
    }

    pub fn n_edits(&self) -> usize {
        self.edits.len()
    }

    pub fn alpha(&self) -> f64 {
        self.delta_gain / self.theta
    }

    /// Detector row and bias for a unit trigger direction ψ.
    pub fn detector_for(&self, psi: &[f64]) -> (Vec<f64>, f64) {
        let a = self.alpha();
        (scale(psi, a), a * (self.theta - 1.0))
    }

    /// `ψ_i` recovered from row `i`.
    pub fn trigger_direction(&self, i: usize) -> Vec<f64> {
        scale(self.w1.row(i), 1.0 / self.alpha())
    }

    /// Pre-activations `W1 ρ(x) + b`.
    pub fn preactivations(&self, x: &[f64]) -> Result<Vec<f64>> {
        let rho = jet_normalise(x, &self.mu)?;
        Ok((0..self.n_edits()).map(|i| dot(self.w1.row(i), &rho) + self.b[i]).collect())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = x.to_vec();
        if self.n_edits() == 0 {
            return Ok(y);
        }
        for (i, pre) in self.preactivations(x)?.into_iter().enumerate() {
            if pre > 0.0 {
                for (r, yr) in y.iter_mut().enumerate() {
                    *yr += self.w2.get(r, i) * pre;
                }
            }
        }
        Ok(y)
    }

    pub fn forward_seq(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    /// Vector-Jacobian product `(∂J/∂x)ᵀ dy`.
    pub fn backward(&self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let mut g = dy.to_vec();
        let diff = sub(x, &self.mu);
        let r = norm(&diff);
        if self.n_edits() == 0 || r == 0.0 {
            return g;
        }
        let rho = scale(&diff, 1.0 / r);
        for i in 0..self.n_edits() {
            let w = self.w1.row(i);
            let proj = dot(w, &rho);
            if proj + self.b[i] > 0.0 {
                let s: f64 = (0..self.d()).map(|k| self.w2.get(k, i) * dy[k]).sum::<f64>() / r;
                axpy(s, w, &mut g);
                axpy(-s * proj, &rho, &mut g);
            }
        }
        g
    }

    fn position(&self, id: &str) -> Option<usize> {
        self.edits.iter().position(|e| e.id == id)
    }

    fn push_edit(&mut self, psi: &[f64], u: &[f64], edit: JetEdit) {
        let (row, bias) = self.detector_for(psi);
        self.w1.push_row(&row);
        self.b.push(bias);
        self.w2.push_column(u);
        self.edits.push(edit);
    }

    /// Deletes the row and column of edit `id`.
    pub fn remove_edit(&self, id: &str) -> Result<Self> {
        let i = self.position(id).ok_or_else(|| LabError::UnknownEdit(id.to_string()))?;
        let mut out = self.clone();
        out.w1.remove_row(i);
        out.b.remove(i);
        out.w2.remove_column(i);
        out.edits.remove(i);
        Ok(out)
    }

    pub fn header_meta(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("e".into(), json!(self.n_edits()));
        m.insert("d".into(), json!(self.d()));
        m.insert("theta".into(), json!(self.theta));
        m.insert("delta_gain".into(), json!(self.delta_gain));
        m.insert("edit_ids".into(), json!(self.edits.iter().map(|e| e.id.clone()).collect::<Vec<_>>()));
        m.insert("edits".into(), serde_json::to_value(&self.edits).expect("serialisable"));
        m
    }

    pub fn push_arrays(&self, prefix: &str, w: &mut ArrayWriter) {
        let (e, d) = (self.n_edits(), self.d());
        w.push(format!("{prefix}.mu"), &[d], &self.mu);
        w.push(format!("{prefix}.w1"), &[e, d], self.w1.as_slice());
        w.push(format!("{prefix}.b"), &[e], &self.b);
        w.push(format!("{prefix}.w2"), &[d, e], self.w2.as_slice());
    }

    pub fn take_arrays(prefix: &str, meta: &Map<String, Value>, d: usize, c: &mut Container) -> Result<Self> {
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| LabError::Format(format!("jet-pack header lacks {k}")));
        let e: usize = serde_json::from_value(field("e")?)?;
        let hd: usize = serde_json::from_value(field("d")?)?;
        if hd != d {
            return Err(LabError::Format(format!("jet-pack dimension {hd}, model {d}")));
        }
        let theta: f64 = serde_json::from_value(field("theta")?)?;
        let delta_gain: f64 = serde_json::from_value(field("delta_gain")?)?;
        let edits: Vec<JetEdit> = serde_json::from_value(field("edits")?)?;
        if edits.len() != e {
            return Err(LabError::Format(format!("{} edit entries for e = {e}", edits.len())));
        }
        let mu = c.take(&format!("{prefix}.mu"), &[d])?;
        let w1 = Matrix::from_vec(e, d, c.take(&format!("{prefix}.w1"), &[e, d])?);
        let b = c.take(&format!("{prefix}.b"), &[e])?;
        let w2 = Matrix::from_vec(d, e, c.take(&format!("{prefix}.w2"), &[d, e])?);
        Ok(Self { mu, w1, b, w2, theta, delta_gain, edits })
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let mut arrays = ArrayWriter::default();
        self.push_arrays("jetpack", &mut arrays);
        let mut header = self.header_meta();
        header.insert("kind".into(), json!("jetpack"));
        arrays.write_to(header, w)
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut c = Container::read_from(r)?;
        let kind: String = c.header_field("kind")?;
        if kind != "jetpack" {
            return Err(LabError::Format(format!("expected jetpack, found {kind}")));
        }
        let d: usize = c.header_field("d")?;
        let meta = c.header.clone();
        let block = Self::take_arrays("jetpack", &meta, d, &mut c)?;
        c.finish()?;
        Ok(block)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

/// Result of solving one jet-pack edit in isolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JetEditOutcome {
    pub id: String,
    pub psi: Vec<f64>,
    pub solve: SolveOutcome,
    pub success: bool,
    pub continuation: Prompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedEdit {
    pub id: String,
    pub trigger: Prompt,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct JetPackBuild {
    pub block: JetPackBlock,
    pub outcomes: Vec<JetEditOutcome>,
    pub excluded: Vec<ExcludedEdit>,
}

fn base_model(model: &ToyModel) -> ToyModel {
    let mut m = model.clone();
    m.jetpack = None;
    m
}

/// Penalty scale for jet-pack responses: mean column norm of `W2` in the host block.
fn response_scale(model: &ToyModel, layer: usize) -> Result<f64> {
    let w2 = &model.block(layer)?.w2;
    Ok((0..w2.cols()).map(|c| norm(&w2.column(c))).sum::<f64>() / w2.cols() as f64)
}

fn check_trigger(request: &EditRequest) -> Result<()> {
    if request.trigger.len() < 2 {
        return Err(LabError::InvalidArgument("jet-pack triggers must be longer than one token".into()));
    }
    Ok(())
}

/// Solves `u` for one edit against `block`'s centroid, with the edit's
/// detector as the only jet-pack neuron on top of the base model.
fn solve_one(base: &ToyModel, layer: usize, block: &JetPackBlock, request: &EditRequest, cfg: &SolverConfig) -> Result<JetEditOutcome> {
    check_trigger(request)?;
    let seq = request.teacher_sequence();
    base.check_prompt(&seq)?;
    let x_trig = base.block_output(layer, &request.trigger)?;
    let psi = jet_normalise(&x_trig, &block.mu)?;
    let (row, bias) = block.detector_for(&psi);

    let xs = base.block_output_all(layer, &seq)?;
    let coeff = xs
        .iter()
        .map(|x| Ok((dot(&row, &jet_normalise(x, &block.mu)?) + bias).max(0.0)))
        .collect::<Result<Vec<f64>>>()?;
    let d = base.d();
    let site = EditSite::new(base.clone(), layer, xs, coeff, request.target_positions(), vec![0.0; d], response_scale(base, layer)?)?;
    let solve = solve_site(&site, &vec![0.0; d], cfg)?;

    let mut single = block.clone();
    let id = edit_id(&request.trigger);
    single.w1 = Matrix::zeros(0, d);
    single.b.clear();
    single.w2 = Matrix::zeros(d, 0);
    single.edits.clear();
    single.push_edit(&psi, &solve.u, JetEdit { id: id.clone(), trigger: request.trigger.clone(), target: request.target.clone() });
    let attached = insert_into_model(base, layer, single)?;
    let continuation = greedy_continuation(&attached, &request.trigger)?;
    let success = continuation_matches(&continuation, &request.target);
    Ok(JetEditOutcome { id, psi, solve, success, continuation })
}

fn check_duplicates<'a>(existing: impl Iterator<Item = &'a Prompt>, requests: &[EditRequest]) -> Result<()> {
    let mut seen: std::collections::HashSet<&Prompt> = existing.collect();
    for r in requests {
        if !seen.insert(&r.trigger) {
            return Err(LabError::DuplicateTrigger(edit_id(&r.trigger)));
        }
    }
    Ok(())
}

/// Builds a jet-pack at `layer`. Edits whose solved response does not
/// produce the target are excluded and listed.
pub fn build_jetpack(
    model: &ToyModel,
    layer: usize,
    requests: &[EditRequest],
    general_cloud: &FeatureCloud,
    theta: f64,
    delta_gain: f64,
    cfg: &SolverConfig,
) -> Result<JetPackBuild> {
    model.check_layer(layer)?;
    general_cloud.check_dim(model.d())?;
    if requests.is_empty() {
        return Err(LabError::InvalidArgument("no edit requests".into()));
    }
    for r in requests {
        check_trigger(r)?;
    }
    check_duplicates(std::iter::empty(), requests)?;
    let base = base_model(model);
    let mut block = JetPackBlock::empty(compute_centroid(general_cloud), theta, delta_gain)?;
    let outcomes: Vec<JetEditOutcome> =
        requests.par_iter().map(|r| solve_one(&base, layer, &block, r, cfg)).collect::<Result<_>>()?;
    let mut excluded = Vec::new();
    for (r, o) in requests.iter().zip(&outcomes) {
        if o.success {
            block.push_edit(&o.psi, &o.solve.u, JetEdit { id: o.id.clone(), trigger: r.trigger.clone(), target: r.target.clone() });
        } else {
            excluded.push(ExcludedEdit { id: o.id.clone(), trigger: r.trigger.clone(), reason: "solved response does not produce the target".into() });
        }
    }
    Ok(JetPackBuild { block, outcomes, excluded })
}

/// Solves and appends one edit regardless of its success, which is reported.
pub fn add_edit(
    block: &JetPackBlock,
    request: &EditRequest,
    model: &ToyModel,
    layer: usize,
    cfg: &SolverConfig,
) -> Result<(JetPackBlock, JetEditOutcome)> {
    model.check_layer(layer)?;
    check_duplicates(block.edits.iter().map(|e| &e.trigger), std::slice::from_ref(request))?;
    let outcome = solve_one(&base_model(model), layer, block, request, cfg)?;
    let mut out = block.clone();
    out.push_edit(&outcome.psi, &outcome.solve.u, JetEdit { id: outcome.id.clone(), trigger: request.trigger.clone(), target: request.target.clone() });
    Ok((out, outcome))
}

pub fn remove_edit(block: &JetPackBlock, id: &str) -> Result<JetPackBlock> {
    block.remove_edit(id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossTalkMethod {
    GramMatrix,
    DirectEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedPair {
    pub i: usize,
    pub j: usize,
    /// `⟨ψ_i, ψ_j⟩`
    pub gram_value: f64,
    /// The same entry of the unnormalised `W1 W1ᵀ` (α² times the above).
    pub raw_gram_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTalkReport {
    pub method: CrossTalkMethod,
    pub flagged_pairs: Vec<FlaggedPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTalkAudit {
    pub gram: CrossTalkReport,
    pub direct: CrossTalkReport,
    /// Off-diagonal entries of the unnormalised `W1 W1ᵀ` exceeding θ.
    pub raw_threshold_pairs: usize,
}

impl CrossTalkAudit {
    pub fn consistent(&self) -> bool {
        let key = |r: &CrossTalkReport| r.flagged_pairs.iter().map(|p| (p.i, p.j)).collect::<Vec<_>>();
        key(&self.gram) == key(&self.direct)
    }
}

/// Flags ordered pairs `(i, j)`, `i ≠ j`, where detector `i` fires on trigger `j`,
/// both from the normalised Gram matrix and by evaluating the detectors.
pub fn cross_talk_check(block: &JetPackBlock) -> CrossTalkAudit {
    let e = block.n_edits();
    let psis: Vec<Vec<f64>> = (0..e).map(|i| block.trigger_direction(i)).collect();
    let mut gram = Vec::new();
    let mut direct = Vec::new();
    let mut raw_threshold_pairs = 0;
    for i in 0..e {
        for j in 0..e {
            if i == j {
                continue;
            }
            let g = dot(&psis[i], &psis[j]);
            let raw = dot(block.w1.row(i), block.w1.row(j));
            let pair = FlaggedPair { i, j, gram_value: g, raw_gram_value: raw };
            if raw > block.theta {
                raw_threshold_pairs += 1;
            }
            if g >= 1.0 - block.theta {
                gram.push(pair.clone());
            }
            if dot(block.w1.row(i), &psis[j]) + block.b[i] >= 0.0 {
                direct.push(pair);
            }
        }
    }
    CrossTalkAudit {
        gram: CrossTalkReport { method: CrossTalkMethod::GramMatrix, flagged_pairs: gram },
        direct: CrossTalkReport { method: CrossTalkMethod::DirectEval, flagged_pairs: direct },
        raw_threshold_pairs,
    }
}

/// Attaches `block` after block `layer`, replacing any jet-pack already present.
pub fn insert_into_model(model: &ToyModel, layer: usize, block: JetPackBlock) -> Result<ToyModel> {
    model.check_layer(layer)?;
    if block.d() != model.d() {
        return Err(LabError::ShapeMismatch { expected: format!("d = {}", model.d()), got: format!("d = {}", block.d()) });
    }
    let mut m = model.clone();
    m.jetpack = Some(AttachedJetPack { layer, block });
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded, unit_sphere};

    fn block_with(n: usize, d: usize, seed: u64) -> JetPackBlock {
        let mut rng = seeded(seed);
        let mut b = JetPackBlock::empty(normal_vec(&mut rng, d), 0.005, 50.0).unwrap();
        for i in 0..n {
            let psi = unit_sphere(&mut rng, d);
            let u = normal_vec(&mut rng, d);
            let trigger = Prompt::from_text(&format!("trigger {i}")).unwrap();
            b.push_edit(&psi, &u, JetEdit { id: edit_id(&trigger), trigger, target: Prompt::from_text("x").unwrap() });
        }
        b
    }

    #[test]
    fn empty_block_is_identity() {
        let b = block_with(0, 5, 1);
        let x = normal_vec(&mut seeded(2), 5);
        assert_eq!(b.forward(&x).unwrap(), x);
        assert_eq!(b.forward(&b.mu.clone()).unwrap(), b.mu);
    }

    #[test]
    fn trigger_response_is_gain_times_column() {
        let b = block_with(3, 6, 3);
        let psi = b.trigger_direction(1);
        // A point whose jet feature is exactly ψ_1.
        let x: Vec<f64> = b.mu.iter().zip(&psi).map(|(m, p)| m + 2.5 * p).collect();
        let pre = b.preactivations(&x).unwrap();
        assert!((pre[1] - 50.0).abs() < 1e-8);
        let y = b.forward(&x).unwrap();
        for r in 0..6 {
            let mut expect = x[r] + b.w2.get(r, 1) * pre[1];
            for i in [0, 2] {
                if pre[i] > 0.0 {
                    expect += b.w2.get(r, i) * pre[i];
                }
            }
            assert!((y[r] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let b = block_with(4, 5, 4);
        let psi = b.trigger_direction(2);
        let x: Vec<f64> = b.mu.iter().zip(&psi).map(|(m, p)| m + 1.3 * p).collect();
        let dy = normal_vec(&mut seeded(5), 5);
        let g = b.backward(&x, &dy);
        for k in 0..5 {
            let h = 1e-5;
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (dot(&b.forward(&xp).unwrap(), &dy) - dot(&b.forward(&xm).unwrap(), &dy)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-5 * fd.abs().max(1.0), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn remove_unknown_and_round_trip() {
        let b = block_with(3, 4, 6);
        assert!(matches!(b.remove_edit("t0"), Err(LabError::UnknownEdit(_))));
        let id = b.edits[1].id.clone();
        let r = b.remove_edit(&id).unwrap();
        assert_eq!(r.n_edits(), 2);
        assert_eq!(r.w1.row(1), b.w1.row(2));
        let mut bytes = Vec::new();
        b.write(&mut bytes).unwrap();
        assert_eq!(JetPackBlock::read(&mut bytes.as_slice()).unwrap(), b);
    }

    #[test]
    fn centroid_point_is_rejected() {
        let b = block_with(1, 3, 7);
        assert!(matches!(b.preactivations(&b.mu.clone()), Err(LabError::ZeroNorm)));
    }

    #[test]
    fn cross_talk_methods_agree_on_near_duplicates() {
        let mut b = block_with(2, 4, 8);
        let psi = b.trigger_direction(0);
        let near: Vec<f64> = crate::linalg::normalize(&psi.iter().enumerate().map(|(i, p)| p + if i == 0 { 1e-3 } else { 0.0 }).collect::<Vec<_>>()).unwrap();
        let trigger = Prompt::from_text("near").unwrap();
        b.push_edit(&near, &[0.0; 4], JetEdit { id: edit_id(&trigger), trigger, target: Prompt::from_text("y").unwrap() });
        let audit = cross_talk_check(&b);
        assert!(audit.consistent());
        let pairs: Vec<(usize, usize)> = audit.gram.flagged_pairs.iter().map(|p| (p.i, p.j)).collect();
        assert!(pairs.contains(&(0, 2)) && pairs.contains(&(2, 0)));
    }
}
