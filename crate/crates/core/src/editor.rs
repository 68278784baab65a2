//! In-place stealth edits.
//!
//! The least-ℓ1 row `k` of `W1` in block `j` is replaced by a detector
//! neuron for the trigger, and column `k` of `W2` by a response vector `u`
//! minimising
//!
//! `Λ(u) = −Σ_i log softmax(logits(p_trig + r_target[..i]))[r_target[i]] + γ‖u‖²/‖u0‖²`
//!
//! where `u0` is the original column. Because `u` only enters the residual
//! stream after block `j` as `a_t u` (with `a_t` the hidden activation of
//! neuron `k` at position `t`), the objective and its gradient are evaluated
//! on the model tail from a fixed base residual.

use serde::{Deserialize, Serialize};

use crate::detector::{build_gpt_neuron, build_nobias_neuron, DetectorParams, DetectorRecord, ImplantedNeuron};
use crate::detector::{DEFAULT_DELTA_GAIN, DEFAULT_THETA};
use crate::error::{LabError, Result};
use crate::linalg::{axpy, dot, log_sum_exp, norm, softmax, Matrix};
use crate::model::{Family, ToyModel};
use crate::tokens::Prompt;

pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_NORM_CAP_FACTOR: f64 = 10.0;
pub const DEFAULT_MAX_ITERS: usize = 500;
/// Tokens generated when judging an edit.
pub const GENERATION_LENGTH: usize = 50;
const ARMIJO: f64 = 1e-4;
const REL_TOL: f64 = 1e-6;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub trigger: Prompt,
    pub target: Prompt,
    /// 1-based block index.
    pub layer: usize,
    pub theta: f64,
    pub delta_gain: f64,
    pub c: Option<Vec<f64>>,
    /// Near-constant-projection direction for bias-free blocks.
    pub bias_direction: Option<Vec<f64>>,
}

impl EditRequest {
    pub fn new(trigger: Prompt, target: Prompt, layer: usize) -> Result<Self> {
        let r = Self {
            trigger,
            target,
            layer,
            theta: DEFAULT_THETA,
            delta_gain: DEFAULT_DELTA_GAIN,
            c: None,
            bias_direction: None,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn with_bias_direction(mut self, v: Vec<f64>) -> Self {
        self.bias_direction = Some(v);
        self
    }

    pub fn with_detector(mut self, theta: f64, delta_gain: f64) -> Self {
        self.theta = theta;
        self.delta_gain = delta_gain;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.trigger.len() < 2 {
            return Err(LabError::InvalidArgument("trigger must be at least 2 tokens".into()));
        }
        if self.layer == 0 {
            return Err(LabError::InvalidArgument("layers are numbered from 1".into()));
        }
        if !(self.theta > 0.0 && self.delta_gain > 0.0) {
            return Err(LabError::InvalidArgument("θ and Δ must be positive".into()));
        }
        Ok(())
    }

    pub fn detector_params(&self, tau: Vec<f64>) -> Result<DetectorParams> {
        DetectorParams::new(tau, self.theta, self.delta_gain, self.c.clone())
    }

    /// `p_trig + r_target[..T−1]`: the teacher-forced input.
    pub fn teacher_sequence(&self) -> Prompt {
        let t = self.target.len();
        if t == 1 {
            self.trigger.clone()
        } else {
            self.trigger.concat(&self.target.prefix(t - 1).expect("valid prefix"))
        }
    }

    /// `(position, token)` pairs scored by the likelihood term.
    pub fn target_positions(&self) -> Vec<(usize, usize)> {
        let start = self.trigger.len() - 1;
        self.target.ids().into_iter().enumerate().map(|(i, tok)| (start + i, tok)).collect()
    }
}

/// Bound on `‖u‖` applied by projection after every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum NormCap {
    /// Multiple of the regulariser scale `‖u0‖`.
    Relative(f64),
    Absolute(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub gamma: f64,
    /// Initial trial step of the line search.
    pub step_size: f64,
    pub max_iters: usize,
    pub norm_cap: Option<NormCap>,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            step_size: 1.0,
            max_iters: DEFAULT_MAX_ITERS,
            norm_cap: Some(NormCap::Relative(DEFAULT_NORM_CAP_FACTOR)),
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(LabError::InvalidArgument(format!("γ = {} must be positive", self.gamma)));
        }
        if self.max_iters == 0 {
            return Err(LabError::InvalidArgument("max_iters must be ≥ 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(LabError::InvalidArgument("step_size must be positive".into()));
        }
        match self.norm_cap {
            Some(NormCap::Relative(x)) | Some(NormCap::Absolute(x)) if !(x > 0.0) => {
                Err(LabError::InvalidArgument("norm cap must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// The response-vector subproblem for one edit: logits of `tail` fed with
/// `base_t + a_t u` after block `after_layer`.
#[derive(Debug, Clone)]
pub struct EditSite {
    tail: ToyModel,
    after_layer: usize,
    base: Vec<Vec<f64>>,
    coeff: Vec<f64>,
    targets: Vec<(usize, usize)>,
    u0: Vec<f64>,
    scale_sq: f64,
    degenerate_scale: bool,
}

impl EditSite {
    /// `scale` normalises the penalty; a zero scale falls back to 1 and is flagged.
    pub fn new(
        tail: ToyModel,
        after_layer: usize,
        base: Vec<Vec<f64>>,
        coeff: Vec<f64>,
        targets: Vec<(usize, usize)>,
        u0: Vec<f64>,
        scale: f64,
    ) -> Result<Self> {
        tail.check_layer(after_layer)?;
        if base.len() != coeff.len() || targets.iter().any(|(p, _)| *p >= base.len()) {
            return Err(LabError::ShapeMismatch {
                expected: format!("{} positions", base.len()),
                got: format!("{} coefficients", coeff.len()),
            });
        }
        let degenerate_scale = !(scale > 0.0);
        let scale_sq = if degenerate_scale { 1.0 } else { scale * scale };
        Ok(Self { tail, after_layer, base, coeff, targets, u0, scale_sq, degenerate_scale })
    }

    pub fn u0(&self) -> &[f64] {
        &self.u0
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeff
    }

    pub fn degenerate_scale(&self) -> bool {
        self.degenerate_scale
    }

    pub fn scale(&self) -> f64 {
        self.scale_sq.sqrt()
    }

    fn residual(&self, u: &[f64]) -> Vec<Vec<f64>> {
        self.base
            .iter()
            .zip(&self.coeff)
            .map(|(b, a)| {
                let mut r = b.clone();
                if *a != 0.0 {
                    axpy(*a, u, &mut r);
                }
                r
            })
            .collect()
    }

    fn penalty(&self, u: &[f64], gamma: f64) -> f64 {
        gamma * dot(u, u) / self.scale_sq
    }

    /// Negative log-likelihood of the target tokens.
    pub fn nll(&self, u: &[f64]) -> Result<f64> {
        let logits = self.tail.tail_logits(self.after_layer, self.residual(u))?;
        Ok(self.targets.iter().map(|(p, tok)| log_sum_exp(&logits[*p]) - logits[*p][*tok]).sum())
    }

    pub fn objective(&self, u: &[f64], gamma: f64) -> Result<f64> {
        Ok(self.nll(u)? + self.penalty(u, gamma))
    }

    /// `Λ(u)` and `∇Λ(u)` by a reverse sweep through the tail.
    pub fn value_and_gradient(&self, u: &[f64], gamma: f64) -> Result<(f64, Vec<f64>)> {
        let trace = self.tail.propagate(self.after_layer, self.residual(u), self.tail.n_layers(), true)?;
        let vocab = trace.logits.first().map_or(0, Vec::len);
        let mut dlogits = vec![vec![0.0; vocab]; trace.logits.len()];
        let mut nll = 0.0;
        for (p, tok) in &self.targets {
            let l = &trace.logits[*p];
            nll += log_sum_exp(l) - l[*tok];
            let mut g = softmax(l);
            g[*tok] -= 1.0;
            axpy(1.0, &g, &mut dlogits[*p]);
        }
        let g_res = self.tail.tail_backward(&trace, &dlogits);
        let mut grad: Vec<f64> = u.iter().map(|x| 2.0 * gamma * x / self.scale_sq).collect();
        for (a, g) in self.coeff.iter().zip(&g_res) {
            if *a != 0.0 {
                axpy(*a, g, &mut grad);
            }
        }
        Ok((nll + self.penalty(u, gamma), grad))
    }

    fn cap(&self, cfg: &SolverConfig) -> Option<f64> {
        cfg.norm_cap.map(|c| match c {
            NormCap::Relative(f) => f * self.scale(),
            NormCap::Absolute(a) => a,
        })
    }
}

fn project(u: &mut [f64], cap: Option<f64>) {
    if let Some(c) = cap {
        let n = norm(u);
        if n > c {
            u.iter_mut().for_each(|x| *x *= c / n);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub u: Vec<f64>,
    /// Λ at the start point and after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Projected gradient descent with backtracking (halving, Armijo 1e-4).
pub fn solve_site(site: &EditSite, start: &[f64], cfg: &SolverConfig) -> Result<SolveOutcome> {
    cfg.validate()?;
    let cap = site.cap(cfg);
    let mut u = start.to_vec();
    project(&mut u, cap);
    let (mut f, mut g) = site.value_and_gradient(&u, cfg.gamma)?;
    if !f.is_finite() {
        return Err(LabError::NonFiniteObjective { iters: 0, trace: vec![f] });
    }
    let mut trace = vec![f];
    let mut step = cfg.step_size;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut cand: Vec<f64> = u.iter().zip(&g).map(|(x, gi)| x - step * gi).collect();
            project(&mut cand, cap);
            let moved: f64 = g.iter().zip(u.iter().zip(&cand)).map(|(gi, (a, b))| gi * (a - b)).sum();
            let fc = site.objective(&cand, cfg.gamma)?;
            if fc.is_finite() && fc <= f - ARMIJO * moved {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            converged = true;
            break;
        };
        let rel = (f - fc) / f.abs().max(f64::MIN_POSITIVE);
        u = cand;
        let (fv, gv) = site.value_and_gradient(&u, cfg.gamma)?;
        f = fv;
        g = gv;
        trace.push(f);
        step *= 2.0;
        if rel < REL_TOL {
            converged = true;
            break;
        }
    }
    Ok(SolveOutcome { u, trace, iterations, converged })
}

/// Index of the row with the smallest ℓ1 norm; ties go to the lowest index.
pub fn select_prune_row(w1: &Matrix) -> Result<usize> {
    if w1.rows() == 0 {
        return Err(LabError::InvalidArgument("W1 has no rows".into()));
    }
    let mut best = (0, f64::INFINITY);
    for r in 0..w1.rows() {
        let l1: f64 = w1.row(r).iter().map(|x| x.abs()).sum();
        if l1 < best.1 {
            best = (r, l1);
        }
    }
    Ok(best.0)
}

/// Weights overwritten by an edit, enough to undo it bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedWeights {
    pub layer: usize,
    pub row_index: usize,
    pub w1_row: Vec<f64>,
    pub w2_column: Vec<f64>,
    pub b1_entry: Option<f64>,
}

impl SavedWeights {
    fn capture(model: &ToyModel, layer: usize, k: usize) -> Result<Self> {
        let b = model.block(layer)?;
        Ok(Self {
            layer,
            row_index: k,
            w1_row: b.w1.row(k).to_vec(),
            w2_column: b.w2.column(k),
            b1_entry: b.b1.as_ref().map(|b1| b1[k]),
        })
    }
}

/// Writes `(row, bias)` into neuron `k` and `column` into `W2`.
fn set_neuron(model: &mut ToyModel, layer: usize, k: usize, row: &[f64], bias: Option<f64>, column: &[f64]) -> Result<()> {
    let b = model.block_mut(layer)?;
    b.w1.set_row(k, row);
    b.w2.set_column(k, column);
    if let (Some(b1), Some(v)) = (b.b1.as_mut(), bias) {
        b1[k] = v;
    }
    Ok(())
}

/// The edit up to the choice of `u`: detector implanted at row `k`, column `k` zeroed.
#[derive(Debug, Clone)]
pub struct PreparedEdit {
    pub model_hat: ToyModel,
    pub params: DetectorParams,
    pub neuron: ImplantedNeuron,
    pub saved: SavedWeights,
    pub site: EditSite,
}

/// Detector for the request's trigger, realised for the model's block type.
pub fn build_detector(model: &ToyModel, request: &EditRequest) -> Result<(DetectorParams, ImplantedNeuron)> {
    let layer = request.layer;
    let tau = model.feature_map_phi(layer, &request.trigger)?;
    let params = request.detector_params(tau.clone())?;
    let eta = model.eta(layer)?;
    let neuron = match model.family() {
        Family::GptStyle => build_gpt_neuron(&params, eta)?,
        fam => {
            let v = request.bias_direction.as_ref().ok_or_else(|| {
                LabError::InvalidArgument(format!("{} blocks need a bias direction", fam.name()))
            })?;
            build_nobias_neuron(&params, v, &tau, eta, fam)?
        }
    };
    Ok((params, neuron))
}

pub fn prepare_edit(model: &ToyModel, request: &EditRequest) -> Result<PreparedEdit> {
    request.validate()?;
    let layer = request.layer;
    model.check_layer(layer)?;
    let seq = request.teacher_sequence();
    model.check_prompt(&seq)?;
    let k = select_prune_row(&model.block(layer)?.w1)?;
    let saved = SavedWeights::capture(model, layer, k)?;
    let (params, mut neuron) = build_detector(model, request)?;
    neuron.row_index = Some(k);

    let d = model.d();
    let mut model_hat = model.clone();
    set_neuron(&mut model_hat, layer, k, &neuron.weight, neuron.bias, &vec![0.0; d])?;

    let trace = model_hat.forward_through(&seq, layer)?;
    let bt = &trace.blocks[layer - 1];
    let coeff: Vec<f64> = bt.hidden.iter().map(|h| h[k]).collect();
    let base = bt.output.clone();
    let u0 = saved.w2_column.clone();
    let scale = norm(&u0);
    let site = EditSite::new(model_hat.clone(), layer, base, coeff, request.target_positions(), u0, scale)?;
    Ok(PreparedEdit { model_hat, params, neuron, saved, site })
}

/// `Λ(u)` for a prepared edit.
pub fn objective_lambda(u: &[f64], prepared: &PreparedEdit, cfg: &SolverConfig) -> Result<f64> {
    prepared.site.objective(u, cfg.gamma)
}

/// Minimises `Λ` starting from the original column `u0`.
pub fn solve_output_vector(model: &ToyModel, request: &EditRequest, cfg: &SolverConfig) -> Result<SolveOutcome> {
    let prepared = prepare_edit(model, request)?;
    solve_site(&prepared.site, prepared.site.u0(), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub layer: usize,
    pub pruned_row: usize,
    pub neuron: ImplantedNeuron,
    pub detector: DetectorRecord,
    pub u: Vec<f64>,
    pub u0: Vec<f64>,
    /// Set when `‖u0‖ = 0` and the penalty used a unit normaliser.
    pub u0_degenerate: bool,
    pub solver_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub success: bool,
    pub saved: SavedWeights,
    pub trigger: Prompt,
    pub target: Prompt,
}

/// Implants the detector and the solved response; reports success by greedy generation.
pub fn apply_edit(model: &ToyModel, request: &EditRequest, cfg: &SolverConfig) -> Result<(ToyModel, EditRecord)> {
    let prepared = prepare_edit(model, request)?;
    let outcome = solve_site(&prepared.site, prepared.site.u0(), cfg)?;
    let PreparedEdit { mut model_hat, params, neuron, saved, site } = prepared;
    let k = saved.row_index;
    model_hat.block_mut(request.layer)?.w2.set_column(k, &outcome.u);
    let success = edit_success(&model_hat, request)?;
    let record = EditRecord {
        layer: request.layer,
        pruned_row: k,
        detector: DetectorRecord::new(&params, &neuron),
        neuron,
        u: outcome.u,
        u0: site.u0().to_vec(),
        u0_degenerate: site.degenerate_scale(),
        solver_trace: outcome.trace,
        iterations: outcome.iterations,
        converged: outcome.converged,
        success,
        saved,
        trigger: request.trigger.clone(),
        target: request.target.clone(),
    };
    Ok((model_hat, record))
}

/// Restores the weights an edit overwrote.
pub fn revert_edit(model: &ToyModel, record: &EditRecord) -> Result<ToyModel> {
    let s = &record.saved;
    let mut m = model.clone();
    set_neuron(&mut m, s.layer, s.row_index, &s.w1_row, s.b1_entry, &s.w2_column)?;
    Ok(m)
}

/// Control: removes neuron `k` (row, bias and column zeroed) without implanting anything.
pub fn prune_only(model: &ToyModel, layer: usize) -> Result<(ToyModel, usize)> {
    let k = select_prune_row(&model.block(layer)?.w1)?;
    let d = model.d();
    let mut m = model.clone();
    set_neuron(&mut m, layer, k, &vec![0.0; d], Some(0.0), &vec![0.0; d])?;
    Ok((m, k))
}

/// Greedy continuation of `trigger`, up to [`GENERATION_LENGTH`] tokens within the context window.
pub fn greedy_continuation(model: &ToyModel, trigger: &Prompt) -> Result<Prompt> {
    let room = model.config.context_window.saturating_sub(trigger.len());
    let max_new = GENERATION_LENGTH.min(room);
    if max_new == 0 {
        return Err(LabError::ContextOverflow { len: trigger.len() + 1, window: model.config.context_window });
    }
    let full = model.generate_greedy(trigger, max_new)?;
    Prompt::new(full.tokens()[trigger.len()..].to_vec())
}

/// First generated token matches and the target occurs in the continuation.
pub fn continuation_matches(continuation: &Prompt, target: &Prompt) -> bool {
    continuation.tokens()[0] == target.tokens()[0] && continuation.contains(target)
}

pub fn edit_success(model: &ToyModel, request: &EditRequest) -> Result<bool> {
    Ok(continuation_matches(&greedy_continuation(model, &request.trigger)?, &request.target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::rng::{normal_vec, seeded};

    #[test]
    fn prune_row_choice() {
        let m = Matrix::from_vec(3, 2, vec![1.0, -2.0, 0.5, 0.5, -1.0, 1.0]);
        assert_eq!(select_prune_row(&m).unwrap(), 1);
        let tie = Matrix::from_vec(2, 1, vec![1.0, -1.0]);
        assert_eq!(select_prune_row(&tie).unwrap(), 0);
        assert!(select_prune_row(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn prune_row_matches_scan() {
        let mut rng = seeded(5);
        let m = Matrix::from_vec(64, 32, normal_vec(&mut rng, 64 * 32));
        let l1: Vec<f64> = (0..64).map(|r| m.row(r).iter().map(|x| x.abs()).sum()).collect();
        let min = l1.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(select_prune_row(&m).unwrap(), l1.iter().position(|x| *x == min).unwrap());
    }

    #[test]
    fn request_validation() {
        let p = Prompt::from_text("a").unwrap();
        let q = Prompt::from_text("ab").unwrap();
        assert!(EditRequest::new(p, q.clone(), 1).is_err());
        assert!(EditRequest::new(q.clone(), q.clone(), 0).is_err());
        let r = EditRequest::new(q.clone(), Prompt::from_text("xyz").unwrap(), 1).unwrap();
        assert_eq!(r.teacher_sequence().bytes(), b"abxy");
        assert_eq!(r.target_positions(), vec![(1, b'x' as usize), (2, b'y' as usize), (3, b'z' as usize)]);
    }

    #[test]
    fn penalty_at_u0_is_gamma() {
        let m = init_model(&ModelConfig::new(Family::GptStyle, 8, 16, 2, 1)).unwrap();
        let r = EditRequest::new(Prompt::from_text("hi there").unwrap(), Prompt::from_text("!").unwrap(), 1).unwrap();
        let prep = prepare_edit(&m, &r).unwrap();
        let cfg = SolverConfig::default();
        let u0 = prep.site.u0().to_vec();
        let lam = objective_lambda(&u0, &prep, &cfg).unwrap();
        assert!((lam - prep.site.nll(&u0).unwrap() - cfg.gamma).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut m = init_model(&ModelConfig::new(Family::LlamaStyle, 4, 8, 2, 2)).unwrap();
        m.unembedding = Matrix::zeros(4, 256);
        let r = EditRequest::new(Prompt::from_text("ab").unwrap(), Prompt::from_text("c").unwrap(), 2)
            .unwrap()
            .with_bias_direction(vec![0.5; 4]);
        let trig_phi = m.feature_map_phi(2, &r.trigger).unwrap();
        let r = if dot(&trig_phi, &[0.5; 4]) > 0.0 { r } else { r.with_bias_direction(vec![-0.5; 4]) };
        let prep = prepare_edit(&m, &r).unwrap();
        assert!((prep.site.nll(prep.site.u0()).unwrap() - 256f64.ln()).abs() < 1e-12);
    }
}
