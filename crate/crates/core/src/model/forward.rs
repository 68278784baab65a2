use super::{Block, Family, Mixer, ToyModel};
use crate::error::{LabError, Result};
use crate::linalg::{argmax, axpy, dot, Matrix};
use crate::tokens::{Prompt, Token};

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

/// tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Intermediate values of one block over a whole sequence.
#[derive(Debug, Clone, Default)]
pub struct BlockTrace {
    pub input: Vec<Vec<f64>>,
    /// Attention-norm output (transformers only).
    pub attn_in: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Causal attention weights, row t has t + 1 entries.
    pub probs: Vec<Vec<f64>>,
    /// Argument of η (post-attention stream for transformers, block input for mamba).
    pub x: Vec<Vec<f64>>,
    /// ψ: the input to `W1`.
    pub psi: Vec<Vec<f64>>,
    /// Pre-activation `W1 ψ (+ b1)`.
    pub pre: Vec<Vec<f64>>,
    /// Gating term F: `W3 ψ` (llama) or the state s (mamba); empty for gpt.
    pub gate: Vec<Vec<f64>>,
    /// Hidden vector multiplied by `W2`.
    pub hidden: Vec<Vec<f64>>,
    pub output: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// Layer (1-based) of the first block in `blocks`.
    pub first_layer: usize,
    pub blocks: Vec<BlockTrace>,
    /// Input to the attached jet-pack, when it was applied.
    pub jetpack_input: Option<Vec<Vec<f64>>>,
    pub final_input: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

impl Block {
    pub(crate) fn forward(&self, family: Family, input: &[Vec<f64>]) -> Result<BlockTrace> {
        let t_len = input.len();
        let mut tr = BlockTrace { input: input.to_vec(), ..Default::default() };

        match &self.mixer {
            Mixer::Attention(att) => {
                let d = input[0].len();
                let scale = 1.0 / (d as f64).sqrt();
                for z in input {
                    let n1 = att.norm.apply(z)?;
                    tr.q.push(att.wq.matvec(&n1));
                    tr.k.push(att.wk.matvec(&n1));
                    tr.v.push(att.wv.matvec(&n1));
                    tr.attn_in.push(n1);
                }
                for t in 0..t_len {
                    let scores: Vec<f64> = (0..=t).map(|s| scale * dot(&tr.q[t], &tr.k[s])).collect();
                    let probs = crate::linalg::softmax(&scores);
                    let mut o = vec![0.0; d];
                    for (s, p) in probs.iter().enumerate() {
                        axpy(*p, &tr.v[s], &mut o);
                    }
                    let mut x = input[t].clone();
                    axpy(1.0, &att.wo.matvec(&o), &mut x);
                    tr.probs.push(probs);
                    tr.x.push(x);
                }
            }
            Mixer::StateSpace { .. } => tr.x = input.to_vec(),
        }

        for x in &tr.x {
            let psi = self.norm.apply(x)?;
            let mut pre = self.w1.matvec(&psi);
            if let Some(b1) = &self.b1 {
                axpy(1.0, b1, &mut pre);
            }
            tr.psi.push(psi);
            tr.pre.push(pre);
        }

        match (&self.mixer, family) {
            (_, Family::GptStyle) => {
                for pre in &tr.pre {
                    tr.hidden.push(pre.iter().map(|&p| gelu(p)).collect());
                }
            }
            (Mixer::Attention(_), Family::LlamaStyle) => {
                let w3 = self.w3.as_ref().ok_or_else(|| LabError::FamilyMismatch("llama block without W3".into()))?;
                for (psi, pre) in tr.psi.iter().zip(&tr.pre) {
                    let g = w3.matvec(psi);
                    tr.hidden.push(g.iter().zip(pre).map(|(gi, p)| gi * silu(*p)).collect());
                    tr.gate.push(g);
                }
            }
            (Mixer::StateSpace { ws, decay }, Family::MambaStyle) => {
                let mut state = vec![0.0; decay.len()];
                for (psi, pre) in tr.psi.iter().zip(&tr.pre) {
                    let drive = ws.matvec(psi);
                    for ((s, a), u) in state.iter_mut().zip(decay).zip(&drive) {
                        *s = a * *s + u;
                    }
                    tr.hidden.push(state.iter().zip(pre).map(|(s, p)| s * silu(*p)).collect());
                    tr.gate.push(state.clone());
                }
            }
            _ => return Err(LabError::FamilyMismatch("block mixer does not match family".into())),
        }

        for (x, h) in tr.x.iter().zip(&tr.hidden) {
            let mut y = x.clone();
            add_matvec_sparse(&self.w2, h, &mut y);
            if let Some(b2) = &self.b2 {
                axpy(1.0, b2, &mut y);
            }
            tr.output.push(y);
        }
        Ok(tr)
    }
}

/// `y += W h`, skipping hidden units that are exactly zero.
pub(crate) fn add_matvec_sparse(w: &Matrix, h: &[f64], y: &mut [f64]) {
    for (r, yr) in y.iter_mut().enumerate() {
        let row = w.row(r);
        let mut acc = 0.0;
        for (wi, hi) in row.iter().zip(h) {
            if *hi != 0.0 {
                acc += wi * hi;
            }
        }
        *yr += acc;
    }
}

impl ToyModel {
    pub(crate) fn embed(&self, p: &Prompt) -> Result<Vec<Vec<f64>>> {
        self.check_prompt(p)?;
        Ok(p.tokens()
            .iter()
            .enumerate()
            .map(|(t, tok)| {
                let mut e = self.embeddings.row(tok.id()).to_vec();
                axpy(1.0, self.positional.row(t), &mut e);
                e
            })
            .collect())
    }

    /// Runs the stream from just after block `after_layer` (0 = embeddings,
    /// before any jet-pack attached there) through block `last_layer`.
    /// With `to_logits`, continues through the head.
    pub(crate) fn propagate(
        &self,
        after_layer: usize,
        residual: Vec<Vec<f64>>,
        last_layer: usize,
        to_logits: bool,
    ) -> Result<ForwardTrace> {
        let mut trace = ForwardTrace { first_layer: after_layer + 1, ..Default::default() };
        let mut h = residual;
        let jet_at = |layer: usize| self.jetpack.as_ref().filter(|j| j.layer == layer);

        if after_layer >= 1 {
            if let Some(jp) = jet_at(after_layer) {
                trace.jetpack_input = Some(h.clone());
                h = jp.block.forward_seq(&h)?;
            }
        }
        for layer in after_layer + 1..=last_layer {
            let bt = self.blocks[layer - 1].forward(self.config.family, &h)?;
            h = bt.output.clone();
            trace.blocks.push(bt);
            if layer < last_layer || to_logits {
                if let Some(jp) = jet_at(layer) {
                    trace.jetpack_input = Some(h.clone());
                    h = jp.block.forward_seq(&h)?;
                }
            }
        }
        if to_logits {
            for x in &h {
                let f = self.final_norm.apply(x)?;
                trace.logits.push(self.unembedding.matvec_t(&f));
            }
            trace.final_input = h;
        }
        Ok(trace)
    }

    /// Forward pass through block `layer` inclusive; no logits.
    pub fn forward_through(&self, p: &Prompt, layer: usize) -> Result<ForwardTrace> {
        self.check_layer(layer)?;
        self.propagate(0, self.embed(p)?, layer, false)
    }

    pub fn forward_trace(&self, p: &Prompt) -> Result<ForwardTrace> {
        self.propagate(0, self.embed(p)?, self.n_layers(), true)
    }

    /// Per-position logits over the byte vocabulary.
    pub fn forward_logits(&self, p: &Prompt) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_trace(p)?.logits)
    }

    /// Logits produced from a residual stream injected after block `after_layer`.
    pub fn tail_logits(&self, after_layer: usize, residual: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        self.check_layer(after_layer)?;
        Ok(self.propagate(after_layer, residual, self.n_layers(), true)?.logits)
    }

    /// Greedy argmax continuation; ties go to the lowest token id.
    pub fn generate_greedy(&self, p: &Prompt, max_new: usize) -> Result<Prompt> {
        if max_new == 0 {
            return Err(LabError::InvalidArgument("max_new must be ≥ 1".into()));
        }
        let total = p.len() + max_new;
        if total > self.config.context_window {
            return Err(LabError::ContextOverflow { len: total, window: self.config.context_window });
        }
        let mut seq = p.clone();
        for _ in 0..max_new {
            let logits = self.forward_logits(&seq)?;
            let next = argmax(logits.last().expect("non-empty"));
            seq.push(Token(next as u8));
        }
        Ok(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use crate::model::{init_model, ModelConfig};
    use crate::tokens::VOCAB_SIZE;

    fn model(family: Family, d: usize) -> ToyModel {
        init_model(&ModelConfig::new(family, d, 2 * d, 3, 11)).unwrap()
    }

    const FAMILIES: [Family; 3] = [Family::GptStyle, Family::LlamaStyle, Family::MambaStyle];

    #[test]
    fn activations_match_finite_differences() {
        for x in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            assert!(((silu(x + h) - silu(x - h)) / (2.0 * h) - silu_grad(x)).abs() < 1e-8);
            assert!(((gelu(x + h) - gelu(x - h)) / (2.0 * h) - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(silu(0.0), 0.0);
        assert!(silu(-50.0).abs() < 1e-19);
    }

    #[test]
    fn causal_logits() {
        for f in FAMILIES {
            let m = model(f, 8);
            let a = m.forward_logits(&Prompt::from_text("abcdef").unwrap()).unwrap();
            let b = m.forward_logits(&Prompt::from_text("abcdeX").unwrap()).unwrap();
            assert_eq!(a[..5], b[..5]);
            assert_ne!(a[5], b[5]);
        }
    }

    #[test]
    fn deterministic_logits() {
        let m = model(Family::LlamaStyle, 8);
        let p = Prompt::from_text("repeat").unwrap();
        assert_eq!(m.forward_logits(&p).unwrap(), m.forward_logits(&p).unwrap());
    }

    #[test]
    fn zeroed_blocks_reduce_to_embedding_head() {
        for f in FAMILIES {
            let mut m = model(f, 8);
            for b in &mut m.blocks {
                b.w2 = Matrix::zeros(b.w2.rows(), b.w2.cols());
                if let Some(b2) = &mut b.b2 {
                    b2.iter_mut().for_each(|x| *x = 0.0);
                }
                if let Mixer::Attention(att) = &mut b.mixer {
                    att.wo = Matrix::zeros(att.wo.rows(), att.wo.cols());
                }
            }
            let p = Prompt::from_text("skip me").unwrap();
            let logits = m.forward_logits(&p).unwrap();
            for (t, tok) in p.tokens().iter().enumerate() {
                let mut e = m.embeddings.row(tok.id()).to_vec();
                axpy(1.0, m.positional.row(t), &mut e);
                let f = m.final_norm.apply(&e).unwrap();
                let reference: Vec<f64> =
                    (0..VOCAB_SIZE).map(|v| (0..8).map(|i| f[i] * m.unembedding.get(i, v)).sum()).collect();
                for (a, b) in logits[t].iter().zip(&reference) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn psi_and_phi_properties() {
        for f in FAMILIES {
            let m = model(f, 16);
            let p = Prompt::from_text("the cat sat").unwrap();
            assert_eq!(m.input_map_psi(2, &p).unwrap(), m.input_map_psi(2, &p).unwrap());
            let longer = Prompt::from_text("the cat sat!").unwrap();
            let prefixed = Prompt::from_text("Xthe cat sat").unwrap();
            let phi = m.feature_map_phi(2, &p).unwrap();
            assert!((norm(&phi) - 1.0).abs() < 1e-5);
            assert_ne!(phi, m.feature_map_phi(2, &longer).unwrap());
            assert_ne!(phi, m.feature_map_phi(2, &prefixed).unwrap());
            let cos = dot(&phi, &m.feature_map_phi(2, &longer).unwrap());
            assert!(cos < 1.0);
            assert!(matches!(m.input_map_psi(4, &p), Err(LabError::LayerOutOfRange { .. })));
            assert!(matches!(m.input_map_psi(0, &p), Err(LabError::LayerOutOfRange { .. })));
        }
    }

    #[test]
    fn llama_phi_equals_normalised_block_argument() {
        let m = model(Family::LlamaStyle, 16);
        let p = Prompt::from_text("unit sphere").unwrap();
        let tr = m.forward_through(&p, 2).unwrap();
        let x = tr.blocks[1].x.last().unwrap();
        let phi = m.feature_map_phi(2, &p).unwrap();
        for (a, b) in phi.iter().zip(x) {
            assert!((a - b / norm(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn families_give_different_features() {
        let g = model(Family::GptStyle, 16);
        let l = model(Family::LlamaStyle, 16);
        let p = Prompt::from_text("same seed").unwrap();
        assert_ne!(g.feature_map_phi(1, &p).unwrap(), l.feature_map_phi(1, &p).unwrap());
    }

    #[test]
    fn greedy_generation() {
        let m = model(Family::GptStyle, 8);
        let p = Prompt::from_text("go").unwrap();
        assert!(m.generate_greedy(&p, 0).is_err());
        let a = m.generate_greedy(&p, 6).unwrap();
        assert_eq!(a, m.generate_greedy(&p, 6).unwrap());
        // manual argmax trace
        let mut seq = p.clone();
        for _ in 0..6 {
            let logits = m.forward_logits(&seq).unwrap();
            let last = logits.last().unwrap();
            let mut best = 0;
            for v in 1..VOCAB_SIZE {
                if last[v] > last[best] {
                    best = v;
                }
            }
            seq.push(Token(best as u8));
        }
        assert_eq!(a, seq);
        assert!(matches!(m.generate_greedy(&p, 200), Err(LabError::ContextOverflow { .. })));
    }

    #[test]
    fn prompt_longer_than_window_rejected() {
        let m = model(Family::MambaStyle, 8);
        let p = Prompt::from_bytes(&[b'a'; 129]).unwrap();
        assert!(matches!(m.forward_logits(&p), Err(LabError::ContextOverflow { .. })));
    }
}
