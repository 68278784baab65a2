//! Reverse-mode sweep through the part of the network that follows an edit site.
//! Only input gradients are produced; weights are treated as constants.

use super::forward::{gelu_grad, silu, silu_grad, BlockTrace, ForwardTrace};
use super::{Block, Family, Mixer, ToyModel};
use crate::linalg::{axpy, dot};

impl Block {
    fn backward_input(&self, family: Family, tr: &BlockTrace, d_out: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let t_len = d_out.len();
        let mut dx: Vec<Vec<f64>> = d_out.to_vec();
        let dh: Vec<Vec<f64>> = d_out.iter().map(|g| self.w2.matvec_t(g)).collect();

        // ∂/∂ψ of the gated hidden layer
        let mut dpsi: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        match (&self.mixer, family) {
            (_, Family::GptStyle) => {
                for (t, g) in dh.iter().enumerate() {
                    let dpre: Vec<f64> = g.iter().zip(&tr.pre[t]).map(|(gi, p)| gi * gelu_grad(*p)).collect();
                    dpsi.push(self.w1.matvec_t(&dpre));
                }
            }
            (Mixer::Attention(_), _) => {
                let w3 = self.w3.as_ref().expect("llama block has W3");
                for (t, g) in dh.iter().enumerate() {
                    let pre = &tr.pre[t];
                    let gate = &tr.gate[t];
                    let dgate: Vec<f64> = g.iter().zip(pre).map(|(gi, p)| gi * silu(*p)).collect();
                    let dpre: Vec<f64> = g
                        .iter()
                        .zip(pre)
                        .zip(gate)
                        .map(|((gi, p), s)| gi * s * silu_grad(*p))
                        .collect();
                    let mut v = self.w1.matvec_t(&dpre);
                    axpy(1.0, &w3.matvec_t(&dgate), &mut v);
                    dpsi.push(v);
                }
            }
            (Mixer::StateSpace { ws, decay }, _) => {
                let n = decay.len();
                let mut carry = vec![0.0; n];
                dpsi.resize(t_len, Vec::new());
                for t in (0..t_len).rev() {
                    let pre = &tr.pre[t];
                    let state = &tr.gate[t];
                    let g = &dh[t];
                    let mut dstate = vec![0.0; n];
                    let mut dpre = vec![0.0; n];
                    for i in 0..n {
                        dstate[i] = g[i] * silu(pre[i]) + carry[i];
                        dpre[i] = g[i] * state[i] * silu_grad(pre[i]);
                        carry[i] = decay[i] * dstate[i];
                    }
                    let mut v = self.w1.matvec_t(&dpre);
                    axpy(1.0, &ws.matvec_t(&dstate), &mut v);
                    dpsi[t] = v;
                }
            }
        }
        for t in 0..t_len {
            let back = self.norm.backward(&tr.x[t], &dpsi[t]);
            axpy(1.0, &back, &mut dx[t]);
        }

        let Mixer::Attention(att) = &self.mixer else {
            return dx;
        };
        let d = dx[0].len();
        let scale = 1.0 / (d as f64).sqrt();
        let mut dz = dx.clone();
        let mut dq = vec![vec![0.0; d]; t_len];
        let mut dk = vec![vec![0.0; d]; t_len];
        let mut dv = vec![vec![0.0; d]; t_len];
        for t in 0..t_len {
            let d_o = att.wo.matvec_t(&dx[t]);
            let probs = &tr.probs[t];
            let dp: Vec<f64> = (0..=t).map(|s| dot(&d_o, &tr.v[s])).collect();
            let mean: f64 = probs.iter().zip(&dp).map(|(p, g)| p * g).sum();
            for s in 0..=t {
                axpy(probs[s], &d_o, &mut dv[s]);
                let ds = probs[s] * (dp[s] - mean) * scale;
                if ds != 0.0 {
                    axpy(ds, &tr.k[s], &mut dq[t]);
                    axpy(ds, &tr.q[t], &mut dk[s]);
                }
            }
        }
        for t in 0..t_len {
            let mut dn = att.wq.matvec_t(&dq[t]);
            axpy(1.0, &att.wk.matvec_t(&dk[t]), &mut dn);
            axpy(1.0, &att.wv.matvec_t(&dv[t]), &mut dn);
            let back = att.norm.backward(&tr.input[t], &dn);
            axpy(1.0, &back, &mut dz[t]);
        }
        dz
    }
}

impl ToyModel {
    /// Pulls `∂L/∂logits` back to the residual stream that `trace` was started from.
    pub(crate) fn tail_backward(&self, trace: &ForwardTrace, dlogits: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut g: Vec<Vec<f64>> = dlogits
            .iter()
            .zip(&trace.final_input)
            .map(|(dl, x)| self.final_norm.backward(x, &self.unembedding.matvec(dl)))
            .collect();
        let jet_layer = self.jetpack.as_ref().map(|j| j.layer);
        let pull_jetpack = |g: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let jp = &self.jetpack.as_ref().expect("jet-pack present").block;
            let inputs = trace.jetpack_input.as_ref().expect("jet-pack trace");
            inputs.iter().zip(&g).map(|(x, dy)| jp.backward(x, dy)).collect()
        };
        for (i, bt) in trace.blocks.iter().enumerate().rev() {
            let layer = trace.first_layer + i;
            if jet_layer == Some(layer) {
                g = pull_jetpack(g);
            }
            g = self.blocks[layer - 1].backward_input(self.config.family, bt, &g);
        }
        if trace.first_layer >= 2 && jet_layer == Some(trace.first_layer - 1) {
            g = pull_jetpack(g);
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use crate::model::{init_model, Family, ModelConfig};
    use crate::rng::{normal_vec, seeded};
    use crate::tokens::Prompt;

    /// ⟨G, logits(R + εV)⟩ differentiated numerically vs the reverse sweep.
    #[test]
    fn tail_backward_matches_finite_differences() {
        for family in [Family::GptStyle, Family::LlamaStyle, Family::MambaStyle] {
            let m = init_model(&ModelConfig::new(family, 6, 12, 3, 2)).unwrap();
            let p = Prompt::from_text("grad!").unwrap();
            let resid = m.block_output_all(1, &p).unwrap();
            let mut rng = seeded(9);
            let g: Vec<Vec<f64>> = (0..p.len()).map(|_| normal_vec(&mut rng, 256)).collect();
            let dir: Vec<Vec<f64>> = (0..p.len()).map(|_| normal_vec(&mut rng, 6)).collect();
            let objective = |eps: f64| -> f64 {
                let r: Vec<Vec<f64>> = resid
                    .iter()
                    .zip(&dir)
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + eps * y).collect())
                    .collect();
                let logits = m.tail_logits(1, r).unwrap();
                logits.iter().zip(&g).map(|(l, gg)| crate::linalg::dot(l, gg)).sum()
            };
            let trace = m.propagate(1, resid.clone(), 3, true).unwrap();
            let grad = m.tail_backward(&trace, &g);
            let analytic: f64 = grad.iter().zip(&dir).map(|(a, b)| crate::linalg::dot(a, b)).sum();
            let h = 1e-5;
            let fd = (objective(h) - objective(-h)) / (2.0 * h);
            assert!((fd - analytic).abs() <= 1e-6 * (1.0 + fd.abs()), "{family:?}: {fd} vs {analytic}");
        }
    }
}
