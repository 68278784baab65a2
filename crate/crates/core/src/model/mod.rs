//! Small editable autoregressive models.
//!
//! Three block families share one residual-stream skeleton:
//!
//! ```text
//! h_0[t]  = E[token_t] + P[t]
//! gpt   : x = z + attn(λ_a(z)),  y = x + W2 GELU(W1 λ(x) + b1) + b2
//! llama : x = z + attn(ρ_a(z)),  y = x + W2 [(W3 ρ(x)) ⊙ SiLU(W1 ρ(x))]
//! mamba : y = x + W2 [s(x; p) ⊙ SiLU(W1 ρ(x))],  s_t = a ⊙ s_{t−1} + Ws ρ(x_t)
//! logits  = Uᵀ η_f(h_L)
//! ```
//!
//! The editable block input map ψ is the argument of `W1` at the last token,
//! and the feature map φ = ν ∘ ψ lands on the unit sphere.

mod backward;
mod forward;
pub mod norm;
pub mod snapshot;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use forward::{BlockTrace, ForwardTrace};
pub use norm::{layer_norm, rms_norm, Norm};

use crate::error::{LabError, Result};
use crate::jetpack::JetPackBlock;
use crate::linalg::Matrix;
use crate::rng::{normal_vec, seeded};
use crate::tokens::{Prompt, VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GptStyle,
    LlamaStyle,
    MambaStyle,
}

impl Family {
    /// Whether the editable block carries a bias vector b1.
    pub fn has_bias(self) -> bool {
        matches!(self, Family::GptStyle)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::GptStyle => "gpt_style",
            Family::LlamaStyle => "llama_style",
            Family::MambaStyle => "mamba_style",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gpt_style" | "gpt" => Ok(Family::GptStyle),
            "llama_style" | "llama" => Ok(Family::LlamaStyle),
            "mamba_style" | "mamba" => Ok(Family::MambaStyle),
            other => Err(LabError::InvalidConfig(format!("unknown family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub d: usize,
    pub n_hidden: usize,
    pub n_layers: usize,
    pub context_window: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(family: Family, d: usize, n_hidden: usize, n_layers: usize, seed: u64) -> Self {
        Self { family, d, n_hidden, n_layers, context_window: 128, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(LabError::InvalidConfig(msg));
        if self.d < 2 {
            return fail(format!("d = {} < 2", self.d));
        }
        if self.n_hidden < self.d {
            return fail(format!("n_hidden = {} < d = {}", self.n_hidden, self.d));
        }
        if self.n_layers < 2 {
            return fail(format!("n_layers = {} < 2", self.n_layers));
        }
        if self.context_window < 8 {
            return fail(format!("context_window = {} < 8", self.context_window));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub norm: Norm,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

/// Sequence mixer preceding (transformer) or gating (state space) the editable part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Mixer {
    Attention(Attention),
    /// Per-channel exponential-decay recurrence over `Ws ρ(x_t)`.
    StateSpace { ws: Matrix, decay: Vec<f64> },
}

/// One block. `w1`/`w2` (and `b1` for gpt) are the edit surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub mixer: Mixer,
    pub norm: Norm,
    pub w1: Matrix,
    pub w2: Matrix,
    pub w3: Option<Matrix>,
    pub b1: Option<Vec<f64>>,
    pub b2: Option<Vec<f64>>,
}

/// A jet-pack block applied to the residual stream after block `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttachedJetPack {
    pub layer: usize,
    pub block: JetPackBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub embeddings: Matrix,
    pub positional: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    /// d × 256
    pub unembedding: Matrix,
    pub jetpack: Option<AttachedJetPack>,
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_vec(rows, cols, normal_vec(rng, rows * cols).into_iter().map(|x| x * std).collect())
}

/// Uniform in ±[0.1, 1.1], bounded away from zero.
fn norm_weights(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let mag = 0.1 + rng.random::<f64>();
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn make_norm(rng: &mut impl Rng, family: Family, d: usize) -> Result<Norm> {
    match family {
        Family::GptStyle => {
            let w = norm_weights(rng, d);
            let b = normal_vec(rng, d).into_iter().map(|x| 0.1 * x).collect();
            Norm::layer(w, b)
        }
        Family::LlamaStyle | Family::MambaStyle => Norm::rms(norm_weights(rng, d)),
    }
}

/// Deterministic random weights for `config`.
pub fn init_model(config: &ModelConfig) -> Result<ToyModel> {
    config.validate()?;
    let ModelConfig { family, d, n_hidden: n, n_layers, context_window, seed } = *config;
    let mut rng = seeded(seed);
    let sd = 1.0 / (d as f64).sqrt();
    let sn = 1.0 / (n as f64).sqrt();

    let embeddings = gaussian(&mut rng, VOCAB_SIZE, d, sd);
    let positional = gaussian(&mut rng, context_window, d, sd);

    let mut blocks = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let mixer = match family {
            Family::GptStyle | Family::LlamaStyle => Mixer::Attention(Attention {
                norm: make_norm(&mut rng, family, d)?,
                wq: gaussian(&mut rng, d, d, sd),
                wk: gaussian(&mut rng, d, d, sd),
                wv: gaussian(&mut rng, d, d, sd),
                wo: gaussian(&mut rng, d, d, sd),
            }),
            Family::MambaStyle => Mixer::StateSpace {
                ws: gaussian(&mut rng, n, d, sd),
                decay: (0..n).map(|_| 0.5 + 0.45 * rng.random::<f64>()).collect(),
            },
        };
        let norm = make_norm(&mut rng, family, d)?;
        let w1 = gaussian(&mut rng, n, d, sd);
        let w2 = gaussian(&mut rng, d, n, sn);
        let w3 = (family == Family::LlamaStyle).then(|| gaussian(&mut rng, n, d, sd));
        let (b1, b2) = if family.has_bias() {
            (
                Some(normal_vec(&mut rng, n).into_iter().map(|x| 0.1 * x).collect()),
                Some(normal_vec(&mut rng, d).into_iter().map(|x| 0.1 * x).collect()),
            )
        } else {
            (None, None)
        };
        blocks.push(Block { mixer, norm, w1, w2, w3, b1, b2 });
    }
    let final_norm = make_norm(&mut rng, family, d)?;
    let unembedding = gaussian(&mut rng, d, VOCAB_SIZE, sd);

    Ok(ToyModel {
        config: config.clone(),
        embeddings,
        positional,
        blocks,
        final_norm,
        unembedding,
        jetpack: None,
    })
}

impl ToyModel {
    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Block `layer`, 1-based.
    pub fn block(&self, layer: usize) -> Result<&Block> {
        self.check_layer(layer)?;
        Ok(&self.blocks[layer - 1])
    }

    pub fn block_mut(&mut self, layer: usize) -> Result<&mut Block> {
        self.check_layer(layer)?;
        Ok(&mut self.blocks[layer - 1])
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.config.n_layers {
            return Err(LabError::LayerOutOfRange { layer, n_layers: self.config.n_layers });
        }
        Ok(())
    }

    pub fn check_prompt(&self, p: &Prompt) -> Result<()> {
        if p.len() > self.config.context_window {
            return Err(LabError::ContextOverflow { len: p.len(), window: self.config.context_window });
        }
        Ok(())
    }

    /// The block normaliser η of `layer`.
    pub fn eta(&self, layer: usize) -> Result<&Norm> {
        Ok(&self.block(layer)?.norm)
    }

    /// ν for block `layer`.
    pub fn nu_map(&self, layer: usize, zeta: &[f64]) -> Result<Vec<f64>> {
        let eta = self.eta(layer)?;
        if zeta.len() != eta.dim() {
            return Err(LabError::ShapeMismatch {
                expected: format!("length {}", eta.dim()),
                got: format!("length {}", zeta.len()),
            });
        }
        Ok(eta.nu(zeta))
    }

    /// ψ: input to `W1` of block `layer` at the last token of `p`.
    pub fn input_map_psi(&self, layer: usize, p: &Prompt) -> Result<Vec<f64>> {
        self.check_layer(layer)?;
        let trace = self.forward_through(p, layer)?;
        Ok(trace.blocks[layer - 1].psi.last().expect("non-empty").clone())
    }

    /// φ = ν ∘ ψ.
    pub fn feature_map_phi(&self, layer: usize, p: &Prompt) -> Result<Vec<f64>> {
        let psi = self.input_map_psi(layer, p)?;
        self.nu_map(layer, &psi)
    }

    /// φ at every position of `p` (each prefix), from a single causal pass.
    pub fn feature_map_phi_all(&self, layer: usize, p: &Prompt) -> Result<Vec<Vec<f64>>> {
        self.check_layer(layer)?;
        let trace = self.forward_through(p, layer)?;
        let eta = self.eta(layer)?;
        Ok(trace.blocks[layer - 1].psi.iter().map(|z| eta.nu(z)).collect())
    }

    /// Residual stream after block `layer` at the last token of `p`
    /// (before any jet-pack attached at that layer).
    pub fn block_output(&self, layer: usize, p: &Prompt) -> Result<Vec<f64>> {
        self.check_layer(layer)?;
        let trace = self.forward_through(p, layer)?;
        Ok(trace.blocks[layer - 1].output.last().expect("non-empty").clone())
    }

    pub fn block_output_all(&self, layer: usize, p: &Prompt) -> Result<Vec<Vec<f64>>> {
        self.check_layer(layer)?;
        let trace = self.forward_through(p, layer)?;
        Ok(trace.blocks[layer - 1].output.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::new(Family::GptStyle, 32, 128, 2, 7);
        assert_eq!(init_model(&cfg).unwrap(), init_model(&cfg).unwrap());
    }

    #[test]
    fn seed_changes_weights() {
        let a = init_model(&ModelConfig::new(Family::MambaStyle, 32, 64, 2, 7)).unwrap();
        let b = init_model(&ModelConfig::new(Family::MambaStyle, 32, 64, 2, 8)).unwrap();
        assert_ne!(a.blocks[0].w1, b.blocks[0].w1);
    }

    #[test]
    fn invalid_configs() {
        let bad = ModelConfig::new(Family::LlamaStyle, 2, 1, 2, 0);
        assert!(matches!(init_model(&bad), Err(LabError::InvalidConfig(_))));
        let mut c = ModelConfig::new(Family::LlamaStyle, 4, 8, 1, 0);
        assert!(c.validate().is_err());
        c.n_layers = 2;
        c.context_window = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn norm_weights_bounded_away_from_zero() {
        let m = init_model(&ModelConfig::new(Family::LlamaStyle, 16, 32, 3, 1)).unwrap();
        for b in &m.blocks {
            assert!(b.norm.weight().iter().all(|w| w.abs() >= 0.1 && w.abs() <= 1.1));
        }
    }

    #[test]
    fn shapes_follow_family() {
        let g = init_model(&ModelConfig::new(Family::GptStyle, 8, 16, 2, 1)).unwrap();
        assert!(g.blocks[0].b1.is_some() && g.blocks[0].w3.is_none());
        let l = init_model(&ModelConfig::new(Family::LlamaStyle, 8, 16, 2, 1)).unwrap();
        assert!(l.blocks[0].b1.is_none() && l.blocks[0].w3.as_ref().unwrap().rows() == 16);
        let m = init_model(&ModelConfig::new(Family::MambaStyle, 8, 16, 2, 1)).unwrap();
        assert!(matches!(m.blocks[0].mixer, Mixer::StateSpace { .. }));
        assert_eq!(m.unembedding.cols(), 256);
    }
}
