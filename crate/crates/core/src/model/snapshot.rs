//! Model snapshot files.
//!
//! Header: `{"kind": "toy_model", "config": {...}, "seed": s, "format_version": "1",
//! "jetpack": null | {...}, "arrays": [...]}`. Array order:
//!
//! 1. `embeddings` [256, d], `positional` [context_window, d]
//! 2. per block `blocks.{j}` (1-based):
//!    transformers: `attn_norm.weight` [d], (`attn_norm.bias` [d] gpt), `wq`, `wk`, `wv`, `wo` [d, d];
//!    mamba: `ws` [n, d], `decay` [n];
//!    then `norm.weight` [d], (`norm.bias` [d] gpt), `w1` [n, d], `w2` [d, n],
//!    (`w3` [n, d] llama), (`b1` [n], `b2` [d] gpt)
//! 3. `final_norm.weight` [d], (`final_norm.bias` [d] gpt), `unembedding` [d, 256]
//! 4. when a jet-pack is attached: `jetpack.mu`, `jetpack.w1`, `jetpack.b`, `jetpack.w2`

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{AttachedJetPack, Attention, Block, Family, Mixer, ModelConfig, Norm, ToyModel};
use crate::container::{ArrayWriter, Container};
use crate::error::{LabError, Result};
use crate::jetpack::JetPackBlock;
use crate::linalg::Matrix;
use crate::tokens::VOCAB_SIZE;

fn push_norm(w: &mut ArrayWriter, name: &str, norm: &Norm) {
    let d = norm.dim();
    w.push(format!("{name}.weight"), &[d], norm.weight());
    if let Some(b) = norm.bias() {
        w.push(format!("{name}.bias"), &[d], b);
    }
}

fn push_matrix(w: &mut ArrayWriter, name: &str, m: &Matrix) {
    w.push(name, &[m.rows(), m.cols()], m.as_slice());
}

fn take_norm(c: &mut Container, name: &str, family: Family, d: usize) -> Result<Norm> {
    let weight = c.take(&format!("{name}.weight"), &[d])?;
    match family {
        Family::GptStyle => Norm::layer(weight, c.take(&format!("{name}.bias"), &[d])?),
        _ => Norm::rms(weight),
    }
}

fn take_matrix(c: &mut Container, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    Ok(Matrix::from_vec(rows, cols, c.take(name, &[rows, cols])?))
}

impl ToyModel {
    pub fn write_snapshot(&self, w: &mut impl Write) -> Result<()> {
        let cfg = &self.config;
        let mut arrays = ArrayWriter::default();
        push_matrix(&mut arrays, "embeddings", &self.embeddings);
        push_matrix(&mut arrays, "positional", &self.positional);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{}", i + 1);
            match &b.mixer {
                Mixer::Attention(att) => {
                    push_norm(&mut arrays, &format!("{p}.attn_norm"), &att.norm);
                    push_matrix(&mut arrays, &format!("{p}.wq"), &att.wq);
                    push_matrix(&mut arrays, &format!("{p}.wk"), &att.wk);
                    push_matrix(&mut arrays, &format!("{p}.wv"), &att.wv);
                    push_matrix(&mut arrays, &format!("{p}.wo"), &att.wo);
                }
                Mixer::StateSpace { ws, decay } => {
                    push_matrix(&mut arrays, &format!("{p}.ws"), ws);
                    arrays.push(format!("{p}.decay"), &[decay.len()], decay);
                }
            }
            push_norm(&mut arrays, &format!("{p}.norm"), &b.norm);
            push_matrix(&mut arrays, &format!("{p}.w1"), &b.w1);
            push_matrix(&mut arrays, &format!("{p}.w2"), &b.w2);
            if let Some(w3) = &b.w3 {
                push_matrix(&mut arrays, &format!("{p}.w3"), w3);
            }
            if let (Some(b1), Some(b2)) = (&b.b1, &b.b2) {
                arrays.push(format!("{p}.b1"), &[b1.len()], b1);
                arrays.push(format!("{p}.b2"), &[b2.len()], b2);
            }
        }
        push_norm(&mut arrays, "final_norm", &self.final_norm);
        push_matrix(&mut arrays, "unembedding", &self.unembedding);

        let mut header = Map::new();
        header.insert("kind".into(), json!("toy_model"));
        header.insert("config".into(), serde_json::to_value(cfg)?);
        header.insert("seed".into(), json!(cfg.seed));
        let jet = match &self.jetpack {
            Some(AttachedJetPack { layer, block }) => {
                block.push_arrays("jetpack", &mut arrays);
                let mut meta = block.header_meta();
                meta.insert("layer".into(), json!(layer));
                Value::Object(meta)
            }
            None => Value::Null,
        };
        header.insert("jetpack".into(), jet);
        arrays.write_to(header, w)
    }

    pub fn read_snapshot(r: &mut impl Read) -> Result<Self> {
        let mut c = Container::read_from(r)?;
        let kind: String = c.header_field("kind")?;
        if kind != "toy_model" {
            return Err(LabError::Format(format!("expected toy_model, found {kind}")));
        }
        let cfg: ModelConfig = c.header_field("config")?;
        cfg.validate()?;
        let ModelConfig { family, d, n_hidden: n, .. } = cfg;
        let embeddings = take_matrix(&mut c, "embeddings", VOCAB_SIZE, d)?;
        let positional = take_matrix(&mut c, "positional", cfg.context_window, d)?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for j in 1..=cfg.n_layers {
            let p = format!("blocks.{j}");
            let mixer = match family {
                Family::MambaStyle => Mixer::StateSpace {
                    ws: take_matrix(&mut c, &format!("{p}.ws"), n, d)?,
                    decay: c.take(&format!("{p}.decay"), &[n])?,
                },
                _ => Mixer::Attention(Attention {
                    norm: take_norm(&mut c, &format!("{p}.attn_norm"), family, d)?,
                    wq: take_matrix(&mut c, &format!("{p}.wq"), d, d)?,
                    wk: take_matrix(&mut c, &format!("{p}.wk"), d, d)?,
                    wv: take_matrix(&mut c, &format!("{p}.wv"), d, d)?,
                    wo: take_matrix(&mut c, &format!("{p}.wo"), d, d)?,
                }),
            };
            let norm = take_norm(&mut c, &format!("{p}.norm"), family, d)?;
            let w1 = take_matrix(&mut c, &format!("{p}.w1"), n, d)?;
            let w2 = take_matrix(&mut c, &format!("{p}.w2"), d, n)?;
            let w3 = match family {
                Family::LlamaStyle => Some(take_matrix(&mut c, &format!("{p}.w3"), n, d)?),
                _ => None,
            };
            let (b1, b2) = match family {
                Family::GptStyle => (Some(c.take(&format!("{p}.b1"), &[n])?), Some(c.take(&format!("{p}.b2"), &[d])?)),
                _ => (None, None),
            };
            blocks.push(Block { mixer, norm, w1, w2, w3, b1, b2 });
        }
        let final_norm = take_norm(&mut c, "final_norm", family, d)?;
        let unembedding = take_matrix(&mut c, "unembedding", d, VOCAB_SIZE)?;
        let jetpack = match c.header.get("jetpack").cloned() {
            None | Some(Value::Null) => None,
            Some(Value::Object(meta)) => {
                let layer: usize = serde_json::from_value(
                    meta.get("layer").cloned().ok_or_else(|| LabError::Format("jetpack.layer missing".into()))?,
                )?;
                let block = JetPackBlock::take_arrays("jetpack", &meta, d, &mut c)?;
                Some(AttachedJetPack { layer, block })
            }
            Some(other) => return Err(LabError::Format(format!("bad jetpack header {other}"))),
        };
        c.finish()?;
        let model = ToyModel { config: cfg, embeddings, positional, blocks, final_norm, unembedding, jetpack };
        if let Some(j) = &model.jetpack {
            model.check_layer(j.layer)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_snapshot(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_snapshot(&mut BufReader::new(File::open(path)?))
    }
}
