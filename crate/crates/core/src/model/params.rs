use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, Projection};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Standard deviation of freshly drawn adapter `A` entries.
pub const LORA_A_STD: f64 = 0.02;

/// Affine map `y = x·W + b` with `W` stored `[d_in × d_out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init(rng: &mut Rng, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            w: Tensor::gaussian(rng, &[d_in, d_out], 0.0, 1.0 / (d_in as f64).sqrt())?,
            b: Tensor::zeros(&[d_out]),
        })
    }

    fn zeros_like(&self) -> Self {
        Linear {
            w: Tensor::zeros(self.w.shape()),
            b: Tensor::zeros(self.b.shape()),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    fn init(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::filled(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }

    fn zeros_like(&self) -> Self {
        LayerNorm {
            gamma: Tensor::zeros(self.gamma.shape()),
            beta: Tensor::zeros(self.beta.shape()),
        }
    }
}

/// One pre-norm transformer block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl Block {
    pub fn projection(&self, p: Projection) -> &Linear {
        match p {
            Projection::Query => &self.query,
            Projection::Key => &self.key,
            Projection::Value => &self.value,
            Projection::Output => &self.output,
        }
    }

    fn zeros_like(&self) -> Self {
        Block {
            ln_attn: self.ln_attn.zeros_like(),
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            output: self.output.zeros_like(),
            ln_ff: self.ln_ff.zeros_like(),
            ff_in: self.ff_in.zeros_like(),
            ff_out: self.ff_out.zeros_like(),
        }
    }
}

/// Every frozen weight of the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseWeights {
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub head: Linear,
}

impl BaseWeights {
    fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d_model;
        let input = Linear::init(rng, cfg.feat_dim, d)?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(Block {
                ln_attn: LayerNorm::init(d),
                query: Linear::init(rng, d, d)?,
                key: Linear::init(rng, d, d)?,
                value: Linear::init(rng, d, d)?,
                output: Linear::init(rng, d, d)?,
                ln_ff: LayerNorm::init(d),
                ff_in: Linear::init(rng, d, cfg.d_ff)?,
                ff_out: Linear::init(rng, cfg.d_ff, d)?,
            });
        }
        Ok(BaseWeights {
            input,
            blocks,
            ln_final: LayerNorm::init(d),
            head: Linear::init(rng, d, cfg.n_outputs())?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        BaseWeights {
            input: self.input.zeros_like(),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            ln_final: self.ln_final.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// All tensors in fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.input.w, &self.input.b];
        for b in &self.blocks {
            out.extend([
                &b.ln_attn.gamma,
                &b.ln_attn.beta,
                &b.query.w,
                &b.query.b,
                &b.key.w,
                &b.key.b,
                &b.value.w,
                &b.value.b,
                &b.output.w,
                &b.output.b,
                &b.ln_ff.gamma,
                &b.ln_ff.beta,
                &b.ff_in.w,
                &b.ff_in.b,
                &b.ff_out.w,
                &b.ff_out.b,
            ]);
        }
        out.extend([
            &self.ln_final.gamma,
            &self.ln_final.beta,
            &self.head.w,
            &self.head.b,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.input.w, &mut self.input.b];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln_attn.gamma,
                &mut b.ln_attn.beta,
                &mut b.query.w,
                &mut b.query.b,
                &mut b.key.w,
                &mut b.key.b,
                &mut b.value.w,
                &mut b.value.b,
                &mut b.output.w,
                &mut b.output.b,
                &mut b.ln_ff.gamma,
                &mut b.ln_ff.beta,
                &mut b.ff_in.w,
                &mut b.ff_in.b,
                &mut b.ff_out.w,
                &mut b.ff_out.b,
            ]);
        }
        out.extend([
            &mut self.ln_final.gamma,
            &mut self.ln_final.beta,
            &mut self.head.w,
            &mut self.head.b,
        ]);
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn unflatten(&mut self, v: &[f64]) -> Result<()> {
        let total: usize = self.tensors().iter().map(|t| t.len()).sum();
        if total != v.len() {
            return Err(Error::shape(format!(
                "base vector has {} entries, model needs {total}",
                v.len()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&v[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// SHA-256 over the little-endian bytes of every weight, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Low-rank pair: `ΔW (d_out×d_in) = B·A`, scaled by `α/r` at use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub projection: Projection,
    /// `[r × d_in]`
    pub a: Tensor,
    /// `[d_out × r]`
    pub b: Tensor,
}

impl Adapter {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }
}

/// Adapters for every block, each block's list in canonical projection order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapters {
    pub layers: Vec<Vec<Adapter>>,
}

impl Adapters {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let (r, d) = (cfg.lora_rank, cfg.d_model);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let mut list = Vec::new();
            for p in cfg.targets() {
                list.push(Adapter {
                    projection: p,
                    a: Tensor::gaussian(rng, &[r, d], 0.0, LORA_A_STD)?,
                    b: Tensor::zeros(&[d, r]),
                });
            }
            layers.push(list);
        }
        Ok(Adapters { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Adapters {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.iter()
                        .map(|a| Adapter {
                            projection: a.projection,
                            a: Tensor::zeros(a.a.shape()),
                            b: Tensor::zeros(a.b.shape()),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn get(&self, layer: usize, p: Projection) -> Option<&Adapter> {
        self.layers[layer].iter().find(|a| a.projection == p)
    }

    pub fn get_mut(&mut self, layer: usize, p: Projection) -> Option<&mut Adapter> {
        self.layers[layer].iter_mut().find(|a| a.projection == p)
    }

    pub fn tensor_count(&self) -> usize {
        self.layers.iter().map(|l| 2 * l.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.iter_tensors().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Layer-major, canonical projection order, `A` before `B`.
    pub fn iter_tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.iter().flat_map(|a| [&a.a, &a.b]))
    }

    fn iter_tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.iter_mut().flat_map(|a| [&mut a.a, &mut a.b]))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for t in self.iter_tensors() {
            v.extend_from_slice(t.data());
        }
        v
    }

    pub fn unflatten(&mut self, v: &[f64]) -> Result<()> {
        let total = self.len();
        if total != v.len() {
            return Err(Error::shape(format!(
                "trainable vector has {} entries, adapters need {total}",
                v.len()
            )));
        }
        let mut off = 0;
        for t in self.iter_tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&v[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Frozen base plus trainable adapters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub base: BaseWeights,
    pub adapters: Adapters,
}

impl ModelState {
    /// Base from scaled gaussians, adapters with `A ~ N(0, 0.02)` and `B = 0`.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let base = BaseWeights::init(cfg, rng)?;
        let adapters = Adapters::init(cfg, rng)?;
        Ok(ModelState {
            config: cfg.clone(),
            base,
            adapters,
        })
    }

    /// Same base, freshly drawn adapters (identity start).
    pub fn with_fresh_adapters(&self, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut shape_cfg = self.config.clone();
        shape_cfg.lora_rank = cfg.lora_rank;
        shape_cfg.lora_alpha = cfg.lora_alpha;
        shape_cfg.lora_targets = cfg.lora_targets.clone();
        shape_cfg.validate()?;
        Ok(ModelState {
            adapters: Adapters::init(&shape_cfg, rng)?,
            config: shape_cfg,
            base: self.base.clone(),
        })
    }

    pub fn flatten_trainable(&self) -> Vec<f64> {
        self.adapters.flatten()
    }

    pub fn unflatten_trainable(&mut self, v: &[f64]) -> Result<()> {
        self.adapters.unflatten(v)
    }

    pub fn trainable_len(&self) -> usize {
        self.adapters.len()
    }

    /// `W + (α/r)·(B·A)ᵀ` in the `[d_in × d_out]` storage convention.
    pub fn effective_weight(&self, layer: usize, p: Projection) -> Tensor {
        let lin = self.base.blocks[layer].projection(p);
        let mut w = lin.w.clone();
        if let Some(ad) = self.adapters.get(layer, p) {
            let s = self.config.lora_scale();
            let (d_in, d_out, r) = (lin.d_in(), lin.d_out(), ad.rank());
            let wd = w.data_mut();
            for i in 0..d_in {
                for o in 0..d_out {
                    let mut acc = 0.0;
                    for k in 0..r {
                        acc += ad.b.get(o, k) * ad.a.get(k, i);
                    }
                    wd[i * d_out + o] += s * acc;
                }
            }
        }
        w
    }
}
