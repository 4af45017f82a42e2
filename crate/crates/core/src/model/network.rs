//! Forward pass and architecture-specific reverse accumulation.
//!
//! Pre-norm encoder: `h ← h + Attn(LN(h))`, `h ← h + FF(LN(h))`, then a final
//! layer norm and a linear head onto `vocab_size + 1` logits (blank last).
//! Low-rank adapters contribute `(α/r)·(x·Aᵀ)·Bᵀ` on the targeted projections.

use super::config::Projection;
use super::params::{Adapter, Adapters, BaseWeights, LayerNorm, Linear, ModelState};
use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, softmax_in_place, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSubset {
    LoraOnly,
    Full,
}

/// Gradients mirroring the selected parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    /// Present only for [`ParamSubset::Full`].
    pub base: Option<BaseWeights>,
    pub adapters: Adapters,
}

impl GradientSet {
    pub fn zeros(m: &ModelState, subset: ParamSubset) -> Self {
        GradientSet {
            base: (subset == ParamSubset::Full).then(|| m.base.zeros_like()),
            adapters: m.adapters.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.adapters.iter_tensors().collect();
        if let Some(b) = &self.base {
            out.extend(b.tensors());
        }
        out
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors().len()
    }

    /// Adapter gradients in `flatten_trainable` order.
    pub fn flat_adapters(&self) -> Vec<f64> {
        self.adapters.flatten()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

struct BlockCache {
    h_in: Vec<f64>,
    ln_attn: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per-head attention weights, `[T × T]` each.
    probs: Vec<Vec<f64>>,
    ctx: Vec<f64>,
    /// `x·Aᵀ` per targeted projection, canonical order.
    lora_u: Vec<(Projection, Vec<f64>)>,
    ln_ff: LnCache,
    c: Vec<f64>,
    z: Vec<f64>,
    g: Vec<f64>,
}

/// Activations retained for [`ModelState::backward_with`].
pub struct ForwardCache {
    frames: usize,
    feats: Vec<f64>,
    blocks: Vec<BlockCache>,
    ln_final: LnCache,
    hf: Vec<f64>,
    logits: Tensor,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

fn layer_norm_fwd(x: &[f64], t: usize, d: usize, ln: &LayerNorm) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; t * d];
    let mut xhat = vec![0.0; t * d];
    let mut inv_std = vec![0.0; t];
    let (g, b) = (ln.gamma.data(), ln.beta.data());
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat[i * d + j] = xh;
            y[i * d + j] = g[j] * xh + b[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_bwd(
    dy: &[f64],
    t: usize,
    d: usize,
    ln: &LayerNorm,
    cache: &LnCache,
    grad: Option<&mut LayerNorm>,
    dx: &mut [f64],
) {
    let g = ln.gamma.data();
    if let Some(gr) = grad {
        let dg = gr.gamma.data_mut();
        for i in 0..t {
            for j in 0..d {
                dg[j] += dy[i * d + j] * cache.xhat[i * d + j];
            }
        }
        let db = gr.beta.data_mut();
        for i in 0..t {
            for j in 0..d {
                db[j] += dy[i * d + j];
            }
        }
    }
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        for j in 0..d {
            dxhat[j] = dy[i * d + j] * g[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[i * d + j] += cache.inv_std[i] * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
}

/// `y = x·W + b (+ s·(x·Aᵀ)·Bᵀ)`; returns `y` and the adapter intermediate.
fn linear_fwd(
    x: &[f64],
    t: usize,
    lin: &Linear,
    adapter: Option<&Adapter>,
    scale: f64,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let (d_in, d_out) = (lin.d_in(), lin.d_out());
    let mut y = vec![0.0; t * d_out];
    for i in 0..t {
        y[i * d_out..(i + 1) * d_out].copy_from_slice(lin.b.data());
    }
    gemm(x, lin.w.data(), &mut y, t, d_in, d_out);
    let u = adapter.map(|ad| {
        let r = ad.rank();
        let mut u = vec![0.0; t * r];
        gemm_nt(x, ad.a.data(), &mut u, t, d_in, r);
        let mut delta = vec![0.0; t * d_out];
        gemm_nt(&u, ad.b.data(), &mut delta, t, r, d_out);
        for (yv, dv) in y.iter_mut().zip(&delta) {
            *yv += scale * dv;
        }
        u
    });
    (y, u)
}

#[allow(clippy::too_many_arguments)]
fn linear_bwd(
    x: &[f64],
    u: Option<&Vec<f64>>,
    dy: &[f64],
    t: usize,
    lin: &Linear,
    adapter: Option<&Adapter>,
    scale: f64,
    grad_lin: Option<&mut Linear>,
    grad_ad: Option<&mut Adapter>,
    dx: Option<&mut [f64]>,
) {
    let (d_in, d_out) = (lin.d_in(), lin.d_out());
    if let Some(g) = grad_lin {
        gemm_tn(x, dy, g.w.data_mut(), t, d_in, d_out);
        let db = g.b.data_mut();
        for i in 0..t {
            for j in 0..d_out {
                db[j] += dy[i * d_out + j];
            }
        }
    }
    let mut du = None;
    if let Some(ad) = adapter {
        let r = ad.rank();
        let mut d = vec![0.0; t * r];
        gemm(dy, ad.b.data(), &mut d, t, d_out, r);
        d.iter_mut().for_each(|v| *v *= scale);
        if let Some(g) = grad_ad {
            gemm_tn(&d, x, g.a.data_mut(), t, r, d_in);
            let u = u.expect("adapter intermediate cached");
            let mut db = vec![0.0; d_out * r];
            gemm_tn(dy, u, &mut db, t, d_out, r);
            for (gv, v) in g.b.data_mut().iter_mut().zip(&db) {
                *gv += scale * v;
            }
        }
        du = Some(d);
    }
    if let Some(dx) = dx {
        gemm_nt(dy, lin.w.data(), dx, t, d_out, d_in);
        if let (Some(ad), Some(d)) = (adapter, du) {
            gemm(&d, ad.a.data(), dx, t, ad.rank(), d_in);
        }
    }
}

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let inner = GELU_C * (z + 0.044715 * z * z * z);
    let th = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * z * z);
    0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * dinner
}

fn lora_u(cache: &[(Projection, Vec<f64>)], p: Projection) -> Option<&Vec<f64>> {
    cache.iter().find(|(q, _)| *q == p).map(|(_, u)| u)
}

impl ModelState {
    /// Per-frame logits `[T × (vocab_size + 1)]`, blank in the last column.
    pub fn forward(&self, feats: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(feats)?.logits)
    }

    pub fn forward_cached(&self, feats: &Tensor) -> Result<ForwardCache> {
        let cfg = &self.config;
        if feats.shape().len() != 2 || feats.shape()[1] != cfg.feat_dim {
            return Err(Error::shape(format!(
                "features must be [T x {}], got {:?}",
                cfg.feat_dim,
                feats.shape()
            )));
        }
        let t = feats.shape()[0];
        if t == 0 {
            return Err(Error::shape("forward needs at least one frame"));
        }
        let d = cfg.d_model;
        let (dh, scale) = (cfg.head_dim(), cfg.lora_scale());
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let (mut h, _) = linear_fwd(feats.data(), t, &self.base.input, None, scale);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for (li, blk) in self.base.blocks.iter().enumerate() {
            let h_in = h;
            let (a, ln_attn) = layer_norm_fwd(&h_in, t, d, &blk.ln_attn);
            let mut lora = Vec::new();
            let mut proj = |p: Projection, x: &[f64]| {
                let (y, u) = linear_fwd(x, t, blk.projection(p), self.adapters.get(li, p), scale);
                if let Some(u) = u {
                    lora.push((p, u));
                }
                y
            };
            let q = proj(Projection::Query, &a);
            let k = proj(Projection::Key, &a);
            let v = proj(Projection::Value, &a);

            let mut ctx = vec![0.0; t * d];
            let mut probs = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let off = hd * dh;
                let mut p = vec![0.0; t * t];
                for i in 0..t {
                    let qi = &q[i * d + off..i * d + off + dh];
                    for j in 0..t {
                        let kj = &k[j * d + off..j * d + off + dh];
                        p[i * t + j] = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * inv_sqrt;
                    }
                    softmax_in_place(&mut p[i * t..(i + 1) * t]);
                    for j in 0..t {
                        let w = p[i * t + j];
                        for c in 0..dh {
                            ctx[i * d + off + c] += w * v[j * d + off + c];
                        }
                    }
                }
                probs.push(p);
            }
            let o = proj(Projection::Output, &ctx);
            let h_mid: Vec<f64> = h_in.iter().zip(&o).map(|(x, y)| x + y).collect();

            let (c, ln_ff) = layer_norm_fwd(&h_mid, t, d, &blk.ln_ff);
            let (z, _) = linear_fwd(&c, t, &blk.ff_in, None, scale);
            let g: Vec<f64> = z.iter().map(|&v| gelu(v)).collect();
            let (f, _) = linear_fwd(&g, t, &blk.ff_out, None, scale);
            h = h_mid.iter().zip(&f).map(|(x, y)| x + y).collect();

            blocks.push(BlockCache {
                h_in,
                ln_attn,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                lora_u: lora,
                ln_ff,
                c,
                z,
                g,
            });
        }
        let (hf, ln_final) = layer_norm_fwd(&h, t, d, &self.base.ln_final);
        let (logits, _) = linear_fwd(&hf, t, &self.base.head, None, scale);
        let logits = Tensor::from_vec(vec![t, cfg.n_outputs()], logits)?;
        Ok(ForwardCache {
            frames: t,
            feats: feats.data().to_vec(),
            blocks,
            ln_final,
            hf,
            logits,
        })
    }

    /// Recomputes the forward pass and returns gradients for `subset`.
    pub fn backward(
        &self,
        feats: &Tensor,
        logit_grad: &Tensor,
        subset: ParamSubset,
    ) -> Result<GradientSet> {
        if subset == ParamSubset::LoraOnly && self.adapters.is_empty() {
            return Err(Error::domain("LoRA-only gradient requested but no adapters are targeted"));
        }
        let cache = self.forward_cached(feats)?;
        let mut grads = GradientSet::zeros(self, subset);
        self.backward_with(&cache, logit_grad, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates `∂/∂θ` of `Σ logit_grad ⊙ logits` into `grads`.
    pub fn backward_with(
        &self,
        cache: &ForwardCache,
        logit_grad: &Tensor,
        grads: &mut GradientSet,
    ) -> Result<()> {
        let cfg = &self.config;
        let t = cache.frames;
        if logit_grad.shape() != [t, cfg.n_outputs()] {
            return Err(Error::shape(format!(
                "logit gradient {:?} does not match logits [{t}, {}]",
                logit_grad.shape(),
                cfg.n_outputs()
            )));
        }
        let d = cfg.d_model;
        let (dh, scale) = (cfg.head_dim(), cfg.lora_scale());
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut base_grad = grads.base.as_mut();

        let mut dhf = vec![0.0; t * d];
        linear_bwd(
            &cache.hf,
            None,
            logit_grad.data(),
            t,
            &self.base.head,
            None,
            scale,
            base_grad.as_deref_mut().map(|g| &mut g.head),
            None,
            Some(&mut dhf),
        );
        let mut dh_cur = vec![0.0; t * d];
        layer_norm_bwd(
            &dhf,
            t,
            d,
            &self.base.ln_final,
            &cache.ln_final,
            base_grad.as_deref_mut().map(|g| &mut g.ln_final),
            &mut dh_cur,
        );

        for li in (0..cfg.n_layers).rev() {
            let blk = &self.base.blocks[li];
            let bc = &cache.blocks[li];
            let mut bg = base_grad.as_deref_mut().map(|g| &mut g.blocks[li]);

            // feed-forward branch
            let mut dg = vec![0.0; t * cfg.d_ff];
            linear_bwd(
                &bc.g,
                None,
                &dh_cur,
                t,
                &blk.ff_out,
                None,
                scale,
                bg.as_deref_mut().map(|g| &mut g.ff_out),
                None,
                Some(&mut dg),
            );
            let dz: Vec<f64> = dg.iter().zip(&bc.z).map(|(g, &z)| g * gelu_grad(z)).collect();
            let mut dc = vec![0.0; t * d];
            linear_bwd(
                &bc.c,
                None,
                &dz,
                t,
                &blk.ff_in,
                None,
                scale,
                bg.as_deref_mut().map(|g| &mut g.ff_in),
                None,
                Some(&mut dc),
            );
            let mut dh_mid = dh_cur;
            layer_norm_bwd(
                &dc,
                t,
                d,
                &blk.ln_ff,
                &bc.ln_ff,
                bg.as_deref_mut().map(|g| &mut g.ln_ff),
                &mut dh_mid,
            );

            // attention branch
            let mut dctx = vec![0.0; t * d];
            self.projection_bwd(li, Projection::Output, &bc.ctx, bc, &dh_mid, &mut bg, grads_adapters(&mut grads.adapters, li, Projection::Output), &mut dctx);

            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dp = vec![0.0; t];
            for hd in 0..cfg.n_heads {
                let off = hd * dh;
                let p = &bc.probs[hd];
                for i in 0..t {
                    let dci = &dctx[i * d + off..i * d + off + dh];
                    for j in 0..t {
                        let vj = &bc.v[j * d + off..j * d + off + dh];
                        dp[j] = dci.iter().zip(vj).map(|(x, y)| x * y).sum();
                        let w = p[i * t + j];
                        for c in 0..dh {
                            dv[j * d + off + c] += w * dci[c];
                        }
                    }
                    let dot: f64 = (0..t).map(|j| p[i * t + j] * dp[j]).sum();
                    for j in 0..t {
                        let ds = p[i * t + j] * (dp[j] - dot) * inv_sqrt;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            dq[i * d + off + c] += ds * bc.k[j * d + off + c];
                            dk[j * d + off + c] += ds * bc.q[i * d + off + c];
                        }
                    }
                }
            }
            let mut da = vec![0.0; t * d];
            for (p, dy) in [
                (Projection::Query, &dq),
                (Projection::Key, &dk),
                (Projection::Value, &dv),
            ] {
                self.projection_bwd(li, p, &bc.a, bc, dy, &mut bg, grads_adapters(&mut grads.adapters, li, p), &mut da);
            }
            let mut dh_in = dh_mid;
            layer_norm_bwd(
                &da,
                t,
                d,
                &blk.ln_attn,
                &bc.ln_attn,
                bg.map(|g| &mut g.ln_attn),
                &mut dh_in,
            );
            dh_cur = dh_in;
        }

        if let Some(g) = base_grad {
            linear_bwd(
                &cache.feats,
                None,
                &dh_cur,
                t,
                &self.base.input,
                None,
                scale,
                Some(&mut g.input),
                None,
                None,
            );
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn projection_bwd(
        &self,
        layer: usize,
        p: Projection,
        x: &[f64],
        bc: &BlockCache,
        dy: &[f64],
        base_grad: &mut Option<&mut super::params::Block>,
        grad_ad: Option<&mut Adapter>,
        dx: &mut [f64],
    ) {
        let blk = &self.base.blocks[layer];
        let gl = base_grad.as_deref_mut().map(|g| match p {
            Projection::Query => &mut g.query,
            Projection::Key => &mut g.key,
            Projection::Value => &mut g.value,
            Projection::Output => &mut g.output,
        });
        linear_bwd(
            x,
            lora_u(&bc.lora_u, p),
            dy,
            bc.h_in.len() / self.config.d_model,
            blk.projection(p),
            self.adapters.get(layer, p),
            self.config.lora_scale(),
            gl,
            grad_ad,
            Some(dx),
        );
    }
}

fn grads_adapters(a: &mut Adapters, layer: usize, p: Projection) -> Option<&mut Adapter> {
    a.get_mut(layer, p)
}
