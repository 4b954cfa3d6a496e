//! Hyperspectral reconstruction network.
//!
//! ```text
//! y ──scale──┬── in_proj (1×1) ── DRAB ── DRAB ── patch non-local ── out_proj (1×1) ──(+)── x̂
//!            └────────────────────────── skip (1×1, linear) ─────────────────────────┘
//! ```
//!
//! A DRAB computes `h = conv(relu(conv(x)))` and returns `x + h + h ⊙ gate(h)`,
//! where the gate is global-average-pool → bottleneck → sigmoid. With all
//! convolution weights zero the block is the identity.

use std::sync::Arc;

use pcm_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::nn::{Conv, Linear};
use crate::sensing::{HyperCube, MeasureCube};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub m: usize,
    pub n: usize,
    pub features: usize,
    pub blocks: usize,
    pub patch: usize,
    /// Channel reduction of the attention gate's bottleneck.
    pub reduction: usize,
    /// Multiplier applied to measurements before the first layer.
    pub input_scale: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { m: 11, n: 100, features: 32, blocks: 2, patch: 4, reduction: 4, input_scale: 0.01 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Drab {
    conv_a: Conv,
    conv_b: Conv,
    gate_down: Linear,
    gate_up: Linear,
}

#[derive(Debug, Clone)]
pub struct DecoderModel {
    pub cfg: DecoderConfig,
    pub store: ParamStore,
    in_proj: Conv,
    blocks: Vec<Drab>,
    value: ParamId,
    out_proj: Conv,
    skip: ParamId,
}

impl DecoderModel {
    pub fn new(cfg: DecoderConfig, seed: u64) -> Result<Self> {
        if cfg.m == 0 || cfg.n == 0 || cfg.features == 0 || cfg.patch == 0 || cfg.reduction == 0 {
            return Err(Error::Contract(format!("invalid decoder config {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = cfg.features;
        let hidden = (f / cfg.reduction).max(1);
        let in_proj = Conv::new(&mut store, "dec.in", cfg.m, f, 1, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|i| Drab {
                conv_a: Conv::new(&mut store, &format!("dec.drab{i}.a"), f, f, 3, &mut rng),
                conv_b: Conv::new(&mut store, &format!("dec.drab{i}.b"), f, f, 3, &mut rng),
                gate_down: Linear::new(&mut store, &format!("dec.drab{i}.gate_down"), f, hidden, &mut rng),
                gate_up: Linear::new(&mut store, &format!("dec.drab{i}.gate_up"), hidden, f, &mut rng),
            })
            .collect();
        let bound = (3.0 / f as f64).sqrt() * 0.1;
        let value = store.add("dec.nonlocal.value", Tensor::uniform(&[f, f], -bound, bound, &mut rng));
        let out_proj = Conv::new(&mut store, "dec.out", f, cfg.n, 1, &mut rng);
        let bound = (6.0 / (cfg.m + cfg.n) as f64).sqrt();
        let skip = store.add("dec.skip.w", Tensor::uniform(&[cfg.n, cfg.m, 1, 1], -bound, bound, &mut rng));
        Ok(DecoderModel { cfg, store, in_proj, blocks, value, out_proj, skip })
    }

    /// Zeroes every parameter except the skip weights.
    pub fn zero_non_skip(&mut self) {
        let skip = self.skip;
        for id in self.store.ids().collect::<Vec<_>>() {
            if id != skip {
                self.store.value_mut(id).data_mut().fill(0.0);
            }
        }
    }

    /// Overwrites the skip path with `w: [N, M]` (in measurement units, the
    /// input scaling is compensated).
    pub fn set_skip(&mut self, w: &[f64]) -> Result<()> {
        let (n, m) = (self.cfg.n, self.cfg.m);
        if w.len() != n * m {
            return Err(Error::Contract(format!("skip weights need {} values, got {}", n * m, w.len())));
        }
        let scale = self.cfg.input_scale;
        let dst = self.store.value_mut(self.skip).data_mut();
        for (d, s) in dst.iter_mut().zip(w) {
            *d = s / scale;
        }
        Ok(())
    }

    /// `y: [B, M, H, W]` → `[B, N, H, W]`.
    pub fn forward(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let shape = g.shape(y).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.m {
            return Err(Error::Contract(format!("decoder expects [B, {}, H, W] measurements, got {shape:?}", self.cfg.m)));
        }
        let st = &self.store;
        let y = g.scale(y, self.cfg.input_scale);
        let mut x = self.in_proj.forward(g, st, y)?;
        for blk in &self.blocks {
            x = drab(g, st, blk, x)?;
        }
        let value = g.param(st, self.value);
        let (x, _) = patch_nonlocal(g, x, value, self.cfg.patch)?;
        let out = self.out_proj.forward(g, st, x)?;
        let skip_w = g.param(st, self.skip);
        let skip = g.conv2d_same(y, skip_w)?;
        Ok(g.add(out, skip)?)
    }

    /// Reconstruction of a whole measurement cube, clamped to `[0, 1]`.
    pub fn decode(&self, meas: &MeasureCube) -> Result<HyperCube> {
        let (h, w, m) = (meas.h, meas.w, meas.m);
        if m != self.cfg.m {
            return Err(Error::Contract(format!("measurement has M = {m}, decoder expects M = {}", self.cfg.m)));
        }
        let mut chw = vec![0.0; m * h * w];
        for p in 0..h * w {
            for c in 0..m {
                chw[c * h * w + p] = meas.data[p * m + c];
            }
        }
        let mut g = Graph::new();
        let y = g.constant(Tensor::new(&[1, m, h, w], chw)?);
        let out = self.forward(&mut g, y)?;
        let v = g.value(out).data();
        let n = self.cfg.n;
        let mut hwc = vec![0.0; h * w * n];
        for c in 0..n {
            for p in 0..h * w {
                hwc[p * n + c] = v[c * h * w + p];
            }
        }
        HyperCube::from_f64_clamped(h, w, n, &hwc)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_store(&self.store);
        let cfg = &self.cfg;
        for (k, v) in [
            ("m", cfg.m),
            ("n", cfg.n),
            ("features", cfg.features),
            ("blocks", cfg.blocks),
            ("patch", cfg.patch),
            ("reduction", cfg.reduction),
        ] {
            c.push_meta(&format!("dec.{k}"), v as f64);
        }
        c.push_meta("dec.input_scale", cfg.input_scale);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let get = |k: &str| c.meta_usize(&format!("dec.{k}"));
        let cfg = DecoderConfig {
            m: get("m")?,
            n: get("n")?,
            features: get("features")?,
            blocks: get("blocks")?,
            patch: get("patch")?,
            reduction: get("reduction")?,
            input_scale: c.meta("dec.input_scale")?,
        };
        let mut model = DecoderModel::new(cfg, 0)?;
        c.load_into(&mut model.store)?;
        Ok(model)
    }
}

fn drab(g: &mut Graph, st: &ParamStore, blk: &Drab, x: Var) -> Result<Var> {
    let a = blk.conv_a.forward(g, st, x)?;
    let a = g.relu(a);
    let h = blk.conv_b.forward(g, st, a)?;
    let s = g.shape(h).to_vec();
    let (b, f, hw) = (s[0], s[1], s[2] * s[3]);
    let flat = g.reshape(h, &[b, f, hw])?;
    let pooled = g.sum_axis(flat, 2, false)?;
    let pooled = g.scale(pooled, 1.0 / hw as f64);
    let down = blk.gate_down.forward(g, st, pooled)?;
    let down = g.relu(down);
    let up = blk.gate_up.forward(g, st, down)?;
    let gate = g.sigmoid(up);
    let gate = g.reshape(gate, &[b, f, 1, 1])?;
    let gated = g.mul(h, gate)?;
    let short = g.add(h, gated)?;
    Ok(g.add(x, short)?)
}

/// Mirror index for padding: `… 2 1 0 | 0 1 2 … n-1 | n-1 n-2 …`.
fn mirror(i: usize, n: usize) -> usize {
    let period = 2 * n;
    let r = i % period;
    if r < n {
        r
    } else {
        period - 1 - r
    }
}

/// Patch-level second-order non-local attention.
///
/// `x: [B, F, H, W]`, `value: [F, F]`. Each `patch × patch` tile (after mirror
/// padding up to a multiple of `patch`) is described by its normalized channel
/// covariance; tiles attend to each other with softmax over descriptor dot
/// products, and each tile receives the attention-weighted sum of the other
/// tiles' mean features mapped through `value`, broadcast over its pixels.
///
/// Returns the output and the attention node (see [`Graph::attention_probs`]).
pub fn patch_nonlocal(g: &mut Graph, x: Var, value: Var, patch: usize) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || patch == 0 || g.shape(value) != [s[1], s[1]] {
        return Err(Error::Contract(format!("non-local wants x [B, F, H, W] and value [F, F], got {s:?} and {:?}", g.shape(value))));
    }
    let (b, f, h, w) = (s[0], s[1], s[2], s[3]);
    let (ph, pw) = (h.div_ceil(patch), w.div_ceil(patch));
    let np = ph * pw;
    let pp = patch * patch;

    let mut fwd = Vec::with_capacity(b * np * f * pp);
    for bi in 0..b {
        for pi in 0..ph {
            for pj in 0..pw {
                for fi in 0..f {
                    for u in 0..patch {
                        for v in 0..patch {
                            let r = mirror(pi * patch + u, h);
                            let c = mirror(pj * patch + v, w);
                            fwd.push(((bi * f + fi) * h + r) * w + c);
                        }
                    }
                }
            }
        }
    }
    let tiles = g.gather(x, Arc::new(fwd), &[b, np, f, pp])?;
    let mean = g.sum_axis(tiles, 3, true)?;
    let mean = g.scale(mean, 1.0 / pp as f64);
    let centered = g.sub(tiles, mean)?;
    let ct = g.transpose(centered)?;
    let cov = g.matmul(centered, ct)?;
    let cov = g.scale(cov, 1.0 / pp as f64);
    let desc = g.reshape(cov, &[b, np, f * f])?;
    let desc = g.layer_norm(desc, 1e-5)?;

    let pooled = g.reshape(mean, &[b, np, f])?;
    let vals = g.matmul(pooled, value)?;
    let att = g.attention(desc, desc, vals, None, 1.0 / (f * f) as f64)?;
    let att4 = g.reshape(att, &[b, np, f, 1])?;
    let mixed = g.add(tiles, att4)?;

    let mut back = Vec::with_capacity(b * f * h * w);
    for bi in 0..b {
        for fi in 0..f {
            for r in 0..h {
                for c in 0..w {
                    let tile = (r / patch) * pw + c / patch;
                    let within = (r % patch) * patch + c % patch;
                    back.push(((bi * np + tile) * f + fi) * pp + within);
                }
            }
        }
    }
    let out = g.gather(mixed, Arc::new(back), &[b, f, h, w])?;
    Ok((out, att))
}
