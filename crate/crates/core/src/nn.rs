//! Small layer helpers shared by the networks.

use pcm_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::Result;

/// Dense layer `x W + b` with `W: [inputs, outputs]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[inputs, outputs], -bound, bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[outputs]));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }
}

/// Layer norm over the last axis with learned gain and shift.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0));
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(&[width]));
        Norm { gain, shift }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, 1e-5)?;
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let y = g.mul(n, gain)?;
        Ok(g.add(y, shift)?)
    }
}

/// `3x3`-style convolution weight `[out, in, k, k]` plus a broadcastable bias.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, k: usize, rng: &mut R) -> Self {
        let bound = (6.0 / ((inputs + outputs) * k * k) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[outputs, inputs, k, k], -bound, bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, outputs, 1, 1]));
        Conv { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.conv2d_same(x, w)?;
        Ok(g.add(y, b)?)
    }
}

/// SplitMix64 finalizer; turns structured integers into well-spread seeds.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent child seed for `(seed, stream)`.
pub fn child_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream.wrapping_add(0x5eed)))
}
