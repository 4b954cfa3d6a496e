//! Neural shape → filter-bank simulator, its inverse, and the projection cycle.
//!
//! * [`SurrogateModel`] reads the four vertices as tokens `(p_i, 2x_i, 2y_i)`,
//!   runs a small pre-norm transformer, pools with presence weights and emits
//!   an `M × N` sigmoid map. It serves both as the differentiable simulator and
//!   as the forward half of the projection cycle.
//! * [`Filter2ShapeModel`] maps a filter bank back to logits and coordinates.
//! * [`soft_project`] chains shape → spectrum → shape inside one graph.

use std::sync::Arc;

use pcm_autodiff::{Adam, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::geometry::{presence_chain_graph, ShapeParams, HALF_CELL, MAX_VERTICES};
use crate::nn::{child_seed, mix64, Linear, Norm};
use crate::oracle::{Dataset, FilterBank};
use crate::{Error, Result};

/// Presence below which a vertex token is removed from attention entirely.
pub const MASK_PRESENCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_mult: usize,
    pub m: usize,
    pub n: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig { d_model: 64, heads: 4, blocks: 2, ff_mult: 4, m: 11, n: 100 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    norm1: Norm,
    qkv: Linear,
    proj: Linear,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
}

/// Transformer surrogate of the oracle.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub cfg: SurrogateConfig,
    pub store: ParamStore,
    embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    final_norm: Norm,
    pool_head: Linear,
    out: Linear,
}

/// Graph-side encoding of a batch of shapes.
pub struct ShapeTokens {
    /// `[B, 4, 3]`
    pub tokens: Var,
    /// `[B, 4]`
    pub presence: Var,
    /// `B * 4` flags, `true` where a token takes part in attention.
    pub keep: Vec<bool>,
}

/// Encodes `logits: [B, 3]` and `coords: [B, 4, 2]` into vertex tokens.
///
/// Absent vertices (presence below [`MASK_PRESENCE`]) are zero-filled.
pub fn encode_shapes(g: &mut Graph, logits: Var, coords: Var) -> Result<ShapeTokens> {
    let b = g.shape(logits)[0];
    if g.shape(logits) != [b, 3] || g.shape(coords) != [b, MAX_VERTICES, 2] {
        return Err(Error::Contract(format!(
            "shape batch wants logits [B, 3] and coords [B, 4, 2], got {:?} and {:?}",
            g.shape(logits),
            g.shape(coords)
        )));
    }
    let presence = presence_chain_graph(g, logits)?;
    let keep: Vec<bool> = g.value(presence).data().iter().map(|&p| p >= MASK_PRESENCE).collect();
    let keep_t = Tensor::new(&[b, MAX_VERTICES, 1], keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect())?;
    let keep_v = g.constant(keep_t);
    let masked = g.mul(coords, keep_v)?;
    let scaled = g.scale(masked, 1.0 / HALF_CELL);
    let p3 = g.reshape(presence, &[b, MAX_VERTICES, 1])?;
    let p3 = g.mul(p3, keep_v)?;
    let tokens = g.concat(&[p3, scaled], 2)?;
    Ok(ShapeTokens { tokens, presence, keep })
}

/// Constant tokens for fixed shapes (dataset records).
pub fn shape_batch(g: &mut Graph, shapes: &[&ShapeParams]) -> Result<ShapeTokens> {
    let b = shapes.len();
    let logits = Tensor::new(&[b, 3], shapes.iter().flat_map(|s| s.logits).collect())?;
    let coords = Tensor::new(&[b, MAX_VERTICES, 2], shapes.iter().flat_map(|s| s.vertices.iter().flatten().copied()).collect())?;
    let l = g.constant(logits);
    let c = g.constant(coords);
    encode_shapes(g, l, c)
}

impl SurrogateModel {
    pub fn new(cfg: SurrogateConfig, seed: u64) -> Result<Self> {
        if cfg.d_model == 0 || cfg.heads == 0 || !cfg.d_model.is_multiple_of(cfg.heads) {
            return Err(Error::Contract(format!("d_model {} must be a positive multiple of heads {}", cfg.d_model, cfg.heads)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let embed = Linear::new(&mut store, "s2f.embed", 3, d, &mut rng);
        let pos = store.add("s2f.pos", Tensor::uniform(&[MAX_VERTICES, d], -0.1, 0.1, &mut rng));
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let p = format!("s2f.block{i}");
                Block {
                    norm1: Norm::new(&mut store, &format!("{p}.norm1"), d),
                    qkv: Linear::new(&mut store, &format!("{p}.qkv"), d, 3 * d, &mut rng),
                    proj: Linear::new(&mut store, &format!("{p}.proj"), d, d, &mut rng),
                    norm2: Norm::new(&mut store, &format!("{p}.norm2"), d),
                    ff1: Linear::new(&mut store, &format!("{p}.ff1"), d, cfg.ff_mult * d, &mut rng),
                    ff2: Linear::new(&mut store, &format!("{p}.ff2"), cfg.ff_mult * d, d, &mut rng),
                }
            })
            .collect();
        let final_norm = Norm::new(&mut store, "s2f.norm", d);
        let pool_head = Linear::new(&mut store, "s2f.head", d, d, &mut rng);
        let out = Linear::new(&mut store, "s2f.out", d, cfg.m * cfg.n, &mut rng);
        Ok(SurrogateModel { cfg, store, embed, pos, blocks, final_norm, pool_head, out })
    }

    /// Sets the output layer to zero, making every prediction exactly 0.5.
    pub fn zero_output_head(&mut self) {
        for id in [self.out.w, self.out.b] {
            self.store.value_mut(id).data_mut().fill(0.0);
        }
    }

    /// Prediction `[B, M, N]` from encoded tokens.
    pub fn forward(&self, g: &mut Graph, enc: &ShapeTokens) -> Result<Var> {
        let shape = g.shape(enc.tokens).to_vec();
        if shape.len() != 3 || shape[1] != MAX_VERTICES || shape[2] != 3 || enc.keep.len() != shape[0] * MAX_VERTICES {
            return Err(Error::Contract(format!("vertex tokens must be [B, 4, 3], got {shape:?}")));
        }
        if enc.keep.chunks(MAX_VERTICES).any(|c| !c.iter().any(|&k| k)) {
            return Err(Error::Contract("every shape needs at least one unmasked vertex".into()));
        }
        let (b, t) = (shape[0], MAX_VERTICES);
        let (d, h) = (self.cfg.d_model, self.cfg.heads);
        let dh = d / h;
        let st = &self.store;

        // key bias ln(p) for live tokens, -inf for masked ones
        let keep_t = Tensor::new(&[b, t], enc.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect())?;
        let keep = g.constant(keep_t.clone());
        let hard = g.constant(keep_t.map(|k| if k > 0.0 { 0.0 } else { f64::NEG_INFINITY }));
        let live_p = g.mul(enc.presence, keep)?;
        let one = g.constant(Tensor::scalar(1.0));
        let dead = g.sub(one, keep)?;
        let safe_p = g.add(live_p, dead)?;
        let log_p = g.ln(safe_p);
        let key_bias = g.add(log_p, hard)?;
        let bias = g.gather(key_bias, bias_index(b, h, t), &[b, h, t, t])?;

        let x = self.embed.forward(g, st, enc.tokens)?;
        let pos = g.param(st, self.pos);
        let mut x = g.add(x, pos)?;
        let split = [0, 1, 2].map(|part| split_index(b, t, d, h, part));
        let merge = merge_index(b, t, d, h);
        for blk in &self.blocks {
            let n1 = blk.norm1.forward(g, st, x)?;
            let qkv = blk.qkv.forward(g, st, n1)?;
            let q = g.gather(qkv, split[0].clone(), &[b, h, t, dh])?;
            let k = g.gather(qkv, split[1].clone(), &[b, h, t, dh])?;
            let v = g.gather(qkv, split[2].clone(), &[b, h, t, dh])?;
            let att = g.attention(q, k, v, Some(bias), 1.0 / (dh as f64).sqrt())?;
            let merged = g.gather(att, merge.clone(), &[b, t, d])?;
            let proj = blk.proj.forward(g, st, merged)?;
            x = g.add(x, proj)?;
            let n2 = blk.norm2.forward(g, st, x)?;
            let f1 = blk.ff1.forward(g, st, n2)?;
            let f1 = g.relu(f1);
            let f2 = blk.ff2.forward(g, st, f1)?;
            x = g.add(x, f2)?;
        }
        let x = self.final_norm.forward(g, st, x)?;

        // presence-weighted mean over live tokens
        let w = g.reshape(live_p, &[b, 1, t])?;
        let num = g.matmul(w, x)?;
        let den = g.sum_axis(w, 2, true)?;
        let pooled = g.div(num, den)?;
        let pooled = g.reshape(pooled, &[b, d])?;
        let hid = self.pool_head.forward(g, st, pooled)?;
        let hid = g.relu(hid);
        let logits = self.out.forward(g, st, hid)?;
        let y = g.sigmoid(logits);
        Ok(g.reshape(y, &[b, self.cfg.m, self.cfg.n])?)
    }

    /// Prediction from graph-side shape variables.
    pub fn forward_shape(&self, g: &mut Graph, logits: Var, coords: Var) -> Result<Var> {
        let enc = encode_shapes(g, logits, coords)?;
        self.forward(g, &enc)
    }

    pub fn predict_batch(&self, shapes: &[&ShapeParams]) -> Result<Vec<FilterBank>> {
        let mut g = Graph::new();
        let enc = shape_batch(&mut g, shapes)?;
        let y = self.forward(&mut g, &enc)?;
        let per = self.cfg.m * self.cfg.n;
        g.value(y).data().chunks(per).map(|c| FilterBank::new(self.cfg.m, self.cfg.n, c.to_vec())).collect()
    }

    pub fn predict(&self, shape: &ShapeParams) -> Result<FilterBank> {
        Ok(self.predict_batch(&[shape])?.remove(0))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_store(&self.store);
        let cfg = &self.cfg;
        for (k, v) in
            [("d_model", cfg.d_model), ("heads", cfg.heads), ("blocks", cfg.blocks), ("ff_mult", cfg.ff_mult), ("m", cfg.m), ("n", cfg.n)]
        {
            c.push_meta(&format!("s2f.{k}"), v as f64);
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let get = |k: &str| c.meta_usize(&format!("s2f.{k}"));
        let cfg = SurrogateConfig {
            d_model: get("d_model")?,
            heads: get("heads")?,
            blocks: get("blocks")?,
            ff_mult: get("ff_mult")?,
            m: get("m")?,
            n: get("n")?,
        };
        let mut model = SurrogateModel::new(cfg, 0)?;
        c.load_into(&mut model.store)?;
        Ok(model)
    }
}

fn split_index(b: usize, t: usize, d: usize, h: usize, part: usize) -> Arc<Vec<usize>> {
    let dh = d / h;
    let mut idx = Vec::with_capacity(b * t * d);
    for bi in 0..b {
        for hi in 0..h {
            for ti in 0..t {
                for e in 0..dh {
                    idx.push((bi * t + ti) * 3 * d + part * d + hi * dh + e);
                }
            }
        }
    }
    Arc::new(idx)
}

fn merge_index(b: usize, t: usize, d: usize, h: usize) -> Arc<Vec<usize>> {
    let dh = d / h;
    let mut idx = Vec::with_capacity(b * t * d);
    for bi in 0..b {
        for ti in 0..t {
            for hi in 0..h {
                for e in 0..dh {
                    idx.push(((bi * h + hi) * t + ti) * dh + e);
                }
            }
        }
    }
    Arc::new(idx)
}

fn bias_index(b: usize, h: usize, t: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(b * h * t * t);
    for bi in 0..b {
        for _ in 0..h {
            for _ in 0..t {
                for j in 0..t {
                    idx.push(bi * t + j);
                }
            }
        }
    }
    Arc::new(idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseConfig {
    pub hidden: usize,
    pub layers: usize,
    pub m: usize,
    pub n: usize,
}

impl Default for InverseConfig {
    fn default() -> Self {
        InverseConfig { hidden: 256, layers: 3, m: 11, n: 100 }
    }
}

/// Feed-forward filter-bank → shape network.
#[derive(Debug, Clone)]
pub struct Filter2ShapeModel {
    pub cfg: InverseConfig,
    pub store: ParamStore,
    layers: Vec<Linear>,
    head: Linear,
}

impl Filter2ShapeModel {
    pub fn new(cfg: InverseConfig, seed: u64) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden == 0 {
            return Err(Error::Contract("inverse network needs at least one hidden layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut width = cfg.m * cfg.n;
        for i in 0..cfg.layers {
            layers.push(Linear::new(&mut store, &format!("f2s.layer{i}"), width, cfg.hidden, &mut rng));
            width = cfg.hidden;
        }
        let head = Linear::new(&mut store, "f2s.head", width, 3 + 2 * MAX_VERTICES, &mut rng);
        Ok(Filter2ShapeModel { cfg, store, layers, head })
    }

    /// `bank: [B, M, N]` → (`logits [B, 3]`, `coords [B, 4, 2]` in `[0, 0.5]`).
    pub fn forward(&self, g: &mut Graph, bank: Var) -> Result<(Var, Var)> {
        let shape = g.shape(bank).to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.m || shape[2] != self.cfg.n {
            return Err(Error::Contract(format!("filter2shape wants [B, {}, {}], got {shape:?}", self.cfg.m, self.cfg.n)));
        }
        let b = shape[0];
        let mut x = g.reshape(bank, &[b, self.cfg.m * self.cfg.n])?;
        for layer in &self.layers {
            x = layer.forward(g, &self.store, x)?;
            x = g.relu(x);
        }
        let out = self.head.forward(g, &self.store, x)?;
        let logits = g.slice(out, 1, 0, 3)?;
        let raw = g.slice(out, 1, 3, 3 + 2 * MAX_VERTICES)?;
        let squashed = g.sigmoid(raw);
        let coords = g.scale(squashed, HALF_CELL);
        let coords = g.reshape(coords, &[b, MAX_VERTICES, 2])?;
        Ok((logits, coords))
    }

    pub fn infer(&self, bank: &FilterBank) -> Result<ShapeParams> {
        let mut g = Graph::new();
        let x = g.constant(bank.to_tensor().reshape(&[1, bank.rows(), bank.cols()])?);
        let (l, c) = self.forward(&mut g, x)?;
        Ok(shape_from_values(g.value(l).data(), g.value(c).data()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_store(&self.store);
        for (k, v) in [("hidden", self.cfg.hidden), ("layers", self.cfg.layers), ("m", self.cfg.m), ("n", self.cfg.n)] {
            c.push_meta(&format!("f2s.{k}"), v as f64);
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let get = |k: &str| c.meta_usize(&format!("f2s.{k}"));
        let cfg = InverseConfig { hidden: get("hidden")?, layers: get("layers")?, m: get("m")?, n: get("n")? };
        let mut model = Filter2ShapeModel::new(cfg, 0)?;
        c.load_into(&mut model.store)?;
        Ok(model)
    }
}

pub(crate) fn shape_from_values(logits: &[f64], coords: &[f64]) -> ShapeParams {
    let mut s = ShapeParams { logits: [logits[0], logits[1], logits[2]], vertices: [[0.0; 2]; MAX_VERTICES] };
    for i in 0..MAX_VERTICES {
        s.vertices[i] = [coords[2 * i], coords[2 * i + 1]];
    }
    s
}

/// Shape → spectrum → shape. Both networks are used as-is (normally frozen).
pub fn soft_project(g: &mut Graph, s2f: &SurrogateModel, f2s: &Filter2ShapeModel, logits: Var, coords: Var) -> Result<(Var, Var)> {
    let bank = s2f.forward_shape(g, logits, coords)?;
    f2s.forward(g, bank)
}

/// Plain-value wrapper of [`soft_project`].
pub fn project_shape(s2f: &SurrogateModel, f2s: &Filter2ShapeModel, shape: &ShapeParams) -> Result<ShapeParams> {
    let mut g = Graph::new();
    let l = g.constant(Tensor::new(&[1, 3], shape.logits.to_vec())?);
    let c = g.constant(Tensor::new(&[1, MAX_VERTICES, 2], shape.vertices.iter().flatten().copied().collect())?);
    let (l2, c2) = soft_project(&mut g, s2f, f2s, l, c)?;
    Ok(shape_from_values(g.value(l2).data(), g.value(c2).data()))
}

// ---- training -----------------------------------------------------------------

/// Optimizer settings shared by the three network-training procedures.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine schedule); 1 disables decay.
    pub lr_floor: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 60, batch: 32, lr: 1e-3, lr_floor: 0.05, seed: 0 }
    }
}

impl TrainOptions {
    fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * cos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_mse: f64,
    pub test_mse: f64,
}

/// Per-epoch training log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub rows: Vec<EpochReport>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch, train_mse, test_mse\n");
        for r in &self.rows {
            s.push_str(&format!("{}, {}, {}\n", r.epoch, r.train_mse, r.test_mse));
        }
        s
    }

    pub fn final_test_mse(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.test_mse)
    }
}

/// Whether record `index` belongs to the held-out tenth.
pub fn is_test_record(index: usize) -> bool {
    mix64(index as u64).is_multiple_of(10)
}

/// `(train, test)` record indices; tiny datasets train on everything.
pub fn split_indices(count: usize) -> (Vec<usize>, Vec<usize>) {
    let (test, train): (Vec<usize>, Vec<usize>) = (0..count).partition(|&i| is_test_record(i));
    if train.is_empty() {
        return ((0..count).collect(), test);
    }
    (train, test)
}

fn check_loss(loss: f64, epoch: usize, step: usize, last_finite_epoch: Option<usize>) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { epoch, step, last_finite_epoch })
    }
}

fn bank_batch(g: &mut Graph, data: &Dataset, idx: &[usize]) -> Result<Var> {
    let first = &data.records[idx[0]].bank;
    let (m, n) = (first.rows(), first.cols());
    let values = idx.iter().flat_map(|&i| data.records[i].bank.data().iter().copied()).collect();
    Ok(g.constant(Tensor::new(&[idx.len(), m, n], values)?))
}

/// Models whose parameters a training loop may update.
pub trait Trainable {
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl Trainable for SurrogateModel {
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl Trainable for Filter2ShapeModel {
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Generic mini-batch loop; `loss_fn` builds the loss for a batch of record indices.
fn fit<M: Trainable>(
    model: &mut M,
    data: &Dataset,
    opts: &TrainOptions,
    mut loss_fn: impl FnMut(&M, &mut Graph, &[usize]) -> Result<Var>,
) -> Result<TrainReport> {
    if data.records.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if opts.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let (mut train, test) = split_indices(data.records.len());
    let eval_set = if test.is_empty() { train.clone() } else { test };
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(opts.seed, 1));
    let mut adam = Adam::new(opts.lr);
    let mut report = TrainReport::default();
    let mut last_finite = None;
    for epoch in 0..opts.epochs {
        adam.lr = opts.lr_at(epoch);
        train.shuffle(&mut rng);
        let (mut sum, mut seen) = (0.0, 0usize);
        for (step, chunk) in train.chunks(opts.batch).enumerate() {
            let mut g = Graph::new();
            let loss = loss_fn(model, &mut g, chunk)?;
            let value = g.value(loss).item();
            check_loss(value, epoch, step, last_finite)?;
            g.backward(loss)?;
            let store = model.params_mut();
            g.write_param_grads(store);
            adam.step(store)?;
            sum += value * chunk.len() as f64;
            seen += chunk.len();
        }
        let mut test_sum = 0.0;
        for chunk in eval_set.chunks(opts.batch.max(64)) {
            let mut g = Graph::new();
            let loss = loss_fn(model, &mut g, chunk)?;
            test_sum += g.value(loss).item() * chunk.len() as f64;
        }
        let test_mse = test_sum / eval_set.len() as f64;
        check_loss(test_mse, epoch, 0, last_finite)?;
        last_finite = Some(epoch);
        report.rows.push(EpochReport { epoch, train_mse: sum / seen.max(1) as f64, test_mse });
    }
    Ok(report)
}

/// Fits the surrogate to oracle spectra (MSE over all `M × N` entries).
pub fn train_surrogate(model: &mut SurrogateModel, data: &Dataset, opts: &TrainOptions) -> Result<TrainReport> {
    check_dims(data, model.cfg.m, model.cfg.n)?;
    fit(model, data, opts, |m, g, idx| {
        let shapes: Vec<&ShapeParams> = idx.iter().map(|&i| &data.records[i].shape).collect();
        let enc = shape_batch(g, &shapes)?;
        let pred = m.forward(g, &enc)?;
        let target = bank_batch(g, data, idx)?;
        Ok(g.mse(pred, target)?)
    })
}

/// Shape-space loss of the inverse network: presence MSE plus coordinate MSE
/// over the vertices that are present in the target.
pub fn shape_loss(g: &mut Graph, logits: Var, coords: Var, targets: &[&ShapeParams]) -> Result<Var> {
    let b = targets.len();
    let want_p: Vec<f64> = targets.iter().flat_map(|s| s.presence()).collect();
    let active: Vec<f64> = targets.iter().flat_map(|s| s.active().into_iter().flat_map(|a| [if a { 1.0 } else { 0.0 }; 2])).collect();
    let live = active.iter().sum::<f64>().max(1.0);
    let want_c: Vec<f64> = targets.iter().flat_map(|s| s.vertices.iter().flatten().copied()).collect();
    let p = presence_chain_graph(g, logits)?;
    let tp = g.constant(Tensor::new(&[b, MAX_VERTICES], want_p)?);
    let presence_term = g.mse(p, tp)?;
    let tc = g.constant(Tensor::new(&[b, MAX_VERTICES, 2], want_c)?);
    let mask = g.constant(Tensor::new(&[b, MAX_VERTICES, 2], active)?);
    let diff = g.sub(coords, tc)?;
    let diff = g.mul(diff, mask)?;
    let sq = g.square(diff)?;
    let sum = g.sum(sq);
    let coord_term = g.scale(sum, 1.0 / live);
    Ok(g.add(presence_term, coord_term)?)
}

/// Fits the inverse network to the dataset's shapes.
pub fn train_filter2shape(model: &mut Filter2ShapeModel, data: &Dataset, opts: &TrainOptions) -> Result<TrainReport> {
    check_dims(data, model.cfg.m, model.cfg.n)?;
    fit(model, data, opts, |m, g, idx| {
        let x = bank_batch(g, data, idx)?;
        let (l, c) = m.forward(g, x)?;
        let targets: Vec<&ShapeParams> = idx.iter().map(|&i| &data.records[i].shape).collect();
        shape_loss(g, l, c, &targets)
    })
}

/// Spectral round-trip error `MSE(S2F(F2S(bank)), bank)` on the given records.
pub fn tandem_mse(s2f: &SurrogateModel, f2s: &Filter2ShapeModel, data: &Dataset, idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(64) {
        let mut g = Graph::new();
        let x = bank_batch(&mut g, data, chunk)?;
        let (l, c) = f2s.forward(&mut g, x)?;
        let y = s2f.forward_shape(&mut g, l, c)?;
        let loss = g.mse(y, x)?;
        total += g.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / idx.len().max(1) as f64)
}

/// Tunes the inverse network through a frozen surrogate so that its shapes
/// reproduce the input spectra.
pub fn finetune_tandem(f2s: &mut Filter2ShapeModel, s2f: &SurrogateModel, data: &Dataset, opts: &TrainOptions) -> Result<TrainReport> {
    if !s2f.store.is_frozen() {
        return Err(Error::Contract("tandem fine-tuning requires a frozen surrogate".into()));
    }
    check_dims(data, f2s.cfg.m, f2s.cfg.n)?;
    let report = fit(f2s, data, opts, |m, g, idx| {
        let x = bank_batch(g, data, idx)?;
        let (l, c) = m.forward(g, x)?;
        let y = s2f.forward_shape(g, l, c)?;
        Ok(g.mse(y, x)?)
    })?;
    if s2f.store.has_any_grad() {
        return Err(Error::Contract("surrogate accumulated gradients during tandem fine-tuning".into()));
    }
    Ok(report)
}

fn check_dims(data: &Dataset, m: usize, n: usize) -> Result<()> {
    match data.records.first() {
        None => Err(Error::Data("dataset is empty".into())),
        Some(r) if (r.bank.rows(), r.bank.cols()) != (m, n) => {
            Err(Error::Data(format!("dataset spectra are {}x{}, model expects {m}x{n}", r.bank.rows(), r.bank.cols())))
        }
        Some(_) => Ok(()),
    }
}
