//! Joint optimization of the metasurface shape and the decoder.
//!
//! Every step builds one graph: shape → (projection) → surrogate Φ → encode a
//! batch of crops → add noise at a random SNR → decode → MSE. Gradients reach
//! both the decoder weights and the shape; each has its own Adam optimizer.
//! Training the decoder against a fixed Φ is the same loop with the shape
//! branch switched off.

use std::fmt::Write as _;

use pcm_autodiff::{Adam, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::decoder::{DecoderConfig, DecoderModel};
use crate::geometry::{ShapeParams, MAX_VERTICES};
use crate::nn::child_seed;
use crate::oracle::{dataset_shape, FilterBank, Oracle};
use crate::sensing::{add_noise_in_place, condition_number, encode, metrics, Metrics};
use crate::surrogate::{project_shape, shape_from_values, soft_project, Filter2ShapeModel, SurrogateModel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CodesignOptions {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub crop: usize,
    pub decoder_lr: f64,
    pub shape_lr: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub test_snr_db: f64,
    /// Apply the shape → spectrum → shape projection every `k` steps (0: never).
    pub project_every: usize,
    pub frozen_shape: bool,
    pub seed: u64,
}

impl Default for CodesignOptions {
    fn default() -> Self {
        CodesignOptions {
            epochs: 100,
            steps_per_epoch: 4,
            batch: 8,
            crop: 16,
            decoder_lr: 1e-3,
            shape_lr: 1e-2,
            snr_min_db: 10.0,
            snr_max_db: 40.0,
            test_snr_db: 30.0,
            project_every: 1,
            frozen_shape: false,
            seed: 0,
        }
    }
}

impl CodesignOptions {
    fn validate(&self) -> Result<()> {
        if self.steps_per_epoch == 0 || self.batch == 0 || self.crop == 0 {
            return Err(Error::Config("steps_per_epoch, batch and crop must be positive".into()));
        }
        if !(self.snr_min_db <= self.snr_max_db) || !self.snr_min_db.is_finite() || !self.snr_max_db.is_finite() {
            return Err(Error::Config(format!("bad SNR range [{}, {}]", self.snr_min_db, self.snr_max_db)));
        }
        Ok(())
    }
}

/// One row of the run log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub psnr: f64,
    pub sam: f64,
    pub mse: f64,
    pub cond: f64,
}

/// Outcome of [`joint_optimize`] or [`train_decoder`].
#[derive(Debug, Clone)]
pub struct CodesignRun {
    pub initial_shape: ShapeParams,
    /// Shape after each epoch (constant when the shape is frozen or absent).
    pub shapes: Vec<ShapeParams>,
    pub metrics: Vec<EpochMetrics>,
    pub config_hash: String,
    pub seed: u64,
    pub decoder: DecoderModel,
}

impl CodesignRun {
    pub fn final_shape(&self) -> &ShapeParams {
        self.shapes.last().unwrap_or(&self.initial_shape)
    }

    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.metrics.last()
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    /// `(min, argmin)` of the condition-number trajectory.
    pub fn cond_minimum(&self) -> Option<(f64, usize)> {
        self.metrics.iter().map(|m| (m.cond, m.epoch)).fold(None, |best, cur| match best {
            Some(b) if b.0 <= cur.0 => Some(b),
            _ => Some(cur),
        })
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,loss,psnr,sam,mse,cond\n");
    for m in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", m.epoch, m.loss, m.psnr, m.sam, m.mse, m.cond);
    }
    s
}

/// Hex SHA-256 of a configuration snapshot.
pub fn config_hash(snapshot: &str) -> String {
    Sha256::digest(snapshot.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// The random starting design for seed `seed`.
pub fn initial_shape(seed: u64) -> ShapeParams {
    dataset_shape(child_seed(seed, 7), 0)
}

/// Where Φ comes from during a run.
pub enum Encoder<'a> {
    Fixed(FilterBank),
    Shape { shape: ShapeParams, s2f: &'a SurrogateModel, f2s: &'a Filter2ShapeModel },
}

struct ShapeState<'a> {
    store: ParamStore,
    adam: Adam,
    s2f: &'a SurrogateModel,
    f2s: &'a Filter2ShapeModel,
}

impl ShapeState<'_> {
    fn shape(&self) -> ShapeParams {
        let e = self.store.entries();
        shape_from_values(e[0].value.data(), e[1].value.data())
    }

    /// Φ `[M, N]` in the graph, optionally through the projection.
    fn bank(&self, g: &mut Graph, project: bool) -> Result<Var> {
        let ids: Vec<_> = self.store.ids().collect();
        let mut l = g.param(&self.store, ids[0]);
        let mut c = g.param(&self.store, ids[1]);
        if project {
            (l, c) = soft_project(g, self.s2f, self.f2s, l, c)?;
        }
        let y = self.s2f.forward_shape(g, l, c)?;
        let cfg = &self.s2f.cfg;
        Ok(g.reshape(y, &[cfg.m, cfg.n])?)
    }

    fn clamp(&mut self) {
        let mut s = self.shape();
        s.clamp_to_design_bounds();
        let coords = self.store.entries_mut()[1].value.data_mut();
        for (dst, src) in coords.iter_mut().zip(s.vertices.iter().flatten()) {
            *dst = *src;
        }
    }
}

/// Surrogate Φ of `shape`, through the projection when `project` is set.
pub fn surrogate_bank(s2f: &SurrogateModel, f2s: &Filter2ShapeModel, shape: &ShapeParams, project: bool) -> Result<FilterBank> {
    if project {
        s2f.predict(&project_shape(s2f, f2s, shape)?)
    } else {
        s2f.predict(shape)
    }
}

/// Loss of one batch: `mean((D(Φ x + noise) − x)^2)`.
///
/// `phi: [M, N]`, `x: [B, N, h, w]`; `noise` has the measurement shape `[B, M, h, w]`.
pub fn batch_loss(g: &mut Graph, decoder: &DecoderModel, phi: Var, x: &Tensor, noise: Option<&Tensor>) -> Result<Var> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Contract(format!("cube batch must be [B, N, h, w], got {s:?}")));
    }
    let (b, n, h, w) = (s[0], s[1], s[2], s[3]);
    let m = g.shape(phi)[0];
    let xv = g.constant(x.clone());
    let flat = g.reshape(xv, &[b, n, h * w])?;
    let y = g.matmul(phi, flat)?;
    let mut y = g.reshape(y, &[b, m, h, w])?;
    if let Some(noise) = noise {
        let nv = g.constant(noise.clone());
        y = g.add(y, nv)?;
    }
    let out = decoder.forward(g, y)?;
    Ok(g.mse(out, xv)?)
}

fn sample_batch<R: Rng>(cubes: &[crate::sensing::HyperCube], batch: usize, crop: usize, rng: &mut R) -> Result<Tensor> {
    let n = cubes[0].dims().2;
    let mut data = Vec::with_capacity(batch * n * crop * crop);
    for _ in 0..batch {
        let cube = &cubes[rng.random_range(0..cubes.len())];
        let (h, w, _) = cube.dims();
        let row = rng.random_range(0..=h - crop);
        let col = rng.random_range(0..=w - crop);
        data.extend(cube.crop_channels_first(row, col, crop));
    }
    Ok(Tensor::new(&[batch, n, crop, crop], data)?)
}

/// Mean validation metrics of `decoder` under `bank` at `snr_db`.
pub fn evaluate(
    decoder: &DecoderModel,
    bank: &FilterBank,
    cubes: &[crate::sensing::HyperCube],
    snr_db: f64,
    noise_seed: u64,
) -> Result<Metrics> {
    if cubes.is_empty() {
        return Err(Error::Data("no validation cubes".into()));
    }
    let mut acc = Metrics { psnr: 0.0, sam: 0.0, mse: 0.0 };
    for (i, cube) in cubes.iter().enumerate() {
        let mut meas = encode(cube, bank)?;
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(noise_seed, i as u64));
        add_noise_in_place(&mut meas.data, snr_db, &mut rng)?;
        let recon = decoder.decode(&meas)?;
        let m = metrics(cube, &recon)?;
        acc.psnr += m.psnr;
        acc.sam += m.sam;
        acc.mse += m.mse;
    }
    let k = cubes.len() as f64;
    Ok(Metrics { psnr: acc.psnr / k, sam: acc.sam / k, mse: acc.mse / k })
}

fn run(
    encoder: Encoder<'_>,
    mut decoder: DecoderModel,
    train: &[crate::sensing::HyperCube],
    val: &[crate::sensing::HyperCube],
    opts: &CodesignOptions,
    config_hash: String,
) -> Result<CodesignRun> {
    opts.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("co-design needs at least one training and one validation cube".into()));
    }
    let n = decoder.cfg.n;
    if train.iter().chain(val).any(|c| c.dims().2 != n) {
        return Err(Error::Contract(format!("all cubes must have N = {n} channels")));
    }
    let crop = train.iter().map(|c| c.dims().0.min(c.dims().1)).min().unwrap_or(0).min(opts.crop);

    let (fixed, mut shape_state, initial) = match encoder {
        Encoder::Fixed(bank) => (Some(bank), None, None),
        Encoder::Shape { shape, s2f, f2s } => {
            if !s2f.store.is_frozen() || !f2s.store.is_frozen() {
                return Err(Error::Contract("surrogate and inverse network must be frozen for co-design".into()));
            }
            let mut store = ParamStore::new();
            store.add("shape.logits", Tensor::new(&[1, 3], shape.logits.to_vec())?);
            store.add("shape.coords", Tensor::new(&[1, MAX_VERTICES, 2], shape.vertices.iter().flatten().copied().collect())?);
            let state = ShapeState { store, adam: Adam::new(opts.shape_lr), s2f, f2s };
            (None, Some(state), Some(shape))
        }
    };
    if let Some(bank) = &fixed {
        if (bank.rows(), bank.cols()) != (decoder.cfg.m, n) {
            return Err(Error::Contract(format!("filter bank is {}x{}, decoder expects {}x{n}", bank.rows(), bank.cols(), decoder.cfg.m)));
        }
    }
    let initial_shape = initial.unwrap_or(ShapeParams { logits: [0.0; 3], vertices: [[0.0; 2]; MAX_VERTICES] });

    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(opts.seed, 11));
    let val_seed = child_seed(opts.seed, 13);
    let mut dec_adam = Adam::new(opts.decoder_lr);
    let mut shapes = Vec::with_capacity(opts.epochs);
    let mut rows = Vec::with_capacity(opts.epochs);
    let mut last_finite = None;
    let mut global_step = 0usize;

    for epoch in 0..opts.epochs {
        let mut loss_sum = 0.0;
        for step in 0..opts.steps_per_epoch {
            let x = sample_batch(train, opts.batch, crop, &mut rng)?;
            let snr = if opts.snr_max_db > opts.snr_min_db { rng.random_range(opts.snr_min_db..opts.snr_max_db) } else { opts.snr_min_db };
            let mut g = Graph::new();
            let phi = match (&fixed, &shape_state) {
                (Some(bank), _) => g.constant(bank.to_tensor()),
                (None, Some(st)) => {
                    let project = opts.project_every > 0 && global_step.is_multiple_of(opts.project_every);
                    st.bank(&mut g, project)?
                }
                (None, None) => unreachable!("one encoder source is always set"),
            };
            // noise level needs the clean measurement, so encode once outside the graph
            let clean = {
                let mut probe = Graph::new();
                let p = probe.constant(g.value(phi).clone());
                let xs = x.shape().to_vec();
                let xv = probe.constant(x.clone().reshape(&[xs[0], xs[1], xs[2] * xs[3]])?);
                let y = probe.matmul(p, xv)?;
                probe.value(y).data().to_vec()
            };
            let mut noisy = clean.clone();
            add_noise_in_place(&mut noisy, snr, &mut rng)?;
            let m = decoder.cfg.m;
            let noise: Vec<f64> = noisy.iter().zip(&clean).map(|(a, b)| a - b).collect();
            let noise = Tensor::new(&[opts.batch, m, crop, crop], noise)?;
            let loss = batch_loss(&mut g, &decoder, phi, &x, Some(&noise))?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, step, last_finite_epoch: last_finite });
            }
            g.backward(loss)?;
            g.write_param_grads(&mut decoder.store);
            dec_adam.step(&mut decoder.store)?;
            if let Some(st) = shape_state.as_mut() {
                if !opts.frozen_shape {
                    g.write_param_grads(&mut st.store);
                    st.adam.step(&mut st.store)?;
                    st.clamp();
                }
            }
            loss_sum += value;
            global_step += 1;
        }

        let (bank, shape) = match (&fixed, &shape_state) {
            (Some(bank), _) => (bank.clone(), initial_shape.clone()),
            (None, Some(st)) => {
                let s = st.shape();
                (surrogate_bank(st.s2f, st.f2s, &s, opts.project_every > 0)?, s)
            }
            (None, None) => unreachable!(),
        };
        let m = evaluate(&decoder, &bank, val, opts.test_snr_db, val_seed)?;
        let cond = condition_number(&bank)?.value;
        last_finite = Some(epoch);
        shapes.push(shape);
        rows.push(EpochMetrics { epoch, loss: loss_sum / opts.steps_per_epoch as f64, psnr: m.psnr, sam: m.sam, mse: m.mse, cond });
    }
    Ok(CodesignRun { initial_shape, shapes, metrics: rows, config_hash, seed: opts.seed, decoder })
}

/// Trains `decoder` against a fixed filter bank.
pub fn train_decoder(
    decoder: DecoderModel,
    train: &[crate::sensing::HyperCube],
    val: &[crate::sensing::HyperCube],
    bank: &FilterBank,
    opts: &CodesignOptions,
) -> Result<CodesignRun> {
    run(Encoder::Fixed(bank.clone()), decoder, train, val, opts, String::new())
}

/// Jointly optimizes `shape0` and `decoder`. With `opts.frozen_shape` the
/// shape's Φ is computed once and the run is plain decoder training.
#[allow(clippy::too_many_arguments)]
pub fn joint_optimize(
    shape0: &ShapeParams,
    decoder: DecoderModel,
    s2f: &SurrogateModel,
    f2s: &Filter2ShapeModel,
    train: &[crate::sensing::HyperCube],
    val: &[crate::sensing::HyperCube],
    opts: &CodesignOptions,
    config_hash: String,
) -> Result<CodesignRun> {
    if opts.frozen_shape {
        let bank = surrogate_bank(s2f, f2s, shape0, opts.project_every > 0)?;
        let mut r = run(Encoder::Fixed(bank), decoder, train, val, opts, config_hash)?;
        r.initial_shape = shape0.clone();
        r.shapes = vec![shape0.clone(); r.metrics.len()];
        return Ok(r);
    }
    run(Encoder::Shape { shape: shape0.clone(), s2f, f2s }, decoder, train, val, opts, config_hash)
}

/// One line of the two-stage comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageRow {
    pub case: &'static str,
    pub snr_db: f64,
    pub psnr: f64,
    pub sam: f64,
    pub mse: f64,
    pub surrogate_oracle_mse: f64,
}

pub fn two_stage_csv(rows: &[TwoStageRow]) -> String {
    let mut s = String::from("case,snr_db,psnr,sam,mse,surrogate_oracle_mse\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.case, r.snr_db, r.psnr, r.sam, r.mse, r.surrogate_oracle_mse);
    }
    s
}

/// Re-simulates the initial and final designs with the oracle, retrains a
/// fresh decoder for each under the same budget and seed, and evaluates both
/// at every SNR in `snrs`.
#[allow(clippy::too_many_arguments)]
pub fn two_stage_eval(
    initial: &ShapeParams,
    optimized: &ShapeParams,
    oracle: &Oracle,
    s2f: &SurrogateModel,
    decoder_cfg: &DecoderConfig,
    train: &[crate::sensing::HyperCube],
    val: &[crate::sensing::HyperCube],
    opts: &CodesignOptions,
    snrs: &[f64],
) -> Result<Vec<TwoStageRow>> {
    let mut rows = Vec::new();
    for (case, shape) in [("initial", initial), ("optimized", optimized)] {
        let design = shape.hardened();
        let bank = oracle.shape_to_filterbank(&design)?;
        let gap = s2f.predict(&design)?.mse(&bank)?;
        let decoder = DecoderModel::new(decoder_cfg.clone(), child_seed(opts.seed, 3))?;
        let run = train_decoder(decoder, train, val, &bank, opts)?;
        for (k, &snr) in snrs.iter().enumerate() {
            let m = evaluate(&run.decoder, &bank, val, snr, child_seed(opts.seed, 100 + k as u64))?;
            rows.push(TwoStageRow { case, snr_db: snr, psnr: m.psnr, sam: m.sam, mse: m.mse, surrogate_oracle_mse: gap });
        }
    }
    Ok(rows)
}

/// `(epoch, cond)` rows for a stream of filter banks.
pub fn track_condition<'a>(banks: impl IntoIterator<Item = &'a FilterBank>) -> Result<Vec<(usize, f64)>> {
    banks.into_iter().enumerate().map(|(e, b)| Ok((e, condition_number(b)?.value))).collect()
}

pub fn condition_csv(rows: &[(usize, f64)]) -> String {
    let mut s = String::from("epoch,cond\n");
    for (e, c) in rows {
        let _ = writeln!(s, "{e},{c}");
    }
    s
}
