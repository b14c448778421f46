//! Squared-error training with hand-derived reverse-mode gradients.
//!
//! Per attention layer with input `h`, logits `Z = h·A·hᵀ`, scores
//! `S = softmax(mask(Z))` and output `O = S·h`, the backward pass is
//!
//! ```text
//! dS = dO·hᵀ
//! dZ = S ⊙ (dS − rowsum(S ⊙ dS))        masked entries have S = 0
//! dA = hᵀ·(dZ·h)
//! dh = dh_skip + Sᵀ·dO + (dZ·h)·Aᵀ + dZᵀ·(h·A)
//! ```
//!
//! Gradients are summed over fixed-size chunks of the batch and the chunk
//! sums are reduced in order, so results do not depend on thread count.

use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{MaskMode, ModelWeights};
use crate::numerics::Matrix;
use crate::task::{Layout, Padding, TaskInstance};

const CHUNK: usize = 32;

/// `(1/d) · Σ (ŷ − y)²`: the squared error summed over columns and averaged
/// over rows. A constant-`0.5` guess scores `d/4` against binary targets.
pub fn mse_loss(y_hat: &Matrix, y: &Matrix) -> Result<f64> {
    if y_hat.shape() != y.shape() || y.rows() == 0 {
        return Err(Error::shape("mse_loss", y_hat.shape(), y.shape()));
    }
    let diff = y_hat.sub(y)?;
    Ok(diff.sum_squares() / y.rows() as f64)
}

/// Gradient of the batch-mean loss, shaped like [`ModelWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub attn: Vec<Matrix>,
    pub w: Matrix,
}

impl Gradients {
    pub fn zeros_like(wts: &ModelWeights) -> Self {
        Gradients {
            attn: wts
                .attn
                .iter()
                .map(|a| Matrix::zeros(a.rows(), a.cols()))
                .collect(),
            w: Matrix::zeros(wts.w.rows(), wts.w.cols()),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.attn.iter_mut().zip(&other.attn) {
            a.add_assign(b);
        }
        self.w.add_assign(&other.w);
    }

    /// All entries, attention layers first, then the readout.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.attn
            .iter()
            .chain(core::iter::once(&self.w))
            .flat_map(|m| m.as_slice().iter().copied())
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn params_mut(wts: &mut ModelWeights) -> impl Iterator<Item = &mut f64> {
    wts.attn
        .iter_mut()
        .chain(core::iter::once(&mut wts.w))
        .flat_map(|m| m.as_mut_slice().iter_mut())
}

struct LayerCache {
    ha: Matrix,
    scores: Matrix,
}

/// Forward pass keeping what the backward pass needs.
fn forward_cached(wts: &ModelWeights, h0: Matrix) -> Result<(Vec<Matrix>, Vec<LayerCache>)> {
    let mut levels = Vec::with_capacity(wts.depth() + 1);
    let mut caches = Vec::with_capacity(wts.depth());
    levels.push(h0);
    for a in &wts.attn {
        let h = levels.last().unwrap();
        let ha = h.matmul(a)?;
        let mut scores = ha.matmul_t(h)?;
        if wts.mask == MaskMode::Causal {
            scores = scores.causal_mask()?;
        }
        let scores = scores.row_softmax()?;
        let out = scores.matmul(h)?;
        let next = h.hconcat(&out)?;
        levels.push(next);
        caches.push(LayerCache { ha, scores });
    }
    Ok((levels, caches))
}

/// Adds `scale · ∂loss/∂θ` for one instance into `grads` and returns the
/// instance loss.
fn accumulate_instance(
    wts: &ModelWeights,
    inst: &TaskInstance,
    scale: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    let h0 = inst.assemble().h0;
    let (levels, caches) = forward_cached(wts, h0)?;
    let hk = levels.last().unwrap();
    let rows = wts.readout.clone();
    let h_read = hk.submatrix(rows.clone(), 0..hk.cols())?;
    let y_hat = h_read.matmul_t(&wts.w)?;
    let loss = mse_loss(&y_hat, &inst.y)?;

    let d = wts.d as f64;
    let mut g = y_hat.sub(&inst.y)?;
    g.as_mut_slice().iter_mut().for_each(|v| *v *= 2.0 * scale / d);
    g.t_matmul_acc(&h_read, &mut grads.w);

    let mut dh = Matrix::zeros(hk.rows(), hk.cols());
    dh.set_block(rows.start, 0, &g.matmul(&wts.w)?)?;

    // Columns below width0 are input data and never need a gradient.
    let data_cols = wts.width(0);
    for layer in (0..wts.depth()).rev() {
        let h = &levels[layer];
        let cache = &caches[layer];
        let n = h.cols();
        let d_out = dh.submatrix(0..dh.rows(), n..2 * n)?;
        let d_scores = d_out.matmul_t(h)?;
        let d_logits = softmax_backward(&cache.scores, &d_scores);
        let g_h = d_logits.matmul(h)?;
        h.t_matmul_acc(&g_h, &mut grads.attn[layer]);

        if layer == 0 {
            break;
        }
        let live = data_cols..n;
        let a = &wts.attn[layer];
        let mut d_prev = dh.submatrix(0..dh.rows(), live.clone())?;
        let d_out_live = d_out.submatrix(0..d_out.rows(), live.clone())?;
        d_prev.add_assign(&cache.scores.t_matmul(&d_out_live)?);
        d_prev.add_assign(&g_h.matmul_t(&a.submatrix(live.clone(), 0..n)?)?);
        let ha_live = cache.ha.submatrix(0..h.rows(), live)?;
        d_prev.add_assign(&d_logits.t_matmul(&ha_live)?);
        let mut next = Matrix::zeros(h.rows(), n);
        next.set_block(0, data_cols, &d_prev)?;
        dh = next;
    }
    Ok(loss)
}

fn softmax_backward(scores: &Matrix, d_scores: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        let s = scores.row(r);
        let ds = d_scores.row(r);
        if ds.iter().all(|&v| v == 0.0) {
            continue;
        }
        let dot: f64 = s.iter().zip(ds).map(|(a, b)| a * b).sum();
        for ((o, &p), &g) in out.row_mut(r).iter_mut().zip(s).zip(ds) {
            *o = p * (g - dot);
        }
    }
    out
}

fn chunk_loss_and_grad(wts: &ModelWeights, chunk: &[TaskInstance], scale: f64) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(wts);
    let mut loss = 0.0;
    for inst in chunk {
        loss += accumulate_instance(wts, inst, scale, &mut grads)?;
    }
    Ok((loss, grads))
}

fn check_batch(wts: &ModelWeights, batch: &[TaskInstance]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::domain("batch must not be empty"));
    }
    for inst in batch {
        if inst.d() != wts.d || inst.padding != wts.padding || inst.y.shape() != (wts.d, wts.d) {
            return Err(Error::domain("batch instance does not match the model geometry"));
        }
    }
    Ok(())
}

/// Batch-mean loss and its exact gradient.
pub fn loss_and_grad(wts: &ModelWeights, batch: &[TaskInstance]) -> Result<(f64, Gradients)> {
    check_batch(wts, batch)?;
    let scale = 1.0 / batch.len() as f64;

    #[cfg(feature = "parallel")]
    let parts: Vec<Result<(f64, Gradients)>> = {
        use rayon::prelude::*;
        batch
            .par_chunks(CHUNK)
            .map(|c| chunk_loss_and_grad(wts, c, scale))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<(f64, Gradients)>> = batch
        .chunks(CHUNK)
        .map(|c| chunk_loss_and_grad(wts, c, scale))
        .collect();

    let mut total = Gradients::zeros_like(wts);
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss * scale, total))
}

pub fn grad(wts: &ModelWeights, batch: &[TaskInstance]) -> Result<Gradients> {
    loss_and_grad(wts, batch).map(|(_, g)| g)
}

fn instance_loss(wts: &ModelWeights, inst: &TaskInstance) -> Result<f64> {
    let y_hat = crate::model::predict(wts, &inst.assemble().h0)?;
    mse_loss(&y_hat, &inst.y)
}

/// Batch-mean loss without gradients.
pub fn batch_loss(wts: &ModelWeights, batch: &[TaskInstance]) -> Result<f64> {
    check_batch(wts, batch)?;

    #[cfg(feature = "parallel")]
    let losses: Vec<Result<f64>> = {
        use rayon::prelude::*;
        batch.par_iter().map(|inst| instance_loss(wts, inst)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let losses: Vec<Result<f64>> = batch.iter().map(|inst| instance_loss(wts, inst)).collect();

    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / batch.len() as f64)
}

/// Central difference `(f(x + eps) − f(x − eps)) / (2 eps)`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::domain("finite-difference step must be positive"));
    }
    Ok((f(x + eps) - f(x - eps)) / (2.0 * eps))
}

/// Central-difference gradient of [`batch_loss`], one parameter at a time.
pub fn finite_diff_grad(wts: &ModelWeights, batch: &[TaskInstance], eps: f64) -> Result<Gradients> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::domain("finite-difference step must be positive"));
    }
    check_batch(wts, batch)?;
    let mut probe = wts.clone();
    let mut values = Vec::with_capacity(wts.num_params());
    for idx in 0..wts.num_params() {
        let x = *params_mut(&mut probe).nth(idx).unwrap();
        let mut eval = |v: f64| -> Result<f64> {
            *params_mut(&mut probe).nth(idx).unwrap() = v;
            batch_loss(&probe, batch)
        };
        let plus = eval(x + eps)?;
        let minus = eval(x - eps)?;
        eval(x)?;
        values.push((plus - minus) / (2.0 * eps));
    }
    let mut out = Gradients::zeros_like(wts);
    for (slot, v) in out
        .attn
        .iter_mut()
        .chain(core::iter::once(&mut out.w))
        .flat_map(|m| m.as_mut_slice().iter_mut())
        .zip(values)
    {
        *slot = v;
    }
    Ok(out)
}

/// Largest entrywise `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Gradients, b: &Gradients, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        beta_m: f64,
        beta_v: f64,
        eps: f64,
    },
    Sgd {
        lr: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta_m: 0.9,
            beta_v: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr } => lr,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-2)
    }
}

enum Optimizer {
    Adam {
        cfg: OptimizerConfig,
        m: Gradients,
        v: Gradients,
        t: i32,
    },
    Sgd {
        lr: f64,
    },
}

impl Optimizer {
    fn new(cfg: OptimizerConfig, wts: &ModelWeights) -> Self {
        match cfg {
            OptimizerConfig::Adam { .. } => Optimizer::Adam {
                cfg,
                m: Gradients::zeros_like(wts),
                v: Gradients::zeros_like(wts),
                t: 0,
            },
            OptimizerConfig::Sgd { lr } => Optimizer::Sgd { lr },
        }
    }

    fn step(&mut self, wts: &mut ModelWeights, grads: &Gradients) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params_mut(wts).zip(grads.iter()) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam { cfg, m, v, t } => {
                let OptimizerConfig::Adam {
                    lr,
                    beta_m,
                    beta_v,
                    eps,
                } = *cfg
                else {
                    unreachable!()
                };
                *t += 1;
                let bias_m = 1.0 - libm::pow(beta_m, *t as f64);
                let bias_v = 1.0 - libm::pow(beta_v, *t as f64);
                let ms = m
                    .attn
                    .iter_mut()
                    .chain(core::iter::once(&mut m.w))
                    .flat_map(|x| x.as_mut_slice().iter_mut());
                let vs = v
                    .attn
                    .iter_mut()
                    .chain(core::iter::once(&mut v.w))
                    .flat_map(|x| x.as_mut_slice().iter_mut());
                for (((p, g), mi), vi) in params_mut(wts).zip(grads.iter()).zip(ms).zip(vs) {
                    *mi = beta_m * *mi + (1.0 - beta_m) * g;
                    *vi = beta_v * *vi + (1.0 - beta_v) * g * g;
                    let m_hat = *mi / bias_m;
                    let v_hat = *vi / bias_v;
                    *p -= lr * m_hat / (libm::sqrt(v_hat) + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub d: usize,
    pub depth: usize,
    pub mask: MaskMode,
    pub padding: Padding,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Standard deviation of the zero-mean gaussian initialisation.
    pub init_scale: f64,
    /// `None` reads the rows holding `P`.
    pub readout_rows: Option<Range<usize>>,
    pub eval_every: u64,
    /// Size of the fixed held-out evaluation set.
    pub eval_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 10,
            depth: 2,
            mask: MaskMode::Cmf,
            padding: Padding::None,
            steps: 1 << 16,
            batch: 1024,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            init_scale: 0.02,
            readout_rows: None,
            eval_every: 1024,
            eval_size: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::domain("d must be at least 1"));
        }
        if self.steps == 0 || self.batch == 0 || self.eval_size == 0 {
            return Err(Error::domain("steps, batch and eval_size must be at least 1"));
        }
        if self.eval_every == 0 || self.eval_every > self.steps {
            return Err(Error::domain("eval_every must lie in 1..=steps"));
        }
        let lr = self.optimizer.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::domain("learning rate must be positive"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::domain("init_scale must be non-negative"));
        }
        Ok(())
    }

    pub fn readout(&self) -> Range<usize> {
        self.readout_rows
            .clone()
            .unwrap_or_else(|| Layout::new(self.d, self.padding).p_rows())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub final_mse: f64,
    /// `(step, eval mse)` at every multiple of `eval_every`.
    pub curve: Vec<(u64, f64)>,
    pub wallclock: f64,
    pub weights: ModelWeights,
}

/// Random initial weights for `cfg`.
pub fn init_weights(cfg: &TrainConfig) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut wts = ModelWeights::zeros(cfg.d, cfg.depth, cfg.mask, cfg.padding)?;
    wts.readout = cfg.readout();
    wts.validate()?;
    if cfg.init_scale > 0.0 {
        let normal = Normal::new(0.0, cfg.init_scale).map_err(|_| Error::domain("bad init_scale"))?;
        let mut rng = stream_rng(cfg.seed, 0);
        for p in params_mut(&mut wts) {
            *p = normal.sample(&mut rng);
        }
    }
    Ok(wts)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_batch<R: Rng + ?Sized>(d: usize, padding: Padding, n: usize, rng: &mut R) -> Result<Vec<TaskInstance>> {
    (0..n).map(|_| TaskInstance::sample(d, padding, rng)).collect()
}

/// Mean loss over `n` fresh instances.
pub fn evaluate<R: Rng + ?Sized>(wts: &ModelWeights, n: usize, rng: &mut R) -> Result<f64> {
    if n == 0 {
        return Err(Error::domain("evaluation needs at least one instance"));
    }
    let batch = sample_batch(wts.d, wts.padding, n, rng)?;
    batch_loss(wts, &batch)
}

/// Trains from a fresh initialisation. `on_eval` sees every logged
/// `(step, mse, weights)` as it happens.
pub fn train(
    cfg: &TrainConfig,
    on_eval: impl FnMut(u64, f64, &ModelWeights),
) -> Result<TrainReport> {
    let wts = init_weights(cfg)?;
    train_from(cfg, wts, on_eval)
}

/// Trains starting from `wts`, which must match `cfg`'s geometry.
pub fn train_from(
    cfg: &TrainConfig,
    mut wts: ModelWeights,
    mut on_eval: impl FnMut(u64, f64, &ModelWeights),
) -> Result<TrainReport> {
    cfg.validate()?;
    if wts.d != cfg.d || wts.depth() != cfg.depth || wts.mask != cfg.mask || wts.padding != cfg.padding
    {
        return Err(Error::domain("initial weights do not match the training config"));
    }
    #[cfg(feature = "std")]
    let started = std::time::Instant::now();

    let mut data_rng = stream_rng(cfg.seed, 1);
    let mut eval_rng = stream_rng(cfg.seed, 2);
    let eval_set = sample_batch(cfg.d, cfg.padding, cfg.eval_size, &mut eval_rng)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, &wts);
    let mut curve = Vec::new();

    for step in 1..=cfg.steps {
        let batch = sample_batch(cfg.d, cfg.padding, cfg.batch, &mut data_rng)?;
        let (loss, grads) = loss_and_grad(&wts, &batch)?;
        if !loss.is_finite() || !grads.iter().all(f64::is_finite) {
            return Err(Error::Divergence { step, loss });
        }
        optimizer.step(&mut wts, &grads);
        if step % cfg.eval_every == 0 {
            let mse = batch_loss(&wts, &eval_set)?;
            if !mse.is_finite() {
                return Err(Error::Divergence { step, loss: mse });
            }
            curve.push((step, mse));
            on_eval(step, mse, &wts);
        }
    }

    #[cfg(feature = "std")]
    let wallclock = started.elapsed().as_secs_f64();
    #[cfg(not(feature = "std"))]
    let wallclock = 0.0;

    let final_mse = curve.last().map(|&(_, m)| m).unwrap_or(f64::NAN);
    Ok(TrainReport {
        final_mse,
        curve,
        wallclock,
        weights: wts,
    })
}
