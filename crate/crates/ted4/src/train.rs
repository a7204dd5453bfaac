//! Rate-distortion training: the full objective, the optimizer, the
//! progressive static-to-temporal schedule with time-aware pruning, the RD
//! sweep driver and the gradient-check harness.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::metrics::ssim;
use crate::model::{Model, ModelConfig, StepContext};
use crate::params::{LeafBinding, ParamGroup, ParamId, ParamStore};
use crate::raster::RenderSettings;
use crate::scene::SceneData;
use crate::tape::{Grads, Id, Tape};
use crate::temporal::prune_keep_flags;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_rate: f64,
    /// Scaled inside the lambda_rate factor.
    pub lambda_offset_mask: f64,
    pub lambda_temp_mask: f64,
    pub lambda_vol: f64,
    pub lambda_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rate: 0.004,
            lambda_offset_mask: 1.0,
            lambda_temp_mask: 5e-4,
            lambda_vol: 1e-4,
            lambda_tv: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnRates {
    pub positions: f64,
    pub features: f64,
    pub nets: f64,
    pub bank: f64,
    pub activation: f64,
    pub masks: f64,
}

impl Default for LearnRates {
    fn default() -> Self {
        LearnRates {
            positions: 1e-4,
            features: 5e-3,
            nets: 2e-3,
            bank: 2e-3,
            activation: 1e-3,
            masks: 3e-3,
        }
    }
}

impl LearnRates {
    fn for_group(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Positions => self.positions,
            ParamGroup::Features => self.features,
            ParamGroup::Nets => self.nets,
            ParamGroup::Bank => self.bank,
            ParamGroup::Activation => self.activation,
            ParamGroup::Masks => self.masks,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Fraction of iterations spent in the static (always-active) phase.
    pub static_fraction: f64,
    pub seed: u64,
    pub voxel_size: f64,
    pub weights: LossWeights,
    pub rates: LearnRates,
    pub prune_every: usize,
    pub prune_threshold: f64,
    pub prune_t_samples: usize,
    pub model: ModelConfig,
    /// Rate-control factors for `rd_sweep`.
    pub lambda_sweep: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1500,
            static_fraction: 0.4,
            seed: 1,
            voxel_size: 0.35,
            weights: LossWeights::default(),
            rates: LearnRates::default(),
            prune_every: 500,
            prune_threshold: 0.005,
            prune_t_samples: 8,
            model: ModelConfig::default(),
            lambda_sweep: vec![0.001, 0.002, 0.004, 0.008],
        }
    }
}

impl TrainConfig {
    /// Tuned configuration per shipped scene. The displacement scale for the
    /// moving scenes is raised well above the static default so the
    /// deformation field can cover the toy trajectories.
    pub fn preset(scene: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        match scene {
            "static-room" => {
                cfg.iterations = 2000;
                cfg.voxel_size = 0.5;
                cfg.weights.lambda_temp_mask = 2e-3;
            }
            "slider" => {
                cfg.iterations = 1600;
                cfg.voxel_size = 0.5;
                cfg.model.dx_scale_factor = 1.0;
                cfg.rates.activation = 1e-2;
            }
            "occluder" => {
                cfg.iterations = 3000;
                cfg.static_fraction = 0.3;
                cfg.voxel_size = 0.5;
                cfg.model.dx_scale_factor = 1.0;
                cfg.weights.lambda_rate = 0.001;
                cfg.rates.activation = 1e-2;
            }
            other => return Err(Error::UnknownScene(other.into())),
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.static_fraction && self.static_fraction < 1.0) {
            return Err(Error::Config(format!(
                "static_fraction {} outside (0,1)",
                self.static_fraction
            )));
        }
        if self.weights.lambda_rate <= 0.0 {
            return Err(Error::Config("lambda_rate must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossParts {
    pub distortion: f64,
    pub rate: f64,
    pub offset_mask: f64,
    pub temporal_mask: f64,
    pub vol: f64,
    pub tv: f64,
}

impl LossParts {
    fn check_finite(&self, iteration: usize) -> Result<()> {
        let named = [
            ("distortion", self.distortion),
            ("rate", self.rate),
            ("offset_mask", self.offset_mask),
            ("temporal_mask", self.temporal_mask),
            ("vol", self.vol),
            ("tv", self.tv),
        ];
        for (part, v) in named {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { part: part.into(), iteration });
            }
        }
        Ok(())
    }
}

/// Distortion: 0.8 L1 + 0.2 (1 - SSIM).
pub fn distortion_loss(render: &Image, target: &Image) -> Result<f64> {
    if render.width != target.width || render.height != target.height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            render.width, render.height, target.width, target.height
        )));
    }
    let l1: f64 = render
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / render.data.len() as f64;
    Ok(0.8 * l1 + 0.2 * (1.0 - ssim(render, target)?))
}

/// Mean soft offset-mask and temporal-mask values.
pub fn mask_losses(offset_soft: &[f64], temporal_soft: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    (mean(offset_soft), mean(temporal_soft))
}

/// Mean of the per-primitive scale products.
pub fn vol_loss(scales: &[f64]) -> f64 {
    assert!(scales.len() % 3 == 0);
    let n = scales.len() / 3;
    if n == 0 {
        return 0.0;
    }
    scales
        .chunks_exact(3)
        .map(|s| s[0] * s[1] * s[2])
        .sum::<f64>()
        / n as f64
}

/// The complete objective: distortion + lr*(rate + lom*offset_mask)
/// + ltm*temporal_mask + lv*vol + ltv*tv.
pub fn total_loss(parts: &LossParts, w: &LossWeights, iteration: usize) -> Result<f64> {
    parts.check_finite(iteration)?;
    Ok(parts.distortion
        + w.lambda_rate * (parts.rate + w.lambda_offset_mask * parts.offset_mask)
        + w.lambda_temp_mask * parts.temporal_mask
        + w.lambda_vol * parts.vol
        + w.lambda_tv * parts.tv)
}

fn total_loss_tape(
    tape: &mut Tape,
    losses: &crate::model::ForwardLosses,
    w: &LossWeights,
) -> Id {
    let off_w = tape.mul_scalar(losses.offset_mask, w.lambda_offset_mask);
    let rate_sum = tape.add(losses.rate, off_w);
    let rate_w = tape.mul_scalar(rate_sum, w.lambda_rate);
    let tm = tape.mul_scalar(losses.temporal_mask, w.lambda_temp_mask);
    let vol = tape.mul_scalar(losses.vol, w.lambda_vol);
    let tv = tape.mul_scalar(losses.tv, w.lambda_tv);
    let mut total = tape.add(losses.distortion, rate_w);
    total = tape.add(total, tm);
    total = tape.add(total, vol);
    tape.add(total, tv)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Adam {
        let m = store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        let v = store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        Adam { m, v, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update over every parameter with a gradient. `skip` freezes
    /// selected parameters for the step.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        binding: &LeafBinding,
        grads: &Grads,
        rates: &LearnRates,
        skip: &dyn Fn(ParamId) -> bool,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.iter().map(|(pid, _)| pid).collect();
        for pid in ids {
            if skip(pid) {
                continue;
            }
            let g = match grads.get(binding.leaf(pid)) {
                Some(g) => g,
                None => continue,
            };
            let lr = rates.for_group(store.get(pid).group);
            let m = &mut self.m[pid.0];
            let v = &mut self.v[pid.0];
            let data = &mut store.get_mut(pid).data;
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    pub fn retain_rows(&mut self, pid: ParamId, keep: &[bool], cols: usize) {
        for buf in [&mut self.m[pid.0], &mut self.v[pid.0]] {
            let mut out = Vec::with_capacity(buf.len());
            for (i, k) in keep.iter().enumerate() {
                if *k {
                    out.extend_from_slice(&buf[i * cols..(i + 1) * cols]);
                }
            }
            *buf = out;
        }
    }

    pub fn reset(&mut self, pid: ParamId) {
        self.m[pid.0].iter_mut().for_each(|v| *v = 0.0);
        self.v[pid.0].iter_mut().for_each(|v| *v = 0.0);
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct IterLog {
    pub iter: usize,
    pub phase: &'static str,
    pub loss: f64,
    pub distortion: f64,
    pub rate_bits_per_anchor: f64,
    pub offset_mask: f64,
    pub temporal_mask: f64,
    pub vol: f64,
    pub tv: f64,
    pub n_anchors: usize,
}

/// Train a model on a toy scene with the progressive schedule: a static
/// phase (activation pinned at one), a visibility-based window
/// initialization at the transition, then joint optimization, with periodic
/// time-aware pruning throughout.
pub fn train(data: &SceneData, cfg: &TrainConfig) -> Result<(Model, Vec<IterLog>)> {
    cfg.validate()?;
    data.scene.validate()?;
    let scene = &data.scene;
    let mut model = Model::init(
        &data.points,
        scene.frame_count(),
        cfg.voxel_size,
        cfg.model.clone(),
        cfg.weights.lambda_rate,
        cfg.seed,
    )?;
    let mut adam = Adam::new(&model.store);
    let mut logs = Vec::with_capacity(cfg.iterations);
    if cfg.iterations == 0 {
        return Ok((model, logs));
    }

    let mut sched_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut views: Vec<(usize, usize)> = Vec::new();
    for ci in 0..scene.cameras.len() {
        for fi in 0..scene.frame_count() {
            views.push((ci, fi));
        }
    }
    let mut order: Vec<usize> = Vec::new();

    let static_until = ((cfg.iterations as f64) * cfg.static_fraction).round() as usize;
    let settings = RenderSettings::default();
    let total_dim = model.layout().total_dim();

    for iter in 0..cfg.iterations {
        let phase_static = iter < static_until;
        if iter == static_until && !cfg.model.temporal_ablation {
            model.set_windows_from_visibility(scene)?;
            adam.reset(model.anchors.tau);
        }

        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut sched_rng);
        }
        let (ci, fi) = views[order.pop().unwrap()];
        let t = scene.timestamps[fi];
        let target = &scene.frames[ci][fi];

        let noise: Vec<f64> = (0..model.n_anchors * total_dim)
            .map(|_| noise_rng.gen_range(-0.5..0.5))
            .collect();

        let mut tape = Tape::new();
        let ctx = StepContext {
            camera: &scene.cameras[ci],
            target,
            t,
            noise: &noise,
            phase_static,
            settings: settings.clone(),
        };
        let (losses, binding) = model.forward(&mut tape, &ctx)?;
        let parts = LossParts {
            distortion: tape.scalar_value(losses.distortion),
            rate: tape.scalar_value(losses.rate),
            offset_mask: tape.scalar_value(losses.offset_mask),
            temporal_mask: tape.scalar_value(losses.temporal_mask),
            vol: tape.scalar_value(losses.vol),
            tv: tape.scalar_value(losses.tv),
        };
        let loss_value = total_loss(&parts, &cfg.weights, iter)?;
        if !loss_value.is_finite() {
            return Err(Error::Diverged(iter));
        }

        let total_id = total_loss_tape(&mut tape, &losses, &cfg.weights);
        let grads = tape.backward(total_id);
        let freeze_tau = phase_static || cfg.model.temporal_ablation;
        let tau_id = model.anchors.tau;
        adam.step(&mut model.store, &binding, &grads, &cfg.rates, &|pid| {
            freeze_tau && pid == tau_id
        });

        logs.push(IterLog {
            iter,
            phase: if phase_static { "static" } else { "joint" },
            loss: loss_value,
            distortion: parts.distortion,
            rate_bits_per_anchor: parts.rate,
            offset_mask: parts.offset_mask,
            temporal_mask: parts.temporal_mask,
            vol: parts.vol,
            tv: parts.tv,
            n_anchors: model.n_anchors,
        });

        if cfg.prune_every > 0 && iter > 0 && iter % cfg.prune_every == 0 {
            prune_model(&mut model, &mut adam, cfg);
        }
    }
    Ok((model, logs))
}

fn prune_model(model: &mut Model, adam: &mut Adam, cfg: &TrainConfig) {
    let windows = model.windows();
    let alpha_sums = model.collective_opacity();
    let samples: Vec<f64> = (0..cfg.prune_t_samples)
        .map(|i| i as f64 / (cfg.prune_t_samples - 1).max(1) as f64)
        .collect();
    let keep = prune_keep_flags(&windows, &alpha_sums, cfg.prune_threshold, &samples);
    let kept = keep.iter().filter(|k| **k).count();
    if kept == keep.len() || kept == 0 {
        // Nothing to prune, or pruning would empty the model; leave as is.
        return;
    }
    for pid in model.anchors.all() {
        let cols = model.store.get(pid).shape.1;
        adam.retain_rows(pid, &keep, cols);
    }
    model.retain_anchors(&keep);
}

// ---------------------------------------------------------------------------
// RD sweep and BD-rate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RdPoint {
    pub lambda_rate: f64,
    pub bytes: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub attribute_bytes: usize,
    pub n_anchors: usize,
}

/// Train, encode and evaluate one model per rate-control factor. Metrics are
/// measured on the decoded container; the encoded containers are returned
/// alongside the table.
pub fn rd_sweep(
    data: &SceneData,
    base: &TrainConfig,
    lambdas: &[f64],
) -> Result<(Vec<RdPoint>, Vec<Vec<u8>>)> {
    assert!(!lambdas.is_empty());
    let mut points = Vec::with_capacity(lambdas.len());
    let mut containers = Vec::with_capacity(lambdas.len());
    for lambda in lambdas {
        let mut cfg = base.clone();
        cfg.weights.lambda_rate = *lambda;
        let (model, _) = train(data, &cfg)?;
        let qm = model.finalize()?;
        let bytes = crate::coder::write_container(&qm)?;
        let decoded = crate::coder::read_container(&bytes)?;
        let (p, s) = decoded.eval_scene(&data.scene, &RenderSettings::default())?;
        let stats = crate::coder::container_stats(&bytes)?;
        points.push(RdPoint {
            lambda_rate: *lambda,
            bytes: bytes.len(),
            psnr: p,
            ssim: s,
            attribute_bytes: stats.sections[3].1,
            n_anchors: decoded.n_anchors,
        });
        containers.push(bytes);
    }
    Ok((points, containers))
}

/// Bjontegaard delta rate of curve B against curve A, in percent (negative
/// means B needs fewer bits at equal quality). Requires at least two points
/// per curve and overlapping quality ranges.
pub fn bd_rate(curve_a: &[(f64, f64)], curve_b: &[(f64, f64)]) -> Option<f64> {
    if curve_a.len() < 2 || curve_b.len() < 2 {
        return None;
    }
    // Fit log10(rate) as a polynomial in PSNR, degree min(3, n-1).
    let fit = |curve: &[(f64, f64)]| -> Option<(Vec<f64>, f64, f64)> {
        let xs: Vec<f64> = curve.iter().map(|(_, p)| *p).collect();
        let ys: Vec<f64> = curve.iter().map(|(r, _)| r.log10()).collect();
        let deg = (curve.len() - 1).min(3);
        let coef = polyfit(&xs, &ys, deg)?;
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some((coef, lo, hi))
    };
    let (ca, lo_a, hi_a) = fit(curve_a)?;
    let (cb, lo_b, hi_b) = fit(curve_b)?;
    let lo = lo_a.max(lo_b);
    let hi = hi_a.min(hi_b);
    if hi <= lo {
        return None;
    }
    let integral = |c: &[f64]| -> f64 {
        // Integrate the polynomial over [lo, hi].
        let mut acc = 0.0;
        for (k, ck) in c.iter().enumerate() {
            acc += ck / (k as f64 + 1.0) * (hi.powi(k as i32 + 1) - lo.powi(k as i32 + 1));
        }
        acc
    };
    let avg_diff = (integral(&cb) - integral(&ca)) / (hi - lo);
    Some((10f64.powf(avg_diff) - 1.0) * 100.0)
}

/// Least-squares polynomial fit via normal equations.
fn polyfit(xs: &[f64], ys: &[f64], deg: usize) -> Option<Vec<f64>> {
    let n = deg + 1;
    let mut ata = vec![vec![0.0; n]; n];
    let mut atb = vec![0.0; n];
    for (x, y) in xs.iter().zip(ys) {
        let mut powers = vec![1.0; n];
        for k in 1..n {
            powers[k] = powers[k - 1] * x;
        }
        for i in 0..n {
            atb[i] += powers[i] * y;
            for j in 0..n {
                ata[i][j] += powers[i] * powers[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if ata[row][col].abs() > ata[pivot][col].abs() {
                pivot = row;
            }
        }
        if ata[pivot][col].abs() < 1e-12 {
            return None;
        }
        ata.swap(col, pivot);
        atb.swap(col, pivot);
        for row in col + 1..n {
            let f = ata[row][col] / ata[col][col];
            for k in col..n {
                ata[row][k] -= f * ata[col][k];
            }
            atb[row] -= f * atb[col];
        }
    }
    let mut out = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = atb[row];
        for k in row + 1..n {
            acc -= ata[row][k] * out[k];
        }
        out[row] = acc / ata[row][row];
    }
    Some(out)
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compare analytic gradients of a recorded scalar loss against central
/// finite differences over a random subsample of the given parameters.
///
/// `build` must record the loss for the supplied store and return its id
/// with the leaf binding.
pub fn grad_check<F>(
    store: &ParamStore,
    build: F,
    params: &[ParamId],
    samples_per_param: usize,
    eps: f64,
    floor: f64,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&ParamStore, &mut Tape) -> (Id, LeafBinding),
{
    let mut tape = Tape::new();
    let (loss, binding) = build(store, &mut tape);
    let grads = tape.backward(loss);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut max_rel: f64 = 0.0;
    let mut checked = 0usize;
    for pid in params {
        let len = store.get(*pid).data.len();
        let analytic = grads.get(binding.leaf(*pid));
        for _ in 0..samples_per_param.min(len) {
            let i = rng.gen_range(0..len);
            let a = analytic.map_or(0.0, |g| g[i]);
            let mut s2 = store.clone();
            s2.get_mut(*pid).data[i] += eps;
            let mut t2 = Tape::new();
            let (l2, _) = build(&s2, &mut t2);
            let hi = t2.scalar_value(l2);
            s2.get_mut(*pid).data[i] -= 2.0 * eps;
            let mut t3 = Tape::new();
            let (l3, _) = build(&s2, &mut t3);
            let lo = t3.scalar_value(l3);
            let fd = (hi - lo) / (2.0 * eps);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    GradCheckReport { max_rel_error: max_rel, checked }
}
