//! The trainable scene model and its quantized, decoder-visible counterpart.
//!
//! `Model` owns every learnable parameter (anchor attributes plus networks)
//! and records the full training forward pass on a tape. `QuantizedModel` is
//! the state both sides of the codec agree on: fp16 positions, hard-quantized
//! attributes, binarized masks and f32 network weights. Encoding, decoding
//! and evaluation all run off the quantized form, through the same plain
//! (tape-free) arithmetic.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{init_anchor_set, AnchorConfig};
use crate::entropy::{
    likelihood, pe_dim, positional_encoding, quantize_hard, quantize_index, rate_bits_tape,
    AttributeKind, AttributeLayout, ChannelAr, FactorizedPrior, Hyperprior, KIND_ORDER,
};
use crate::deform::DeformationField;
use crate::error::Result;
use crate::fp16::round_f16;
use crate::img::Image;
use crate::math::Vec3;
use crate::metrics::{L1Op, SsimOp};
use crate::nn::Mlp;
use crate::params::{LeafBinding, ParamGroup, ParamId, ParamStore};
use crate::raster::{render_plain, PrimitiveBuffers, RasterizeOp, RenderSettings};
use crate::scene::{Camera, ToyScene};
use crate::tape::{Id, Tape};
use crate::temporal::{activation, ActivationOp, ActivationParams};

pub const SCALE_LOG_MIN: f64 = -13.815510557964274; // ln(1e-6)
pub const SCALE_LOG_MAX: f64 = 4.605170185988092; // ln(1e2)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorKind {
    Hyper,
    Factorized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub anchor: AnchorConfig,
    /// Deformation bank dimension D.
    pub bank_dim: usize,
    pub l_pe: usize,
    pub n_chunks: usize,
    pub hidden_deform: usize,
    pub hidden_decoder: usize,
    pub hidden_hyper: usize,
    pub hidden_ar: usize,
    /// Position displacement scale as a multiple of the voxel size.
    pub dx_scale_factor: f64,
    pub prior: PriorKind,
    /// Ablation mode: temporal activation forced to one everywhere.
    pub temporal_ablation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            anchor: AnchorConfig::default(),
            bank_dim: 16,
            l_pe: 8,
            n_chunks: 4,
            hidden_deform: 64,
            hidden_decoder: 64,
            hidden_hyper: 64,
            hidden_ar: 32,
            dx_scale_factor: 0.1,
            prior: PriorKind::Hyper,
            temporal_ablation: false,
        }
    }
}

impl ModelConfig {
    pub fn layout(&self) -> AttributeLayout {
        AttributeLayout::new(
            self.anchor.feature_dim,
            self.anchor.offsets_per_anchor,
            self.anchor.temporal_dim,
        )
    }
}

/// Network-side parameters (everything stored as f32 in the bitstream).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Nets {
    pub field: DeformationField,
    pub geo: Mlp,
    pub app: Mlp,
    pub hyper: Hyperprior,
    pub ar: ChannelAr,
    pub fm: FactorizedPrior,
    /// Number of parameters at the head of the store that belong to the nets;
    /// their store order is the bitstream weight layout.
    pub store_span: usize,
}

/// Build every network parameter in a deterministic store order shared by
/// encoder and decoder.
pub fn build_nets(
    store: &mut ParamStore,
    config: &ModelConfig,
    frame_count: usize,
    voxel_size: f64,
    rng: &mut ChaCha8Rng,
) -> Nets {
    let cfg = &config.anchor;
    let rows = frame_count / 2;
    let d = cfg.temporal_dim;
    let dim = config.bank_dim;
    let d_f = cfg.feature_dim;
    let k = cfg.offsets_per_anchor;

    let bank_data: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let bank = store.add("deform.bank", (rows, dim), bank_data, ParamGroup::Bank);
    let bound = (6.0 / (d + dim) as f64).sqrt();
    let proj_data: Vec<f64> = (0..d * dim).map(|_| rng.gen_range(-bound..bound)).collect();
    let projection = store.add("deform.project", (d, dim), proj_data, ParamGroup::Nets);
    let decoder = Mlp::new(
        store,
        "deform.net",
        &[dim, config.hidden_deform, config.hidden_deform, 3 + d_f],
        ParamGroup::Nets,
        rng,
    );
    // Damp the initial displacement noise; tracking grows the head back.
    let (head_w, _) = *decoder.layers.last().unwrap();
    store.get_mut(head_w).data.iter_mut().for_each(|v| *v *= 0.1);

    // fp32 metadata must match on both sides of the codec.
    let dx_scale = (config.dx_scale_factor * voxel_size) as f32 as f64;
    let field = DeformationField { bank, projection, decoder, rows, dim, dx_scale };

    let geo = Mlp::new(
        store,
        "dec.geo",
        &[d_f, config.hidden_decoder, 7 * k],
        ParamGroup::Nets,
        rng,
    );
    // Per-primitive layout (scale xyz, quat wxyz): bias scales to a fraction
    // of the voxel so fresh anchors start small.
    let (_, geo_bias) = *geo.layers.last().unwrap();
    let s0 = (0.3 * voxel_size).max(1e-4).ln();
    {
        let bias = &mut store.get_mut(geo_bias).data;
        for p in 0..k {
            for j in 0..3 {
                bias[p * 7 + j] = s0;
            }
        }
    }
    let app = Mlp::new(
        store,
        "dec.app",
        &[d_f, config.hidden_decoder, 4 * k],
        ParamGroup::Nets,
        rng,
    );
    // Opacity logits start at sigmoid^-1(0.1).
    let (_, app_bias) = *app.layers.last().unwrap();
    {
        let bias = &mut store.get_mut(app_bias).data;
        let o0 = (0.1f64 / 0.9).ln();
        for p in 0..k {
            bias[p * 4 + 3] = o0;
        }
    }

    let layout = config.layout();
    let hyper = Hyperprior::new(store, layout.clone(), config.l_pe, config.hidden_hyper, rng);
    let ar = ChannelAr::new(store, d_f, config.n_chunks, config.hidden_ar, rng);
    let fm = FactorizedPrior::new(store, &layout);

    let store_span = store.len();
    Nets { field, geo, app, hyper, ar, fm, store_span }
}

/// Anchor-indexed parameter ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorParams {
    pub pos: ParamId,
    pub feature: ParamId,
    pub scaling: ParamId,
    pub offsets: ParamId,
    pub phi: ParamId,
    pub tau: ParamId,
    pub mask_offset: ParamId,
    pub mask_temporal: ParamId,
}

impl AnchorParams {
    pub fn all(&self) -> [ParamId; 8] {
        [
            self.pos,
            self.feature,
            self.scaling,
            self.offsets,
            self.phi,
            self.tau,
            self.mask_offset,
            self.mask_temporal,
        ]
    }
}

pub const MASK_LOGIT_INIT: f64 = 2.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub nets: Nets,
    pub anchors: AnchorParams,
    pub n_anchors: usize,
    pub frame_count: usize,
    pub voxel_size: f64,
    /// Scene bounding box (f32-exact), min then max.
    pub bbox: [f64; 6],
    pub creation_indices: Vec<u64>,
    pub lambda_rate: f64,
}

impl Model {
    /// Initialize from a seed point cloud.
    pub fn init(
        points: &[Vec3],
        frame_count: usize,
        voxel_size: f64,
        config: ModelConfig,
        lambda_rate: f64,
        seed: u64,
    ) -> Result<Model> {
        assert!(frame_count >= 2 && frame_count % 2 == 0);
        let voxel_size = voxel_size as f32 as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ed4_0001);
        let mut store = ParamStore::new();
        let nets = build_nets(&mut store, &config, frame_count, voxel_size, &mut rng);

        let set = init_anchor_set(points, voxel_size, config.anchor, &mut rng)?;
        let n = set.len();
        let k = config.anchor.offsets_per_anchor;
        let d_f = config.anchor.feature_dim;
        let d = config.anchor.temporal_dim;

        let mut pos = Vec::with_capacity(n * 3);
        let mut off = Vec::with_capacity(n * 3 * k);
        let mut tau = Vec::with_capacity(n * 4);
        let mut creation = Vec::with_capacity(n);
        for a in &set.anchors {
            pos.extend_from_slice(&a.position.to_array());
            for o in &a.offsets {
                off.extend_from_slice(&o.to_array());
            }
            tau.extend_from_slice(&a.tau_raw);
            creation.push(a.creation_index as u64);
        }

        let anchors = AnchorParams {
            pos: store.add("anchor.pos", (n, 3), pos, ParamGroup::Positions),
            feature: store.add("anchor.f", (n, d_f), vec![0.0; n * d_f], ParamGroup::Features),
            scaling: store.add("anchor.l", (n, 3), vec![voxel_size; n * 3], ParamGroup::Features),
            offsets: store.add("anchor.off", (n, 3 * k), off, ParamGroup::Features),
            phi: store.add("anchor.phi", (n, d), vec![0.0; n * d], ParamGroup::Features),
            tau: store.add("anchor.tau", (n, 4), tau, ParamGroup::Activation),
            mask_offset: store.add(
                "anchor.mask_off",
                (n, k),
                vec![MASK_LOGIT_INIT; n * k],
                ParamGroup::Masks,
            ),
            mask_temporal: store.add(
                "anchor.mask_t",
                (n, 1),
                vec![MASK_LOGIT_INIT; n],
                ParamGroup::Masks,
            ),
        };

        let bbox = scene_bbox(points);
        Ok(Model {
            config,
            store,
            nets,
            anchors,
            n_anchors: n,
            frame_count,
            voxel_size,
            bbox,
            creation_indices: creation,
            lambda_rate,
        })
    }

    pub fn layout(&self) -> AttributeLayout {
        self.config.layout()
    }

    /// fp16-rounded positions (the decoder-visible conditioning values).
    pub fn positions_fp16(&self) -> Result<Vec<f64>> {
        self.store
            .get(self.anchors.pos)
            .data
            .iter()
            .map(|v| round_f16(*v))
            .collect()
    }

    /// Positional encodings of bbox-normalized fp16 positions, (n, pe_dim).
    pub fn encoded_positions(&self) -> Result<Vec<f64>> {
        let pos = self.positions_fp16()?;
        Ok(encode_positions(&pos, self.n_anchors, &self.bbox, self.config.l_pe))
    }

    /// Concatenated attribute block in coding order, (n, total_dim).
    pub fn attribute_block(&self) -> Vec<f64> {
        let layout = self.layout();
        let total = layout.total_dim();
        let n = self.n_anchors;
        let mut out = vec![0.0; n * total];
        let parts = [
            (AttributeKind::Feature, self.anchors.feature),
            (AttributeKind::Offsets, self.anchors.offsets),
            (AttributeKind::Scaling, self.anchors.scaling),
            (AttributeKind::TemporalFeature, self.anchors.phi),
            (AttributeKind::Tau, self.anchors.tau),
        ];
        for (kind, pid) in parts {
            let (off, dim) = layout.range(kind);
            let src = &self.store.get(pid).data;
            for a in 0..n {
                out[a * total + off..a * total + off + dim]
                    .copy_from_slice(&src[a * dim..(a + 1) * dim]);
            }
        }
        out
    }

    /// Hard temporal mask (true = dynamic) from the current logits.
    pub fn dynamic_flags(&self) -> Vec<bool> {
        self.store
            .get(self.anchors.mask_temporal)
            .data
            .iter()
            .map(|logit| *logit > 0.0)
            .collect()
    }

    /// Derived activation windows from the current raw parameters.
    pub fn windows(&self) -> Vec<ActivationParams> {
        let tau = &self.store.get(self.anchors.tau).data;
        (0..self.n_anchors)
            .map(|a| ActivationParams::from_raw(&tau[a * 4..a * 4 + 4]))
            .collect()
    }

    /// Deformed anchor positions at time t (plain path, current parameters),
    /// honoring the hard temporal mask.
    pub fn deformed_positions(&self, t: f64) -> Result<Vec<Vec3>> {
        let n = self.n_anchors;
        let pos = &self.store.get(self.anchors.pos).data;
        let phi = &self.store.get(self.anchors.phi).data;
        let dynamic = self.dynamic_flags();
        let (dx, _) = self.nets.field.deform_plain(&self.store, phi, n, t)?;
        Ok((0..n)
            .map(|a| {
                let base = Vec3::from_slice(&pos[a * 3..a * 3 + 3]);
                if dynamic[a] {
                    base + Vec3::from_slice(&dx[a * 3..a * 3 + 3])
                } else {
                    base
                }
            })
            .collect())
    }

    /// Per-anchor summed decoded opacity, gated by the hard offset masks.
    /// Used by time-aware pruning.
    pub fn collective_opacity(&self) -> Vec<f64> {
        let n = self.n_anchors;
        let k = self.config.anchor.offsets_per_anchor;
        let f = &self.store.get(self.anchors.feature).data;
        let out = self.nets.app.forward_plain(&self.store, f, n);
        let mask = &self.store.get(self.anchors.mask_offset).data;
        (0..n)
            .map(|a| {
                (0..k)
                    .map(|p| {
                        let logit = out[a * 4 * k + p * 4 + 3];
                        let alpha = 1.0 / (1.0 + (-logit).exp());
                        if mask[a * k + p] > 0.0 {
                            alpha
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect()
    }

    /// Drop anchors (rows across every anchor parameter). Returns kept count.
    pub fn retain_anchors(&mut self, keep: &[bool]) -> usize {
        assert_eq!(keep.len(), self.n_anchors);
        for pid in self.anchors.all() {
            self.store.retain_rows(pid, keep);
        }
        let mut creation = Vec::new();
        for (c, k) in self.creation_indices.iter().zip(keep) {
            if *k {
                creation.push(*c);
            }
        }
        self.creation_indices = creation;
        self.n_anchors = keep.iter().filter(|k| **k).count();
        self.n_anchors
    }

    /// Overwrite activation windows with the visibility-based initialization.
    pub fn set_windows_from_visibility(&mut self, scene: &ToyScene) -> Result<usize> {
        let mut per_time = Vec::with_capacity(scene.timestamps.len());
        for t in &scene.timestamps {
            per_time.push(self.deformed_positions(*t)?);
        }
        let init = crate::temporal::visibility_windows(
            &per_time,
            &scene.cameras,
            &scene.timestamps,
            crate::anchor::DEFAULT_WIDTH,
        );
        let tau = &mut self.store.get_mut(self.anchors.tau).data;
        for (a, raw) in init.tau_raw.iter().enumerate() {
            tau[a * 4..a * 4 + 4].copy_from_slice(raw);
        }
        Ok(init.never_visible.iter().filter(|v| **v).count())
    }
}

fn scene_bbox(points: &[Vec3]) -> [f64; 6] {
    let mut lo = Vec3::splat(f64::INFINITY);
    let mut hi = Vec3::splat(f64::NEG_INFINITY);
    for p in points {
        lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    // Store as f32-exact values so encoder and decoder normalize identically.
    [
        lo.x as f32 as f64,
        lo.y as f32 as f64,
        lo.z as f32 as f64,
        hi.x as f32 as f64,
        hi.y as f32 as f64,
        hi.z as f32 as f64,
    ]
}

/// Normalize fp16 positions into the unit cube of the bbox and apply the
/// frequency encoding.
pub fn encode_positions(pos: &[f64], n: usize, bbox: &[f64; 6], l_pe: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * pe_dim(l_pe));
    for a in 0..n {
        let mut u = [0.0; 3];
        for j in 0..3 {
            let lo = bbox[j];
            let hi = bbox[3 + j];
            let span = (hi - lo).max(1e-9);
            u[j] = (pos[a * 3 + j] - lo) / span;
        }
        out.extend(positional_encoding(&u, l_pe));
    }
    out
}

// ---------------------------------------------------------------------------
// Training forward pass
// ---------------------------------------------------------------------------

/// Tape ids of the per-part losses recorded by the forward pass.
pub struct ForwardLosses {
    pub distortion: Id,
    /// Average estimated bits per anchor.
    pub rate: Id,
    pub offset_mask: Id,
    pub temporal_mask: Id,
    pub vol: Id,
    pub tv: Id,
    pub image: Id,
}

pub struct StepContext<'a> {
    pub camera: &'a Camera,
    pub target: &'a Image,
    pub t: f64,
    /// Uniform noise in [-1/2, 1/2), (n, total_dim) in layout order.
    pub noise: &'a [f64],
    /// Static phase: activation pinned to one.
    pub phase_static: bool,
    pub settings: RenderSettings,
}

impl Model {
    /// Record the full training forward pass; returns the loss parts and the
    /// leaf binding for gradient readback.
    pub fn forward(&self, tape: &mut Tape, ctx: &StepContext) -> Result<(ForwardLosses, LeafBinding)> {
        let binding = self.store.bind_all(tape);
        let n = self.n_anchors;
        let k = self.config.anchor.offsets_per_anchor;
        let layout = self.layout();
        let total = layout.total_dim();
        assert_eq!(ctx.noise.len(), n * total);

        // Entropy parameters from decoder-visible positions.
        let pe = self.encoded_positions()?;
        let pe_id = tape.constant(pe, (n, pe_dim(self.config.l_pe)));

        // Per-kind leaves in coding order.
        let kind_leaves = [
            binding.leaf(self.anchors.feature),
            binding.leaf(self.anchors.offsets),
            binding.leaf(self.anchors.scaling),
            binding.leaf(self.anchors.phi),
            binding.leaf(self.anchors.tau),
        ];

        let (noisy, rate_total) = match self.config.prior {
            PriorKind::Hyper => self.rate_hyper(tape, &binding, pe_id, &kind_leaves, ctx.noise)?,
            PriorKind::Factorized => self.rate_factorized(tape, &binding, &kind_leaves, ctx.noise)?,
        };
        let rate = tape.mul_scalar(rate_total, 1.0 / n as f64);

        // Deformation with the straight-through dynamic gate.
        let mask_t_logit = binding.leaf(self.anchors.mask_temporal);
        let mask_t_soft = tape.sigmoid(mask_t_logit);
        let gate = tape.ste_gate(mask_t_soft, 0.5);
        let x = binding.leaf(self.anchors.pos);
        let (x_def, f_def) = self.nets.field.deform_tape(
            tape,
            &binding,
            noisy[3],
            x,
            noisy[0],
            gate,
            ctx.t,
        )?;

        // Geometry from the deformed feature, appearance from the canonical one.
        let geo_out = self.nets.geo.forward_tape(tape, &binding, f_def);
        let geo_prim = tape.reshape(geo_out, n * k, 7);
        let scale_raw = tape.slice_cols(geo_prim, 0, 3);
        let scale_clamped = tape.clamp_min(scale_raw, SCALE_LOG_MIN);
        let scale_clamped = tape.clamp_max(scale_clamped, SCALE_LOG_MAX);
        let scales = tape.exp(scale_clamped);
        let quat_raw = tape.slice_cols(geo_prim, 3, 7);
        let identity_quat = tape.constant(vec![1.0, 0.0, 0.0, 0.0], (1, 4));
        let quat_off = tape.add_row(quat_raw, identity_quat);
        let quats = tape.normalize_rows(quat_off);

        let app_out = self.nets.app.forward_tape(tape, &binding, noisy[0]);
        let app_prim = tape.reshape(app_out, n * k, 4);
        let color_raw = tape.slice_cols(app_prim, 0, 3);
        let colors = tape.sigmoid(color_raw);
        let opac_raw = tape.slice_cols(app_prim, 3, 4);
        let opac = tape.sigmoid(opac_raw);

        // Primitive means: x' + l ⊙ O per offset.
        let x_tiled = tape.tile_cols(x_def, k);
        let l_tiled = tape.tile_cols(noisy[2], k);
        let scaled_off = tape.mul(l_tiled, noisy[1]);
        let means_block = tape.add(x_tiled, scaled_off);
        let means = tape.reshape(means_block, n * k, 3);

        // Temporal activation per anchor.
        let tau_t = if ctx.phase_static || self.config.temporal_ablation {
            tape.constant(vec![1.0; n], (n, 1))
        } else {
            let tau_hat = noisy[4];
            let a_s = tape.slice_cols(tau_hat, 0, 1);
            let delta = tape.slice_cols(tau_hat, 1, 2);
            let sp_delta = tape.softplus(delta);
            let a_f = tape.add(a_s, sp_delta);
            let bs_raw = tape.slice_cols(tau_hat, 2, 3);
            let bs_sp = tape.softplus(bs_raw);
            let b_s = tape.add_scalar(bs_sp, crate::temporal::WIDTH_FLOOR);
            let bf_raw = tape.slice_cols(tau_hat, 3, 4);
            let bf_sp = tape.softplus(bf_raw);
            let b_f = tape.add_scalar(bf_sp, crate::temporal::WIDTH_FLOOR);
            let op = Box::new(ActivationOp { t: ctx.t });
            tape.custom(op, &[a_s, b_s, a_f, b_f])
        };

        // Effective opacity: alpha * offset-mask gate * activation.
        let mask_off_logit = binding.leaf(self.anchors.mask_offset);
        let mask_off_soft = tape.sigmoid(mask_off_logit);
        let mask_gate = tape.ste_gate(mask_off_soft, 0.5);
        let mask_prim = tape.reshape(mask_gate, n * k, 1);
        let tau_tiled = tape.tile_cols(tau_t, k);
        let tau_prim = tape.reshape(tau_tiled, n * k, 1);
        let opac_masked = tape.mul(opac, mask_prim);
        let opac_eff = tape.mul(opac_masked, tau_prim);

        // Rasterize and measure distortion.
        let order: Vec<usize> = (0..n * k).collect();
        let raster = Box::new(RasterizeOp {
            camera: ctx.camera.clone(),
            settings: ctx.settings.clone(),
            order,
        });
        let image = tape.custom(raster, &[means, scales, quats, colors, opac_eff]);
        let l1 = {
            let op = Box::new(L1Op { target: ctx.target.data.clone() });
            tape.custom(op, &[image])
        };
        let ssim_v = {
            let op = Box::new(SsimOp {
                target: ctx.target.data.clone(),
                width: ctx.target.width,
                height: ctx.target.height,
            });
            tape.custom(op, &[image])
        };
        let neg_ssim = tape.neg(ssim_v);
        let one_minus = tape.add_scalar(neg_ssim, 1.0);
        let l1w = tape.mul_scalar(l1, 0.8);
        let ssw = tape.mul_scalar(one_minus, 0.2);
        let distortion = tape.add(l1w, ssw);

        // Mask sparsity and regularizers.
        let offset_mask = tape.mean_all(mask_off_soft);
        let temporal_mask = tape.mean_all(mask_t_soft);
        let sx = tape.slice_cols(scales, 0, 1);
        let sy = tape.slice_cols(scales, 1, 2);
        let sz = tape.slice_cols(scales, 2, 3);
        let sxy = tape.mul(sx, sy);
        let vol_col = tape.mul(sxy, sz);
        let vol = tape.mean_all(vol_col);
        let tv = self.nets.field.tv_loss_tape(tape, &binding);

        Ok((
            ForwardLosses { distortion, rate, offset_mask, temporal_mask, vol, tv, image },
            binding,
        ))
    }

    /// Noise-quantized attributes plus total estimated bits under the
    /// hyperprior with channel-AR refinement for the feature.
    #[allow(clippy::type_complexity)]
    fn rate_hyper(
        &self,
        tape: &mut Tape,
        binding: &LeafBinding,
        pe_id: Id,
        kind_leaves: &[Id; 5],
        noise: &[f64],
    ) -> Result<([Id; 5], Id)> {
        let n = self.n_anchors;
        let layout = self.layout();
        let hyper = self.nets.hyper.params_tape(tape, binding, pe_id);
        let mut noisy = [pe_id; 5]; // placeholder, overwritten below
        let mut bits_parts = Vec::new();

        for (ki, kind) in KIND_ORDER.iter().enumerate() {
            let (off, dim) = layout.range(*kind);
            let leaf = kind_leaves[ki];
            let q_col = tape.slice_cols(hyper.q, ki, ki + 1);
            // xi * q, xi constant per step.
            let xi: Vec<f64> = (0..n)
                .flat_map(|a| {
                    noise[a * layout.total_dim() + off..a * layout.total_dim() + off + dim].to_vec()
                })
                .collect();
            let xi_id = tape.constant(xi, (n, dim));
            let xi_q = tape.mul_col(xi_id, q_col);
            let hat = tape.add(leaf, xi_q);
            noisy[ki] = hat;

            let mu_k = tape.slice_cols(hyper.mu, off, off + dim);
            let sigma_k = tape.slice_cols(hyper.sigma, off, off + dim);
            if *kind == AttributeKind::Feature {
                let sigma_raw_k = tape.slice_cols(hyper.sigma_raw, off, off + dim);
                let chunk = self.nets.ar.chunk;
                for c in 0..self.nets.ar.n_chunks {
                    let ctx = if c == 0 {
                        None
                    } else {
                        Some(tape.slice_cols(hat, 0, c * chunk))
                    };
                    let (mu_c, sigma_c) = self.nets.ar.chunk_params_tape(
                        tape, binding, c, mu_k, sigma_raw_k, sigma_k, ctx,
                    )?;
                    let hat_c = tape.slice_cols(hat, c * chunk, (c + 1) * chunk);
                    bits_parts.push(rate_bits_tape(tape, hat_c, mu_c, sigma_c, q_col));
                }
            } else {
                bits_parts.push(rate_bits_tape(tape, hat, mu_k, sigma_k, q_col));
            }
        }
        let mut total = bits_parts[0];
        for b in &bits_parts[1..] {
            total = tape.add(total, *b);
        }
        Ok((noisy, total))
    }

    /// Factorized-prior rate path: one learned univariate CDF per component.
    #[allow(clippy::type_complexity)]
    fn rate_factorized(
        &self,
        tape: &mut Tape,
        binding: &LeafBinding,
        kind_leaves: &[Id; 5],
        noise: &[f64],
    ) -> Result<([Id; 5], Id)> {
        let n = self.n_anchors;
        let layout = self.layout();
        let q_leaf = binding.leaf(self.nets.fm.q_raw);
        let q_sig = tape.sigmoid(q_leaf);
        let caps: Vec<f64> = KIND_ORDER
            .iter()
            .take(layout.kind_count())
            .map(|k| crate::entropy::kind_q_cap(*k))
            .collect();
        let caps_col = tape.constant(caps, (layout.kind_count(), 1));
        let q_scaled = tape.mul(q_sig, caps_col);
        let q_all = tape.add_scalar(q_scaled, crate::entropy::Q_FLOOR); // (kinds, 1)
        let mut noisy = [q_all; 5];
        let mut bits_parts = Vec::new();
        for (ki, kind) in KIND_ORDER.iter().enumerate() {
            let (off, dim) = layout.range(*kind);
            let leaf = kind_leaves[ki];
            let q_k = tape.select_rows(q_all, &[ki]); // (1,1)
            let q_col = tape.select_rows(q_k, &vec![0; n]); // (n,1)
            let xi: Vec<f64> = (0..n)
                .flat_map(|a| {
                    noise[a * layout.total_dim() + off..a * layout.total_dim() + off + dim].to_vec()
                })
                .collect();
            let xi_id = tape.constant(xi, (n, dim));
            let xi_q = tape.mul_col(xi_id, q_col);
            let hat = tape.add(leaf, xi_q);
            noisy[ki] = hat;
            for c in 0..dim {
                let col = tape.slice_cols(hat, c, c + 1);
                bits_parts.push(self.nets.fm.rate_bits_tape(tape, binding, off + c, col, q_k));
            }
        }
        let mut total = bits_parts[0];
        for b in &bits_parts[1..] {
            total = tape.add(total, *b);
        }
        Ok((noisy, total))
    }
}

// ---------------------------------------------------------------------------
// Quantized (decoder-visible) model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    /// Net/bank parameters only, all values f32-exact.
    pub store: ParamStore,
    pub nets: Nets,
    pub n_anchors: usize,
    pub frame_count: usize,
    pub voxel_size: f64,
    pub bbox: [f64; 6],
    pub lambda_rate: f64,
    /// (n, 3), fp16-exact.
    pub positions: Vec<f64>,
    /// (n, total_dim) dequantized attributes in layout order.
    pub attributes: Vec<f64>,
    /// (n, total_dim) quantization indices.
    pub indices: Vec<i64>,
    /// (n, K) binarized offset masks.
    pub offset_mask: Vec<bool>,
    /// (n,) binarized temporal masks (true = dynamic).
    pub temporal_mask: Vec<bool>,
}

/// Per-anchor coding parameters: one (mu, sigma) pair per component and one
/// step per kind, exactly as the range coder consumes them.
pub struct AnchorCoding {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub q: Vec<f64>,
}

impl Model {
    /// Full-precision checkpoint (JSON; f64 values round-trip exactly).
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Model> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

impl Model {
    /// Freeze the model into its decoder-visible form: canonical anchor
    /// order, fp16 positions, f32 weights, hard-quantized attributes and
    /// binarized masks.
    pub fn finalize(&self) -> Result<QuantizedModel> {
        let mut m = self.clone();
        m.sort_canonical()?;

        // f32-cast the network parameters into a fresh store with identical
        // layout (net params occupy the head of the store).
        let mut net_store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nets =
            build_nets(&mut net_store, &m.config, m.frame_count, m.voxel_size, &mut rng);
        for i in 0..nets.store_span {
            let pid = ParamId(i);
            let src = &m.store.get(pid).data;
            let dst = &mut net_store.get_mut(pid).data;
            assert_eq!(src.len(), dst.len());
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s as f32 as f64;
            }
        }

        let n = m.n_anchors;
        let layout = m.config.layout();
        let total = layout.total_dim();
        let positions = m.positions_fp16()?;
        let raw_atts = m.attribute_block();

        let k = m.config.anchor.offsets_per_anchor;
        let offset_mask: Vec<bool> = m
            .store
            .get(m.anchors.mask_offset)
            .data
            .iter()
            .map(|l| *l > 0.0)
            .collect();
        let temporal_mask: Vec<bool> = m
            .store
            .get(m.anchors.mask_temporal)
            .data
            .iter()
            .map(|l| *l > 0.0)
            .collect();
        debug_assert_eq!(offset_mask.len(), n * k);

        let mut qm = QuantizedModel {
            config: m.config.clone(),
            store: net_store,
            nets,
            n_anchors: n,
            frame_count: m.frame_count,
            voxel_size: m.voxel_size,
            bbox: m.bbox,
            lambda_rate: m.lambda_rate,
            positions,
            attributes: vec![0.0; n * total],
            indices: vec![0; n * total],
            offset_mask,
            temporal_mask,
        };
        qm.quantize_attributes(&raw_atts)?;
        Ok(qm)
    }

    fn sort_canonical(&mut self) -> Result<()> {
        let pos = self.store.get(self.anchors.pos).data.clone();
        let mut keys = Vec::with_capacity(self.n_anchors);
        for a in 0..self.n_anchors {
            keys.push((
                round_f16(pos[a * 3])?,
                round_f16(pos[a * 3 + 1])?,
                round_f16(pos[a * 3 + 2])?,
                self.creation_indices[a],
            ));
        }
        let mut order: Vec<usize> = (0..self.n_anchors).collect();
        order.sort_by(|&i, &j| {
            keys[i]
                .0
                .total_cmp(&keys[j].0)
                .then(keys[i].1.total_cmp(&keys[j].1))
                .then(keys[i].2.total_cmp(&keys[j].2))
                .then(keys[i].3.cmp(&keys[j].3))
        });
        for pid in self.anchors.all() {
            let p = self.store.get_mut(pid);
            let (rows, cols) = p.shape;
            assert_eq!(rows, order.len());
            let mut next = vec![0.0; p.data.len()];
            for (dst, &src) in order.iter().enumerate() {
                next[dst * cols..(dst + 1) * cols]
                    .copy_from_slice(&p.data[src * cols..(src + 1) * cols]);
            }
            p.data = next;
        }
        self.creation_indices = order.iter().map(|&i| self.creation_indices[i]).collect();
        Ok(())
    }
}

impl QuantizedModel {
    pub fn layout(&self) -> AttributeLayout {
        self.config.layout()
    }

    /// Hyperprior (or factorized) output for one anchor, before AR refinement.
    fn base_coding(&self, a: usize) -> AnchorCoding {
        let layout = self.layout();
        let total = layout.total_dim();
        match self.config.prior {
            PriorKind::Hyper => {
                let pe = encode_positions(
                    &self.positions[a * 3..a * 3 + 3],
                    1,
                    &self.bbox,
                    self.config.l_pe,
                );
                let out = self.nets.hyper.params_plain(&self.store, &pe, 1);
                AnchorCoding { mu: out.mu, sigma: out.sigma, q: out.q }
            }
            PriorKind::Factorized => {
                // Values unused for FM except q; mu/sigma are placeholders.
                let kinds = layout.kind_count();
                let q = (0..kinds)
                    .map(|ki| self.nets.fm.q_for_kind(&self.store, ki))
                    .collect();
                AnchorCoding { mu: vec![0.0; total], sigma: vec![1.0; total], q }
            }
        }
    }

    /// Hyperprior sigma_raw block for the feature kind of one anchor.
    fn hyper_sigma_raw_feature(&self, a: usize) -> Vec<f64> {
        let layout = self.layout();
        let (off, dim) = layout.range(AttributeKind::Feature);
        let pe = encode_positions(&self.positions[a * 3..a * 3 + 3], 1, &self.bbox, self.config.l_pe);
        let out = self.nets.hyper.params_plain(&self.store, &pe, 1);
        out.sigma_raw[off..off + dim].to_vec()
    }

    /// Quantize a raw attribute block in coding order, with AR context taken
    /// from the already-dequantized earlier chunks (mirrors decoding).
    fn quantize_attributes(&mut self, raw: &[f64]) -> Result<()> {
        let layout = self.layout();
        let total = layout.total_dim();
        for a in 0..self.n_anchors {
            let coding = self.base_coding(a);
            for (ki, kind) in KIND_ORDER.iter().enumerate() {
                let (off, dim) = layout.range(*kind);
                let q = coding.q[ki];
                // AR refinement changes probabilities only; the shared
                // per-kind step means indices can be computed directly.
                for j in 0..dim {
                    let v = raw[a * total + off + j];
                    let idx = quantize_index(v, q);
                    self.indices[a * total + off + j] = idx;
                    self.attributes[a * total + off + j] = idx as f64 * q;
                }
            }
            // Consistency: dequantized value equals quantize_hard.
            debug_assert!({
                let (off, dim) = layout.range(AttributeKind::Scaling);
                (0..dim).all(|j| {
                    let v = raw[a * total + off + j];
                    (self.attributes[a * total + off + j] - quantize_hard(v, coding.q[2])).abs()
                        < 1e-12
                })
            });
        }
        Ok(())
    }

    /// Coding parameters for every component of one anchor, including the
    /// channel-AR refinement for the feature (context = dequantized chunks).
    pub fn coding_params(&self, a: usize) -> Result<AnchorCoding> {
        let layout = self.layout();
        let total = layout.total_dim();
        let mut coding = self.base_coding(a);
        if self.config.prior == PriorKind::Hyper {
            let (off, dim) = layout.range(AttributeKind::Feature);
            let hyper_mu = coding.mu[off..off + dim].to_vec();
            let hyper_sigma = coding.sigma[off..off + dim].to_vec();
            let sigma_raw = self.hyper_sigma_raw_feature(a);
            let chunk = self.nets.ar.chunk;
            let feature_hat = &self.attributes[a * total + off..a * total + off + dim];
            for c in 0..self.nets.ar.n_chunks {
                let (mu_c, sigma_c) = self.nets.ar.chunk_params_plain(
                    &self.store,
                    c,
                    &hyper_mu,
                    &sigma_raw,
                    &hyper_sigma,
                    &feature_hat[..c * chunk],
                )?;
                coding.mu[off + c * chunk..off + (c + 1) * chunk].copy_from_slice(&mu_c);
                coding.sigma[off + c * chunk..off + (c + 1) * chunk].copy_from_slice(&sigma_c);
            }
        }
        Ok(coding)
    }

    /// Continuous-model estimate of the attribute-section payload in bits
    /// (same probabilities, clamp and steps as the range coder input).
    pub fn estimated_attribute_bits(&self) -> Result<f64> {
        let layout = self.layout();
        let total = layout.total_dim();
        let mut bits = 0.0;
        for a in 0..self.n_anchors {
            let coding = self.coding_params(a)?;
            for (ki, kind) in KIND_ORDER.iter().enumerate() {
                let (off, dim) = layout.range(*kind);
                for j in 0..dim {
                    let v = self.attributes[a * total + off + j];
                    let p = match self.config.prior {
                        PriorKind::Hyper => likelihood(
                            v,
                            coding.mu[off + j],
                            coding.sigma[off + j],
                            coding.q[ki],
                        ),
                        PriorKind::Factorized => self.nets.fm.likelihood_plain(
                            &self.store,
                            off + j,
                            v,
                            coding.q[ki],
                        ),
                    };
                    bits += -p.log2();
                }
            }
        }
        Ok(bits)
    }

    /// Activation windows from the dequantized raw parameters.
    pub fn windows(&self) -> Vec<ActivationParams> {
        let layout = self.layout();
        let total = layout.total_dim();
        let (off, _) = layout.range(AttributeKind::Tau);
        (0..self.n_anchors)
            .map(|a| ActivationParams::from_raw(&self.attributes[a * total + off..a * total + off + 4]))
            .collect()
    }

    /// Render one view at time t from the decoded state.
    pub fn render(&self, camera: &Camera, t: f64, settings: &RenderSettings) -> Result<Image> {
        let layout = self.layout();
        let total = layout.total_dim();
        let n = self.n_anchors;
        let k = self.config.anchor.offsets_per_anchor;
        let d_f = self.config.anchor.feature_dim;
        let d = self.config.anchor.temporal_dim;
        let (f_off, _) = layout.range(AttributeKind::Feature);
        let (o_off, _) = layout.range(AttributeKind::Offsets);
        let (l_off, _) = layout.range(AttributeKind::Scaling);
        let (phi_off, _) = layout.range(AttributeKind::TemporalFeature);

        // Deform dynamic anchors.
        let phi: Vec<f64> = (0..n)
            .flat_map(|a| self.attributes[a * total + phi_off..a * total + phi_off + d].to_vec())
            .collect();
        let (dx, df) = self.nets.field.deform_plain(&self.store, &phi, n, t)?;

        let windows = self.windows();
        let mut means = Vec::with_capacity(n * k * 3);
        let mut scales = Vec::with_capacity(n * k * 3);
        let mut quats = Vec::with_capacity(n * k * 4);
        let mut colors = Vec::with_capacity(n * k * 3);
        let mut opacities = Vec::with_capacity(n * k);
        let mut order = Vec::with_capacity(n * k);

        // Batched decoder evaluation.
        let mut f_def = vec![0.0; n * d_f];
        let mut f_can = vec![0.0; n * d_f];
        for a in 0..n {
            let f = &self.attributes[a * total + f_off..a * total + f_off + d_f];
            f_can[a * d_f..(a + 1) * d_f].copy_from_slice(f);
            f_def[a * d_f..(a + 1) * d_f].copy_from_slice(f);
            if self.temporal_mask[a] {
                for j in 0..d_f {
                    f_def[a * d_f + j] += df[a * d_f + j];
                }
            }
        }
        let geo = self.nets.geo.forward_plain(&self.store, &f_def, n);
        let app = self.nets.app.forward_plain(&self.store, &f_can, n);

        for a in 0..n {
            let tau_t = if self.config.temporal_ablation {
                1.0
            } else {
                activation(&windows[a], t)
            };
            let mut x = [
                self.positions[a * 3],
                self.positions[a * 3 + 1],
                self.positions[a * 3 + 2],
            ];
            if self.temporal_mask[a] {
                for j in 0..3 {
                    x[j] += dx[a * 3 + j];
                }
            }
            let l = &self.attributes[a * total + l_off..a * total + l_off + 3];
            for p in 0..k {
                if !self.offset_mask[a * k + p] {
                    continue;
                }
                let o = &self.attributes[a * total + o_off + p * 3..a * total + o_off + p * 3 + 3];
                means.extend_from_slice(&[x[0] + l[0] * o[0], x[1] + l[1] * o[1], x[2] + l[2] * o[2]]);
                let g = &geo[a * 7 * k + p * 7..a * 7 * k + (p + 1) * 7];
                for j in 0..3 {
                    scales.push(g[j].clamp(SCALE_LOG_MIN, SCALE_LOG_MAX).exp());
                }
                let qv = [1.0 + g[3], g[4], g[5], g[6]];
                let qn = (qv.iter().map(|v| v * v).sum::<f64>()).sqrt();
                quats.extend(qv.iter().map(|v| v / qn));
                let ap = &app[a * 4 * k + p * 4..a * 4 * k + (p + 1) * 4];
                for j in 0..3 {
                    colors.push(1.0 / (1.0 + (-ap[j]).exp()));
                }
                let alpha = 1.0 / (1.0 + (-ap[3]).exp());
                opacities.push(alpha * tau_t);
                order.push(a * k + p);
            }
        }

        let prims = PrimitiveBuffers {
            means: &means,
            scales: &scales,
            quats: &quats,
            colors: &colors,
            opacities: &opacities,
            order: &order,
        };
        Ok(render_plain(&prims, camera, settings).image)
    }

    /// Per-anchor summed decoded opacity gated by the offset masks
    /// (diagnostic; mirrors the pruning statistic).
    pub fn decoded_alpha_sums(&self) -> Vec<f64> {
        let layout = self.layout();
        let total = layout.total_dim();
        let n = self.n_anchors;
        let k = self.config.anchor.offsets_per_anchor;
        let d_f = self.config.anchor.feature_dim;
        let (f_off, _) = layout.range(AttributeKind::Feature);
        let mut f_can = vec![0.0; n * d_f];
        for a in 0..n {
            f_can[a * d_f..(a + 1) * d_f]
                .copy_from_slice(&self.attributes[a * total + f_off..a * total + f_off + d_f]);
        }
        let app = self.nets.app.forward_plain(&self.store, &f_can, n);
        (0..n)
            .map(|a| {
                (0..k)
                    .filter(|p| self.offset_mask[a * k + p])
                    .map(|p| 1.0 / (1.0 + (-app[a * 4 * k + p * 4 + 3]).exp()))
                    .sum()
            })
            .collect()
    }

    /// Mean PSNR/SSIM over every camera and frame of a scene.
    pub fn eval_scene(&self, scene: &ToyScene, settings: &RenderSettings) -> Result<(f64, f64)> {
        let mut psnr_acc = 0.0;
        let mut ssim_acc = 0.0;
        let mut count = 0usize;
        for (ci, cam) in scene.cameras.iter().enumerate() {
            for (fi, t) in scene.timestamps.iter().enumerate() {
                let img = self.render(cam, *t, settings)?;
                let target = &scene.frames[ci][fi];
                psnr_acc += crate::metrics::psnr(&img, target)?;
                ssim_acc += crate::metrics::ssim(&img, target)?;
                count += 1;
            }
        }
        Ok((psnr_acc / count as f64, ssim_acc / count as f64))
    }

    /// Bit-exact equality of the decoder-visible state.
    pub fn state_eq(&self, other: &QuantizedModel) -> bool {
        if self.n_anchors != other.n_anchors
            || self.positions.len() != other.positions.len()
            || self.attributes.len() != other.attributes.len()
        {
            return false;
        }
        let bits = |v: &[f64]| -> Vec<u64> { v.iter().map(|x| x.to_bits()).collect() };
        if bits(&self.positions) != bits(&other.positions) {
            return false;
        }
        if bits(&self.attributes) != bits(&other.attributes) {
            return false;
        }
        if self.indices != other.indices
            || self.offset_mask != other.offset_mask
            || self.temporal_mask != other.temporal_mask
        {
            return false;
        }
        for i in 0..self.nets.store_span {
            let a = &self.store.get(ParamId(i)).data;
            let b = &other.store.get(ParamId(i)).data;
            if bits(a) != bits(b) {
                return false;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_points() -> Vec<Vec3> {
        vec![
            Vec3::new(0.1, 0.1, 0.1),
            Vec3::new(0.9, 0.2, 0.3),
            Vec3::new(-0.4, 0.5, 0.8),
            Vec3::new(0.3, -0.6, 0.2),
        ]
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            anchor: AnchorConfig { feature_dim: 8, temporal_dim: 4, offsets_per_anchor: 2 },
            bank_dim: 4,
            l_pe: 2,
            n_chunks: 2,
            hidden_deform: 8,
            hidden_decoder: 8,
            hidden_hyper: 8,
            hidden_ar: 8,
            dx_scale_factor: 0.1,
            prior: PriorKind::Hyper,
            temporal_ablation: false,
        }
    }

    #[test]
    fn init_builds_consistent_shapes() {
        let m = Model::init(&toy_points(), 10, 0.5, small_config(), 0.004, 7).unwrap();
        assert!(m.n_anchors >= 3);
        let layout = m.layout();
        assert_eq!(layout.total_dim(), 8 + 6 + 3 + 4 + 4);
        assert_eq!(m.store.get(m.anchors.pos).shape, (m.n_anchors, 3));
        assert_eq!(m.store.get(m.anchors.tau).shape, (m.n_anchors, 4));
        assert_eq!(m.nets.field.rows, 5);
    }

    #[test]
    fn finalize_roundtrips_decoder_visible_state() {
        let m = Model::init(&toy_points(), 10, 0.5, small_config(), 0.004, 7).unwrap();
        let qa = m.finalize().unwrap();
        let qb = m.finalize().unwrap();
        assert!(qa.state_eq(&qb));
        // Positions are fp16-exact.
        for v in &qa.positions {
            assert_eq!(*v, crate::fp16::round_f16(*v).unwrap());
        }
        // Dequantized attributes are exact multiples of their steps.
        let layout = qa.layout();
        let total = layout.total_dim();
        for a in 0..qa.n_anchors {
            let coding = qa.base_coding(a);
            for (ki, kind) in KIND_ORDER.iter().enumerate() {
                let (off, dim) = layout.range(*kind);
                for j in 0..dim {
                    let v = qa.attributes[a * total + off + j];
                    let idx = qa.indices[a * total + off + j];
                    assert_eq!(v, idx as f64 * coding.q[ki]);
                }
            }
        }
    }

    #[test]
    fn forward_records_finite_losses_and_grads() {
        let m = Model::init(&toy_points(), 10, 0.5, small_config(), 0.004, 7).unwrap();
        let cam = Camera::look_at(
            Vec3::new(0.0, 0.0, -4.0),
            Vec3::ZERO,
            Vec3::new(0.0, 1.0, 0.0),
            16,
            16,
            20.0,
        );
        let target = Image::filled(16, 16, [0.3, 0.3, 0.3]);
        let layout = m.layout();
        let noise = vec![0.1; m.n_anchors * layout.total_dim()];
        let mut tape = Tape::new();
        let ctx = StepContext {
            camera: &cam,
            target: &target,
            t: 0.4,
            noise: &noise,
            phase_static: false,
            settings: RenderSettings::default(),
        };
        let (losses, binding) = m.forward(&mut tape, &ctx).unwrap();
        for id in [losses.distortion, losses.rate, losses.offset_mask, losses.temporal_mask, losses.vol, losses.tv] {
            assert!(tape.scalar_value(id).is_finite());
        }
        assert!(tape.scalar_value(losses.rate) > 0.0);
        // Gradients flow to representative parameters.
        let d = losses.distortion;
        let r = losses.rate;
        let dw = tape.mul_scalar(r, 0.01);
        let lsum = tape.add(d, dw);
        let grads = tape.backward(lsum);
        assert!(grads.get(binding.leaf(m.anchors.feature)).is_some());
        assert!(grads.get(binding.leaf(m.anchors.pos)).is_some());
        let g_bank = grads.get(binding.leaf(m.nets.field.bank));
        assert!(g_bank.is_some());
    }

    #[test]
    fn factorized_prior_forward_also_records() {
        let mut cfg = small_config();
        cfg.prior = PriorKind::Factorized;
        let m = Model::init(&toy_points(), 10, 0.5, cfg, 0.004, 7).unwrap();
        let cam = Camera::look_at(
            Vec3::new(0.0, 0.0, -4.0),
            Vec3::ZERO,
            Vec3::new(0.0, 1.0, 0.0),
            16,
            16,
            20.0,
        );
        let target = Image::filled(16, 16, [0.3, 0.3, 0.3]);
        let noise = vec![0.0; m.n_anchors * m.layout().total_dim()];
        let mut tape = Tape::new();
        let ctx = StepContext {
            camera: &cam,
            target: &target,
            t: 0.0,
            noise: &noise,
            phase_static: true,
            settings: RenderSettings::default(),
        };
        let (losses, _) = m.forward(&mut tape, &ctx).unwrap();
        assert!(tape.scalar_value(losses.rate).is_finite());
    }

    #[test]
    fn quantized_render_matches_between_finalize_calls() {
        let m = Model::init(&toy_points(), 10, 0.5, small_config(), 0.004, 7).unwrap();
        let q = m.finalize().unwrap();
        let cam = Camera::look_at(
            Vec3::new(0.0, 0.0, -4.0),
            Vec3::ZERO,
            Vec3::new(0.0, 1.0, 0.0),
            16,
            16,
            20.0,
        );
        let a = q.render(&cam, 0.25, &RenderSettings::default()).unwrap();
        let b = q.render(&cam, 0.25, &RenderSettings::default()).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn estimated_bits_positive_and_deterministic() {
        let m = Model::init(&toy_points(), 10, 0.5, small_config(), 0.004, 7).unwrap();
        let q = m.finalize().unwrap();
        let a = q.estimated_attribute_bits().unwrap();
        let b = q.estimated_attribute_bits().unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
    }

    #[test]
    fn retain_anchors_shrinks_all_rows() {
        let mut m = Model::init(&toy_points(), 10, 0.5, small_config(), 0.004, 7).unwrap();
        let n = m.n_anchors;
        let mut keep = vec![true; n];
        keep[0] = false;
        let left = m.retain_anchors(&keep);
        assert_eq!(left, n - 1);
        assert_eq!(m.store.get(m.anchors.pos).shape.0, n - 1);
        assert_eq!(m.store.get(m.anchors.mask_offset).shape.0, n - 1);
        assert_eq!(m.creation_indices.len(), n - 1);
    }
}
