//! Probability modeling for anchor attributes.
//!
//! A coordinate-conditioned hyperprior maps the positionally encoded anchor
//! position to per-attribute Gaussian parameters and quantization steps; a
//! channel-wise autoregressive model refines the parameters for the anchor
//! feature chunk by chunk; a learned factorized prior serves as the baseline
//! entropy model. All distribution parameters are functions of decoder-visible
//! data only (fp16 positions, transmitted weights, previously decoded chunks).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::{LeafBinding, ParamGroup, ParamId, ParamStore};
use crate::special::std_normal_cdf;
use crate::tape::{Id, Tape};
use crate::temporal::{softplus, softplus_inv};

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const Q_FLOOR: f64 = 1e-4;
pub const PROB_FLOOR: f64 = 1e-12;
pub const LN2: f64 = std::f64::consts::LN_2;

/// Upper bound of the learned quantization step per attribute kind. Keeps
/// rate minimization working through sharper predictions rather than by
/// coarsening parameters out of their useful dynamic range; the activation
/// window parameters get a tight cap so windows survive coding.
pub fn kind_q_cap(kind: AttributeKind) -> f64 {
    match kind {
        AttributeKind::Tau => 0.05,
        _ => 0.5,
    }
}

/// Sigmoid-bounded step activation: Q_FLOOR + cap * sigmoid(raw).
pub fn q_activation(raw: f64, cap: f64) -> f64 {
    Q_FLOOR + cap * crate::tape::sigmoid(raw)
}

/// Raw value giving a target initial step under [`q_activation`].
pub fn q_activation_inv(q0: f64, cap: f64) -> f64 {
    let s = ((q0 - Q_FLOOR) / cap).clamp(1e-6, 1.0 - 1e-6);
    (s / (1.0 - s)).ln()
}

/// Attribute types coded per anchor, in coding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttributeKind {
    Feature,
    Offsets,
    Scaling,
    TemporalFeature,
    Tau,
}

pub const KIND_ORDER: [AttributeKind; 5] = [
    AttributeKind::Feature,
    AttributeKind::Offsets,
    AttributeKind::Scaling,
    AttributeKind::TemporalFeature,
    AttributeKind::Tau,
];

impl AttributeKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttributeKind::Feature => "feature",
            AttributeKind::Offsets => "offsets",
            AttributeKind::Scaling => "scaling",
            AttributeKind::TemporalFeature => "temporal_feature",
            AttributeKind::Tau => "tau",
        }
    }

    pub fn from_name(name: &str) -> Result<AttributeKind> {
        KIND_ORDER
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }
}

/// Per-kind dimensions, fixed coding order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeLayout {
    pub dims: Vec<usize>,
}

impl AttributeLayout {
    pub fn new(feature_dim: usize, offsets: usize, temporal_dim: usize) -> AttributeLayout {
        AttributeLayout { dims: vec![feature_dim, offsets * 3, 3, temporal_dim, 4] }
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn kind_count(&self) -> usize {
        self.dims.len()
    }

    /// (column offset, dim) of a kind inside the concatenated attribute block.
    pub fn range(&self, kind: AttributeKind) -> (usize, usize) {
        let idx = KIND_ORDER.iter().position(|k| *k == kind).unwrap();
        let start: usize = self.dims[..idx].iter().sum();
        (start, self.dims[idx])
    }
}

// ---------------------------------------------------------------------------
// Positional encoding and quantization
// ---------------------------------------------------------------------------

/// Frequency encoding: x followed by sin/cos of 2^k * pi * x per component.
pub fn positional_encoding(x: &[f64], l_pe: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * (2 * l_pe + 1));
    out.extend_from_slice(x);
    for k in 0..l_pe {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        for v in x {
            out.push((f * v).sin());
        }
        for v in x {
            out.push((f * v).cos());
        }
    }
    out
}

pub fn pe_dim(l_pe: usize) -> usize {
    6 * l_pe + 3
}

/// Hard quantization: q * round(a/q), rounding half away from zero.
pub fn quantize_hard(a: f64, q: f64) -> f64 {
    debug_assert!(q > 0.0);
    (a / q).round() * q
}

/// Quantization index round(a/q).
pub fn quantize_index(a: f64, q: f64) -> i64 {
    (a / q).round() as i64
}

/// Training-mode quantization: additive uniform noise xi*q, xi in [-1/2, 1/2).
pub fn quantize_noise(a: f64, q: f64, xi: f64) -> f64 {
    debug_assert!((-0.5..=0.5).contains(&xi));
    a + xi * q
}

/// Bin probability of a quantized value under N(mu, sigma) with bin width q,
/// floored at PROB_FLOOR.
pub fn likelihood(a_hat: f64, mu: f64, sigma: f64, q: f64) -> f64 {
    debug_assert!(sigma > 0.0 && q > 0.0);
    let hi = std_normal_cdf((a_hat - mu + 0.5 * q) / sigma);
    let lo = std_normal_cdf((a_hat - mu - 0.5 * q) / sigma);
    (hi - lo).max(PROB_FLOOR)
}

/// Total bits of a value set under per-value Gaussian bin probabilities.
pub fn rate_bits(values: &[f64], mu: &[f64], sigma: &[f64], q: &[f64]) -> f64 {
    assert!(values.len() == mu.len() && mu.len() == sigma.len() && sigma.len() == q.len());
    values
        .iter()
        .zip(mu)
        .zip(sigma)
        .zip(q)
        .map(|(((v, m), s), qq)| -likelihood(*v, *m, *s, *qq).log2())
        .sum()
}

/// Tape rate: -sum log2 p for an (n, d) value block with matching mu/sigma
/// and a per-row quantization step column (n, 1).
pub fn rate_bits_tape(tape: &mut Tape, values: Id, mu: Id, sigma: Id, q_col: Id) -> Id {
    let half_q = tape.mul_scalar(q_col, 0.5);
    let centered = tape.sub(values, mu);
    let shifted_hi = tape.add_col(centered, half_q);
    let neg_half = tape.neg(half_q);
    let shifted_lo = tape.add_col(centered, neg_half);
    let z_hi = tape.div(shifted_hi, sigma);
    let z_lo = tape.div(shifted_lo, sigma);
    let cdf_hi = tape.normal_cdf(z_hi);
    let cdf_lo = tape.normal_cdf(z_lo);
    let p = tape.sub(cdf_hi, cdf_lo);
    let p = tape.clamp_min(p, PROB_FLOOR);
    let lnp = tape.ln(p);
    let s = tape.sum_all(lnp);
    tape.mul_scalar(s, -1.0 / LN2)
}

// ---------------------------------------------------------------------------
// INR hyperprior
// ---------------------------------------------------------------------------

/// Decoded hyperprior output for a batch of anchors.
pub struct HyperOut {
    /// (n, total_dim) means.
    pub mu: Vec<f64>,
    /// (n, total_dim) standard deviations (activated, floored).
    pub sigma: Vec<f64>,
    /// (n, total_dim) raw pre-activation sigmas (AR refinement adds to these).
    pub sigma_raw: Vec<f64>,
    /// (n, kind_count) quantization steps (activated, floored).
    pub q: Vec<f64>,
    pub n: usize,
}

impl HyperOut {
    pub fn kind_mu<'a>(&'a self, layout: &AttributeLayout, a: usize, kind: AttributeKind) -> &'a [f64] {
        let (off, dim) = layout.range(kind);
        let total = layout.total_dim();
        &self.mu[a * total + off..a * total + off + dim]
    }

    pub fn kind_sigma<'a>(&'a self, layout: &AttributeLayout, a: usize, kind: AttributeKind) -> &'a [f64] {
        let (off, dim) = layout.range(kind);
        let total = layout.total_dim();
        &self.sigma[a * total + off..a * total + off + dim]
    }

    pub fn kind_q(&self, layout: &AttributeLayout, a: usize, kind: AttributeKind) -> f64 {
        let idx = KIND_ORDER.iter().position(|k| *k == kind).unwrap();
        self.q[a * layout.kind_count() + idx]
    }
}

/// Tape handles for the hyperprior output of a batch.
pub struct HyperTape {
    pub mu: Id,
    pub sigma: Id,
    pub sigma_raw: Id,
    /// (n, kind_count), activated.
    pub q: Id,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperprior {
    pub net: Mlp,
    pub l_pe: usize,
    pub layout: AttributeLayout,
}

impl Hyperprior {
    pub fn new(
        store: &mut ParamStore,
        layout: AttributeLayout,
        l_pe: usize,
        hidden: usize,
        rng: &mut impl rand::Rng,
    ) -> Hyperprior {
        let total = layout.total_dim();
        let out_dim = 2 * total + layout.kind_count();
        let net = Mlp::new(
            store,
            "prior.hyper",
            &[pe_dim(l_pe), hidden, hidden, out_dim],
            ParamGroup::Nets,
            rng,
        );
        // Bias the head so initial steps are small and priors are wide.
        let (_, bid) = *net.layers.last().unwrap();
        let bias = &mut store.get_mut(bid).data;
        for (k, kind) in KIND_ORDER.iter().enumerate().take(layout.kind_count()) {
            let cap = kind_q_cap(*kind);
            let q0 = (0.1 * cap).max(2.0 * Q_FLOOR);
            bias[2 * total + k] = q_activation_inv(q0, cap);
        }
        Hyperprior { net, l_pe, layout }
    }

    /// Plain forward on positionally encoded inputs, (n, pe_dim) row-major.
    pub fn params_plain(&self, store: &ParamStore, pe: &[f64], n: usize) -> HyperOut {
        let raw = self.net.forward_plain(store, pe, n);
        let total = self.layout.total_dim();
        let kinds = self.layout.kind_count();
        let out_dim = 2 * total + kinds;
        let mut mu = vec![0.0; n * total];
        let mut sigma = vec![0.0; n * total];
        let mut sigma_raw = vec![0.0; n * total];
        let mut q = vec![0.0; n * kinds];
        for a in 0..n {
            let row = &raw[a * out_dim..(a + 1) * out_dim];
            mu[a * total..(a + 1) * total].copy_from_slice(&row[..total]);
            for j in 0..total {
                sigma_raw[a * total + j] = row[total + j];
                sigma[a * total + j] = SIGMA_FLOOR + softplus(row[total + j]);
            }
            for (k, kind) in KIND_ORDER.iter().enumerate().take(kinds) {
                q[a * kinds + k] = q_activation(row[2 * total + k], kind_q_cap(*kind));
            }
        }
        HyperOut { mu, sigma, sigma_raw, q, n }
    }

    /// Tape forward on a constant encoded-position block.
    pub fn params_tape(&self, tape: &mut Tape, binding: &LeafBinding, pe: Id) -> HyperTape {
        let total = self.layout.total_dim();
        let kinds = self.layout.kind_count();
        let raw = self.net.forward_tape(tape, binding, pe);
        let mu = tape.slice_cols(raw, 0, total);
        let sigma_raw = tape.slice_cols(raw, total, 2 * total);
        let sp = tape.softplus(sigma_raw);
        let sigma = tape.add_scalar(sp, SIGMA_FLOOR);
        let q_raw = tape.slice_cols(raw, 2 * total, 2 * total + kinds);
        let q_sig = tape.sigmoid(q_raw);
        let caps: Vec<f64> = KIND_ORDER.iter().take(kinds).map(|k| kind_q_cap(*k)).collect();
        let caps_row = tape.constant(caps, (1, kinds));
        let q_scaled = tape.mul_row(q_sig, caps_row);
        let q = tape.add_scalar(q_scaled, Q_FLOOR);
        HyperTape { mu, sigma, sigma_raw, q }
    }
}

// ---------------------------------------------------------------------------
// Channel-wise autoregressive refinement for the anchor feature
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelAr {
    /// Net for chunk k (k >= 1) lives at index k-1. Chunk 0 uses the
    /// hyperprior parameters directly (empty context).
    pub nets: Vec<Mlp>,
    pub n_chunks: usize,
    pub chunk: usize,
    pub feature_dim: usize,
}

impl ChannelAr {
    pub fn new(
        store: &mut ParamStore,
        feature_dim: usize,
        n_chunks: usize,
        hidden: usize,
        rng: &mut impl rand::Rng,
    ) -> ChannelAr {
        assert!(n_chunks >= 1 && feature_dim % n_chunks == 0);
        let chunk = feature_dim / n_chunks;
        let mut nets = Vec::new();
        for k in 1..n_chunks {
            let in_dim = 2 * feature_dim + k * chunk;
            nets.push(Mlp::new(
                store,
                &format!("prior.ar{k}"),
                &[in_dim, hidden, 2 * chunk],
                ParamGroup::Nets,
                rng,
            ));
        }
        ChannelAr { nets, n_chunks, chunk, feature_dim }
    }

    /// Refined (mu, sigma) for chunk k of one anchor. `decoded_prev` holds the
    /// dequantized chunks 0..k (k * chunk values).
    pub fn chunk_params_plain(
        &self,
        store: &ParamStore,
        k: usize,
        hyper_mu_f: &[f64],
        hyper_sigma_raw_f: &[f64],
        hyper_sigma_f: &[f64],
        decoded_prev: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if k >= self.n_chunks {
            return Err(Error::ChunkOutOfRange(k, self.n_chunks));
        }
        let c = self.chunk;
        let r = k * c..(k + 1) * c;
        if k == 0 {
            return Ok((hyper_mu_f[r.clone()].to_vec(), hyper_sigma_f[r].to_vec()));
        }
        assert_eq!(decoded_prev.len(), k * c);
        let mut input = Vec::with_capacity(2 * self.feature_dim + k * c);
        input.extend_from_slice(hyper_mu_f);
        input.extend_from_slice(hyper_sigma_f);
        input.extend_from_slice(decoded_prev);
        let out = self.nets[k - 1].forward_plain(store, &input, 1);
        let mut mu = Vec::with_capacity(c);
        let mut sigma = Vec::with_capacity(c);
        for j in 0..c {
            mu.push(hyper_mu_f[k * c + j] + out[j]);
            sigma.push(SIGMA_FLOOR + softplus(hyper_sigma_raw_f[k * c + j] + out[c + j]));
        }
        Ok((mu, sigma))
    }

    /// Tape version for a batch: inputs are (n, feature_dim) blocks of the
    /// hyperprior output and the (n, k*chunk) decoded context.
    pub fn chunk_params_tape(
        &self,
        tape: &mut Tape,
        binding: &LeafBinding,
        k: usize,
        hyper_mu_f: Id,
        hyper_sigma_raw_f: Id,
        hyper_sigma_f: Id,
        decoded_prev: Option<Id>,
    ) -> Result<(Id, Id)> {
        if k >= self.n_chunks {
            return Err(Error::ChunkOutOfRange(k, self.n_chunks));
        }
        let c = self.chunk;
        let mu_k = tape.slice_cols(hyper_mu_f, k * c, (k + 1) * c);
        if k == 0 {
            let sigma_k = tape.slice_cols(hyper_sigma_f, 0, c);
            return Ok((mu_k, sigma_k));
        }
        let prev = decoded_prev.expect("context required for k >= 1");
        let input = tape.concat_cols(&[hyper_mu_f, hyper_sigma_f, prev]);
        let out = self.nets[k - 1].forward_tape(tape, binding, input);
        let dmu = tape.slice_cols(out, 0, c);
        let dsig = tape.slice_cols(out, c, 2 * c);
        let mu = tape.add(mu_k, dmu);
        let sig_raw_k = tape.slice_cols(hyper_sigma_raw_f, k * c, (k + 1) * c);
        let sig_sum = tape.add(sig_raw_k, dsig);
        let sp = tape.softplus(sig_sum);
        let sigma = tape.add_scalar(sp, SIGMA_FLOOR);
        Ok((mu, sigma))
    }
}

// ---------------------------------------------------------------------------
// Factorized prior baseline
// ---------------------------------------------------------------------------

/// Per-component learned univariate CDF: a three-unit monotone network
/// (positive weights, bounded skew nonlinearity, sigmoid head) with one
/// learned quantization step per attribute kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorizedPrior {
    pub h1: ParamId,
    pub b1: ParamId,
    pub a1: ParamId,
    pub h2: ParamId,
    pub b2: ParamId,
    pub a2: ParamId,
    pub h3: ParamId,
    pub b3: ParamId,
    /// (kind_count, 1) raw steps.
    pub q_raw: ParamId,
    pub n_comp: usize,
}

impl FactorizedPrior {
    pub fn new(store: &mut ParamStore, layout: &AttributeLayout) -> FactorizedPrior {
        let n = layout.total_dim();
        let w1 = softplus_inv(1.0);
        let w2 = softplus_inv(1.0 / 3.0);
        let mut b1 = Vec::with_capacity(n * 3);
        for _ in 0..n {
            b1.extend_from_slice(&[-0.5, 0.0, 0.5]);
        }
        let add = |store: &mut ParamStore, name: &str, shape: (usize, usize), v: Vec<f64>| {
            store.add(format!("prior.fm.{name}"), shape, v, ParamGroup::Nets)
        };
        FactorizedPrior {
            h1: add(store, "h1", (n, 3), vec![w1; n * 3]),
            b1: add(store, "b1", (n, 3), b1),
            a1: add(store, "a1", (n, 3), vec![0.0; n * 3]),
            h2: add(store, "h2", (n, 9), vec![w2; n * 9]),
            b2: add(store, "b2", (n, 3), vec![0.0; n * 3]),
            a2: add(store, "a2", (n, 3), vec![0.0; n * 3]),
            h3: add(store, "h3", (n, 3), vec![w2; n * 3]),
            b3: add(store, "b3", (n, 1), vec![0.0; n]),
            q_raw: add(
                store,
                "q",
                (layout.kind_count(), 1),
                KIND_ORDER
                    .iter()
                    .take(layout.kind_count())
                    .map(|k| {
                        let cap = kind_q_cap(*k);
                        q_activation_inv((0.1 * cap).max(2.0 * Q_FLOOR), cap)
                    })
                    .collect(),
            ),
            n_comp: n,
        }
    }

    pub fn q_for_kind(&self, store: &ParamStore, kind_idx: usize) -> f64 {
        q_activation(
            store.get(self.q_raw).data[kind_idx],
            kind_q_cap(KIND_ORDER[kind_idx]),
        )
    }

    /// CDF value for component `comp` at x (plain path).
    pub fn cdf_plain(&self, store: &ParamStore, comp: usize, x: f64) -> f64 {
        let g = |v: f64, a: f64| v + a.tanh() * v.tanh();
        let h1 = &store.get(self.h1).data[comp * 3..comp * 3 + 3];
        let b1 = &store.get(self.b1).data[comp * 3..comp * 3 + 3];
        let a1 = &store.get(self.a1).data[comp * 3..comp * 3 + 3];
        let mut u = [0.0; 3];
        for j in 0..3 {
            u[j] = g(softplus(h1[j]) * x + b1[j], a1[j]);
        }
        let h2 = &store.get(self.h2).data[comp * 9..comp * 9 + 9];
        let b2 = &store.get(self.b2).data[comp * 3..comp * 3 + 3];
        let a2 = &store.get(self.a2).data[comp * 3..comp * 3 + 3];
        let mut v = [0.0; 3];
        for i in 0..3 {
            let mut acc = b2[i];
            for j in 0..3 {
                acc += softplus(h2[i * 3 + j]) * u[j];
            }
            v[i] = g(acc, a2[i]);
        }
        let h3 = &store.get(self.h3).data[comp * 3..comp * 3 + 3];
        let b3 = store.get(self.b3).data[comp];
        let mut y = b3;
        for j in 0..3 {
            y += softplus(h3[j]) * v[j];
        }
        1.0 / (1.0 + (-y).exp())
    }

    /// Bin probability under the learned CDF, floored.
    pub fn likelihood_plain(&self, store: &ParamStore, comp: usize, a_hat: f64, q: f64) -> f64 {
        let p = self.cdf_plain(store, comp, a_hat + 0.5 * q) - self.cdf_plain(store, comp, a_hat - 0.5 * q);
        p.max(PROB_FLOOR)
    }

    /// Tape CDF for one component over an (n, 1) value column.
    pub fn cdf_tape(&self, tape: &mut Tape, binding: &LeafBinding, comp: usize, x: Id) -> Id {
        let select = |tape: &mut Tape, pid: ParamId| -> Id {
            let leaf = binding.leaf(pid);
            tape.select_rows(leaf, &[comp])
        };
        let h1 = select(tape, self.h1);
        let h1p = tape.softplus(h1);
        let b1 = select(tape, self.b1);
        let a1 = select(tape, self.a1);
        let u_lin0 = tape.matmul(x, h1p); // (n,1) x (1,3)
        let u_lin = tape.add_row(u_lin0, b1);
        let u = monotone_nonlin(tape, u_lin, a1);

        let h2 = select(tape, self.h2);
        let h2p = tape.softplus(h2);
        let h2m = tape.reshape(h2p, 3, 3);
        let b2 = select(tape, self.b2);
        let a2 = select(tape, self.a2);
        // v = u * H2^T: (n,3) x (3,3) using the row-major (i,j) layout where
        // out_i = sum_j H2[i*3+j] u_j. Transpose by building the matmul on
        // the transposed reshape.
        let v_lin0 = matmul_transposed(tape, u, h2m);
        let v_lin = tape.add_row(v_lin0, b2);
        let v = monotone_nonlin(tape, v_lin, a2);

        let h3 = select(tape, self.h3);
        let h3p = tape.softplus(h3);
        let b3 = select(tape, self.b3);
        let prod = tape.mul_row(v, h3p);
        let y0 = row_sum(tape, prod);
        let y = tape.add_row(y0, b3);
        tape.sigmoid(y)
    }

    /// Tape rate of an (n,) column of values for one component.
    pub fn rate_bits_tape(
        &self,
        tape: &mut Tape,
        binding: &LeafBinding,
        comp: usize,
        values: Id,
        q: Id,
    ) -> Id {
        let half_q = tape.mul_scalar(q, 0.5);
        let n = tape.shape(values).0;
        let half_col = tape.tile_cols(half_q, 1); // (1,1)
        let half_rep = tape.select_rows(half_col, &vec![0; n]);
        let hi_x = tape.add(values, half_rep);
        let neg = tape.neg(half_rep);
        let lo_x = tape.add(values, neg);
        let hi = self.cdf_tape(tape, binding, comp, hi_x);
        let lo = self.cdf_tape(tape, binding, comp, lo_x);
        let p = tape.sub(hi, lo);
        let p = tape.clamp_min(p, PROB_FLOOR);
        let lnp = tape.ln(p);
        let s = tape.sum_all(lnp);
        tape.mul_scalar(s, -1.0 / LN2)
    }
}

/// g(x) = x + tanh(a) ⊙ tanh(x), monotone for any a.
fn monotone_nonlin(tape: &mut Tape, x: Id, a_row: Id) -> Id {
    let ta = tape.tanh(a_row);
    let tx = tape.tanh(x);
    let skew = tape.mul_row(tx, ta);
    tape.add(x, skew)
}

/// (n,3) x (3,3)^T via explicit transpose-free composition.
fn matmul_transposed(tape: &mut Tape, x: Id, w: Id) -> Id {
    // Build W^T by column slicing and concatenation of reshaped rows.
    let c0 = tape.slice_cols(w, 0, 1);
    let c1 = tape.slice_cols(w, 1, 2);
    let c2 = tape.slice_cols(w, 2, 3);
    let r0 = tape.reshape(c0, 1, 3);
    let r1 = tape.reshape(c1, 1, 3);
    let r2 = tape.reshape(c2, 1, 3);
    let mut rows = tape.concat_cols(&[r0, r1, r2]);
    rows = tape.reshape(rows, 3, 3);
    tape.matmul(x, rows)
}

/// Row-wise sum of an (n, d) block -> (n, 1).
fn row_sum(tape: &mut Tape, x: Id) -> Id {
    let (_, d) = tape.shape(x);
    let ones = tape.constant(vec![1.0; d], (d, 1));
    tape.matmul(x, ones)
}
