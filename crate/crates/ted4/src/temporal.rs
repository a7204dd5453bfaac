//! Temporal activation windows, time-aware opacity, visibility-based window
//! initialization, time-aware pruning, and duration analytics.

use serde::{Deserialize, Serialize};

use crate::math::Vec3;
use crate::scene::Camera;
use crate::tape::{CustomOp, Shape};

/// Lower bound on transition widths.
pub const WIDTH_FLOOR: f64 = 1e-3;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0);
    // ln(e^y - 1), stable form.
    y + (-(-y).exp_m1()).ln()
}

/// Derived activation window: a_s <= a_f, widths >= WIDTH_FLOOR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationParams {
    pub a_s: f64,
    pub b_s: f64,
    pub a_f: f64,
    pub b_f: f64,
}

impl ActivationParams {
    /// Map raw storage (a_s, delta, w_s, w_f) to the derived window.
    pub fn from_raw(raw: &[f64]) -> ActivationParams {
        ActivationParams {
            a_s: raw[0],
            b_s: WIDTH_FLOOR + softplus(raw[2]),
            a_f: raw[0] + softplus(raw[1]),
            b_f: WIDTH_FLOOR + softplus(raw[3]),
        }
    }

    pub fn duration(&self) -> f64 {
        self.a_f - self.a_s
    }
}

/// Piecewise temporal activation: Gaussian ramps outside [a_s, a_f], one inside.
pub fn activation(p: &ActivationParams, t: f64) -> f64 {
    if t < p.a_s {
        let z = (t - p.a_s) / p.b_s;
        (-z * z).exp()
    } else if t > p.a_f {
        let z = (t - p.a_f) / p.b_f;
        (-z * z).exp()
    } else {
        1.0
    }
}

/// Time-aware opacity: alpha modulated by the activation value.
pub fn time_aware_opacity(alpha: f64, tau_t: f64) -> f64 {
    alpha * tau_t
}

/// Tape op evaluating the activation per anchor at a fixed time.
/// Inputs: a_s, b_s, a_f, b_f as (n,1) columns. Output: (n,1).
pub struct ActivationOp {
    pub t: f64,
}

impl CustomOp for ActivationOp {
    fn name(&self) -> &'static str {
        "temporal_activation"
    }

    fn forward(&self, inputs: &[(&[f64], Shape)]) -> (Vec<f64>, Shape) {
        let (a_s, sh) = inputs[0];
        let b_s = inputs[1].0;
        let a_f = inputs[2].0;
        let b_f = inputs[3].0;
        let out = (0..a_s.len())
            .map(|i| {
                activation(
                    &ActivationParams { a_s: a_s[i], b_s: b_s[i], a_f: a_f[i], b_f: b_f[i] },
                    self.t,
                )
            })
            .collect();
        (out, sh)
    }

    fn backward(
        &self,
        inputs: &[(&[f64], Shape)],
        output: (&[f64], Shape),
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let a_s = inputs[0].0;
        let b_s = inputs[1].0;
        let a_f = inputs[2].0;
        let b_f = inputs[3].0;
        let tau = output.0;
        let n = a_s.len();
        let mut d_as = vec![0.0; n];
        let mut d_bs = vec![0.0; n];
        let mut d_af = vec![0.0; n];
        let mut d_bf = vec![0.0; n];
        for i in 0..n {
            let g = grad_out[i];
            let t = self.t;
            if t < a_s[i] {
                // tau = exp(-((t-a_s)/b_s)^2)
                let u = t - a_s[i];
                d_as[i] = g * tau[i] * 2.0 * u / (b_s[i] * b_s[i]);
                d_bs[i] = g * tau[i] * 2.0 * u * u / (b_s[i] * b_s[i] * b_s[i]);
            } else if t > a_f[i] {
                let u = t - a_f[i];
                d_af[i] = g * tau[i] * 2.0 * u / (b_f[i] * b_f[i]);
                d_bf[i] = g * tau[i] * 2.0 * u * u / (b_f[i] * b_f[i] * b_f[i]);
            }
            // Inside the window tau == 1 with zero gradient.
        }
        vec![Some(d_as), Some(d_bs), Some(d_af), Some(d_bf)]
    }
}

/// Result of visibility-based window initialization.
pub struct VisibilityInit {
    /// Raw (a_s, delta, w_s, w_f) per anchor.
    pub tau_raw: Vec<[f64; 4]>,
    /// Anchors that never entered any frustum; given a full window and
    /// flagged for pruning review.
    pub never_visible: Vec<bool>,
}

/// Initialize windows from the first/last timestamps at which each anchor's
/// (deformed) position falls inside any camera frustum.
///
/// `positions_per_time[ti][a]` is anchor a's position at `timestamps[ti]`.
pub fn visibility_windows(
    positions_per_time: &[Vec<Vec3>],
    cameras: &[Camera],
    timestamps: &[f64],
    default_width: f64,
) -> VisibilityInit {
    assert_eq!(positions_per_time.len(), timestamps.len());
    let n = positions_per_time.first().map_or(0, |v| v.len());
    let w_raw = softplus_inv(default_width - WIDTH_FLOOR);
    let mut tau_raw = Vec::with_capacity(n);
    let mut never = Vec::with_capacity(n);
    for a in 0..n {
        let mut first: Option<f64> = None;
        let mut last: Option<f64> = None;
        for (ti, t) in timestamps.iter().enumerate() {
            let p = positions_per_time[ti][a];
            if cameras.iter().any(|c| c.in_frustum(p)) {
                if first.is_none() {
                    first = Some(*t);
                }
                last = Some(*t);
            }
        }
        let (a_s, a_f, seen) = match (first, last) {
            (Some(f), Some(l)) => (f, l, true),
            _ => (0.0, 1.0, false),
        };
        // Keep the window strictly ordered; a single visible frame still
        // gets a small positive duration.
        let delta = softplus_inv((a_f - a_s).max(0.01));
        tau_raw.push([a_s, delta, w_raw, w_raw]);
        never.push(!seen);
    }
    VisibilityInit { tau_raw, never_visible: never }
}

/// Keep flags for time-aware pruning. An anchor survives if the max over the
/// sampled times of its collective time-aware opacity reaches the threshold.
/// `alpha_sums[a]` is the anchor's summed (mask-gated) primitive opacity.
pub fn prune_keep_flags(
    windows: &[ActivationParams],
    alpha_sums: &[f64],
    threshold: f64,
    t_samples: &[f64],
) -> Vec<bool> {
    assert!(!t_samples.is_empty(), "t_samples must be non-empty");
    assert_eq!(windows.len(), alpha_sums.len());
    windows
        .iter()
        .zip(alpha_sums)
        .map(|(w, s)| {
            let max_tau = t_samples
                .iter()
                .map(|t| activation(w, *t))
                .fold(0.0f64, f64::max);
            s * max_tau >= threshold
        })
        .collect()
}

/// Histogram of activation durations for dynamic anchors, binned as in the
/// duration analytics: short <= 0.2 < medium < 0.8 <= long.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DurationHistogram {
    pub short: usize,
    pub medium: usize,
    pub long: usize,
}

impl DurationHistogram {
    pub fn total(&self) -> usize {
        self.short + self.medium + self.long
    }
}

/// Bin durations of dynamic anchors only.
pub fn duration_histogram(windows: &[ActivationParams], dynamic: &[bool]) -> DurationHistogram {
    assert_eq!(windows.len(), dynamic.len());
    let mut h = DurationHistogram::default();
    for (w, dynamic) in windows.iter().zip(dynamic) {
        if !dynamic {
            continue;
        }
        let d = w.duration();
        if d <= 0.2 {
            h.short += 1;
        } else if d < 0.8 {
            h.medium += 1;
        } else {
            h.long += 1;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Camera;
    use crate::tape::Tape;

    fn window(a_s: f64, b_s: f64, a_f: f64, b_f: f64) -> ActivationParams {
        ActivationParams { a_s, b_s, a_f, b_f }
    }

    #[test]
    fn activation_is_one_inside_window() {
        let w = window(0.3, 0.05, 0.7, 0.05);
        for t in [0.3, 0.4, 0.55, 0.7] {
            assert_eq!(activation(&w, t), 1.0);
        }
    }

    #[test]
    fn activation_at_one_width_before_start() {
        let w = window(0.5, 0.1, 0.9, 0.1);
        let v = activation(&w, 0.4);
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn full_window_is_always_on() {
        let w = window(0.0, 0.05, 1.0, 0.05);
        for i in 0..=20 {
            assert_eq!(activation(&w, i as f64 / 20.0), 1.0);
        }
    }

    #[test]
    fn activation_is_continuous_at_edges() {
        let w = window(0.4, 0.07, 0.6, 0.03);
        let eps = 1e-9;
        assert!((activation(&w, 0.4 - eps) - 1.0).abs() < 1e-12);
        assert!((activation(&w, 0.6 + eps) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn activation_is_bounded_and_monotone_away_from_window() {
        let w = window(0.4, 0.05, 0.6, 0.08);
        let mut prev = activation(&w, 0.4);
        let mut t = 0.4;
        while t > 0.0 {
            let v = activation(&w, t);
            assert!(v > 0.0 && v <= 1.0);
            assert!(v <= prev + 1e-15);
            prev = v;
            t -= 0.01;
        }
        prev = activation(&w, 0.6);
        t = 0.6;
        while t < 1.0 {
            let v = activation(&w, t);
            assert!(v > 0.0 && v <= 1.0);
            assert!(v <= prev + 1e-15);
            prev = v;
            t += 0.01;
        }
    }

    #[test]
    fn opacity_modulation_is_a_plain_product() {
        assert_eq!(time_aware_opacity(0.8, 1.0), 0.8);
        assert_eq!(time_aware_opacity(0.8, 0.0), 0.0);
        assert!((time_aware_opacity(0.8, 0.25) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn raw_parameterization_keeps_order_and_floors() {
        let p = ActivationParams::from_raw(&[0.3, -20.0, -50.0, -50.0]);
        assert!(p.a_f >= p.a_s);
        assert!(p.b_s >= WIDTH_FLOOR && p.b_f >= WIDTH_FLOOR);
        let q = ActivationParams::from_raw(&full_duration_raw());
        assert!((q.a_s - 0.0).abs() < 1e-12);
        assert!((q.a_f - 1.0).abs() < 1e-12);
        assert!((q.b_s - 0.05).abs() < 1e-12);
    }

    fn full_duration_raw() -> [f64; 4] {
        crate::anchor::full_duration_tau_raw()
    }

    #[test]
    fn softplus_inv_roundtrips() {
        for y in [1e-3, 0.05, 0.3, 1.0, 5.0, 20.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        // Away from the window edges the gradient w.r.t. all four params
        // matches central differences.
        let cases = [
            (0.2, [0.5, 0.1, 0.8, 0.2]), // before window
            (0.95, [0.5, 0.1, 0.8, 0.2]), // after window
            (0.6, [0.5, 0.1, 0.8, 0.2]), // inside (zero grads)
        ];
        for (t, base) in cases {
            let mut tape = Tape::new();
            let ids: Vec<_> = base.iter().map(|v| tape.leaf(vec![*v], (1, 1))).collect();
            let op = Box::new(ActivationOp { t });
            let out = tape.custom(op, &ids);
            let loss = tape.sum_all(out);
            let grads = tape.backward(loss);
            for pi in 0..4 {
                let eps = 1e-6;
                let eval = |delta: f64| {
                    let mut p = base;
                    p[pi] += delta;
                    activation(&window(p[0], p[1], p[2], p[3]), t)
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = grads.get(ids[pi]).map_or(0.0, |g| g[0]);
                assert!(
                    (an - fd).abs() < 1e-4 * an.abs().max(fd.abs()).max(1e-3),
                    "t={t} param {pi}: analytic {an} fd {fd}"
                );
            }
        }
    }

    fn toy_camera() -> Camera {
        Camera::look_at(
            Vec3::new(0.0, 0.0, -4.0),
            Vec3::ZERO,
            Vec3::new(0.0, 1.0, 0.0),
            32,
            32,
            35.0,
        )
    }

    #[test]
    fn always_visible_anchor_gets_full_window() {
        let cams = vec![toy_camera()];
        let timestamps: Vec<f64> = (0..5).map(|i| i as f64 / 4.0).collect();
        let positions: Vec<Vec<Vec3>> = timestamps.iter().map(|_| vec![Vec3::ZERO]).collect();
        let init = visibility_windows(&positions, &cams, &timestamps, 0.05);
        let p = ActivationParams::from_raw(&init.tau_raw[0]);
        assert_eq!(p.a_s, 0.0);
        assert!((p.a_f - 1.0).abs() < 1e-12);
        assert!(!init.never_visible[0]);
    }

    #[test]
    fn never_visible_anchor_is_flagged_with_full_window() {
        let cams = vec![toy_camera()];
        let timestamps: Vec<f64> = (0..5).map(|i| i as f64 / 4.0).collect();
        let positions: Vec<Vec<Vec3>> =
            timestamps.iter().map(|_| vec![Vec3::new(100.0, 0.0, 0.0)]).collect();
        let init = visibility_windows(&positions, &cams, &timestamps, 0.05);
        let p = ActivationParams::from_raw(&init.tau_raw[0]);
        assert_eq!((p.a_s, p.a_f.round()), (0.0, 1.0));
        assert!(init.never_visible[0]);
    }

    #[test]
    fn window_matches_brute_force_frustum_oracle() {
        // 11-frame toy sequence; the anchor is placed inside the frustum only
        // for t in {0.4, 0.5, 0.6}. Oracle: explicit projection arithmetic.
        let cam = toy_camera();
        let timestamps: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let positions: Vec<Vec<Vec3>> = timestamps
            .iter()
            .map(|t| {
                let inside = (0.4..=0.6).contains(t);
                vec![if inside { Vec3::ZERO } else { Vec3::new(50.0, 0.0, 0.0) }]
            })
            .collect();

        // Independent oracle over the same data.
        let mut seen: Vec<f64> = Vec::new();
        for (ti, t) in timestamps.iter().enumerate() {
            let p = positions[ti][0];
            let pc = cam.rotation.mul_vec(p) + cam.translation;
            if pc.z > 0.01 {
                let u = cam.fx * pc.x / pc.z + cam.cx;
                let v = cam.fy * pc.y / pc.z + cam.cy;
                if u >= 0.0 && u < cam.width as f64 && v >= 0.0 && v < cam.height as f64 {
                    seen.push(*t);
                }
            }
        }
        let (oracle_s, oracle_f) = (seen[0], *seen.last().unwrap());
        assert_eq!((oracle_s, oracle_f), (0.4, 0.6));

        let init = visibility_windows(&positions, &[cam], &timestamps, 0.05);
        let p = ActivationParams::from_raw(&init.tau_raw[0]);
        assert!((p.a_s - oracle_s).abs() < 1e-12);
        assert!((p.a_f - oracle_f).abs() < 1e-9);
    }

    #[test]
    fn prune_removes_everything_when_opacity_is_zero() {
        let windows = vec![window(0.0, 0.05, 1.0, 0.05); 3];
        let sums = vec![0.0; 3];
        let keep = prune_keep_flags(&windows, &sums, 0.005, &[0.0, 0.5, 1.0]);
        assert!(keep.iter().all(|k| !k));
    }

    #[test]
    fn prune_uses_max_over_samples() {
        // Active only around t=0.5; a single sampled t above threshold keeps it.
        let w = window(0.45, 0.001, 0.55, 0.001);
        let keep = prune_keep_flags(&[w], &[1.0], 0.5, &[0.0, 0.5, 1.0]);
        assert!(keep[0]);
        let keep = prune_keep_flags(&[w], &[1.0], 0.5, &[0.0, 1.0]);
        assert!(!keep[0]);
    }

    #[test]
    fn prune_threshold_separates_two_anchors() {
        let windows = vec![window(0.0, 0.05, 1.0, 0.05); 2];
        let sums = vec![0.3, 0.05];
        let keep = prune_keep_flags(&windows, &sums, 0.1, &[0.25, 0.75]);
        assert_eq!(keep, vec![true, false]);
    }

    #[test]
    fn prune_never_removes_above_threshold() {
        let mut rng_state = 12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        let samples: Vec<f64> = (0..8).map(|i| i as f64 / 7.0).collect();
        for _ in 0..100 {
            let w = window(next() * 0.5, 0.01 + next() * 0.2, 0.5 + next() * 0.5, 0.01 + next() * 0.2);
            let s = next();
            let keep = prune_keep_flags(&[w], &[s], 0.01, &samples);
            let exceeds = samples.iter().any(|t| s * activation(&w, *t) >= 0.01);
            assert_eq!(keep[0], exceeds);
        }
    }

    #[test]
    fn histogram_bins_full_windows_as_long() {
        let windows = vec![window(0.0, 0.05, 1.0, 0.05); 4];
        let h = duration_histogram(&windows, &[true; 4]);
        assert_eq!((h.short, h.medium, h.long), (0, 0, 4));
    }

    #[test]
    fn histogram_boundary_point_two_is_short() {
        let h = duration_histogram(&[window(0.3, 0.05, 0.5, 0.05)], &[true]);
        assert_eq!(h.short, 1);
    }

    #[test]
    fn histogram_bins_mixed_durations() {
        let windows = vec![
            window(0.0, 0.05, 0.1, 0.05),
            window(0.2, 0.05, 0.7, 0.05),
            window(0.05, 0.05, 0.95, 0.05),
        ];
        let h = duration_histogram(&windows, &[true; 3]);
        assert_eq!((h.short, h.medium, h.long), (1, 1, 1));
    }

    #[test]
    fn histogram_skips_static_anchors() {
        let windows = vec![window(0.0, 0.05, 0.1, 0.05); 2];
        let h = duration_histogram(&windows, &[true, false]);
        assert_eq!(h.total(), 1);
    }
}
