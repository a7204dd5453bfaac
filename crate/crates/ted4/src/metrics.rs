//! Image quality metrics: PSNR and SSIM, with SSIM/L1 tape ops for the
//! distortion loss.
//!
//! SSIM uses the standard 11x11 Gaussian window (sigma 1.5), stabilizers
//! C1=0.01^2, C2=0.03^2 on a unit dynamic range, valid-mode windows, and is
//! averaged over the three channels.

use crate::error::{Error, Result};
use crate::img::Image;
use crate::tape::{CustomOp, Shape};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over unit range, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let dy = i as f64 - half;
            let dx = j as f64 - half;
            w.push((-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

struct WindowStats {
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

fn window_stats(
    a: &[f64],
    b: &[f64],
    width: usize,
    x0: usize,
    y0: usize,
    ch: usize,
    win: &[f64],
) -> WindowStats {
    let mut mu_a = 0.0;
    let mut mu_b = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    let mut ab = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let w = win[i * SSIM_WINDOW + j];
            let idx = ((y0 + i) * width + (x0 + j)) * 3 + ch;
            let va = a[idx];
            let vb = b[idx];
            mu_a += w * va;
            mu_b += w * vb;
            aa += w * va * va;
            bb += w * vb * vb;
            ab += w * va * vb;
        }
    }
    WindowStats {
        mu_a,
        mu_b,
        var_a: aa - mu_a * mu_a,
        var_b: bb - mu_b * mu_b,
        cov: ab - mu_a * mu_b,
    }
}

fn local_ssim(s: &WindowStats) -> f64 {
    let a1 = 2.0 * s.mu_a * s.mu_b + C1;
    let a2 = 2.0 * s.cov + C2;
    let b1 = s.mu_a * s.mu_a + s.mu_b * s.mu_b + C1;
    let b2 = s.var_a + s.var_b + C2;
    (a1 * a2) / (b1 * b2)
}

fn ssim_raw(a: &[f64], b: &[f64], width: usize, height: usize) -> f64 {
    let win = gaussian_window();
    let (wx, wy) = (width - SSIM_WINDOW + 1, height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..3 {
        for y0 in 0..wy {
            for x0 in 0..wx {
                total += local_ssim(&window_stats(a, b, width, x0, y0, ch, &win));
            }
        }
    }
    total / (3 * wx * wy) as f64
}

/// Mean local SSIM; errors if the images differ in shape or are smaller than
/// the 11x11 window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} smaller than the {}x{} SSIM window",
            a.width, a.height, SSIM_WINDOW, SSIM_WINDOW
        )));
    }
    Ok(ssim_raw(&a.data, &b.data, a.width, a.height))
}

/// Gradient of `ssim(a, b)` with respect to image `a` (flat HW*3 layout).
pub fn ssim_backward(a: &[f64], b: &[f64], width: usize, height: usize) -> Vec<f64> {
    let win = gaussian_window();
    let (wx, wy) = (width - SSIM_WINDOW + 1, height - SSIM_WINDOW + 1);
    let scale = 1.0 / (3 * wx * wy) as f64;
    let mut grad = vec![0.0; a.len()];
    for ch in 0..3 {
        for y0 in 0..wy {
            for x0 in 0..wx {
                let s = window_stats(a, b, width, x0, y0, ch, &win);
                let a1 = 2.0 * s.mu_a * s.mu_b + C1;
                let a2 = 2.0 * s.cov + C2;
                let b1 = s.mu_a * s.mu_a + s.mu_b * s.mu_b + C1;
                let b2 = s.var_a + s.var_b + C2;
                let d = b1 * b2;
                // Partials of the local score w.r.t. (mu_a, var_a, cov).
                let ds_dmu = (2.0 * s.mu_b * a2) / d - a1 * a2 * (2.0 * s.mu_a * b2) / (d * d);
                let ds_dvar = -a1 * a2 * b1 / (d * d);
                let ds_dcov = 2.0 * a1 / d;
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let w = win[i * SSIM_WINDOW + j];
                        let idx = ((y0 + i) * width + (x0 + j)) * 3 + ch;
                        let va = a[idx];
                        let vb = b[idx];
                        let dmu = w;
                        let dvar = 2.0 * w * (va - s.mu_a);
                        let dcov = w * (vb - s.mu_b);
                        grad[idx] +=
                            scale * (ds_dmu * dmu + ds_dvar * dvar + ds_dcov * dcov);
                    }
                }
            }
        }
    }
    grad
}

/// Tape op: SSIM of the input image against a fixed target. Output (1,1).
pub struct SsimOp {
    pub target: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

impl CustomOp for SsimOp {
    fn name(&self) -> &'static str {
        "ssim"
    }

    fn forward(&self, inputs: &[(&[f64], Shape)]) -> (Vec<f64>, Shape) {
        let v = ssim_raw(inputs[0].0, &self.target, self.width, self.height);
        (vec![v], (1, 1))
    }

    fn backward(
        &self,
        inputs: &[(&[f64], Shape)],
        _output: (&[f64], Shape),
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let mut g = ssim_backward(inputs[0].0, &self.target, self.width, self.height);
        for v in &mut g {
            *v *= grad_out[0];
        }
        vec![Some(g)]
    }
}

/// Tape op: mean absolute difference against a fixed target. Output (1,1).
pub struct L1Op {
    pub target: Vec<f64>,
}

impl CustomOp for L1Op {
    fn name(&self) -> &'static str {
        "l1"
    }

    fn forward(&self, inputs: &[(&[f64], Shape)]) -> (Vec<f64>, Shape) {
        let a = inputs[0].0;
        let v = a
            .iter()
            .zip(&self.target)
            .map(|(x, t)| (x - t).abs())
            .sum::<f64>()
            / a.len() as f64;
        (vec![v], (1, 1))
    }

    fn backward(
        &self,
        inputs: &[(&[f64], Shape)],
        _output: (&[f64], Shape),
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let a = inputs[0].0;
        let n = a.len() as f64;
        let g = a
            .iter()
            .zip(&self.target)
            .map(|(x, t)| grad_out[0] * (x - t).signum() / n)
            .collect();
        vec![Some(g)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern_image(w: usize, h: usize, f: impl Fn(usize, usize, usize) -> f64) -> Image {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(x, y, [f(x, y, 0), f(x, y, 1), f(x, y, 2)]);
            }
        }
        img
    }

    #[test]
    fn psnr_of_identical_images_is_capped() {
        let a = pattern_image(12, 12, |x, y, c| ((x + y + c) % 7) as f64 / 7.0);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn psnr_of_black_vs_white_is_zero() {
        let a = Image::filled(8, 8, [0.0; 3]);
        let b = Image::filled(8, 8, [1.0; 3]);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn psnr_of_mse_hundredth_is_twenty_db() {
        let a = Image::filled(8, 8, [0.0; 3]);
        let b = Image::filled(8, 8, [0.1; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_shape_mismatch_errors() {
        let a = Image::new(8, 8);
        let b = Image::new(8, 9);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = pattern_image(16, 16, |x, y, c| ((x * 3 + y * 5 + c) % 11) as f64 / 11.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_negated_image_is_negative() {
        let a = pattern_image(16, 16, |x, y, _| 0.5 + 0.4 * (((x + y) % 2) as f64 - 0.5));
        let b = pattern_image(16, 16, |x, y, _| 0.5 - 0.4 * (((x + y) % 2) as f64 - 0.5));
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_images_below_window_size() {
        let a = Image::new(10, 16);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn ssim_matches_naive_sliding_window_oracle() {
        // Independent oracle: direct per-window accumulation written as
        // literally as possible, no shared helpers.
        let a = pattern_image(16, 16, |x, y, c| {
            (((x * 7 + y * 13 + c * 29) % 23) as f64) / 23.0
        });
        let b = pattern_image(16, 16, |x, y, c| {
            (((x * 11 + y * 3 + c * 17) % 19) as f64) / 19.0
        });

        // Build the window the same way the definition states it.
        let mut win = [0.0f64; 121];
        for i in 0..11 {
            for j in 0..11 {
                let dy = i as f64 - 5.0;
                let dx = j as f64 - 5.0;
                win[i * 11 + j] = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            }
        }
        let wsum: f64 = win.iter().sum();

        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..3 {
            for y0 in 0..6 {
                for x0 in 0..6 {
                    let mut mu_a = 0.0;
                    let mut mu_b = 0.0;
                    for i in 0..11 {
                        for j in 0..11 {
                            let w = win[i * 11 + j] / wsum;
                            mu_a += w * a.pixel(x0 + j, y0 + i)[ch];
                            mu_b += w * b.pixel(x0 + j, y0 + i)[ch];
                        }
                    }
                    let mut var_a = 0.0;
                    let mut var_b = 0.0;
                    let mut cov = 0.0;
                    for i in 0..11 {
                        for j in 0..11 {
                            let w = win[i * 11 + j] / wsum;
                            let da = a.pixel(x0 + j, y0 + i)[ch] - mu_a;
                            let db = b.pixel(x0 + j, y0 + i)[ch] - mu_b;
                            var_a += w * da * da;
                            var_b += w * db * db;
                            cov += w * da * db;
                        }
                    }
                    let c1 = 0.0001;
                    let c2 = 0.0009;
                    total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                    count += 1;
                }
            }
        }
        let oracle = total / count as f64;
        let got = ssim(&a, &b).unwrap();
        assert!(
            (got - oracle).abs() < 1e-6,
            "ssim {got} vs oracle {oracle}"
        );
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let a = pattern_image(13, 13, |x, y, c| {
            0.2 + 0.6 * ((x as f64 * 0.37 + y as f64 * 0.61 + c as f64 * 0.17).sin() * 0.5 + 0.5)
        });
        let b = pattern_image(13, 13, |x, y, c| {
            0.3 + 0.5 * ((x as f64 * 0.21 + y as f64 * 0.43 + c as f64 * 0.55).cos() * 0.5 + 0.5)
        });
        let grad = ssim_backward(&a.data, &b.data, 13, 13);
        let eps = 1e-6;
        // Sample a subset of pixels.
        for idx in (0..a.data.len()).step_by(37) {
            let mut ap = a.clone();
            ap.data[idx] += eps;
            let mut am = a.clone();
            am.data[idx] -= eps;
            let fd = (ssim(&ap, &b).unwrap() - ssim(&am, &b).unwrap()) / (2.0 * eps);
            let an = grad[idx];
            assert!(
                (an - fd).abs() < 1e-6 * an.abs().max(fd.abs()).max(1e-3),
                "pixel {idx}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn l1_op_value_and_gradient() {
        use crate::tape::Tape;
        let target = vec![0.5, 0.25, 0.75, 0.0];
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.6, 0.2, 0.75, 0.4], (4, 1));
        let op = Box::new(L1Op { target: target.clone() });
        let l = tape.custom(op, &[x]);
        let expect = (0.1 + 0.05 + 0.0 + 0.4) / 4.0;
        assert!((tape.scalar_value(l) - expect).abs() < 1e-12);
        let grads = tape.backward(l);
        let g = grads.get(x).unwrap();
        assert_eq!(g[0], 0.25);
        assert_eq!(g[1], -0.25);
        assert_eq!(g[3], 0.25);
    }
}
