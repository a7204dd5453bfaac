//! CPU splatting rasterizer with analytic gradients.
//!
//! Each 3D Gaussian is projected to a 2D Gaussian through the perspective
//! Jacobian (EWA-style), then composited front to back with depth sorting.
//! Ties in depth break on a caller-supplied canonical key so the output does
//! not depend on input order. The backward pass recomputes the projection and
//! walks each pixel's contribution list in reverse, producing gradients for
//! means, scales, rotations, colors and opacities.

use crate::img::Image;
use crate::math::{quat_to_mat, Mat3, Vec3};
use crate::scene::{Camera, NEAR_PLANE};
use crate::tape::{CustomOp, Shape};

#[derive(Debug, Clone)]
pub struct RenderSettings {
    pub background: Vec3,
    /// Footprint truncation radius in standard deviations.
    pub cutoff_sigmas: f64,
    /// Projected covariances with a larger condition number are skipped.
    pub max_condition: f64,
    /// Per-sample opacity ceiling.
    pub alpha_clamp: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            background: Vec3::ZERO,
            cutoff_sigmas: 3.0,
            max_condition: 1e8,
            alpha_clamp: 0.999,
        }
    }
}

/// Flat primitive arrays; `order` is the canonical depth tie-break key.
pub struct PrimitiveBuffers<'a> {
    pub means: &'a [f64],     // P x 3
    pub scales: &'a [f64],    // P x 3
    pub quats: &'a [f64],     // P x 4, unit norm
    pub colors: &'a [f64],    // P x 3
    pub opacities: &'a [f64], // P
    pub order: &'a [usize],   // P
}

impl<'a> PrimitiveBuffers<'a> {
    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }
}

pub struct RenderOutput {
    pub image: Image,
    pub skipped_degenerate: usize,
}

pub struct RasterGrads {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub quats: Vec<f64>,
    pub colors: Vec<f64>,
    pub opacities: Vec<f64>,
}

struct Splat {
    prim: usize,
    depth: f64,
    u: f64,
    v: f64,
    /// Inverse 2D covariance, free components (i00, i01, i11).
    inv: [f64; 3],
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    alpha: f64,
}

const T_STOP: f64 = 1e-12;

fn project_splats(
    prims: &PrimitiveBuffers,
    camera: &Camera,
    settings: &RenderSettings,
) -> (Vec<Splat>, usize) {
    let p_count = prims.len();
    let mut splats = Vec::with_capacity(p_count);
    let mut skipped = 0usize;
    let rho_max = 0.5 * settings.cutoff_sigmas * settings.cutoff_sigmas;
    let _ = rho_max;
    for p in 0..p_count {
        let alpha = prims.opacities[p];
        if alpha <= 0.0 {
            continue; // contributes exactly nothing
        }
        let mean = Vec3::from_slice(&prims.means[p * 3..p * 3 + 3]);
        let pc = camera.to_camera_space(mean);
        if pc.z <= NEAR_PLANE {
            continue;
        }
        let (z, z2) = (pc.z, pc.z * pc.z);
        let u = camera.fx * pc.x / z + camera.cx;
        let v = camera.fy * pc.y / z + camera.cy;

        let q = &prims.quats[p * 4..p * 4 + 4];
        let rq = quat_to_mat(q[0], q[1], q[2], q[3]);
        let s = &prims.scales[p * 3..p * 3 + 3];
        // M3 = Rq * diag(s); Sigma3 = M3 M3^T.
        let mut m3 = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m3[i][j] = rq.m[i][j] * s[j];
            }
        }
        let mut sigma3 = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                sigma3[i][j] = (0..3).map(|k| m3[i][k] * m3[j][k]).sum();
            }
        }
        // A = J * R, J the perspective Jacobian at pc.
        let j0 = [camera.fx / z, 0.0, -camera.fx * pc.x / z2];
        let j1 = [0.0, camera.fy / z, -camera.fy * pc.y / z2];
        let r = &camera.rotation.m;
        let mut a = [[0.0; 3]; 2];
        for col in 0..3 {
            a[0][col] = (0..3).map(|k| j0[k] * r[k][col]).sum();
            a[1][col] = (0..3).map(|k| j1[k] * r[k][col]).sum();
        }
        let quad = |x: &[f64; 3], y: &[f64; 3]| -> f64 {
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    acc += x[i] * sigma3[i][j] * y[j];
                }
            }
            acc
        };
        let c00 = quad(&a[0], &a[0]);
        let c01 = quad(&a[0], &a[1]);
        let c11 = quad(&a[1], &a[1]);
        let det = c00 * c11 - c01 * c01;
        let trace = c00 + c11;
        if !(det > 0.0 && trace > 0.0) || !det.is_finite() {
            skipped += 1;
            continue;
        }
        let disc = (trace * trace - 4.0 * det).max(0.0).sqrt();
        let l_hi = 0.5 * (trace + disc);
        let l_lo = 0.5 * (trace - disc);
        if !(l_lo > 0.0) || l_hi / l_lo > settings.max_condition {
            skipped += 1;
            continue;
        }
        let inv = [c11 / det, -c01 / det, c00 / det];

        let radius = settings.cutoff_sigmas * l_hi.sqrt();
        // Pixel x is sampled at x + 0.5.
        let x0 = (u - radius - 0.5).ceil().max(0.0);
        let x1 = (u + radius - 0.5).floor().min(camera.width as f64 - 1.0);
        let y0 = (v - radius - 0.5).ceil().max(0.0);
        let y1 = (v + radius - 0.5).floor().min(camera.height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        splats.push(Splat {
            prim: p,
            depth: pc.z,
            u,
            v,
            inv,
            x0: x0 as usize,
            x1: x1 as usize,
            y0: y0 as usize,
            y1: y1 as usize,
            alpha,
        });
    }
    splats.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(prims.order[a.prim].cmp(&prims.order[b.prim]))
    });
    (splats, skipped)
}

fn row_buckets(splats: &[Splat], height: usize) -> Vec<Vec<u32>> {
    let mut rows = vec![Vec::new(); height];
    for (si, s) in splats.iter().enumerate() {
        for row in rows.iter_mut().take(s.y1 + 1).skip(s.y0) {
            row.push(si as u32);
        }
    }
    rows
}

/// Forward render into an [`Image`].
pub fn render_plain(
    prims: &PrimitiveBuffers,
    camera: &Camera,
    settings: &RenderSettings,
) -> RenderOutput {
    let (w, h) = (camera.width, camera.height);
    let (splats, skipped) = project_splats(prims, camera, settings);
    let rows = row_buckets(&splats, h);
    let rho_max = 0.5 * settings.cutoff_sigmas * settings.cutoff_sigmas;
    let bg = settings.background;
    let mut image = Image::new(w, h);
    for y in 0..h {
        let py = y as f64 + 0.5;
        for x in 0..w {
            let px = x as f64 + 0.5;
            let mut t_acc = 1.0f64;
            let mut c = [0.0f64; 3];
            for &si in &rows[y] {
                let s = &splats[si as usize];
                if x < s.x0 || x > s.x1 {
                    continue;
                }
                let dx = px - s.u;
                let dy = py - s.v;
                let rho = 0.5 * (s.inv[0] * dx * dx + 2.0 * s.inv[1] * dx * dy + s.inv[2] * dy * dy);
                if rho > rho_max {
                    continue;
                }
                let g = (-rho).exp();
                let a = (s.alpha * g).min(settings.alpha_clamp);
                let col = &prims.colors[s.prim * 3..s.prim * 3 + 3];
                for ch in 0..3 {
                    c[ch] += t_acc * a * col[ch];
                }
                t_acc *= 1.0 - a;
                if t_acc < T_STOP {
                    break;
                }
            }
            image.set_pixel(
                x,
                y,
                [
                    c[0] + t_acc * bg.x,
                    c[1] + t_acc * bg.y,
                    c[2] + t_acc * bg.z,
                ],
            );
        }
    }
    RenderOutput { image, skipped_degenerate: skipped }
}

// Partial derivatives of the rotation matrix w.r.t. the (unit) quaternion.
fn rot_jacobian(q: &[f64]) -> [[[f64; 3]; 3]; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [[0.0, -2.0 * z, 2.0 * y], [2.0 * z, 0.0, -2.0 * x], [-2.0 * y, 2.0 * x, 0.0]],
        [[0.0, 2.0 * y, 2.0 * z], [2.0 * y, -4.0 * x, -2.0 * w], [2.0 * z, 2.0 * w, -4.0 * x]],
        [[-4.0 * y, 2.0 * x, 2.0 * w], [2.0 * x, 0.0, 2.0 * z], [-2.0 * w, 2.0 * z, -4.0 * y]],
        [[-4.0 * z, -2.0 * w, 2.0 * x], [2.0 * w, -4.0 * z, 2.0 * y], [2.0 * x, 2.0 * y, 0.0]],
    ]
}

/// Backward pass: gradients of `sum(grad_image ⊙ image)` w.r.t. primitives.
pub fn render_backward(
    prims: &PrimitiveBuffers,
    camera: &Camera,
    settings: &RenderSettings,
    grad_image: &[f64],
) -> RasterGrads {
    let p_count = prims.len();
    let (w, h) = (camera.width, camera.height);
    assert_eq!(grad_image.len(), w * h * 3);
    let (splats, _) = project_splats(prims, camera, settings);
    let rows = row_buckets(&splats, h);
    let rho_max = 0.5 * settings.cutoff_sigmas * settings.cutoff_sigmas;
    let bg = settings.background;

    let mut grads = RasterGrads {
        means: vec![0.0; p_count * 3],
        scales: vec![0.0; p_count * 3],
        quats: vec![0.0; p_count * 4],
        colors: vec![0.0; p_count * 3],
        opacities: vec![0.0; p_count],
    };

    // Per-splat accumulators over pixels.
    let n_s = splats.len();
    let mut d_inv = vec![[0.0f64; 3]; n_s];
    let mut d_uv = vec![[0.0f64; 2]; n_s];
    let mut d_alpha = vec![0.0f64; n_s];

    // (splat index, a, g, dx, dy, transmittance before this splat)
    let mut contribs: Vec<(u32, f64, f64, f64, f64, f64)> = Vec::new();
    for y in 0..h {
        let py = y as f64 + 0.5;
        for x in 0..w {
            let px = x as f64 + 0.5;
            contribs.clear();
            let mut t_acc = 1.0f64;
            for &si in &rows[y] {
                let s = &splats[si as usize];
                if x < s.x0 || x > s.x1 {
                    continue;
                }
                let dx = px - s.u;
                let dy = py - s.v;
                let rho = 0.5 * (s.inv[0] * dx * dx + 2.0 * s.inv[1] * dx * dy + s.inv[2] * dy * dy);
                if rho > rho_max {
                    continue;
                }
                let g = (-rho).exp();
                let a = (s.alpha * g).min(settings.alpha_clamp);
                contribs.push((si, a, g, dx, dy, t_acc));
                t_acc *= 1.0 - a;
                if t_acc < T_STOP {
                    break;
                }
            }
            let gpix = &grad_image[(y * w + x) * 3..(y * w + x) * 3 + 3];
            // Suffix color: everything composited after splat i, including bg.
            let mut suffix = [t_acc * bg.x, t_acc * bg.y, t_acc * bg.z];
            for &(si, a, g, dx, dy, t_i) in contribs.iter().rev() {
                let s = &splats[si as usize];
                let col = &prims.colors[s.prim * 3..s.prim * 3 + 3];
                let cdotg: f64 = (0..3).map(|ch| col[ch] * gpix[ch]).sum();
                let sdotg: f64 = (0..3).map(|ch| suffix[ch] * gpix[ch]).sum();
                // d pixel / d a_i = T_i c_i - suffix_i / (1 - a_i)
                let da = t_i * cdotg - sdotg / (1.0 - a);
                for ch in 0..3 {
                    grads.colors[s.prim * 3 + ch] += t_i * a * gpix[ch];
                    suffix[ch] += t_i * a * col[ch];
                }
                if s.alpha * g < settings.alpha_clamp {
                    let idx = si as usize;
                    d_alpha[idx] += g * da;
                    let dg = s.alpha * da;
                    let drho = -g * dg;
                    d_inv[idx][0] += 0.5 * dx * dx * drho;
                    d_inv[idx][1] += dx * dy * drho;
                    d_inv[idx][2] += 0.5 * dy * dy * drho;
                    let ddx = (s.inv[0] * dx + s.inv[1] * dy) * drho;
                    let ddy = (s.inv[1] * dx + s.inv[2] * dy) * drho;
                    d_uv[idx][0] -= ddx;
                    d_uv[idx][1] -= ddy;
                }
            }
        }
    }

    // Propagate per-splat accumulators to primitive parameters.
    for (si, s) in splats.iter().enumerate() {
        let p = s.prim;
        grads.opacities[p] += d_alpha[si];

        let mean = Vec3::from_slice(&prims.means[p * 3..p * 3 + 3]);
        let pc = camera.to_camera_space(mean);
        let (z, z2) = (pc.z, pc.z * pc.z);
        let z3 = z2 * z;
        let q = &prims.quats[p * 4..p * 4 + 4];
        let rq = quat_to_mat(q[0], q[1], q[2], q[3]);
        let sc = &prims.scales[p * 3..p * 3 + 3];
        let mut m3 = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m3[i][j] = rq.m[i][j] * sc[j];
            }
        }
        let mut sigma3 = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                sigma3[i][j] = (0..3).map(|k| m3[i][k] * m3[j][k]).sum();
            }
        }
        let j0 = [camera.fx / z, 0.0, -camera.fx * pc.x / z2];
        let j1 = [0.0, camera.fy / z, -camera.fy * pc.y / z2];
        let r = &camera.rotation.m;
        let mut a_mat = [[0.0; 3]; 2];
        for col in 0..3 {
            a_mat[0][col] = (0..3).map(|k| j0[k] * r[k][col]).sum();
            a_mat[1][col] = (0..3).map(|k| j1[k] * r[k][col]).sum();
        }
        // Matrix-form gradient of the inverse covariance.
        let gw = [[d_inv[si][0], 0.5 * d_inv[si][1]], [0.5 * d_inv[si][1], d_inv[si][2]]];
        let wm = [[s.inv[0], s.inv[1]], [s.inv[1], s.inv[2]]];
        // M = -W Gw W  (gradient of Sigma2 in matrix form)
        let mut wg = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                wg[i][j] = (0..2).map(|k| wm[i][k] * gw[k][j]).sum();
            }
        }
        let mut m_sig2 = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m_sig2[i][j] = -(0..2).map(|k| wg[i][k] * wm[k][j]).sum::<f64>();
            }
        }
        // G_Sigma3 = A^T M A
        let mut g_sig3 = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for u in 0..2 {
                    for v in 0..2 {
                        acc += a_mat[u][i] * m_sig2[u][v] * a_mat[v][j];
                    }
                }
                g_sig3[i][j] = acc;
            }
        }
        // dA = 2 M A Sigma3
        let mut ma = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..3 {
                ma[i][j] = (0..2).map(|k| m_sig2[i][k] * a_mat[k][j]).sum();
            }
        }
        let mut d_a = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..3 {
                d_a[i][j] = 2.0 * (0..3).map(|k| ma[i][k] * sigma3[k][j]).sum::<f64>();
            }
        }
        // dJ = dA R^T
        let mut d_j = [[0.0; 3]; 2];
        for i in 0..2 {
            for k in 0..3 {
                d_j[i][k] = (0..3).map(|jj| d_a[i][jj] * r[k][jj]).sum();
            }
        }
        // Camera-space gradient: from J entries and from (u, v).
        let (du, dv) = (d_uv[si][0], d_uv[si][1]);
        let mut dpc = Vec3::new(
            d_j[0][2] * (-camera.fx / z2) + du * camera.fx / z,
            d_j[1][2] * (-camera.fy / z2) + dv * camera.fy / z,
            d_j[0][0] * (-camera.fx / z2)
                + d_j[0][2] * (2.0 * camera.fx * pc.x / z3)
                + d_j[1][1] * (-camera.fy / z2)
                + d_j[1][2] * (2.0 * camera.fy * pc.y / z3),
        );
        dpc.z += -du * camera.fx * pc.x / z2 - dv * camera.fy * pc.y / z2;
        let dmean = camera.rotation.transpose().mul_vec(dpc);
        grads.means[p * 3] += dmean.x;
        grads.means[p * 3 + 1] += dmean.y;
        grads.means[p * 3 + 2] += dmean.z;

        // dM3 = 2 G_Sigma3 M3
        let mut d_m3 = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                d_m3[i][j] = 2.0 * (0..3).map(|k| g_sig3[i][k] * m3[k][j]).sum::<f64>();
            }
        }
        for j in 0..3 {
            let mut ds = 0.0;
            for i in 0..3 {
                ds += rq.m[i][j] * d_m3[i][j];
            }
            grads.scales[p * 3 + j] += ds;
        }
        let rj = rot_jacobian(q);
        for (k, rjk) in rj.iter().enumerate() {
            let mut dq = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    dq += d_m3[i][j] * sc[j] * rjk[i][j];
                }
            }
            grads.quats[p * 4 + k] += dq;
        }
        let _: &Mat3 = &camera.rotation;
    }
    grads
}

/// Tape op wrapping the rasterizer. Inputs: means (P,3), scales (P,3),
/// normalized quats (P,4), colors (P,3), opacities (P,1). Output: (H*W, 3).
pub struct RasterizeOp {
    pub camera: Camera,
    pub settings: RenderSettings,
    pub order: Vec<usize>,
}

impl CustomOp for RasterizeOp {
    fn name(&self) -> &'static str {
        "rasterize"
    }

    fn forward(&self, inputs: &[(&[f64], Shape)]) -> (Vec<f64>, Shape) {
        let prims = PrimitiveBuffers {
            means: inputs[0].0,
            scales: inputs[1].0,
            quats: inputs[2].0,
            colors: inputs[3].0,
            opacities: inputs[4].0,
            order: &self.order,
        };
        let out = render_plain(&prims, &self.camera, &self.settings);
        let hw = self.camera.width * self.camera.height;
        (out.image.data, (hw, 3))
    }

    fn backward(
        &self,
        inputs: &[(&[f64], Shape)],
        _output: (&[f64], Shape),
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let prims = PrimitiveBuffers {
            means: inputs[0].0,
            scales: inputs[1].0,
            quats: inputs[2].0,
            colors: inputs[3].0,
            opacities: inputs[4].0,
            order: &self.order,
        };
        let g = render_backward(&prims, &self.camera, &self.settings, grad_out);
        vec![
            Some(g.means),
            Some(g.scales),
            Some(g.quats),
            Some(g.colors),
            Some(g.opacities),
        ]
    }
}
