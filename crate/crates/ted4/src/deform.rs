//! Embedding-based deformation: temporal interpolation of a global bank,
//! multiplicative queries by projected temporal features, and decoding to a
//! position displacement and feature residual.

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::{LeafBinding, ParamId, ParamStore};
use crate::tape::{Id, Tape};

/// Global deformation bank: one learnable row per every other frame, plus the
/// projection and decoder networks.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DeformationField {
    /// Bank parameter, (rows, dim) with rows = F/2.
    pub bank: ParamId,
    /// Projection, a plain linear map (temporal_dim, dim); no bias.
    pub projection: ParamId,
    /// Decoder from the queried latent to (dx, df).
    pub decoder: Mlp,
    pub rows: usize,
    pub dim: usize,
    /// Fixed scale applied to the raw position displacement.
    pub dx_scale: f64,
}

/// Interpolation bracket for a normalized time: rows (k, k+1) and blend w.
/// Bank node k sits at timestamp k / (rows - 1).
pub fn interp_bracket(rows: usize, t: f64) -> Result<(usize, usize, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange(t));
    }
    if rows == 1 {
        return Ok((0, 0, 0.0));
    }
    let s = t * (rows - 1) as f64;
    let k = (s.floor() as usize).min(rows - 2);
    Ok((k, k + 1, s - k as f64))
}

/// Linear temporal interpolation between adjacent bank rows.
pub fn interp(bank: &[f64], rows: usize, dim: usize, t: f64) -> Result<Vec<f64>> {
    assert_eq!(bank.len(), rows * dim);
    let (k0, k1, w) = interp_bracket(rows, t)?;
    Ok((0..dim)
        .map(|j| (1.0 - w) * bank[k0 * dim + j] + w * bank[k1 * dim + j])
        .collect())
}

/// Projection of a temporal feature: w = phi W.
pub fn project(phi: &[f64], weights: &[f64], temporal_dim: usize, dim: usize) -> Result<Vec<f64>> {
    if phi.len() != temporal_dim {
        return Err(Error::DimensionMismatch { expected: temporal_dim, got: phi.len() });
    }
    assert_eq!(weights.len(), temporal_dim * dim);
    let mut out = vec![0.0; dim];
    for (i, p) in phi.iter().enumerate() {
        for j in 0..dim {
            out[j] += p * weights[i * dim + j];
        }
    }
    Ok(out)
}

/// Element-wise query of the interpolated bank vector.
pub fn query(w: &[f64], z_t: &[f64]) -> Result<Vec<f64>> {
    if w.len() != z_t.len() {
        return Err(Error::DimensionMismatch { expected: w.len(), got: z_t.len() });
    }
    Ok(w.iter().zip(z_t).map(|(a, b)| a * b).collect())
}

/// Temporal smoothness penalty on the bank: mean squared difference of
/// adjacent rows. A single-row bank has zero loss.
pub fn bank_tv_loss(bank: &[f64], rows: usize, dim: usize) -> f64 {
    if rows < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for k in 0..rows - 1 {
        for j in 0..dim {
            let d = bank[(k + 1) * dim + j] - bank[k * dim + j];
            acc += d * d;
        }
    }
    acc / (rows - 1) as f64
}

impl DeformationField {
    /// Tape node for interp(Z, t), shape (1, dim).
    pub fn interp_tape(&self, tape: &mut Tape, binding: &LeafBinding, t: f64) -> Result<Id> {
        let bank = binding.leaf(self.bank);
        let (k0, k1, w) = interp_bracket(self.rows, t)?;
        let r0 = tape.select_rows(bank, &[k0]);
        if k0 == k1 || w == 0.0 {
            return Ok(r0);
        }
        let r1 = tape.select_rows(bank, &[k1]);
        let a = tape.mul_scalar(r0, 1.0 - w);
        let b = tape.mul_scalar(r1, w);
        Ok(tape.add(a, b))
    }

    /// Tape forward of the full deformation for a batch of anchors.
    ///
    /// `phi` (n, d), `x` (n, 3), `f` (n, d_f), `gate` (n, 1) multiplies the
    /// deltas (straight-through mask; static anchors pass through unchanged).
    /// Returns (x', f').
    pub fn deform_tape(
        &self,
        tape: &mut Tape,
        binding: &LeafBinding,
        phi: Id,
        x: Id,
        f: Id,
        gate: Id,
        t: f64,
    ) -> Result<(Id, Id)> {
        let feature_dim = tape.shape(f).1;
        let w = {
            let proj = binding.leaf(self.projection);
            tape.matmul(phi, proj)
        };
        let z_t = self.interp_tape(tape, binding, t)?;
        let latent = tape.mul_row(w, z_t);
        let out = self.decoder.forward_tape(tape, binding, latent);
        let dx_raw = tape.slice_cols(out, 0, 3);
        let df = tape.slice_cols(out, 3, 3 + feature_dim);
        let dx = tape.mul_scalar(dx_raw, self.dx_scale);
        let dx_gated = tape.mul_col(dx, gate);
        let df_gated = tape.mul_col(df, gate);
        let x_out = tape.add(x, dx_gated);
        let f_out = tape.add(f, df_gated);
        Ok((x_out, f_out))
    }

    /// Plain forward: per-anchor (dx, df) at time t, ungated.
    pub fn deform_plain(
        &self,
        store: &ParamStore,
        phi: &[f64],
        n: usize,
        t: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let temporal_dim = store.get(self.projection).shape.0;
        let z_t = interp(&store.get(self.bank).data, self.rows, self.dim, t)?;
        let proj = &store.get(self.projection).data;
        let mut latent = vec![0.0; n * self.dim];
        for a in 0..n {
            let w = project(&phi[a * temporal_dim..(a + 1) * temporal_dim], proj, temporal_dim, self.dim)?;
            let q = query(&w, &z_t)?;
            latent[a * self.dim..(a + 1) * self.dim].copy_from_slice(&q);
        }
        let out = self.decoder.forward_plain(store, &latent, n);
        let out_dim = self.decoder.output_dim();
        let feature_dim = out_dim - 3;
        let mut dx = vec![0.0; n * 3];
        let mut df = vec![0.0; n * feature_dim];
        for a in 0..n {
            for j in 0..3 {
                dx[a * 3 + j] = out[a * out_dim + j] * self.dx_scale;
            }
            df[a * feature_dim..(a + 1) * feature_dim]
                .copy_from_slice(&out[a * out_dim + 3..(a + 1) * out_dim]);
        }
        Ok((dx, df))
    }

    /// Tape node for the bank TV loss.
    pub fn tv_loss_tape(&self, tape: &mut Tape, binding: &LeafBinding) -> Id {
        let bank = binding.leaf(self.bank);
        if self.rows < 2 {
            return tape.scalar(0.0);
        }
        let hi = tape.select_rows(bank, &(1..self.rows).collect::<Vec<_>>());
        let lo = tape.select_rows(bank, &(0..self.rows - 1).collect::<Vec<_>>());
        let d = tape.sub(hi, lo);
        let sq = tape.square(d);
        let s = tape.sum_all(sq);
        tape.mul_scalar(s, 1.0 / (self.rows - 1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank_2x2() -> Vec<f64> {
        vec![0.0, 0.0, 1.0, 1.0]
    }

    #[test]
    fn interp_hits_nodes_exactly() {
        // 3 rows at t = 0, 0.5, 1.
        let bank = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(interp(&bank, 3, 2, 0.5).unwrap(), vec![3.0, 4.0]);
        assert_eq!(interp(&bank, 3, 2, 0.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(interp(&bank, 3, 2, 1.0).unwrap(), vec![5.0, 6.0]);
    }

    #[test]
    fn interp_midpoint_averages_adjacent_rows() {
        let bank = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(interp(&bank, 3, 2, 0.25).unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn interp_rejects_time_outside_unit_interval() {
        let bank = bank_2x2();
        assert!(interp(&bank, 2, 2, -0.1).is_err());
        assert!(interp(&bank, 2, 2, 1.1).is_err());
    }

    #[test]
    fn interp_single_row_is_constant() {
        let bank = vec![7.0, 8.0];
        assert_eq!(interp(&bank, 1, 2, 0.3).unwrap(), vec![7.0, 8.0]);
    }

    #[test]
    fn interp_is_affine_between_nodes() {
        let bank = vec![1.0, -2.0, 0.5, 3.0, 2.0, 0.0, -1.0, 1.0];
        let rows = 4;
        let dim = 2;
        let (t0, t1) = (1.0 / 3.0, 2.0 / 3.0);
        for lam in [0.0, 0.25, 0.5, 0.8, 1.0] {
            let t = lam * t0 + (1.0 - lam) * t1;
            let it = interp(&bank, rows, dim, t).unwrap();
            let i0 = interp(&bank, rows, dim, t0).unwrap();
            let i1 = interp(&bank, rows, dim, t1).unwrap();
            for j in 0..dim {
                let expect = lam * i0[j] + (1.0 - lam) * i1[j];
                assert!((it[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn project_zero_weights_gives_zero() {
        let phi = vec![0.3, -0.4];
        let w = project(&phi, &[0.0; 6], 2, 3).unwrap();
        assert_eq!(w, vec![0.0; 3]);
    }

    #[test]
    fn project_identity_passes_through() {
        let phi = vec![0.3, -0.4, 0.9];
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(project(&phi, &eye, 3, 3).unwrap(), phi);
    }

    #[test]
    fn project_matches_hand_matrix_product() {
        let phi = vec![0.5, -1.0];
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let out = project(&phi, &w, 2, 3).unwrap();
        assert_eq!(out, vec![0.5 - 4.0, 1.0 - 5.0, 1.5 - 6.0]);
    }

    #[test]
    fn project_rejects_dimension_mismatch() {
        assert!(project(&[1.0; 3], &[0.0; 6], 2, 3).is_err());
    }

    #[test]
    fn query_is_elementwise() {
        assert_eq!(query(&[1.0, 1.0], &[0.7, -0.2]).unwrap(), vec![0.7, -0.2]);
        assert_eq!(query(&[1.0, 2.0], &[3.0, -1.0]).unwrap(), vec![3.0, -2.0]);
        assert_eq!(query(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(query(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn tv_loss_examples() {
        assert_eq!(bank_tv_loss(&[1.0, 1.0, 1.0, 1.0], 2, 2), 0.0);
        assert_eq!(bank_tv_loss(&bank_2x2(), 2, 2), 2.0);
        assert_eq!(bank_tv_loss(&[5.0, 5.0], 1, 2), 0.0);
        // Homogeneity: scaling the bank by c scales the loss by c^2.
        let bank = vec![0.1, -0.4, 0.9, 0.2, -0.3, 0.8];
        let base = bank_tv_loss(&bank, 3, 2);
        let scaled: Vec<f64> = bank.iter().map(|v| v * 3.0).collect();
        assert!((bank_tv_loss(&scaled, 3, 2) - 9.0 * base).abs() < 1e-12);
    }

    fn build_field(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> DeformationField {
        use rand::Rng;
        let (d, dim, d_f, rows) = (4, 4, 6, 3);
        let bank_data: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let bank = store.add("deform.bank", (rows, dim), bank_data, ParamGroup::Bank);
        let proj_data: Vec<f64> = (0..d * dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let projection = store.add("deform.project", (d, dim), proj_data, ParamGroup::Nets);
        let decoder = Mlp::new(store, "deform.net", &[dim, 8, 3 + d_f], ParamGroup::Nets, rng);
        DeformationField { bank, projection, decoder, rows, dim, dx_scale: 0.1 }
    }

    #[test]
    fn static_gate_passes_anchor_through_unchanged() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let field = build_field(&mut store, &mut rng);
        let mut tape = Tape::new();
        let binding = store.bind_all(&mut tape);
        let phi = tape.constant(vec![0.2; 4], (1, 4));
        let x = tape.constant(vec![1.0, 2.0, 3.0], (1, 3));
        let f = tape.constant(vec![0.5; 6], (1, 6));
        let gate = tape.constant(vec![0.0], (1, 1));
        let (x2, f2) = field.deform_tape(&mut tape, &binding, phi, x, f, gate, 0.37).unwrap();
        assert_eq!(tape.value(x2), &[1.0, 2.0, 3.0]);
        assert_eq!(tape.value(f2), &[0.5; 6]);
    }

    #[test]
    fn zero_decoder_output_means_identity_deformation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let field = build_field(&mut store, &mut rng);
        // Zero the decoder head so dx = df = 0 regardless of the latent.
        let (w_last, b_last) = *field.decoder.layers.last().unwrap();
        store.get_mut(w_last).data.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(b_last).data.iter_mut().for_each(|v| *v = 0.0);

        let mut tape = Tape::new();
        let binding = store.bind_all(&mut tape);
        let phi = tape.constant(vec![0.2; 4], (1, 4));
        let x = tape.constant(vec![1.0, 2.0, 3.0], (1, 3));
        let f = tape.constant(vec![0.5; 6], (1, 6));
        let gate = tape.constant(vec![1.0], (1, 1));
        let (x2, f2) = field.deform_tape(&mut tape, &binding, phi, x, f, gate, 0.37).unwrap();
        assert_eq!(tape.value(x2), &[1.0, 2.0, 3.0]);
        assert_eq!(tape.value(f2), &[0.5; 6]);
    }

    #[test]
    fn deform_matches_composed_oracle() {
        // Compose interp -> project -> query -> decoder by hand and compare
        // against the tape path on a seeded field.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let field = build_field(&mut store, &mut rng);
        let phi = vec![0.3, -0.7, 0.15, 0.9];
        let x = [1.0, -0.5, 2.0];
        let f = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let t = 0.41;

        let z_t = interp(&store.get(field.bank).data, field.rows, field.dim, t).unwrap();
        let w = project(&phi, &store.get(field.projection).data, 4, field.dim).unwrap();
        let latent = query(&w, &z_t).unwrap();
        let out = field.decoder.forward_plain(&store, &latent, 1);
        let expect_x: Vec<f64> = (0..3).map(|j| x[j] + out[j] * field.dx_scale).collect();
        let expect_f: Vec<f64> = (0..6).map(|j| f[j] + out[3 + j]).collect();

        let mut tape = Tape::new();
        let binding = store.bind_all(&mut tape);
        let phi_id = tape.constant(phi, (1, 4));
        let x_id = tape.constant(x.to_vec(), (1, 3));
        let f_id = tape.constant(f, (1, 6));
        let gate = tape.constant(vec![1.0], (1, 1));
        let (x2, f2) = field.deform_tape(&mut tape, &binding, phi_id, x_id, f_id, gate, t).unwrap();
        for (a, b) in tape.value(x2).iter().zip(&expect_x) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in tape.value(f2).iter().zip(&expect_f) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn deform_is_continuous_in_time() {
        // Sample a fine grid; successive differences must shrink with the
        // step, bounded by a Lipschitz estimate from the coarse grid.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let field = build_field(&mut store, &mut rng);
        let phi = vec![0.3, -0.7, 0.15, 0.9];

        let eval = |t: f64| -> Vec<f64> {
            let (dx, df) = field.deform_plain(&store, &phi, 1, t).unwrap();
            dx.into_iter().chain(df).collect()
        };
        // Coarse Lipschitz estimate.
        let coarse = 0.05;
        let mut lip: f64 = 0.0;
        let mut prev = eval(0.0);
        let mut t: f64 = coarse;
        while t <= 1.0 + 1e-12 {
            let cur = eval(t.min(1.0));
            let d: f64 = cur.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            lip = lip.max(d / coarse);
            prev = cur;
            t += coarse;
        }
        // Fine grid: no jump may exceed the Lipschitz bound with margin.
        let fine = 0.001;
        let mut prev = eval(0.0);
        let mut t: f64 = fine;
        while t <= 1.0 + 1e-12 {
            let cur = eval(t.min(1.0));
            let d: f64 = cur.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d <= (lip * 3.0 + 1e-9) * fine, "jump {d} at t={t}");
            prev = cur;
            t += fine;
        }
    }

    #[test]
    fn deform_gradients_match_finite_differences() {
        // Gradient of a fixed linear functional of (x', f') w.r.t. phi, the
        // bank, and the decoder weights.
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let build_store = |rng: &mut ChaCha8Rng| {
            let mut store = ParamStore::new();
            let field = build_field(&mut store, rng);
            (store, field)
        };
        let (store, field) = build_store(&mut rng);
        let phi_data = vec![0.3, -0.7, 0.15, 0.9, -0.2, 0.5, 0.05, -0.9]; // 2 anchors
        let x_data = vec![1.0, -0.5, 2.0, 0.3, 0.8, -1.0];
        let f_data = vec![0.05; 12];
        let t = 0.63;
        let weights: Vec<f64> = (0..2 * 9).map(|i| ((i * 31 % 17) as f64 - 8.0) / 8.0).collect();

        let loss_of = |store: &ParamStore, phi_data: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let binding = store.bind_all(&mut tape);
            let phi = tape.leaf(phi_data.to_vec(), (2, 4));
            let x = tape.constant(x_data.clone(), (2, 3));
            let f = tape.constant(f_data.clone(), (2, 6));
            let gate = tape.constant(vec![1.0, 1.0], (2, 1));
            let (x2, f2) = field.deform_tape(&mut tape, &binding, phi, x, f, gate, t).unwrap();
            let joined = tape.concat_cols(&[x2, f2]);
            let wid = tape.constant(weights.clone(), (2, 9));
            let prod = tape.mul(joined, wid);
            let l = tape.sum_all(prod);
            tape.scalar_value(l)
        };

        // Analytic gradients.
        let mut tape = Tape::new();
        let binding = store.bind_all(&mut tape);
        let phi = tape.leaf(phi_data.clone(), (2, 4));
        let x = tape.constant(x_data.clone(), (2, 3));
        let f = tape.constant(f_data.clone(), (2, 6));
        let gate = tape.constant(vec![1.0, 1.0], (2, 1));
        let (x2, f2) = field.deform_tape(&mut tape, &binding, phi, x, f, gate, t).unwrap();
        let joined = tape.concat_cols(&[x2, f2]);
        let wid = tape.constant(weights.clone(), (2, 9));
        let prod = tape.mul(joined, wid);
        let l = tape.sum_all(prod);
        let grads = tape.backward(l);

        let eps = 1e-6;
        // phi gradient.
        let g_phi = grads.get(phi).unwrap().to_vec();
        for i in 0..phi_data.len() {
            let mut p = phi_data.clone();
            p[i] += eps;
            let hi = loss_of(&store, &p);
            p[i] -= 2.0 * eps;
            let lo = loss_of(&store, &p);
            let fd = (hi - lo) / (2.0 * eps);
            assert!(
                (g_phi[i] - fd).abs() < 1e-4 * g_phi[i].abs().max(fd.abs()).max(1e-4),
                "phi[{i}]: {} vs {fd}",
                g_phi[i]
            );
        }
        // Bank and net weight gradients (subsample).
        for (pid, param) in store.iter() {
            let g = match grads.get(binding.leaf(pid)) {
                Some(g) => g.to_vec(),
                None => continue,
            };
            for i in (0..param.data.len()).step_by(5) {
                let mut s2 = store.clone();
                s2.get_mut(pid).data[i] += eps;
                let hi = loss_of(&s2, &phi_data);
                s2.get_mut(pid).data[i] -= 2.0 * eps;
                let lo = loss_of(&s2, &phi_data);
                let fd = (hi - lo) / (2.0 * eps);
                assert!(
                    (g[i] - fd).abs() < 1e-4 * g[i].abs().max(fd.abs()).max(1e-4),
                    "{}[{i}]: {} vs {fd}",
                    param.name,
                    g[i]
                );
            }
        }
    }
}
