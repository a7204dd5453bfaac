//! Anchor data model: voxel-grid initialization, canonical ordering,
//! 16-bit position rounding, and the anchor-to-primitive mean decode.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp16::round_f16;
use crate::math::Vec3;
use crate::temporal::{softplus_inv, WIDTH_FLOOR};

/// Dimensions shared by every anchor in a set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Canonical feature dimension d_f.
    pub feature_dim: usize,
    /// Temporal feature dimension d.
    pub temporal_dim: usize,
    /// Gaussian primitives per anchor K.
    pub offsets_per_anchor: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig { feature_dim: 32, temporal_dim: 16, offsets_per_anchor: 5 }
    }
}

/// Default transition width for freshly initialized activation windows.
pub const DEFAULT_WIDTH: f64 = 0.05;

/// Raw activation parameters as stored and coded: (a_s, delta, w_s, w_f)
/// with a_f = a_s + softplus(delta) and widths 1e-3 + softplus(w).
pub fn full_duration_tau_raw() -> [f64; 4] {
    let delta = softplus_inv(1.0);
    let w = softplus_inv(DEFAULT_WIDTH - WIDTH_FLOOR);
    [0.0, delta, w, w]
}

/// A decoded 3D Gaussian ready for rasterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub mean: Vec3,
    pub scale: Vec3,
    /// Unit quaternion (w, x, y, z).
    pub rotation: [f64; 4],
    /// RGB in [0,1].
    pub color: Vec3,
    /// Opacity in [0,1].
    pub opacity: f64,
}

impl GaussianPrimitive {
    pub fn validate(&self) -> Result<()> {
        let n: f64 = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::ShapeMismatch(format!("quaternion norm {n}")));
        }
        if self.scale.x <= 0.0 || self.scale.y <= 0.0 || self.scale.z <= 0.0 {
            return Err(Error::ShapeMismatch("non-positive scale".into()));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(in_unit(self.color.x) && in_unit(self.color.y) && in_unit(self.color.z) && in_unit(self.opacity)) {
            return Err(Error::ShapeMismatch("color/opacity outside [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Anchor {
    pub position: Vec3,
    /// Canonical feature f, length d_f.
    pub feature: Vec<f64>,
    /// Offset scaling l.
    pub scaling: Vec3,
    /// Unit-less offsets O, K entries.
    pub offsets: Vec<Vec3>,
    /// Temporal feature phi, length d.
    pub temporal_feature: Vec<f64>,
    /// Raw activation parameters, see [`full_duration_tau_raw`].
    pub tau_raw: [f64; 4],
    /// Soft offset masks in [0,1], K entries.
    pub offset_mask: Vec<f64>,
    /// Soft temporal (dynamic vs static) mask in [0,1].
    pub temporal_mask: f64,
    /// Stable id assigned at creation; canonical tie-break key.
    pub creation_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorSet {
    pub config: AnchorConfig,
    pub voxel_size: f64,
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Keep flagged anchors, preserving order.
    pub fn retain(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.anchors.len());
        let mut i = 0;
        self.anchors.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
    }

    /// Sort by fp16-rounded position (lexicographic), ties by creation index.
    /// Positions must be within fp16 range.
    pub fn canonical_sort(&mut self) -> Result<()> {
        let mut keys = Vec::with_capacity(self.anchors.len());
        for a in &self.anchors {
            keys.push((
                round_f16(a.position.x)?,
                round_f16(a.position.y)?,
                round_f16(a.position.z)?,
            ));
        }
        let mut order: Vec<usize> = (0..self.anchors.len()).collect();
        order.sort_by(|&i, &j| {
            let ki = keys[i];
            let kj = keys[j];
            ki.0.total_cmp(&kj.0)
                .then(ki.1.total_cmp(&kj.1))
                .then(ki.2.total_cmp(&kj.2))
                .then(self.anchors[i].creation_index.cmp(&self.anchors[j].creation_index))
        });
        let mut sorted = Vec::with_capacity(self.anchors.len());
        for i in order {
            sorted.push(self.anchors[i].clone());
        }
        self.anchors = sorted;
        Ok(())
    }
}

/// Primitive means: mu_i = x + l ⊙ O_i.
pub fn gaussian_means(anchor: &Anchor) -> Vec<Vec3> {
    anchor
        .offsets
        .iter()
        .map(|o| anchor.position + anchor.scaling.hadamard(*o))
        .collect()
}

fn voxel_key(p: Vec3, voxel_size: f64) -> (i64, i64, i64) {
    (
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    )
}

/// One anchor per occupied voxel, placed at the voxel center. Features are
/// initialized after canonical ordering so the result does not depend on the
/// input point order.
pub fn init_anchor_set(
    points: &[Vec3],
    voxel_size: f64,
    config: AnchorConfig,
    rng: &mut impl Rng,
) -> Result<AnchorSet> {
    if points.is_empty() {
        return Err(Error::NoPoints);
    }
    assert!(voxel_size > 0.0, "voxel_size must be positive");

    let mut keys: Vec<(i64, i64, i64)> = points.iter().map(|p| voxel_key(*p, voxel_size)).collect();
    keys.sort_unstable();
    keys.dedup();

    let mut set = AnchorSet { config, voxel_size, anchors: Vec::with_capacity(keys.len()) };
    for key in keys {
        let center = Vec3::new(
            (key.0 as f64 + 0.5) * voxel_size,
            (key.1 as f64 + 0.5) * voxel_size,
            (key.2 as f64 + 0.5) * voxel_size,
        );
        set.anchors.push(Anchor {
            position: center,
            feature: vec![0.0; config.feature_dim],
            scaling: Vec3::splat(voxel_size),
            offsets: vec![Vec3::ZERO; config.offsets_per_anchor],
            temporal_feature: vec![0.0; config.temporal_dim],
            tau_raw: full_duration_tau_raw(),
            offset_mask: vec![0.9; config.offsets_per_anchor],
            temporal_mask: 0.9,
            creation_index: 0,
        });
    }

    // Canonical order first (voxel-key sort above is already deterministic
    // and input-order independent), then creation indices and random draws.
    set.canonical_sort()?;
    for (i, a) in set.anchors.iter_mut().enumerate() {
        a.creation_index = i;
        for o in &mut a.offsets {
            *o = Vec3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
        }
    }
    Ok(set)
}

/// Replace positions by their 16-bit float values. Idempotent; errors if any
/// component is outside the fp16 range.
pub fn round_positions_fp16(set: &AnchorSet) -> Result<AnchorSet> {
    let mut out = set.clone();
    for a in &mut out.anchors {
        a.position = Vec3::new(
            round_f16(a.position.x)?,
            round_f16(a.position.y)?,
            round_f16(a.position.z)?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn test_anchor(position: Vec3, scaling: Vec3, offsets: Vec<Vec3>) -> Anchor {
        let k = offsets.len();
        Anchor {
            position,
            feature: vec![0.0; 4],
            scaling,
            offsets,
            temporal_feature: vec![0.0; 2],
            tau_raw: full_duration_tau_raw(),
            offset_mask: vec![1.0; k],
            temporal_mask: 1.0,
            creation_index: 0,
        }
    }

    #[test]
    fn zero_offsets_collapse_to_position() {
        let a = test_anchor(
            Vec3::new(1.0, -2.0, 3.0),
            Vec3::new(2.0, 2.0, 2.0),
            vec![Vec3::ZERO; 3],
        );
        for m in gaussian_means(&a) {
            assert_eq!(m, a.position);
        }
    }

    #[test]
    fn identity_scaling_translates_by_offset() {
        let a = test_anchor(
            Vec3::ZERO,
            Vec3::new(1.0, 1.0, 1.0),
            vec![Vec3::new(1.0, 0.0, 0.0)],
        );
        assert_eq!(gaussian_means(&a)[0], Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn means_follow_componentwise_scaling() {
        let a = test_anchor(
            Vec3::new(1.0, 2.0, 3.0),
            Vec3::new(2.0, 1.0, 0.5),
            vec![Vec3::new(0.5, -1.0, 4.0)],
        );
        assert_eq!(gaussian_means(&a)[0], Vec3::new(2.0, 1.0, 5.0));
    }

    #[test]
    fn means_are_linear_in_offsets() {
        // Superposition over random inputs: means(O1 + O2) - x = (means(O1) - x) + (means(O2) - x).
        let mut r = rng();
        for _ in 0..20 {
            let x = Vec3::new(r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
            let l = Vec3::new(r.gen_range(0.1..2.0), r.gen_range(0.1..2.0), r.gen_range(0.1..2.0));
            let o1 = Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
            let o2 = Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
            let m1 = gaussian_means(&test_anchor(x, l, vec![o1]))[0] - x;
            let m2 = gaussian_means(&test_anchor(x, l, vec![o2]))[0] - x;
            let m12 = gaussian_means(&test_anchor(x, l, vec![o1 + o2]))[0] - x;
            let d = m12 - (m1 + m2);
            assert!(d.norm() < 1e-12);
        }
    }

    #[test]
    fn same_voxel_dedups() {
        let pts = [Vec3::new(0.1, 0.1, 0.1), Vec3::new(0.9, 0.9, 0.9)];
        let set = init_anchor_set(&pts, 1.0, AnchorConfig::default(), &mut rng()).unwrap();
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn distinct_voxels_give_two_anchors() {
        let pts = [Vec3::new(0.1, 0.1, 0.1), Vec3::new(1.9, 0.9, 0.9)];
        let set = init_anchor_set(&pts, 1.0, AnchorConfig::default(), &mut rng()).unwrap();
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn anchor_sits_at_voxel_center() {
        let pts = [Vec3::new(0.9, 0.0, 0.0)];
        let set = init_anchor_set(&pts, 1.0, AnchorConfig::default(), &mut rng()).unwrap();
        assert_eq!(set.anchors[0].position, Vec3::new(0.5, 0.5, 0.5));
    }

    #[test]
    fn negative_coordinates_floor_correctly() {
        let pts = [Vec3::new(-0.1, 0.0, 0.0)];
        let set = init_anchor_set(&pts, 1.0, AnchorConfig::default(), &mut rng()).unwrap();
        assert_eq!(set.anchors[0].position, Vec3::new(-0.5, 0.5, 0.5));
    }

    #[test]
    fn empty_input_errors() {
        assert!(matches!(
            init_anchor_set(&[], 1.0, AnchorConfig::default(), &mut rng()),
            Err(Error::NoPoints)
        ));
    }

    #[test]
    fn init_is_permutation_invariant() {
        let pts = vec![
            Vec3::new(0.3, 0.2, 0.9),
            Vec3::new(-1.4, 0.6, 0.1),
            Vec3::new(2.2, -0.8, 0.4),
            Vec3::new(0.35, 0.25, 0.95),
        ];
        let mut rev = pts.clone();
        rev.reverse();
        let a = init_anchor_set(&pts, 0.5, AnchorConfig::default(), &mut rng()).unwrap();
        let b = init_anchor_set(&rev, 0.5, AnchorConfig::default(), &mut rng()).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.anchors.iter().zip(&b.anchors) {
            assert_eq!(x.position, y.position);
            assert_eq!(x.offsets.len(), y.offsets.len());
            for (u, v) in x.offsets.iter().zip(&y.offsets) {
                assert_eq!(u, v);
            }
        }
    }

    #[test]
    fn fp16_rounding_idempotent_and_exact_for_halves() {
        let pts = [Vec3::new(0.9, 0.0, 0.0)];
        let set = init_anchor_set(&pts, 1.0, AnchorConfig::default(), &mut rng()).unwrap();
        let once = round_positions_fp16(&set).unwrap();
        assert_eq!(once.anchors[0].position, Vec3::new(0.5, 0.5, 0.5));
        let twice = round_positions_fp16(&once).unwrap();
        assert_eq!(once.anchors[0].position, twice.anchors[0].position);
    }

    #[test]
    fn fp16_rounding_of_one_third() {
        let mut set = init_anchor_set(&[Vec3::ZERO], 1.0, AnchorConfig::default(), &mut rng()).unwrap();
        set.anchors[0].position = Vec3::splat(1.0 / 3.0);
        let r = round_positions_fp16(&set).unwrap();
        assert_eq!(r.anchors[0].position.x, 0.333251953125);
    }

    #[test]
    fn fp16_overflow_is_an_error() {
        let mut set = init_anchor_set(&[Vec3::ZERO], 1.0, AnchorConfig::default(), &mut rng()).unwrap();
        set.anchors[0].position = Vec3::new(1e6, 0.0, 0.0);
        assert!(round_positions_fp16(&set).is_err());
    }
}
