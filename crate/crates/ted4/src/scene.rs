//! Cameras, toy scenes, scene synthesis and on-disk scene directories.
//!
//! A scene directory holds a `manifest.json`, per-camera frame images and an
//! ASCII PLY point cloud used to seed the anchor grid.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::math::{Mat3, Vec3};
use crate::raster::{render_plain, PrimitiveBuffers, RenderSettings};

/// Pinhole camera: world-to-camera rigid transform plus intrinsics.
/// Convention: +z forward, +x right, +y down (pixel v grows downwards).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Mat3,
    pub translation: Vec3,
}

pub const NEAR_PLANE: f64 = 0.01;

impl Camera {
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        width: usize,
        height: usize,
        focal: f64,
    ) -> Camera {
        let z = (target - eye).normalized();
        let x = up.cross(z).normalized();
        let y = x.cross(z); // points down for a y-up world
        let rotation = Mat3::from_rows(x, y, z);
        let translation = -rotation.mul_vec(eye);
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidCamera(format!(
                "image {}x{} below 8x8",
                self.width, self.height
            )));
        }
        let e = self.rotation.orthonormality_error();
        if e > 1e-6 {
            return Err(Error::InvalidCamera(format!(
                "rotation not orthonormal (error {e:.2e})"
            )));
        }
        Ok(())
    }

    pub fn to_camera_space(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    /// Pixel coordinates of a world point, if in front of the near plane.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let pc = self.to_camera_space(p);
        if pc.z <= NEAR_PLANE {
            return None;
        }
        Some((
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
            pc.z,
        ))
    }

    /// Point-in-frustum test used by the activation initialization.
    pub fn in_frustum(&self, p: Vec3) -> bool {
        match self.project(p) {
            Some((u, v, _)) => {
                u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
            }
            None => false,
        }
    }
}

/// Multi-camera video with normalized timestamps.
#[derive(Debug, Clone)]
pub struct ToyScene {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub cameras: Vec<Camera>,
    /// frames[camera][frame]
    pub frames: Vec<Vec<Image>>,
    pub timestamps: Vec<f64>,
}

impl ToyScene {
    pub fn frame_count(&self) -> usize {
        self.timestamps.len()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.timestamps.len();
        if f < 2 || f % 2 != 0 {
            return Err(Error::InvalidScene(format!(
                "frame count {f} must be even and >= 2"
            )));
        }
        for w in self.timestamps.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidScene("timestamps not strictly increasing".into()));
            }
        }
        if self
            .timestamps
            .iter()
            .any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(Error::InvalidScene("timestamps outside [0,1]".into()));
        }
        if self.cameras.len() != self.frames.len() || self.cameras.is_empty() {
            return Err(Error::InvalidScene("camera/frame list mismatch".into()));
        }
        for (c, frames) in self.cameras.iter().zip(&self.frames) {
            c.validate()?;
            if frames.len() != f {
                return Err(Error::InvalidScene("missing frames".into()));
            }
            for img in frames {
                if img.width != self.width || img.height != self.height {
                    return Err(Error::InvalidScene("frame resolution mismatch".into()));
                }
            }
        }
        Ok(())
    }
}

/// Scene plus the ground-truth point cloud used for anchor initialization.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub scene: ToyScene,
    pub points: Vec<Vec3>,
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum Motion {
    Static,
    /// Linear interpolation of the center between t=0 and t=1 positions.
    Linear { from: Vec3, to: Vec3 },
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    motion: Motion,
    base: Vec3,
    scale: Vec3,
    color: Vec3,
    alpha: f64,
    /// Points sampled for the anchor seed cloud.
    cloud_points: usize,
    /// Time whose position seeds the cloud (movers pick a visible pose).
    canonical_t: f64,
    /// Optional time span: cloud points are spread along the trajectory over
    /// this range, the way a reconstruction of a dynamic scene smears a
    /// mover across its path.
    cloud_spread_t: Option<(f64, f64)>,
}

impl Blob {
    fn center(&self, t: f64) -> Vec3 {
        match self.motion {
            Motion::Static => self.base,
            Motion::Linear { from, to } => from + (to - from) * t,
        }
    }

    /// Canonical position for the seed cloud.
    fn canonical(&self) -> Vec3 {
        self.center(self.canonical_t)
    }
}

fn backdrop_and_floor() -> Vec<Blob> {
    vec![
        Blob {
            motion: Motion::Static,
            base: Vec3::new(0.0, 0.0, 1.5),
            scale: Vec3::new(1.4, 1.1, 0.05),
            color: Vec3::new(0.30, 0.36, 0.45),
            alpha: 0.95,
            cloud_points: 28,
            canonical_t: 0.5,
            cloud_spread_t: None,
        },
        Blob {
            motion: Motion::Static,
            base: Vec3::new(0.0, -0.95, 0.6),
            scale: Vec3::new(1.3, 0.05, 0.9),
            color: Vec3::new(0.52, 0.42, 0.28),
            alpha: 0.95,
            cloud_points: 20,
            canonical_t: 0.5,
            cloud_spread_t: None,
        },
    ]
}

fn scene_blobs(name: &str) -> Result<(Vec<Blob>, usize)> {
    let ball = |pos: Vec3, r: f64, color: Vec3| Blob {
        motion: Motion::Static,
        base: pos,
        scale: Vec3::splat(r),
        color,
        alpha: 0.9,
        cloud_points: 12,
        canonical_t: 0.5,
        cloud_spread_t: None,
    };
    match name {
        "static-room" => {
            let mut blobs = backdrop_and_floor();
            blobs.push(ball(Vec3::new(-0.7, -0.35, 0.7), 0.30, Vec3::new(0.92, 0.15, 0.10)));
            blobs.push(ball(Vec3::new(0.6, -0.2, 0.5), 0.26, Vec3::new(0.10, 0.70, 0.92)));
            blobs.push(ball(Vec3::new(0.0, 0.45, 0.9), 0.28, Vec3::new(0.95, 0.85, 0.15)));
            Ok((blobs, 10))
        }
        "slider" => {
            let mut blobs = backdrop_and_floor();
            blobs.push(ball(Vec3::new(0.6, 0.35, 0.9), 0.26, Vec3::new(0.10, 0.70, 0.92)));
            blobs.push(Blob {
                motion: Motion::Linear {
                    from: Vec3::new(-0.8, -0.25, 0.6),
                    to: Vec3::new(0.8, -0.25, 0.6),
                },
                base: Vec3::ZERO,
                scale: Vec3::splat(0.30),
                color: Vec3::new(1.0, 0.5, 0.05),
                alpha: 0.95,
                cloud_points: 12,
                canonical_t: 0.5,
                cloud_spread_t: None,
            });
            Ok((blobs, 10))
        }
        "occluder" => {
            let mut blobs = backdrop_and_floor();
            // A bright band behind the crossing path: complementary to the
            // mover's color, so a half-transparent ghost cannot blend in.
            blobs.push(Blob {
                motion: Motion::Static,
                base: Vec3::new(0.0, 0.1, 0.85),
                scale: Vec3::new(1.4, 0.18, 0.04),
                color: Vec3::new(0.08, 0.55, 0.85),
                alpha: 0.95,
                cloud_points: 16,
                canonical_t: 0.5,
                cloud_spread_t: None,
            });
            // A narrow wall in front of the crossing path.
            blobs.push(Blob {
                motion: Motion::Static,
                base: Vec3::new(0.0, -0.05, 0.0),
                scale: Vec3::new(0.15, 0.65, 0.05),
                color: Vec3::new(0.6, 0.25, 0.65),
                alpha: 0.95,
                cloud_points: 12,
                canonical_t: 0.5,
                cloud_spread_t: None,
            });
            // A slow mover that stays visible throughout.
            blobs.push(Blob {
                motion: Motion::Linear {
                    from: Vec3::new(-0.7, -0.5, 0.8),
                    to: Vec3::new(0.7, -0.5, 0.8),
                },
                base: Vec3::ZERO,
                scale: Vec3::splat(0.26),
                color: Vec3::new(0.85, 0.15, 0.55),
                alpha: 0.95,
                cloud_points: 10,
                canonical_t: 0.5,
                cloud_spread_t: None,
            });
            // Fast mover: large and bright, crosses the whole view within a
            // few frames (passing behind the wall mid-crossing) and spends
            // the rest of the sequence far outside every frustum.
            blobs.push(Blob {
                motion: Motion::Linear {
                    from: Vec3::new(-15.0, 0.1, 0.6),
                    to: Vec3::new(15.0, 0.1, 0.6),
                },
                base: Vec3::ZERO,
                scale: Vec3::splat(0.5),
                color: Vec3::new(1.0, 0.5, 0.03),
                alpha: 0.97,
                cloud_points: 14,
                canonical_t: 0.48,
                cloud_spread_t: Some((0.42, 0.58)),
            });
            Ok((blobs, 40))
        }
        other => Err(Error::UnknownScene(other.to_string())),
    }
}

pub const SCENE_NAMES: [&str; 3] = ["static-room", "slider", "occluder"];

fn toy_cameras(width: usize, height: usize) -> Vec<Camera> {
    let up = Vec3::new(0.0, 1.0, 0.0);
    vec![
        Camera::look_at(Vec3::new(0.0, 0.15, -4.2), Vec3::new(0.0, 0.0, 0.4), up, width, height, 36.0),
        Camera::look_at(Vec3::new(1.1, 0.4, -3.9), Vec3::new(0.0, 0.0, 0.4), up, width, height, 36.0),
    ]
}

/// Render a ground-truth frame for one camera at time t.
fn render_gt(blobs: &[Blob], camera: &Camera, t: f64) -> Image {
    let n = blobs.len();
    let mut means = Vec::with_capacity(n * 3);
    let mut scales = Vec::with_capacity(n * 3);
    let mut quats = Vec::with_capacity(n * 4);
    let mut colors = Vec::with_capacity(n * 3);
    let mut opacities = Vec::with_capacity(n);
    for b in blobs {
        let c = b.center(t);
        means.extend_from_slice(&c.to_array());
        scales.extend_from_slice(&b.scale.to_array());
        quats.extend_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        colors.extend_from_slice(&b.color.to_array());
        opacities.push(b.alpha);
    }
    let order: Vec<usize> = (0..n).collect();
    let prims = PrimitiveBuffers {
        means: &means,
        scales: &scales,
        quats: &quats,
        colors: &colors,
        opacities: &opacities,
        order: &order,
    };
    render_plain(&prims, camera, &RenderSettings::default()).image
}

/// Build a named toy scene deterministically from a seed.
pub fn synth_scene(name: &str, seed: u64) -> Result<SceneData> {
    let (blobs, frame_count) = scene_blobs(name)?;
    let (width, height) = (32, 32);
    let cameras = toy_cameras(width, height);
    let timestamps: Vec<f64> = (0..frame_count)
        .map(|k| k as f64 / (frame_count - 1) as f64)
        .collect();

    let mut frames = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let mut cam_frames = Vec::with_capacity(frame_count);
        for t in &timestamps {
            cam_frames.push(render_gt(&blobs, cam, *t));
        }
        frames.push(cam_frames);
    }

    // Seed cloud: jittered samples around each blob's canonical position,
    // spread along the trajectory for movers with a cloud time span.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    for b in &blobs {
        points.push(b.canonical());
        for _ in 0..b.cloud_points {
            let c = match b.cloud_spread_t {
                Some((t0, t1)) => b.center(rng.gen_range(t0..t1)),
                None => b.canonical(),
            };
            points.push(Vec3::new(
                c.x + rng.gen_range(-1.5..1.5) * b.scale.x,
                c.y + rng.gen_range(-1.5..1.5) * b.scale.y,
                c.z + rng.gen_range(-1.5..1.5) * b.scale.z,
            ));
        }
    }

    let scene = ToyScene {
        name: name.to_string(),
        width,
        height,
        cameras,
        frames,
        timestamps,
    };
    scene.validate()?;
    Ok(SceneData { scene, points })
}

// ---------------------------------------------------------------------------
// Scene directory IO
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CameraManifest {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
    frames: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SceneManifest {
    name: String,
    width: usize,
    height: usize,
    frame_count: usize,
    timestamps: Vec<f64>,
    points: String,
    cameras: Vec<CameraManifest>,
}

pub fn save_scene(dir: &Path, data: &SceneData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let scene = &data.scene;
    let mut cameras = Vec::new();
    for (ci, cam) in scene.cameras.iter().enumerate() {
        let cam_dir = dir.join(format!("cam{ci}"));
        std::fs::create_dir_all(&cam_dir)?;
        let mut frame_paths = Vec::new();
        for (fi, img) in scene.frames[ci].iter().enumerate() {
            let rel = format!("cam{ci}/frame_{fi:04}.png");
            img.save(&dir.join(&rel))?;
            frame_paths.push(rel);
        }
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i * 3 + j] = cam.rotation.m[i][j];
            }
        }
        cameras.push(CameraManifest {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            rotation,
            translation: cam.translation.to_array(),
            frames: frame_paths,
        });
    }
    let manifest = SceneManifest {
        name: scene.name.clone(),
        width: scene.width,
        height: scene.height,
        frame_count: scene.frame_count(),
        timestamps: scene.timestamps.clone(),
        points: "points.ply".to_string(),
        cameras,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    save_ply(&dir.join("points.ply"), &data.points)?;
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<SceneData> {
    let manifest: SceneManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut cameras = Vec::new();
    let mut frames = Vec::new();
    for cm in &manifest.cameras {
        let rotation = Mat3 {
            m: [
                [cm.rotation[0], cm.rotation[1], cm.rotation[2]],
                [cm.rotation[3], cm.rotation[4], cm.rotation[5]],
                [cm.rotation[6], cm.rotation[7], cm.rotation[8]],
            ],
        };
        cameras.push(Camera {
            fx: cm.fx,
            fy: cm.fy,
            cx: cm.cx,
            cy: cm.cy,
            width: cm.width,
            height: cm.height,
            rotation,
            translation: Vec3::from_slice(&cm.translation),
        });
        let mut cam_frames = Vec::new();
        for rel in &cm.frames {
            cam_frames.push(Image::load(&dir.join(rel))?);
        }
        frames.push(cam_frames);
    }
    let scene = ToyScene {
        name: manifest.name,
        width: manifest.width,
        height: manifest.height,
        cameras,
        frames,
        timestamps: manifest.timestamps,
    };
    scene.validate()?;
    let points = load_ply(&dir.join(&manifest.points))?;
    Ok(SceneData { scene, points })
}

fn save_ply(path: &Path, points: &[Vec3]) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", points.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in points {
        out.push_str(&format!("{} {} {}\n", p.x as f32, p.y as f32, p.z as f32));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_ply(path: &Path) -> Result<Vec<Vec3>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let mut count = None;
    for line in lines.by_ref() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = rest.trim().parse::<usize>().ok();
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| Error::Format("ply missing vertex element".into()))?;
    let mut points = Vec::with_capacity(count);
    for line in lines.take(count) {
        let mut it = line.split_whitespace();
        let mut next = || -> Result<f64> {
            it.next()
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Format("bad ply vertex line".into()))
        };
        points.push(Vec3::new(next()?, next()?, next()?));
    }
    if points.len() != count {
        return Err(Error::Format("ply vertex count mismatch".into()));
    }
    Ok(points)
}
