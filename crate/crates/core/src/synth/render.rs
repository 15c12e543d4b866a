use std::collections::BTreeMap;

use nalgebra::{Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{palette, CameraSpec, Owner, SynthError, SyntheticScene};
use crate::geom::{unproject_pixel, Aabb3, DepthMap, Intrinsics, Point3, Pose};

/// Owner code of pixels that hit nothing.
pub const NO_HIT: u32 = u32::MAX;
const BACKGROUND: [u8; 3] = [40, 40, 40];

fn encode(owner: Owner) -> u32 {
    match owner {
        Owner::Furniture(i) => 2 * i as u32,
        Owner::Element(i) => 2 * i as u32 + 1,
    }
}

fn decode(code: u32) -> Option<Owner> {
    match code {
        NO_HIT => None,
        c if c % 2 == 0 => Some(Owner::Furniture(c as usize / 2)),
        c => Some(Owner::Element(c as usize / 2)),
    }
}

#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub index: usize,
    pub true_pose: Pose,
    /// Pose written to the manifest; differs from `true_pose` only under pose noise.
    pub recorded_pose: Pose,
    pub intrinsics: Intrinsics,
    /// Camera-frame depth, millimeters.
    pub depth: DepthMap,
    owners: Vec<u32>,
}

impl RenderedFrame {
    pub fn owner(&self, x: u32, y: u32) -> Option<Owner> {
        decode(self.owners[(y * self.intrinsics.width + x) as usize])
    }

    pub fn pixel_counts(&self) -> BTreeMap<Owner, usize> {
        let mut out = BTreeMap::new();
        for &c in &self.owners {
            if let Some(o) = decode(c) {
                *out.entry(o).or_default() += 1;
            }
        }
        out
    }

    /// Pixels of each owner, row-major.
    pub fn owner_pixels(&self) -> BTreeMap<Owner, Vec<(u32, u32)>> {
        let w = self.intrinsics.width;
        let mut out: BTreeMap<Owner, Vec<(u32, u32)>> = BTreeMap::new();
        for (i, &c) in self.owners.iter().enumerate() {
            if let Some(o) = decode(c) {
                out.entry(o).or_default().push((i as u32 % w, i as u32 / w));
            }
        }
        out
    }

    /// Flat per-owner colors.
    pub fn rgb_image(&self) -> image::RgbImage {
        let w = self.intrinsics.width;
        image::RgbImage::from_fn(w, self.intrinsics.height, |x, y| {
            image::Rgb(self.owner(x, y).map_or(BACKGROUND, palette))
        })
    }
}

pub fn camera_intrinsics(cam: &CameraSpec) -> Result<Intrinsics, SynthError> {
    Intrinsics::from_hfov(cam.width, cam.image_height, cam.hfov_deg.to_radians())
        .map_err(|e| SynthError::Spec(e.to_string()))
}

/// Evenly spaced poses on a horizontal circle, all looking at the center.
pub fn orbit_trajectory(cam: &CameraSpec) -> Vec<Pose> {
    let target = Point3::new(0.0, 0.0, cam.target_height);
    (0..cam.poses)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / cam.poses as f64;
            let eye = Point3::new(cam.radius * a.cos(), cam.radius * a.sin(), cam.height);
            Pose::look_at(eye, target, Vector3::z()).expect("orbit pose")
        })
        .collect()
}

/// Ray parameter of the first entry into the box, for rays starting outside it.
pub fn ray_box_depth(origin: &Point3, dir: &Vector3<f64>, b: &Aabb3) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if dir[k] == 0.0 {
            if origin[k] < b.min[k] || origin[k] > b.max[k] {
                return None;
            }
            continue;
        }
        let a = (b.min[k] - origin[k]) / dir[k];
        let c = (b.max[k] - origin[k]) / dir[k];
        t0 = t0.max(a.min(c));
        t1 = t1.min(a.max(c));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// Pixel rectangle that can see the box, or the whole image if the box reaches behind the camera.
fn screen_rect(b: &Aabb3, pose: &Pose, k: &Intrinsics) -> Option<(u32, u32, u32, u32)> {
    let full = Some((0, 0, k.width, k.height));
    let (mut u0, mut v0, mut u1, mut v1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for i in 0..8 {
        let p = Point3::new(
            if i & 1 == 0 { b.min.x } else { b.max.x },
            if i & 2 == 0 { b.min.y } else { b.max.y },
            if i & 4 == 0 { b.min.z } else { b.max.z },
        );
        let c = pose.world_to_camera(&p);
        if c.z <= 1e-6 {
            return full;
        }
        let (u, v) = (k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy);
        u0 = u0.min(u);
        v0 = v0.min(v);
        u1 = u1.max(u);
        v1 = v1.max(v);
    }
    let clamp = |x: f64, hi: u32| x.max(0.0).min(hi as f64) as u32;
    let r = (
        clamp(u0.floor() - 1.0, k.width),
        clamp(v0.floor() - 1.0, k.height),
        clamp(u1.ceil() + 1.0, k.width),
        clamp(v1.ceil() + 1.0, k.height),
    );
    (r.0 < r.2 && r.1 < r.3).then_some(r)
}

fn perturb(pose: &Pose, sigma: (f64, f64), rng: &mut ChaCha8Rng) -> Pose {
    let t = Normal::new(0.0, sigma.0.max(0.0)).expect("finite sigma");
    let r = Normal::new(0.0, sigma.1.max(0.0)).expect("finite sigma");
    let axis = Vector3::new(r.sample(rng), r.sample(rng), r.sample(rng));
    let dt = Vector3::new(t.sample(rng), t.sample(rng), t.sample(rng));
    let rot = Rotation3::from_scaled_axis(axis).into_inner() * pose.rotation;
    Pose::new(rot, pose.translation + dt).unwrap_or(*pose)
}

fn render_one(scene: &SyntheticScene, index: usize, pose: &Pose, k: &Intrinsics) -> RenderedFrame {
    let n = (k.width * k.height) as usize;
    let mut best = vec![f64::INFINITY; n];
    let mut owners = vec![NO_HIT; n];
    for (owner, b) in scene.inventory.boxes() {
        let Some((x0, y0, x1, y1)) = screen_rect(&b, pose, k) else {
            continue;
        };
        let code = encode(owner);
        for y in y0..y1 {
            for x in x0..x1 {
                let dir = pose.rotation * unproject_pixel(k, x, y, 1.0);
                if let Some(t) = ray_box_depth(&pose.translation, &dir, &b) {
                    let i = (y * k.width + x) as usize;
                    if t < best[i] {
                        best[i] = t;
                        owners[i] = code;
                    }
                }
            }
        }
    }
    let data = best
        .iter()
        .zip(owners.iter_mut())
        .map(|(&t, o)| {
            let mm = (t * 1000.0).round();
            if t.is_finite() && mm >= 1.0 && mm <= u16::MAX as f64 {
                mm as u16
            } else {
                *o = NO_HIT;
                0
            }
        })
        .collect();
    let recorded_pose = match scene.spec.noise.pose_sigma {
        Some(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(scene.spec.seed ^ 0x9e37_79b9_7f4a_7c15);
            rng.set_stream(index as u64);
            perturb(pose, s, &mut rng)
        }
        None => *pose,
    };
    RenderedFrame {
        index,
        true_pose: *pose,
        recorded_pose,
        intrinsics: *k,
        depth: DepthMap::new(k.width, k.height, data).expect("sized depth"),
        owners,
    }
}

/// Exact depth and instance buffers, one frame per pose. Depth is the
/// camera-frame z of the nearest box hit, quantized to millimeters.
pub fn render_frames(
    scene: &SyntheticScene,
    trajectory: &[Pose],
    k: &Intrinsics,
) -> Vec<RenderedFrame> {
    trajectory
        .par_iter()
        .enumerate()
        .map(|(i, p)| render_one(scene, i, p, k))
        .collect()
}
