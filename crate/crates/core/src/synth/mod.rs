//! Procedural box-world scenes with exact ground truth.
//!
//! Furniture is a set of axis-aligned boxes standing on the floor around the
//! room center; functional elements are small boxes protruding from each
//! furniture front face (the face pointing away from the center). Frames are
//! rendered analytically from an orbit around the center and detections are
//! derived from the rendered instance buffer.

mod detect;
mod render;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affordance::Affordance;
use crate::eval::GroundingQuery;
use crate::geom::{Aabb3, Point3, PointCloud};
use crate::graph::{NodeKind, SceneGraph};
use crate::scene::{
    io_err, write_depth, write_json, write_scene, Annotation3D, DepthSource, FrameEntry,
    FrameRecord, LabeledScene, SceneError, SceneManifest,
};

pub use detect::{emit_detections, feature_basis, FEATURE_DIM};
pub use render::{orbit_trajectory, ray_box_depth, render_frames, RenderedFrame, NO_HIT};

pub const INVENTORY_FILE: &str = "inventory.json";
pub const QUERY_FILE: &str = "queries.json";

const CATEGORIES: [&str; 10] = [
    "cabinet",
    "dresser",
    "oven",
    "refrigerator",
    "nightstand",
    "wardrobe",
    "desk",
    "washing machine",
    "trash can",
    "bookshelf",
];

/// Side of the square grid cell reserved for one functional element on a face [m].
const FE_CELL: f64 = 0.22;
/// Smallest gap kept between two furniture boxes [m].
const FURNITURE_GAP: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Standard deviation of each bbox edge [px].
    pub bbox_jitter_px: f64,
    /// Beta distribution of detection confidences; `None` gives 1.0.
    pub confidence_beta: Option<(f64, f64)>,
    pub drop_prob: f64,
    /// Per-component Gaussian noise added to features before renormalizing.
    pub feature_sigma: f64,
    /// Gaussian perturbation of the recorded poses: translation [m] and rotation [rad].
    pub pose_sigma: Option<(f64, f64)>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            bbox_jitter_px: 0.0,
            confidence_beta: None,
            drop_prob: 0.0,
            feature_sigma: 0.0,
            pose_sigma: None,
        }
    }
}

impl NoiseModel {
    pub fn is_noiseless(&self) -> bool {
        self.bbox_jitter_px == 0.0 && self.drop_prob == 0.0 && self.feature_sigma == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSpec {
    pub poses: usize,
    /// Camera height [m].
    pub height: f64,
    /// Orbit radius [m].
    pub radius: f64,
    /// Height of the look-at point [m].
    pub target_height: f64,
    pub width: u32,
    pub image_height: u32,
    /// Horizontal field of view [deg].
    pub hfov_deg: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            poses: 40,
            height: 1.6,
            radius: 2.5,
            target_height: 0.6,
            width: 640,
            image_height: 480,
            hfov_deg: 70.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    /// Room size `[x, y, z]` [m]; furniture stays within the central part.
    pub room: [f64; 3],
    pub furniture: (usize, usize),
    pub fes_per_furniture: (usize, usize),
    /// Relative frequency of each affordance.
    pub affordance_weights: Vec<(Affordance, f64)>,
    pub noise: NoiseModel,
    pub camera: CameraSpec,
    /// Scan spacing on functional elements [m].
    pub fe_spacing: f64,
    /// Scan spacing on furniture [m].
    pub furniture_spacing: f64,
    /// Fewest pixels for an object detection.
    pub min_object_pixels: usize,
    pub min_fe_pixels: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            room: [5.0, 5.0, 2.6],
            furniture: (3, 5),
            fes_per_furniture: (1, 3),
            affordance_weights: Affordance::ALL.iter().map(|&a| (a, 1.0)).collect(),
            noise: NoiseModel::default(),
            camera: CameraSpec::default(),
            fe_spacing: 0.002,
            furniture_spacing: 0.01,
            min_object_pixels: 400,
            min_fe_pixels: 20,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Detection(#[from] crate::detection::DetectionError),
    #[error("{path}: {msg}")]
    Image { path: String, msg: String },
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.into()));
        if !self.room.iter().all(|&v| v.is_finite() && v > 0.0) {
            return bad("room extents must be positive");
        }
        if self.room[0].min(self.room[1]) < 3.0 {
            return bad("room must be at least 3 m wide");
        }
        let n = &self.noise;
        if !(0.0..=1.0).contains(&n.drop_prob) {
            return bad("drop probability must lie in [0, 1]");
        }
        if n.bbox_jitter_px < 0.0 || n.feature_sigma < 0.0 {
            return bad("noise deviations must be non-negative");
        }
        if let Some((a, b)) = n.confidence_beta {
            if !(a > 0.0 && b > 0.0) {
                return bad("beta parameters must be positive");
            }
        }
        if self.furniture.0 > self.furniture.1 || self.furniture.1 > CATEGORIES.len() {
            return bad("furniture range must be ordered and at most 10");
        }
        if self.fes_per_furniture.0 > self.fes_per_furniture.1 {
            return bad("functional element range must be ordered");
        }
        if self.affordance_weights.iter().any(|w| !(w.1 >= 0.0))
            || self.affordance_weights.iter().all(|w| w.1 == 0.0)
        {
            return bad("affordance weights must be non-negative with a positive sum");
        }
        if !(self.fe_spacing > 0.0 && self.furniture_spacing > 0.0) {
            return bad("scan spacing must be positive");
        }
        if self.camera.poses == 0 || self.camera.width == 0 || self.camera.image_height == 0 {
            return bad("camera needs poses and a non-empty image");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Owner {
    Furniture(usize),
    Element(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub id: usize,
    pub category: String,
    pub aabb: Aabb3,
    pub elements: Vec<usize>,
    /// Frames with enough detected pixels.
    pub visible_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedElement {
    pub id: usize,
    pub parent: usize,
    pub affordance: Affordance,
    pub aabb: Aabb3,
    pub annot_id: String,
    pub visible_frames: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Inventory {
    pub objects: Vec<PlantedObject>,
    pub elements: Vec<PlantedElement>,
}

impl Inventory {
    pub fn boxes(&self) -> Vec<(Owner, Aabb3)> {
        self.objects
            .iter()
            .map(|o| (Owner::Furniture(o.id), o.aabb))
            .chain(self.elements.iter().map(|e| (Owner::Element(e.id), e.aabb)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub scene_id: String,
    pub spec: SceneSpec,
    pub inventory: Inventory,
    pub scan: PointCloud,
    pub annotations: Vec<Annotation3D>,
}

fn outward_axis(center: &Point3) -> (usize, f64) {
    if center.x.abs() >= center.y.abs() {
        (0, if center.x >= 0.0 { 1.0 } else { -1.0 })
    } else {
        (1, if center.y >= 0.0 { 1.0 } else { -1.0 })
    }
}

/// Size of an element as (along the face, vertical, protrusion) [m].
fn element_size(a: Affordance) -> [f64; 3] {
    match a {
        Affordance::Rotate => [0.05, 0.05, 0.03],
        Affordance::HookPull => [0.03, 0.12, 0.035],
        Affordance::HookTurn => [0.08, 0.03, 0.03],
        Affordance::KeyPress => [0.04, 0.04, 0.008],
        Affordance::TipPush => [0.04, 0.04, 0.012],
        Affordance::PinchPull => [0.03, 0.03, 0.025],
        Affordance::FootPush => [0.1, 0.05, 0.04],
    }
}

/// Grid points covering one rectangle with at most `spacing` between neighbors, edges included.
fn grid(a0: f64, a1: f64, b0: f64, b1: f64, spacing: f64) -> Vec<(f64, f64)> {
    let na = ((a1 - a0) / spacing).ceil().max(1.0) as usize;
    let nb = ((b1 - b0) / spacing).ceil().max(1.0) as usize;
    let mut out = Vec::with_capacity((na + 1) * (nb + 1));
    for i in 0..=na {
        let a = if i == na {
            a1
        } else {
            a0 + (a1 - a0) * i as f64 / na as f64
        };
        for j in 0..=nb {
            let b = if j == nb {
                b1
            } else {
                b0 + (b1 - b0) * j as f64 / nb as f64
            };
            out.push((a, b));
        }
    }
    out
}

/// Surface samples of a box; `skip` lists faces as `(axis, side)` with side 0 = min.
fn sample_box(b: &Aabb3, spacing: f64, skip: &[(usize, usize)]) -> Vec<Point3> {
    let mut pts = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            if skip.contains(&(axis, side)) {
                continue;
            }
            let fixed = if side == 0 { b.min[axis] } else { b.max[axis] };
            for (a, c) in grid(b.min[u], b.max[u], b.min[v], b.max[v], spacing) {
                let mut p = Point3::zeros();
                p[axis] = fixed;
                p[u] = a;
                p[v] = c;
                pts.push(p);
            }
        }
    }
    pts
}

fn palette(owner: Owner) -> [u8; 3] {
    let h = match owner {
        Owner::Furniture(i) => (i as u32).wrapping_mul(2654435761),
        Owner::Element(i) => (i as u32 + 1000).wrapping_mul(2246822519),
    };
    [
        (h >> 8) as u8 | 0x20,
        (h >> 16) as u8 | 0x20,
        (h >> 24) as u8 | 0x20,
    ]
}

/// Lays out furniture and elements and samples the scan.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_furniture = rng.gen_range(spec.furniture.0..=spec.furniture.1);
    let mut categories: Vec<usize> = (0..CATEGORIES.len()).collect();
    categories.shuffle(&mut rng);
    let place_radius = (spec.room[0].min(spec.room[1]) / 2.0 - 1.0).clamp(0.6, 1.2);

    let mut inventory = Inventory::default();
    let mut fronts = Vec::new();
    let mut tries = 0;
    while inventory.objects.len() < n_furniture && tries < 10_000 {
        tries += 1;
        let ang = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = rng.gen_range(0.3..place_radius);
        let center = Point3::new(r * ang.cos(), r * ang.sin(), 0.0);
        let (axis, sign) = outward_axis(&center);
        let width = rng.gen_range(0.45..1.0);
        let depth = rng.gen_range(0.35..0.65);
        let height = rng.gen_range(0.6..1.6);
        let half = if axis == 0 {
            [depth / 2.0, width / 2.0]
        } else {
            [width / 2.0, depth / 2.0]
        };
        let aabb = Aabb3::new(
            Point3::new(center.x - half[0], center.y - half[1], 0.0),
            Point3::new(center.x + half[0], center.y + half[1], height),
        );
        if inventory
            .objects
            .iter()
            .any(|o| o.aabb.distance(&aabb) < FURNITURE_GAP)
        {
            continue;
        }
        let id = inventory.objects.len();
        inventory.objects.push(PlantedObject {
            id,
            category: CATEGORIES[categories[id]].to_string(),
            aabb,
            elements: Vec::new(),
            visible_frames: 0,
        });
        fronts.push((axis, sign));
    }
    if inventory.objects.len() < spec.furniture.0 {
        return Err(SynthError::Spec(
            "could not place the requested furniture".into(),
        ));
    }

    let total_w: f64 = spec.affordance_weights.iter().map(|w| w.1).sum();
    for oi in 0..inventory.objects.len() {
        let (axis, sign) = fronts[oi];
        let o = inventory.objects[oi].aabb;
        let along = 1 - axis;
        let face_w = o.max[along] - o.min[along];
        let face_h = o.max.z;
        let cols = (face_w / FE_CELL).floor() as usize;
        let rows = (face_h / FE_CELL).floor() as usize;
        let mut cells: Vec<(usize, usize)> = (0..cols)
            .flat_map(|c| (0..rows).map(move |r| (c, r)))
            .collect();
        cells.shuffle(&mut rng);
        let want = rng
            .gen_range(spec.fes_per_furniture.0..=spec.fes_per_furniture.1)
            .min(cells.len());
        let mut chosen: Vec<(usize, usize)> = cells.into_iter().take(want).collect();
        chosen.sort();
        let (c_off, r_off) = (
            (face_w - cols as f64 * FE_CELL) / 2.0,
            (face_h - rows as f64 * FE_CELL) / 2.0,
        );
        for (c, r) in chosen {
            let mut pick = rng.gen_range(0.0..total_w);
            let mut affordance = spec.affordance_weights[0].0;
            for &(a, w) in &spec.affordance_weights {
                if pick < w {
                    affordance = a;
                    break;
                }
                pick -= w;
            }
            let [sw, sh, sp] = element_size(affordance);
            let cu = o.min[along] + c_off + (c as f64 + 0.5) * FE_CELL;
            let cz = r_off + (r as f64 + 0.5) * FE_CELL;
            let face = if sign > 0.0 { o.max[axis] } else { o.min[axis] };
            let mut min = Point3::zeros();
            let mut max = Point3::zeros();
            min[along] = cu - sw / 2.0;
            max[along] = cu + sw / 2.0;
            min.z = cz - sh / 2.0;
            max.z = cz + sh / 2.0;
            if sign > 0.0 {
                min[axis] = face;
                max[axis] = face + sp;
            } else {
                min[axis] = face - sp;
                max[axis] = face;
            }
            let id = inventory.elements.len();
            inventory.elements.push(PlantedElement {
                id,
                parent: oi,
                affordance,
                aabb: Aabb3::new(min, max),
                annot_id: format!("fe_{id:03}"),
                visible_frames: 0,
            });
            inventory.objects[oi].elements.push(id);
        }
    }

    let mut points = Vec::new();
    let mut colors = Vec::new();
    for (oi, o) in inventory.objects.iter().enumerate() {
        let (axis, sign) = fronts[oi];
        let front_side = if sign > 0.0 { 1 } else { 0 };
        let covered: Vec<Aabb3> = o
            .elements
            .iter()
            .map(|&e| inventory.elements[e].aabb)
            .collect();
        for p in sample_box(&o.aabb, spec.furniture_spacing, &[(2, 0)]) {
            let on_front = p[axis]
                == if front_side == 1 {
                    o.aabb.max[axis]
                } else {
                    o.aabb.min[axis]
                };
            if on_front && covered.iter().any(|c| c.contains_point(&p)) {
                continue;
            }
            points.push(p);
            colors.push(palette(Owner::Furniture(oi)));
        }
    }
    let mut annotations = Vec::new();
    for e in &inventory.elements {
        let (axis, sign) = fronts[e.parent];
        let back = (axis, if sign > 0.0 { 0 } else { 1 });
        let start = points.len() as u32;
        for p in sample_box(&e.aabb, spec.fe_spacing, &[back]) {
            points.push(p);
            colors.push(palette(Owner::Element(e.id)));
        }
        annotations.push(Annotation3D {
            annot_id: e.annot_id.clone(),
            affordance: e.affordance,
            scan_indices: (start..points.len() as u32).collect(),
        });
    }
    let mut scan = PointCloud::from_points(points);
    scan.colors = Some(colors);
    Ok(SyntheticScene {
        scene_id: format!("synth_{:06}", spec.seed),
        spec: spec.clone(),
        inventory,
        scan,
        annotations,
    })
}

impl SyntheticScene {
    /// Labeled scene over in-memory rendered frames, using the recorded poses.
    pub fn labeled(&self, frames: &[RenderedFrame]) -> LabeledScene {
        LabeledScene {
            scene_id: self.scene_id.clone(),
            scan: self.scan.clone(),
            annotations: self.annotations.clone(),
            frames: frames
                .iter()
                .map(|f| FrameRecord {
                    rgb: None,
                    depth: DepthSource::Memory(Arc::new(f.depth.clone())),
                    pose: f.recorded_pose,
                    intrinsics: f.intrinsics,
                })
                .collect(),
            skipped_annotations: Vec::new(),
        }
    }

    /// Counts, per planted entity, the frames where it covers enough pixels.
    pub fn record_visibility(&mut self, frames: &[RenderedFrame]) {
        for o in &mut self.inventory.objects {
            o.visible_frames = 0;
        }
        for e in &mut self.inventory.elements {
            e.visible_frames = 0;
        }
        for f in frames {
            let counts = f.pixel_counts();
            for o in &mut self.inventory.objects {
                let own = counts.get(&Owner::Furniture(o.id)).copied().unwrap_or(0)
                    + o.elements
                        .iter()
                        .map(|&e| counts.get(&Owner::Element(e)).copied().unwrap_or(0))
                        .sum::<usize>();
                if own >= self.spec.min_object_pixels {
                    o.visible_frames += 1;
                }
            }
            for e in &mut self.inventory.elements {
                if counts.get(&Owner::Element(e.id)).copied().unwrap_or(0)
                    >= self.spec.min_fe_pixels
                {
                    e.visible_frames += 1;
                }
            }
        }
    }

    /// One query per (object, affordance) group of elements visible in at
    /// least `min_frames` frames; the target is the union of their annotations.
    pub fn templated_queries(&self, min_frames: usize) -> Vec<GroundingQuery> {
        let mut out = Vec::new();
        for o in &self.inventory.objects {
            let mut groups: BTreeMap<Affordance, Vec<u32>> = BTreeMap::new();
            for &e in &o.elements {
                let el = &self.inventory.elements[e];
                if el.visible_frames >= min_frames {
                    groups
                        .entry(el.affordance)
                        .or_default()
                        .extend(&self.annotations[e].scan_indices);
                }
            }
            for (a, mut idx) in groups {
                idx.sort_unstable();
                out.push(GroundingQuery {
                    scene_id: self.scene_id.clone(),
                    query: format!(
                        "use the {} element of the {}",
                        a.name().to_lowercase(),
                        o.category
                    ),
                    gt_indices: idx,
                });
            }
        }
        out
    }
}

/// Node-level recovery against the planted entities seen in at least `min_frames` frames.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub planted: usize,
    pub nodes: usize,
    pub matched: usize,
    pub precision: f64,
    pub recall: f64,
}

/// A node matches the planted entity of its kind whose (slightly inflated)
/// box contains its centroid and whose class equals its label; a second node
/// on the same entity counts as a false positive.
pub fn score_recovery(graph: &SceneGraph, inv: &Inventory, min_frames: usize) -> Recovery {
    let planted_objects: Vec<&PlantedObject> = inv
        .objects
        .iter()
        .filter(|o| o.visible_frames >= min_frames)
        .collect();
    let planted_elements: Vec<&PlantedElement> = inv
        .elements
        .iter()
        .filter(|e| e.visible_frames >= min_frames)
        .collect();
    let mut hit: BTreeMap<Owner, usize> = BTreeMap::new();
    let mut true_nodes = 0;
    for n in graph.nodes.values() {
        let Some(c) = n.cloud.centroid() else {
            continue;
        };
        let label = n
            .label
            .clone()
            .or_else(|| n.majority_label())
            .unwrap_or_default();
        let owner = match n.kind {
            NodeKind::Object => planted_objects
                .iter()
                .find(|o| o.category == label && o.aabb.inflate(0.05).contains_point(&c))
                .map(|o| Owner::Furniture(o.id)),
            NodeKind::FunctionalElement => planted_elements
                .iter()
                .find(|e| e.affordance.name() == label && e.aabb.inflate(0.02).contains_point(&c))
                .map(|e| Owner::Element(e.id)),
        };
        if let Some(o) = owner {
            let k = hit.entry(o).or_default();
            *k += 1;
            if *k == 1 {
                true_nodes += 1;
            }
        }
    }
    let planted = planted_objects.len() + planted_elements.len();
    let nodes = graph.nodes.len();
    Recovery {
        planted,
        nodes,
        matched: true_nodes,
        precision: if nodes == 0 {
            1.0
        } else {
            true_nodes as f64 / nodes as f64
        },
        recall: if planted == 0 {
            1.0
        } else {
            hit.len() as f64 / planted as f64
        },
    }
}

/// Everything produced for one synthetic scene.
pub struct SyntheticRun {
    pub scene: SyntheticScene,
    pub frames: Vec<RenderedFrame>,
    pub detections: Vec<crate::detection::FrameDetections>,
}

/// Generates, renders and detects one scene in memory.
pub fn run_synthetic(spec: &SceneSpec) -> Result<SyntheticRun, SynthError> {
    let mut scene = generate_scene(spec)?;
    let poses = orbit_trajectory(&spec.camera);
    let frames = render_frames(&scene, &poses, &render::camera_intrinsics(&spec.camera)?);
    scene.record_visibility(&frames);
    let detections = emit_detections(&scene, &frames, spec);
    Ok(SyntheticRun {
        scene,
        frames,
        detections,
    })
}

/// Writes a scene directory: manifest, scan, annotations, depth, flat-color
/// RGB, detections, planted inventory and templated queries.
pub fn write_synthetic(dir: &Path, run: &SyntheticRun) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(run.frames.len());
    for (i, f) in run.frames.iter().enumerate() {
        let depth = format!("depth/{i:06}.u16");
        let rgb = format!("rgb/{i:06}.png");
        write_depth(&dir.join(&depth), &f.depth)?;
        let path = dir.join(&rgb);
        std::fs::create_dir_all(path.parent().unwrap()).map_err(io_err(dir))?;
        f.rgb_image()
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| SynthError::Image {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
        entries.push(FrameEntry::new(
            Some(rgb),
            depth,
            &f.recorded_pose,
            &f.intrinsics,
        ));
    }
    for d in &run.detections {
        crate::detection::write_detections(
            &dir.join("detections")
                .join(crate::pipeline::detection_file_name(d.frame_id)),
            d,
        )?;
    }
    let manifest = SceneManifest {
        scene_id: run.scene.scene_id.clone(),
        scan: "scan.bin".into(),
        annotations: "annotations.json".into(),
        frames: entries,
        detections: Some("detections".into()),
    };
    write_scene(dir, &manifest, &run.scene.scan, &run.scene.annotations)?;
    write_json(&dir.join(INVENTORY_FILE), &run.scene.inventory)?;
    write_json(&dir.join(QUERY_FILE), &run.scene.templated_queries(3))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scan() {
        let spec = SceneSpec {
            seed: 11,
            ..SceneSpec::default()
        };
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a.scan, b.scan);
        assert_eq!(a.annotations, b.annotations);
        let dir = tempfile::tempdir().unwrap();
        crate::scene::write_scan(&dir.path().join("a"), &a.scan).unwrap();
        crate::scene::write_scan(&dir.path().join("b"), &b.scan).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("a")).unwrap(),
            std::fs::read(dir.path().join("b")).unwrap()
        );
    }

    #[test]
    fn zero_elements_zero_annotations() {
        let spec = SceneSpec {
            fes_per_furniture: (0, 0),
            ..SceneSpec::default()
        };
        let s = generate_scene(&spec).unwrap();
        assert!(s.annotations.is_empty());
        assert!(!s.inventory.objects.is_empty());
    }

    fn dist_to_box_surface(p: &Point3, b: &Aabb3) -> f64 {
        // Inside or on the box: distance to the nearest face; outside: Euclidean distance.
        let mut outside = 0.0f64;
        let mut inner = f64::INFINITY;
        for k in 0..3 {
            let d = (b.min[k] - p[k]).max(p[k] - b.max[k]);
            if d > 0.0 {
                outside += d * d;
            }
            inner = inner
                .min((p[k] - b.min[k]).abs())
                .min((b.max[k] - p[k]).abs());
        }
        if outside > 0.0 {
            outside.sqrt()
        } else {
            inner
        }
    }

    #[test]
    fn annotations_lie_on_their_element() {
        for seed in 0..4 {
            let s = generate_scene(&SceneSpec {
                seed,
                ..SceneSpec::default()
            })
            .unwrap();
            for (a, e) in s.annotations.iter().zip(&s.inventory.elements) {
                assert!(!a.scan_indices.is_empty());
                for &i in &a.scan_indices {
                    assert!(dist_to_box_surface(&s.scan.points[i as usize], &e.aabb) <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn layout_keeps_furniture_apart_and_elements_spaced() {
        for seed in 0..8 {
            let s = generate_scene(&SceneSpec {
                seed,
                fes_per_furniture: (3, 6),
                ..SceneSpec::default()
            })
            .unwrap();
            let objs = &s.inventory.objects;
            for i in 0..objs.len() {
                for j in i + 1..objs.len() {
                    assert!(objs[i].aabb.distance(&objs[j].aabb) >= FURNITURE_GAP);
                }
            }
            let els = &s.inventory.elements;
            for i in 0..els.len() {
                assert!(objs[els[i].parent]
                    .aabb
                    .inflate(0.05)
                    .contains(&els[i].aabb));
                for j in i + 1..els.len() {
                    assert!(els[i].aabb.distance(&els[j].aabb) >= 0.09);
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = SceneSpec::default();
        s.noise.drop_prob = 1.5;
        assert!(generate_scene(&s).is_err());
        let s = SceneSpec {
            room: [-1.0, 5.0, 2.6],
            ..SceneSpec::default()
        };
        assert!(generate_scene(&s).is_err());
    }
}
