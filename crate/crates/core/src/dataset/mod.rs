//! 2D functional-element detection datasets projected from 3D-annotated scans.

mod slice;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::affordance::Affordance;
use crate::geom::{project_points, BBox2D, Frame, PointCloud, Visibility};
use crate::scene::{write_json, Annotation3D, LabeledScene, SceneError};

pub use slice::{slice_dataset, slice_windows, SliceConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    /// Occlusion tolerance between rendered depth and projected depth [m].
    pub theta_depth: f64,
    /// Minimum box area [px²]; boxes must be strictly larger.
    pub theta_area: f64,
    /// Minimum share of annotation points that survive projection.
    pub theta_points: f64,
    pub background_fraction: f64,
    /// Share of scenes assigned to the training split.
    pub split_ratio: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            theta_depth: 0.1,
            theta_area: 800.0,
            theta_points: 0.6,
            background_fraction: 0.01,
            split_ratio: 0.8,
        }
    }
}

/// Result of projecting one annotation into one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedAnnotation {
    pub bbox: BBox2D,
    pub affordance: Affordance,
    pub visible_points: usize,
    pub total_points: usize,
}

impl ProjectedAnnotation {
    pub fn visible_ratio(&self) -> f64 {
        self.visible_points as f64 / self.total_points as f64
    }
}

/// Projects an annotation and applies the frustum, occlusion, visibility and
/// area filters. Returns `None` when the annotation is rejected.
pub fn project_annotation(
    frame: &Frame,
    annot: &Annotation3D,
    scan: &PointCloud,
    cfg: &ProjectionConfig,
) -> Option<ProjectedAnnotation> {
    let total = annot.scan_indices.len();
    if total == 0 {
        return None;
    }
    let idx: Vec<usize> = annot.scan_indices.iter().map(|&i| i as usize).collect();
    let pts = scan.select(&idx);
    let proj = project_points(&frame.intrinsics, &frame.pose, &pts).ok()?;
    let mut visible = 0usize;
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
    for p in &proj {
        if p.visibility != Visibility::InImage {
            continue;
        }
        let (x, y) = p.pixel();
        let Some(d) = frame.depth.meters(x, y) else {
            continue;
        };
        if (d - p.z).abs() > cfg.theta_depth {
            continue;
        }
        visible += 1;
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if visible == 0 || (visible as f64) < cfg.theta_points * total as f64 {
        return None;
    }
    let bbox = BBox2D::from_pixel_span(x0, y0, x1, y1);
    if bbox.area() <= cfg.theta_area {
        return None;
    }
    Some(ProjectedAnnotation {
        bbox,
        affordance: annot.affordance,
        visible_points: visible,
        total_points: total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Scene-level split from a seeded hash, so every image of a scene lands in
/// the same split.
pub fn assign_split(scene_id: &str, seed: u64, train_ratio: f64) -> Split {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(scene_id.as_bytes());
    let digest = h.finalize();
    let x = u64::from_le_bytes(digest[..8].try_into().unwrap()) as f64 / 2f64.powi(64);
    if x < train_ratio {
        Split::Train
    } else {
        Split::Val
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetAnnotation {
    /// Absolute pixels `[x_min, y_min, x_max, y_max]`.
    pub bbox: [f64; 4],
    pub affordance: Affordance,
    pub annot_id: String,
}

/// Window of a sliced image, in source-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
    /// True when the image was smaller than the nominal patch size.
    pub padded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetImage {
    pub scene_id: String,
    pub frame_index: usize,
    pub image: Option<String>,
    pub width: u32,
    pub height: u32,
    pub split: Split,
    pub background: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<Patch>,
    pub annotations: Vec<DatasetAnnotation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset2D {
    pub images: Vec<DatasetImage>,
    pub splits: BTreeMap<String, Split>,
    /// Scenes or frames that could not be processed.
    pub warnings: Vec<String>,
}

impl Dataset2D {
    pub fn annotation_count(&self) -> usize {
        self.images.iter().map(|i| i.annotations.len()).sum()
    }

    pub fn annotated_image_count(&self) -> usize {
        self.images
            .iter()
            .filter(|i| !i.annotations.is_empty())
            .count()
    }

    pub fn images_in(&self, split: Split) -> impl Iterator<Item = &DatasetImage> {
        self.images.iter().filter(move |i| i.split == split)
    }
}

struct FrameResult {
    image: DatasetImage,
    warning: Option<String>,
}

fn process_frame(
    scene: &LabeledScene,
    fi: usize,
    split: Split,
    cfg: &ProjectionConfig,
) -> FrameResult {
    let rec = &scene.frames[fi];
    let mut image = DatasetImage {
        scene_id: scene.scene_id.clone(),
        frame_index: fi,
        image: rec.rgb.as_ref().map(|p| p.display().to_string()),
        width: rec.intrinsics.width,
        height: rec.intrinsics.height,
        split,
        background: false,
        patch: None,
        annotations: Vec::new(),
    };
    let frame = match rec.load(fi) {
        Ok(f) => f,
        Err(e) => {
            return FrameResult {
                image,
                warning: Some(format!("{} frame {fi}: {e}", scene.scene_id)),
            }
        }
    };
    for a in &scene.annotations {
        if let Some(p) = project_annotation(&frame, a, &scene.scan, cfg) {
            image.annotations.push(DatasetAnnotation {
                bbox: p.bbox.to_array(),
                affordance: p.affordance,
                annot_id: a.annot_id.clone(),
            });
        }
    }
    FrameResult {
        image,
        warning: None,
    }
}

/// Projects every annotation into every frame, adds seeded background images
/// and assigns scene-level splits. Output order is (scene order, frame index).
pub fn build_dataset(scenes: &[LabeledScene], cfg: &ProjectionConfig, seed: u64) -> Dataset2D {
    let mut ds = Dataset2D::default();
    let mut candidates = Vec::new();
    for scene in scenes {
        let split = assign_split(&scene.scene_id, seed, cfg.split_ratio);
        ds.splits.insert(scene.scene_id.clone(), split);
        if scene.frames.is_empty() {
            let msg = format!("{}: scene has no frames, skipped", scene.scene_id);
            warn!("{msg}");
            ds.warnings.push(msg);
            continue;
        }
        let results: Vec<FrameResult> = (0..scene.frames.len())
            .into_par_iter()
            .map(|fi| process_frame(scene, fi, split, cfg))
            .collect();
        for r in results {
            if let Some(w) = r.warning {
                warn!("{w}");
                ds.warnings.push(w);
            } else if r.image.annotations.is_empty() {
                candidates.push(r.image);
            } else {
                ds.images.push(r.image);
            }
        }
    }
    let n_background = (cfg.background_fraction * ds.images.len() as f64).floor() as usize;
    let n_background = n_background.min(candidates.len());
    if n_background > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = sample(&mut rng, candidates.len(), n_background).into_vec();
        picked.sort_unstable();
        for i in picked {
            let mut img = candidates[i].clone();
            img.background = true;
            ds.images.push(img);
        }
        let order: BTreeMap<&str, usize> = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| (s.scene_id.as_str(), i))
            .collect();
        ds.images.sort_by_key(|img| {
            (
                order[img.scene_id.as_str()],
                img.frame_index,
                img.patch.map(|p| (p.y_min, p.x_min)),
            )
        });
    }
    ds
}

#[derive(Debug, Clone, Serialize)]
struct SplitManifest<'a> {
    split: Split,
    images: Vec<&'a DatasetImage>,
}

/// Writes `train.json` and `val.json` (and optionally per-image label files
/// under `labels/<split>/`, one `class cx cy w h` line per box, normalized).
pub fn write_dataset(dir: &Path, ds: &Dataset2D, label_files: bool) -> Result<(), SceneError> {
    for split in [Split::Train, Split::Val] {
        let manifest = SplitManifest {
            split,
            images: ds.images_in(split).collect(),
        };
        write_json(&dir.join(format!("{}.json", split.name())), &manifest)?;
        if label_files {
            let label_dir = dir.join("labels").join(split.name());
            std::fs::create_dir_all(&label_dir).map_err(crate::scene::io_err(&label_dir))?;
            for img in &manifest.images {
                let path = label_dir.join(label_file_name(img));
                std::fs::write(&path, label_lines(img)).map_err(crate::scene::io_err(&path))?;
            }
        }
    }
    Ok(())
}

fn label_file_name(img: &DatasetImage) -> String {
    match img.patch {
        Some(p) => format!(
            "{}_{:06}_{}_{}.txt",
            img.scene_id, img.frame_index, p.x_min, p.y_min
        ),
        None => format!("{}_{:06}.txt", img.scene_id, img.frame_index),
    }
}

/// Normalized center/size lines; patch-relative for sliced images.
pub fn label_lines(img: &DatasetImage) -> String {
    let mut out = String::new();
    let (w, h) = (img.width as f64, img.height as f64);
    for a in &img.annotations {
        let [x0, y0, x1, y1] = a.bbox;
        let _ = writeln!(
            out,
            "{} {:.6} {:.6} {:.6} {:.6}",
            a.affordance.index(),
            (x0 + x1) / 2.0 / w,
            (y0 + y1) / 2.0 / h,
            (x1 - x0) / w,
            (y1 - y0) / h
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{DepthMap, Intrinsics, Point3, Pose};
    use crate::scene::{DepthSource, FrameRecord};
    use std::sync::Arc;

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 319.5, 239.5, 640, 480).unwrap()
    }

    /// Square grid of points on the plane z = `z`, centered on the optical axis.
    fn square(z: f64, half: f64, n: usize) -> Vec<Point3> {
        let step = 2.0 * half / n as f64;
        (0..n)
            .flat_map(|i| {
                (0..n).map(move |j| {
                    Point3::new(
                        -half + (i as f64 + 0.25) * step,
                        -half + (j as f64 + 0.25) * step,
                        z,
                    )
                })
            })
            .collect()
    }

    fn frame_with(depth: DepthMap) -> Frame {
        Frame {
            index: 0,
            rgb_path: None,
            depth,
            pose: Pose::identity(),
            intrinsics: k(),
        }
    }

    fn annot(n: usize) -> Annotation3D {
        Annotation3D {
            annot_id: "a".into(),
            affordance: Affordance::Rotate,
            scan_indices: (0..n as u32).collect(),
        }
    }

    /// Depth map rendered from a set of planes: `(z, x-range in pixels)`.
    fn plane_depth(layers: &[(f64, std::ops::Range<u32>)]) -> DepthMap {
        let mut d = DepthMap::empty(640, 480);
        for y in 0..480 {
            for x in 0..640 {
                let z = layers
                    .iter()
                    .filter(|(_, r)| r.contains(&x))
                    .map(|(z, _)| *z)
                    .fold(f64::INFINITY, f64::min);
                if z.is_finite() {
                    d.data[(y * 640 + x) as usize] = (z * 1000.0).round() as u16;
                }
            }
        }
        d
    }

    #[test]
    fn behind_camera_is_rejected() {
        let scan = PointCloud::from_points(square(-1.0, 0.05, 20));
        let f = frame_with(plane_depth(&[(1.0, 0..640)]));
        assert!(project_annotation(&f, &annot(400), &scan, &ProjectionConfig::default()).is_none());
    }

    #[test]
    fn unoccluded_40px_square_is_accepted() {
        // 0.08 m at 1 m with f = 500 spans 40 px.
        let scan = PointCloud::from_points(square(1.0, 0.04, 40));
        let f = frame_with(plane_depth(&[(1.0, 0..640)]));
        let p = project_annotation(&f, &annot(1600), &scan, &ProjectionConfig::default()).unwrap();
        assert_eq!(p.bbox.area(), 1600.0);
        assert_eq!(p.visible_points, 1600);
    }

    #[test]
    fn small_box_fails_area_threshold() {
        let scan = PointCloud::from_points(square(1.0, 0.02, 20));
        let f = frame_with(plane_depth(&[(1.0, 0..640)]));
        assert!(project_annotation(&f, &annot(400), &scan, &ProjectionConfig::default()).is_none());
    }

    #[test]
    fn occluder_ratio_matches_per_point_oracle() {
        let scan = PointCloud::from_points(square(2.0, 0.2, 60));
        let cfg = ProjectionConfig::default();
        for occluder_end in [300u32, 320, 330, 340, 360] {
            // An occluder at 1 m covers columns [0, occluder_end).
            let f = frame_with(plane_depth(&[(2.0, 0..640), (1.0, 0..occluder_end)]));
            let visible = scan
                .points
                .iter()
                .filter(|p| {
                    let u = (500.0 * p.x / p.z + 319.5).floor() as u32;
                    u >= occluder_end
                })
                .count();
            let expect = visible as f64 >= 0.6 * scan.len() as f64;
            let got = project_annotation(&f, &annot(scan.len()), &scan, &cfg);
            assert_eq!(got.is_some(), expect, "occluder to column {occluder_end}");
            if let Some(p) = got {
                assert_eq!(p.visible_points, visible);
            }
        }
    }

    fn memory_scene(id: &str, n_frames: usize, visible: bool) -> LabeledScene {
        let scan = PointCloud::from_points(square(1.0, 0.04, 40));
        let depth = Arc::new(plane_depth(&[(if visible { 1.0 } else { 0.5 }, 0..640)]));
        LabeledScene {
            scene_id: id.into(),
            scan,
            annotations: vec![annot(1600)],
            frames: (0..n_frames)
                .map(|_| FrameRecord {
                    rgb: None,
                    depth: DepthSource::Memory(depth.clone()),
                    pose: Pose::identity(),
                    intrinsics: k(),
                })
                .collect(),
            skipped_annotations: vec![],
        }
    }

    #[test]
    fn nothing_visible_gives_empty_dataset() {
        let ds = build_dataset(
            &[memory_scene("s", 10, false)],
            &ProjectionConfig::default(),
            1,
        );
        assert!(ds.images.is_empty());
    }

    #[test]
    fn background_count_is_floor_of_fraction() {
        let mut scenes: Vec<LabeledScene> = (0..3)
            .map(|i| memory_scene(&format!("v{i}"), 50, true))
            .collect();
        scenes.push(memory_scene("hidden", 20, false));
        let ds = build_dataset(&scenes, &ProjectionConfig::default(), 3);
        assert_eq!(ds.annotated_image_count(), 150);
        assert_eq!(ds.images.iter().filter(|i| i.background).count(), 1);
        assert_eq!(ds, build_dataset(&scenes, &ProjectionConfig::default(), 3));
    }

    #[test]
    fn frameless_scene_is_skipped_with_warning() {
        let ds = build_dataset(
            &[memory_scene("e", 0, true)],
            &ProjectionConfig::default(),
            0,
        );
        assert_eq!(ds.warnings.len(), 1);
    }

    #[test]
    fn splits_are_scene_disjoint() {
        let scenes: Vec<LabeledScene> = (0..20)
            .map(|i| memory_scene(&format!("s{i}"), 2, true))
            .collect();
        let ds = build_dataset(&scenes, &ProjectionConfig::default(), 9);
        for img in &ds.images {
            assert_eq!(img.split, ds.splits[&img.scene_id]);
        }
        let train = ds.splits.values().filter(|&&s| s == Split::Train).count();
        assert!(train > 0 && train < 20);
    }

    #[test]
    fn label_lines_are_normalized() {
        let img = DatasetImage {
            scene_id: "s".into(),
            frame_index: 0,
            image: None,
            width: 100,
            height: 50,
            split: Split::Train,
            background: false,
            patch: None,
            annotations: vec![DatasetAnnotation {
                bbox: [10.0, 10.0, 30.0, 20.0],
                affordance: Affordance::KeyPress,
                annot_id: "a".into(),
            }],
        };
        assert_eq!(label_lines(&img), "3 0.200000 0.300000 0.200000 0.200000\n");
    }
}
