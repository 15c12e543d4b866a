//! Labeled scenes and their on-disk manifest.
//!
//! A scene directory holds:
//!
//! * `scene.json`: scene id, relative paths of the scan and annotation files,
//!   and the frame table (RGB path, depth path, row-major 4x4 camera-to-world
//!   pose, `fx fy cx cy`, `width height`);
//! * the scan: little-endian records of three `f32` coordinates followed by
//!   three `u8` color channels (15 bytes per point);
//! * the annotation file: a JSON list of `{annot_id, affordance, indices}`;
//! * depth images: raw little-endian `u16` millimeters, row-major, no header.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affordance::{Affordance, AffordanceError};
use crate::geom::{DepthMap, Frame, GeomError, Intrinsics, Point3, PointCloud, Pose};

pub const SCENE_MANIFEST: &str = "scene.json";
const SCAN_RECORD: usize = 15;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("annotation {annot_id}: {source}")]
    Affordance {
        annot_id: String,
        #[source]
        source: AffordanceError,
    },
    #[error("annotation {0}: index set is empty or out of range")]
    BadAnnotation(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, SceneError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| SceneError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SceneError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// A 3D functional-element annotation: a subset of scan points with its affordance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation3D {
    pub annot_id: String,
    pub affordance: Affordance,
    #[serde(rename = "indices")]
    pub scan_indices: Vec<u32>,
}

impl Annotation3D {
    pub fn index_set(&self) -> BTreeSet<u32> {
        self.scan_indices.iter().copied().collect()
    }
}

#[derive(Debug, Clone)]
pub enum DepthSource {
    File(PathBuf),
    Memory(Arc<DepthMap>),
}

/// Frame table entry; the depth image is loaded on demand.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub rgb: Option<PathBuf>,
    pub depth: DepthSource,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

impl FrameRecord {
    pub fn load(&self, index: usize) -> Result<Frame, SceneError> {
        let depth = match &self.depth {
            DepthSource::Memory(d) => (**d).clone(),
            DepthSource::File(path) => {
                read_depth(path, self.intrinsics.width, self.intrinsics.height)?
            }
        };
        if depth.width != self.intrinsics.width || depth.height != self.intrinsics.height {
            return Err(SceneError::Format {
                path: PathBuf::from(format!("frame {index}")),
                msg: "depth size differs from intrinsics".into(),
            });
        }
        Ok(Frame {
            index,
            rgb_path: self.rgb.clone(),
            depth,
            pose: self.pose,
            intrinsics: self.intrinsics,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LabeledScene {
    pub scene_id: String,
    pub scan: PointCloud,
    pub annotations: Vec<Annotation3D>,
    pub frames: Vec<FrameRecord>,
    /// Annotations skipped while loading (excluded affordance labels).
    pub skipped_annotations: Vec<String>,
}

impl LabeledScene {
    pub fn validate(&self) -> Result<(), SceneError> {
        let n = self.scan.len() as u32;
        for a in &self.annotations {
            if a.scan_indices.is_empty() || a.scan_indices.iter().any(|&i| i >= n) {
                return Err(SceneError::BadAnnotation(a.annot_id.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameEntry {
    pub rgb: Option<String>,
    pub depth: String,
    pub pose: [f64; 16],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: String,
    pub scan: String,
    pub annotations: String,
    pub frames: Vec<FrameEntry>,
    /// Directory of per-frame detection files, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RawAnnotation {
    annot_id: String,
    affordance: String,
    indices: Vec<u32>,
}

pub fn read_scan(path: &Path) -> Result<PointCloud, SceneError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % SCAN_RECORD != 0 {
        return Err(SceneError::Format {
            path: path.to_path_buf(),
            msg: format!("length {} is not a multiple of {SCAN_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / SCAN_RECORD;
    let mut points = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(SCAN_RECORD) {
        let f = |k: usize| f32::from_le_bytes(rec[k * 4..k * 4 + 4].try_into().unwrap()) as f64;
        points.push(Point3::new(f(0), f(1), f(2)));
        colors.push([rec[12], rec[13], rec[14]]);
    }
    let mut cloud = PointCloud::from_points(points);
    if !cloud.is_finite() {
        return Err(SceneError::Format {
            path: path.to_path_buf(),
            msg: "non-finite coordinates".into(),
        });
    }
    cloud.colors = Some(colors);
    Ok(cloud)
}

pub fn write_scan(path: &Path, cloud: &PointCloud) -> Result<(), SceneError> {
    let mut bytes = Vec::with_capacity(cloud.len() * SCAN_RECORD);
    for (i, p) in cloud.points.iter().enumerate() {
        for v in [p.x, p.y, p.z] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let c = cloud.colors.as_ref().map_or([0, 0, 0], |c| c[i]);
        bytes.extend_from_slice(&c);
    }
    write_bytes(path, &bytes)
}

pub fn read_depth(path: &Path, width: u32, height: u32) -> Result<DepthMap, SceneError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let expected = width as usize * height as usize * 2;
    if bytes.len() != expected {
        return Err(SceneError::Format {
            path: path.to_path_buf(),
            msg: format!("expected {expected} bytes of depth, found {}", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    Ok(DepthMap::new(width, height, data)?)
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<(), SceneError> {
    let bytes: Vec<u8> = depth.data.iter().flat_map(|d| d.to_le_bytes()).collect();
    write_bytes(path, &bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), SceneError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads an annotation file, skipping excluded labels.
pub fn read_annotations(path: &Path) -> Result<(Vec<Annotation3D>, Vec<String>), SceneError> {
    let raw: Vec<RawAnnotation> = read_json(path)?;
    let mut out = Vec::with_capacity(raw.len());
    let mut skipped = Vec::new();
    for r in raw {
        match r.affordance.parse::<Affordance>() {
            Ok(affordance) => {
                let mut idx = r.indices;
                idx.sort_unstable();
                idx.dedup();
                out.push(Annotation3D {
                    annot_id: r.annot_id,
                    affordance,
                    scan_indices: idx,
                });
            }
            Err(AffordanceError::Excluded(label)) => {
                skipped.push(format!("{} ({label})", r.annot_id));
            }
            Err(source) => {
                return Err(SceneError::Affordance {
                    annot_id: r.annot_id,
                    source,
                })
            }
        }
    }
    Ok((out, skipped))
}

pub fn read_manifest(scene_dir: &Path) -> Result<SceneManifest, SceneError> {
    read_json(&scene_dir.join(SCENE_MANIFEST))
}

/// Loads a scene directory. Depth images stay on disk until a frame is loaded.
pub fn load_scene(scene_dir: &Path) -> Result<LabeledScene, SceneError> {
    let manifest = read_manifest(scene_dir)?;
    let scan = read_scan(&scene_dir.join(&manifest.scan))?;
    let (annotations, skipped_annotations) =
        read_annotations(&scene_dir.join(&manifest.annotations))?;
    let frames = manifest
        .frames
        .iter()
        .map(|f| {
            Ok(FrameRecord {
                rgb: f.rgb.as_ref().map(|p| scene_dir.join(p)),
                depth: DepthSource::File(scene_dir.join(&f.depth)),
                pose: Pose::from_row_major(&f.pose)?,
                intrinsics: Intrinsics::new(f.fx, f.fy, f.cx, f.cy, f.width, f.height)?,
            })
        })
        .collect::<Result<Vec<_>, SceneError>>()?;
    let scene = LabeledScene {
        scene_id: manifest.scene_id,
        scan,
        annotations,
        frames,
        skipped_annotations,
    };
    scene.validate()?;
    Ok(scene)
}

impl FrameEntry {
    pub fn new(rgb: Option<String>, depth: String, pose: &Pose, k: &Intrinsics) -> Self {
        Self {
            rgb,
            depth,
            pose: pose.to_row_major(),
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        }
    }
}

/// Writes scan, annotations and manifest. Frame files are the caller's job;
/// `manifest.frames` must already reference them.
pub fn write_scene(
    scene_dir: &Path,
    manifest: &SceneManifest,
    scan: &PointCloud,
    annotations: &[Annotation3D],
) -> Result<(), SceneError> {
    write_scan(&scene_dir.join(&manifest.scan), scan)?;
    write_json(&scene_dir.join(&manifest.annotations), &annotations)?;
    write_json(&scene_dir.join(SCENE_MANIFEST), manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_round_trip_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let mut cloud = PointCloud::from_points(vec![
            Point3::new(0.5, -1.25, 2.0),
            Point3::new(1.0, 2.0, 3.0),
        ]);
        cloud.colors = Some(vec![[1, 2, 3], [250, 0, 9]]);
        let path = dir.path().join("scan.bin");
        write_scan(&path, &cloud).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 30);
        assert_eq!(read_scan(&path).unwrap(), cloud);
    }

    #[test]
    fn truncated_scan_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.bin");
        fs::write(&path, [0u8; 16]).unwrap();
        assert!(matches!(read_scan(&path), Err(SceneError::Format { .. })));
    }

    #[test]
    fn annotations_skip_excluded_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        fs::write(
            &path,
            r#"[{"annot_id":"a","affordance":"Rotate","indices":[3,1,1]},
                {"annot_id":"b","affordance":"unplug","indices":[2]}]"#,
        )
        .unwrap();
        let (ann, skipped) = read_annotations(&path).unwrap();
        assert_eq!(ann.len(), 1);
        assert_eq!(ann[0].scan_indices, vec![1, 3]);
        assert_eq!(skipped.len(), 1);
    }

    #[test]
    fn depth_size_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.u16");
        write_depth(&path, &DepthMap::empty(4, 3)).unwrap();
        assert!(read_depth(&path, 4, 3).is_ok());
        assert!(read_depth(&path, 5, 3).is_err());
    }
}
