//! Per-frame 2D detections: interchange parsing, filtering, functional
//! element to object association and lifting of masks to 3D segments.

mod interchange;
mod lift;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{bbox_containment, BBox2D, GeomError, PixelMask, PointCloud};

pub use interchange::{read_detections, write_detections, DetectionFile, DetectionRecord, RleMask};
pub use lift::{lift_detection, lift_frame, LiftConfig, LiftedFrame};

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Object,
    FunctionalElement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection2D {
    pub bbox: BBox2D,
    pub label: String,
    pub confidence: f64,
    pub mask: PixelMask,
    /// Unit-norm embedding (all-zero allowed for fixtures).
    pub feature: Vec<f64>,
    pub channel: Channel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub frame_id: usize,
    pub objects: Vec<Detection2D>,
    pub functional_elements: Vec<Detection2D>,
}

impl FrameDetections {
    pub fn empty(frame_id: usize) -> Self {
        Self {
            frame_id,
            objects: Vec::new(),
            functional_elements: Vec::new(),
        }
    }
}

/// A detection lifted to 3D.
#[derive(Debug, Clone)]
pub struct Segment3D {
    pub channel: Channel,
    pub cloud: PointCloud,
    pub label: String,
    pub confidence: f64,
    pub feature: Vec<f64>,
    pub frame_id: usize,
    /// Index of the detection within its channel list of the frame.
    pub det_index: usize,
    /// For functional elements: index of the associated object detection.
    pub parent_object: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RareaDirection {
    /// Drop detections covering more than the threshold share of the image.
    DiscardAbove,
    /// Literal reading: drop detections covering less than the threshold.
    DiscardBelow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub theta_bbox: f64,
    pub theta_rarea: f64,
    pub theta_rel: f64,
    pub rarea_direction: RareaDirection,
    /// Apply the relative-area filter to functional elements as well.
    pub rarea_on_fes: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            theta_bbox: 0.4,
            theta_rarea: 0.7,
            theta_rel: 1.0,
            rarea_direction: RareaDirection::DiscardAbove,
            rarea_on_fes: false,
        }
    }
}

/// Containment slack used when `theta_rel` asks for full containment.
const CONTAINMENT_EPS: f64 = 1e-9;

fn passes_rarea(det: &Detection2D, cfg: &FilterConfig, image_area: f64) -> bool {
    let ratio = det.bbox.area() / image_area;
    match cfg.rarea_direction {
        RareaDirection::DiscardAbove => ratio <= cfg.theta_rarea,
        RareaDirection::DiscardBelow => ratio >= cfg.theta_rarea,
    }
}

/// Drops low-confidence detections and (for objects) boxes with an
/// out-of-range image-area ratio. Order is preserved.
pub fn filter_detections(
    dets: &FrameDetections,
    cfg: &FilterConfig,
    image_width: u32,
    image_height: u32,
) -> FrameDetections {
    let image_area = image_width as f64 * image_height as f64;
    let objects = dets
        .objects
        .iter()
        .filter(|d| d.confidence >= cfg.theta_bbox && passes_rarea(d, cfg, image_area))
        .cloned()
        .collect();
    let functional_elements = dets
        .functional_elements
        .iter()
        .filter(|d| {
            d.confidence >= cfg.theta_bbox
                && (!cfg.rarea_on_fes || passes_rarea(d, cfg, image_area))
        })
        .cloned()
        .collect();
    FrameDetections {
        frame_id: dets.frame_id,
        objects,
        functional_elements,
    }
}

/// Assigns each functional element to the smallest object box containing it
/// by at least `theta_rel`; `None` marks a parentless element.
pub fn associate_fe_to_objects(
    objects: &[Detection2D],
    fes: &[Detection2D],
    theta_rel: f64,
) -> Vec<Option<usize>> {
    fes.iter()
        .map(|fe| {
            objects
                .iter()
                .enumerate()
                .filter(|(_, o)| bbox_containment(&fe.bbox, &o.bbox) >= theta_rel - CONTAINMENT_EPS)
                .min_by(|(ia, a), (ib, b)| a.bbox.area().total_cmp(&b.bbox.area()).then(ia.cmp(ib)))
                .map(|(i, _)| i)
        })
        .collect()
}
