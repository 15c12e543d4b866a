//! JSON detection interchange, one file per frame:
//!
//! ```json
//! {
//!   "frame_id": 12,
//!   "objects": [
//!     {"bbox": [x_min, y_min, x_max, y_max], "label": "cabinet", "confidence": 0.91,
//!      "rle_mask": {"size": [height, width], "counts": [..]},
//!      "feature": "<base64 of little-endian f32 values>"}
//!   ],
//!   "functional_elements": [ ... same record ... ]
//! }
//! ```
//!
//! `counts` are row-major run lengths that start with a run of unset pixels.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Channel, Detection2D, DetectionError, FrameDetections};
use crate::affordance::Affordance;
use crate::geom::{BBox2D, PixelMask};
use crate::scene::{read_json, write_json};

const FEATURE_NORM_TOL: f64 = 1e-6;
/// Tolerated mask overhang past the bbox, in pixels.
const MASK_BBOX_SLACK: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RleMask {
    /// `[height, width]`
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub bbox: [f64; 4],
    pub label: String,
    pub confidence: f64,
    pub rle_mask: RleMask,
    pub feature: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub frame_id: usize,
    pub objects: Vec<DetectionRecord>,
    pub functional_elements: Vec<DetectionRecord>,
}

pub fn encode_feature(feature: &[f64]) -> String {
    let bytes: Vec<u8> = feature
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    STANDARD.encode(bytes)
}

pub fn decode_feature(text: &str) -> Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err("feature byte length is not a multiple of 4".into());
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect())
}

impl DetectionRecord {
    pub fn from_detection(d: &Detection2D) -> Self {
        Self {
            bbox: d.bbox.to_array(),
            label: d.label.clone(),
            confidence: d.confidence,
            rle_mask: RleMask {
                size: [d.mask.height, d.mask.width],
                counts: d.mask.to_rle(),
            },
            feature: encode_feature(&d.feature),
        }
    }

    fn to_detection(&self, channel: Channel, ctx: &str) -> Result<Detection2D, DetectionError> {
        let bad = |msg: String| DetectionError::Format {
            path: ctx.to_string(),
            msg,
        };
        let [x0, y0, x1, y1] = self.bbox;
        let bbox = BBox2D::new(x0, y0, x1, y1);
        if !bbox.is_valid() || !self.bbox.iter().all(|v| v.is_finite()) {
            return Err(bad(format!("invalid bbox {:?}", self.bbox)));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(bad(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        if channel == Channel::FunctionalElement {
            self.label
                .parse::<Affordance>()
                .map_err(|e| bad(e.to_string()))?;
        }
        let [h, w] = self.rle_mask.size;
        let mask = PixelMask::from_rle(w, h, &self.rle_mask.counts)?;
        if let Some(mb) = mask.bbox() {
            let s = MASK_BBOX_SLACK;
            if mb.x_min < bbox.x_min - s
                || mb.y_min < bbox.y_min - s
                || mb.x_max > bbox.x_max + s
                || mb.y_max > bbox.y_max + s
            {
                return Err(bad("mask extends beyond its bbox".into()));
            }
        }
        let feature = decode_feature(&self.feature).map_err(bad)?;
        let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        // f32 storage limits the achievable precision of the norm.
        if norm != 0.0 && (norm - 1.0).abs() > FEATURE_NORM_TOL.max(feature.len() as f64 * 1e-7) {
            return Err(bad(format!("feature norm {norm} is neither 0 nor 1")));
        }
        Ok(Detection2D {
            bbox,
            label: self.label.clone(),
            confidence: self.confidence,
            mask,
            feature,
            channel,
        })
    }
}

impl DetectionFile {
    pub fn from_frame(f: &FrameDetections) -> Self {
        Self {
            frame_id: f.frame_id,
            objects: f
                .objects
                .iter()
                .map(DetectionRecord::from_detection)
                .collect(),
            functional_elements: f
                .functional_elements
                .iter()
                .map(DetectionRecord::from_detection)
                .collect(),
        }
    }

    pub fn into_frame(self, ctx: &str) -> Result<FrameDetections, DetectionError> {
        let objects = self
            .objects
            .iter()
            .map(|r| r.to_detection(Channel::Object, ctx))
            .collect::<Result<_, _>>()?;
        let functional_elements = self
            .functional_elements
            .iter()
            .map(|r| r.to_detection(Channel::FunctionalElement, ctx))
            .collect::<Result<_, _>>()?;
        Ok(FrameDetections {
            frame_id: self.frame_id,
            objects,
            functional_elements,
        })
    }
}

pub fn read_detections(path: &Path) -> Result<FrameDetections, DetectionError> {
    let file: DetectionFile = read_json(path)?;
    file.into_frame(&path.display().to_string())
}

pub fn write_detections(path: &Path, frame: &FrameDetections) -> Result<(), DetectionError> {
    Ok(write_json(path, &DetectionFile::from_frame(frame))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> FrameDetections {
        let mask = PixelMask::from_pixels(8, 6, [(1, 1), (2, 1), (2, 2)]).unwrap();
        FrameDetections {
            frame_id: 3,
            objects: vec![Detection2D {
                bbox: BBox2D::new(1.0, 1.0, 3.0, 3.0),
                label: "cabinet".into(),
                confidence: 0.75,
                mask: mask.clone(),
                feature: vec![0.5, 0.5, 0.5, 0.5],
                channel: Channel::Object,
            }],
            functional_elements: vec![Detection2D {
                bbox: BBox2D::new(2.0, 1.0, 3.0, 2.0),
                label: "Rotate".into(),
                confidence: 0.5,
                mask,
                feature: vec![0.0; 4],
                channel: Channel::FunctionalElement,
            }],
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("000003.json");
        write_detections(&path, &sample()).unwrap();
        assert_eq!(read_detections(&path).unwrap(), sample());
    }

    #[test]
    fn rejects_non_unit_feature_and_unknown_affordance() {
        let mut file = DetectionFile::from_frame(&sample());
        file.objects[0].feature = encode_feature(&[0.5, 0.5]);
        assert!(file.clone().into_frame("t").is_err());
        let mut file = DetectionFile::from_frame(&sample());
        file.functional_elements[0].label = "knob".into();
        assert!(file.into_frame("t").is_err());
    }

    #[test]
    fn rejects_rle_not_covering_image() {
        let mut file = DetectionFile::from_frame(&sample());
        file.objects[0].rle_mask.counts.push(4);
        assert!(file.into_frame("t").is_err());
    }

    proptest! {
        #[test]
        fn feature_encoding_round_trips_f32(values in prop::collection::vec(-1.0f32..1.0, 0..64)) {
            let f: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            prop_assert_eq!(decode_feature(&encode_feature(&f)).unwrap(), f);
        }
    }
}
