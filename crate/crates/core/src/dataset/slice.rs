use serde::{Deserialize, Serialize};

use super::{Dataset2D, DatasetAnnotation, DatasetImage, Patch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SliceConfig {
    pub patch_width: u32,
    pub patch_height: u32,
    /// Overlap between neighboring windows as a fraction of the patch size.
    pub overlap: f64,
    /// Minimum clipped / original box area for a box to stay in a patch.
    pub keep_ratio: f64,
    /// Clipped boxes must also stay strictly above this area [px²].
    pub min_area: f64,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            patch_width: 640,
            patch_height: 640,
            overlap: 0.2,
            keep_ratio: 0.6,
            min_area: 800.0,
        }
    }
}

/// Sliding windows `[x_min, y_min, x_max, y_max]` covering the image. Windows
/// that would cross the right or bottom border are shifted back inside it.
pub fn slice_windows(width: u32, height: u32, cfg: &SliceConfig) -> Vec<[u32; 4]> {
    let (sw, sh) = (cfg.patch_width, cfg.patch_height);
    let x_overlap = (cfg.overlap * sw as f64) as u32;
    let y_overlap = (cfg.overlap * sh as f64) as u32;
    let mut out = Vec::new();
    let mut y_min = 0;
    let mut y_max = 0;
    while y_max < height {
        let mut x_min = 0;
        let mut x_max = 0;
        y_max = y_min + sh;
        while x_max < width {
            x_max = x_min + sw;
            if y_max > height || x_max > width {
                let xm = width.min(x_max);
                let ym = height.min(y_max);
                out.push([xm.saturating_sub(sw), ym.saturating_sub(sh), xm, ym]);
            } else {
                out.push([x_min, y_min, x_max, y_max]);
            }
            x_min = x_max - x_overlap;
        }
        y_min = y_max - y_overlap;
    }
    out.dedup();
    out
}

fn clip(bbox: [f64; 4], w: [u32; 4]) -> Option<[f64; 4]> {
    let x0 = bbox[0].max(w[0] as f64);
    let y0 = bbox[1].max(w[1] as f64);
    let x1 = bbox[2].min(w[2] as f64);
    let y1 = bbox[3].min(w[3] as f64);
    (x1 > x0 && y1 > y0).then_some([x0, y0, x1, y1])
}

fn area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

/// Cuts every annotated image into overlapping patches. Only patches that
/// keep at least one box are emitted; background images are not sliced.
pub fn slice_dataset(ds: &Dataset2D, cfg: &SliceConfig) -> Dataset2D {
    let mut out = Dataset2D {
        images: Vec::new(),
        splits: ds.splits.clone(),
        warnings: ds.warnings.clone(),
    };
    for img in ds
        .images
        .iter()
        .filter(|i| !i.annotations.is_empty() && i.patch.is_none())
    {
        let padded = img.width < cfg.patch_width || img.height < cfg.patch_height;
        for w in slice_windows(img.width, img.height, cfg) {
            let annotations: Vec<DatasetAnnotation> = img
                .annotations
                .iter()
                .filter_map(|a| {
                    let c = clip(a.bbox, w)?;
                    let original = area(a.bbox);
                    if original <= 0.0
                        || area(c) / original < cfg.keep_ratio
                        || area(c) <= cfg.min_area
                    {
                        return None;
                    }
                    let (dx, dy) = (w[0] as f64, w[1] as f64);
                    Some(DatasetAnnotation {
                        bbox: [c[0] - dx, c[1] - dy, c[2] - dx, c[3] - dy],
                        affordance: a.affordance,
                        annot_id: a.annot_id.clone(),
                    })
                })
                .collect();
            if annotations.is_empty() {
                continue;
            }
            out.images.push(DatasetImage {
                scene_id: img.scene_id.clone(),
                frame_index: img.frame_index,
                image: img.image.clone(),
                width: cfg.patch_width,
                height: cfg.patch_height,
                split: img.split,
                background: false,
                patch: Some(Patch {
                    x_min: w[0],
                    y_min: w[1],
                    x_max: w[2],
                    y_max: w[3],
                    padded,
                }),
                annotations,
            });
        }
    }
    out
}
