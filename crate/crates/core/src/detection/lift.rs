use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{associate_fe_to_objects, Channel, Detection2D, FrameDetections, Segment3D};
use crate::geom::{back_project, keep_largest_cluster, voxel_subsample, DbscanParams, Frame};

/// Clustering used to denoise lifted masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiftConfig {
    pub object_dbscan: DbscanParams,
    pub fe_dbscan: DbscanParams,
    /// Voxel used to thin object clouds before clustering; `0` disables it.
    pub object_subsample: f64,
    pub fe_subsample: f64,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            object_dbscan: DbscanParams {
                eps: 0.05,
                min_pts: 10,
            },
            fe_dbscan: DbscanParams {
                eps: 0.02,
                min_pts: 5,
            },
            object_subsample: 0.01,
            fe_subsample: 0.0,
        }
    }
}

impl LiftConfig {
    fn for_channel(&self, channel: Channel) -> (DbscanParams, f64) {
        match channel {
            Channel::Object => (self.object_dbscan, self.object_subsample),
            Channel::FunctionalElement => (self.fe_dbscan, self.fe_subsample),
        }
    }
}

/// Back-projects the mask and keeps the largest DBSCAN cluster.
/// `det_index` and `parent_object` are left for the caller to set.
pub fn lift_detection(frame: &Frame, det: &Detection2D, cfg: &LiftConfig) -> Option<Segment3D> {
    let (params, voxel) = cfg.for_channel(det.channel);
    let mut cloud = back_project(frame, &det.mask);
    if voxel > 0.0 {
        cloud = voxel_subsample(&cloud, voxel).ok()?;
    }
    let cloud = keep_largest_cluster(&cloud, params);
    if cloud.is_empty() {
        return None;
    }
    Some(Segment3D {
        channel: det.channel,
        cloud,
        label: det.label.clone(),
        confidence: det.confidence,
        feature: det.feature.clone(),
        frame_id: frame.index,
        det_index: 0,
        parent_object: None,
    })
}

/// Segments of one frame, in detection order; detections that lift to nothing are skipped.
#[derive(Debug, Clone)]
pub struct LiftedFrame {
    pub frame_id: usize,
    pub objects: Vec<Segment3D>,
    pub functional_elements: Vec<Segment3D>,
}

/// Lifts every detection of an already filtered frame. Functional elements get
/// their 2D parent assignment; a parent whose own lift failed is dropped.
pub fn lift_frame(
    frame: &Frame,
    dets: &FrameDetections,
    theta_rel: f64,
    cfg: &LiftConfig,
) -> LiftedFrame {
    let parents = associate_fe_to_objects(&dets.objects, &dets.functional_elements, theta_rel);
    let lift_all = |list: &[Detection2D]| -> Vec<Option<Segment3D>> {
        list.par_iter()
            .enumerate()
            .map(|(i, d)| {
                lift_detection(frame, d, cfg).map(|mut s| {
                    s.det_index = i;
                    s
                })
            })
            .collect()
    };
    let objects: Vec<Segment3D> = lift_all(&dets.objects).into_iter().flatten().collect();
    let lifted: Vec<usize> = objects.iter().map(|s| s.det_index).collect();
    let functional_elements = lift_all(&dets.functional_elements)
        .into_iter()
        .flatten()
        .map(|mut s| {
            s.parent_object = parents[s.det_index].filter(|p| lifted.contains(p));
            s
        })
        .collect();
    LiftedFrame {
        frame_id: frame.index,
        objects,
        functional_elements,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{DepthMap, Intrinsics, PixelMask, Pose};

    const W: u32 = 160;
    const H: u32 = 120;

    fn frame(depth: DepthMap) -> Frame {
        Frame {
            index: 7,
            rgb_path: None,
            depth,
            pose: Pose::identity(),
            intrinsics: Intrinsics::new(150.0, 150.0, 79.5, 59.5, W, H).unwrap(),
        }
    }

    fn rect_mask(x0: u32, y0: u32, x1: u32, y1: u32) -> PixelMask {
        PixelMask::from_pixels(W, H, (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y)))).unwrap()
    }

    fn det(mask: PixelMask, channel: Channel) -> Detection2D {
        Detection2D {
            bbox: mask.bbox().unwrap(),
            label: "Rotate".into(),
            confidence: 0.9,
            mask,
            feature: vec![1.0],
            channel,
        }
    }

    fn no_subsample() -> LiftConfig {
        LiftConfig {
            object_subsample: 0.0,
            ..LiftConfig::default()
        }
    }

    #[test]
    fn flat_plane_is_one_cluster() {
        let f = frame(DepthMap::new(W, H, vec![1000; (W * H) as usize]).unwrap());
        let mask = rect_mask(40, 30, 80, 60);
        let seg = lift_detection(&f, &det(mask.clone(), Channel::Object), &no_subsample()).unwrap();
        assert_eq!(seg.cloud.len(), mask.len());
        assert_eq!(seg.frame_id, 7);
    }

    #[test]
    fn far_wall_behind_object_is_removed() {
        // Columns [40, 70) at 1 m, columns [70, 100) a wall at 3 m.
        let mut data = vec![3000u16; (W * H) as usize];
        for y in 0..H {
            for x in 40..70 {
                data[(y * W + x) as usize] = 1000;
            }
        }
        let f = frame(DepthMap::new(W, H, data).unwrap());
        // Larger share of the mask lies on the near surface.
        let mask = rect_mask(40, 30, 85, 60);
        let seg = lift_detection(&f, &det(mask, Channel::Object), &no_subsample()).unwrap();
        assert_eq!(seg.cloud.len(), 30 * 30);
        assert!(seg.cloud.points.iter().all(|p| (p.z - 1.0).abs() < 1e-12));
        // Near patch spans 30 pixels of 1/150 m each, measured center to center.
        let ext = seg.cloud.aabb().unwrap().extents();
        assert!((ext.x - 29.0 / 150.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_depth_gives_none() {
        let f = frame(DepthMap::empty(W, H));
        assert!(lift_detection(
            &f,
            &det(rect_mask(0, 0, 10, 10), Channel::Object),
            &LiftConfig::default()
        )
        .is_none());
    }

    #[test]
    fn lifted_cloud_is_subset_of_back_projection() {
        let mut data = vec![0u16; (W * H) as usize];
        for (i, d) in data.iter_mut().enumerate() {
            *d = 900 + ((i * 37) % 400) as u16;
        }
        let f = frame(DepthMap::new(W, H, data).unwrap());
        let mask = rect_mask(10, 10, 90, 70);
        let full = back_project(&f, &mask);
        let seg = lift_detection(&f, &det(mask, Channel::Object), &LiftConfig::default()).unwrap();
        assert!(seg.cloud.points.iter().all(|p| full.points.contains(p)));
    }

    #[test]
    fn frame_lift_links_fe_to_lifted_parent() {
        let f = frame(DepthMap::new(W, H, vec![1500; (W * H) as usize]).unwrap());
        let dets = FrameDetections {
            frame_id: 7,
            objects: vec![det(rect_mask(20, 20, 100, 100), Channel::Object)],
            functional_elements: vec![
                det(rect_mask(40, 40, 50, 50), Channel::FunctionalElement),
                det(rect_mask(110, 10, 120, 20), Channel::FunctionalElement),
            ],
        };
        let lifted = lift_frame(&f, &dets, 1.0, &LiftConfig::default());
        assert_eq!(lifted.objects.len(), 1);
        let parents: Vec<_> = lifted
            .functional_elements
            .iter()
            .map(|s| s.parent_object)
            .collect();
        assert_eq!(parents, vec![Some(0), None]);
        assert_eq!(lifted.functional_elements[1].det_index, 1);
    }
}
