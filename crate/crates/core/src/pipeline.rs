//! Scene-level graph construction: filter, lift and ingest every frame.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{
    filter_detections, lift_frame, read_detections, DetectionError, FilterConfig, FrameDetections,
    LiftConfig, LiftedFrame,
};
use crate::graph::{GraphBuilder, GraphConfig, GraphError, SceneGraph};
use crate::scene::{LabeledScene, SceneError, SceneManifest};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub filter: FilterConfig,
    pub lift: LiftConfig,
    pub graph: GraphConfig,
}

/// File name of the detections of frame `index`.
pub fn detection_file_name(index: usize) -> String {
    format!("{index:06}.json")
}

/// Detections of every frame listed in the manifest; missing files count as empty frames.
pub fn load_detections(
    scene_dir: &Path,
    manifest: &SceneManifest,
) -> Result<Vec<FrameDetections>, PipelineError> {
    let Some(dir) = &manifest.detections else {
        return Ok((0..manifest.frames.len())
            .map(FrameDetections::empty)
            .collect());
    };
    let dir = scene_dir.join(dir);
    (0..manifest.frames.len())
        .into_par_iter()
        .map(|i| {
            let path = dir.join(detection_file_name(i));
            if !path.exists() {
                return Ok(FrameDetections::empty(i));
            }
            let mut f = read_detections(&path)?;
            f.frame_id = i;
            Ok(f)
        })
        .collect()
}

fn lift_one(
    scene: &LabeledScene,
    dets: &FrameDetections,
    cfg: &PipelineConfig,
) -> Result<LiftedFrame, PipelineError> {
    let frame = scene.frames[dets.frame_id].load(dets.frame_id)?;
    let k = frame.intrinsics;
    let kept = filter_detections(dets, &cfg.filter, k.width, k.height);
    Ok(lift_frame(&frame, &kept, cfg.filter.theta_rel, &cfg.lift))
}

/// Feeds frames `start..` into `builder`. Frames are lifted in parallel in
/// chunks and ingested in order.
pub fn ingest_scene(
    builder: &mut GraphBuilder,
    scene: &LabeledScene,
    detections: &[FrameDetections],
    cfg: &PipelineConfig,
    start: usize,
) -> Result<(), PipelineError> {
    let chunk = rayon::current_num_threads().max(1) * 2;
    let todo: Vec<&FrameDetections> = detections.iter().filter(|d| d.frame_id >= start).collect();
    for part in todo.chunks(chunk) {
        let lifted: Vec<LiftedFrame> = part
            .par_iter()
            .map(|d| lift_one(scene, d, cfg))
            .collect::<Result<_, _>>()?;
        for f in &lifted {
            builder.ingest(f)?;
        }
    }
    Ok(())
}

pub fn build_graph(
    scene: &LabeledScene,
    detections: &[FrameDetections],
    cfg: &PipelineConfig,
) -> Result<SceneGraph, PipelineError> {
    let mut builder = GraphBuilder::new(cfg.graph.clone());
    ingest_scene(&mut builder, scene, detections, cfg, 0)?;
    Ok(builder.finish())
}
