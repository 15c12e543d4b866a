//! Full graph snapshot in one file:
//!
//! ```text
//! b"FGCK" | u32 version | u64 header length | JSON header | clouds
//! ```
//!
//! All integers are little-endian. The header holds every node field except
//! the clouds, plus the point count of each node in id order; the clouds
//! follow as consecutive `f64` xyz triples.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraphError, NodeId, SceneGraph};
use crate::geom::{Point3, PointCloud};
use crate::scene::io_err;

const MAGIC: &[u8; 4] = b"FGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    graph: SceneGraph,
    cloud_sizes: Vec<(NodeId, usize)>,
}

pub fn save_checkpoint(path: &Path, graph: &SceneGraph) -> Result<(), GraphError> {
    let header = Header {
        graph: graph.clone(),
        cloud_sizes: graph
            .nodes
            .values()
            .map(|n| (n.id, n.cloud.len()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("serializable graph");
    let n_points: usize = header.cloud_sizes.iter().map(|(_, n)| n).sum();
    let mut bytes = Vec::with_capacity(16 + json.len() + n_points * 24);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for n in graph.nodes.values() {
        for p in &n.cloud.points {
            for v in [p.x, p.y, p.z] {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SceneGraph, GraphError> {
    let bad = |msg: &str| GraphError::Checkpoint {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a graph checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut graph = header.graph;
    let mut cursor = 16 + hlen;
    for (id, n) in header.cloud_sizes {
        let end = cursor + n * 24;
        let chunk = bytes
            .get(cursor..end)
            .ok_or_else(|| bad("truncated cloud data"))?;
        let points = chunk
            .chunks_exact(24)
            .map(|c| {
                let f = |k: usize| f64::from_le_bytes(c[k * 8..k * 8 + 8].try_into().unwrap());
                Point3::new(f(0), f(1), f(2))
            })
            .collect();
        graph
            .nodes
            .get_mut(&id)
            .ok_or_else(|| bad("cloud for unknown node"))?
            .cloud = PointCloud::from_points(points);
        cursor = end;
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(graph)
}
