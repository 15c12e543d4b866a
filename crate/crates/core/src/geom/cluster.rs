use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::kdtree::KdTree;
use super::types::PointCloud;

pub const NOISE: i32 = -1;
const UNVISITED: i32 = -2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

/// Density-based clustering. Labels are `0..k` in order of discovery, noise is [`NOISE`].
///
/// A point's neighborhood includes the point itself, so `min_pts = 1` makes
/// every point a core point.
pub fn dbscan(cloud: &PointCloud, eps: f64, min_pts: usize) -> Vec<i32> {
    let n = cloud.len();
    let mut labels = vec![UNVISITED; n];
    if n == 0 {
        return labels;
    }
    let tree = KdTree::new(&cloud.points);
    let mut cluster = 0;
    let mut queue = VecDeque::new();
    for i in 0..n {
        if labels[i] != UNVISITED {
            continue;
        }
        let nbrs = tree.within_radius(&cloud.points[i], eps);
        if nbrs.len() < min_pts {
            labels[i] = NOISE;
            continue;
        }
        labels[i] = cluster;
        queue.extend(nbrs);
        while let Some(j) = queue.pop_front() {
            if labels[j] == NOISE {
                labels[j] = cluster;
            }
            if labels[j] != UNVISITED {
                continue;
            }
            labels[j] = cluster;
            let nj = tree.within_radius(&cloud.points[j], eps);
            if nj.len() >= min_pts {
                queue.extend(nj.into_iter().filter(|&k| labels[k] < 0));
            }
        }
        cluster += 1;
    }
    labels
}

/// Indices (ascending) of the most populated cluster; ties go to the earlier label.
pub fn largest_cluster(labels: &[i32]) -> Vec<usize> {
    let k = labels.iter().copied().max().unwrap_or(NOISE);
    if k < 0 {
        return Vec::new();
    }
    let mut counts = vec![0usize; k as usize + 1];
    for &l in labels.iter().filter(|&&l| l >= 0) {
        counts[l as usize] += 1;
    }
    let best = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(l, _)| l as i32)
        .unwrap();
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == best)
        .map(|(i, _)| i)
        .collect()
}

/// Runs DBSCAN and keeps only the largest cluster.
pub fn keep_largest_cluster(cloud: &PointCloud, params: DbscanParams) -> PointCloud {
    let labels = dbscan(cloud, params.eps, params.min_pts);
    cloud.select(&largest_cluster(&labels))
}
