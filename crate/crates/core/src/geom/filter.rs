use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::kdtree::KdTree;
use super::types::{Point3, PointCloud};
use super::GeomError;

type VoxelKey = (i64, i64, i64);

fn voxel_key(p: &Point3, voxel: f64) -> VoxelKey {
    (
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    )
}

/// Replaces the points of every occupied voxel by their centroid.
///
/// The grid is anchored at the world origin; output is ordered by voxel key.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud, GeomError> {
    if !(voxel > 0.0) {
        return Err(GeomError::InvalidParameter("voxel size must be positive"));
    }
    #[derive(Default)]
    struct Acc {
        sum: Point3,
        rgb: [u64; 3],
        n: usize,
    }
    let mut cells: BTreeMap<VoxelKey, Acc> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let acc = cells.entry(voxel_key(p, voxel)).or_default();
        acc.sum += p;
        acc.n += 1;
        if let Some(c) = &cloud.colors {
            for k in 0..3 {
                acc.rgb[k] += c[i][k] as u64;
            }
        }
    }
    let mut out = PointCloud::from_points(Vec::with_capacity(cells.len()));
    let mut colors = cloud
        .colors
        .as_ref()
        .map(|_| Vec::with_capacity(cells.len()));
    for acc in cells.values() {
        if acc.n == 1 {
            out.points.push(acc.sum);
        } else {
            out.points.push(acc.sum / acc.n as f64);
        }
        if let Some(c) = colors.as_mut() {
            let n = acc.n as u64;
            c.push([
                ((acc.rgb[0] + n / 2) / n) as u8,
                ((acc.rgb[1] + n / 2) / n) as u8,
                ((acc.rgb[2] + n / 2) / n) as u8,
            ]);
        }
    }
    out.colors = colors;
    Ok(out)
}

/// Keeps the first point (in input order) of every occupied voxel, so the
/// result is a subset of the input.
pub fn voxel_subsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud, GeomError> {
    if !(voxel > 0.0) {
        return Err(GeomError::InvalidParameter("voxel size must be positive"));
    }
    let mut seen = HashSet::with_capacity(cloud.len() / 4);
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| seen.insert(voxel_key(&cloud.points[i], voxel)))
        .collect();
    Ok(cloud.select(&keep))
}

/// Appends the points of `incoming` whose grid cell is not yet occupied by
/// `base`. Existing points are never moved or removed.
pub fn merge_dedup(base: &mut PointCloud, incoming: &PointCloud, cell: f64) {
    let mut occupied: HashSet<VoxelKey> = base.points.iter().map(|p| voxel_key(p, cell)).collect();
    let mut keep = Vec::new();
    for (i, p) in incoming.points.iter().enumerate() {
        if occupied.insert(voxel_key(p, cell)) {
            keep.push(i);
        }
    }
    base.extend(&incoming.select(&keep));
}

/// Radius-outlier then statistical-outlier removal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiseParams {
    /// Neighborhood radius of the radius filter [m].
    pub radius: f64,
    /// Minimum neighbors (excluding the point itself) within `radius`.
    pub min_neighbors: usize,
    /// Neighbor count for the mean-distance statistic.
    pub k: usize,
    /// Points whose mean k-NN distance exceeds `mean + std_ratio · stddev` are dropped.
    pub std_ratio: f64,
}

impl Default for DenoiseParams {
    fn default() -> Self {
        Self {
            radius: 0.03,
            min_neighbors: 3,
            k: 8,
            std_ratio: 3.0,
        }
    }
}

pub fn radius_outlier_filter(cloud: &PointCloud, radius: f64, min_neighbors: usize) -> PointCloud {
    if cloud.is_empty() {
        return cloud.clone();
    }
    let tree = KdTree::new(&cloud.points);
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| tree.count_within(&cloud.points[i], radius) > min_neighbors)
        .collect();
    cloud.select(&keep)
}

pub fn statistical_outlier_filter(cloud: &PointCloud, k: usize, std_ratio: f64) -> PointCloud {
    if cloud.len() <= 2 || k == 0 {
        return cloud.clone();
    }
    let tree = KdTree::new(&cloud.points);
    let mean_dists: Vec<f64> = (0..cloud.len())
        .map(|i| {
            let nn: Vec<f64> = tree
                .knn(&cloud.points[i], k + 1)
                .into_iter()
                .filter(|&(j, _)| j != i)
                .take(k)
                .map(|(_, d)| d)
                .collect();
            nn.iter().sum::<f64>() / nn.len() as f64
        })
        .collect();
    let n = mean_dists.len() as f64;
    let mean = mean_dists.iter().sum::<f64>() / n;
    let var = mean_dists.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let threshold = mean + std_ratio * var.sqrt();
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| mean_dists[i] <= threshold)
        .collect();
    cloud.select(&keep)
}

/// Functional-element cleanup: radius filter followed by statistical filter.
pub fn denoise_fe(cloud: &PointCloud, params: &DenoiseParams) -> PointCloud {
    let stage = radius_outlier_filter(cloud, params.radius, params.min_neighbors);
    statistical_outlier_filter(&stage, params.k, params.std_ratio)
}
