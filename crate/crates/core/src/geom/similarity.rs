use std::collections::BTreeSet;

use super::kdtree::KdTree;
use super::types::{BBox2D, PointCloud};

/// Fraction of points of `u` lying within `dist` of some point of `v`.
///
/// Empty `u` yields 0 so that empty segments never qualify for merging.
pub fn nn_overlap(u: &PointCloud, v: &PointCloud, dist: f64) -> f64 {
    if u.is_empty() || v.is_empty() {
        return 0.0;
    }
    let tree = KdTree::new(&v.points);
    nn_overlap_with_tree(u, &tree, dist)
}

/// [`nn_overlap`] against a prebuilt index of `v`.
pub fn nn_overlap_with_tree(u: &PointCloud, v_tree: &KdTree, dist: f64) -> f64 {
    if u.is_empty() || v_tree.is_empty() {
        return 0.0;
    }
    let hits = u
        .points
        .iter()
        .filter(|p| v_tree.any_within(p, dist))
        .count();
    hits as f64 / u.len() as f64
}

/// Symmetric neighbor-overlap similarity: the larger of the two directed overlaps.
pub fn geometric_similarity(u: &PointCloud, v: &PointCloud, dist: f64) -> f64 {
    if u.is_empty() || v.is_empty() {
        return 0.0;
    }
    let tu = KdTree::new(&u.points);
    let tv = KdTree::new(&v.points);
    geometric_similarity_with_trees(u, &tu, v, &tv, dist)
}

pub fn geometric_similarity_with_trees(
    u: &PointCloud,
    u_tree: &KdTree,
    v: &PointCloud,
    v_tree: &KdTree,
    dist: f64,
) -> f64 {
    nn_overlap_with_tree(u, v_tree, dist).max(nn_overlap_with_tree(v, u_tree, dist))
}

/// Intersection-over-union of two point-index sets; 0 when both are empty.
pub fn point_iou(pred: &BTreeSet<u32>, gt: &BTreeSet<u32>) -> f64 {
    let inter = pred.intersection(gt).count();
    let union = pred.len() + gt.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Share of `inner`'s area covered by `outer`; 0 for a degenerate `inner`.
pub fn bbox_containment(inner: &BBox2D, outer: &BBox2D) -> f64 {
    let area = inner.area();
    if area <= 0.0 {
        return 0.0;
    }
    inner.intersection_area(outer) / area
}

/// Cosine similarity, 0 if either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
