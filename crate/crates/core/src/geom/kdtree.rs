//! Static 3-d tree with exact radius and k-nearest-neighbor queries.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::types::Point3;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    /// Permutation of point indices; leaves reference contiguous ranges.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist_sq: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn new(points: &[Point3]) -> Self {
        let points: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build(&points, &mut order, 0, &mut nodes);
        }
        Self {
            points,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Indices of all points with distance ≤ `radius`, in ascending index order.
    pub fn within_radius(&self, q: &Point3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.radius_rec(0, &[q.x, q.y, q.z], radius * radius, &mut out);
        }
        out.sort_unstable();
        out
    }

    /// Number of points with distance ≤ `radius`.
    pub fn count_within(&self, q: &Point3, radius: f64) -> usize {
        let mut n = 0;
        if !self.nodes.is_empty() {
            self.visit_radius(0, &[q.x, q.y, q.z], radius * radius, &mut |_| {
                n += 1;
                true
            });
        }
        n
    }

    /// True iff at least one point lies within `radius`.
    pub fn any_within(&self, q: &Point3, radius: f64) -> bool {
        let mut found = false;
        if !self.nodes.is_empty() {
            self.visit_radius(0, &[q.x, q.y, q.z], radius * radius, &mut |_| {
                found = true;
                false
            });
        }
        found
    }

    /// The `k` nearest points as `(index, distance)`, nearest first; ties by index.
    pub fn knn(&self, q: &Point3, k: usize) -> Vec<(usize, f64)> {
        self.knn_within(q, k, f64::INFINITY)
    }

    /// Up to `k` nearest points no farther than `radius`.
    pub fn knn_within(&self, q: &Point3, k: usize, radius: f64) -> Vec<(usize, f64)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        let limit = if radius.is_finite() {
            radius * radius
        } else {
            f64::INFINITY
        };
        self.knn_rec(0, &[q.x, q.y, q.z], k, limit, &mut heap);
        let mut v: Vec<Candidate> = heap.into_vec();
        v.sort();
        v.into_iter().map(|c| (c.index, c.dist_sq.sqrt())).collect()
    }

    fn radius_rec(&self, node: usize, q: &[f64; 3], r2: f64, out: &mut Vec<usize>) {
        self.visit_radius(node, q, r2, &mut |i| {
            out.push(i);
            true
        });
    }

    /// Calls `f` for every point within the radius; stops early when `f` returns false.
    fn visit_radius(
        &self,
        node: usize,
        q: &[f64; 3],
        r2: f64,
        f: &mut dyn FnMut(usize) -> bool,
    ) -> bool {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if dist_sq(&self.points[i], q) <= r2 && !f(i) {
                        return false;
                    }
                }
                true
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let d = q[axis] - value;
                let (near, far) = if d <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                if !self.visit_radius(near, q, r2, f) {
                    return false;
                }
                if d * d <= r2 {
                    return self.visit_radius(far, q, r2, f);
                }
                true
            }
        }
    }

    fn knn_rec(
        &self,
        node: usize,
        q: &[f64; 3],
        k: usize,
        limit: f64,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist_sq(&self.points[i], q);
                    if d > limit {
                        continue;
                    }
                    let c = Candidate {
                        dist_sq: d,
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let d = q[axis] - value;
                let (near, far) = if d <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_rec(near, q, k, limit, heap);
                let bound = if heap.len() < k {
                    limit
                } else {
                    heap.peek().unwrap().dist_sq.min(limit)
                };
                // `<=` keeps equal-distance candidates reachable for the index tie-break.
                if d * d <= bound {
                    self.knn_rec(far, q, k, limit, heap);
                }
            }
        }
    }
}

fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn build(points: &[[f64; 3]], order: &mut [usize], offset: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return id;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    if hi[axis] - lo[axis] == 0.0 {
        // All points coincide.
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return id;
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[order[mid]][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (l, r) = order.split_at_mut(mid);
    let left = build(points, l, offset, nodes);
    let right = build(points, r, offset + mid, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}
