use std::collections::BTreeMap;

use log::debug;

use super::{GraphConfig, GraphError, Node, NodeId, NodeKind, SceneGraph, Vote, LOCALITY_MARGIN};
use crate::detection::{LiftedFrame, Segment3D};
use crate::geom::{
    cosine_similarity, denoise_fe, geometric_similarity_with_trees, keep_largest_cluster,
    merge_dedup, voxel_downsample, Aabb3, KdTree, PointCloud,
};

struct Indexed<'a> {
    cloud: &'a PointCloud,
    tree: KdTree,
    aabb: Aabb3,
}

impl<'a> Indexed<'a> {
    fn new(cloud: &'a PointCloud) -> Option<Self> {
        Some(Self {
            aabb: cloud.aabb()?,
            tree: KdTree::new(&cloud.points),
            cloud,
        })
    }

    /// Neighbor-overlap similarity, 0 when the inflated boxes are disjoint.
    fn similarity(&self, other: &Indexed, cfg: &GraphConfig) -> f64 {
        if !self
            .aabb
            .inflate(cfg.prefilter_margin)
            .intersects(&other.aabb)
        {
            return 0.0;
        }
        geometric_similarity_with_trees(
            self.cloud,
            &self.tree,
            other.cloud,
            &other.tree,
            cfg.nn_dist,
        )
    }
}

/// Best object node for a segment: both gates must pass, the highest
/// geometric + semantic score wins, ties go to the lowest id. Returns the id
/// and the score.
pub fn match_object_node(
    graph: &SceneGraph,
    seg: &Segment3D,
    cfg: &GraphConfig,
) -> Option<(NodeId, f64)> {
    let s = Indexed::new(&seg.cloud)?;
    let mut best: Option<(NodeId, f64)> = None;
    for node in graph.objects() {
        let Some(n) = Indexed::new(&node.cloud) else {
            continue;
        };
        let geo = s.similarity(&n, cfg);
        if geo < cfg.theta_geo {
            continue;
        }
        let sem = cosine_similarity(&node.feature, &seg.feature);
        if sem < cfg.theta_sem {
            continue;
        }
        let score = geo + sem;
        if best.map_or(true, |(_, b)| score > b) {
            best = Some((node.id, score));
        }
    }
    best
}

/// Functional-element nodes under `parent` (or in the parentless pool for
/// `None`) whose similarity to the segment reaches `theta_geo2`.
pub fn match_fe_nodes(
    graph: &SceneGraph,
    parent: Option<NodeId>,
    seg: &Segment3D,
    cfg: &GraphConfig,
) -> Vec<NodeId> {
    let Some(s) = Indexed::new(&seg.cloud) else {
        return Vec::new();
    };
    let pool: Vec<NodeId> = match parent {
        Some(p) => graph
            .nodes
            .get(&p)
            .map(|n| n.children.iter().copied().collect())
            .unwrap_or_default(),
        None => graph.parentless().map(|n| n.id).collect(),
    };
    pool.into_iter()
        .filter(|id| {
            Indexed::new(&graph.nodes[id].cloud)
                .is_some_and(|n| s.similarity(&n, cfg) >= cfg.theta_geo2)
        })
        .collect()
}

fn absorb(node: &mut Node, seg: &Segment3D, seq: u64) -> Result<(), GraphError> {
    if node.merge_count == 0 && node.feature.len() != seg.feature.len() {
        node.feature = vec![0.0; seg.feature.len()];
    }
    if node.feature.len() != seg.feature.len() {
        return Err(GraphError::Structural(format!(
            "feature dimension {} does not match node {} ({})",
            seg.feature.len(),
            node.id,
            node.feature.len()
        )));
    }
    let n = node.merge_count as f64;
    for (f, s) in node.feature.iter_mut().zip(&seg.feature) {
        *f = (*f * n + s) / (n + 1.0);
    }
    node.merge_count += 1;
    node.class_votes
        .entry(seg.label.clone())
        .or_insert(Vote {
            count: 0,
            first_seen: seq,
        })
        .count += 1;
    node.confidences.push(seg.confidence);
    node.sources.insert((seg.frame_id, seg.det_index));
    Ok(())
}

fn denoise_object_cloud(union: &PointCloud, cfg: &GraphConfig) -> PointCloud {
    let kept = keep_largest_cluster(union, cfg.node_dbscan);
    let kept = if kept.is_empty() { union } else { &kept };
    voxel_downsample(kept, cfg.voxel).expect("voxel size validated by config")
}

/// Merges an object segment into `target`, or into a fresh zero-feature node.
pub fn merge_object_segment(
    graph: &mut SceneGraph,
    target: Option<NodeId>,
    seg: &Segment3D,
    cfg: &GraphConfig,
) -> Result<NodeId, GraphError> {
    let id = match target {
        Some(id) => {
            if !graph.nodes.get(&id).is_some_and(Node::is_object) {
                return Err(GraphError::UnknownNode(id));
            }
            id
        }
        None => graph.alloc(NodeKind::Object, seg.feature.len()),
    };
    let seq = graph.merge_seq;
    graph.merge_seq += 1;
    let node = graph.nodes.get_mut(&id).unwrap();
    let mut union = node.cloud.clone();
    union.extend(&seg.cloud);
    node.cloud = denoise_object_cloud(&union, cfg);
    absorb(node, seg, seq)?;
    Ok(id)
}

/// Merges a functional-element segment into every listed node, or into a new
/// child of `parent` when the list is empty. Redundant points are removed on
/// a fine grid instead of downsampling.
pub fn merge_fe_segment(
    graph: &mut SceneGraph,
    parent: Option<NodeId>,
    ids: &[NodeId],
    seg: &Segment3D,
    cfg: &GraphConfig,
) -> Result<Vec<NodeId>, GraphError> {
    if let Some(p) = parent {
        if !graph.nodes.get(&p).is_some_and(Node::is_object) {
            return Err(GraphError::Structural(format!(
                "parent {p} is not an object node"
            )));
        }
    }
    for id in ids {
        let node = graph.nodes.get(id).ok_or(GraphError::UnknownNode(*id))?;
        if node.kind != NodeKind::FunctionalElement || node.parent != parent {
            return Err(GraphError::Structural(format!(
                "node {id} is not a functional element under {parent:?}"
            )));
        }
    }
    let targets = if ids.is_empty() {
        let id = graph.alloc(NodeKind::FunctionalElement, seg.feature.len());
        graph.nodes.get_mut(&id).unwrap().parent = parent;
        if let Some(p) = parent {
            graph.nodes.get_mut(&p).unwrap().children.insert(id);
        }
        vec![id]
    } else {
        ids.to_vec()
    };
    let seq = graph.merge_seq;
    graph.merge_seq += 1;
    for id in &targets {
        let node = graph.nodes.get_mut(id).unwrap();
        merge_dedup(&mut node.cloud, &seg.cloud, cfg.fe_dedup);
        absorb(node, seg, seq)?;
    }
    Ok(targets)
}

/// Adds one lifted frame: objects first, then their functional elements
/// against the children of the node their parent merged into.
pub fn ingest_frame(
    graph: &mut SceneGraph,
    frame: &LiftedFrame,
    cfg: &GraphConfig,
) -> Result<(), GraphError> {
    let mut parent_of: BTreeMap<usize, NodeId> = BTreeMap::new();
    for seg in &frame.objects {
        let mut seg = seg.clone();
        seg.cloud = voxel_downsample(&seg.cloud, cfg.voxel)
            .map_err(|e| GraphError::Structural(e.to_string()))?;
        if seg.cloud.is_empty() {
            continue;
        }
        let target = match_object_node(graph, &seg, cfg).map(|(id, _)| id);
        let id = merge_object_segment(graph, target, &seg, cfg)?;
        parent_of.insert(seg.det_index, id);
    }
    for seg in &frame.functional_elements {
        if seg.cloud.is_empty() {
            continue;
        }
        let parent = seg
            .parent_object
            .and_then(|i| parent_of.get(&i).copied())
            .filter(|p| is_local(graph, *p, &seg.cloud));
        let ids = match_fe_nodes(graph, parent, seg, cfg);
        merge_fe_segment(graph, parent, &ids, seg, cfg)?;
    }
    graph.enforce_locality();
    graph.frames_ingested += 1;
    Ok(())
}

fn is_local(graph: &SceneGraph, parent: NodeId, cloud: &PointCloud) -> bool {
    match (graph.nodes[&parent].aabb(), cloud.centroid()) {
        (Some(b), Some(c)) => b.inflate(LOCALITY_MARGIN).contains_point(&c),
        _ => false,
    }
}

fn combine_stats(into: &mut Node, from: Node) {
    let (na, nb) = (into.merge_count as f64, from.merge_count as f64);
    if na + nb > 0.0 {
        if into.feature.len() != from.feature.len() && na == 0.0 {
            into.feature = vec![0.0; from.feature.len()];
        }
        for (a, b) in into.feature.iter_mut().zip(&from.feature) {
            *a = (*a * na + b * nb) / (na + nb);
        }
    }
    into.merge_count += from.merge_count;
    for (label, v) in from.class_votes {
        let e = into.class_votes.entry(label).or_insert(Vote {
            count: 0,
            first_seen: v.first_seen,
        });
        e.count += v.count;
        e.first_seen = e.first_seen.min(v.first_seen);
    }
    into.confidences.extend(from.confidences);
    into.sources.extend(from.sources);
}

/// Merges object `b` into `a`; `b`'s children move under `a`.
fn merge_object_nodes(graph: &mut SceneGraph, a: NodeId, b: NodeId, cfg: &GraphConfig) {
    let from = graph.nodes.remove(&b).unwrap();
    for c in &from.children {
        graph.nodes.get_mut(c).unwrap().parent = Some(a);
    }
    let into = graph.nodes.get_mut(&a).unwrap();
    let mut union = into.cloud.clone();
    union.extend(&from.cloud);
    into.cloud = denoise_object_cloud(&union, cfg);
    into.children.extend(from.children.iter().copied());
    combine_stats(into, from);
    remap_relations(graph, b, a);
}

/// Merges functional element `b` into `a`, keeping `a`'s parent.
fn merge_fe_nodes(graph: &mut SceneGraph, a: NodeId, b: NodeId, cfg: &GraphConfig) {
    let from = graph.nodes.remove(&b).unwrap();
    if let Some(p) = from.parent {
        if let Some(parent) = graph.nodes.get_mut(&p) {
            parent.children.remove(&b);
        }
    }
    let into = graph.nodes.get_mut(&a).unwrap();
    merge_dedup(&mut into.cloud, &from.cloud, cfg.fe_dedup);
    combine_stats(into, from);
}

fn remap_relations(graph: &mut SceneGraph, from: NodeId, to: NodeId) {
    for r in &mut graph.relations {
        if r.subject == from {
            r.subject = to;
        }
        if r.object == from {
            r.object = to;
        }
    }
    graph.relations.retain(|r| r.subject != r.object);
}

fn first_object_pair(graph: &SceneGraph, cfg: &GraphConfig) -> Option<(NodeId, NodeId)> {
    let nodes: Vec<(&Node, Indexed)> = graph
        .objects()
        .filter_map(|n| Some((n, Indexed::new(&n.cloud)?)))
        .collect();
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            let (a, ia) = &nodes[i];
            let (b, ib) = &nodes[j];
            if ia.similarity(ib, cfg) >= cfg.theta_geo
                && cosine_similarity(&a.feature, &b.feature) >= cfg.theta_sem
            {
                return Some((a.id, b.id));
            }
        }
    }
    None
}

fn first_fe_pair(
    graph: &SceneGraph,
    pool: &[NodeId],
    cfg: &GraphConfig,
) -> Option<(NodeId, NodeId)> {
    let nodes: Vec<(NodeId, Indexed)> = pool
        .iter()
        .filter_map(|id| Some((*id, Indexed::new(&graph.nodes[id].cloud)?)))
        .collect();
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            if nodes[i].1.similarity(&nodes[j].1, cfg) >= cfg.theta_geo2 {
                return Some((nodes[i].0, nodes[j].0));
            }
        }
    }
    None
}

/// Best child functional element (under any object) for a parentless node.
fn adoption(graph: &SceneGraph, orphan: NodeId, cfg: &GraphConfig) -> Option<NodeId> {
    let o = Indexed::new(&graph.nodes[&orphan].cloud)?;
    let mut best: Option<(NodeId, f64)> = None;
    for n in graph.functional_elements().filter(|n| n.parent.is_some()) {
        let Some(c) = Indexed::new(&n.cloud) else {
            continue;
        };
        let s = o.similarity(&c, cfg);
        if s >= cfg.theta_geo2 && best.map_or(true, |(_, b)| s > b) {
            best = Some((n.id, s));
        }
    }
    best.map(|(id, _)| id)
}

/// Consolidates the graph to a fixpoint: object pairs passing both gates are
/// merged (higher id into lower), then functional elements sharing a parent
/// (or both parentless) are merged under `theta_geo2`, and parentless
/// elements overlapping a child element are folded into it.
pub fn batch_merge(graph: &mut SceneGraph, cfg: &GraphConfig) {
    let before = graph.nodes.len();
    while let Some((a, b)) = first_object_pair(graph, cfg) {
        merge_object_nodes(graph, a, b, cfg);
    }
    loop {
        let mut changed = false;
        let mut pools: Vec<Vec<NodeId>> = graph
            .objects()
            .map(|o| o.children.iter().copied().collect())
            .collect();
        pools.push(graph.parentless().map(|n| n.id).collect());
        for pool in pools {
            while let Some((a, b)) = first_fe_pair(graph, &pool_alive(graph, &pool), cfg) {
                merge_fe_nodes(graph, a, b, cfg);
                changed = true;
            }
        }
        let orphans: Vec<NodeId> = graph.parentless().map(|n| n.id).collect();
        for o in orphans {
            if let Some(target) = adoption(graph, o, cfg) {
                merge_fe_nodes(graph, target, o, cfg);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    graph.enforce_locality();
    debug!("batch merge: {} -> {} nodes", before, graph.nodes.len());
}

fn pool_alive(graph: &SceneGraph, pool: &[NodeId]) -> Vec<NodeId> {
    pool.iter()
        .copied()
        .filter(|id| graph.nodes.contains_key(id))
        .collect()
}

/// Prunes rarely observed nodes (cascading to children), cleans functional
/// element clouds and assigns majority labels.
pub fn finalize(graph: &mut SceneGraph, cfg: &GraphConfig) {
    let weak: Vec<NodeId> = graph
        .nodes
        .values()
        .filter(|n| n.merge_count < cfg.theta_num)
        .map(|n| n.id)
        .collect();
    for id in weak {
        graph.remove_node(id);
    }
    let fes: Vec<NodeId> = graph.functional_elements().map(|n| n.id).collect();
    for id in fes {
        let node = graph.nodes.get_mut(&id).unwrap();
        node.cloud = denoise_fe(&node.cloud, &cfg.fe_denoise);
        if node.cloud.is_empty() {
            graph.remove_node(id);
        }
    }
    for node in graph.nodes.values_mut() {
        node.label = node.majority_label();
    }
    graph.enforce_locality();
}

/// Incremental driver: ingests frames in order, batch-merges on a fixed cadence.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    pub graph: SceneGraph,
    pub cfg: GraphConfig,
    since_batch: usize,
}

impl GraphBuilder {
    pub fn new(cfg: GraphConfig) -> Self {
        Self::resume(SceneGraph::new(), cfg)
    }

    pub fn resume(graph: SceneGraph, cfg: GraphConfig) -> Self {
        Self {
            graph,
            cfg,
            since_batch: 0,
        }
    }

    pub fn ingest(&mut self, frame: &LiftedFrame) -> Result<(), GraphError> {
        ingest_frame(&mut self.graph, frame, &self.cfg)?;
        self.since_batch += 1;
        if self.cfg.batch_merge_every > 0 && self.since_batch >= self.cfg.batch_merge_every {
            batch_merge(&mut self.graph, &self.cfg);
            self.since_batch = 0;
        }
        Ok(())
    }

    /// Final batch merge followed by [`finalize`].
    pub fn finish(mut self) -> SceneGraph {
        batch_merge(&mut self.graph, &self.cfg);
        finalize(&mut self.graph, &self.cfg);
        self.graph
    }
}
