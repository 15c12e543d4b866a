//! Layered scene graph of objects and their functional elements.
//!
//! Functional-element (FE) nodes hang under exactly one object through a
//! has-part link, or sit in the parentless pool when no parent could be
//! resolved. Object pairs may carry spatial relations.

mod builder;
mod checkpoint;
mod export;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affordance::Affordance;
use crate::geom::{Aabb3, DbscanParams, DenoiseParams, PointCloud};

pub use builder::{
    batch_merge, finalize, ingest_frame, match_fe_nodes, match_object_node, merge_fe_segment,
    merge_object_segment, GraphBuilder,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use export::{export_graph, EdgeDoc, EdgeRef, GraphDocument, NodeDoc, HAS_PART, SPATIAL};

pub type NodeId = u64;

/// Distance by which a parent box is inflated when checking child locality [m].
pub const LOCALITY_MARGIN: f64 = 0.1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("structural violation: {0}")]
    Structural(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("{path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Object,
    FunctionalElement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub count: usize,
    /// Global merge sequence number of the first vote, for tie-breaking.
    pub first_seen: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    #[serde(skip)]
    pub cloud: PointCloud,
    /// Running mean of merged segment features.
    pub feature: Vec<f64>,
    /// Number of merged segments.
    pub merge_count: usize,
    pub class_votes: BTreeMap<String, Vote>,
    pub confidences: Vec<f64>,
    /// Contributing detections as `(frame, detection index)`.
    pub sources: BTreeSet<(usize, usize)>,
    /// Majority label, assigned by [`finalize`].
    pub label: Option<String>,
    /// Context-refined name of a functional element.
    pub description: Option<String>,
    /// Has-part parent of a functional element; `None` means parentless.
    pub parent: Option<NodeId>,
    /// Has-part children of an object.
    pub children: BTreeSet<NodeId>,
}

impl Node {
    pub fn new(id: NodeId, kind: NodeKind, dim: usize) -> Self {
        Self {
            id,
            kind,
            cloud: PointCloud::new(),
            feature: vec![0.0; dim],
            merge_count: 0,
            class_votes: BTreeMap::new(),
            confidences: Vec::new(),
            sources: BTreeSet::new(),
            label: None,
            description: None,
            parent: None,
            children: BTreeSet::new(),
        }
    }

    pub fn is_object(&self) -> bool {
        self.kind == NodeKind::Object
    }

    /// Mean detection confidence of the merged segments.
    pub fn confidence(&self) -> f64 {
        if self.confidences.is_empty() {
            0.0
        } else {
            self.confidences.iter().sum::<f64>() / self.confidences.len() as f64
        }
    }

    pub fn frames(&self) -> BTreeSet<usize> {
        self.sources.iter().map(|&(f, _)| f).collect()
    }

    /// Most voted class; ties go to the label seen first.
    pub fn majority_label(&self) -> Option<String> {
        self.class_votes
            .iter()
            .max_by(|a, b| {
                a.1.count
                    .cmp(&b.1.count)
                    .then(b.1.first_seen.cmp(&a.1.first_seen))
            })
            .map(|(l, _)| l.clone())
    }

    pub fn affordance(&self) -> Option<Affordance> {
        if self.kind != NodeKind::FunctionalElement {
            return None;
        }
        self.label
            .clone()
            .or_else(|| self.majority_label())
            .and_then(|l| l.parse().ok())
    }

    /// Label used for display: refined description, else the final label, else the current majority.
    pub fn display_label(&self) -> String {
        self.description
            .clone()
            .or_else(|| self.label.clone())
            .or_else(|| self.majority_label())
            .unwrap_or_default()
    }

    pub fn aabb(&self) -> Option<Aabb3> {
        self.cloud.aabb()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Predicate {
    #[serde(rename = "next to")]
    NextTo,
    #[serde(rename = "on top of")]
    OnTopOf,
    #[serde(rename = "under")]
    Under,
    #[serde(rename = "above")]
    Above,
    #[serde(rename = "inside")]
    Inside,
    #[serde(rename = "attached to")]
    AttachedTo,
}

impl Predicate {
    pub const ALL: [Predicate; 6] = [
        Predicate::NextTo,
        Predicate::OnTopOf,
        Predicate::Under,
        Predicate::Above,
        Predicate::Inside,
        Predicate::AttachedTo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Predicate::NextTo => "next to",
            Predicate::OnTopOf => "on top of",
            Predicate::Under => "under",
            Predicate::Above => "above",
            Predicate::Inside => "inside",
            Predicate::AttachedTo => "attached to",
        }
    }

    pub fn is_symmetric(self) -> bool {
        matches!(self, Predicate::NextTo | Predicate::AttachedTo)
    }

    /// Same relation read with subject and object swapped.
    pub fn inverse(self) -> Option<Predicate> {
        match self {
            Predicate::NextTo => Some(Predicate::NextTo),
            Predicate::AttachedTo => Some(Predicate::AttachedTo),
            Predicate::OnTopOf => Some(Predicate::Under),
            Predicate::Under => Some(Predicate::OnTopOf),
            Predicate::Above | Predicate::Inside => None,
        }
    }

    pub fn parse(text: &str) -> Option<Predicate> {
        let t = text
            .trim()
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase();
        let t = t.replace(['_', '-'], " ");
        Predicate::ALL.into_iter().find(|p| p.name() == t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialRelation {
    pub subject: NodeId,
    pub object: NodeId,
    pub predicate: Predicate,
    pub directional: bool,
    pub vote_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub theta_geo: f64,
    pub theta_sem: f64,
    pub theta_geo2: f64,
    pub theta_num: usize,
    /// Neighbor distance of the overlap ratio [m].
    pub nn_dist: f64,
    /// Object cloud voxel size [m].
    pub voxel: f64,
    /// Frames between two batch merges; `0` disables periodic merging.
    pub batch_merge_every: usize,
    /// Inflation of the box prefilter used before exact scoring [m].
    pub prefilter_margin: f64,
    /// Grid of the redundant-point removal for functional elements [m].
    pub fe_dedup: f64,
    pub node_dbscan: DbscanParams,
    pub fe_denoise: DenoiseParams,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            theta_geo: 0.5,
            theta_sem: 0.6,
            theta_geo2: 0.6,
            theta_num: 3,
            nn_dist: 0.025,
            voxel: 0.02,
            batch_merge_every: 20,
            prefilter_margin: 0.2,
            fe_dedup: 0.002,
            node_dbscan: DbscanParams {
                eps: 0.05,
                min_pts: 5,
            },
            fe_denoise: DenoiseParams::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub nodes: BTreeMap<NodeId, Node>,
    pub relations: Vec<SpatialRelation>,
    pub next_id: NodeId,
    /// Global merge sequence counter.
    pub merge_seq: u64,
    pub frames_ingested: usize,
}

impl SceneGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn objects(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values().filter(|n| n.kind == NodeKind::Object)
    }

    pub fn functional_elements(&self) -> impl Iterator<Item = &Node> {
        self.nodes
            .values()
            .filter(|n| n.kind == NodeKind::FunctionalElement)
    }

    pub fn parentless(&self) -> impl Iterator<Item = &Node> {
        self.functional_elements().filter(|n| n.parent.is_none())
    }

    /// Node ids per layer: objects first, then functional elements.
    pub fn layers(&self) -> [Vec<NodeId>; 2] {
        [
            self.objects().map(|n| n.id).collect(),
            self.functional_elements().map(|n| n.id).collect(),
        ]
    }

    pub fn has_part_edges(&self) -> Vec<(NodeId, NodeId)> {
        self.functional_elements()
            .filter_map(|n| n.parent.map(|p| (p, n.id)))
            .collect()
    }

    pub(crate) fn alloc(&mut self, kind: NodeKind, dim: usize) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        self.nodes.insert(id, Node::new(id, kind, dim));
        id
    }

    /// Removes a node and its has-part links. Children of a removed object are removed too.
    pub(crate) fn remove_node(&mut self, id: NodeId) {
        let Some(node) = self.nodes.remove(&id) else {
            return;
        };
        for c in node.children {
            self.remove_node(c);
        }
        if let Some(p) = node.parent {
            if let Some(parent) = self.nodes.get_mut(&p) {
                parent.children.remove(&id);
            }
        }
        self.relations.retain(|r| r.subject != id && r.object != id);
    }

    /// Moves functional elements whose centroid left the inflated parent box
    /// to the parentless pool. Returns the detached ids.
    pub fn enforce_locality(&mut self) -> Vec<NodeId> {
        let mut detach = Vec::new();
        for n in self.functional_elements() {
            let Some(p) = n.parent else { continue };
            let inside = match (
                n.cloud.centroid(),
                self.nodes.get(&p).and_then(|p| p.aabb()),
            ) {
                (Some(c), Some(b)) => b.inflate(LOCALITY_MARGIN).contains_point(&c),
                (None, _) => true,
                _ => false,
            };
            if !inside {
                detach.push((n.id, p));
            }
        }
        for &(id, p) in &detach {
            self.nodes.get_mut(&id).unwrap().parent = None;
            if let Some(parent) = self.nodes.get_mut(&p) {
                parent.children.remove(&id);
            }
        }
        detach.into_iter().map(|(id, _)| id).collect()
    }

    /// Checks single parent, disjoint children and locality.
    pub fn check_hierarchy(&self) -> Result<(), GraphError> {
        let err = |m: String| Err(GraphError::Structural(m));
        let mut claimed: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        for n in self.nodes.values() {
            match n.kind {
                NodeKind::Object => {
                    if n.parent.is_some() {
                        return err(format!("object {} has a parent", n.id));
                    }
                    for &c in &n.children {
                        if let Some(other) = claimed.insert(c, n.id) {
                            return err(format!("node {c} is a child of {other} and {}", n.id));
                        }
                        match self.nodes.get(&c) {
                            Some(child) if child.kind == NodeKind::FunctionalElement => {
                                if child.parent != Some(n.id) {
                                    return err(format!("child {c} of {} points elsewhere", n.id));
                                }
                            }
                            _ => return err(format!("object {} lists invalid child {c}", n.id)),
                        }
                    }
                }
                NodeKind::FunctionalElement => {
                    if !n.children.is_empty() {
                        return err(format!("functional element {} has children", n.id));
                    }
                    if let Some(p) = n.parent {
                        let Some(parent) = self.nodes.get(&p) else {
                            return err(format!("node {} has missing parent {p}", n.id));
                        };
                        if !parent.children.contains(&n.id) {
                            return err(format!("parent {p} does not list child {}", n.id));
                        }
                        if let (Some(c), Some(b)) = (n.cloud.centroid(), parent.aabb()) {
                            if !b.inflate(LOCALITY_MARGIN).contains_point(&c) {
                                return err(format!("node {} lies outside parent {p}", n.id));
                            }
                        }
                    }
                }
            }
        }
        for r in &self.relations {
            let ok = |id| self.nodes.get(&id).is_some_and(|n| n.is_object());
            if !ok(r.subject) || !ok(r.object) {
                return err(format!(
                    "relation {} -> {} joins non-objects",
                    r.subject, r.object
                ));
            }
        }
        Ok(())
    }
}
