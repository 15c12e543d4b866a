use serde::{Deserialize, Serialize};

use super::{NodeId, NodeKind, SceneGraph};
use crate::affordance::Affordance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRef {
    #[serde(rename = "type")]
    pub kind: String,
    pub target: NodeId,
    pub attribute: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: NodeId,
    pub kind: NodeKind,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affordance: Option<Affordance>,
    /// Center of mass of the node cloud [m].
    pub centroid: [f64; 3],
    /// Center of the axis-aligned box [m].
    pub bbox_center: [f64; 3],
    /// Side lengths of the axis-aligned box [m].
    pub extents: [f64; 3],
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<NodeId>,
    /// Outgoing edges.
    pub edges: Vec<EdgeRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDoc {
    pub source: NodeId,
    pub target: NodeId,
    #[serde(rename = "type")]
    pub kind: String,
    pub attribute: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub nodes: Vec<NodeDoc>,
    pub edges: Vec<EdgeDoc>,
}

pub const HAS_PART: &str = "has_part";
pub const SPATIAL: &str = "spatial";

/// Flattens the graph into the exchange document, nodes in id order.
pub fn export_graph(graph: &SceneGraph) -> GraphDocument {
    let mut edges = Vec::new();
    for n in graph.objects() {
        for c in &n.children {
            let attr = graph.nodes[c]
                .affordance()
                .map(|a| a.name().to_string())
                .unwrap_or_default();
            edges.push(EdgeDoc {
                source: n.id,
                target: *c,
                kind: HAS_PART.into(),
                attribute: attr,
            });
        }
    }
    for r in &graph.relations {
        edges.push(EdgeDoc {
            source: r.subject,
            target: r.object,
            kind: SPATIAL.into(),
            attribute: r.predicate.name().into(),
        });
    }
    let nodes = graph
        .nodes
        .values()
        .map(|n| {
            let arr = |v: nalgebra::Vector3<f64>| [v.x, v.y, v.z];
            let aabb = n.aabb();
            NodeDoc {
                id: n.id,
                kind: n.kind,
                label: n
                    .label
                    .clone()
                    .or_else(|| n.majority_label())
                    .unwrap_or_default(),
                description: n.description.clone(),
                affordance: n.affordance(),
                centroid: n.cloud.centroid().map(arr).unwrap_or_default(),
                bbox_center: aabb.map(|b| arr(b.center())).unwrap_or_default(),
                extents: aabb.map(|b| arr(b.extents())).unwrap_or_default(),
                confidence: n.confidence(),
                parent: n.parent,
                edges: edges
                    .iter()
                    .filter(|e| e.source == n.id)
                    .map(|e| EdgeRef {
                        kind: e.kind.clone(),
                        target: e.target,
                        attribute: e.attribute.clone(),
                    })
                    .collect(),
            }
        })
        .collect();
    GraphDocument { nodes, edges }
}
