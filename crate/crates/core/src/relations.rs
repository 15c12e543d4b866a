//! Spatial edges between objects and context-aware names for functional elements.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gateway::{Gateway, ImagePart, ModelRequest};
use crate::geom::{cosine_similarity, Aabb3};
use crate::graph::{Node, NodeId, Predicate, SceneGraph, SpatialRelation};

pub const PROMPT_VERSION: u32 = 1;
const RELATION_PROMPT: &str = include_str!("../assets/prompts/relation.txt");
const REFINE_CONTEXT_PROMPT: &str = include_str!("../assets/prompts/refine_context.txt");
const REFINE_SINGLE_PROMPT: &str = include_str!("../assets/prompts/refine_single.txt");
const RETRY_NOTE: &str =
    "\nYour previous reply did not follow the required format. Follow it exactly.";

/// Minimum horizontal overlap, relative to the smaller footprint, for stacking.
pub const STACK_OVERLAP: f64 = 0.5;
/// Allowed interpenetration of stacked boxes [m].
pub const STACK_TOLERANCE: f64 = 0.05;
/// Largest box separation still counted as adjacency [m].
pub const NEXT_TO_GAP: f64 = 0.3;

/// Image per frame index, attached to prompts when available.
pub type FrameImages = BTreeMap<usize, ImagePart>;

#[derive(Debug, thiserror::Error)]
pub enum RelationError {
    #[error("label refinement mode {0:?} needs a model gateway")]
    MissingGateway(RefineMode),
    #[error("closed-vocabulary refinement needs a non-empty label table")]
    EmptyLabelTable,
    #[error("label table entry {label:?} has dimension {got}, node features have {expected}")]
    DimensionMismatch {
        label: String,
        got: usize,
        expected: usize,
    },
}

fn footprint_overlap(a: &Aabb3, b: &Aabb3) -> f64 {
    let dx = (a.max.x.min(b.max.x) - a.min.x.max(b.min.x)).max(0.0);
    let dy = (a.max.y.min(b.max.y) - a.min.y.max(b.min.y)).max(0.0);
    let area = |m: &Aabb3| (m.max.x - m.min.x) * (m.max.y - m.min.y);
    let smaller = area(a).min(area(b));
    if smaller <= 0.0 {
        0.0
    } else {
        dx * dy / smaller
    }
}

/// Rule cascade reading "a <predicate> b": stacking, strict containment,
/// adjacency, else nothing.
pub fn box_relation(a: &Aabb3, b: &Aabb3) -> Option<Predicate> {
    if footprint_overlap(a, b) >= STACK_OVERLAP {
        if a.min.z >= b.max.z - STACK_TOLERANCE && a.center().z > b.center().z {
            return Some(Predicate::OnTopOf);
        }
        if b.min.z >= a.max.z - STACK_TOLERANCE && b.center().z > a.center().z {
            return Some(Predicate::Under);
        }
    }
    if b.contains(a) && a != b {
        return Some(Predicate::Inside);
    }
    if a.distance(b) < NEXT_TO_GAP {
        return Some(Predicate::NextTo);
    }
    None
}

pub fn geometric_relation(a: &Node, b: &Node) -> Option<Predicate> {
    box_relation(&a.aabb()?, &b.aabb()?)
}

/// A proposal normalized to `(subject, object, predicate)`: symmetric and
/// invertible predicates use the lower id as subject.
type Proposal = Option<(NodeId, NodeId, Predicate)>;

fn normalize(subject: NodeId, object: NodeId, p: Predicate) -> (NodeId, NodeId, Predicate) {
    if subject < object {
        return (subject, object, p);
    }
    match p.inverse() {
        Some(inv) => (object, subject, inv),
        None => (subject, object, p),
    }
}

fn geometric_proposal(a: &Node, b: &Node) -> Proposal {
    let forward = geometric_relation(a, b);
    if matches!(forward, None | Some(Predicate::NextTo))
        && geometric_relation(b, a) == Some(Predicate::Inside)
    {
        return Some(normalize(b.id, a.id, Predicate::Inside));
    }
    forward.map(|p| normalize(a.id, b.id, p))
}

fn describe_box(n: &Node) -> String {
    match n.aabb() {
        Some(b) => {
            let c = b.center();
            let e = b.extents();
            format!(
                "center ({:.2}, {:.2}, {:.2}) size ({:.2}, {:.2}, {:.2})",
                c.x, c.y, c.z, e.x, e.y, e.z
            )
        }
        None => "unknown".into(),
    }
}

pub fn relation_request(a: &Node, b: &Node, image: Option<&ImagePart>) -> ModelRequest {
    let user = format!(
        "A: id {} \"{}\", {}\nB: id {} \"{}\", {}",
        a.id,
        a.display_label(),
        describe_box(a),
        b.id,
        b.display_label(),
        describe_box(b)
    );
    let mut req = ModelRequest::new(RELATION_PROMPT, user);
    req.max_tokens = 16;
    if let Some(img) = image {
        req = req.with_image(img.clone());
    }
    req
}

/// Strict reply grammar: a single predicate or `none`.
pub fn parse_relation_reply(text: &str) -> Option<Option<Predicate>> {
    let t = text.trim().trim_end_matches('.').trim();
    if t.eq_ignore_ascii_case("none") {
        return Some(None);
    }
    if t.contains('\n') {
        return None;
    }
    Predicate::parse(t).map(Some)
}

fn with_retry<T>(
    gw: &Gateway,
    req: &ModelRequest,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<Option<T>, String> {
    let first = gw.complete(req).map_err(|e| e.to_string())?;
    if let Some(v) = parse(&first) {
        return Ok(Some(v));
    }
    let mut again = req.clone();
    again.user.push_str(RETRY_NOTE);
    let second = gw.complete(&again).map_err(|e| e.to_string())?;
    Ok(parse(&second))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fallback {
    pub frame: usize,
    pub subject: NodeId,
    pub object: NodeId,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationOutcome {
    pub relations: Vec<SpatialRelation>,
    /// Frames where the gateway failed and geometry was used instead.
    pub fallbacks: Vec<Fallback>,
    /// Pairs without an edge because the vote was tied.
    pub ties: Vec<(NodeId, NodeId)>,
}

/// Votes one relation per co-visible object pair over their shared frames.
/// Proposals come from the gateway when given, else from box geometry.
pub fn vote_relations(
    graph: &SceneGraph,
    images: &FrameImages,
    gateway: Option<&Gateway>,
) -> RelationOutcome {
    let objects: Vec<&Node> = graph.objects().collect();
    let frames: Vec<BTreeSet<usize>> = objects.iter().map(|n| n.frames()).collect();
    let mut pairs = Vec::new();
    for i in 0..objects.len() {
        for j in i + 1..objects.len() {
            let shared: Vec<usize> = frames[i].intersection(&frames[j]).copied().collect();
            if !shared.is_empty() {
                pairs.push((objects[i], objects[j], shared));
            }
        }
    }

    let per_pair: Vec<(Vec<Proposal>, Vec<Fallback>)> = pairs
        .par_iter()
        .map(|(a, b, shared)| {
            let mut props = Vec::with_capacity(shared.len());
            let mut falls = Vec::new();
            for &f in shared {
                let Some(gw) = gateway else {
                    props.push(geometric_proposal(a, b));
                    continue;
                };
                let req = relation_request(a, b, images.get(&f));
                match with_retry(gw, &req, parse_relation_reply) {
                    Ok(Some(p)) => props.push(p.map(|p| normalize(a.id, b.id, p))),
                    Ok(None) => {
                        log::warn!(
                            "unparseable relation reply for {} / {} in frame {f}",
                            a.id,
                            b.id
                        );
                        props.push(None);
                    }
                    Err(reason) => {
                        falls.push(Fallback {
                            frame: f,
                            subject: a.id,
                            object: b.id,
                            reason,
                        });
                        props.push(geometric_proposal(a, b));
                    }
                }
            }
            (props, falls)
        })
        .collect();

    let mut out = RelationOutcome::default();
    for ((a, b, _), (props, falls)) in pairs.iter().zip(per_pair) {
        out.fallbacks.extend(falls);
        let mut counts: BTreeMap<Proposal, usize> = BTreeMap::new();
        for p in props {
            *counts.entry(p).or_default() += 1;
        }
        let best = counts.values().copied().max().unwrap_or(0);
        let winners: Vec<&Proposal> = counts
            .iter()
            .filter(|(_, &c)| c == best)
            .map(|(p, _)| p)
            .collect();
        if winners.len() > 1 {
            out.ties.push((a.id, b.id));
            continue;
        }
        if let Some(Some((s, o, p))) = winners.first() {
            out.relations.push(SpatialRelation {
                subject: *s,
                object: *o,
                predicate: *p,
                directional: !p.is_symmetric(),
                vote_count: best,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    Context,
    NoContext,
    FeatureClosedVocab,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedLabel {
    pub node: NodeId,
    pub name: String,
    pub mode: RefineMode,
    /// `false` when the node kept its affordance label.
    pub refined: bool,
}

/// Frame holding the most contributing detections of the given nodes; ties go to the earliest.
fn best_frame<'a>(nodes: impl IntoIterator<Item = &'a Node>) -> Option<usize> {
    let mut count: BTreeMap<usize, usize> = BTreeMap::new();
    for n in nodes {
        for &(f, _) in &n.sources {
            *count.entry(f).or_default() += 1;
        }
    }
    let best = count.values().copied().max()?;
    count.into_iter().find(|&(_, c)| c == best).map(|(f, _)| f)
}

/// Request naming every child of `object`, children in id order.
pub fn context_request(
    graph: &SceneGraph,
    object: NodeId,
    images: &FrameImages,
) -> Option<ModelRequest> {
    let obj = graph.node(object)?;
    let children: Vec<&Node> = obj.children.iter().filter_map(|c| graph.node(*c)).collect();
    let mut user = format!(
        "Object: \"{}\", {}\nParts:",
        obj.display_label(),
        describe_box(obj)
    );
    for (k, c) in children.iter().enumerate() {
        user.push_str(&format!(
            "\n{}: \"{}\", {}",
            k + 1,
            c.label
                .clone()
                .or_else(|| c.majority_label())
                .unwrap_or_default(),
            describe_box(c)
        ));
    }
    let mut req = ModelRequest::new(REFINE_CONTEXT_PROMPT, user);
    if let Some(img) = best_frame(std::iter::once(obj).chain(children.iter().copied()))
        .and_then(|f| images.get(&f))
    {
        req = req.with_image(img.clone());
    }
    Some(req)
}

pub fn single_request(fe: &Node, images: &FrameImages) -> ModelRequest {
    let user = format!(
        "Part: \"{}\", {}",
        fe.label
            .clone()
            .or_else(|| fe.majority_label())
            .unwrap_or_default(),
        describe_box(fe)
    );
    let mut req = ModelRequest::new(REFINE_SINGLE_PROMPT, user);
    req.max_tokens = 32;
    if let Some(img) = best_frame([fe]).and_then(|f| images.get(&f)) {
        req = req.with_image(img.clone());
    }
    req
}

/// Strict `N: name` list covering 1..=k exactly once each.
pub fn parse_name_list(text: &str, k: usize) -> Option<Vec<String>> {
    let mut names: Vec<Option<String>> = vec![None; k];
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (num, name) = line.split_once(':')?;
        let i: usize = num.trim().parse().ok()?;
        let name = name.trim();
        if i == 0 || i > k || name.is_empty() || names[i - 1].is_some() {
            return None;
        }
        names[i - 1] = Some(name.to_string());
    }
    names.into_iter().collect()
}

fn parse_single_name(text: &str) -> Option<String> {
    let t = text.trim();
    (!t.is_empty() && !t.contains('\n')).then(|| t.trim_matches('"').to_string())
}

fn affordance_label(n: &Node) -> String {
    n.label
        .clone()
        .or_else(|| n.majority_label())
        .unwrap_or_default()
}

fn closed_vocab(n: &Node, table: &[(String, Vec<f64>)]) -> String {
    let mut best: Option<(&str, f64)> = None;
    for (label, emb) in table {
        let s = cosine_similarity(&n.feature, emb);
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((label, s));
        }
    }
    best.map(|(l, _)| l.to_string()).unwrap_or_default()
}

/// Produces one label per functional element, in id order.
///
/// `table` pairs candidate names with embeddings and is only read in
/// [`RefineMode::FeatureClosedVocab`].
pub fn refine_labels(
    graph: &SceneGraph,
    images: &FrameImages,
    gateway: Option<&Gateway>,
    mode: RefineMode,
    table: &[(String, Vec<f64>)],
) -> Result<Vec<RefinedLabel>, RelationError> {
    let fes: Vec<&Node> = graph.functional_elements().collect();
    let keep = |n: &Node| RefinedLabel {
        node: n.id,
        name: affordance_label(n),
        mode,
        refined: false,
    };
    let renamed = |n: &Node, name: String| RefinedLabel {
        node: n.id,
        name,
        mode,
        refined: true,
    };
    match mode {
        RefineMode::FeatureClosedVocab => {
            if table.is_empty() {
                return Err(RelationError::EmptyLabelTable);
            }
            if let Some(n) = fes.first() {
                if let Some((label, emb)) = table.iter().find(|(_, e)| e.len() != n.feature.len()) {
                    return Err(RelationError::DimensionMismatch {
                        label: label.clone(),
                        got: emb.len(),
                        expected: n.feature.len(),
                    });
                }
            }
            Ok(fes
                .iter()
                .map(|n| renamed(n, closed_vocab(n, table)))
                .collect())
        }
        RefineMode::NoContext => {
            let gw = gateway.ok_or(RelationError::MissingGateway(mode))?;
            Ok(fes
                .par_iter()
                .map(
                    |n| match with_retry(gw, &single_request(n, images), parse_single_name) {
                        Ok(Some(name)) => renamed(n, name),
                        Ok(None) => keep(n),
                        Err(e) => {
                            log::warn!("refinement of node {} failed: {e}", n.id);
                            keep(n)
                        }
                    },
                )
                .collect())
        }
        RefineMode::Context => {
            let gw = gateway.ok_or(RelationError::MissingGateway(mode))?;
            let groups: Vec<&Node> = graph.objects().filter(|o| !o.children.is_empty()).collect();
            let named: Vec<BTreeMap<NodeId, String>> = groups
                .par_iter()
                .map(|o| {
                    let Some(req) = context_request(graph, o.id, images) else {
                        return BTreeMap::new();
                    };
                    let k = o.children.len();
                    match with_retry(gw, &req, |t| parse_name_list(t, k)) {
                        Ok(Some(names)) => o.children.iter().copied().zip(names).collect(),
                        Ok(None) => {
                            log::warn!("unparseable names for object {}", o.id);
                            BTreeMap::new()
                        }
                        Err(e) => {
                            log::warn!("refinement of object {} failed: {e}", o.id);
                            BTreeMap::new()
                        }
                    }
                })
                .collect();
            let named: BTreeMap<NodeId, String> = named.into_iter().flatten().collect();
            Ok(fes
                .iter()
                .map(|n| match named.get(&n.id) {
                    Some(name) => renamed(n, name.clone()),
                    None => keep(n),
                })
                .collect())
        }
    }
}

/// Stores refined names as node descriptions.
pub fn apply_refinements(graph: &mut SceneGraph, labels: &[RefinedLabel]) {
    for l in labels.iter().filter(|l| l.refined) {
        if let Some(n) = graph.nodes.get_mut(&l.node) {
            n.description = Some(l.name.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Point3, PointCloud};
    use crate::graph::{NodeKind, Vote};
    use proptest::prelude::*;

    fn cuboid(min: [f64; 3], max: [f64; 3]) -> PointCloud {
        PointCloud::from_points(vec![Point3::from(min), Point3::from(max)])
    }

    fn node(id: NodeId, kind: NodeKind, label: &str, cloud: PointCloud, frames: &[usize]) -> Node {
        let mut n = Node::new(id, kind, 3);
        n.cloud = cloud;
        n.label = Some(label.into());
        n.class_votes.insert(
            label.into(),
            Vote {
                count: 1,
                first_seen: 0,
            },
        );
        n.sources = frames.iter().map(|&f| (f, id as usize)).collect();
        n
    }

    fn bx(min: [f64; 3], max: [f64; 3]) -> Aabb3 {
        Aabb3::new(Point3::from(min), Point3::from(max))
    }

    #[test]
    fn stacked_box_is_on_top() {
        // 1 x 1 x 0.4 boxes, centers 0.5 m apart vertically, shifted 0.2 m in x:
        // footprint overlap 0.8 x 1 / 1 = 0.8, vertical gap 0.1 m.
        let lower = bx([0.0, 0.0, 0.0], [1.0, 1.0, 0.4]);
        let upper = bx([0.2, 0.0, 0.5], [1.2, 1.0, 0.9]);
        assert!((footprint_overlap(&upper, &lower) - 0.8).abs() < 1e-12);
        assert_eq!(box_relation(&upper, &lower), Some(Predicate::OnTopOf));
        assert_eq!(box_relation(&lower, &upper), Some(Predicate::Under));
    }

    #[test]
    fn far_boxes_have_no_relation() {
        let a = bx([0.0; 3], [1.0; 3]);
        let b = bx([6.0, 0.0, 0.0], [7.0, 1.0, 1.0]);
        assert_eq!(box_relation(&a, &b), None);
    }

    #[test]
    fn identical_boxes_are_next_to() {
        let a = bx([0.0; 3], [1.0; 3]);
        assert_eq!(box_relation(&a, &a), Some(Predicate::NextTo));
    }

    #[test]
    fn strict_containment_is_inside() {
        let outer = bx([0.0; 3], [1.0; 3]);
        let inner = bx([0.3, 0.3, 0.0], [0.6, 0.6, 0.5]);
        assert_eq!(box_relation(&inner, &outer), Some(Predicate::Inside));
    }

    fn two_objects(frames_a: &[usize], frames_b: &[usize]) -> SceneGraph {
        let mut g = SceneGraph::new();
        g.nodes.insert(
            0,
            node(
                0,
                NodeKind::Object,
                "table",
                cuboid([0.0; 3], [1.0, 1.0, 0.7]),
                frames_a,
            ),
        );
        g.nodes.insert(
            1,
            node(
                1,
                NodeKind::Object,
                "lamp",
                cuboid([0.3, 0.3, 0.7], [0.6, 0.6, 1.1]),
                frames_b,
            ),
        );
        g.nodes.insert(
            2,
            node(
                2,
                NodeKind::FunctionalElement,
                "Rotate",
                cuboid([0.4, 0.4, 0.9], [0.45, 0.45, 0.95]),
                frames_b,
            ),
        );
        g.next_id = 3;
        g
    }

    #[test]
    fn geometric_votes_produce_one_object_edge() {
        let g = two_objects(&[0, 1, 2], &[1, 2, 3]);
        let out = vote_relations(&g, &FrameImages::new(), None);
        assert_eq!(out.relations.len(), 1);
        let r = &out.relations[0];
        assert_eq!((r.subject, r.object, r.predicate), (0, 1, Predicate::Under));
        assert_eq!(r.vote_count, 2);
        assert!(r.directional);
    }

    #[test]
    fn pairs_without_shared_frames_get_nothing() {
        let g = two_objects(&[0], &[1]);
        assert!(vote_relations(&g, &FrameImages::new(), None)
            .relations
            .is_empty());
    }

    fn scripted(g: &SceneGraph, replies: &[(usize, &str)]) -> Gateway {
        let (a, b) = (&g.nodes[&0], &g.nodes[&1]);
        let images: FrameImages = replies
            .iter()
            .map(|&(f, _)| (f, ImagePart::png(&[f as u8])))
            .collect();
        let table = replies
            .iter()
            .map(|&(f, r)| (relation_request(a, b, images.get(&f)).hash(), r.to_string()))
            .collect();
        Gateway::mock(table, None)
    }

    fn images_for(frames: &[usize]) -> FrameImages {
        frames
            .iter()
            .map(|&f| (f, ImagePart::png(&[f as u8])))
            .collect()
    }

    #[test]
    fn majority_wins() {
        let g = two_objects(&[0, 1, 2, 3], &[0, 1, 2, 3]);
        let gw = scripted(
            &g,
            &[
                (0, "next to"),
                (1, "next to"),
                (2, "on top of"),
                (3, "next to"),
            ],
        );
        let out = vote_relations(&g, &images_for(&[0, 1, 2, 3]), Some(&gw));
        assert_eq!(out.relations.len(), 1);
        assert_eq!(out.relations[0].predicate, Predicate::NextTo);
        assert_eq!(out.relations[0].vote_count, 3);
        assert!(!out.relations[0].directional);
    }

    #[test]
    fn tie_gives_no_edge() {
        let g = two_objects(&[0, 1, 2, 3], &[0, 1, 2, 3]);
        let gw = scripted(
            &g,
            &[
                (0, "next to"),
                (1, "next to"),
                (2, "on top of"),
                (3, "on top of"),
            ],
        );
        let out = vote_relations(&g, &images_for(&[0, 1, 2, 3]), Some(&gw));
        assert!(out.relations.is_empty());
        assert_eq!(out.ties, vec![(0, 1)]);
    }

    #[test]
    fn mock_predicate_round_trips() {
        let g = two_objects(&[5], &[5]);
        let gw = Gateway::mock(BTreeMap::new(), Some("attached to".into()));
        let out = vote_relations(&g, &FrameImages::new(), Some(&gw));
        assert_eq!(out.relations[0].predicate, Predicate::AttachedTo);
        assert!(out.fallbacks.is_empty());
    }

    #[test]
    fn gateway_failure_falls_back_to_geometry() {
        let g = two_objects(&[5], &[5]);
        let gw = Gateway::mock(BTreeMap::new(), None);
        let out = vote_relations(&g, &FrameImages::new(), Some(&gw));
        assert_eq!(out.relations[0].predicate, Predicate::Under);
        assert_eq!(out.fallbacks.len(), 1);
        assert_eq!(out.fallbacks[0].frame, 5);
    }

    #[test]
    fn reply_grammar_is_strict() {
        assert_eq!(
            parse_relation_reply(" On top of.\n"),
            Some(Some(Predicate::OnTopOf))
        );
        assert_eq!(parse_relation_reply("none"), Some(None));
        assert_eq!(parse_relation_reply("the lamp is on the table"), None);
        assert_eq!(
            parse_name_list("1: A\n2: B", 2),
            Some(vec!["A".into(), "B".into()])
        );
        assert_eq!(parse_name_list("1: A\n1: B", 2), None);
        assert_eq!(parse_name_list("1: A", 2), None);
        assert_eq!(parse_name_list("1: A\n3: B", 2), None);
    }

    fn fridge() -> SceneGraph {
        let mut g = SceneGraph::new();
        let mut o = node(
            0,
            NodeKind::Object,
            "refrigerator",
            cuboid([0.0; 3], [0.8, 0.7, 1.8]),
            &[0, 1],
        );
        o.children = BTreeSet::from([1, 2]);
        g.nodes.insert(0, o);
        for (id, z) in [(1, 1.2), (2, 0.5)] {
            let mut h = node(
                id,
                NodeKind::FunctionalElement,
                "Hook Pull",
                cuboid([0.7, 0.75, z], [0.72, 0.77, z + 0.3]),
                &[0, 1],
            );
            h.parent = Some(0);
            g.nodes.insert(id, h);
        }
        g.nodes.insert(
            3,
            node(
                3,
                NodeKind::FunctionalElement,
                "Hook Pull",
                cuboid([3.0, 0.0, 1.0], [3.02, 0.02, 1.3]),
                &[1],
            ),
        );
        g.next_id = 4;
        g
    }

    #[test]
    fn context_mode_names_fridge_handles() {
        let mut g = fridge();
        let req = context_request(&g, 0, &FrameImages::new()).unwrap();
        let table = BTreeMap::from([(
            req.hash(),
            "1: Refrigerator Handle\n2: Freezer Handle".to_string(),
        )]);
        let gw = Gateway::mock(table, None);
        let labels =
            refine_labels(&g, &FrameImages::new(), Some(&gw), RefineMode::Context, &[]).unwrap();
        let names: Vec<(&str, bool)> = labels
            .iter()
            .map(|l| (l.name.as_str(), l.refined))
            .collect();
        assert_eq!(
            names,
            vec![
                ("Refrigerator Handle", true),
                ("Freezer Handle", true),
                ("Hook Pull", false)
            ]
        );
        apply_refinements(&mut g, &labels);
        assert_eq!(g.nodes[&2].display_label(), "Freezer Handle");
        assert_eq!(g.nodes[&3].description, None);
    }

    #[test]
    fn context_mode_retries_once_then_keeps_labels() {
        let g = fridge();
        let gw = Gateway::mock(BTreeMap::new(), Some("a fridge handle".into()));
        let labels =
            refine_labels(&g, &FrameImages::new(), Some(&gw), RefineMode::Context, &[]).unwrap();
        assert!(labels.iter().all(|l| !l.refined && l.name == "Hook Pull"));
        assert_eq!(gw.transcript().len(), 2);
    }

    #[test]
    fn no_context_mode_asks_per_element() {
        let g = fridge();
        let gw = Gateway::mock(BTreeMap::new(), Some("Handle".into()));
        let labels = refine_labels(
            &g,
            &FrameImages::new(),
            Some(&gw),
            RefineMode::NoContext,
            &[],
        )
        .unwrap();
        assert!(labels.iter().all(|l| l.refined && l.name == "Handle"));
        assert_eq!(gw.transcript().len(), 3);
    }

    #[test]
    fn closed_vocab_identity() {
        let mut g = fridge();
        g.nodes.get_mut(&1).unwrap().feature = vec![0.0, 1.0, 0.0];
        let table = vec![
            ("oven knob".to_string(), vec![1.0, 0.0, 0.0]),
            ("fridge handle".to_string(), vec![0.0, 1.0, 0.0]),
        ];
        let labels = refine_labels(
            &g,
            &FrameImages::new(),
            None,
            RefineMode::FeatureClosedVocab,
            &table,
        )
        .unwrap();
        assert_eq!(labels[0].name, "fridge handle");
        assert!(matches!(
            refine_labels(&g, &FrameImages::new(), None, RefineMode::Context, &[]),
            Err(RelationError::MissingGateway(_))
        ));
    }

    proptest! {
        #[test]
        fn closed_vocab_is_scale_invariant(
            feat in proptest::collection::vec(-1.0f64..1.0, 4),
            table in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 1..6),
            scale in 1e-3f64..1e3,
        ) {
            prop_assume!(feat.iter().any(|v| v.abs() > 1e-3));
            let table: Vec<(String, Vec<f64>)> =
                table.into_iter().enumerate().map(|(i, e)| (format!("l{i}"), e)).collect();
            let mut n = Node::new(0, NodeKind::FunctionalElement, 4);
            n.feature = feat.clone();
            let base = closed_vocab(&n, &table);
            n.feature = feat.iter().map(|v| v * scale).collect();
            prop_assert_eq!(closed_vocab(&n, &table), base);
        }
    }
}
