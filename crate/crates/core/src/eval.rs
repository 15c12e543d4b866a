//! Functional-element segmentation metrics and task-driven affordance grounding.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affordance::Affordance;
use crate::gateway::{Gateway, ModelRequest};
use crate::geom::{point_iou, KdTree, PointCloud};
use crate::graph::{GraphDocument, NodeId, NodeKind, SceneGraph, HAS_PART};

pub const ASSOC_K: usize = 8;
/// Scan association radius [m].
pub const ASSOC_RADIUS: f64 = 0.005;
const QUERY_PROMPT: &str = include_str!("../assets/prompts/query.txt");

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{path}: {msg}")]
    Input { path: String, msg: String },
}

/// Union over node points of the up-to-`k` nearest scan points within `radius`.
pub fn associate_to_scan(
    cloud: &PointCloud,
    scan: &KdTree,
    k: usize,
    radius: f64,
) -> BTreeSet<u32> {
    cloud
        .points
        .iter()
        .flat_map(|p| scan.knn_within(p, k, radius))
        .map(|(i, _)| i as u32)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub indices: BTreeSet<u32>,
    pub class: Affordance,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub indices: BTreeSet<u32>,
    pub class: Affordance,
}

/// Predictions and ground truth of one scene; matching never crosses scenes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneInstances {
    pub predictions: Vec<Prediction>,
    pub ground_truth: Vec<GroundTruth>,
}

/// Functional-element predictions of a graph, associated to the scan.
pub fn graph_predictions(graph: &SceneGraph, scan: &KdTree) -> Vec<Prediction> {
    graph
        .functional_elements()
        .filter_map(|n| {
            Some(Prediction {
                class: n.affordance()?,
                indices: associate_to_scan(&n.cloud, scan, ASSOC_K, ASSOC_RADIUS),
                confidence: n.confidence(),
            })
        })
        .collect()
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ApRow {
    /// Mean over 0.50:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub ap10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: Affordance,
    pub gt_count: usize,
    pub pred_count: usize,
    pub values: ApRow,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Classes with at least one ground-truth instance.
    pub classes: Vec<ClassAp>,
    /// Macro average over `classes`.
    pub mean: ApRow,
    /// Classes left out of the average because they have no ground truth.
    pub excluded: Vec<Affordance>,
}

impl ApReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,gt,pred,ap,ap50,ap25,ap10\n");
        let row = |s: &mut String, name: &str, gt: String, pred: String, v: &ApRow| {
            let _ = writeln!(
                s,
                "{name},{gt},{pred},{:.6},{:.6},{:.6},{:.6}",
                v.ap, v.ap50, v.ap25, v.ap10
            );
        };
        for c in &self.classes {
            row(
                &mut s,
                c.class.name(),
                c.gt_count.to_string(),
                c.pred_count.to_string(),
                &c.values,
            );
        }
        row(&mut s, "mean", String::new(), String::new(), &self.mean);
        s
    }
}

/// Ranked match outcome of one class at one threshold: `(confidence, is_tp)`.
pub fn match_class(
    scenes: &[SceneInstances],
    class: Affordance,
    threshold: f64,
) -> (Vec<(f64, bool)>, usize) {
    let mut ranked = Vec::new();
    let mut n_gt = 0;
    for scene in scenes {
        let gts: Vec<&GroundTruth> = scene
            .ground_truth
            .iter()
            .filter(|g| g.class == class)
            .collect();
        n_gt += gts.len();
        let mut owner: HashMap<u32, Vec<usize>> = HashMap::new();
        for (gi, g) in gts.iter().enumerate() {
            for &i in &g.indices {
                owner.entry(i).or_default().push(gi);
            }
        }
        let mut preds: Vec<&Prediction> = scene
            .predictions
            .iter()
            .filter(|p| p.class == class)
            .collect();
        preds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut taken = vec![false; gts.len()];
        for p in preds {
            let mut inter = vec![0usize; gts.len()];
            for i in &p.indices {
                for &gi in owner.get(i).into_iter().flatten() {
                    inter[gi] += 1;
                }
            }
            let mut best: Option<(usize, f64)> = None;
            for (gi, &n) in inter.iter().enumerate() {
                if taken[gi] || n == 0 {
                    continue;
                }
                let iou = n as f64 / (p.indices.len() + gts[gi].indices.len() - n) as f64;
                if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
            ranked.push((p.confidence, best.is_some()));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    (ranked, n_gt)
}

/// Area under the precision envelope of a ranked TP/FP list.
pub fn average_precision(ranked_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut recall = Vec::with_capacity(ranked_tp.len());
    for (i, &hit) in ranked_tp.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

fn class_ap_at(scenes: &[SceneInstances], class: Affordance, t: f64) -> f64 {
    let (ranked, n_gt) = match_class(scenes, class, t);
    let hits: Vec<bool> = ranked.into_iter().map(|(_, h)| h).collect();
    average_precision(&hits, n_gt)
}

pub fn instance_ap(scenes: &[SceneInstances]) -> ApReport {
    let present: BTreeSet<Affordance> = scenes
        .iter()
        .flat_map(|s| {
            s.predictions
                .iter()
                .map(|p| p.class)
                .chain(s.ground_truth.iter().map(|g| g.class))
        })
        .collect();
    let count_gt = |c: Affordance| {
        scenes
            .iter()
            .flat_map(|s| &s.ground_truth)
            .filter(|g| g.class == c)
            .count()
    };
    let count_pred = |c: Affordance| {
        scenes
            .iter()
            .flat_map(|s| &s.predictions)
            .filter(|p| p.class == c)
            .count()
    };
    let (with_gt, excluded): (Vec<Affordance>, Vec<Affordance>) =
        present.into_iter().partition(|&c| count_gt(c) > 0);
    if !excluded.is_empty() {
        log::info!("classes without ground truth excluded from the mean: {excluded:?}");
    }
    let thresholds = coco_thresholds();
    let classes: Vec<ClassAp> = with_gt
        .par_iter()
        .map(|&c| {
            let per: Vec<f64> = thresholds
                .iter()
                .map(|&t| class_ap_at(scenes, c, t))
                .collect();
            // A rounded mean can land one ulp above its largest term.
            let top = per.iter().copied().fold(0.0, f64::max);
            let ap = (per.iter().sum::<f64>() / per.len() as f64).min(top);
            ClassAp {
                class: c,
                gt_count: count_gt(c),
                pred_count: count_pred(c),
                values: ApRow {
                    ap,
                    ap50: class_ap_at(scenes, c, 0.5),
                    ap25: class_ap_at(scenes, c, 0.25),
                    ap10: class_ap_at(scenes, c, 0.1),
                },
            }
        })
        .collect();
    let n = classes.len().max(1) as f64;
    let mean = ApRow {
        ap: classes.iter().map(|c| c.values.ap).sum::<f64>() / n,
        ap50: classes.iter().map(|c| c.values.ap50).sum::<f64>() / n,
        ap25: classes.iter().map(|c| c.values.ap25).sum::<f64>() / n,
        ap10: classes.iter().map(|c| c.values.ap10).sum::<f64>() / n,
    };
    ApReport {
        classes,
        mean,
        excluded,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingQuery {
    pub scene_id: String,
    pub query: String,
    pub gt_indices: Vec<u32>,
}

pub fn read_queries(path: &Path) -> Result<Vec<GroundingQuery>, EvalError> {
    let err = |msg: String| EvalError::Input {
        path: path.display().to_string(),
        msg,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "to", "on", "in", "at", "with", "and", "or", "for", "my", "me", "i",
    "it", "is", "its", "please", "from", "by", "that", "this", "use", "element",
];

fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| {
            let t = t.to_lowercase();
            match t.strip_suffix('s') {
                Some(stem) if t.len() > 3 && !t.ends_with("ss") => stem.to_string(),
                _ => t,
            }
        })
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Keyword resolver used without a model: scores each functional element by
/// the query tokens found in its own names, its parent's names (weight 1) and
/// the parent's spatial relations (weight 1/2); returns all top scorers.
pub fn token_match(doc: &GraphDocument, query: &str) -> Vec<NodeId> {
    let q = tokens(query);
    let by_id: BTreeMap<NodeId, &crate::graph::NodeDoc> =
        doc.nodes.iter().map(|n| (n.id, n)).collect();
    let names = |id: NodeId| -> BTreeSet<String> {
        let Some(n) = by_id.get(&id) else {
            return BTreeSet::new();
        };
        let mut text = n.label.clone();
        if let Some(d) = &n.description {
            text.push(' ');
            text.push_str(d);
        }
        if let Some(a) = n.affordance {
            text.push(' ');
            text.push_str(a.name());
        }
        tokens(&text)
    };
    let mut scored: Vec<(NodeId, f64)> = Vec::new();
    for n in doc
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::FunctionalElement)
    {
        let mut own = names(n.id);
        if let Some(p) = n.parent {
            own.extend(names(p));
        }
        let mut context = BTreeSet::new();
        if let Some(p) = n.parent {
            for e in doc.edges.iter().filter(|e| e.kind != HAS_PART) {
                let other = if e.source == p {
                    e.target
                } else if e.target == p {
                    e.source
                } else {
                    continue;
                };
                context.extend(tokens(&e.attribute));
                context.extend(names(other));
            }
        }
        let score = q.iter().filter(|t| own.contains(*t)).count() as f64
            + 0.5
                * q.iter()
                    .filter(|t| !own.contains(*t) && context.contains(*t))
                    .count() as f64;
        scored.push((n.id, score));
    }
    let best = scored.iter().map(|s| s.1).fold(0.0, f64::max);
    if best <= 0.0 {
        return Vec::new();
    }
    scored
        .into_iter()
        .filter(|s| s.1 == best)
        .map(|s| s.0)
        .collect()
}

pub fn query_request(doc: &GraphDocument, query: &str) -> ModelRequest {
    let json = serde_json::to_string(doc).expect("serializable graph document");
    let mut req = ModelRequest::new(
        QUERY_PROMPT,
        format!("Scene graph:\n{json}\n\nTask: {query}"),
    );
    req.max_tokens = 64;
    req
}

fn parse_id_list(text: &str) -> Option<Vec<NodeId>> {
    serde_json::from_str::<Vec<NodeId>>(text.trim()).ok()
}

/// Node ids that solve `query`. Without a gateway the keyword resolver is
/// used; model answers are parsed as a JSON id array (one retry) and
/// filtered to ids present in the document.
pub fn answer_query(doc: &GraphDocument, query: &str, gateway: Option<&Gateway>) -> Vec<NodeId> {
    let Some(gw) = gateway else {
        return token_match(doc, query);
    };
    let req = query_request(doc, query);
    let mut ids = None;
    for attempt in 0..2 {
        let mut r = req.clone();
        if attempt == 1 {
            r.user
                .push_str("\nReply with a JSON array of node ids only.");
        }
        match gw.complete(&r) {
            Ok(text) => {
                ids = parse_id_list(&text);
                if ids.is_some() {
                    break;
                }
            }
            Err(e) => {
                log::warn!("query {query:?} failed: {e}");
                break;
            }
        }
    }
    let known: BTreeSet<NodeId> = doc.nodes.iter().map(|n| n.id).collect();
    let mut out: Vec<NodeId> = ids
        .unwrap_or_default()
        .into_iter()
        .filter(|i| known.contains(i))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub scene_id: String,
    pub query: String,
    pub answer: Vec<NodeId>,
    pub iou: f64,
    pub pass_25: bool,
    pub pass_any: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub total: usize,
    /// Share of queries with IoU >= 0.25.
    pub rate_25: f64,
    /// Share of queries with at least one shared point.
    pub rate_any: f64,
    pub queries: Vec<QueryOutcome>,
}

impl GroundingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scene_id,query,answer,iou,pass_25,pass_any\n");
        for q in &self.queries {
            let answer: Vec<String> = q.answer.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(
                s,
                "{},\"{}\",{},{:.6},{},{}",
                q.scene_id,
                q.query.replace('"', "\"\""),
                answer.join(" "),
                q.iou,
                q.pass_25,
                q.pass_any
            );
        }
        let _ = writeln!(s, "all,,,,{:.6},{:.6}", self.rate_25, self.rate_any);
        s
    }
}

/// Scan association of every node, per scene id.
pub type SceneAssociations = BTreeMap<String, BTreeMap<NodeId, BTreeSet<u32>>>;

pub fn grounding_eval(
    answers: &[Vec<NodeId>],
    queries: &[GroundingQuery],
    assoc: &SceneAssociations,
) -> GroundingReport {
    let empty = BTreeMap::new();
    let outcomes: Vec<QueryOutcome> = queries
        .iter()
        .zip(answers)
        .map(|(q, ans)| {
            let nodes = assoc.get(&q.scene_id).unwrap_or(&empty);
            let pred: BTreeSet<u32> = ans
                .iter()
                .filter_map(|id| nodes.get(id))
                .flatten()
                .copied()
                .collect();
            let gt: BTreeSet<u32> = q.gt_indices.iter().copied().collect();
            let iou = point_iou(&pred, &gt);
            QueryOutcome {
                scene_id: q.scene_id.clone(),
                query: q.query.clone(),
                answer: ans.clone(),
                iou,
                pass_25: iou >= 0.25,
                pass_any: pred.intersection(&gt).next().is_some(),
            }
        })
        .collect();
    let total = queries.len();
    let rate = |f: fn(&QueryOutcome) -> bool| {
        if total == 0 {
            0.0
        } else {
            outcomes.iter().filter(|o| f(o)).count() as f64 / total as f64
        }
    };
    GroundingReport {
        total,
        rate_25: rate(|o| o.pass_25),
        rate_any: rate(|o| o.pass_any),
        queries: outcomes,
    }
}

/// Scan association of every node of a graph.
pub fn associate_graph(graph: &SceneGraph, scan: &KdTree) -> BTreeMap<NodeId, BTreeSet<u32>> {
    graph
        .nodes
        .par_iter()
        .map(|(&id, n)| (id, associate_to_scan(&n.cloud, scan, ASSOC_K, ASSOC_RADIUS)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point3;
    use crate::graph::{export_graph, EdgeDoc, NodeDoc, SPATIAL};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    fn set(r: std::ops::Range<u32>) -> BTreeSet<u32> {
        r.collect()
    }

    #[test]
    fn isolated_point_and_far_node() {
        let scan = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)];
        let tree = KdTree::new(&scan);
        let at = PointCloud::from_points(vec![Point3::new(1.0, 0.0, 0.0)]);
        assert_eq!(associate_to_scan(&at, &tree, 8, 0.005), BTreeSet::from([1]));
        let far = PointCloud::from_points(vec![Point3::new(5.0, 5.0, 5.0)]);
        assert!(associate_to_scan(&far, &tree, 8, 0.005).is_empty());
    }

    #[test]
    fn dense_scan_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let scan: Vec<Point3> = (0..3000)
            .map(|_| {
                Point3::new(
                    rng.gen_range(0.0..0.05),
                    rng.gen_range(0.0..0.05),
                    rng.gen_range(0.0..0.02),
                )
            })
            .collect();
        let node = PointCloud::from_points(
            (0..100)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(0.0..0.05),
                        rng.gen_range(0.0..0.05),
                        rng.gen_range(0.0..0.02),
                    )
                })
                .collect(),
        );
        let fast = associate_to_scan(&node, &KdTree::new(&scan), 8, 0.005);
        let mut brute = BTreeSet::new();
        for p in &node.points {
            let mut d: Vec<(f64, usize)> = scan
                .iter()
                .enumerate()
                .map(|(i, s)| ((s - p).norm(), i))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            brute.extend(
                d.iter()
                    .take(8)
                    .filter(|x| x.0 <= 0.005)
                    .map(|x| x.1 as u32),
            );
        }
        assert!(!brute.is_empty());
        assert_eq!(fast, brute);
    }

    fn gt(indices: BTreeSet<u32>, class: Affordance) -> GroundTruth {
        GroundTruth { indices, class }
    }

    fn pred(indices: BTreeSet<u32>, class: Affordance, confidence: f64) -> Prediction {
        Prediction {
            indices,
            class,
            confidence,
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts = vec![
            gt(set(0..10), Affordance::Rotate),
            gt(set(10..30), Affordance::TipPush),
        ];
        let preds = gts
            .iter()
            .map(|g| pred(g.indices.clone(), g.class, 1.0))
            .collect();
        let r = instance_ap(&[SceneInstances {
            predictions: preds,
            ground_truth: gts,
        }]);
        assert_eq!(
            r.mean,
            ApRow {
                ap: 1.0,
                ap50: 1.0,
                ap25: 1.0,
                ap10: 1.0
            }
        );
    }

    #[test]
    fn no_predictions_score_zero_and_gtless_classes_are_excluded() {
        let r = instance_ap(&[SceneInstances {
            predictions: vec![pred(set(50..60), Affordance::FootPush, 0.9)],
            ground_truth: vec![gt(set(0..10), Affordance::Rotate)],
        }]);
        assert_eq!(r.classes.len(), 1);
        assert_eq!(r.mean, ApRow::default());
        assert_eq!(r.excluded, vec![Affordance::FootPush]);
    }

    #[test]
    fn threshold_mean_never_exceeds_ap50() {
        // Exact matches for two of three instances give 2/3 at every threshold.
        let gts = vec![
            gt(set(0..10), Affordance::Rotate),
            gt(set(20..30), Affordance::Rotate),
            gt(set(40..50), Affordance::Rotate),
        ];
        let preds = gts[..2]
            .iter()
            .map(|g| pred(g.indices.clone(), g.class, 1.0))
            .collect();
        let r = instance_ap(&[SceneInstances {
            predictions: preds,
            ground_truth: gts,
        }]);
        assert_eq!(r.mean.ap50, 2.0 / 3.0);
        assert!(r.mean.ap <= r.mean.ap50);
    }

    #[test]
    fn duplicate_matches_become_false_positives() {
        let scene = SceneInstances {
            predictions: vec![
                pred(set(0..10), Affordance::Rotate, 0.9),
                pred(set(0..10), Affordance::Rotate, 0.8),
            ],
            ground_truth: vec![gt(set(0..10), Affordance::Rotate)],
        };
        let (ranked, n) = match_class(&[scene], Affordance::Rotate, 0.5);
        assert_eq!(n, 1);
        assert_eq!(ranked, vec![(0.9, true), (0.8, false)]);
    }

    #[test]
    fn scenes_do_not_cross_match() {
        let a = SceneInstances {
            predictions: vec![pred(set(0..10), Affordance::Rotate, 0.9)],
            ground_truth: vec![],
        };
        let b = SceneInstances {
            predictions: vec![],
            ground_truth: vec![gt(set(0..10), Affordance::Rotate)],
        };
        assert_eq!(instance_ap(&[a, b]).mean.ap50, 0.0);
    }

    /// Independent route: all-pairs IoU from sets, then the envelope taken as
    /// the maximum precision at any rank with at least the given recall.
    fn brute_ap(scene: &SceneInstances, class: Affordance, t: f64) -> f64 {
        let gts: Vec<&GroundTruth> = scene
            .ground_truth
            .iter()
            .filter(|g| g.class == class)
            .collect();
        if gts.is_empty() {
            return 0.0;
        }
        let mut preds: Vec<&Prediction> = scene
            .predictions
            .iter()
            .filter(|p| p.class == class)
            .collect();
        preds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut used = vec![false; gts.len()];
        let mut pr = Vec::new();
        let mut tp = 0;
        for (rank, p) in preds.iter().enumerate() {
            let cand = (0..gts.len())
                .filter(|&g| !used[g])
                .map(|g| (g, point_iou(&p.indices, &gts[g].indices)))
                .filter(|&(_, iou)| iou >= t && iou > 0.0)
                .fold(None, |best: Option<(usize, f64)>, c| match best {
                    Some(b) if b.1 >= c.1 => Some(b),
                    _ => Some(c),
                });
            if let Some((g, _)) = cand {
                used[g] = true;
                tp += 1;
            }
            pr.push((tp as f64 / (rank + 1) as f64, tp as f64 / gts.len() as f64));
        }
        let mut recalls: Vec<f64> = pr.iter().map(|x| x.1).collect();
        recalls.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in recalls {
            let p = pr
                .iter()
                .filter(|x| x.1 >= r)
                .map(|x| x.0)
                .fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
        ap
    }

    fn arb_scene() -> impl Strategy<Value = SceneInstances> {
        let inst = (0u32..40, 1u32..15, 0usize..2);
        (
            proptest::collection::vec((inst.clone(), 0.0f64..1.0), 0..10),
            proptest::collection::vec(inst, 0..10),
        )
            .prop_map(|(preds, gts)| {
                let cls = [Affordance::Rotate, Affordance::HookPull];
                SceneInstances {
                    predictions: preds
                        .into_iter()
                        .map(|((s, l, c), conf)| pred(set(s..s + l), cls[c], conf))
                        .collect(),
                    ground_truth: gts
                        .into_iter()
                        .map(|(s, l, c)| gt(set(s..s + l), cls[c]))
                        .collect(),
                }
            })
    }

    proptest! {
        #[test]
        fn matches_brute_force_and_is_monotone(scene in arb_scene()) {
            let mut thresholds = coco_thresholds();
            thresholds.extend([0.1, 0.25]);
            for class in [Affordance::Rotate, Affordance::HookPull] {
                for &t in &thresholds {
                    let fast = class_ap_at(std::slice::from_ref(&scene), class, t);
                    prop_assert!((fast - brute_ap(&scene, class, t)).abs() < 1e-12);
                }
            }
            let report = instance_ap(std::slice::from_ref(&scene));
            for c in &report.classes {
                let v = c.values;
                prop_assert!(v.ap <= v.ap50 + 1e-12 && v.ap50 <= v.ap25 + 1e-12 && v.ap25 <= v.ap10 + 1e-12);
                prop_assert!((0.0..=1.0).contains(&v.ap) && (0.0..=1.0).contains(&v.ap10));
            }
        }
    }

    fn doc_node(id: NodeId, kind: NodeKind, label: &str, parent: Option<NodeId>) -> NodeDoc {
        NodeDoc {
            id,
            kind,
            label: label.into(),
            description: None,
            affordance: label.parse().ok(),
            centroid: [0.0; 3],
            bbox_center: [0.0; 3],
            extents: [0.0; 3],
            confidence: 1.0,
            parent,
            edges: vec![],
        }
    }

    fn trash_doc() -> GraphDocument {
        GraphDocument {
            nodes: vec![
                doc_node(1, NodeKind::Object, "trash can", None),
                doc_node(2, NodeKind::FunctionalElement, "Foot Push", Some(1)),
                doc_node(3, NodeKind::Object, "cabinet", None),
                doc_node(4, NodeKind::FunctionalElement, "Hook Pull", Some(3)),
                doc_node(5, NodeKind::Object, "oven", None),
                doc_node(6, NodeKind::FunctionalElement, "Rotate", Some(5)),
            ],
            edges: vec![EdgeDoc {
                source: 5,
                target: 3,
                kind: SPATIAL.into(),
                attribute: "next to".into(),
            }],
        }
    }

    #[test]
    fn token_resolver_finds_trash_bin_pedal() {
        let doc = trash_doc();
        assert_eq!(answer_query(&doc, "Open the trash bin", None), vec![2]);
        assert!(answer_query(&doc, "water the plants", None).is_empty());
        assert_eq!(
            answer_query(&doc, "pull the handle of the cabinet", None),
            vec![4]
        );
        assert_eq!(
            answer_query(&doc, "rotate the knob next to the cabinet", None),
            vec![6]
        );
    }

    #[test]
    fn model_answers_are_validated() {
        let doc = trash_doc();
        let gw = Gateway::mock(BTreeMap::new(), Some("[42]".into()));
        assert!(answer_query(&doc, "open the trash bin", Some(&gw)).is_empty());
        let gw = Gateway::mock(BTreeMap::new(), Some(" [2, 2, 4] ".into()));
        assert_eq!(
            answer_query(&doc, "open the trash bin", Some(&gw)),
            vec![2, 4]
        );
        let gw = Gateway::mock(BTreeMap::new(), Some("node 2".into()));
        assert!(answer_query(&doc, "open the trash bin", Some(&gw)).is_empty());
        assert_eq!(gw.transcript().len(), 2);
    }

    #[test]
    fn grounding_rates() {
        let q = |gt: std::ops::Range<u32>| GroundingQuery {
            scene_id: "s".into(),
            query: "q".into(),
            gt_indices: gt.collect(),
        };
        // Knob of 10 points inside a cabinet association of 100 points: IoU 0.1.
        let assoc: SceneAssociations = BTreeMap::from([(
            "s".to_string(),
            BTreeMap::from([(1, set(0..100)), (2, set(0..10))]),
        )]);
        let queries = vec![q(0..10), q(0..10), q(0..10)];
        let answers = vec![vec![2], vec![1], vec![]];
        let r = grounding_eval(&answers, &queries, &assoc);
        let flags: Vec<(bool, bool)> = r.queries.iter().map(|o| (o.pass_25, o.pass_any)).collect();
        assert_eq!(flags, vec![(true, true), (false, true), (false, false)]);
        assert!((r.rate_25 - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.rate_any - 2.0 / 3.0).abs() < 1e-12);
        assert!(r.rate_any >= r.rate_25);
    }

    #[test]
    fn graph_predictions_use_affordance_and_confidence() {
        let mut g = SceneGraph::new();
        let mut n = crate::graph::Node::new(0, NodeKind::FunctionalElement, 1);
        n.label = Some("Tip Push".into());
        n.confidences = vec![0.5, 0.7];
        n.cloud = PointCloud::from_points(vec![Point3::new(0.0, 0.0, 0.0)]);
        g.nodes.insert(0, n);
        let scan = KdTree::new(&[Point3::new(0.001, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)]);
        let p = graph_predictions(&g, &scan);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].class, Affordance::TipPush);
        assert!((p[0].confidence - 0.6).abs() < 1e-12);
        assert_eq!(p[0].indices, BTreeSet::from([0]));
        assert_eq!(export_graph(&g).nodes.len(), 1);
    }
}
