use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use funcgraph::affordance::Affordance;
use funcgraph::dataset::{build_dataset, slice_dataset, write_dataset, Dataset2D};
use funcgraph::eval::{
    answer_query, associate_graph, graph_predictions, grounding_eval, instance_ap, read_queries,
    GroundTruth, GroundingQuery, Prediction, SceneAssociations, SceneInstances,
};
use funcgraph::gateway::{Gateway, GatewayMode, ImagePart};
use funcgraph::geom::KdTree;
use funcgraph::graph::{load_checkpoint, save_checkpoint, GraphBuilder, GraphDocument, SceneGraph};
use funcgraph::pipeline::{detection_file_name, ingest_scene, load_detections, PipelineError};
use funcgraph::relations::{
    apply_refinements, refine_labels as refine, vote_relations, FrameImages, RefineMode,
};
use funcgraph::scene::{load_scene, read_manifest, LabeledScene, SceneManifest, SCENE_MANIFEST};
use funcgraph::synth::{run_synthetic, write_synthetic, SynthError, QUERY_FILE};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::manifest::RunRecord;
use crate::{input_error, write_json, GatewayArgs, GatewayChoice, RefineModeArg};

const GRAPH_CHECKPOINT: &str = "graph.ckpt";
const GRAPH_DOCUMENT: &str = "graph.json";
const PARTIAL_CHECKPOINT: &str = "partial.ckpt";

/// The scene itself when `root` holds a manifest, else its scene subdirectories in name order.
fn scene_dirs(root: &Path, flag: &str) -> Result<Vec<PathBuf>> {
    if root.join(SCENE_MANIFEST).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = std::fs::read_dir(root)
        .map_err(|e| input_error(format!("{flag} {}: {e}", root.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SCENE_MANIFEST).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(input_error(format!(
            "{flag} {}: no scene directories found",
            root.display()
        )));
    }
    Ok(dirs)
}

fn open_scene(dir: &Path, flag: &str) -> Result<(SceneManifest, LabeledScene)> {
    let wrap =
        |e: funcgraph::scene::SceneError| input_error(format!("{flag} {}: {e}", dir.display()));
    let manifest = read_manifest(dir).map_err(wrap)?;
    let scene = load_scene(dir).map_err(wrap)?;
    Ok((manifest, scene))
}

/// Files a scene run reads: manifest, scan, annotations, depth, optionally RGB, detections.
fn scene_files(dir: &Path, m: &SceneManifest, rgb: bool, detections: bool) -> Vec<PathBuf> {
    let mut out = vec![
        dir.join(SCENE_MANIFEST),
        dir.join(&m.scan),
        dir.join(&m.annotations),
    ];
    for f in &m.frames {
        out.push(dir.join(&f.depth));
        if rgb {
            if let Some(p) = &f.rgb {
                out.push(dir.join(p));
            }
        }
    }
    if detections {
        if let Some(d) = &m.detections {
            out.extend(
                (0..m.frames.len())
                    .map(|i| dir.join(d).join(detection_file_name(i)))
                    .filter(|p| p.is_file()),
            );
        }
    }
    out
}

fn open_graph(path: &Path, flag: &str) -> Result<SceneGraph> {
    load_checkpoint(path).map_err(|e| input_error(format!("{flag} {}: {e}", path.display())))
}

fn save_graph(out: &Path, graph: &SceneGraph) -> Result<GraphDocument> {
    save_checkpoint(&out.join(GRAPH_CHECKPOINT), graph)?;
    let doc = funcgraph::graph::export_graph(graph);
    write_json(&out.join(GRAPH_DOCUMENT), &doc)?;
    Ok(doc)
}

fn pipeline_error(e: PipelineError) -> anyhow::Error {
    match e {
        PipelineError::Graph(g) => anyhow::Error::new(g),
        other => input_error(other.to_string()),
    }
}

fn open_gateway(cfg: &Config, args: &GatewayArgs) -> Result<Option<Gateway>> {
    let mode = match args.gateway {
        GatewayChoice::None => return Ok(None),
        GatewayChoice::Mock => GatewayMode::Mock,
        GatewayChoice::Replay => GatewayMode::Replay,
        GatewayChoice::Live => GatewayMode::Live,
    };
    let mut gc = cfg.gateway.clone();
    gc.mode = mode;
    if let Some(s) = &args.session {
        gc.session_file = Some(s.clone());
    }
    Gateway::new(gc)
        .map(Some)
        .map_err(|e| input_error(format!("--gateway {mode:?}: {e}").to_lowercase()))
}

fn close_gateway(gw: Option<&Gateway>, args: &GatewayArgs) -> Result<()> {
    if let (Some(gw), Some(path)) = (gw, &args.record) {
        gw.write_session(path)?;
    }
    Ok(())
}

fn record_gateway(rec: &mut RunRecord, args: &GatewayArgs) {
    rec.param("gateway", args.gateway);
    if let Some(s) = &args.session {
        rec.input(s.clone());
    }
}

/// Images of every frame some node was observed in.
fn frame_images(
    scene: &LabeledScene,
    graph: &SceneGraph,
    rec: &mut RunRecord,
) -> Result<FrameImages> {
    let frames: std::collections::BTreeSet<usize> =
        graph.nodes.values().flat_map(|n| n.frames()).collect();
    let mut out = FrameImages::new();
    for f in frames {
        let Some(path) = scene.frames.get(f).and_then(|r| r.rgb.as_ref()) else {
            continue;
        };
        let bytes =
            std::fs::read(path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
        let mime = match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_lowercase)
            .as_deref()
        {
            Some("jpg") | Some("jpeg") => "image/jpeg",
            _ => "image/png",
        };
        out.insert(f, ImagePart::encode(mime, &bytes));
        rec.input(path.clone());
    }
    Ok(out)
}

#[derive(Serialize)]
struct DatasetSummary {
    images: usize,
    annotated_images: usize,
    background_images: usize,
    annotations: usize,
    warnings: usize,
}

impl DatasetSummary {
    fn of(ds: &Dataset2D) -> Self {
        DatasetSummary {
            images: ds.images.len(),
            annotated_images: ds.annotated_image_count(),
            background_images: ds.images.iter().filter(|i| i.background).count(),
            annotations: ds.annotation_count(),
            warnings: ds.warnings.len(),
        }
    }
}

pub fn gen_dataset(
    cfg: &Config,
    scenes: &Path,
    out: &Path,
    slice: bool,
    labels: bool,
) -> Result<()> {
    let dirs = scene_dirs(scenes, "--scenes")?;
    let mut rec = RunRecord::default();
    let mut loaded = Vec::with_capacity(dirs.len());
    for d in &dirs {
        let (m, s) = open_scene(d, "--scenes")?;
        rec.inputs(scene_files(d, &m, false, false));
        loaded.push(s);
    }
    let ds = build_dataset(&loaded, &cfg.projection, cfg.seed);
    write_dataset(&out.join("standard"), &ds, labels)?;
    let mut summary = BTreeMap::new();
    summary.insert("standard", DatasetSummary::of(&ds));
    if slice {
        let sliced = slice_dataset(&ds, &cfg.slice);
        write_dataset(&out.join("sliced"), &sliced, labels)?;
        summary.insert("sliced", DatasetSummary::of(&sliced));
    }
    write_json(&out.join("summary.json"), &summary)?;
    for w in &ds.warnings {
        log::warn!("{w}");
    }
    rec.param("scenes", dirs.len());
    rec.param("slice", slice);
    rec.param("labels", labels);
    rec.write(out, "gen-dataset", cfg)
}

pub fn gen_synthetic(cfg: &Config, out: &Path, scenes: u64) -> Result<()> {
    let mut rec = RunRecord::default();
    let mut ids = Vec::new();
    for i in 0..scenes {
        let mut spec = cfg.synthetic.clone();
        spec.seed = cfg.seed + i;
        let run = run_synthetic(&spec).map_err(|e| match e {
            SynthError::Spec(msg) => input_error(format!("synthetic configuration: {msg}")),
            other => anyhow::Error::new(other),
        })?;
        let dir = out.join(&run.scene.scene_id);
        write_synthetic(&dir, &run)?;
        log::info!(
            "{}: {} objects, {} elements, {} frames",
            run.scene.scene_id,
            run.scene.inventory.objects.len(),
            run.scene.inventory.elements.len(),
            run.frames.len()
        );
        ids.push(run.scene.scene_id);
    }
    rec.param("seed", cfg.seed);
    rec.param("scenes", &ids);
    rec.write(out, "gen-synthetic", cfg)
}

pub fn build_graph(
    cfg: &Config,
    scene: &Path,
    detections: Option<&Path>,
    out: &Path,
    checkpoint: bool,
    resume: bool,
) -> Result<()> {
    let (mut manifest, ls) = open_scene(scene, "--scene")?;
    if let Some(d) = detections {
        let abs = std::path::absolute(d)
            .map_err(|e| input_error(format!("--detections {}: {e}", d.display())))?;
        if !abs.is_dir() {
            return Err(input_error(format!(
                "--detections {}: not a directory",
                d.display()
            )));
        }
        manifest.detections = Some(abs.display().to_string());
    }
    if manifest.detections.is_none() {
        log::warn!("{}: no detections; the graph will be empty", ls.scene_id);
    }
    let dets = load_detections(scene, &manifest).map_err(pipeline_error)?;

    let partial = out.join(PARTIAL_CHECKPOINT);
    let mut builder = if resume && partial.is_file() {
        GraphBuilder::resume(
            open_graph(&partial, "--resume")?,
            cfg.pipeline.graph.clone(),
        )
    } else {
        GraphBuilder::new(cfg.pipeline.graph.clone())
    };
    let start = builder.graph.frames_ingested;
    if start > 0 {
        log::info!("resuming after {start} frames");
    }
    let step = match cfg.pipeline.graph.batch_merge_every {
        n if checkpoint && n > 0 => n,
        _ => dets.len().max(1),
    };
    let mut s = start;
    while s < dets.len() {
        let e = (s + step).min(dets.len());
        ingest_scene(&mut builder, &ls, &dets[s..e], &cfg.pipeline, s).map_err(pipeline_error)?;
        if checkpoint {
            save_checkpoint(&partial, &builder.graph)?;
        }
        s = e;
    }
    let graph = builder.finish();
    save_graph(out, &graph)?;
    if partial.exists() {
        std::fs::remove_file(&partial).with_context(|| partial.display().to_string())?;
    }
    log::info!(
        "{}: {} objects, {} functional elements",
        ls.scene_id,
        graph.objects().count(),
        graph.functional_elements().count()
    );

    let mut rec = RunRecord::default();
    rec.inputs(scene_files(scene, &manifest, false, true));
    rec.param("scene_id", &ls.scene_id);
    rec.param("frames", dets.len());
    rec.write(out, "build-graph", cfg)
}

pub fn refine_labels(
    cfg: &Config,
    graph_path: &Path,
    scene: &Path,
    mode: RefineModeArg,
    labels: Option<&Path>,
    gw_args: &GatewayArgs,
    out: &Path,
) -> Result<()> {
    let mut rec = RunRecord::default();
    let mut graph = open_graph(graph_path, "--graph")?;
    rec.input(graph_path);
    let (_, ls) = open_scene(scene, "--scene")?;
    let gw = open_gateway(cfg, gw_args)?;
    record_gateway(&mut rec, gw_args);
    let images = if gw.is_some() {
        frame_images(&ls, &graph, &mut rec)?
    } else {
        FrameImages::new()
    };
    let table: Vec<(String, Vec<f64>)> = match labels {
        Some(p) => {
            rec.input(p);
            let text = std::fs::read_to_string(p)
                .map_err(|e| input_error(format!("--labels {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| input_error(format!("--labels {}: {e}", p.display())))?
        }
        None => Vec::new(),
    };
    let mode = match mode {
        RefineModeArg::Context => RefineMode::Context,
        RefineModeArg::NoContext => RefineMode::NoContext,
        RefineModeArg::FeatureClosedVocab => RefineMode::FeatureClosedVocab,
    };
    let refined = refine(&graph, &images, gw.as_ref(), mode, &table).map_err(|e| {
        let flag = if matches!(mode, RefineMode::FeatureClosedVocab) {
            "--labels"
        } else {
            "--gateway"
        };
        input_error(format!("{flag}: {e}"))
    })?;
    apply_refinements(&mut graph, &refined);
    save_graph(out, &graph)?;
    write_json(&out.join("labels.json"), &refined)?;
    close_gateway(gw.as_ref(), gw_args)?;
    rec.param("mode", mode);
    rec.write(out, "refine-labels", cfg)
}

pub fn relations(
    cfg: &Config,
    graph_path: &Path,
    scene: &Path,
    gw_args: &GatewayArgs,
    out: &Path,
) -> Result<()> {
    let mut rec = RunRecord::default();
    let mut graph = open_graph(graph_path, "--graph")?;
    rec.input(graph_path);
    let (_, ls) = open_scene(scene, "--scene")?;
    let gw = open_gateway(cfg, gw_args)?;
    record_gateway(&mut rec, gw_args);
    let images = if gw.is_some() {
        frame_images(&ls, &graph, &mut rec)?
    } else {
        FrameImages::new()
    };
    let outcome = vote_relations(&graph, &images, gw.as_ref());
    if !outcome.fallbacks.is_empty() {
        log::warn!(
            "{} relation queries fell back to geometry",
            outcome.fallbacks.len()
        );
    }
    graph.relations = outcome.relations.clone();
    save_graph(out, &graph)?;
    write_json(&out.join("relations.json"), &outcome)?;
    close_gateway(gw.as_ref(), gw_args)?;
    rec.write(out, "relations", cfg)
}

/// Checkpoint of one scene under `--graphs`: the path itself, `<root>/<scene_id>/graph.ckpt`,
/// or `<root>/graph.ckpt` when only one scene is evaluated.
fn graph_for(root: &Path, scene_id: &str, single: bool) -> Result<PathBuf> {
    if root.is_file() && single {
        return Ok(root.to_path_buf());
    }
    let nested = root.join(scene_id).join(GRAPH_CHECKPOINT);
    if nested.is_file() {
        return Ok(nested);
    }
    let flat = root.join(GRAPH_CHECKPOINT);
    if single && flat.is_file() {
        return Ok(flat);
    }
    Err(input_error(format!(
        "--graphs {}: no graph for scene {scene_id}",
        root.display()
    )))
}

fn ground_truth(scene: &LabeledScene) -> Vec<GroundTruth> {
    scene
        .annotations
        .iter()
        .map(|a| GroundTruth {
            indices: a.index_set(),
            class: a.affordance,
        })
        .collect()
}

pub fn eval_seg(
    cfg: &Config,
    scenes: &Path,
    graphs: Option<&Path>,
    predictions: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let dirs = scene_dirs(scenes, "--scenes")?;
    let mut rec = RunRecord::default();
    let mut given: BTreeMap<String, Vec<Prediction>> = match predictions {
        Some(p) => {
            rec.input(p);
            let text = std::fs::read_to_string(p)
                .map_err(|e| input_error(format!("--predictions {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| input_error(format!("--predictions {}: {e}", p.display())))?
        }
        None => BTreeMap::new(),
    };
    let mut instances = Vec::with_capacity(dirs.len());
    let mut ids = Vec::new();
    for d in &dirs {
        let (m, ls) = open_scene(d, "--scenes")?;
        rec.input(d.join(SCENE_MANIFEST));
        rec.input(d.join(&m.scan));
        rec.input(d.join(&m.annotations));
        let preds = match graphs {
            Some(root) => {
                let path = graph_for(root, &ls.scene_id, dirs.len() == 1)?;
                let g = open_graph(&path, "--graphs")?;
                rec.input(path);
                graph_predictions(&g, &KdTree::new(&ls.scan.points))
            }
            None => given.remove(&ls.scene_id).unwrap_or_default(),
        };
        instances.push(SceneInstances {
            predictions: preds,
            ground_truth: ground_truth(&ls),
        });
        ids.push(ls.scene_id);
    }
    for id in given.keys() {
        log::warn!("predictions for unknown scene {id} ignored");
    }
    let report = instance_ap(&instances);
    write_json(&out.join("report.json"), &report)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    println!(
        "AP {:.4}  AP50 {:.4}  AP25 {:.4}  AP10 {:.4}",
        report.mean.ap, report.mean.ap50, report.mean.ap25, report.mean.ap10
    );
    rec.param("scenes", &ids);
    rec.param(
        "source",
        if graphs.is_some() {
            "graphs"
        } else {
            "predictions"
        },
    );
    rec.write(out, "eval-seg", cfg)
}

pub fn eval_ground(
    cfg: &Config,
    scenes: &Path,
    graphs: &Path,
    queries: Option<&Path>,
    gw_args: &GatewayArgs,
    out: &Path,
) -> Result<()> {
    let dirs = scene_dirs(scenes, "--scenes")?;
    let mut rec = RunRecord::default();
    let mut docs: BTreeMap<String, GraphDocument> = BTreeMap::new();
    let mut assoc = SceneAssociations::new();
    let mut all_queries: Vec<GroundingQuery> = Vec::new();
    for d in &dirs {
        let (m, ls) = open_scene(d, "--scenes")?;
        rec.input(d.join(SCENE_MANIFEST));
        rec.input(d.join(&m.scan));
        let path = graph_for(graphs, &ls.scene_id, dirs.len() == 1)?;
        let g = open_graph(&path, "--graphs")?;
        rec.input(path);
        assoc.insert(
            ls.scene_id.clone(),
            associate_graph(&g, &KdTree::new(&ls.scan.points)),
        );
        docs.insert(ls.scene_id.clone(), funcgraph::graph::export_graph(&g));
        if queries.is_none() {
            let qp = d.join(QUERY_FILE);
            all_queries.extend(
                read_queries(&qp).map_err(|e| input_error(format!("--queries (default): {e}")))?,
            );
            rec.input(qp);
        }
    }
    if let Some(p) = queries {
        all_queries = read_queries(p).map_err(|e| input_error(format!("--queries: {e}")))?;
        rec.input(p);
    }
    if let Some(q) = all_queries.iter().find(|q| !docs.contains_key(&q.scene_id)) {
        return Err(input_error(format!(
            "--queries: scene {} is not among --scenes",
            q.scene_id
        )));
    }
    let gw = open_gateway(cfg, gw_args)?;
    record_gateway(&mut rec, gw_args);
    let answers: Vec<_> = all_queries
        .par_iter()
        .map(|q| answer_query(&docs[&q.scene_id], &q.query, gw.as_ref()))
        .collect();
    let report = grounding_eval(&answers, &all_queries, &assoc);
    write_json(&out.join("report.json"), &report)?;
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    println!(
        "queries {}  AP25 {:.4}  AP>0 {:.4}",
        report.total, report.rate_25, report.rate_any
    );
    close_gateway(gw.as_ref(), gw_args)?;
    rec.param("queries", all_queries.len());
    rec.write(out, "eval-ground", cfg)
}

pub fn export_graph(cfg: &Config, graph: &Path, out: &Path) -> Result<()> {
    let g = open_graph(graph, "--graph")?;
    write_json(
        &out.join(GRAPH_DOCUMENT),
        &funcgraph::graph::export_graph(&g),
    )?;
    let mut rec = RunRecord::default();
    rec.input(graph);
    rec.write(out, "export-graph", cfg)
}

#[derive(Serialize)]
struct SceneStats {
    scene_id: String,
    frames: usize,
    scan_points: usize,
    annotations: BTreeMap<Affordance, usize>,
    skipped_annotations: usize,
    detection_files: usize,
}

#[derive(Serialize)]
struct GraphStats {
    objects: usize,
    functional_elements: usize,
    parentless_elements: usize,
    relations: usize,
    frames_ingested: usize,
    labels: BTreeMap<String, usize>,
}

#[derive(Serialize)]
struct Stats {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    scenes: Vec<SceneStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    graph: Option<GraphStats>,
}

pub fn stats(cfg: &Config, scenes: Option<&Path>, graph: Option<&Path>, out: &Path) -> Result<()> {
    let mut rec = RunRecord::default();
    let mut stats = Stats {
        scenes: Vec::new(),
        graph: None,
    };
    if let Some(root) = scenes {
        for d in scene_dirs(root, "--scenes")? {
            let (m, ls) = open_scene(&d, "--scenes")?;
            let mut annotations = BTreeMap::new();
            for a in &ls.annotations {
                *annotations.entry(a.affordance).or_default() += 1;
            }
            let files = scene_files(&d, &m, false, true);
            let detection_files = files.len() - 3 - m.frames.len();
            rec.input(d.join(SCENE_MANIFEST));
            stats.scenes.push(SceneStats {
                scene_id: ls.scene_id,
                frames: ls.frames.len(),
                scan_points: ls.scan.len(),
                annotations,
                skipped_annotations: ls.skipped_annotations.len(),
                detection_files,
            });
        }
    }
    if let Some(p) = graph {
        let g = open_graph(p, "--graph")?;
        rec.input(p);
        let mut labels = BTreeMap::new();
        for n in g.nodes.values() {
            *labels.entry(n.display_label()).or_default() += 1;
        }
        stats.graph = Some(GraphStats {
            objects: g.objects().count(),
            functional_elements: g.functional_elements().count(),
            parentless_elements: g.parentless().count(),
            relations: g.relations.len(),
            frames_ingested: g.frames_ingested,
            labels,
        });
    }
    write_json(&out.join("stats.json"), &stats)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    rec.write(out, "stats", cfg)
}
