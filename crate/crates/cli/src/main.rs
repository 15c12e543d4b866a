mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Functionality-aware 3D scene graphs: dataset generation, graph
/// construction, relation voting and evaluation.
#[derive(Debug, Parser)]
#[command(name = "funcgraph", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads; 0 uses every logical core.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayChoice {
    /// No model: geometric relations and keyword query resolution.
    None,
    Mock,
    Replay,
    Live,
}

#[derive(Debug, Args)]
pub struct GatewayArgs {
    #[arg(long, value_enum, default_value_t = GatewayChoice::None)]
    pub gateway: GatewayChoice,
    /// Session file feeding the mock or replay gateway.
    #[arg(long)]
    pub session: Option<PathBuf>,
    /// Write the exchanged requests and replies to this session file.
    #[arg(long)]
    pub record: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Project 3D annotations into frames and write a 2D detection dataset.
    GenDataset {
        /// Scene directory, or a directory of scene directories.
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the patch-sliced dataset.
        #[arg(long)]
        slice: bool,
        /// Also write one label text file per image.
        #[arg(long)]
        labels: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        theta_depth: Option<f64>,
        #[arg(long)]
        theta_area: Option<f64>,
        #[arg(long)]
        theta_points: Option<f64>,
    },
    /// Generate seeded synthetic scenes with detections and ground truth.
    GenSynthetic {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes; scene `i` uses seed `seed + i`.
        #[arg(long, default_value_t = 1)]
        scenes: u64,
    },
    /// Build a scene graph from a scene directory and its detections.
    BuildGraph {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Detection directory; defaults to the one named in the scene manifest.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Save a partial checkpoint after every batch merge.
        #[arg(long)]
        checkpoint: bool,
        /// Continue from the partial checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        theta_geo: Option<f64>,
        #[arg(long)]
        theta_sem: Option<f64>,
        #[arg(long)]
        theta_num: Option<usize>,
    },
    /// Name functional elements with a vision-language model or a label table.
    RefineLabels {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum)]
        mode: RefineModeArg,
        /// JSON list of `[name, embedding]` pairs for the closed-vocabulary mode.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        gateway: GatewayArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Vote spatial relations between co-visible objects.
    Relations {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-affordance instance segmentation AP.
    EvalSeg {
        #[arg(long)]
        scenes: PathBuf,
        /// Graph checkpoint, or a directory holding `<scene_id>/graph.ckpt`.
        #[arg(
            long,
            required_unless_present = "predictions",
            conflicts_with = "predictions"
        )]
        graphs: Option<PathBuf>,
        /// JSON object mapping scene ids to prediction lists.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Task-driven affordance grounding.
    EvalGround {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        graphs: PathBuf,
        /// Query list; defaults to each scene's `queries.json`.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[command(flatten)]
        gateway: GatewayArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the JSON document of a graph checkpoint.
    ExportGraph {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize scenes and/or a graph.
    Stats {
        #[arg(long, required_unless_present = "graph")]
        scenes: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RefineModeArg {
    Context,
    NoContext,
    FeatureClosedVocab,
}

/// Problem with the invocation or its inputs (exit code 1).
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn input_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(InputError(msg.into()))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config::load(cli.global.config.as_deref(), &cli.global.overrides)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.workers)
        .build_global()
        .map_err(|e| anyhow::anyhow!("thread pool: {e}"))?;
    use commands as c;
    match cli.command {
        Command::GenDataset {
            scenes,
            out,
            slice,
            labels,
            seed,
            theta_depth,
            theta_area,
            theta_points,
        } => {
            let mut cfg = cfg;
            cfg.seed = seed.unwrap_or(cfg.seed);
            let p = &mut cfg.projection;
            p.theta_depth = theta_depth.unwrap_or(p.theta_depth);
            p.theta_area = theta_area.unwrap_or(p.theta_area);
            p.theta_points = theta_points.unwrap_or(p.theta_points);
            c::gen_dataset(&cfg, &scenes, &out, slice, labels)
        }
        Command::GenSynthetic { seed, out, scenes } => {
            let mut cfg = cfg;
            cfg.seed = seed.unwrap_or(cfg.seed);
            c::gen_synthetic(&cfg, &out, scenes)
        }
        Command::BuildGraph {
            scene,
            out,
            detections,
            checkpoint,
            resume,
            theta_geo,
            theta_sem,
            theta_num,
        } => {
            let mut cfg = cfg;
            let g = &mut cfg.pipeline.graph;
            g.theta_geo = theta_geo.unwrap_or(g.theta_geo);
            g.theta_sem = theta_sem.unwrap_or(g.theta_sem);
            g.theta_num = theta_num.unwrap_or(g.theta_num);
            c::build_graph(
                &cfg,
                &scene,
                detections.as_deref(),
                &out,
                checkpoint,
                resume,
            )
        }
        Command::RefineLabels {
            graph,
            scene,
            mode,
            labels,
            gateway,
            out,
        } => c::refine_labels(
            &cfg,
            &graph,
            &scene,
            mode,
            labels.as_deref(),
            &gateway,
            &out,
        ),
        Command::Relations {
            graph,
            scene,
            gateway,
            out,
        } => c::relations(&cfg, &graph, &scene, &gateway, &out),
        Command::EvalSeg {
            scenes,
            graphs,
            predictions,
            out,
        } => c::eval_seg(
            &cfg,
            &scenes,
            graphs.as_deref(),
            predictions.as_deref(),
            &out,
        ),
        Command::EvalGround {
            scenes,
            graphs,
            queries,
            gateway,
            out,
        } => c::eval_ground(&cfg, &scenes, &graphs, queries.as_deref(), &gateway, &out),
        Command::ExportGraph { graph, out } => c::export_graph(&cfg, &graph, &out),
        Command::Stats { scenes, graph, out } => {
            c::stats(&cfg, scenes.as_deref(), graph.as_deref(), &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
