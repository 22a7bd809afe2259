//! Command-line workflow around the scene-graph navigation library.
//!
//! One binary, nine subcommands: generate scenes, extract supervision,
//! train and evaluate the graph network and the navigation policy, trace
//! fused maps along rollouts, export global graphs, and plot metric
//! curves. Every command prints exactly one machine-parsable `key=value`
//! summary line to stdout, persists the merged effective configuration
//! next to its outputs, and exits 0 on success, 1 on a usage error, and
//! 2 on a runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use sgnav::config::Config;
use sgnav::dataset::{extract_dataset, read_dataset, to_samples, write_dataset, ExtractOpts};
use sgnav::graphnet::{eval_sgg, train_sgg, SgtnModel};
use sgnav::gtruth::extract_gt;
use sgnav::plot::{svg_line_chart, MetricsCsv};
use sgnav::policy::{
    evaluate, sample_episode_spec, train_il, train_ppo, write_episode_log, EvalMetrics, EvalSet,
    ExpertReplayAgent, NavAgent, NavModel, NeverStopAgent, PolicyAgent, RandomAgent,
};
use sgnav::scenemap::{
    trace_rollout, EpisodeTrace, FrameSource, GraphFormat, TraceFocus, DEFAULT_FUSION_RADIUS,
};
use sgnav::world::{generate_scene, AgentPose, Scene, MAX_EPISODE_STEPS};
use sgnav::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sgnav",
    version,
    about = "Scene-graph navigation workflow: scenes, datasets, training, evaluation, tracing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural scenes as JSON files
    GenScenes(GenScenesArgs),
    /// Extract an (observation, visible-subgraph) dataset from scenes
    ExtractGt(ExtractGtArgs),
    /// Train the scene-graph network on an extracted dataset
    TrainSgg(TrainSggArgs),
    /// Evaluate a scene-graph checkpoint on a dataset
    EvalSgg(EvalSggArgs),
    /// Train the navigation policy by imitation or PPO
    TrainNav(TrainNavArgs),
    /// Evaluate a navigation agent over sampled episodes
    EvalNav(EvalNavArgs),
    /// Roll out one episode and log the per-step attention focus
    Trace(RolloutArgs),
    /// Roll out one episode and export the fused global graph
    ExportGraph(ExportGraphArgs),
    /// Render metric CSV columns as an SVG line chart
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenScenesArgs {
    /// Configuration file; library defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of scenes to generate
    #[arg(long, default_value_t = 10)]
    count: u64,
    /// Seed of the first scene; scene i uses seed + i
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractGtArgs {
    /// Configuration file; library defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding scene_*.json files
    #[arg(long)]
    scenes: PathBuf,
    /// Observation poses sampled per scene
    #[arg(long, default_value_t = 10)]
    poses_per_scene: usize,
    /// Base seed for pose sampling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep only samples seeing at least this many objects
    #[arg(long, default_value_t = 1)]
    min_nodes: usize,
    /// Keep only samples seeing at most this many objects; unbounded when omitted
    #[arg(long)]
    max_nodes: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainSggArgs {
    /// Configuration file; library defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset JSONL produced by extract-gt
    #[arg(long)]
    dataset: PathBuf,
    /// Override the configured epoch count
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the configured training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalSggArgs {
    /// Configuration file; library defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene-graph checkpoint produced by train-sgg
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset JSONL produced by extract-gt
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainNavArgs {
    /// Training mode
    #[arg(long, value_enum)]
    mode: Mode,
    /// Configuration file; library defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding scene_*.json files
    #[arg(long)]
    scenes: PathBuf,
    /// Override the configured training seed for the chosen mode
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalNavArgs {
    /// Configuration file; library defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding scene_*.json files
    #[arg(long)]
    scenes: PathBuf,
    /// Agent under evaluation
    #[arg(long, value_enum, default_value_t = AgentKind::Policy)]
    agent: AgentKind,
    /// Navigation checkpoint; required with the policy agent
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override the configured episode count per scene
    #[arg(long)]
    episodes: Option<usize>,
    /// Override the configured evaluation seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by the rollout-driven commands (trace, export-graph).
#[derive(Args)]
struct RolloutArgs {
    /// Configuration file; library defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene JSON file
    #[arg(long)]
    scene: PathBuf,
    /// Navigation checkpoint backing the policy agent and model frames
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Rollout agent; defaults to policy with a checkpoint, expert without
    #[arg(long, value_enum)]
    agent: Option<RolloutAgent>,
    /// Frame source; defaults to model with a checkpoint, reference without
    #[arg(long, value_enum)]
    source: Option<SourceKind>,
    /// Episode seed; overrides the configured evaluation seed
    #[arg(long)]
    seed: Option<u64>,
    /// Step budget for the rollout
    #[arg(long, default_value_t = MAX_EPISODE_STEPS)]
    max_steps: usize,
    /// Node-fusion radius in meters
    #[arg(long, default_value_t = DEFAULT_FUSION_RADIUS)]
    radius: f64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportGraphArgs {
    #[command(flatten)]
    rollout: RolloutArgs,
    /// Export encoding
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
}

#[derive(Args)]
struct PlotArgs {
    /// Metrics CSV produced by the train and eval commands
    #[arg(long)]
    csv: PathBuf,
    /// Comma-separated column names to draw; all columns when omitted
    #[arg(long)]
    columns: Option<String>,
    /// Output SVG file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Il,
    Ppo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AgentKind {
    Policy,
    Expert,
    Random,
    NeverStop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RolloutAgent {
    Policy,
    Expert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SourceKind {
    Model,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Dot,
    Json,
}

impl From<FormatArg> for GraphFormat {
    fn from(f: FormatArg) -> GraphFormat {
        match f {
            FormatArg::Dot => GraphFormat::Dot,
            FormatArg::Json => GraphFormat::Json,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<String> {
    match command {
        Command::GenScenes(a) => run_gen_scenes(a),
        Command::ExtractGt(a) => run_extract_gt(a),
        Command::TrainSgg(a) => run_train_sgg(a),
        Command::EvalSgg(a) => run_eval_sgg(a),
        Command::TrainNav(a) => run_train_nav(a),
        Command::EvalNav(a) => run_eval_nav(a),
        Command::Trace(a) => run_trace(a),
        Command::ExportGraph(a) => run_export_graph(a),
        Command::Plot(a) => run_plot(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

/// Create the output directory and echo the effective configuration into
/// it, so every run records exactly what produced it.
fn init_out_dir(dir: &Path, cfg: &Config) -> Result<()> {
    fs::create_dir_all(dir)?;
    cfg.save(&dir.join("config.json"))
}

fn scene_file_name(seed: u64) -> String {
    format!("scene_{seed:05}.json")
}

/// Load every scene_*.json in the directory, in filename order. Files
/// that fail to parse are skipped with a warning on stderr; it is an
/// error if none survive.
fn load_scene_dir(dir: &Path) -> Result<Vec<Scene>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("scene_") && name.ends_with(".json") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::arg(format!("no scene_*.json files in {}", dir.display())));
    }
    let mut scenes = Vec::new();
    for path in &files {
        match Scene::load(path) {
            Ok(s) => scenes.push(s),
            Err(e) => eprintln!("warning: skipping {}: {e}", path.display()),
        }
    }
    if scenes.is_empty() {
        return Err(Error::arg(format!(
            "every scene file in {} failed to load",
            dir.display()
        )));
    }
    Ok(scenes)
}

fn run_gen_scenes(a: GenScenesArgs) -> Result<String> {
    let cfg = load_config(a.config.as_deref())?;
    if a.count == 0 {
        return Err(Error::arg("count must be at least 1"));
    }
    init_out_dir(&a.out, &cfg)?;
    for i in 0..a.count {
        let seed = a
            .seed
            .checked_add(i)
            .ok_or_else(|| Error::arg("scene seed overflowed"))?;
        let scene = generate_scene(seed, &cfg.scene_gen)?;
        scene.save(&a.out.join(scene_file_name(seed)))?;
    }
    Ok(format!("scenes={} out={}", a.count, a.out.display()))
}

fn run_extract_gt(a: ExtractGtArgs) -> Result<String> {
    let cfg = load_config(a.config.as_deref())?;
    let scenes = load_scene_dir(&a.scenes)?;
    let opts = ExtractOpts {
        poses_per_scene: a.poses_per_scene,
        eps: cfg.gtruth.eps,
        seed: a.seed,
        min_nodes: a.min_nodes,
        max_nodes: a.max_nodes.unwrap_or(usize::MAX),
    };
    let (meta, records) = extract_dataset(&scenes, &cfg.observation, &opts)?;
    init_out_dir(&a.out, &cfg)?;
    write_dataset(&a.out.join("dataset.jsonl"), &meta, &records)?;
    Ok(format!(
        "scenes={} records={} out={}",
        scenes.len(),
        records.len(),
        a.out.display()
    ))
}

fn run_train_sgg(a: TrainSggArgs) -> Result<String> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(epochs) = a.epochs {
        cfg.train.sgg.epochs = epochs;
    }
    if let Some(seed) = a.seed {
        cfg.train.sgg.seed = seed;
    }
    cfg.validate()?;
    let (meta, records) = read_dataset(&a.dataset)?;
    if meta.obs.d_v != cfg.sgtn.d_v {
        return Err(Error::arg(format!(
            "dataset appearance width {} does not match the configured model width {}",
            meta.obs.d_v, cfg.sgtn.d_v
        )));
    }
    let samples = to_samples(&records, &cfg.sgtn.sigmas)?;
    init_out_dir(&a.out, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.sgg.seed);
    let mut model = SgtnModel::new(cfg.sgtn, &mut rng)?;
    let history = train_sgg(&mut model, &samples, &cfg.train.sgg)?;
    let checkpoint = a.out.join("sgtn.json");
    model.save(&checkpoint)?;
    let mut csv = String::from("epoch,train_loss,node_accuracy,macro_f1,mean_loss\n");
    for m in &history {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            m.epoch, m.train_loss, m.holdout.node_accuracy, m.holdout.macro_f1, m.holdout.mean_loss
        ));
    }
    fs::write(a.out.join("metrics.csv"), csv)?;
    let last = history.last().expect("at least one epoch");
    Ok(format!(
        "epochs={} node_acc={:.3} macro_f1={:.3} checkpoint={}",
        history.len(),
        last.holdout.node_accuracy,
        last.holdout.macro_f1,
        checkpoint.display()
    ))
}

fn run_eval_sgg(a: EvalSggArgs) -> Result<String> {
    let cfg = load_config(a.config.as_deref())?;
    let model = SgtnModel::load(&a.checkpoint)?;
    let (meta, records) = read_dataset(&a.dataset)?;
    if meta.obs.d_v != model.hyper.d_v {
        return Err(Error::arg(format!(
            "dataset appearance width {} does not match the checkpoint width {}",
            meta.obs.d_v, model.hyper.d_v
        )));
    }
    let samples = to_samples(&records, &model.hyper.sigmas)?;
    let metrics = eval_sgg(&model, &samples, cfg.train.sgg.w_edge)?;
    init_out_dir(&a.out, &cfg)?;
    let csv = format!(
        "node_accuracy,macro_f1,f1_coplanar_x,f1_coplanar_y,f1_coplanar_z,f1_same_region,mean_loss\n\
         {:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        metrics.node_accuracy,
        metrics.macro_f1,
        metrics.edge_f1[0],
        metrics.edge_f1[1],
        metrics.edge_f1[2],
        metrics.edge_f1[3],
        metrics.mean_loss
    );
    fs::write(a.out.join("metrics.csv"), csv)?;
    Ok(format!(
        "node_acc={:.3} macro_f1={:.3} mean_loss={:.4} out={}",
        metrics.node_accuracy,
        metrics.macro_f1,
        metrics.mean_loss,
        a.out.display()
    ))
}

fn run_train_nav(a: TrainNavArgs) -> Result<String> {
    let mut cfg = load_config(a.config.as_deref())?;
    match a.mode {
        Mode::Il => {
            if let Some(seed) = a.seed {
                cfg.train.il.seed = seed;
            }
        }
        Mode::Ppo => {
            if let Some(seed) = a.seed {
                cfg.train.ppo.seed = seed;
            }
        }
    }
    cfg.validate()?;
    let scenes = load_scene_dir(&a.scenes)?;
    init_out_dir(&a.out, &cfg)?;
    let seed = match a.mode {
        Mode::Il => cfg.train.il.seed,
        Mode::Ppo => cfg.train.ppo.seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = NavModel::new(cfg.sgtn, cfg.policy_hyper(), &mut rng)?;
    let checkpoint = a.out.join("nav.json");
    let summary = match a.mode {
        Mode::Il => {
            let history = train_il(&scenes, &mut model, &cfg.il_config())?;
            let mut csv = String::from("epoch,action_ce,sgg_loss,value_mse\n");
            for m in &history {
                csv.push_str(&format!(
                    "{},{:.6},{:.6},{:.6}\n",
                    m.epoch, m.action_ce, m.sgg_loss, m.value_mse
                ));
            }
            fs::write(a.out.join("metrics.csv"), csv)?;
            let last = history.last().expect("at least one epoch");
            format!(
                "mode=il epochs={} action_ce={:.4} checkpoint={}",
                history.len(),
                last.action_ce,
                checkpoint.display()
            )
        }
        Mode::Ppo => {
            let history = train_ppo(&scenes, &mut model, &cfg.ppo_config())?;
            let mut csv = String::from("update,mean_return,entropy,policy_loss,value_loss\n");
            for m in &history {
                csv.push_str(&format!(
                    "{},{:.6},{:.6},{:.6},{:.6}\n",
                    m.update, m.mean_return, m.entropy, m.policy_loss, m.value_loss
                ));
            }
            fs::write(a.out.join("metrics.csv"), csv)?;
            let last = history.last().expect("at least one update");
            format!(
                "mode=ppo updates={} mean_return={:.4} checkpoint={}",
                history.len(),
                last.mean_return,
                checkpoint.display()
            )
        }
    };
    model.save(&checkpoint)?;
    Ok(summary)
}

fn run_eval_nav(a: EvalNavArgs) -> Result<String> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(episodes) = a.episodes {
        cfg.eval.episodes = episodes;
    }
    if let Some(seed) = a.seed {
        cfg.eval.seed = seed;
    }
    cfg.validate()?;
    let scenes = load_scene_dir(&a.scenes)?;
    init_out_dir(&a.out, &cfg)?;

    let mut gts = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        gts.push(extract_gt(scene, cfg.gtruth.eps)?);
    }
    let mut sets = Vec::with_capacity(scenes.len());
    for (scene, gt) in scenes.iter().zip(&gts) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed ^ scene.seed.rotate_left(17));
        let mut specs = Vec::with_capacity(cfg.eval.episodes);
        for _ in 0..cfg.eval.episodes {
            specs.push(sample_episode_spec(scene, cfg.eval.min_goal_distance, &mut rng)?);
        }
        sets.push(EvalSet { scene, gt, specs });
    }

    let model = match a.agent {
        AgentKind::Policy => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::arg("the policy agent requires --checkpoint"))?;
            let m = NavModel::load(path)?;
            if m.sgtn.hyper.d_v != cfg.observation.d_v {
                return Err(Error::arg(format!(
                    "checkpoint appearance width {} does not match the configured observation width {}",
                    m.sgtn.hyper.d_v, cfg.observation.d_v
                )));
            }
            Some(m)
        }
        _ => None,
    };
    let mut agent: Box<dyn NavAgent> = match a.agent {
        AgentKind::Policy => Box::new(PolicyAgent::greedy(model.as_ref().expect("loaded above"))),
        AgentKind::Expert => Box::new(ExpertReplayAgent::new()),
        AgentKind::Random => Box::new(RandomAgent::new(cfg.eval.seed)),
        AgentKind::NeverStop => Box::new(NeverStopAgent),
    };

    let (metrics, episodes) = evaluate(&sets, agent.as_mut(), &cfg.observation, &cfg.reward)?;
    fs::write(
        a.out.join("metrics.csv"),
        format!("{}\n{}\n", EvalMetrics::csv_header(), metrics.csv_row(cfg.eval.seed)),
    )?;
    write_episode_log(&a.out.join("episodes.jsonl"), &episodes)?;
    Ok(format!(
        "sr={:.3} spl={:.3} ndtw={:.3} ne={:.3} episodes={}",
        metrics.sr, metrics.spl, metrics.ndtw, metrics.ne, metrics.episodes
    ))
}

/// One rollout's products plus the labels describing how it was driven.
struct RolloutProduct {
    scene_seed: u64,
    episode_seed: u64,
    agent: &'static str,
    source: &'static str,
    trace: EpisodeTrace,
}

/// Resolve the agent/source defaults, run one traced episode, and hand
/// back the products. The episode seed drives both the spec sampling and
/// the observation noise stream, so identical flags replay identically.
fn run_rollout(a: &RolloutArgs, cfg: &Config) -> Result<RolloutProduct> {
    let scene = Scene::load(&a.scene)?;
    let agent_kind = a.agent.unwrap_or(if a.checkpoint.is_some() {
        RolloutAgent::Policy
    } else {
        RolloutAgent::Expert
    });
    let source_kind = a.source.unwrap_or(if a.checkpoint.is_some() {
        SourceKind::Model
    } else {
        SourceKind::Reference
    });

    let needs_model =
        agent_kind == RolloutAgent::Policy || source_kind == SourceKind::Model;
    let model = if needs_model {
        let path = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::arg("a policy agent or model frames require --checkpoint"))?;
        let m = NavModel::load(path)?;
        if m.sgtn.hyper.d_v != cfg.observation.d_v {
            return Err(Error::arg(format!(
                "checkpoint appearance width {} does not match the configured observation width {}",
                m.sgtn.hyper.d_v, cfg.observation.d_v
            )));
        }
        Some(m)
    } else {
        None
    };
    let gt = if source_kind == SourceKind::Reference {
        Some(extract_gt(&scene, cfg.gtruth.eps)?)
    } else {
        None
    };

    let episode_seed = cfg.eval.seed;
    let mut spec_rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let spec = sample_episode_spec(&scene, cfg.eval.min_goal_distance, &mut spec_rng)?;

    let mut agent: Box<dyn NavAgent> = match agent_kind {
        RolloutAgent::Policy => {
            Box::new(PolicyAgent::greedy(model.as_ref().expect("checked above")))
        }
        RolloutAgent::Expert => Box::new(ExpertReplayAgent::new()),
    };
    let source = match source_kind {
        SourceKind::Model => FrameSource::Model(&model.as_ref().expect("checked above").sgtn),
        SourceKind::Reference => FrameSource::Reference(gt.as_ref().expect("set above")),
    };
    let mut obs_rng = ChaCha8Rng::seed_from_u64(episode_seed ^ scene.seed.rotate_left(17));
    let trace = trace_rollout(
        &scene,
        &spec,
        agent.as_mut(),
        source,
        &cfg.observation,
        a.radius,
        a.max_steps,
        &mut obs_rng,
    )?;
    Ok(RolloutProduct {
        scene_seed: scene.seed,
        episode_seed,
        agent: match agent_kind {
            RolloutAgent::Policy => "policy",
            RolloutAgent::Expert => "expert",
        },
        source: match source_kind {
            SourceKind::Model => "model",
            SourceKind::Reference => "reference",
        },
        trace,
    })
}

#[derive(Serialize)]
struct TraceMeta<'a> {
    scene_seed: u64,
    episode_seed: u64,
    agent: &'a str,
    source: &'a str,
    steps: usize,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    step: usize,
    pose: &'a AgentPose,
    focus: Option<&'a TraceFocus>,
}

fn run_trace(mut a: RolloutArgs) -> Result<String> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed.take() {
        cfg.eval.seed = seed;
    }
    cfg.validate()?;
    let p = run_rollout(&a, &cfg)?;
    init_out_dir(&a.out, &cfg)?;

    let meta = TraceMeta {
        scene_seed: p.scene_seed,
        episode_seed: p.episode_seed,
        agent: p.agent,
        source: p.source,
        steps: p.trace.poses.len(),
    };
    let mut text = serde_json::to_string(&meta).expect("trace meta serializes");
    text.push('\n');
    for (step, (pose, focus)) in p.trace.poses.iter().zip(&p.trace.focus).enumerate() {
        let line = TraceLine { step, pose, focus: focus.as_ref() };
        text.push_str(&serde_json::to_string(&line).expect("trace line serializes"));
        text.push('\n');
    }
    let path = a
        .out
        .join(format!("trace_scene{:05}_ep{}.jsonl", p.scene_seed, p.episode_seed));
    fs::write(&path, text)?;
    Ok(format!(
        "steps={} nodes={} edges={} out={}",
        p.trace.poses.len(),
        p.trace.graph.nodes().len(),
        p.trace.graph.edges().len(),
        path.display()
    ))
}

fn run_export_graph(a: ExportGraphArgs) -> Result<String> {
    let mut rollout = a.rollout;
    let mut cfg = load_config(rollout.config.as_deref())?;
    if let Some(seed) = rollout.seed.take() {
        cfg.eval.seed = seed;
    }
    cfg.validate()?;
    let p = run_rollout(&rollout, &cfg)?;
    init_out_dir(&rollout.out, &cfg)?;

    let ext = match a.format {
        FormatArg::Dot => "dot",
        FormatArg::Json => "json",
    };
    let path = rollout
        .out
        .join(format!("graph_scene{:05}_ep{}.{ext}", p.scene_seed, p.episode_seed));
    p.trace.graph.save(&path, a.format.into())?;
    Ok(format!(
        "nodes={} edges={} components={} file={}",
        p.trace.graph.nodes().len(),
        p.trace.graph.edges().len(),
        p.trace.graph.room_components().len(),
        path.display()
    ))
}

fn run_plot(a: PlotArgs) -> Result<String> {
    let csv = MetricsCsv::load(&a.csv)?;
    let columns: Vec<&str> = match &a.columns {
        Some(list) => list.split(',').map(str::trim).filter(|c| !c.is_empty()).collect(),
        None => Vec::new(),
    };
    let svg = svg_line_chart(&csv, &columns)?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&a.out, &svg)?;
    let series = if columns.is_empty() { csv.names().len() } else { columns.len() };
    Ok(format!("series={series} rows={} out={}", csv.len(), a.out.display()))
}
