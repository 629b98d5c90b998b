//! `omninav`: dataset generation, training, evaluation and experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use omninav_core::datagen::{generate_dataset, DatasetShard, GenConfig, MANIFEST_FILE};
use omninav_core::evalcli::{
    build_tasks, compute_metrics, run_ablation, run_adaptation, run_suite, ArmSpec,
    ExperimentConfig, SuiteSpec, TaskKind, TaskSet, EPISODE_BUDGET,
};
use omninav_core::numerics::FdOptions;
use omninav_core::policy::{load_checkpoint, Checkpoint, ModalityMask, PolicyConfig};
use omninav_core::reannotate::{reannotate_dataset, ReannotateConfig};
use omninav_core::toponav::{build_graph, load_graph, run_toponav_episode, save_graph, GRAPH_FILE};
use omninav_core::training::{
    adapt_new_modality, finetune, gradcheck_policy, train, MetricsRecord, Mixture, TrainConfig,
};
use omninav_core::worldsim::{generate_world, World, WorldGenConfig};
use omninav_core::Error;

#[derive(Parser)]
#[command(
    name = "omninav",
    version,
    about = "Omni-modal goal-conditioned navigation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Writes a machine-readable result here.
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and save procedural worlds.
    GenWorlds {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one dataset shard.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Relabel a fast-embodiment shard with feasible slow-robot chunks.
    Reannotate {
        #[command(flatten)]
        common: Common,
        /// Shard directory to relabel.
        #[arg(long)]
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy from scratch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Add and train a satellite encoder on a frozen checkpoint.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to start from.
        #[arg(long)]
        base: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune every parameter on a small data budget.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to start from.
        #[arg(long)]
        base: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an evaluation suite and print the comparison table.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Image-goal navigation through topological graphs.
    Toponav {
        #[command(flatten)]
        common: Common,
        /// Overrides the configured checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Saves the graph of every episode under this directory.
        #[arg(long)]
        graph_out: Option<PathBuf>,
    },
    /// Train the ablation arms and evaluate them.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Uses the smoke-sized preset when no config is given.
        #[arg(long)]
        tiny: bool,
        /// Also runs the adaptation and fine-tuning study.
        #[arg(long)]
        adaptation: bool,
        /// Output directory for checkpoints and metrics logs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full policy and objective gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Coordinates checked per tensor; 0 checks all of them.
        #[arg(long, default_value_t = 32)]
        coords: usize,
    },
    /// Summarize a checkpoint, shard, world, graph or metrics log.
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Checkpoint, shard or graph directory, world JSON or metrics log.
        path: PathBuf,
    },
}

/// Failures split by exit code.
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Invalid(_) | Error::Checkpoint { .. } | Error::Json(_) | Error::Shape { .. } => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<Value, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let common = cli.command.common().clone();
    let result = run(cli.command).and_then(|v| {
        if let Some(p) = &common.json_out {
            write_json(p, &v)?;
        }
        Ok(v)
    });
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenWorlds { common, .. }
            | Command::GenData { common, .. }
            | Command::Reannotate { common, .. }
            | Command::Train { common, .. }
            | Command::Adapt { common, .. }
            | Command::Finetune { common, .. }
            | Command::Eval { common }
            | Command::Toponav { common, .. }
            | Command::Ablate { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::Inspect { common, .. } => common,
        }
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> std::result::Result<(), Failure> {
    let text = serde_json::to_string_pretty(v).map_err(Error::from)?;
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", d.display())))?;
    }
    std::fs::write(path, text + "\n")
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn read_config<T: DeserializeOwned>(common: &Common) -> std::result::Result<Option<T>, Failure> {
    let Some(path) = &common.config else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Failure::Validation(format!("config {}: {e}", path.display())))
}

fn require_config<T: DeserializeOwned>(common: &Common) -> std::result::Result<T, Failure> {
    read_config(common)?.ok_or_else(|| Failure::Validation("--config is required".into()))
}

fn progress(r: &MetricsRecord) {
    if r.step.is_multiple_of(100) {
        eprintln!(
            "step {} J {:.5} il {:.5} obj {:.5} sm {:.5}",
            r.step, r.objective.j, r.objective.j_il, r.objective.j_obj, r.objective.j_sm
        );
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::GenWorlds { common, out } => gen_worlds(&common, &out),
        Command::GenData { common, out } => {
            let mut cfg: GenConfig = require_config(&common)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let shard = generate_dataset(&cfg, Some(&out))?;
            Ok(serde_json::to_value(&shard.manifest).map_err(Error::from)?)
        }
        Command::Reannotate { common, input, out } => {
            let cfg: ReannotateConfig = read_config(&common)?.unwrap_or_default();
            let shard = DatasetShard::load(&input)?;
            let relabeled = reannotate_dataset(&shard, &cfg)?;
            relabeled.save(&out)?;
            Ok(serde_json::to_value(&relabeled.manifest).map_err(Error::from)?)
        }
        Command::Train { common, out } => {
            let cfg = train_config(&common)?;
            let r = train(&cfg, Some(&out), &mut progress)?;
            Ok(train_summary(&r.checkpoint, &r.metrics))
        }
        Command::Adapt { common, base, out } => {
            let cfg = train_config(&common)?;
            let base = load_checkpoint(&base)?;
            let mixture = Mixture::load(&cfg.mixture)?;
            let r = adapt_new_modality(&base, &cfg, &mixture, Some(&out), &mut progress)?;
            Ok(train_summary(&r.checkpoint, &r.metrics))
        }
        Command::Finetune { common, base, out } => {
            let cfg = train_config(&common)?;
            let base = load_checkpoint(&base)?;
            let shards = cfg
                .mixture
                .shards
                .iter()
                .map(|d| DatasetShard::load(d))
                .collect::<omninav_core::Result<Vec<_>>>()?;
            let r = finetune(&base, &cfg, shards, Some(&out), &mut progress)?;
            Ok(train_summary(&r.checkpoint, &r.metrics))
        }
        Command::Eval { common } => {
            let mut spec: SuiteSpec = require_config(&common)?;
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            spec.validate()?;
            let report = run_suite(&spec, &spec.load_checkpoints()?)?;
            println!("{}", report.table);
            Ok(serde_json::to_value(&report).map_err(Error::from)?)
        }
        Command::Toponav {
            common,
            checkpoint,
            graph_out,
        } => toponav(&common, checkpoint, graph_out.as_deref()),
        Command::Ablate {
            common,
            tiny,
            adaptation,
            out,
        } => {
            let mut cfg: ExperimentConfig = read_config(&common)?.unwrap_or_else(|| {
                if tiny {
                    ExperimentConfig::tiny()
                } else {
                    ExperimentConfig::default()
                }
            });
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let mut log = |m: &str| eprintln!("{m}");
            let (mut report, arms) = run_ablation(&cfg, out.as_deref(), &mut log)?;
            println!("{}", report.suites["ablation"].table);
            if adaptation {
                let more = run_adaptation(&cfg, &arms["omni"], out.as_deref(), &mut log)?;
                for name in ["adaptation", "finetune"] {
                    println!("{}", more.suites[name].table);
                }
                report.arms.extend(more.arms);
                report.suites.extend(more.suites);
            }
            Ok(serde_json::to_value(&report).map_err(Error::from)?)
        }
        Command::Gradcheck {
            common,
            tolerance,
            coords,
        } => {
            let cfg: PolicyConfig = read_config(&common)?.unwrap_or_default();
            let opts = FdOptions {
                max_coords: (coords > 0).then_some(coords),
                seed: common.seed.unwrap_or(0),
                ..FdOptions::default()
            };
            let r = gradcheck_policy(&cfg, common.seed.unwrap_or(0), tolerance, &opts)?;
            println!(
                "max relative error {:.3e} (tolerance {:.0e}): {}",
                r.max_rel_error,
                r.tolerance,
                if r.passed { "pass" } else { "FAIL" }
            );
            let v = serde_json::to_value(&r).map_err(Error::from)?;
            if r.passed {
                Ok(v)
            } else {
                if let Some(p) = &common.json_out {
                    write_json(p, &v)?;
                }
                Err(Failure::Runtime("gradient check failed".into()))
            }
        }
        Command::Inspect { common: _, path } => inspect(&path),
    }
}

fn train_config(common: &Common) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg: TrainConfig = require_config(common)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn train_summary(ck: &Checkpoint, metrics: &[MetricsRecord]) -> Value {
    json!({
        "step": ck.meta.step,
        "seed": ck.meta.seed,
        "mixture_hash": ck.meta.mixture_hash,
        "final": metrics.last(),
    })
}

#[derive(Deserialize)]
struct WorldsConfig {
    /// Half-open seed range.
    seeds: [u64; 2],
    #[serde(default)]
    world: WorldGenConfig,
}

fn gen_worlds(common: &Common, out: &Path) -> Outcome {
    let cfg: WorldsConfig = require_config(common)?;
    let [lo, hi] = cfg.seeds;
    let offset = common.seed.unwrap_or(0);
    if lo >= hi {
        return Err(Failure::Validation(format!(
            "empty seed range [{lo}, {hi})"
        )));
    }
    std::fs::create_dir_all(out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    let mut written = Vec::new();
    let mut failed = Vec::new();
    for seed in lo + offset..hi + offset {
        match generate_world(seed, &cfg.world) {
            Ok(w) => {
                w.save(&out.join(format!("world_{seed}.json")))?;
                written.push(seed);
            }
            Err(Error::WorldGeneration { .. }) => failed.push(seed),
            Err(e) => return Err(e.into()),
        }
    }
    eprintln!("wrote {} worlds, {} failed", written.len(), failed.len());
    Ok(json!({ "written": written, "failed": failed }))
}

#[derive(Deserialize)]
struct ToponavConfig {
    checkpoint: PathBuf,
    eval_worlds: [u64; 2],
    #[serde(default)]
    world: WorldGenConfig,
    episodes: usize,
    #[serde(default = "default_budget")]
    budget: usize,
    #[serde(default)]
    seed: u64,
}

fn default_budget() -> usize {
    EPISODE_BUDGET
}

fn toponav(common: &Common, checkpoint: Option<PathBuf>, graph_out: Option<&Path>) -> Outcome {
    let mut cfg: ToponavConfig = require_config(common)?;
    if let Some(c) = checkpoint {
        cfg.checkpoint = c;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let ck = load_checkpoint(&cfg.checkpoint)?;
    let spec = SuiteSpec {
        arms: vec![ArmSpec {
            name: "toponav".into(),
            checkpoint: cfg.checkpoint.clone(),
            modalities: ModalityMask::ALL,
        }],
        tasks: vec![TaskSet {
            kind: TaskKind::Image,
            episodes: cfg.episodes,
        }],
        eval_worlds: cfg.eval_worlds,
        world: cfg.world.clone(),
        train_worlds: Vec::new(),
        budget: cfg.budget,
        seed: cfg.seed,
    };
    let tasks = build_tasks(&spec)?;
    let mut results = Vec::new();
    let mut rows = Vec::new();
    for (i, t) in tasks.iter().enumerate() {
        let world: World = generate_world(t.world_seed, &cfg.world)?;
        let graph = build_graph(&world, &t.route, &ck)?;
        if let Some(d) = graph_out {
            save_graph(
                &graph,
                &ck.config,
                &ck.meta,
                &d.join(format!("episode_{i}")),
            )?;
        }
        let r = run_toponav_episode(&world, &graph, &ck, t.start, t.budget, cfg.seed + i as u64)?;
        eprintln!(
            "episode {i}: world {} nodes {} {:?} after {} steps",
            t.world_seed,
            graph.len(),
            r.outcome,
            r.steps
        );
        rows.push(json!({
            "world_seed": t.world_seed,
            "nodes": graph.len(),
            "outcome": r.outcome,
            "steps": r.steps,
            "final_distance": r.final_distance,
        }));
        results.push(r);
    }
    let report = compute_metrics(&results, &spec.hash(), cfg.seed)?;
    let m = report.get(TaskKind::Image).expect("image episodes ran");
    println!(
        "image SR {:.2}  Prog. {:.2}  episodes {}",
        m.sr, m.prog, m.episodes
    );
    Ok(json!({ "report": report, "episodes": rows }))
}

fn inspect(path: &Path) -> Outcome {
    let io = |e: std::io::Error| Failure::Runtime(format!("{}: {e}", path.display()));
    let v = if path.is_dir() {
        if path.join(MANIFEST_FILE).exists() {
            let shard = DatasetShard::load(path)?;
            json!({ "kind": "shard", "manifest": shard.manifest })
        } else if path.join(GRAPH_FILE).exists() {
            let g = load_graph(path)?;
            json!({
                "kind": "graph",
                "nodes": g.len(),
                "embedding_dim": g.nodes()[0].embedding.len(),
            })
        } else {
            return Err(Failure::Validation(format!(
                "{} is neither a shard nor a graph directory",
                path.display()
            )));
        }
    } else {
        let bytes = std::fs::read(path).map_err(io)?;
        if path.extension().is_some_and(|e| e == "jsonl") {
            let text = String::from_utf8_lossy(&bytes);
            let records = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str::<MetricsRecord>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(Error::from)?;
            json!({ "kind": "metrics", "records": records.len(), "last": records.last() })
        } else if let Ok(w) = World::from_json(&String::from_utf8_lossy(&bytes)) {
            json!({
                "kind": "world",
                "seed": w.seed,
                "obstacles": w.obstacles.len(),
                "landmarks": w.landmarks.iter().map(|l| l.describe()).collect::<Vec<_>>(),
            })
        } else {
            let ck = Checkpoint::from_bytes(&bytes)?;
            let tensors: usize = ck.params.iter().map(|(_, t)| t.data().len()).sum();
            json!({
                "kind": "checkpoint",
                "step": ck.meta.step,
                "seed": ck.meta.seed,
                "mixture_hash": ck.meta.mixture_hash,
                "parameters": tensors,
                "sat_encoder": ck.has_sat_encoder(),
                "config": ck.config,
            })
        }
    };
    println!("{}", serde_json::to_string_pretty(&v).map_err(Error::from)?);
    Ok(v)
}
