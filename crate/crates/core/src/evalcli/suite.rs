//! Evaluation suites: deterministic task lists on held-out worlds, every arm
//! on every task it can read, JSON reports and the comparison table.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    compute_metrics, run_episode, step_seed, EpisodeResult, MetricsReport, TaskKind, TaskSpec,
    EPISODE_BUDGET, LANG_SUCCESS_RADIUS, SUCCESS_RADIUS,
};
use crate::datagen::{
    make_language_label, sample_lang_route, sample_pose_route, ClauseKind, LangSplit, Modality,
    Planner, PlannerConfig, Route,
};
use crate::error::{Error, Result};
use crate::geometry::EmbodimentSpec;
use crate::policy::{load_checkpoint, Checkpoint, ModalityMask};
use crate::toponav::{build_graph, run_toponav_episode};
use crate::worldsim::{generate_world, World, WorldGenConfig};

/// Start-goal distance of pose, image and satellite tasks, meters.
pub const POSE_TASK_DISTANCE: (f64, f64) = (10.0, 20.0);
/// Start-target distance of instruction tasks, meters.
pub const LANG_TASK_DISTANCE: (f64, f64) = (3.0, 10.0);
const TASK_ATTEMPTS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub checkpoint: PathBuf,
    /// Goal modalities the arm reads; task masks are intersected with it.
    #[serde(default = "all_modalities")]
    pub modalities: ModalityMask,
}

fn all_modalities() -> ModalityMask {
    ModalityMask::ALL
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub kind: TaskKind,
    pub episodes: usize,
}

fn default_budget() -> usize {
    EPISODE_BUDGET
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub arms: Vec<ArmSpec>,
    pub tasks: Vec<TaskSet>,
    /// Half-open world seed range episodes are drawn from.
    pub eval_worlds: [u64; 2],
    #[serde(default)]
    pub world: WorldGenConfig,
    /// Half-open seed ranges of every training shard.
    #[serde(default)]
    pub train_worlds: Vec<[u64; 2]>,
    #[serde(default = "default_budget")]
    pub budget: usize,
    pub seed: u64,
}

impl SuiteSpec {
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("suite spec serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.eval_worlds;
        if a >= b {
            return Err(Error::Invalid(format!(
                "empty evaluation world range [{a}, {b})"
            )));
        }
        if let Some([c, d]) = self.train_worlds.iter().find(|[c, d]| a < *d && *c < b) {
            return Err(Error::Invalid(format!(
                "evaluation worlds [{a}, {b}) overlap training worlds [{c}, {d})"
            )));
        }
        if self.arms.is_empty() || self.tasks.is_empty() {
            return Err(Error::Invalid("suite lists no arms or no tasks".into()));
        }
        let mut names: Vec<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid("duplicate arm name".into()));
        }
        Ok(())
    }

    /// Loads every arm's checkpoint from disk.
    pub fn load_checkpoints(&self) -> Result<BTreeMap<String, Checkpoint>> {
        self.arms
            .iter()
            .map(|a| Ok((a.name.clone(), load_checkpoint(&a.checkpoint)?)))
            .collect()
    }
}

fn task_rng(seed: u64, kind: TaskKind, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(kind.name().as_bytes());
    h.update((index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn task_from_route(kind: TaskKind, world: &World, route: Route, budget: usize) -> Result<TaskSpec> {
    let goal = *route.path.last().unwrap();
    let (lang, target, radius) = match kind {
        TaskKind::Lang | TaskKind::LangOod => {
            let t = route
                .target
                .ok_or_else(|| Error::Invalid("instruction route without target".into()))?;
            let label = make_language_label(world, t, route.clause)?;
            (
                Some(label),
                world.landmark(t).map(|l| l.position),
                LANG_SUCCESS_RADIUS,
            )
        }
        TaskKind::Compose => {
            let t = route
                .target
                .ok_or_else(|| Error::Invalid("instruction route without target".into()))?;
            (
                Some(make_language_label(world, t, route.clause)?),
                None,
                SUCCESS_RADIUS,
            )
        }
        _ => (None, None, SUCCESS_RADIUS),
    };
    Ok(TaskSpec {
        kind,
        world_seed: world.seed,
        start: route.start(),
        goal,
        target,
        mask: kind.mask(),
        lang,
        clause: route.clause,
        success_radius: radius,
        budget,
        route: if kind == TaskKind::Image {
            route.path
        } else {
            Vec::new()
        },
    })
}

fn sample_task(
    kind: TaskKind,
    world: &World,
    rng: &mut ChaCha8Rng,
    index: usize,
    budget: usize,
) -> Result<TaskSpec> {
    let spec = EmbodimentSpec::SLOW;
    let planner = Planner::new(world, spec, PlannerConfig::default());
    let route = match kind {
        TaskKind::Pose | TaskKind::Image | TaskKind::Sat => {
            sample_pose_route(&planner, rng, POSE_TASK_DISTANCE, spec.v_max)?
        }
        TaskKind::Lang => {
            sample_lang_route(&planner, rng, LangSplit::Train, None, LANG_TASK_DISTANCE)?
        }
        TaskKind::LangOod => sample_lang_route(
            &planner,
            rng,
            LangSplit::HeldOutPairs,
            None,
            LANG_TASK_DISTANCE,
        )?,
        TaskKind::Compose => {
            let clause = ClauseKind::ALL[index % ClauseKind::ALL.len()];
            sample_lang_route(
                &planner,
                rng,
                LangSplit::Reserved,
                Some(clause),
                LANG_TASK_DISTANCE,
            )?
        }
    };
    task_from_route(kind, world, route, budget)
}

struct WorldCache<'a> {
    cfg: &'a WorldGenConfig,
    worlds: BTreeMap<u64, Option<World>>,
}

impl WorldCache<'_> {
    fn get(&mut self, seed: u64) -> Option<&World> {
        let cfg = self.cfg;
        self.worlds
            .entry(seed)
            .or_insert_with(|| generate_world(seed, cfg).ok())
            .as_ref()
    }
}

fn tasks_and_worlds(spec: &SuiteSpec) -> Result<(Vec<TaskSpec>, BTreeMap<u64, World>)> {
    spec.validate()?;
    let mut cache = WorldCache {
        cfg: &spec.world,
        worlds: BTreeMap::new(),
    };
    let [lo, hi] = spec.eval_worlds;
    let mut tasks = Vec::new();
    for set in &spec.tasks {
        for i in 0..set.episodes {
            let mut rng = task_rng(spec.seed, set.kind, i);
            let mut made = None;
            for _ in 0..TASK_ATTEMPTS {
                let ws = rng.random_range(lo..hi);
                let Some(world) = cache.get(ws) else { continue };
                if let Ok(t) = sample_task(set.kind, world, &mut rng, i, spec.budget) {
                    made = Some(t);
                    break;
                }
            }
            let t = made.ok_or_else(|| {
                Error::Planning(format!(
                    "no {} task {i} found in worlds [{lo}, {hi})",
                    set.kind.name()
                ))
            })?;
            tasks.push(t);
        }
    }
    let worlds = cache
        .worlds
        .into_iter()
        .filter_map(|(k, w)| Some((k, w?)))
        .collect();
    Ok((tasks, worlds))
}

/// The suite's episodes, identical for every arm.
pub fn build_tasks(spec: &SuiteSpec) -> Result<Vec<TaskSpec>> {
    Ok(tasks_and_worlds(spec)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub report: MetricsReport,
    pub episodes: Vec<EpisodeResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config_hash: String,
    pub seed: u64,
    pub arms: Vec<ArmResult>,
    pub table: String,
}

impl SuiteReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn metric(&self, arm: &str, kind: TaskKind) -> Option<&super::TaskMetrics> {
        self.arm(arm)?.report.get(kind)
    }
}

/// Mask an arm runs a task under, or `None` when it reads none of the
/// task's modalities.
fn effective_mask(task: &TaskSpec, arm: &ArmSpec, ck: &Checkpoint) -> Option<ModalityMask> {
    let mut m = task.mask.intersect(arm.modalities);
    if !ck.has_sat_encoder() {
        m = m.intersect(ModalityMask::of(&[
            Modality::Pose,
            Modality::Image,
            Modality::Lang,
        ]));
    }
    // Image tasks run through topological memory and need the image slot.
    let usable = !m.is_empty() && (task.kind != TaskKind::Image || m.contains(Modality::Image));
    usable.then_some(m)
}

fn run_task(
    world: &World,
    ck: &Checkpoint,
    task: &TaskSpec,
    mask: ModalityMask,
    seed: u64,
) -> Result<EpisodeResult> {
    if task.kind == TaskKind::Image {
        let graph = build_graph(world, &task.route, ck)?;
        return run_toponav_episode(world, &graph, ck, task.start, task.budget, seed);
    }
    let mut t = task.clone();
    t.mask = mask;
    run_episode(world, ck, &t, seed)
}

/// Runs `jobs` on all available cores; results come back in job order.
fn parallel_map<T: Sync, R: Send>(
    jobs: &[T],
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(jobs.len())
        .max(1);
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                out.lock().unwrap()[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Evaluates every arm on the suite's tasks. Arms are matched to
/// `checkpoints` by name.
pub fn run_suite(
    spec: &SuiteSpec,
    checkpoints: &BTreeMap<String, Checkpoint>,
) -> Result<SuiteReport> {
    if let Some(a) = spec
        .arms
        .iter()
        .find(|a| !checkpoints.contains_key(&a.name))
    {
        return Err(Error::Invalid(format!(
            "no checkpoint for arm `{}`",
            a.name
        )));
    }
    let (tasks, worlds) = tasks_and_worlds(spec)?;
    let hash = spec.hash();
    let mut arms = Vec::new();
    for arm in &spec.arms {
        let ck = &checkpoints[&arm.name];
        let jobs: Vec<(usize, ModalityMask)> = tasks
            .iter()
            .enumerate()
            .filter_map(|(i, t)| effective_mask(t, arm, ck).map(|m| (i, m)))
            .collect();
        let episodes = parallel_map(&jobs, |&(i, m)| {
            let t = &tasks[i];
            run_task(&worlds[&t.world_seed], ck, t, m, step_seed(spec.seed, i))
        })?;
        if episodes.is_empty() {
            return Err(Error::Invalid(format!(
                "arm `{}` can run none of the suite's tasks",
                arm.name
            )));
        }
        arms.push(ArmResult {
            name: arm.name.clone(),
            report: compute_metrics(&episodes, &hash, spec.seed)?,
            episodes,
        });
    }
    let table = comparison_table(
        &arms
            .iter()
            .map(|a| (a.name.clone(), a.report.clone()))
            .collect::<Vec<_>>(),
    );
    Ok(SuiteReport {
        config_hash: hash,
        seed: spec.seed,
        arms,
        table,
    })
}

pub const TABLE_COLUMNS: [&str; 7] = [
    "arm",
    "lang SR",
    "pose SR",
    "image SR",
    "sat SR",
    "compose SR",
    "Behavior",
];

/// Aligned plain-text table, one row per arm. Missing entries print as "-".
pub fn comparison_table(rows: &[(String, MetricsReport)]) -> String {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, r)| {
            let sr = |k| fmt(r.get(k).map(|m| m.sr));
            vec![
                name.clone(),
                sr(TaskKind::Lang),
                sr(TaskKind::Pose),
                sr(TaskKind::Image),
                sr(TaskKind::Sat),
                sr(TaskKind::Compose),
                fmt(r.get(TaskKind::Compose).and_then(|m| m.behavior)),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..TABLE_COLUMNS.len())
        .map(|c| {
            body.iter()
                .map(|r| r[c].chars().count())
                .chain([TABLE_COLUMNS[c].len()])
                .max()
                .unwrap()
        })
        .collect();
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(TABLE_COLUMNS.to_vec());
    out.push('\n');
    out.push_str(&line(
        widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect(),
    ));
    out.push('\n');
    for r in &body {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
