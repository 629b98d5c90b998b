//! Closed-loop episodes, SR / Prog. / Behavior metrics, evaluation suites
//! and the experiment drivers behind the command-line tool.

mod experiment;
mod suite;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{Clause, LangLabel, Modality, HISTORY};
use crate::error::{Error, Result};
use crate::geometry::{chunk_to_twist, EmbodimentSpec, Pose2D, TrackingConfig};
use crate::policy::{forward_policy, Checkpoint, GoalSpec, ModalityMask};
use crate::worldsim::{render_ego, render_sat_goal, step_robot, EgoObservation, World};

pub use crate::datagen::behavior_adherence;
pub use experiment::{
    run_ablation, run_adaptation, ArmReport, Arms, ExperimentConfig, ExperimentReport,
    ABLATION_ARMS,
};
pub use suite::{
    build_tasks, comparison_table, run_suite, ArmResult, ArmSpec, SuiteReport, SuiteSpec, TaskSet,
    LANG_TASK_DISTANCE, POSE_TASK_DISTANCE, TABLE_COLUMNS,
};

/// Control steps per episode.
pub const EPISODE_BUDGET: usize = 180;
pub const SUCCESS_RADIUS: f64 = 1.0;
/// Success radius around a referenced landmark.
pub const LANG_SUCCESS_RADIUS: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Lang,
    /// Instructions naming held-out (color, shape) kinds.
    LangOod,
    Pose,
    Image,
    Sat,
    Compose,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Lang,
        TaskKind::LangOod,
        TaskKind::Pose,
        TaskKind::Image,
        TaskKind::Sat,
        TaskKind::Compose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Lang => "lang",
            TaskKind::LangOod => "lang_ood",
            TaskKind::Pose => "pose",
            TaskKind::Image => "image",
            TaskKind::Sat => "sat",
            TaskKind::Compose => "compose",
        }
    }

    pub fn mask(self) -> ModalityMask {
        match self {
            TaskKind::Lang | TaskKind::LangOod => ModalityMask::single(Modality::Lang),
            TaskKind::Pose => ModalityMask::single(Modality::Pose),
            TaskKind::Image => ModalityMask::single(Modality::Image),
            TaskKind::Sat => ModalityMask::single(Modality::Sat),
            TaskKind::Compose => ModalityMask::of(&[Modality::Pose, Modality::Lang]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Collision,
    Timeout,
}

/// One evaluation episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub world_seed: u64,
    pub start: Pose2D,
    /// Goal pose: source of pose, image and satellite goals.
    pub goal: Pose2D,
    /// Landmark center that decides success for instruction tasks.
    pub target: Option<[f64; 2]>,
    pub mask: ModalityMask,
    pub lang: Option<LangLabel>,
    pub clause: Option<Clause>,
    pub success_radius: f64,
    pub budget: usize,
    /// Expert traversal, used to build topological graphs.
    #[serde(default)]
    pub route: Vec<Pose2D>,
}

impl TaskSpec {
    pub fn success_point(&self) -> [f64; 2] {
        self.target.unwrap_or(self.goal.xy())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("task spec: {m}")));
        let finite = |p: &Pose2D| p.x.is_finite() && p.y.is_finite() && p.theta.is_finite();
        if !finite(&self.start) || !finite(&self.goal) {
            return bad("non-finite pose".into());
        }
        if self
            .target
            .is_some_and(|t| !t[0].is_finite() || !t[1].is_finite())
        {
            return bad("non-finite target".into());
        }
        if self.mask.is_empty() {
            return bad("empty modality mask".into());
        }
        if self.mask.contains(Modality::Lang) && self.lang.is_none() {
            return bad("language selected without an instruction".into());
        }
        if self.clause.is_some() && self.lang.is_none() {
            return bad("behavior clause without an instruction".into());
        }
        if !(self.success_radius > 0.0 && self.success_radius.is_finite()) {
            return bad(format!("success radius {}", self.success_radius));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub kind: TaskKind,
    pub outcome: Outcome,
    /// Start pose followed by the pose after every control step.
    pub trajectory: Vec<Pose2D>,
    pub initial_distance: f64,
    pub final_distance: f64,
    /// Present iff the task issued a behavior clause.
    pub adherence: Option<bool>,
    pub steps: usize,
}

impl EpisodeResult {
    pub fn success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    pub fn progress(&self) -> f64 {
        if self.initial_distance <= 0.0 {
            return if self.final_distance <= 0.0 { 1.0 } else { 0.0 };
        }
        (1.0 - self.final_distance / self.initial_distance).clamp(0.0, 1.0)
    }
}

pub(crate) fn step_seed(seed: u64, step: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((step as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Shared 3 Hz loop: render, build the goal, forward, track, step. Ends on
/// success, collision or budget.
#[allow(clippy::too_many_arguments)]
pub(crate) fn closed_loop(
    world: &World,
    ck: &Checkpoint,
    kind: TaskKind,
    start: Pose2D,
    success_point: [f64; 2],
    radius: f64,
    budget: usize,
    seed: u64,
    goal_at: &mut dyn FnMut(&Pose2D, &EgoObservation) -> Result<GoalSpec>,
) -> Result<EpisodeResult> {
    let spec = EmbodimentSpec::SLOW;
    let tracking = TrackingConfig::default();
    let mut pose = start;
    let mut trajectory = vec![start];
    let mut history: VecDeque<EgoObservation> = VecDeque::with_capacity(HISTORY);
    let mut outcome = Outcome::Timeout;
    for step in 0..budget {
        let obs = render_ego(world, &pose)?;
        if history.is_empty() {
            history.extend(std::iter::repeat_n(obs.clone(), HISTORY - 1));
        } else {
            history.pop_front();
        }
        history.push_back(obs);
        let goal = goal_at(&pose, history.back().unwrap())?;
        let hist: Vec<EgoObservation> = history.iter().cloned().collect();
        let chunk = forward_policy(&ck.params, &ck.config, &hist, &goal, step_seed(seed, step))?;
        let (next, collided) = step_robot(
            world,
            &pose,
            chunk_to_twist(&chunk, &tracking, &spec),
            &spec,
        );
        pose = next;
        trajectory.push(pose);
        if collided {
            outcome = Outcome::Collision;
            break;
        }
        if pose.distance_to(success_point) <= radius {
            outcome = Outcome::Success;
            break;
        }
    }
    Ok(EpisodeResult {
        kind,
        outcome,
        steps: trajectory.len() - 1,
        initial_distance: start.distance_to(success_point),
        final_distance: pose.distance_to(success_point),
        trajectory,
        adherence: None,
    })
}

/// Runs one task with a fixed goal. Satellite goals are re-rendered around
/// the robot every step; image goals are the egocentric view at the goal pose.
pub fn run_episode(
    world: &World,
    ck: &Checkpoint,
    task: &TaskSpec,
    seed: u64,
) -> Result<EpisodeResult> {
    task.validate()?;
    if task.world_seed != world.seed {
        return Err(Error::Invalid(format!(
            "task for world {} run in world {}",
            task.world_seed, world.seed
        )));
    }
    let image = if task.mask.contains(Modality::Image) {
        Some(render_ego(world, &task.goal)?)
    } else {
        None
    };
    let mut goal_at = |pose: &Pose2D, _: &EgoObservation| -> Result<GoalSpec> {
        let m = task.mask;
        Ok(GoalSpec {
            pose: m
                .contains(Modality::Pose)
                .then(|| pose.inverse_transform_point(task.goal.xy())),
            image: image.clone(),
            lang: if m.contains(Modality::Lang) {
                task.lang.clone()
            } else {
                None
            },
            sat: m
                .contains(Modality::Sat)
                .then(|| render_sat_goal(world, pose, task.goal.xy())),
            mask: m,
        })
    };
    let mut r = closed_loop(
        world,
        ck,
        task.kind,
        task.start,
        task.success_point(),
        task.success_radius,
        task.budget,
        seed,
        &mut goal_at,
    )?;
    if let Some(c) = &task.clause {
        r.adherence = Some(behavior_adherence(&r.trajectory, c, world)?);
    }
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "Prog.")]
    pub prog: f64,
    /// Adherent fraction among clause episodes; absent without clauses.
    #[serde(rename = "Behavior")]
    pub behavior: Option<f64>,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tasks: BTreeMap<TaskKind, TaskMetrics>,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn get(&self, kind: TaskKind) -> Option<&TaskMetrics> {
        self.tasks.get(&kind)
    }
}

fn metrics_of(results: &[&EpisodeResult]) -> TaskMetrics {
    let n = results.len() as f64;
    let clause: Vec<bool> = results.iter().filter_map(|r| r.adherence).collect();
    TaskMetrics {
        sr: results.iter().filter(|r| r.success()).count() as f64 / n,
        prog: results.iter().map(|r| r.progress()).sum::<f64>() / n,
        behavior: (!clause.is_empty())
            .then(|| clause.iter().filter(|&&a| a).count() as f64 / clause.len() as f64),
        episodes: results.len(),
    }
}

/// Per-task metrics. A pure function of the results.
pub fn compute_metrics(
    results: &[EpisodeResult],
    config_hash: &str,
    seed: u64,
) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::Invalid("no episode results".into()));
    }
    let mut by_kind: BTreeMap<TaskKind, Vec<&EpisodeResult>> = BTreeMap::new();
    for r in results {
        if r.initial_distance < 0.0 || r.final_distance < 0.0 {
            return Err(Error::Invalid("negative distance in episode result".into()));
        }
        by_kind.entry(r.kind).or_default().push(r);
    }
    Ok(MetricsReport {
        tasks: by_kind
            .into_iter()
            .map(|(k, rs)| (k, metrics_of(&rs)))
            .collect(),
        config_hash: config_hash.to_string(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(outcome: Outcome, initial: f64, fin: f64, adherence: Option<bool>) -> EpisodeResult {
        EpisodeResult {
            kind: TaskKind::Pose,
            outcome,
            trajectory: vec![Pose2D::new(0.0, 0.0, 0.0)],
            initial_distance: initial,
            final_distance: fin,
            adherence,
            steps: 1,
        }
    }

    #[test]
    fn all_successes_at_goal() {
        let rs = vec![result(Outcome::Success, 10.0, 0.0, None); 3];
        let m = compute_metrics(&rs, "h", 1).unwrap();
        let t = m.get(TaskKind::Pose).unwrap();
        assert_eq!((t.sr, t.prog, t.behavior, t.episodes), (1.0, 1.0, None, 3));
    }

    #[test]
    fn ending_at_start_contributes_no_progress() {
        assert_eq!(result(Outcome::Timeout, 7.0, 7.0, None).progress(), 0.0);
        // Moving away never goes negative.
        assert_eq!(result(Outcome::Timeout, 7.0, 9.0, None).progress(), 0.0);
    }

    #[test]
    fn mixed_set_by_hand() {
        // (1 + 0.5) / 2 progress, one success in two.
        let rs = [
            result(Outcome::Success, 12.0, 0.0, Some(true)),
            result(Outcome::Timeout, 12.0, 6.0, Some(false)),
        ];
        let t = compute_metrics(&rs, "h", 1).unwrap().tasks[&TaskKind::Pose].clone();
        assert_eq!((t.sr, t.prog, t.behavior), (0.5, 0.75, Some(0.5)));
    }

    #[test]
    fn recomputing_reproduces_the_report() {
        let rs = [
            result(Outcome::Collision, 5.0, 0.5, None),
            result(Outcome::Timeout, 3.0, 1.0, None),
        ];
        let a = compute_metrics(&rs, "h", 9).unwrap();
        let text = serde_json::to_string(&a).unwrap();
        assert!(
            text.contains("\"SR\"") && text.contains("\"Prog.\"") && text.contains("\"Behavior\"")
        );
        let back: Vec<EpisodeResult> =
            serde_json::from_str(&serde_json::to_string(&rs).unwrap()).unwrap();
        assert_eq!(compute_metrics(&back, "h", 9).unwrap(), a);
        // A collision near the goal is still a failure.
        assert_eq!(a.tasks[&TaskKind::Pose].sr, 0.0);
        assert!(compute_metrics(&[], "h", 9).is_err());
    }
}
