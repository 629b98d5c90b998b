//! Route samplers and shard generation.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    assemble_sample, behavior_adherence, make_sample, Clause, ClauseKind, DatasetShard, DatasetTag,
    Planner, PlannerConfig, Sample, ShardManifest,
};
use crate::error::{Error, Result};
use crate::geometry::{ActionChunk, EmbodimentSpec, Pose2D, CHUNK_LEN};
use crate::reannotate::downsample_log;
use crate::worldsim::{
    generate_world, min_clearance, nearest_wall_distance, robot_clearance, Color, Landmark, Shape,
    World, WorldGenConfig,
};

/// (color, shape) kinds never named in training instructions.
pub const HELD_OUT_PAIRS: [(Color, Shape); 2] =
    [(Color::Red, Shape::Square), (Color::Blue, Shape::Disc)];
/// (clause, target color) combinations never seen in training.
pub const RESERVED_COMBOS: [(ClauseKind, Color); 3] = [
    (ClauseKind::Wall, Color::Green),
    (ClauseKind::KeepAway, Color::Yellow),
    (ClauseKind::Between, Color::Blue),
];

const ROUTE_ATTEMPTS: usize = 400;
/// Longest route kept, in control steps (stays inside a 180-step budget).
const MAX_ROUTE_STEPS: usize = 170;
const START_CLEARANCE: f64 = 0.8;

/// An executed expert route.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub path: Vec<Pose2D>,
    /// Target landmark for instruction-following routes.
    pub target: Option<usize>,
    pub clause: Option<Clause>,
}

impl Route {
    pub fn start(&self) -> Pose2D {
        self.path[0]
    }

    pub fn goal(&self) -> [f64; 2] {
        self.path.last().unwrap().xy()
    }
}

/// Which instructions a language route may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LangSplit {
    /// Everything except held-out kinds and reserved combinations.
    Train,
    /// Targets drawn from the held-out (color, shape) kinds, no clause.
    HeldOutPairs,
    /// A reserved (clause, target color) combination.
    Reserved,
}

fn held_out(l: &Landmark) -> bool {
    HELD_OUT_PAIRS.contains(&(l.color, l.shape))
}

fn reserved(kind: ClauseKind, target: &Landmark) -> bool {
    RESERVED_COMBOS.contains(&(kind, target.color))
}

fn free_pose(world: &World, rng: &mut ChaCha8Rng, min_clear: f64) -> Option<[f64; 2]> {
    for _ in 0..200 {
        let p = [
            rng.random_range(0.0..world.size),
            rng.random_range(0.0..world.size),
        ];
        if robot_clearance(world, p) >= min_clear {
            return Some(p);
        }
    }
    None
}

/// Random start and goal `dist` meters apart, executed by the expert.
pub fn sample_pose_route(
    planner: &Planner,
    rng: &mut ChaCha8Rng,
    dist: (f64, f64),
    max_speed: f64,
) -> Result<Route> {
    let world = planner.world();
    let clear = START_CLEARANCE.max(planner.spec().radius + 0.5);
    for _ in 0..ROUTE_ATTEMPTS {
        let Some(s) = free_pose(world, rng, clear) else {
            continue;
        };
        let d = rng.random_range(dist.0..=dist.1);
        let a = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let g = [s[0] + d * a.cos(), s[1] + d * a.sin()];
        if !world.in_bounds(g) || robot_clearance(world, g) < clear {
            continue;
        }
        let start = Pose2D::new(
            s[0],
            s[1],
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        );
        let Ok(path) = planner.geometric_path(s, g, None) else {
            continue;
        };
        let Ok(traj) = planner.execute(&start, &path, max_speed) else {
            continue;
        };
        if traj.len() > MAX_ROUTE_STEPS || traj.len() < 2 {
            continue;
        }
        return Ok(Route {
            path: traj,
            target: None,
            clause: None,
        });
    }
    Err(Error::Planning(format!(
        "no pose route found in world {}",
        world.seed
    )))
}

fn seg_point_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let l2 = d[0] * d[0] + d[1] * d[1];
    let t = if l2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * d[0]).hypot(p[1] - a[1] - t * d[1])
}

fn segments_cross(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    let orient = |o: [f64; 2], x: [f64; 2], y: [f64; 2]| {
        (x[0] - o[0]) * (y[1] - o[1]) - (x[1] - o[1]) * (y[0] - o[0])
    };
    let (d1, d2) = (orient(a, b, p), orient(a, b, q));
    let (d3, d4) = (orient(p, q, a), orient(p, q, b));
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Clause candidate for a start/target pair; `None` when the clause would
/// be vacuous or the geometry does not allow it.
fn pick_clause(
    world: &World,
    rng: &mut ChaCha8Rng,
    kind: ClauseKind,
    start: [f64; 2],
    target: &Landmark,
    allowed: &dyn Fn(&Landmark) -> bool,
) -> Option<Clause> {
    let t = target.position;
    match kind {
        ClauseKind::Wall => {
            if nearest_wall_distance(world, start) > 2.0 || nearest_wall_distance(world, t) > 2.6 {
                return None;
            }
            // The straight line must leave the wall band for the clause to matter.
            let n = 20;
            let near = (0..=n)
                .filter(|&i| {
                    let f = i as f64 / n as f64;
                    let p = [
                        start[0] + f * (t[0] - start[0]),
                        start[1] + f * (t[1] - start[1]),
                    ];
                    nearest_wall_distance(world, p) < super::WALL_BAND
                })
                .count();
            let share = near as f64 / (n + 1) as f64;
            (share < super::WALL_SHARE - 0.1).then_some(Clause::Wall)
        }
        ClauseKind::KeepAway => {
            let cands: Vec<&Landmark> = world
                .landmarks
                .iter()
                .filter(|l| l.id != target.id && allowed(l))
                .filter(|l| {
                    let c = l.position;
                    seg_point_distance(start, t, c) < 2.0
                        && (c[0] - start[0]).hypot(c[1] - start[1]) > 3.8
                        && (c[0] - t[0]).hypot(c[1] - t[1]) > 3.8
                })
                .collect();
            cands
                .choose(rng)
                .map(|l| Clause::KeepAway { landmark: l.id })
        }
        ClauseKind::Between => {
            let ls: Vec<&Landmark> = world
                .landmarks
                .iter()
                .filter(|l| l.id != target.id && allowed(l))
                .collect();
            let mut pairs = Vec::new();
            for i in 0..ls.len() {
                for j in i + 1..ls.len() {
                    let (a, b) = (ls[i].position, ls[j].position);
                    let len = (a[0] - b[0]).hypot(a[1] - b[1]);
                    let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
                    let detour = (mid[0] - start[0]).hypot(mid[1] - start[1])
                        + (mid[0] - t[0]).hypot(mid[1] - t[1]);
                    let direct = (t[0] - start[0]).hypot(t[1] - start[1]);
                    if (2.5..=8.0).contains(&len)
                        && robot_clearance(world, mid) >= 1.0
                        && !segments_cross(start, t, a, b)
                        && detour <= direct + 8.0
                    {
                        pairs.push((ls[i].id, ls[j].id));
                    }
                }
            }
            pairs.choose(rng).map(|&(a, b)| Clause::Between { a, b })
        }
    }
}

/// Instruction-following route: the target starts in view 3-10 m away
/// (`dist`), optionally with a behavior clause of `clause_kind` that the
/// unshaped expert would violate.
pub fn sample_lang_route(
    planner: &Planner,
    rng: &mut ChaCha8Rng,
    split: LangSplit,
    clause_kind: Option<ClauseKind>,
    dist: (f64, f64),
) -> Result<Route> {
    let world = planner.world();
    let spec = *planner.spec();
    let allowed_ref = |l: &Landmark| !held_out(l);
    let targets: Vec<&Landmark> = world
        .landmarks
        .iter()
        .filter(|l| match split {
            LangSplit::Train => !held_out(l) && clause_kind.is_none_or(|k| !reserved(k, l)),
            LangSplit::HeldOutPairs => held_out(l),
            LangSplit::Reserved => !held_out(l) && clause_kind.is_some_and(|k| reserved(k, l)),
        })
        .collect();
    if targets.is_empty() || (split == LangSplit::Reserved && clause_kind.is_none()) {
        return Err(Error::Planning(format!(
            "no eligible target in world {}",
            world.seed
        )));
    }
    if split == LangSplit::HeldOutPairs && clause_kind.is_some() {
        return Err(Error::Invalid(
            "held-out pair routes carry no clause".into(),
        ));
    }
    for _ in 0..ROUTE_ATTEMPTS {
        let target = *targets.choose(rng).unwrap();
        let t = target.position;
        let d = rng.random_range(dist.0..=dist.1);
        let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let s = [t[0] + d * phi.cos(), t[1] + d * phi.sin()];
        if !world.in_bounds(s) || robot_clearance(world, s) < START_CLEARANCE {
            continue;
        }
        // Line of sight to the target center, ignoring other landmarks.
        let visible = (0..=40).all(|i| {
            let f = i as f64 / 40.0;
            min_clearance(world, [s[0] + f * (t[0] - s[0]), s[1] + f * (t[1] - s[1])]) > 0.05
        });
        if !visible {
            continue;
        }
        let clause = match clause_kind {
            Some(k) => match pick_clause(world, rng, k, s, target, &allowed_ref) {
                Some(c) => Some(c),
                None => continue,
            },
            None => None,
        };
        let bearing = (t[1] - s[1]).atan2(t[0] - s[0]);
        let start = Pose2D::new(s[0], s[1], bearing + rng.random_range(-0.3..0.3));
        let Ok(path) = planner.geometric_path(s, t, clause.as_ref()) else {
            continue;
        };
        let Ok(traj) = planner.execute(&start, &path, spec.v_max) else {
            continue;
        };
        if traj.len() > MAX_ROUTE_STEPS {
            continue;
        }
        if let Some(c) = &clause {
            if !behavior_adherence(&traj, c, world)? {
                continue;
            }
            // The unshaped expert must violate the clause.
            let Ok(plain) = planner.geometric_path(s, t, None) else {
                continue;
            };
            let Ok(plain_traj) = planner.execute(&start, &plain, spec.v_max) else {
                continue;
            };
            if behavior_adherence(&plain_traj, c, world)? {
                continue;
            }
        }
        return Ok(Route {
            path: traj,
            target: Some(target.id),
            clause,
        });
    }
    Err(Error::Planning(format!(
        "no language route found in world {}",
        world.seed
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub tag: DatasetTag,
    pub world_seed_start: u64,
    pub world_count: u64,
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub world: WorldGenConfig,
    #[serde(default = "default_samples_per_route")]
    pub samples_per_route: usize,
    /// Start-goal distance for pose routes, meters.
    #[serde(default = "default_route_distance")]
    pub route_distance: (f64, f64),
    /// Steps between the sample and its goal, drawn log-uniformly.
    #[serde(default = "default_goal_horizon")]
    pub goal_horizon: (usize, usize),
    /// Start-target distance for instruction routes, meters.
    #[serde(default = "default_lang_distance")]
    pub lang_distance: (f64, f64),
    #[serde(default = "default_clause_prob")]
    pub clause_prob: f64,
    /// Cruise speed of the fast embodiment, m/s.
    #[serde(default = "default_fast_cruise")]
    pub fast_cruise: f64,
    /// Position noise of the 1 Hz fast log, meters.
    #[serde(default = "default_log_noise")]
    pub log_noise: f64,
    /// Share of pose samples taken from a perturbed pose, labeled with the
    /// expert's replanned recovery toward the same goal.
    #[serde(default = "default_recovery_prob")]
    pub recovery_prob: f64,
    /// Largest lateral (m) and heading (rad) perturbation of recovery samples.
    #[serde(default = "default_recovery_offset")]
    pub recovery_offset: (f64, f64),
}

fn default_samples_per_route() -> usize {
    4
}

fn default_route_distance() -> (f64, f64) {
    (4.0, 25.0)
}

fn default_goal_horizon() -> (usize, usize) {
    (3, 150)
}

fn default_lang_distance() -> (f64, f64) {
    (3.0, 10.0)
}

fn default_clause_prob() -> f64 {
    0.4
}

fn default_fast_cruise() -> f64 {
    3.0
}

fn default_log_noise() -> f64 {
    0.5
}

fn default_recovery_prob() -> f64 {
    0.5
}

fn default_recovery_offset() -> (f64, f64) {
    (0.6, 0.6)
}

impl GenConfig {
    pub fn new(
        tag: DatasetTag,
        world_seed_start: u64,
        world_count: u64,
        samples: usize,
        seed: u64,
    ) -> Self {
        Self {
            tag,
            world_seed_start,
            world_count,
            samples,
            seed,
            world: WorldGenConfig::default(),
            samples_per_route: default_samples_per_route(),
            route_distance: default_route_distance(),
            goal_horizon: default_goal_horizon(),
            lang_distance: default_lang_distance(),
            clause_prob: default_clause_prob(),
            fast_cruise: default_fast_cruise(),
            log_noise: default_log_noise(),
            recovery_prob: default_recovery_prob(),
            recovery_offset: default_recovery_offset(),
        }
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn rng_for(cfg: &GenConfig, world_seed: u64, pass: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(cfg.seed.to_le_bytes());
    h.update(world_seed.to_le_bytes());
    h.update(pass.to_le_bytes());
    h.update(cfg.tag.name().as_bytes());
    let d = h.finalize();
    ChaCha8Rng::from_seed(d.into())
}

/// Integer in `[lo, hi]` with log-uniform density, so near goals are as
/// common per octave as far ones.
fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    let (a, b) = ((lo.max(1) as f64).ln(), ((hi + 1) as f64).ln());
    (rng.random_range(a..b).exp().floor() as usize).clamp(lo, hi)
}

/// Path truncated at `goal` and padded with `CHUNK_LEN` copies of its last pose.
fn truncated(path: &[Pose2D], goal: usize) -> Vec<Pose2D> {
    let mut p = path[..=goal].to_vec();
    p.extend(std::iter::repeat_n(path[goal], CHUNK_LEN));
    p
}

/// Expert path from a perturbed copy of `path[t]` to `path[g]`, appended to
/// the route prefix so the history stays on the route. The final pose keeps
/// the goal heading, so image goals match the unperturbed ones.
fn recovery_path(
    planner: &Planner,
    path: &[Pose2D],
    t: usize,
    g: usize,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Pose2D>> {
    let here = path[t];
    let goal = path[g];
    let (lat, head) = cfg.recovery_offset;
    let d = rng.random_range(-lat..=lat);
    let (s, c) = here.theta.sin_cos();
    let start = Pose2D::new(
        here.x - s * d,
        here.y + c * d,
        here.theta + rng.random_range(-head..=head),
    );
    let world = planner.world();
    if !world.in_bounds(start.xy())
        || robot_clearance(world, start.xy()) < planner.spec().radius + 0.2
    {
        return None;
    }
    let gp = planner.geometric_path(start.xy(), goal.xy(), None).ok()?;
    let traj = planner.execute(&start, &gp, planner.spec().v_max).ok()?;
    let end = traj.last()?;
    let mut out = path[..t].to_vec();
    out.extend_from_slice(&traj[..traj.len() - 1]);
    out.push(Pose2D::new(end.x, end.y, goal.theta));
    out.extend(std::iter::repeat_n(*out.last().unwrap(), CHUNK_LEN));
    Some(out)
}

fn samples_from_pose_route(
    planner: &Planner,
    route: &Route,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Sample>,
    quota: usize,
) {
    let world = planner.world();
    let n = route.path.len();
    for _ in 0..cfg.samples_per_route.min(quota) {
        let t = rng.random_range(0..n - 1);
        let g = (t + log_uniform(rng, cfg.goal_horizon)).min(n - 1);
        let recovered = if rng.random_bool(cfg.recovery_prob) {
            recovery_path(planner, &route.path, t, g, cfg, rng)
        } else {
            None
        };
        let sub = Route {
            path: recovered.unwrap_or_else(|| truncated(&route.path, g)),
            target: None,
            clause: None,
        };
        if let Ok(s) = make_sample(world, &sub, t, cfg.tag.modalities(), cfg.tag) {
            out.push(s);
        }
    }
}

fn samples_from_lang_route(
    world: &World,
    route: &Route,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Sample>,
    quota: usize,
) {
    let n = route.path.len();
    let padded = Route {
        path: truncated(&route.path, n - 1),
        ..route.clone()
    };
    let mut made = 0;
    for _ in 0..4 * cfg.samples_per_route {
        if made == cfg.samples_per_route.min(quota) {
            break;
        }
        let t = rng.random_range(0..n - 1);
        if let Ok(s) = make_sample(world, &padded, t, cfg.tag.modalities(), cfg.tag) {
            out.push(s);
            made += 1;
        }
    }
}

/// Fast-embodiment samples: observations from the true 3 Hz drive, raw
/// actions from the noisy 1 Hz log expressed in the robot frame.
fn samples_from_fast_route(
    world: &World,
    route: &Route,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Sample>,
    quota: usize,
) -> Result<()> {
    let log = downsample_log(&route.path, cfg.log_noise, rng.random())?;
    let m = log.poses.len();
    if m < 2 {
        return Ok(());
    }
    let bound = EmbodimentSpec::FAST.max_step() + 1e-9;
    for _ in 0..cfg.samples_per_route.min(quota) {
        let j = rng.random_range(0..m - 1);
        let t = 3 * j;
        let h = cfg.goal_horizon;
        let g = (t + 3 * log_uniform(rng, (h.0.div_ceil(3).max(1), h.1.div_ceil(3))))
            .min(route.path.len() - 1);
        let sub = Route {
            path: truncated(&route.path, g),
            target: None,
            clause: None,
        };
        let Ok(mut s) = assemble_sample(world, &sub, t, cfg.tag.modalities(), DatasetTag::Gnm)
        else {
            continue;
        };
        let here = route.path[t];
        let origin = log.poses[j].xy();
        let (sn, cs) = here.theta.sin_cos();
        let wps: Vec<[f64; 2]> = (1..=CHUNK_LEN)
            .map(|i| {
                let p = log.poses[(j + i).min(m - 1)].xy();
                let (dx, dy) = (p[0] - origin[0], p[1] - origin[1]);
                [cs * dx + sn * dy, -sn * dx + cs * dy]
            })
            .collect();
        let chunk = ActionChunk::new(wps)?;
        if chunk.max_step() > bound {
            continue;
        }
        s.a_ref = chunk;
        s.tag = DatasetTag::Bdd;
        s.embodiment = DatasetTag::Bdd.embodiment();
        s.validate()?;
        out.push(s);
    }
    Ok(())
}

fn route_for(planner: &Planner, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<Route> {
    match cfg.tag {
        DatasetTag::Gnm | DatasetTag::Frodo => {
            sample_pose_route(planner, rng, cfg.route_distance, planner.spec().v_max)
        }
        DatasetTag::Bdd => sample_pose_route(
            planner,
            rng,
            (
                cfg.route_distance.0.max(10.0),
                cfg.route_distance.1.max(30.0),
            ),
            cfg.fast_cruise,
        ),
        DatasetTag::Lelan => {
            let kind = if rng.random_bool(cfg.clause_prob) {
                Some(*ClauseKind::ALL.choose(rng).unwrap())
            } else {
                None
            };
            sample_lang_route(planner, rng, LangSplit::Train, kind, cfg.lang_distance)
        }
    }
}

/// Deterministic shard for `cfg`; written to `out` when given.
pub fn generate_dataset(cfg: &GenConfig, out: Option<&std::path::Path>) -> Result<DatasetShard> {
    if cfg.world_count == 0 || cfg.samples == 0 {
        return Err(Error::Invalid(
            "dataset needs at least one world and one sample".into(),
        ));
    }
    let spec = match cfg.tag {
        // The fast robot is driven at 3 Hz and logged at 1 Hz.
        DatasetTag::Bdd => EmbodimentSpec {
            rate_hz: 3.0,
            ..EmbodimentSpec::FAST
        },
        _ => EmbodimentSpec::SLOW,
    };
    let per_world = cfg.samples.div_ceil(cfg.world_count as usize);
    let mut samples = Vec::with_capacity(cfg.samples);
    let mut skipped = std::collections::BTreeSet::new();
    let mut pass = 0u64;
    while samples.len() < cfg.samples {
        let before = samples.len();
        for ws in cfg.world_seed_start..cfg.world_seed_start + cfg.world_count {
            if samples.len() >= cfg.samples {
                break;
            }
            if skipped.contains(&ws) {
                continue;
            }
            let Ok(world) = generate_world(ws, &cfg.world) else {
                skipped.insert(ws);
                continue;
            };
            let planner = Planner::new(&world, spec, PlannerConfig::default());
            let mut rng = rng_for(cfg, ws, pass);
            let quota = per_world.min(cfg.samples - samples.len());
            let mut got = Vec::new();
            let mut failures = 0;
            while got.len() < quota && failures < 8 {
                let Ok(route) = route_for(&planner, cfg, &mut rng) else {
                    failures += 1;
                    continue;
                };
                let left = quota - got.len();
                match cfg.tag {
                    DatasetTag::Bdd => {
                        samples_from_fast_route(&world, &route, cfg, &mut rng, &mut got, left)?
                    }
                    DatasetTag::Lelan => {
                        samples_from_lang_route(&world, &route, cfg, &mut rng, &mut got, left)
                    }
                    _ => samples_from_pose_route(&planner, &route, cfg, &mut rng, &mut got, left),
                }
            }
            if got.is_empty() && pass == 0 {
                skipped.insert(ws);
            }
            got.truncate(quota);
            samples.extend(got);
        }
        pass += 1;
        if samples.len() == before {
            return Err(Error::Planning(format!(
                "{} generation stalled at {} samples",
                cfg.tag.name(),
                samples.len()
            )));
        }
    }
    let shard = DatasetShard {
        manifest: ShardManifest {
            tag: cfg.tag,
            count: samples.len(),
            config_hash: cfg.hash(),
            seed_range: [cfg.world_seed_start, cfg.world_seed_start + cfg.world_count],
            embodiment: cfg.tag.embodiment(),
            skipped_worlds: skipped.len(),
            optimizer_config: None,
            failure_count: None,
        },
        samples,
    };
    if let Some(dir) = out {
        shard.save(dir)?;
    }
    Ok(shard)
}
