//! Cross-embodiment relabeling: noisy fast-robot logs become feasible
//! slow-robot action chunks via projected gradient descent through a
//! differentiable unicycle rollout.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetShard, DatasetTag};
use crate::error::{Error, Result};
use crate::geometry::{
    step_unicycle, ActionChunk, EmbodimentId, EmbodimentSpec, Pose2D, Twist, CHUNK_LEN,
};
use crate::numerics::{Graph, NodeId, Params, PointField, Tensor};
use crate::worldsim::{robot_clearance, robot_clearance_grad, World};

/// Fast poses kept per logged pose (3 Hz to 1 Hz).
const LOG_STRIDE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawLog {
    pub poses: Vec<Pose2D>,
    pub times: Vec<f64>,
    pub embodiment: EmbodimentId,
    pub world_seed: u64,
}

/// Keeps every third pose of a 3 Hz path and perturbs positions with
/// N(0, sigma^2) noise drawn from `seed`.
pub fn downsample_log(path: &[Pose2D], sigma: f64, seed: u64) -> Result<RawLog> {
    if path.len() < 3 * LOG_STRIDE + 1 {
        return Err(Error::Invalid(format!(
            "log needs at least 3 s of path, got {} poses",
            path.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut poses = Vec::new();
    let mut times = Vec::new();
    for (k, p) in path.iter().step_by(LOG_STRIDE).enumerate() {
        let (nx, ny) = if sigma > 0.0 {
            (normal.sample(&mut rng), normal.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        poses.push(Pose2D::new(p.x + nx, p.y + ny, p.theta));
        times.push(k as f64);
    }
    Ok(RawLog {
        poses,
        times,
        embodiment: EmbodimentId::Fast,
        world_seed: 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReannotateConfig {
    pub steps: usize,
    pub lr: f64,
    pub w_terminal: f64,
    pub w_collision: f64,
    pub w_smooth: f64,
    /// Clearance below which waypoints count as violations.
    pub margin: f64,
    /// Extra clearance the penalty asks for beyond `margin`, so the soft
    /// equilibrium settles outside the margin rather than just inside it.
    #[serde(default)]
    pub buffer: f64,
}

impl Default for ReannotateConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.05,
            w_terminal: 1.0,
            w_collision: 10.0,
            w_smooth: 0.1,
            margin: 0.3,
            buffer: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reannotation {
    pub chunk: ActionChunk,
    pub commands: Vec<Twist>,
    pub loss: f64,
}

/// Straight-line commands covering the distance to the (reach-limited)
/// target in one chunk.
pub fn straight_guess(goal: [f64; 2], spec: &EmbodimentSpec) -> Vec<Twist> {
    let target = reach_target(goal, spec);
    let v = (target[0].hypot(target[1]) / (CHUNK_LEN as f64 * spec.dt())).min(spec.v_max);
    vec![Twist::new(v, 0.0); CHUNK_LEN]
}

fn reach_target(goal: [f64; 2], spec: &EmbodimentSpec) -> [f64; 2] {
    let reach = spec.v_max * CHUNK_LEN as f64 * spec.dt();
    let d = goal[0].hypot(goal[1]);
    if d <= reach {
        goal
    } else {
        [goal[0] * reach / d, goal[1] * reach / d]
    }
}

/// Waypoints reached by executing `cmds` from the origin.
pub fn rollout(cmds: &[Twist], dt: f64) -> Vec<[f64; 2]> {
    let mut p = Pose2D::new(0.0, 0.0, 0.0);
    cmds.iter()
        .map(|&c| {
            p = step_unicycle(&p, c, dt);
            p.xy()
        })
        .collect()
}

/// Differentiable exact-arc rollout; returns the `[N, 2]` waypoint node.
fn rollout_graph(g: &mut Graph, v: NodeId, w: NodeId, dt: f64) -> Result<NodeId> {
    // Heading at the start of step i is the exclusive running sum of w*dt.
    let wdt = g.scale(w, dt)?;
    let cum = g.cumsum(wdt)?;
    let before = g.sub(cum, wdt)?;
    let half = g.scale(wdt, 0.5)?;
    let mid = g.add(before, half)?;
    let s = g.sinc(half)?;
    let vdt = g.scale(v, dt)?;
    let chord = g.mul(vdt, s)?;
    let (c, sn) = (g.cos(mid)?, g.sin(mid)?);
    let dx = g.mul(chord, c)?;
    let dy = g.mul(chord, sn)?;
    let x = g.cumsum(dx)?;
    let y = g.cumsum(dy)?;
    let x = g.reshape(x, vec![CHUNK_LEN, 1])?;
    let y = g.reshape(y, vec![CHUNK_LEN, 1])?;
    g.concat(&[x, y], 1)
}

fn objective(
    g: &mut Graph,
    params: &Params,
    target: [f64; 2],
    field: Option<&PointField>,
    cfg: &ReannotateConfig,
    dt: f64,
) -> Result<NodeId> {
    let v = g.param(params, "v")?;
    let w = g.param(params, "omega")?;
    let pts = rollout_graph(g, v, w, dt)?;
    let last_idx = Arc::new(vec![2 * CHUNK_LEN - 2, 2 * CHUNK_LEN - 1]);
    let last = g.gather(pts, last_idx, vec![2])?;
    let tgt = g.constant(Tensor::new(vec![2], target.to_vec())?);
    let diff = g.sub(last, tgt)?;
    let sq = g.mul(diff, diff)?;
    let term = g.sum(sq)?;
    let mut loss = g.scale(term, cfg.w_terminal)?;
    if let Some(f) = field {
        let cl = g.point_map(pts, f)?;
        let neg = g.scale(cl, -1.0)?;
        let short = g.offset(neg, cfg.margin + cfg.buffer)?;
        let h = g.hinge_sq(short)?;
        let c = g.sum(h)?;
        let c = g.scale(c, cfg.w_collision)?;
        loss = g.add(loss, c)?;
    }
    let head = Arc::new((0..CHUNK_LEN - 1).collect::<Vec<_>>());
    let tail = Arc::new((1..CHUNK_LEN).collect::<Vec<_>>());
    for x in [v, w] {
        let a = g.gather(x, head.clone(), vec![CHUNK_LEN - 1])?;
        let b = g.gather(x, tail.clone(), vec![CHUNK_LEN - 1])?;
        let d = g.sub(b, a)?;
        let d2 = g.mul(d, d)?;
        let s = g.sum(d2)?;
        let s = g.scale(s, cfg.w_smooth)?;
        loss = g.add(loss, s)?;
    }
    Ok(loss)
}

/// Counts chunk waypoints closer than `margin` to an obstacle or wall.
pub fn clearance_violations(
    world: &World,
    pose: &Pose2D,
    chunk: &[[f64; 2]],
    margin: f64,
) -> usize {
    chunk
        .iter()
        .filter(|p| robot_clearance(world, pose.transform_point(**p)) < margin)
        .count()
}

/// Optimizes N slow-robot commands toward `goal` (robot frame). With
/// `world = Some((world, pose))` waypoints are also pushed out of the
/// clearance margin around obstacles and walls.
pub fn reannotate_chunk(
    world: Option<(&World, Pose2D)>,
    goal: [f64; 2],
    init: Option<&[Twist]>,
    cfg: &ReannotateConfig,
) -> Result<Reannotation> {
    let spec = EmbodimentSpec::SLOW;
    let dt = spec.dt();
    if !goal[0].is_finite() || !goal[1].is_finite() {
        return Err(Error::Invalid("non-finite reannotation goal".into()));
    }
    let guess = match init {
        Some(c) if c.len() == CHUNK_LEN => c.to_vec(),
        Some(c) => {
            return Err(Error::Invalid(format!(
                "initial guess needs {CHUNK_LEN} commands, got {}",
                c.len()
            )))
        }
        None => straight_guess(goal, &spec),
    };
    let target = reach_target(goal, &spec);
    let field: Option<PointField> = world.map(|(w, pose)| {
        let w = w.clone();
        let f: PointField = Arc::new(move |p: [f64; 2]| {
            let (d, gw) = robot_clearance_grad(&w, pose.transform_point(p));
            let (s, c) = pose.theta.sin_cos();
            (d, [c * gw[0] + s * gw[1], -s * gw[0] + c * gw[1]])
        });
        f
    });
    let mut params = Params::new();
    params.insert(
        "v",
        Tensor::new(vec![CHUNK_LEN], guess.iter().map(|t| t.v).collect())?,
    );
    params.insert(
        "omega",
        Tensor::new(vec![CHUNK_LEN], guess.iter().map(|t| t.omega).collect())?,
    );
    let project = |params: &mut Params| {
        for x in params.get_mut("v").unwrap().data_mut() {
            *x = x.clamp(0.0, spec.v_max);
        }
        for x in params.get_mut("omega").unwrap().data_mut() {
            *x = x.clamp(-spec.omega_max, spec.omega_max);
        }
    };
    project(&mut params);
    let diverged = |step: usize, e: Error| {
        Error::Diverged(format!("reannotation step {step}, goal {goal:?}: {e}"))
    };
    let commands_of = |params: &Params| -> Vec<Twist> {
        params
            .get("v")
            .unwrap()
            .data()
            .iter()
            .zip(params.get("omega").unwrap().data())
            .map(|(&v, &w)| Twist::new(v, w))
            .collect()
    };
    let violations = |cmds: &[Twist]| match world {
        Some((w, pose)) => clearance_violations(w, &pose, &rollout(cmds, dt), cfg.margin),
        None => 0,
    };
    // Best iterate by (violations, loss): the result never has more
    // violations than the starting guess.
    let mut best: Option<(usize, f64, Vec<Twist>)> = None;
    for step in 0..=cfg.steps {
        let mut g = Graph::new();
        let l = objective(&mut g, &params, target, field.as_ref(), cfg, dt)
            .map_err(|e| diverged(step, e))?;
        let loss = g.value(l).item();
        if !loss.is_finite() {
            return Err(diverged(
                step,
                Error::NonFinite {
                    node: "loss".into(),
                },
            ));
        }
        let cmds = commands_of(&params);
        let viol = violations(&cmds);
        if best.as_ref().is_none_or(|b| (viol, loss) < (b.0, b.1)) {
            best = Some((viol, loss, cmds));
        }
        if step == cfg.steps {
            break;
        }
        let grads = g.backward(l).map_err(|e| diverged(step, e))?;
        for (name, t) in params.iter_mut() {
            let gr = &grads[name];
            for (x, d) in t.data_mut().iter_mut().zip(gr.data()) {
                *x -= cfg.lr * d;
            }
        }
        project(&mut params);
    }
    let (_, loss, commands) = best.expect("at least one iterate");
    let chunk = ActionChunk::new(rollout(&commands, dt))?;
    Ok(Reannotation {
        chunk,
        commands,
        loss,
    })
}

/// Least-squares velocity of the raw waypoints (with the origin at t = 0).
/// Averages out per-point position noise.
pub fn filtered_direction(raw: &ActionChunk) -> Option<[f64; 2]> {
    let pts: Vec<[f64; 2]> = std::iter::once([0.0, 0.0])
        .chain(raw.waypoints().iter().copied())
        .collect();
    let n = pts.len() as f64;
    let tm = (n - 1.0) / 2.0;
    let (mx, my) = (
        pts.iter().map(|p| p[0]).sum::<f64>() / n,
        pts.iter().map(|p| p[1]).sum::<f64>() / n,
    );
    let mut num = [0.0, 0.0];
    let mut den = 0.0;
    for (i, p) in pts.iter().enumerate() {
        let dt = i as f64 - tm;
        num[0] += dt * (p[0] - mx);
        num[1] += dt * (p[1] - my);
        den += dt * dt;
    }
    let v = [num[0] / den, num[1] / den];
    let len = v[0].hypot(v[1]);
    (len > 1e-6 && len.is_finite()).then(|| [v[0] / len, v[1] / len])
}

/// Replaces every raw fast-robot chunk with a slow-robot chunk toward the
/// filtered log direction. The collision term is off: the fast logs carry
/// no trusted geometry.
pub fn reannotate_dataset(input: &DatasetShard, cfg: &ReannotateConfig) -> Result<DatasetShard> {
    if input.manifest.embodiment != EmbodimentId::Fast {
        return Err(Error::Invalid(
            "reannotation expects a fast-embodiment shard".into(),
        ));
    }
    let spec = EmbodimentSpec::SLOW;
    let reach = spec.v_max * CHUNK_LEN as f64 * spec.dt();
    let mut out = Vec::with_capacity(input.samples.len());
    let mut failures = 0;
    for s in &input.samples {
        if s.embodiment != EmbodimentId::Fast {
            return Err(Error::Invalid(format!(
                "sample from world {} is not fast-embodiment",
                s.world_seed
            )));
        }
        let Some(dir) = filtered_direction(&s.a_ref) else {
            failures += 1;
            continue;
        };
        match reannotate_chunk(None, [dir[0] * reach, dir[1] * reach], None, cfg) {
            Ok(r) => {
                let mut t = s.clone();
                t.a_ref = r.chunk;
                t.embodiment = EmbodimentId::Slow;
                t.tag = DatasetTag::Bdd;
                t.validate()?;
                out.push(t);
            }
            Err(_) => failures += 1,
        }
    }
    let total = input.samples.len().max(1);
    if failures as f64 > 0.05 * total as f64 {
        return Err(Error::Diverged(format!(
            "{failures} of {total} reannotations failed"
        )));
    }
    let mut manifest = input.manifest.clone();
    manifest.count = out.len();
    manifest.embodiment = EmbodimentId::Slow;
    manifest.optimizer_config = Some(serde_json::to_value(cfg)?);
    manifest.failure_count = Some(failures);
    Ok(DatasetShard {
        manifest,
        samples: out,
    })
}
