use super::World;
use crate::geometry::{step_unicycle, EmbodimentSpec, Pose2D, Twist};

const SUBSTEPS: usize = 32;
const BISECT_ITERS: usize = 40;

/// Signed distance from `p` to the nearest obstacle surface;
/// `f64::INFINITY` in a world without obstacles.
pub fn min_clearance(world: &World, p: [f64; 2]) -> f64 {
    world
        .obstacles
        .iter()
        .map(|o| o.signed_distance(p))
        .fold(f64::INFINITY, f64::min)
}

/// Distance from `p` to the nearest boundary wall (negative outside).
pub fn nearest_wall_distance(world: &World, p: [f64; 2]) -> f64 {
    p[0].min(world.size - p[0]).min(p[1]).min(world.size - p[1])
}

/// Distance to anything the robot can collide with.
pub fn robot_clearance(world: &World, p: [f64; 2]) -> f64 {
    min_clearance(world, p).min(nearest_wall_distance(world, p))
}

/// [`robot_clearance`] with its gradient (the normal of the nearest surface).
pub fn robot_clearance_grad(world: &World, p: [f64; 2]) -> (f64, [f64; 2]) {
    let walls = [
        (p[0], [1.0, 0.0]),
        (world.size - p[0], [-1.0, 0.0]),
        (p[1], [0.0, 1.0]),
        (world.size - p[1], [0.0, -1.0]),
    ];
    let mut best = walls.into_iter().fold(
        (f64::INFINITY, [0.0; 2]),
        |a, b| if b.0 < a.0 { b } else { a },
    );
    for o in &world.obstacles {
        let d = o.signed_distance(p);
        if d < best.0 {
            best = (d, o.sdf_gradient(p));
        }
    }
    best
}

/// Advances the robot by one control period of `spec`. The arc is checked
/// at 32 points; on penetration the contact point is located by bisection
/// and the robot stops there with `collided = true`.
///
/// A robot that starts closer than its radius (spawned in contact) may only
/// move in ways that do not reduce its clearance further.
pub fn step_robot(
    world: &World,
    pose: &Pose2D,
    cmd: Twist,
    spec: &EmbodimentSpec,
) -> (Pose2D, bool) {
    let dt = spec.dt();
    let need = spec.radius.min(robot_clearance(world, pose.xy()));
    let ok = |f: f64| -> (Pose2D, bool) {
        let p = step_unicycle(pose, cmd, f * dt);
        (p, robot_clearance(world, p.xy()) >= need)
    };
    let mut safe = 0.0;
    for i in 1..=SUBSTEPS {
        let f = i as f64 / SUBSTEPS as f64;
        if ok(f).1 {
            safe = f;
            continue;
        }
        let (mut lo, mut hi) = (safe, f);
        for _ in 0..BISECT_ITERS {
            let mid = 0.5 * (lo + hi);
            if ok(mid).1 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let stop = if lo == 0.0 { *pose } else { ok(lo).0 };
        return (stop, true);
    }
    // Exact unicycle result when nothing was hit.
    (step_unicycle(pose, cmd, dt), false)
}
