use super::Clause;
use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::worldsim::{nearest_wall_distance, World, LANDMARK_SIZE};

/// Wall-hugging: this share of poses must be near a wall.
pub const WALL_SHARE: f64 = 0.8;
pub const WALL_BAND: f64 = 2.0;
/// Keep-away: minimum distance to the named landmark's center.
pub const KEEP_AWAY: f64 = 3.0;

fn seg_cross(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> Option<(f64, f64)> {
    let r = [q[0] - p[0], q[1] - p[1]];
    let s = [b[0] - a[0], b[1] - a[1]];
    let den = r[0] * s[1] - r[1] * s[0];
    if den.abs() < 1e-12 {
        return None;
    }
    let ap = [a[0] - p[0], a[1] - p[1]];
    let t = (ap[0] * s[1] - ap[1] * s[0]) / den;
    let u = (ap[0] * r[1] - ap[1] * r[0]) / den;
    Some((t, u))
}

/// Whether a trajectory follows a behavior clause. Depends only on the
/// trajectory, the clause and the world.
pub fn behavior_adherence(traj: &[Pose2D], clause: &Clause, world: &World) -> Result<bool> {
    let pos = |id: usize| {
        world.landmark(id).map(|l| l.position).ok_or_else(|| {
            Error::Invalid(format!(
                "clause references landmark {id} absent from world {}",
                world.seed
            ))
        })
    };
    if traj.is_empty() {
        return Err(Error::Invalid("empty trajectory".into()));
    }
    Ok(match *clause {
        Clause::Wall => {
            let near = traj
                .iter()
                .filter(|p| nearest_wall_distance(world, p.xy()) < WALL_BAND)
                .count();
            near as f64 >= WALL_SHARE * traj.len() as f64
        }
        Clause::KeepAway { landmark } => {
            let c = pos(landmark)?;
            traj.iter().all(|p| p.distance_to(c) > KEEP_AWAY)
        }
        Clause::Between { a, b } => {
            let (pa, pb) = (pos(a)?, pos(b)?);
            let len = (pb[0] - pa[0]).hypot(pb[1] - pa[1]);
            let rho = LANDMARK_SIZE / len;
            traj.windows(2)
                .any(|w| match seg_cross(w[0].xy(), w[1].xy(), pa, pb) {
                    Some((t, u)) => (0.0..=1.0).contains(&t) && u > rho && u < 1.0 - rho,
                    None => false,
                })
        }
    })
}
