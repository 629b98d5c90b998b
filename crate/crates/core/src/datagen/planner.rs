//! Cost-shaped grid A*, cost-aware shortcutting and closed-loop pursuit
//! that turns the geometric path into a 3 Hz pose sequence.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::Clause;
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, EmbodimentSpec, Pose2D, Twist};
use crate::worldsim::{nearest_wall_distance, robot_clearance, step_robot, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub cell: f64,
    /// Extra margin beyond the robot radius for planned cells.
    pub inflation: f64,
    /// Clearance below which cells get progressively more expensive.
    pub preferred_clearance: f64,
    pub clearance_weight: f64,
    /// Wall clause: cells farther than this from a wall cost `wall_far_cost`.
    pub wall_band: f64,
    pub wall_far_cost: f64,
    pub keep_away_radius: f64,
    pub keep_away_cost: f64,
    /// Pursuit lookahead distance along the path.
    pub lookahead: f64,
    /// Pursuit stops once this close to the goal.
    pub arrive_tol: f64,
    pub max_steps: usize,
    /// Forward speed kept while turning, as a fraction of the cruise speed.
    /// The expert turns on arcs instead of in place, so every chunk of its
    /// motion shows the direction of travel.
    pub turn_speed_frac: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            cell: 0.1,
            inflation: 0.25,
            preferred_clearance: 1.0,
            clearance_weight: 2.0,
            wall_band: 1.5,
            wall_far_cost: 4.0,
            keep_away_radius: 3.6,
            keep_away_cost: 60.0,
            lookahead: 0.6,
            arrive_tol: 0.05,
            max_steps: 1200,
            turn_speed_frac: 0.3,
        }
    }
}

/// Precomputed clearance grid for one world and robot footprint.
pub struct Planner<'w> {
    world: &'w World,
    spec: EmbodimentSpec,
    cfg: PlannerConfig,
    n: usize,
    clearance: Vec<f64>,
    wall: Vec<f64>,
}

const NEIGHBORS: [(i64, i64); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

impl<'w> Planner<'w> {
    pub fn new(world: &'w World, spec: EmbodimentSpec, cfg: PlannerConfig) -> Self {
        let n = (world.size / cfg.cell).round() as usize;
        let mut clearance = Vec::with_capacity(n * n);
        let mut wall = Vec::with_capacity(n * n);
        for i in 0..n * n {
            let p = [
                ((i % n) as f64 + 0.5) * cfg.cell,
                ((i / n) as f64 + 0.5) * cfg.cell,
            ];
            clearance.push(robot_clearance(world, p));
            wall.push(nearest_wall_distance(world, p));
        }
        Self {
            world,
            spec,
            cfg,
            n,
            clearance,
            wall,
        }
    }

    pub fn world(&self) -> &World {
        self.world
    }

    pub fn spec(&self) -> &EmbodimentSpec {
        &self.spec
    }

    fn cell_of(&self, p: [f64; 2]) -> Option<usize> {
        let cx = (p[0] / self.cfg.cell).floor();
        let cy = (p[1] / self.cfg.cell).floor();
        if cx < 0.0 || cy < 0.0 || cx >= self.n as f64 || cy >= self.n as f64 {
            return None;
        }
        Some(cy as usize * self.n + cx as usize)
    }

    fn center(&self, i: usize) -> [f64; 2] {
        [
            ((i % self.n) as f64 + 0.5) * self.cfg.cell,
            ((i / self.n) as f64 + 0.5) * self.cfg.cell,
        ]
    }

    fn blocked(&self, clearance: f64) -> bool {
        clearance < self.spec.radius + self.cfg.inflation
    }

    /// Per-meter traversal cost at a point.
    fn point_cost(&self, p: [f64; 2], clearance: f64, wall: f64, clause: Option<&Clause>) -> f64 {
        let c = &self.cfg;
        let mut cost = 1.0 + c.clearance_weight * (c.preferred_clearance - clearance).max(0.0);
        match clause {
            Some(Clause::Wall) if wall > c.wall_band => cost *= c.wall_far_cost,
            Some(Clause::KeepAway { landmark }) => {
                if let Some(l) = self.world.landmark(*landmark) {
                    let d = (p[0] - l.position[0]).hypot(p[1] - l.position[1]);
                    if d < c.keep_away_radius {
                        cost *= c.keep_away_cost;
                    }
                }
            }
            _ => {}
        }
        cost
    }

    fn cell_cost(&self, i: usize, clause: Option<&Clause>) -> f64 {
        self.point_cost(self.center(i), self.clearance[i], self.wall[i], clause)
    }

    /// Integrated cost of a straight segment, or `None` if it leaves free space.
    fn segment_cost(&self, a: [f64; 2], b: [f64; 2], clause: Option<&Clause>) -> Option<f64> {
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let k = ((len / (self.cfg.cell * 0.5)).ceil() as usize).max(1);
        let mut total = 0.0;
        for j in 0..=k {
            let t = j as f64 / k as f64;
            let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            let cl = robot_clearance(self.world, p);
            if self.blocked(cl) {
                return None;
            }
            let w = if j == 0 || j == k { 0.5 } else { 1.0 };
            total += w * self.point_cost(p, cl, nearest_wall_distance(self.world, p), clause);
        }
        Some(total * len / k as f64)
    }

    /// Grid A* between two points; returns cell-center waypoints with the
    /// exact endpoints substituted.
    fn astar(
        &self,
        start: [f64; 2],
        goal: [f64; 2],
        clause: Option<&Clause>,
    ) -> Result<Vec<[f64; 2]>> {
        let s = self
            .cell_of(start)
            .ok_or_else(|| Error::Planning("start out of bounds".into()))?;
        let g = self
            .cell_of(goal)
            .ok_or_else(|| Error::Planning("goal out of bounds".into()))?;
        if robot_clearance(self.world, goal) < self.spec.radius + self.cfg.inflation {
            return Err(Error::Planning(format!(
                "goal ({:.2}, {:.2}) not in free space",
                goal[0], goal[1]
            )));
        }
        let n = self.n;
        let gc = self.center(g);
        let h = |i: usize| {
            let c = self.center(i);
            (c[0] - gc[0]).hypot(c[1] - gc[1])
        };
        let mut best = vec![f64::INFINITY; n * n];
        let mut parent = vec![usize::MAX; n * n];
        let mut closed = vec![false; n * n];
        let mut heap = BinaryHeap::new();
        best[s] = 0.0;
        heap.push(Reverse((h(s).to_bits(), s)));
        while let Some(Reverse((_, i))) = heap.pop() {
            if closed[i] {
                continue;
            }
            closed[i] = true;
            if i == g {
                break;
            }
            let (x, y) = ((i % n) as i64, (i / n) as i64);
            let ci = self.cell_cost(i, clause);
            for (dx, dy) in NEIGHBORS {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= n as i64 || ny >= n as i64 {
                    continue;
                }
                let j = ny as usize * n + nx as usize;
                if closed[j] || (self.blocked(self.clearance[j]) && j != g) {
                    continue;
                }
                // No corner cutting past blocked cells.
                if dx != 0 && dy != 0 {
                    let a = y as usize * n + nx as usize;
                    let b = ny as usize * n + x as usize;
                    if self.blocked(self.clearance[a]) || self.blocked(self.clearance[b]) {
                        continue;
                    }
                }
                let step = if dx != 0 && dy != 0 {
                    std::f64::consts::SQRT_2
                } else {
                    1.0
                } * self.cfg.cell;
                let cost = best[i] + step * 0.5 * (ci + self.cell_cost(j, clause));
                if cost < best[j] {
                    best[j] = cost;
                    parent[j] = i;
                    heap.push(Reverse(((cost + h(j)).to_bits(), j)));
                }
            }
        }
        if !closed[g] {
            return Err(Error::Planning(format!(
                "goal ({:.2}, {:.2}) unreachable from ({:.2}, {:.2})",
                goal[0], goal[1], start[0], start[1]
            )));
        }
        let mut cells = vec![g];
        while *cells.last().unwrap() != s {
            cells.push(parent[*cells.last().unwrap()]);
        }
        cells.reverse();
        let mut pts: Vec<[f64; 2]> = cells.iter().map(|&c| self.center(c)).collect();
        pts[0] = start;
        *pts.last_mut().unwrap() = goal;
        Ok(pts)
    }

    /// Greedy shortcutting that only accepts a shortcut when it is free and
    /// no more expensive than the sub-path it replaces.
    fn shortcut(&self, pts: &[[f64; 2]], clause: Option<&Clause>) -> Vec<[f64; 2]> {
        if pts.len() <= 2 {
            return pts.to_vec();
        }
        let mut out = vec![pts[0]];
        let mut i = 0;
        while i < pts.len() - 1 {
            let mut sub = 0.0;
            let mut best = i + 1;
            for j in i + 1..pts.len() {
                sub += self
                    .segment_cost(pts[j - 1], pts[j], clause)
                    .unwrap_or(f64::INFINITY);
                if j == i + 1 {
                    continue;
                }
                match self.segment_cost(pts[i], pts[j], clause) {
                    Some(c) if c <= sub * (1.0 + 1e-9) => best = j,
                    Some(_) => {}
                    None => break,
                }
            }
            out.push(pts[best]);
            i = best;
        }
        out
    }

    /// Smoothed geometric path from `start` to `goal`, through the midpoint
    /// of the pair for a pass-between clause.
    pub fn geometric_path(
        &self,
        start: [f64; 2],
        goal: [f64; 2],
        clause: Option<&Clause>,
    ) -> Result<Vec<[f64; 2]>> {
        let via = match clause {
            Some(Clause::Between { a, b }) => {
                let (pa, pb) = match (self.world.landmark(*a), self.world.landmark(*b)) {
                    (Some(x), Some(y)) => (x.position, y.position),
                    _ => {
                        return Err(Error::Invalid(
                            "between clause references absent landmark".into(),
                        ))
                    }
                };
                let mid = [(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0];
                if self.blocked(robot_clearance(self.world, mid)) {
                    return Err(Error::Planning(
                        "passage between landmarks is blocked".into(),
                    ));
                }
                Some(mid)
            }
            _ => None,
        };
        let mut legs = Vec::new();
        match via {
            Some(m) => {
                legs.push(self.astar(start, m, clause)?);
                legs.push(self.astar(m, goal, clause)?);
            }
            None => legs.push(self.astar(start, goal, clause)?),
        }
        let mut out: Vec<[f64; 2]> = Vec::new();
        for leg in legs {
            let s = self.shortcut(&leg, clause);
            let skip = usize::from(!out.is_empty());
            out.extend(s.into_iter().skip(skip));
        }
        Ok(out)
    }

    /// Drives the robot along `path` with pure pursuit at the embodiment's
    /// control rate. Returns every pose, starting with `start`.
    pub fn execute(
        &self,
        start: &Pose2D,
        path: &[[f64; 2]],
        max_speed: f64,
    ) -> Result<Vec<Pose2D>> {
        let spec = &self.spec;
        let dt = spec.dt();
        let goal = *path
            .last()
            .ok_or_else(|| Error::Planning("empty path".into()))?;
        let lookahead = self.cfg.lookahead.max(2.0 * max_speed * dt);
        let mut cum = vec![0.0];
        for w in path.windows(2) {
            cum.push(cum.last().unwrap() + (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]));
        }
        let total = *cum.last().unwrap();
        let point_at = |s: f64| -> [f64; 2] {
            let s = s.clamp(0.0, total);
            let k = cum
                .partition_point(|&c| c <= s)
                .clamp(1, path.len().max(2) - 1);
            if path.len() == 1 {
                return path[0];
            }
            let seg = cum[k] - cum[k - 1];
            let t = if seg > 0.0 {
                (s - cum[k - 1]) / seg
            } else {
                0.0
            };
            let (a, b) = (path[k - 1], path[k]);
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        };
        let mut pose = *start;
        let mut out = vec![pose];
        let mut seg = 0usize;
        let mut progress = 0.0;
        for _ in 0..self.cfg.max_steps {
            let d_goal = pose.distance_to(goal);
            if d_goal <= self.cfg.arrive_tol {
                return Ok(out);
            }
            // Monotone projection onto the path, searching a few segments ahead.
            let p = pose.xy();
            let mut best = (f64::INFINITY, progress);
            let mut next_seg = seg;
            for k in seg..(seg + 4).min(path.len().saturating_sub(1)) {
                let (a, b) = (path[k], path[k + 1]);
                let d = [b[0] - a[0], b[1] - a[1]];
                let l2 = d[0] * d[0] + d[1] * d[1];
                let t = if l2 > 0.0 {
                    (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / l2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let q = [a[0] + t * d[0], a[1] + t * d[1]];
                let dist = (p[0] - q[0]).hypot(p[1] - q[1]);
                let s = cum[k] + t * l2.sqrt();
                if dist < best.0 - 1e-12 && s >= progress - 1e-9 {
                    best = (dist, s);
                    next_seg = k;
                }
            }
            seg = next_seg;
            progress = best.1.max(progress);
            let target = if total - progress <= lookahead {
                goal
            } else {
                point_at(progress + lookahead)
            };
            let local = pose.inverse_transform_point(target);
            let err = local[1].atan2(local[0]);
            let mut v = if err.abs() < std::f64::consts::FRAC_PI_3 {
                max_speed * err.cos() * (1.0 - err.abs() / std::f64::consts::FRAC_PI_2).max(0.0)
            } else {
                0.0
            };
            v = v.max(self.cfg.turn_speed_frac * max_speed);
            if total - progress <= lookahead {
                v = v.min(d_goal / dt);
            }
            let cmd = Twist::new(
                v.clamp(0.0, spec.v_max),
                (2.0 * err).clamp(-spec.omega_max, spec.omega_max),
            );
            let (next, hit) = step_robot(self.world, &pose, cmd, spec);
            if hit {
                return Err(Error::Planning(format!(
                    "pursuit collided at ({:.2}, {:.2})",
                    next.x, next.y
                )));
            }
            pose = Pose2D::new(next.x, next.y, normalize_angle(next.theta));
            out.push(pose);
        }
        Err(Error::Planning(
            "pursuit did not arrive within the step cap".into(),
        ))
    }
}

/// Plans and executes an expert path for the slow robot at 3 Hz.
pub fn plan_expert_path(
    world: &World,
    start: &Pose2D,
    goal: [f64; 2],
    clause: Option<&Clause>,
) -> Result<Vec<Pose2D>> {
    let spec = EmbodimentSpec::SLOW;
    let planner = Planner::new(world, spec, PlannerConfig::default());
    let path = planner.geometric_path(start.xy(), goal, clause)?;
    let traj = planner.execute(start, &path, spec.v_max)?;
    if let Some(c) = clause {
        if !super::behavior_adherence(&traj, c, world)? {
            return Err(Error::Planning(
                "behavior clause not satisfiable in this layout".into(),
            ));
        }
    }
    Ok(traj)
}
