use std::f64::consts::FRAC_PI_4;

use serde::{Deserialize, Serialize};

use super::{robot_clearance, Obstacle, Shape, World, LANDMARK_SIZE};
use crate::error::{Error, Result};
use crate::geometry::Pose2D;

pub const RAY_COUNT: usize = 64;
/// Maximum sensing range in meters.
pub const RAY_RANGE: f64 = 10.0;
/// Satellite raster side in cells.
pub const SAT_SIZE: usize = 32;
/// Satellite cell side in meters.
pub const SAT_CELL: f64 = 0.5;

const GRAY: [f64; 3] = [0.5, 0.5, 0.5];
const WHITE: [f64; 3] = [1.0, 1.0, 1.0];
const GOAL_MARK: [f32; 3] = [1.0, 0.0, 1.0];

/// 64 rays of `[depth / 10 m, r, g, b, hit]`, ordered from `-pi/4`
/// (right) to `+pi/4` (left) relative to heading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f32; 5]>", into = "Vec<[f32; 5]>")]
pub struct EgoObservation {
    rays: Vec<[f32; 5]>,
}

impl EgoObservation {
    pub fn new(rays: Vec<[f32; 5]>) -> Result<Self> {
        if rays.len() != RAY_COUNT {
            return Err(Error::Invalid(format!(
                "observation needs {RAY_COUNT} rays, got {}",
                rays.len()
            )));
        }
        if rays.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("observation values outside [0, 1]".into()));
        }
        Ok(Self { rays })
    }

    pub fn rays(&self) -> &[[f32; 5]] {
        &self.rays
    }

    /// Row-major `[64 * 5]` values as f64.
    pub fn flat(&self) -> Vec<f64> {
        self.rays.iter().flatten().map(|&v| f64::from(v)).collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != RAY_COUNT * 5 {
            return Err(Error::Invalid("bad observation length".into()));
        }
        Self::new(
            values
                .chunks(5)
                .map(|c| {
                    [
                        c[0] as f32,
                        c[1] as f32,
                        c[2] as f32,
                        c[3] as f32,
                        c[4] as f32,
                    ]
                })
                .collect(),
        )
    }
}

impl TryFrom<Vec<[f32; 5]>> for EgoObservation {
    type Error = Error;

    fn try_from(v: Vec<[f32; 5]>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<EgoObservation> for Vec<[f32; 5]> {
    fn from(o: EgoObservation) -> Self {
        o.rays
    }
}

/// 32x32 RGB raster, row-major, row 0 at the top of the window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f32; 3]>", into = "Vec<[f32; 3]>")]
pub struct SatImage {
    cells: Vec<[f32; 3]>,
}

impl SatImage {
    pub fn new(cells: Vec<[f32; 3]>) -> Result<Self> {
        if cells.len() != SAT_SIZE * SAT_SIZE {
            return Err(Error::Invalid(format!(
                "satellite image needs {} cells",
                SAT_SIZE * SAT_SIZE
            )));
        }
        if cells.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("satellite values outside [0, 1]".into()));
        }
        Ok(Self { cells })
    }

    pub fn cell(&self, row: usize, col: usize) -> [f32; 3] {
        self.cells[row * SAT_SIZE + col]
    }

    pub fn cells(&self) -> &[[f32; 3]] {
        &self.cells
    }

    /// `[32 * 32 * 3]` values as f64 (HWC order).
    pub fn flat(&self) -> Vec<f64> {
        self.cells.iter().flatten().map(|&v| f64::from(v)).collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != SAT_SIZE * SAT_SIZE * 3 {
            return Err(Error::Invalid("bad satellite length".into()));
        }
        Self::new(
            values
                .chunks(3)
                .map(|c| [c[0] as f32, c[1] as f32, c[2] as f32])
                .collect(),
        )
    }
}

impl TryFrom<Vec<[f32; 3]>> for SatImage {
    type Error = Error;

    fn try_from(v: Vec<[f32; 3]>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SatImage> for Vec<[f32; 3]> {
    fn from(s: SatImage) -> Self {
        s.cells
    }
}

/// Ray parameter of the first entry into a disc, if ahead of the origin.
fn ray_disc(o: [f64; 2], u: [f64; 2], c: [f64; 2], r: f64) -> Option<f64> {
    let (lx, ly) = (c[0] - o[0], c[1] - o[1]);
    let b = lx * u[0] + ly * u[1];
    let c2 = lx * lx + ly * ly - r * r;
    if c2 < 0.0 {
        return None; // origin inside
    }
    let disc = b * b - c2;
    if disc < 0.0 {
        return None;
    }
    let t = b - disc.sqrt();
    (t >= 0.0).then_some(t)
}

/// Slab test for an axis-aligned box; `None` when missed or when the
/// origin is inside.
fn ray_box(o: [f64; 2], u: [f64; 2], min: [f64; 2], max: [f64; 2]) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..2 {
        if u[a].abs() < 1e-15 {
            if o[a] < min[a] || o[a] > max[a] {
                return None;
            }
        } else {
            let (mut ta, mut tb) = ((min[a] - o[a]) / u[a], (max[a] - o[a]) / u[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    (t0 <= t1 && t0 >= 0.0).then_some(t0)
}

/// Exit distance from the inside of the square `[0, size]^2`.
fn ray_walls(o: [f64; 2], u: [f64; 2], size: f64) -> f64 {
    let mut t = f64::INFINITY;
    for a in 0..2 {
        if u[a] > 1e-15 {
            t = t.min((size - o[a]) / u[a]);
        } else if u[a] < -1e-15 {
            t = t.min(-o[a] / u[a]);
        }
    }
    t.max(0.0)
}

/// Nearest hit along a ray: distance and surface color.
pub(crate) fn cast_ray(world: &World, o: [f64; 2], angle: f64) -> (f64, [f64; 3]) {
    let u = [angle.cos(), angle.sin()];
    let mut best = (ray_walls(o, u, world.size), WHITE);
    for ob in &world.obstacles {
        let t = match *ob {
            Obstacle::Disc { center, radius } => ray_disc(o, u, center, radius),
            Obstacle::Rect { min, max } => ray_box(o, u, min, max),
        };
        if let Some(t) = t {
            if t < best.0 {
                best = (t, GRAY);
            }
        }
    }
    for l in &world.landmarks {
        let p = l.position;
        let t = match l.shape {
            Shape::Disc => ray_disc(o, u, p, LANDMARK_SIZE),
            Shape::Square => ray_box(
                o,
                u,
                [p[0] - LANDMARK_SIZE, p[1] - LANDMARK_SIZE],
                [p[0] + LANDMARK_SIZE, p[1] + LANDMARK_SIZE],
            ),
        };
        if let Some(t) = t {
            if t < best.0 {
                best = (t, l.color.rgb());
            }
        }
    }
    best
}

/// Egocentric ray-cast observation from `pose`.
pub fn render_ego(world: &World, pose: &Pose2D) -> Result<EgoObservation> {
    let o = pose.xy();
    if !world.in_bounds(o) || robot_clearance(world, o) < 0.0 {
        return Err(Error::Invalid(format!(
            "cannot render from ({:.3}, {:.3}): inside an obstacle or out of bounds",
            o[0], o[1]
        )));
    }
    let step = 2.0 * FRAC_PI_4 / (RAY_COUNT - 1) as f64;
    let rays = (0..RAY_COUNT)
        .map(|i| {
            let angle = pose.theta - FRAC_PI_4 + step * i as f64;
            let (t, rgb) = cast_ray(world, o, angle);
            if t < RAY_RANGE {
                [
                    (t / RAY_RANGE) as f32,
                    rgb[0] as f32,
                    rgb[1] as f32,
                    rgb[2] as f32,
                    1.0,
                ]
            } else {
                [1.0, 0.0, 0.0, 0.0, 0.0]
            }
        })
        .collect();
    EgoObservation::new(rays)
}

/// Color of the world at a point as seen from above.
fn top_down(world: &World, p: [f64; 2]) -> [f64; 3] {
    if let Some(l) = world.landmarks.iter().find(|l| l.contains(p)) {
        return l.color.rgb();
    }
    if world.obstacles.iter().any(|o| o.signed_distance(p) <= 0.0) {
        return GRAY;
    }
    let edge = SAT_CELL / 2.0;
    if p[0] < edge || p[1] < edge || p[0] > world.size - edge || p[1] > world.size - edge {
        return WHITE;
    }
    [0.0; 3]
}

fn to_f32(c: [f64; 3]) -> [f32; 3] {
    [c[0] as f32, c[1] as f32, c[2] as f32]
}

/// Top-down raster of the 16 m window centered on `center`, axis-aligned
/// with the world. Cells are sampled at their centers; walls and anything
/// outside the bounds are white.
pub fn render_satellite(world: &World, center: [f64; 2]) -> SatImage {
    let half = SAT_SIZE as f64 * SAT_CELL / 2.0;
    let cells = (0..SAT_SIZE * SAT_SIZE)
        .map(|i| {
            let (r, c) = (i / SAT_SIZE, i % SAT_SIZE);
            let x = center[0] - half + (c as f64 + 0.5) * SAT_CELL;
            let y = center[1] + half - (r as f64 + 0.5) * SAT_CELL;
            to_f32(top_down(world, [x, y]))
        })
        .collect();
    SatImage { cells }
}

/// Satellite goal view: a heading-up 16 m window around the robot (top is
/// straight ahead, left column is the robot's left) with the goal drawn as a
/// magenta 3x3 block, pinned to the window border when the goal lies
/// outside it.
pub fn render_sat_goal(world: &World, robot: &Pose2D, goal: [f64; 2]) -> SatImage {
    let half = SAT_SIZE as f64 * SAT_CELL / 2.0;
    let mut cells: Vec<[f32; 3]> = (0..SAT_SIZE * SAT_SIZE)
        .map(|i| {
            let (r, c) = (i / SAT_SIZE, i % SAT_SIZE);
            let fwd = half - (r as f64 + 0.5) * SAT_CELL;
            let left = half - (c as f64 + 0.5) * SAT_CELL;
            to_f32(top_down(world, robot.transform_point([fwd, left])))
        })
        .collect();
    let mut g = robot.inverse_transform_point(goal);
    let lim = half - SAT_CELL;
    let m = g[0].abs().max(g[1].abs());
    if m > lim {
        g = [g[0] * lim / m, g[1] * lim / m];
    }
    let r = ((half - g[0]) / SAT_CELL).floor() as i64;
    let c = ((half - g[1]) / SAT_CELL).floor() as i64;
    for dr in -1..=1 {
        for dc in -1..=1 {
            let (rr, cc) = (r + dr, c + dc);
            if (0..SAT_SIZE as i64).contains(&rr) && (0..SAT_SIZE as i64).contains(&cc) {
                cells[rr as usize * SAT_SIZE + cc as usize] = GOAL_MARK;
            }
        }
    }
    SatImage { cells }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsim::{Color, Landmark, WORLD_SIZE};

    fn empty() -> World {
        World {
            size: WORLD_SIZE,
            obstacles: vec![],
            landmarks: vec![],
            seed: 0,
        }
    }

    #[test]
    fn empty_room_depths_match_box_exit_distance() {
        let w = empty();
        for pose in [
            Pose2D::new(20.0, 20.0, 0.3),
            Pose2D::new(3.0, 4.0, 2.5),
            Pose2D::new(36.0, 2.0, -0.8),
        ] {
            let obs = render_ego(&w, &pose).unwrap();
            let step = std::f64::consts::FRAC_PI_2 / 63.0;
            for (i, ray) in obs.rays().iter().enumerate() {
                let a = pose.theta - FRAC_PI_4 + step * i as f64;
                let (c, s) = (a.cos(), a.sin());
                // Independent oracle: exit distance = min over walls the ray faces.
                let mut exit = f64::INFINITY;
                if c > 0.0 {
                    exit = exit.min((WORLD_SIZE - pose.x) / c);
                }
                if c < 0.0 {
                    exit = exit.min(pose.x / -c);
                }
                if s > 0.0 {
                    exit = exit.min((WORLD_SIZE - pose.y) / s);
                }
                if s < 0.0 {
                    exit = exit.min(pose.y / -s);
                }
                let expect = (exit / RAY_RANGE).min(1.0);
                assert!(
                    (f64::from(ray[0]) - expect).abs() < 1e-6,
                    "ray {i}: {} vs {expect}",
                    ray[0]
                );
                assert_eq!(ray[4] == 1.0, exit < RAY_RANGE);
            }
        }
    }

    #[test]
    fn red_disc_dead_ahead() {
        let mut w = empty();
        w.landmarks.push(Landmark {
            id: 0,
            position: [12.0 + LANDMARK_SIZE, 20.0],
            shape: Shape::Disc,
            color: Color::Red,
        });
        let obs = render_ego(&w, &Pose2D::new(10.0, 20.0, 0.0)).unwrap();
        for i in [31, 32] {
            let r = obs.rays()[i];
            // Ray-circle oracle at a small offset angle.
            let a = -FRAC_PI_4 + std::f64::consts::FRAC_PI_2 / 63.0 * i as f64;
            let b = (2.0 + LANDMARK_SIZE) * a.cos();
            let c2 = (2.0 + LANDMARK_SIZE).powi(2) - LANDMARK_SIZE * LANDMARK_SIZE;
            let t = b - (b * b - c2).sqrt();
            assert!((f64::from(r[0]) - t / RAY_RANGE).abs() < 1e-6);
            assert!((f64::from(r[0]) - 0.2).abs() < 1e-3);
            assert_eq!(&r[1..], &[1.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn rendering_inside_obstacle_is_rejected() {
        let mut w = empty();
        w.obstacles.push(Obstacle::Disc {
            center: [5.0, 5.0],
            radius: 1.0,
        });
        assert!(render_ego(&w, &Pose2D::new(5.2, 5.0, 0.0)).is_err());
    }

    #[test]
    fn quarter_turn_of_world_and_robot_gives_same_view() {
        let c = [20.0, 20.0];
        let mut w = empty();
        w.obstacles.push(Obstacle::Disc {
            center: [23.0, 21.0],
            radius: 0.8,
        });
        w.obstacles.push(Obstacle::Rect {
            min: [25.0, 17.0],
            max: [26.0, 19.5],
        });
        w.landmarks.push(Landmark {
            id: 0,
            position: [24.0, 23.5],
            shape: Shape::Square,
            color: Color::Blue,
        });
        // Rotate everything by +90 degrees about the robot: (x, y) -> (-y, x).
        let rot = |p: [f64; 2]| [c[0] - (p[1] - c[1]), c[1] + (p[0] - c[0])];
        let mut r = empty();
        r.obstacles.push(Obstacle::Disc {
            center: rot([23.0, 21.0]),
            radius: 0.8,
        });
        let (a, b) = (rot([25.0, 17.0]), rot([26.0, 19.5]));
        r.obstacles.push(Obstacle::Rect {
            min: [a[0].min(b[0]), a[1].min(b[1])],
            max: [a[0].max(b[0]), a[1].max(b[1])],
        });
        r.landmarks.push(Landmark {
            id: 0,
            position: rot([24.0, 23.5]),
            shape: Shape::Square,
            color: Color::Blue,
        });
        let o1 = render_ego(&w, &Pose2D::new(c[0], c[1], 0.2)).unwrap();
        let o2 = render_ego(
            &r,
            &Pose2D::new(c[0], c[1], 0.2 + std::f64::consts::FRAC_PI_2),
        )
        .unwrap();
        for (x, y) in o1.rays().iter().zip(o2.rays()) {
            for k in 0..5 {
                assert!((x[k] - y[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn satellite_rasterization() {
        let mut w = empty();
        assert!(render_satellite(&w, [20.0, 20.0])
            .cells()
            .iter()
            .all(|c| *c == [0.0; 3]));

        w.landmarks.push(Landmark {
            id: 0,
            position: [20.0, 20.0],
            shape: Shape::Square,
            color: Color::Green,
        });
        let s = render_satellite(&w, [20.0, 20.0]);
        // Cells 15 and 16 have centers at +-0.25 m from the window center.
        for r in 15..=16 {
            for c in 15..=16 {
                assert_eq!(s.cell(r, c), [0.0, 1.0, 0.0]);
            }
        }
        assert_eq!(s.cell(14, 16), [0.0; 3]);
        assert_eq!(s, render_satellite(&w, [20.0, 20.0]));

        // Window hanging over the west wall.
        let edge = render_satellite(&w, [2.0, 20.0]);
        assert_eq!(edge.cell(16, 0), [1.0; 3]);
    }

    #[test]
    fn sat_goal_marks_goal_ahead() {
        let w = empty();
        let robot = Pose2D::new(20.0, 20.0, std::f64::consts::FRAC_PI_2);
        let s = render_sat_goal(&w, &robot, [20.0, 24.0]);
        // 4 m ahead -> row (8 - 4) / 0.5 = 8, centered columns.
        assert_eq!(s.cell(8, 16), GOAL_MARK);
        // A far goal is pinned to the border.
        let far = render_sat_goal(&w, &robot, [20.0, 39.0]);
        assert_eq!(far.cell(1, 16), GOAL_MARK);
    }
}
