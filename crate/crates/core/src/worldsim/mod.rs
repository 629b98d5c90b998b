//! Procedural 2D worlds: walls, obstacles and colored landmarks.
//!
//! Landmarks are visible to the renderers but do not block motion; only
//! obstacles and the boundary walls do.

mod render;
mod sim;

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EmbodimentSpec;

pub use render::{
    render_ego, render_sat_goal, render_satellite, EgoObservation, SatImage, RAY_COUNT, RAY_RANGE,
    SAT_CELL, SAT_SIZE,
};
pub use sim::{
    min_clearance, nearest_wall_distance, robot_clearance, robot_clearance_grad, step_robot,
};

pub const WORLD_SIZE: f64 = 40.0;
/// Disc radius, or half side of a square, for every landmark.
pub const LANDMARK_SIZE: f64 = 0.4;

const MAX_ATTEMPTS: usize = 1000;
const PLACEMENT_TRIES: usize = 200;
const FLOOD_CELL: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Square,
}

impl Shape {
    pub const ALL: [Shape; 2] = [Shape::Disc, Shape::Square];

    /// Noun used in language labels.
    pub fn word(self) -> &'static str {
        match self {
            Shape::Disc => "ball",
            Shape::Square => "box",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Obstacle {
    Disc { center: [f64; 2], radius: f64 },
    Rect { min: [f64; 2], max: [f64; 2] },
}

impl Obstacle {
    /// Signed distance from `p` to the surface (negative inside).
    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        match *self {
            Obstacle::Disc { center, radius } => {
                (p[0] - center[0]).hypot(p[1] - center[1]) - radius
            }
            Obstacle::Rect { min, max } => rect_sdf(p, min, max),
        }
    }

    /// Gradient of [`Self::signed_distance`] (unit length almost everywhere).
    pub fn sdf_gradient(&self, p: [f64; 2]) -> [f64; 2] {
        match *self {
            Obstacle::Disc { center, .. } => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                let r = dx.hypot(dy).max(1e-12);
                [dx / r, dy / r]
            }
            Obstacle::Rect { min, max } => {
                let c = [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0];
                let h = [(max[0] - min[0]) / 2.0, (max[1] - min[1]) / 2.0];
                let q = [(p[0] - c[0]).abs() - h[0], (p[1] - c[1]).abs() - h[1]];
                let sx = (p[0] - c[0]).signum();
                let sy = (p[1] - c[1]).signum();
                if q[0] > 0.0 || q[1] > 0.0 {
                    let ox = q[0].max(0.0);
                    let oy = q[1].max(0.0);
                    let r = ox.hypot(oy).max(1e-12);
                    [sx * ox / r, sy * oy / r]
                } else if q[0] > q[1] {
                    [sx, 0.0]
                } else {
                    [0.0, sy]
                }
            }
        }
    }

    /// Radius of a bounding circle around [`Self::center`].
    fn bounding_radius(&self) -> f64 {
        match *self {
            Obstacle::Disc { radius, .. } => radius,
            Obstacle::Rect { min, max } => (max[0] - min[0]).hypot(max[1] - min[1]) / 2.0,
        }
    }

    pub fn center(&self) -> [f64; 2] {
        match *self {
            Obstacle::Disc { center, .. } => center,
            Obstacle::Rect { min, max } => [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0],
        }
    }
}

pub(crate) fn rect_sdf(p: [f64; 2], min: [f64; 2], max: [f64; 2]) -> f64 {
    let c = [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0];
    let h = [(max[0] - min[0]) / 2.0, (max[1] - min[1]) / 2.0];
    let q = [(p[0] - c[0]).abs() - h[0], (p[1] - c[1]).abs() - h[1]];
    let outside = q[0].max(0.0).hypot(q[1].max(0.0));
    outside + q[0].max(q[1]).min(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: usize,
    pub position: [f64; 2],
    pub shape: Shape,
    pub color: Color,
}

impl Landmark {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (dx, dy) = (p[0] - self.position[0], p[1] - self.position[1]);
        match self.shape {
            Shape::Disc => dx.hypot(dy) <= LANDMARK_SIZE,
            Shape::Square => dx.abs() <= LANDMARK_SIZE && dy.abs() <= LANDMARK_SIZE,
        }
    }

    fn as_obstacle(&self) -> Obstacle {
        let [x, y] = self.position;
        match self.shape {
            Shape::Disc => Obstacle::Disc {
                center: self.position,
                radius: LANDMARK_SIZE,
            },
            Shape::Square => Obstacle::Rect {
                min: [x - LANDMARK_SIZE, y - LANDMARK_SIZE],
                max: [x + LANDMARK_SIZE, y + LANDMARK_SIZE],
            },
        }
    }

    pub fn describe(&self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub size: f64,
    pub obstacles: Vec<Obstacle>,
    pub landmarks: Vec<Landmark>,
    pub seed: u64,
}

impl World {
    pub fn landmark(&self, id: usize) -> Option<&Landmark> {
        self.landmarks.iter().find(|l| l.id == id)
    }

    pub fn find_landmark(&self, color: Color, shape: Shape) -> Option<&Landmark> {
        self.landmarks
            .iter()
            .find(|l| l.color == color && l.shape == shape)
    }

    pub fn in_bounds(&self, p: [f64; 2]) -> bool {
        (0.0..=self.size).contains(&p[0]) && (0.0..=self.size).contains(&p[1])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates a world document.
    pub fn from_json(s: &str) -> Result<Self> {
        let w: World = serde_json::from_str(s)?;
        validate_world(&w).map_err(Error::Invalid)?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldGenConfig {
    pub discs: (usize, usize),
    pub rects: (usize, usize),
    pub landmarks: (usize, usize),
    pub disc_radius: (f64, f64),
    /// Range of rectangle half extents per axis.
    pub rect_half: (f64, f64),
    /// Minimum surface gap between any two placed items.
    pub min_gap: f64,
    pub wall_margin: f64,
}

impl Default for WorldGenConfig {
    fn default() -> Self {
        Self {
            discs: (4, 8),
            rects: (2, 4),
            landmarks: (4, 8),
            disc_radius: (0.5, 1.5),
            rect_half: (0.5, 2.0),
            min_gap: 1.0,
            wall_margin: 1.0,
        }
    }
}

impl WorldGenConfig {
    /// Denser obstacle family used as an unseen environment distribution.
    pub fn dense() -> Self {
        Self {
            discs: (12, 16),
            rects: (5, 7),
            ..Self::default()
        }
    }

    /// No obstacles at all: four walls and the landmarks.
    pub fn open_room() -> Self {
        Self {
            discs: (0, 0),
            rects: (0, 0),
            ..Self::default()
        }
    }
}

/// Deterministic world from `seed`. Rejection-samples until every invariant
/// holds, giving up after 1000 attempts.
pub fn generate_world(seed: u64, cfg: &WorldGenConfig) -> Result<World> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(w) = try_generate(seed, cfg, &mut rng) {
            if validate_world(&w).is_ok() {
                return Ok(w);
            }
        }
    }
    Err(Error::WorldGeneration {
        seed,
        attempts: MAX_ATTEMPTS,
    })
}

fn try_generate(seed: u64, cfg: &WorldGenConfig, rng: &mut ChaCha8Rng) -> Option<World> {
    let size = WORLD_SIZE;
    let n_discs = rng.random_range(cfg.discs.0..=cfg.discs.1);
    let n_rects = rng.random_range(cfg.rects.0..=cfg.rects.1);
    let n_landmarks = rng.random_range(cfg.landmarks.0..=cfg.landmarks.1);
    let mut placed: Vec<Obstacle> = Vec::new();

    let fits = |o: &Obstacle, placed: &[Obstacle]| -> bool {
        let c = o.center();
        let r = o.bounding_radius();
        let wall = c[0].min(size - c[0]).min(c[1]).min(size - c[1]);
        if wall - r < cfg.wall_margin {
            return false;
        }
        placed.iter().all(|p| {
            let pc = p.center();
            let d = (c[0] - pc[0]).hypot(c[1] - pc[1]);
            d - r - p.bounding_radius() >= cfg.min_gap
        })
    };

    let mut obstacles = Vec::new();
    for i in 0..n_discs + n_rects {
        let mut ok = false;
        for _ in 0..PLACEMENT_TRIES {
            let c = [rng.random_range(0.0..size), rng.random_range(0.0..size)];
            let o = if i < n_discs {
                Obstacle::Disc {
                    center: c,
                    radius: rng.random_range(cfg.disc_radius.0..=cfg.disc_radius.1),
                }
            } else {
                let hx = rng.random_range(cfg.rect_half.0..=cfg.rect_half.1);
                let hy = rng.random_range(cfg.rect_half.0..=cfg.rect_half.1);
                Obstacle::Rect {
                    min: [c[0] - hx, c[1] - hy],
                    max: [c[0] + hx, c[1] + hy],
                }
            };
            if fits(&o, &placed) {
                placed.push(o);
                obstacles.push(o);
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }

    let mut kinds: Vec<(Color, Shape)> = Color::ALL
        .iter()
        .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
        .collect();
    let mut landmarks = Vec::new();
    for id in 0..n_landmarks {
        let k = rng.random_range(0..kinds.len());
        let (color, shape) = kinds.swap_remove(k);
        let mut ok = false;
        for _ in 0..PLACEMENT_TRIES {
            let position = [rng.random_range(0.0..size), rng.random_range(0.0..size)];
            let lm = Landmark {
                id,
                position,
                shape,
                color,
            };
            let o = lm.as_obstacle();
            if fits(&o, &placed) {
                placed.push(o);
                landmarks.push(lm);
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }

    Some(World {
        size,
        obstacles,
        landmarks,
        seed,
    })
}

/// Checks every structural invariant of a world. Returns the first
/// violation found.
pub fn validate_world(w: &World) -> std::result::Result<(), String> {
    if w.size <= 0.0 {
        return Err("non-positive size".into());
    }
    if w.landmarks.len() > Color::ALL.len() * Shape::ALL.len() {
        return Err("more landmarks than distinct (color, shape) pairs".into());
    }
    let mut seen = std::collections::HashSet::new();
    for l in &w.landmarks {
        if !seen.insert((l.color, l.shape)) {
            return Err(format!("duplicate landmark kind {}", l.describe()));
        }
    }
    let mut items: Vec<(String, Obstacle)> = w
        .obstacles
        .iter()
        .enumerate()
        .map(|(i, o)| (format!("obstacle {i}"), *o))
        .collect();
    items.extend(
        w.landmarks
            .iter()
            .map(|l| (format!("landmark {}", l.id), l.as_obstacle())),
    );
    for (name, o) in &items {
        let c = o.center();
        let r = o.bounding_radius();
        let wall = c[0].min(w.size - c[0]).min(c[1]).min(w.size - c[1]);
        if wall - r < 1.0 - 1e-9 {
            return Err(format!("{name} closer than 1 m to a wall"));
        }
    }
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            if items_overlap(&items[i].1, &items[j].1) {
                return Err(format!("{} overlaps {}", items[i].0, items[j].0));
            }
        }
    }
    if !free_space_connected(w) {
        return Err("free space is not connected".into());
    }
    Ok(())
}

fn items_overlap(a: &Obstacle, b: &Obstacle) -> bool {
    match (*a, *b) {
        (Obstacle::Disc { center, radius }, other) | (other, Obstacle::Disc { center, radius }) => {
            other.signed_distance(center) < radius
        }
        (Obstacle::Rect { min: a0, max: a1 }, Obstacle::Rect { min: b0, max: b1 }) => {
            a0[0] < b1[0] && b0[0] < a1[0] && a0[1] < b1[1] && b0[1] < a1[1]
        }
    }
}

/// Grid flood fill over cells where the slow robot fits.
pub fn free_space_connected(w: &World) -> bool {
    let n = (w.size / FLOOD_CELL).round() as usize;
    let radius = EmbodimentSpec::SLOW.radius;
    let free: Vec<bool> = (0..n * n)
        .map(|i| {
            let p = [
                ((i % n) as f64 + 0.5) * FLOOD_CELL,
                ((i / n) as f64 + 0.5) * FLOOD_CELL,
            ];
            robot_clearance(w, p) >= radius
        })
        .collect();
    let total = free.iter().filter(|&&f| f).count();
    let Some(start) = free.iter().position(|&f| f) else {
        return false;
    };
    let mut seen = vec![false; n * n];
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    let mut reached = 0;
    while let Some(i) = queue.pop_front() {
        reached += 1;
        let (x, y) = (i % n, i / n);
        let neigh = [
            (x > 0).then(|| i - 1),
            (x + 1 < n).then(|| i + 1),
            (y > 0).then(|| i - n),
            (y + 1 < n).then(|| i + n),
        ];
        for j in neigh.into_iter().flatten() {
            if free[j] && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    reached == total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldGenConfig::default();
        assert_eq!(
            generate_world(17, &cfg).unwrap(),
            generate_world(17, &cfg).unwrap()
        );
        assert_ne!(
            generate_world(17, &cfg).unwrap(),
            generate_world(18, &cfg).unwrap()
        );
    }

    #[test]
    fn open_room_has_only_walls() {
        let w = generate_world(5, &WorldGenConfig::open_room()).unwrap();
        assert!(w.obstacles.is_empty());
        assert!(validate_world(&w).is_ok());
    }

    #[test]
    fn dense_family_generates() {
        let w = generate_world(3, &WorldGenConfig::dense()).unwrap();
        assert!(w.obstacles.len() >= 17);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let w = generate_world(9, &WorldGenConfig::default()).unwrap();
        let back = World::from_json(&w.to_json().unwrap()).unwrap();
        assert_eq!(back, w);

        let mut bad = w.clone();
        bad.landmarks.push(Landmark {
            id: 99,
            ..bad.landmarks[0]
        });
        assert!(World::from_json(&bad.to_json().unwrap()).is_err());
    }

    #[test]
    fn rect_sdf_matches_hand_values() {
        let (min, max) = ([0.0, 0.0], [2.0, 1.0]);
        assert!((rect_sdf([3.0, 0.5], min, max) - 1.0).abs() < 1e-12);
        assert!((rect_sdf([3.0, 2.0], min, max) - 2f64.sqrt()).abs() < 1e-12);
        assert!((rect_sdf([1.0, 0.5], min, max) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn blocked_world_fails_connectivity() {
        // A wall of rectangles splitting the room in two.
        let w = World {
            size: WORLD_SIZE,
            obstacles: vec![Obstacle::Rect {
                min: [19.5, -1.0],
                max: [20.5, 41.0],
            }],
            landmarks: vec![],
            seed: 0,
        };
        assert!(!free_space_connected(&w));
    }
}
