//! SE(2) poses, unicycle kinematics, velocity clamps and the waypoint
//! tracking law that turns action chunks into velocity commands.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Waypoints per action chunk.
pub const CHUNK_LEN: usize = 8;
/// Control period of the slow embodiment (3 Hz).
pub const CONTROL_DT: f64 = 1.0 / 3.0;

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard the exact lower bound.
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        (self.x - p[0]).hypot(self.y - p[1])
    }

    /// Maps a point given in this pose's frame into the parent frame.
    pub fn transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Expresses a parent-frame point in this pose's frame.
    pub fn inverse_transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Inverse of [`relative_pose`]: `compose(robot, relative_pose(robot, t)) == t`.
    pub fn compose(&self, rel: &Pose2D) -> Pose2D {
        let [x, y] = self.transform_point([rel.x, rel.y]);
        Pose2D::new(x, y, self.theta + rel.theta)
    }
}

/// `target` expressed in the frame of `robot`.
pub fn relative_pose(robot: &Pose2D, target: &Pose2D) -> Pose2D {
    let [x, y] = robot.inverse_transform_point([target.x, target.y]);
    Pose2D::new(x, y, target.theta - robot.theta)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub v: f64,
    pub omega: f64,
}

impl Twist {
    pub const ZERO: Twist = Twist { v: 0.0, omega: 0.0 };

    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbodimentId {
    Slow,
    Fast,
}

/// Velocity limits, control rate and footprint of a robot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentSpec {
    pub v_max: f64,
    pub omega_max: f64,
    pub rate_hz: f64,
    pub radius: f64,
}

impl EmbodimentSpec {
    pub const SLOW: EmbodimentSpec = EmbodimentSpec {
        v_max: 0.5,
        omega_max: 1.0,
        rate_hz: 3.0,
        radius: 0.3,
    };
    pub const FAST: EmbodimentSpec = EmbodimentSpec {
        v_max: 5.0,
        omega_max: 1.0,
        rate_hz: 1.0,
        radius: 0.5,
    };

    pub fn of(id: EmbodimentId) -> Self {
        match id {
            EmbodimentId::Slow => Self::SLOW,
            EmbodimentId::Fast => Self::FAST,
        }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz
    }

    /// Largest displacement in one control period.
    pub fn max_step(&self) -> f64 {
        self.v_max * self.dt()
    }
}

/// Projects a command onto `[0, v_max] x [-omega_max, omega_max]`.
pub fn clamp_twist(cmd: Twist, limits: &EmbodimentSpec) -> Twist {
    Twist {
        v: cmd.v.clamp(0.0, limits.v_max),
        omega: cmd.omega.clamp(-limits.omega_max, limits.omega_max),
    }
}

/// Exact arc integration of the unicycle model over `dt`.
pub fn step_unicycle(pose: &Pose2D, cmd: Twist, dt: f64) -> Pose2D {
    let Twist { v, omega } = cmd;
    let th = pose.theta;
    if omega.abs() < 1e-9 {
        return Pose2D::new(pose.x + v * dt * th.cos(), pose.y + v * dt * th.sin(), th);
    }
    let r = v / omega;
    let th1 = th + omega * dt;
    Pose2D::new(
        pose.x + r * (th1.sin() - th.sin()),
        pose.y - r * (th1.cos() - th.cos()),
        th1,
    )
}

/// N future waypoints in the robot frame at emission time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct ActionChunk {
    waypoints: Vec<[f64; 2]>,
}

impl ActionChunk {
    pub fn new(waypoints: Vec<[f64; 2]>) -> Result<Self> {
        if waypoints.len() != CHUNK_LEN {
            return Err(Error::Invalid(format!(
                "action chunk needs {CHUNK_LEN} waypoints, got {}",
                waypoints.len()
            )));
        }
        if waypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                node: "action_chunk".into(),
            });
        }
        Ok(Self { waypoints })
    }

    pub fn zeros() -> Self {
        Self {
            waypoints: vec![[0.0; 2]; CHUNK_LEN],
        }
    }

    pub fn waypoints(&self) -> &[[f64; 2]] {
        &self.waypoints
    }

    pub fn last(&self) -> [f64; 2] {
        self.waypoints[CHUNK_LEN - 1]
    }

    /// Row-major `[N * 2]` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.waypoints.iter().flatten().copied().collect()
    }

    /// Largest distance between consecutive points, starting from the origin.
    pub fn max_step(&self) -> f64 {
        let mut prev = [0.0, 0.0];
        let mut worst: f64 = 0.0;
        for w in &self.waypoints {
            worst = worst.max((w[0] - prev[0]).hypot(w[1] - prev[1]));
            prev = *w;
        }
        worst
    }
}

impl TryFrom<Vec<[f64; 2]>> for ActionChunk {
    type Error = Error;

    fn try_from(v: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ActionChunk> for Vec<[f64; 2]> {
    fn from(c: ActionChunk) -> Self {
        c.waypoints
    }
}

/// Gains of the waypoint tracking law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingConfig {
    /// rad/s of angular velocity per radian of heading error.
    pub heading_gain: f64,
    /// Index of the waypoint steered toward.
    pub lookahead: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            heading_gain: 2.0,
            lookahead: 1,
        }
    }
}

/// Steers toward waypoint `cfg.lookahead`: angular velocity proportional to
/// heading error, linear velocity covering the waypoint distance over its
/// time offset, scaled by the cosine of the heading error and zero for
/// points behind the robot. The result is clamped to `limits`.
pub fn chunk_to_twist(chunk: &ActionChunk, cfg: &TrackingConfig, limits: &EmbodimentSpec) -> Twist {
    let idx = cfg.lookahead.min(CHUNK_LEN - 1);
    let [x, y] = chunk.waypoints[idx];
    let dist = x.hypot(y);
    if dist < 1e-9 {
        return Twist::ZERO;
    }
    let err = y.atan2(x);
    let horizon = (idx + 1) as f64 * limits.dt();
    let v = if err.abs() > PI / 2.0 {
        0.0
    } else {
        dist / horizon * err.cos()
    };
    clamp_twist(Twist::new(v, cfg.heading_gain * err), limits)
}
