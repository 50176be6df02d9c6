//! Kinematic robot models, the proportional waypoint controller and the
//! failure detector used to trigger planner takeover.

use crate::geometry::{wrap_angle, Pose2, Vec2};
use crate::world::World;
use serde::{Deserialize, Serialize};

/// Turtlebot3 Burger nominal values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffDriveParams {
    pub wheel_base: f64,
    pub wheel_radius: f64,
    pub v_max: f64,
    pub w_max: f64,
    pub dt: f64,
}

impl Default for DiffDriveParams {
    fn default() -> Self {
        Self {
            wheel_base: 0.16,
            wheel_radius: 0.033,
            v_max: 0.22,
            w_max: 2.84,
            dt: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointParams {
    pub v_max: f64,
    pub dt: f64,
}

impl Default for PointParams {
    fn default() -> Self {
        Self { v_max: 0.22, dt: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RobotModel {
    DiffDrive(DiffDriveParams),
    Point(PointParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub k_v: f64,
    pub k_w: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Self { k_v: 1.0, k_w: 2.0 }
    }
}

/// A robot model together with its disc footprint and controller gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Robot {
    pub model: RobotModel,
    pub radius: f64,
    #[serde(default)]
    pub gains: Gains,
}

impl Robot {
    pub fn diff_drive() -> Self {
        Self {
            model: RobotModel::DiffDrive(DiffDriveParams::default()),
            radius: 0.11,
            gains: Gains::default(),
        }
    }

    pub fn point() -> Self {
        Self {
            model: RobotModel::Point(PointParams::default()),
            radius: 0.11,
            gains: Gains::default(),
        }
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    pub fn proprio_dim(&self) -> usize {
        match self.model {
            RobotModel::DiffDrive(_) => 2,
            RobotModel::Point(_) => 0,
        }
    }

    pub fn dt(&self) -> f64 {
        match self.model {
            RobotModel::DiffDrive(p) => p.dt,
            RobotModel::Point(p) => p.dt,
        }
    }

    pub fn proprio(&self, pose: Pose2, goal: Vec2) -> Vec<f64> {
        match self.model {
            RobotModel::DiffDrive(_) => proprio_diffdrive(pose, goal).to_vec(),
            RobotModel::Point(_) => Vec::new(),
        }
    }

    /// Command that steers toward `target`.
    pub fn control(&self, pose: Pose2, target: Vec2) -> [f64; 2] {
        match self.model {
            RobotModel::DiffDrive(p) => {
                let (v, w) = proportional_controller(pose, target, self.gains, &p);
                [v, w]
            }
            RobotModel::Point(p) => {
                let d = (target - pose.position()) * self.gains.k_v;
                let v = clamp_norm(d, p.v_max);
                [v.x, v.y]
            }
        }
    }

    /// Integrate one step; the pose is held when the new footprint collides.
    pub fn step(&self, pose: Pose2, action: &[f64], world: &World) -> (Pose2, bool) {
        match self.model {
            RobotModel::DiffDrive(p) => step_diffdrive(pose, (action[0], action[1]), &p, self.radius, world),
            RobotModel::Point(p) => step_point(pose, Vec2::new(action[0], action[1]), world, self.radius, p.v_max, p.dt),
        }
    }

    /// Clamp an action into the actuator limits.
    pub fn clamp_action(&self, action: &[f64]) -> [f64; 2] {
        match self.model {
            RobotModel::DiffDrive(p) => [
                action[0].clamp(-p.v_max, p.v_max),
                action[1].clamp(-p.w_max, p.w_max),
            ],
            RobotModel::Point(p) => {
                let v = clamp_norm(Vec2::new(action[0], action[1]), p.v_max);
                [v.x, v.y]
            }
        }
    }

    /// Largest distance the robot can cover in one step.
    pub fn max_step(&self) -> f64 {
        match self.model {
            RobotModel::DiffDrive(p) => p.v_max * p.dt,
            RobotModel::Point(p) => p.v_max * p.dt,
        }
    }
}

fn clamp_norm(v: Vec2, max: f64) -> Vec2 {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

/// `[cos, sin]` of the yaw offset between the heading and the goal bearing.
pub fn proprio_diffdrive(pose: Pose2, goal: Vec2) -> [f64; 2] {
    let d = goal - pose.position();
    let err = wrap_angle(d.y.atan2(d.x) - pose.psi);
    [err.cos(), err.sin()]
}

/// Unicycle integration with clamped commands.
pub fn step_diffdrive(
    pose: Pose2,
    cmd: (f64, f64),
    p: &DiffDriveParams,
    radius: f64,
    world: &World,
) -> (Pose2, bool) {
    let v = cmd.0.clamp(-p.v_max, p.v_max);
    let w = cmd.1.clamp(-p.w_max, p.w_max);
    let next = Pose2::new(
        pose.x + v * pose.psi.cos() * p.dt,
        pose.y + v * pose.psi.sin() * p.dt,
        wrap_angle(pose.psi + w * p.dt),
    );
    if world.point_free(next.position(), radius) {
        (next, false)
    } else {
        (pose, true)
    }
}

pub fn step_point(
    pose: Pose2,
    vel: Vec2,
    world: &World,
    radius: f64,
    v_max: f64,
    dt: f64,
) -> (Pose2, bool) {
    let v = clamp_norm(vel, v_max);
    let next = Pose2::new(pose.x + v.x * dt, pose.y + v.y * dt, pose.psi);
    if world.point_free(next.position(), radius) {
        (next, false)
    } else {
        (pose, true)
    }
}

/// Right and left wheel angular speeds for body velocities `(v, w)`.
pub fn wheel_speeds(v: f64, w: f64, p: &DiffDriveParams) -> (f64, f64) {
    let half = p.wheel_base / 2.0;
    ((v + w * half) / p.wheel_radius, (v - w * half) / p.wheel_radius)
}

/// Inverse of [`wheel_speeds`].
pub fn body_velocity(w_right: f64, w_left: f64, p: &DiffDriveParams) -> (f64, f64) {
    let r = p.wheel_radius;
    ((w_right + w_left) * r / 2.0, (w_right - w_left) * r / p.wheel_base)
}

/// Linear speed proportional to distance, gated by the cosine of the heading
/// error; angular speed proportional to the heading error.
pub fn proportional_controller(pose: Pose2, target: Vec2, gains: Gains, p: &DiffDriveParams) -> (f64, f64) {
    let d = target - pose.position();
    let dist = d.norm();
    if dist == 0.0 {
        return (0.0, 0.0);
    }
    let err = wrap_angle(d.y.atan2(d.x) - pose.psi);
    let v = (gains.k_v * dist).clamp(-p.v_max, p.v_max) * err.cos().max(0.0);
    let w = (gains.k_w * err).clamp(-p.w_max, p.w_max);
    (v, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailureConfig {
    pub collision: bool,
    pub stall: bool,
    /// Steps over which progress is measured.
    pub window: usize,
    /// Minimum decrease of goal distance over `window` steps.
    pub min_progress: f64,
}

impl Default for FailureConfig {
    fn default() -> Self {
        Self {
            collision: true,
            stall: true,
            window: 30,
            min_progress: 0.05,
        }
    }
}

/// Goal distances (index 0 is before the first step) and per-step collision flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub distances: Vec<f64>,
    pub collided: Vec<bool>,
}

impl RolloutBuffer {
    pub fn new(initial_distance: f64) -> Self {
        Self {
            distances: vec![initial_distance],
            collided: Vec::new(),
        }
    }

    pub fn push(&mut self, distance: f64, collided: bool) {
        self.distances.push(distance);
        self.collided.push(collided);
    }

    pub fn steps(&self) -> usize {
        self.collided.len()
    }
}

pub fn detect_failure(history: &RolloutBuffer, cfg: &FailureConfig) -> bool {
    let steps = history.steps();
    if steps == 0 {
        return false;
    }
    if cfg.collision && history.collided[steps - 1] {
        return true;
    }
    if cfg.stall && steps >= cfg.window {
        let progress = history.distances[steps - cfg.window] - history.distances[steps];
        return progress < cfg.min_progress;
    }
    false
}
