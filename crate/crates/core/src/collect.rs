//! Roadmap-guided trajectory collection, reward and return-to-go labels,
//! recovery collection and dataset files.

use crate::error::{Error, Result};
use crate::geometry::{Pose2, Vec2};
use crate::planner::{build_prm, plan_route, Plan, PrmConfig, PrmGraph};
use crate::rng::{derive_seed, stream};
use crate::robot::{detect_failure, FailureConfig, Robot, RobotModel, RolloutBuffer};
use crate::world::{rle_decode, OccupancyMap, World, WorldFamily, DEFAULT_MAX_RANGE, DEFAULT_RAYS, DEFAULT_WINDOW_SIDE, OCC_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Rewards are rounded to this grid so return-to-go sums are exact in f64.
pub const REWARD_QUANTUM: f64 = 1.0 / 4_294_967_296.0;

pub fn quantize(x: f64) -> f64 {
    (x / REWARD_QUANTUM).round() * REWARD_QUANTUM
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSpec {
    /// Added on steps that end in contact; must be non-positive.
    pub collision_penalty: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            collision_penalty: -1.0,
        }
    }
}

/// Negative distance to the final goal after the step, plus the collision
/// penalty when the step collided.
pub fn reward(x_next: Vec2, x_g: Vec2, collided: bool, c: f64) -> f64 {
    debug_assert!(c <= 0.0, "collision penalty must be non-positive");
    let penalty = if collided { c } else { 0.0 };
    quantize(-(x_g - x_next).norm() + penalty)
}

/// Suffix sums, accumulated right to left.
pub fn compute_rtg(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}

/// Lidar plus occupancy-window settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sensor {
    pub rays: usize,
    pub max_range: f64,
    pub window_side: f64,
}

impl Default for Sensor {
    fn default() -> Self {
        Self {
            rays: DEFAULT_RAYS,
            max_range: DEFAULT_MAX_RANGE,
            window_side: DEFAULT_WINDOW_SIDE,
        }
    }
}

impl Sensor {
    pub fn observe(&self, world: &World, pose: Pose2, goal: Vec2) -> OccupancyMap {
        world
            .raycast(pose, self.rays, self.max_range)
            .occupancy_window(pose, goal, self.window_side)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Planner,
    Fail,
    Recovery,
    /// A learned policy's evaluation episode.
    Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Pose before the action.
    pub pose: Pose2,
    pub proprio: Vec<f64>,
    pub obs_rle: Vec<u32>,
    /// Final goal minus current position, world frame.
    pub goal: [f64; 2],
    pub action: Vec<f64>,
    pub reward: f64,
    pub rtg: f64,
    pub collided: bool,
}

impl Transition {
    pub fn decode_obs(&self, out: &mut [f32]) -> Result<()> {
        rle_decode(&self.obs_rle, out)
    }

    pub fn obs_cells(&self) -> Result<Vec<f32>> {
        let mut out = vec![0.0; OCC_LEN];
        self.decode_obs(&mut out)?;
        Ok(out)
    }
}

pub fn goal_delta(goal: Vec2, pose: Pose2) -> [f64; 2] {
    [goal.x - pose.x, goal.y - pose.y]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub world_seed: u64,
    pub start: Vec2,
    pub goal: Vec2,
    pub label: Label,
    pub collided_steps: usize,
    /// Pose after the last action.
    pub final_pose: Pose2,
    /// Waypoints the guiding controller followed (empty for policy rollouts).
    #[serde(default)]
    pub plan: Vec<Vec2>,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn final_distance(&self) -> f64 {
        self.final_pose.position().dist(self.goal)
    }

    /// Return-to-go at the first step.
    pub fn ret(&self) -> f64 {
        self.transitions.first().map_or(0.0, |t| t.rtg)
    }

    pub fn relabel_rtg(&mut self) {
        let rewards: Vec<f64> = self.transitions.iter().map(|t| t.reward).collect();
        for (t, g) in self.transitions.iter_mut().zip(compute_rtg(&rewards)) {
            t.rtg = g;
        }
    }

    /// Position reached after step `t`.
    pub fn next_position(&self, t: usize) -> Vec2 {
        self.transitions
            .get(t + 1)
            .map_or(self.final_pose.position(), |n| n.pose.position())
    }
}

/// One step of what a policy gets to see.
pub struct StepObs<'a> {
    pub t: usize,
    pub pose: Pose2,
    pub goal: Vec2,
    pub proprio: &'a [f64],
    pub obs: &'a OccupancyMap,
    pub goal_delta: [f64; 2],
}

pub trait Policy {
    fn reset(&mut self, _first: &StepObs<'_>) -> Result<()> {
        Ok(())
    }
    fn act(&mut self, obs: &StepObs<'_>) -> Result<Vec<f64>>;
    /// Called after each environment step with the executed action and reward.
    fn record(&mut self, _action: &[f64], _reward: f64) {}
    /// Return-to-go fed at each step, for return-conditioned policies.
    fn conditioning(&self) -> &[f64] {
        &[]
    }
}

/// The low-level controller following roadmap waypoints.
pub struct PlannerPolicy<'a> {
    robot: Robot,
    graph: &'a PrmGraph,
    pub plan: Plan,
    waypoint_eps: f64,
    replan: bool,
}

impl<'a> PlannerPolicy<'a> {
    pub fn new(robot: Robot, graph: &'a PrmGraph, plan: Plan, waypoint_eps: f64, replan: bool) -> Self {
        Self {
            robot,
            graph,
            plan,
            waypoint_eps,
            replan,
        }
    }
}

impl Policy for PlannerPolicy<'_> {
    fn act(&mut self, o: &StepObs<'_>) -> Result<Vec<f64>> {
        let x = o.pose.position();
        if self.replan && o.t > 0 {
            if let Some(mut p) = plan_route(self.graph, x, o.goal)? {
                // entry vertex already behind us along the first leg
                if p.waypoints.len() > 1 {
                    let (a, b) = (p.waypoints[0], p.waypoints[1]);
                    if (x - a).dot(b - a) > 0.0 {
                        p.cursor = 1;
                    }
                }
                self.plan = p;
            }
        }
        let target = self.plan.advance(x, self.waypoint_eps);
        Ok(self.robot.control(o.pose, target).to_vec())
    }
}

pub struct EpisodeSpec<'a> {
    pub world: &'a World,
    pub robot: &'a Robot,
    pub sensor: &'a Sensor,
    pub reward: RewardSpec,
    pub start: Pose2,
    pub goal: Vec2,
    pub horizon: usize,
    pub success_eps: f64,
    pub detector: Option<&'a FailureConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    pub final_pose: Pose2,
    pub success: bool,
    /// Step at which the failure detector fired.
    pub failed_at: Option<usize>,
    pub collided_steps: usize,
}

/// Run `policy` from `spec.start` until success, detected failure or the
/// horizon. Return-to-go labels are filled in on the way out.
pub fn rollout<P: Policy + ?Sized>(spec: &EpisodeSpec<'_>, policy: &mut P) -> Result<Rollout> {
    let mut pose = spec.start;
    let mut out = Rollout {
        transitions: Vec::new(),
        final_pose: pose,
        success: pose.position().dist(spec.goal) < spec.success_eps,
        failed_at: None,
        collided_steps: 0,
    };
    if out.success {
        return Ok(out);
    }
    let mut history = RolloutBuffer::new(pose.position().dist(spec.goal));
    for t in 0..spec.horizon {
        let obs = spec.sensor.observe(spec.world, pose, spec.goal);
        let proprio = spec.robot.proprio(pose, spec.goal);
        let so = StepObs {
            t,
            pose,
            goal: spec.goal,
            proprio: &proprio,
            obs: &obs,
            goal_delta: goal_delta(spec.goal, pose),
        };
        if t == 0 {
            policy.reset(&so)?;
        }
        let raw = policy.act(&so)?;
        let action = spec.robot.clamp_action(&raw).to_vec();
        let (next, collided) = spec.robot.step(pose, &action, spec.world);
        let r = reward(next.position(), spec.goal, collided, spec.reward.collision_penalty);
        policy.record(&action, r);
        let goal = so.goal_delta;
        out.transitions.push(Transition {
            pose,
            proprio,
            obs_rle: obs.to_rle(),
            goal,
            action,
            reward: r,
            rtg: 0.0,
            collided,
        });
        out.collided_steps += usize::from(collided);
        pose = next;
        let d = pose.position().dist(spec.goal);
        history.push(d, collided);
        if d < spec.success_eps {
            out.success = true;
            break;
        }
        if let Some(det) = spec.detector {
            if detect_failure(&history, det) {
                out.failed_at = Some(t);
                break;
            }
        }
    }
    out.final_pose = pose;
    let rewards: Vec<f64> = out.transitions.iter().map(|t| t.reward).collect();
    for (tr, g) in out.transitions.iter_mut().zip(compute_rtg(&rewards)) {
        tr.rtg = g;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    /// Number of successful trajectories to keep.
    pub trajectories: usize,
    /// Episodes per world before the world and roadmap are resampled.
    pub reset_interval: usize,
    pub horizon: usize,
    pub success_eps: f64,
    pub reward: RewardSpec,
    pub prm: PrmConfig,
    pub sensor: Sensor,
    pub seed: u64,
    /// Minimum hop count between start and goal vertices.
    pub min_edges: usize,
    /// Distance at which a waypoint counts as reached.
    pub waypoint_eps: f64,
    /// Re-plan from the current position every step.
    pub replan: bool,
    pub success_floor: f64,
    pub probe_episodes: usize,
    /// Episodes dispatched per parallel batch.
    pub batch: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            trajectories: 200,
            reset_interval: 25,
            horizon: 200,
            success_eps: 0.3,
            reward: RewardSpec::default(),
            prm: PrmConfig::default(),
            sensor: Sensor::default(),
            seed: 0,
            min_edges: 2,
            waypoint_eps: 0.12,
            replan: false,
            success_floor: 0.01,
            probe_episodes: 100,
            batch: 16,
        }
    }
}

impl CollectConfig {
    /// Settings for the maze family.
    pub fn maze() -> Self {
        Self {
            horizon: 400,
            success_eps: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("collect: {m}")));
        if self.trajectories == 0 {
            return bad("trajectories must be positive");
        }
        if self.reset_interval == 0 {
            return bad("reset_interval must be at least 1");
        }
        if self.horizon == 0 || self.batch == 0 || self.probe_episodes == 0 {
            return bad("horizon, batch and probe_episodes must be positive");
        }
        if self.success_eps <= 0.0 || !(0.0..=1.0).contains(&self.success_floor) {
            return bad("success_eps must be positive and success_floor in [0, 1]");
        }
        if self.reward.collision_penalty > 0.0 {
            return bad("collision penalty must be non-positive");
        }
        Ok(())
    }
}

/// A world and its roadmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arena {
    pub world: World,
    pub graph: PrmGraph,
}

/// World block `block` of the given stream.
pub fn arena(cfg: &CollectConfig, family: &WorldFamily, world_stream: u64, block: usize) -> Result<Arena> {
    let world = family.sample(derive_seed(cfg.seed, world_stream, block as u64))?;
    let prm = PrmConfig {
        seed: derive_seed(cfg.seed, world_stream ^ stream::PRM << 8, block as u64),
        ..cfg.prm.clone()
    };
    let graph = build_prm(&world, &prm)?;
    Ok(Arena { world, graph })
}

/// Where episode worlds come from: sampled per block from a family, or a
/// stored list cycled by block index.
#[derive(Debug, Clone, Copy)]
pub enum Arenas<'a> {
    Sampled(&'a WorldFamily),
    Stored(&'a [Arena]),
}

impl<'a> From<&'a WorldFamily> for Arenas<'a> {
    fn from(f: &'a WorldFamily) -> Self {
        Arenas::Sampled(f)
    }
}

impl<'a> From<&'a [Arena]> for Arenas<'a> {
    fn from(a: &'a [Arena]) -> Self {
        Arenas::Stored(a)
    }
}

impl Arenas<'_> {
    pub fn get(&self, cfg: &CollectConfig, world_stream: u64, block: usize) -> Result<Arena> {
        match self {
            Arenas::Sampled(f) => arena(cfg, f, world_stream, block),
            Arenas::Stored([]) => Err(Error::EmptyGraph),
            Arenas::Stored(list) => Ok(list[block % list.len()].clone()),
        }
    }
}

fn hop_counts(g: &PrmGraph, s: usize) -> Vec<Option<usize>> {
    let mut hops = vec![None; g.len()];
    hops[s] = Some(0);
    let mut q = VecDeque::from([s]);
    while let Some(u) = q.pop_front() {
        let h = hops[u].expect("queued vertices are labeled");
        for &(v, _) in g.neighbors(u) {
            if hops[v].is_none() {
                hops[v] = Some(h + 1);
                q.push_back(v);
            }
        }
    }
    hops
}

/// Two distinct connected vertices at least `min_edges` hops apart.
pub fn sample_endpoints<R: Rng>(g: &PrmGraph, rng: &mut R, min_edges: usize) -> Option<(usize, usize)> {
    if g.len() < 2 {
        return None;
    }
    for _ in 0..50 {
        let s = rng.gen_range(0..g.len());
        let far: Vec<usize> = hop_counts(g, s)
            .iter()
            .enumerate()
            .filter(|(v, h)| *v != s && h.is_some_and(|h| h >= min_edges.max(1)))
            .map(|(v, _)| v)
            .collect();
        if !far.is_empty() {
            return Some((s, far[rng.gen_range(0..far.len())]));
        }
    }
    None
}

fn initial_heading<R: Rng>(robot: &Robot, rng: &mut R) -> f64 {
    match robot.model {
        RobotModel::DiffDrive(_) => rng.gen_range(-PI..PI),
        RobotModel::Point(_) => 0.0,
    }
}

/// Episode start: endpoints and an initial pose.
pub struct EpisodeStart {
    pub start: Pose2,
    pub goal: Vec2,
}

pub fn episode_start(g: &PrmGraph, robot: &Robot, seed: u64, min_edges: usize) -> Option<EpisodeStart> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, t) = sample_endpoints(g, &mut rng, min_edges)?;
    let p = g.vertices[s];
    let psi = initial_heading(robot, &mut rng);
    Some(EpisodeStart {
        start: Pose2::new(p.x, p.y, psi),
        goal: g.vertices[t],
    })
}

fn guided_rollout(
    cfg: &CollectConfig,
    robot: &Robot,
    arena: &Arena,
    start: Pose2,
    goal: Vec2,
) -> Result<Option<(Rollout, Vec<Vec2>)>> {
    let Some(plan) = plan_route(&arena.graph, start.position(), goal)? else {
        return Ok(None);
    };
    let waypoints = plan.waypoints.clone();
    let mut policy = PlannerPolicy::new(*robot, &arena.graph, plan, cfg.waypoint_eps, cfg.replan);
    let spec = EpisodeSpec {
        world: &arena.world,
        robot,
        sensor: &cfg.sensor,
        reward: cfg.reward,
        start,
        goal,
        horizon: cfg.horizon,
        success_eps: cfg.success_eps,
        detector: None,
    };
    let ro = rollout(&spec, &mut policy)?;
    Ok(Some((ro, waypoints)))
}

fn planner_episode(cfg: &CollectConfig, robot: &Robot, arena: &Arena, index: usize) -> Result<Option<Trajectory>> {
    let seed = derive_seed(cfg.seed, stream::EPISODE, index as u64);
    let Some(ep) = episode_start(&arena.graph, robot, seed, cfg.min_edges) else {
        return Ok(None);
    };
    let Some((ro, plan)) = guided_rollout(cfg, robot, arena, ep.start, ep.goal)? else {
        return Ok(None);
    };
    if !ro.success || ro.transitions.is_empty() {
        return Ok(None);
    }
    Ok(Some(Trajectory {
        world_seed: arena.world.seed,
        start: ep.start.position(),
        goal: ep.goal,
        label: Label::Planner,
        collided_steps: ro.collided_steps,
        final_pose: ro.final_pose,
        plan,
        transitions: ro.transitions,
    }))
}

/// Runs episodes in parallel batches and feeds their results, in episode
/// order, to `take` until it returns `false`.
fn drive_episodes<T: Send>(
    cfg: &CollectConfig,
    arenas: Arenas<'_>,
    world_stream: u64,
    run: impl Fn(&Arena, usize) -> Result<T> + Sync,
    mut take: impl FnMut(usize, T) -> Result<bool>,
) -> Result<()> {
    let mut live: BTreeMap<usize, Arena> = BTreeMap::new();
    let mut next = 0usize;
    loop {
        let range = next..next + cfg.batch;
        let lo = range.start / cfg.reset_interval;
        let hi = (range.end - 1) / cfg.reset_interval;
        live.retain(|&b, _| b >= lo);
        let missing: Vec<usize> = (lo..=hi).filter(|b| !live.contains_key(b)).collect();
        let built: Vec<Result<Arena>> = missing
            .par_iter()
            .map(|&b| arenas.get(cfg, world_stream, b))
            .collect();
        for (b, a) in missing.into_iter().zip(built) {
            live.insert(b, a?);
        }
        let results: Vec<Result<T>> = range
            .clone()
            .into_par_iter()
            .map(|i| run(&live[&(i / cfg.reset_interval)], i))
            .collect();
        for (i, r) in range.clone().zip(results) {
            if !take(i, r?)? {
                return Ok(());
            }
        }
        next = range.end;
    }
}

/// Roadmap-guided collection: exactly `cfg.trajectories` successful
/// episodes, in episode order.
pub fn collect_planner_trajectories<'a>(
    cfg: &CollectConfig,
    arenas: impl Into<Arenas<'a>>,
    robot: &Robot,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.trajectories);
    drive_episodes(
        cfg,
        arenas.into(),
        stream::WORLD,
        |a, i| planner_episode(cfg, robot, a, i),
        |i, traj| {
            let episodes = i + 1;
            if let Some(t) = traj {
                out.push(t);
            }
            if out.len() >= cfg.trajectories {
                return Ok(false);
            }
            check_floor(cfg, episodes, out.len())?;
            Ok(true)
        },
    )?;
    Ok(out)
}

fn check_floor(cfg: &CollectConfig, episodes: usize, successes: usize) -> Result<()> {
    if episodes % cfg.probe_episodes == 0 {
        let rate = successes as f64 / episodes as f64;
        if rate < cfg.success_floor {
            return Err(Error::ImpossibleTemplate {
                rate,
                floor: cfg.success_floor,
                episodes,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    /// Number of fail/recovery pairs wanted.
    pub count: usize,
    pub detector: FailureConfig,
    /// Episode budget before giving up.
    pub max_episodes: usize,
}

impl RecoveryConfig {
    pub fn new(count: usize) -> Self {
        Self {
            count,
            detector: FailureConfig::default(),
            max_episodes: 20 * count + 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecoveryPairs {
    pub fails: Vec<Trajectory>,
    pub recoveries: Vec<Trajectory>,
    pub episodes: usize,
}

fn recovery_episode<P: Policy>(
    cfg: &CollectConfig,
    robot: &Robot,
    detector: &FailureConfig,
    arena: &Arena,
    index: usize,
    policy: &mut P,
) -> Result<Option<(Trajectory, Trajectory)>> {
    let seed = derive_seed(cfg.seed, stream::RECOVERY, index as u64);
    let Some(ep) = episode_start(&arena.graph, robot, seed, cfg.min_edges) else {
        return Ok(None);
    };
    let spec = EpisodeSpec {
        world: &arena.world,
        robot,
        sensor: &cfg.sensor,
        reward: cfg.reward,
        start: ep.start,
        goal: ep.goal,
        horizon: cfg.horizon,
        success_eps: cfg.success_eps,
        detector: Some(detector),
    };
    let ro = rollout(&spec, policy)?;
    if ro.failed_at.is_none() || ro.transitions.is_empty() {
        return Ok(None);
    }
    let Some((rec, plan)) = guided_rollout(cfg, robot, arena, ro.final_pose, ep.goal)? else {
        return Ok(None);
    };
    if !rec.success || rec.transitions.is_empty() {
        return Ok(None);
    }
    let fail = Trajectory {
        world_seed: arena.world.seed,
        start: ep.start.position(),
        goal: ep.goal,
        label: Label::Fail,
        collided_steps: ro.collided_steps,
        final_pose: ro.final_pose,
        plan: Vec::new(),
        transitions: ro.transitions,
    };
    let recovery = Trajectory {
        world_seed: arena.world.seed,
        start: ro.final_pose.position(),
        goal: ep.goal,
        label: Label::Recovery,
        collided_steps: rec.collided_steps,
        final_pose: rec.final_pose,
        plan,
        transitions: rec.transitions,
    };
    Ok(Some((fail, recovery)))
}

/// Roll out policies from `make_policy` until the detector fires, then hand
/// control to the roadmap-guided controller. Pairs are kept only when the
/// takeover reaches the goal.
pub fn collect_recoveries<'a, P, F>(
    cfg: &CollectConfig,
    arenas: impl Into<Arenas<'a>>,
    robot: &Robot,
    rec: &RecoveryConfig,
    make_policy: F,
) -> Result<RecoveryPairs>
where
    P: Policy,
    F: Fn() -> Result<P> + Sync,
{
    cfg.validate()?;
    let mut out = RecoveryPairs::default();
    if rec.count == 0 {
        return Ok(out);
    }
    drive_episodes(
        cfg,
        arenas.into(),
        stream::RECOVERY,
        |a, i| {
            let mut policy = make_policy()?;
            recovery_episode(cfg, robot, &rec.detector, a, i, &mut policy)
        },
        |i, pair| {
            out.episodes = i + 1;
            if let Some((f, r)) = pair {
                out.fails.push(f);
                out.recoveries.push(r);
            }
            if out.recoveries.len() >= rec.count {
                return Ok(false);
            }
            if out.episodes >= rec.max_episodes {
                return Err(Error::RecoveryBudget {
                    episodes: out.episodes,
                    collected: out.recoveries.len(),
                    wanted: rec.count,
                });
            }
            Ok(true)
        },
    )?;
    Ok(out)
}

/// A list of trajectories, stored one JSON object per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        Self { trajectories }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn extend(&mut self, more: impl IntoIterator<Item = Trajectory>) {
        self.trajectories.extend(more);
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.trajectories {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n").map_err(|e| Error::io("<dataset>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut trajectories = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<dataset>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Trajectory = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("dataset line {}: {e}", n + 1)))?;
            trajectories.push(t);
        }
        Ok(Self { trajectories })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(f))
    }

    /// Flat float32 records, one per transition:
    /// `proprio | goal(2) | action | reward | rtg | occupancy(1250)`.
    pub fn write_packed(&self, bin: &Path, index: &Path) -> Result<()> {
        let proprio_dim = self.trajectories.iter().flat_map(|t| t.transitions.first()).map(|t| t.proprio.len()).next().unwrap_or(0);
        let action_dim = self.trajectories.iter().flat_map(|t| t.transitions.first()).map(|t| t.action.len()).next().unwrap_or(0);
        let record = proprio_dim + 2 + action_dim + 2 + OCC_LEN;
        let f = std::fs::File::create(bin).map_err(|e| Error::io(bin, e))?;
        let mut w = BufWriter::new(f);
        let mut entries = Vec::new();
        let mut offset = 0usize;
        let mut obs = vec![0.0f32; OCC_LEN];
        for t in &self.trajectories {
            for tr in &t.transitions {
                if tr.proprio.len() != proprio_dim || tr.action.len() != action_dim {
                    return Err(Error::Format("mixed proprio/action sizes in dataset".into()));
                }
                tr.decode_obs(&mut obs)?;
                let head = tr
                    .proprio
                    .iter()
                    .chain(&tr.goal)
                    .chain(&tr.action)
                    .chain([&tr.reward, &tr.rtg])
                    .map(|&v| v as f32);
                for v in head.chain(obs.iter().copied()) {
                    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(bin, e))?;
                }
            }
            entries.push(PackedEntry {
                offset,
                len: t.len(),
                label: t.label,
                world_seed: t.world_seed,
            });
            offset += t.len();
        }
        w.flush().map_err(|e| Error::io(bin, e))?;
        let idx = PackedIndex {
            proprio_dim,
            action_dim,
            obs_len: OCC_LEN,
            record_len: record,
            trajectories: entries,
        };
        std::fs::write(index, serde_json::to_vec_pretty(&idx)?).map_err(|e| Error::io(index, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedEntry {
    /// First record of the trajectory.
    pub offset: usize,
    pub len: usize,
    pub label: Label,
    pub world_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedIndex {
    pub proprio_dim: usize,
    pub action_dim: usize,
    pub obs_len: usize,
    pub record_len: usize,
    pub trajectories: Vec<PackedEntry>,
}

pub fn read_packed(bin: &Path, index: &Path) -> Result<(PackedIndex, Vec<f32>)> {
    let idx: PackedIndex =
        serde_json::from_slice(&std::fs::read(index).map_err(|e| Error::io(index, e))?)?;
    let bytes = std::fs::read(bin).map_err(|e| Error::io(bin, e))?;
    let total: usize = idx.trajectories.iter().map(|e| e.len).sum();
    if bytes.len() != 4 * total * idx.record_len {
        return Err(Error::Format(format!(
            "packed file holds {} bytes, index describes {}",
            bytes.len(),
            4 * total * idx.record_len
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((idx, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rect;

    #[test]
    fn reward_examples() {
        let g = Vec2::new(1.0, 1.0);
        assert_eq!(reward(g, g, false, -1.0), 0.0);
        assert_eq!(reward(Vec2::new(1.0, 3.0), g, false, -1.0), -2.0);
        assert_eq!(reward(Vec2::new(2.0, 1.0), g, true, -1.0), -2.0);
    }

    #[test]
    fn rtg_examples() {
        assert_eq!(compute_rtg(&[-3.0, -2.0, -1.0]), vec![-6.0, -3.0, -1.0]);
        assert_eq!(compute_rtg(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn rtg_matches_reversed_cumsum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r: Vec<f64> = (0..1000).map(|_| rng.gen_range(-3.0..0.5)).collect();
        let mut oracle: Vec<f64> = r
            .iter()
            .rev()
            .scan(0.0, |acc, &x| {
                *acc += x;
                Some(*acc)
            })
            .collect();
        oracle.reverse();
        let got = compute_rtg(&r);
        for (a, b) in got.iter().zip(&oracle) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn quantized_sums_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r: Vec<f64> = (0..400).map(|_| quantize(-rng.gen_range(0.0..4.0))).collect();
        let rtg = compute_rtg(&r);
        let forward: f64 = r.iter().sum();
        assert_eq!(forward, rtg[0]);
        for t in 0..r.len() - 1 {
            assert_eq!(rtg[t] - rtg[t + 1], r[t]);
        }
    }

    fn empty_family() -> WorldFamily {
        WorldFamily::Fixed {
            world: World::empty(Rect::new(0.0, 0.0, 3.0, 3.0)),
        }
    }

    fn small_cfg(t: usize) -> CollectConfig {
        CollectConfig {
            trajectories: t,
            reset_interval: 4,
            prm: PrmConfig {
                n_samples: 40,
                ..PrmConfig::default()
            },
            batch: 4,
            ..CollectConfig::default()
        }
    }

    #[test]
    fn empty_world_collection() {
        let cfg = small_cfg(5);
        let trajs = collect_planner_trajectories(&cfg, &empty_family(), &Robot::diff_drive()).unwrap();
        assert_eq!(trajs.len(), 5);
        for t in &trajs {
            assert_eq!(t.collided_steps, 0);
            assert!(t.final_distance() < cfg.success_eps);
            assert_eq!(t.label, Label::Planner);
            for (k, tr) in t.transitions.iter().enumerate() {
                assert_eq!(tr.goal, goal_delta(t.goal, tr.pose));
                let r = reward(t.next_position(k), t.goal, tr.collided, -1.0);
                assert_eq!(r, tr.reward);
            }
            let sum: f64 = t.transitions.iter().map(|x| x.reward).sum();
            assert_eq!(sum, t.ret());
        }
    }

    #[test]
    fn batch_size_does_not_change_output() {
        let a = collect_planner_trajectories(&small_cfg(6), &empty_family(), &Robot::point()).unwrap();
        let cfg = CollectConfig {
            batch: 7,
            ..small_cfg(6)
        };
        let b = collect_planner_trajectories(&cfg, &empty_family(), &Robot::point()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn impossible_template_errors() {
        // goal tolerance of zero width can never be met
        let cfg = CollectConfig {
            success_eps: 1e-12,
            horizon: 5,
            probe_episodes: 8,
            ..small_cfg(3)
        };
        match collect_planner_trajectories(&cfg, &empty_family(), &Robot::diff_drive()) {
            Err(Error::ImpossibleTemplate { episodes, .. }) => assert_eq!(episodes, 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    struct Ram;
    impl Policy for Ram {
        fn act(&mut self, o: &StepObs<'_>) -> Result<Vec<f64>> {
            // drive straight at the nearest wall
            let x = o.pose.position();
            let dirs = [(x.x, [-1.0, 0.0]), (3.0 - x.x, [1.0, 0.0]), (x.y, [0.0, -1.0]), (3.0 - x.y, [0.0, 1.0])];
            let best = dirs.iter().min_by(|a, b| a.0.total_cmp(&b.0)).unwrap();
            Ok(best.1.to_vec())
        }
    }

    struct Oracle;
    impl Policy for Oracle {
        fn act(&mut self, o: &StepObs<'_>) -> Result<Vec<f64>> {
            Ok(o.goal_delta.to_vec())
        }
    }

    #[test]
    fn colliding_policy_yields_pairs() {
        let cfg = small_cfg(1);
        let mut rec = RecoveryConfig::new(3);
        rec.detector.stall = false;
        let pairs = collect_recoveries(&cfg, &empty_family(), &Robot::point(), &rec, || Ok(Ram)).unwrap();
        assert_eq!(pairs.fails.len(), 3);
        assert_eq!(pairs.recoveries.len(), 3);
        for (f, r) in pairs.fails.iter().zip(&pairs.recoveries) {
            assert_eq!(f.label, Label::Fail);
            assert_eq!(r.label, Label::Recovery);
            assert!(f.transitions.last().unwrap().collided);
            assert!(f.transitions.iter().rev().skip(1).all(|t| !t.collided));
            assert!(r.final_distance() < cfg.success_eps);
            assert_eq!(f.final_pose, r.transitions[0].pose);
            assert_eq!(f.goal, r.goal);
        }
    }

    #[test]
    fn perfect_policy_exhausts_budget() {
        let cfg = small_cfg(1);
        let mut rec = RecoveryConfig::new(2);
        rec.max_episodes = 12;
        match collect_recoveries(&cfg, &empty_family(), &Robot::point(), &rec, || Ok(Oracle)) {
            Err(Error::RecoveryBudget { episodes, collected, .. }) => {
                assert_eq!(episodes, 12);
                assert_eq!(collected, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let trajs = collect_planner_trajectories(&small_cfg(3), &empty_family(), &Robot::diff_drive()).unwrap();
        let ds = Dataset::new(trajs);
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 3);
        let back = Dataset::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, ds);
        let mut buf2 = Vec::new();
        back.write_jsonl(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn packed_matches_records() {
        let ds = Dataset::new(collect_planner_trajectories(&small_cfg(2), &empty_family(), &Robot::diff_drive()).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let (bin, idx) = (dir.path().join("d.bin"), dir.path().join("d.json"));
        ds.write_packed(&bin, &idx).unwrap();
        let (index, data) = read_packed(&bin, &idx).unwrap();
        assert_eq!(index.record_len, 2 + 2 + 2 + 2 + OCC_LEN);
        let tr = &ds.trajectories[1].transitions[0];
        let rec = &data[index.trajectories[1].offset * index.record_len..][..index.record_len];
        assert_eq!(rec[0], tr.proprio[0] as f32);
        assert_eq!(rec[2], tr.goal[0] as f32);
        assert_eq!(rec[7], tr.rtg as f32);
        assert_eq!(&rec[8..], &tr.obs_cells().unwrap()[..]);
    }
}
