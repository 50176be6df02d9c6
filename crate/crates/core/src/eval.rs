//! Paired evaluation of policies on shared (world, start, goal) triples,
//! summary statistics over model seeds, and SVG trajectory plots.

use crate::collect::{episode_start, rollout, EpisodeSpec, Label, Policy, RewardSpec, Sensor, Trajectory};
use crate::ct::RolloutReport;
use crate::error::{Error, Result};
use crate::geometry::{Pose2, Vec2};
use crate::planner::{build_prm, PrmConfig};
use crate::rng::{derive_seed, stream};
use crate::robot::Robot;
use crate::world::{World, WorldFamily};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub n_envs: usize,
    pub goals_per_env: usize,
    pub seed: u64,
    pub horizon: usize,
    pub success_eps: f64,
    /// Minimum roadmap hops between start and goal.
    pub min_edges: usize,
    pub prm: PrmConfig,
    pub sensor: Sensor,
    pub reward: RewardSpec,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            n_envs: 20,
            goals_per_env: 25,
            seed: 1_000,
            horizon: 200,
            success_eps: 0.3,
            min_edges: 2,
            prm: PrmConfig::default(),
            sensor: Sensor::default(),
            reward: RewardSpec::default(),
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_envs == 0 || self.goals_per_env == 0 || self.horizon == 0 {
            return Err(Error::Config("eval: n_envs, goals_per_env and horizon must be at least 1".into()));
        }
        if self.success_eps <= 0.0 {
            return Err(Error::Config("eval: success_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalEpisode {
    pub env: usize,
    pub index: usize,
    pub world_seed: u64,
    pub start: Pose2,
    pub goal: Vec2,
}

/// Worlds and the episode triples every method is run on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub worlds: Vec<World>,
    pub episodes: Vec<EvalEpisode>,
}

const START_ATTEMPTS: u64 = 64;

pub fn build_eval_set(protocol: &EvalProtocol, family: &WorldFamily, robot: &Robot) -> Result<EvalSet> {
    protocol.validate()?;
    let built: Vec<Result<(World, Vec<EvalEpisode>)>> = (0..protocol.n_envs)
        .into_par_iter()
        .map(|env| {
            let world = family.sample(derive_seed(protocol.seed, stream::EVAL, env as u64))?;
            let prm = PrmConfig {
                seed: derive_seed(protocol.seed, stream::EVAL ^ stream::PRM << 8, env as u64),
                ..protocol.prm.clone()
            };
            let graph = build_prm(&world, &prm)?;
            let mut eps = Vec::with_capacity(protocol.goals_per_env);
            for index in 0..protocol.goals_per_env {
                let base = ((env as u64) << 32) | ((index as u64) << 8);
                let ep = (0..START_ATTEMPTS)
                    .filter_map(|a| episode_start(&graph, robot, derive_seed(protocol.seed, stream::EVAL, base | a), protocol.min_edges))
                    // an episode that starts inside the goal disc would succeed without acting
                    .find(|e| e.start.position().dist(e.goal) >= protocol.success_eps)
                    .ok_or(Error::SamplingBudget {
                        found: 0,
                        wanted: 1,
                        attempts: START_ATTEMPTS as usize,
                    })?;
                eps.push(EvalEpisode {
                    env,
                    index,
                    world_seed: world.seed,
                    start: ep.start,
                    goal: ep.goal,
                });
            }
            Ok((world, eps))
        })
        .collect();
    let mut set = EvalSet {
        worlds: Vec::new(),
        episodes: Vec::new(),
    };
    for r in built {
        let (w, e) = r?;
        set.worlds.push(w);
        set.episodes.extend(e);
    }
    Ok(set)
}

pub type PolicyFactory<'a> = dyn Fn() -> Result<Box<dyn Policy + 'a>> + Sync + 'a;

/// One trained model (or scripted controller) under a method name.
pub struct Method<'a> {
    pub name: String,
    pub model_seed: u64,
    pub make: Box<PolicyFactory<'a>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub method: String,
    pub model_seed: u64,
    pub episode: EvalEpisode,
    pub report: RolloutReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Percent per model seed.
    pub success_per_seed: Vec<f64>,
    pub success_mean: f64,
    /// Standard error over model seeds.
    pub success_se: f64,
    pub mean_return: f64,
    /// Percent of episodes with at least one collision.
    pub collision_rate: f64,
    /// Percent of episodes reaching the goal after grazing an obstacle.
    pub grazing_success_rate: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub protocol_seed: u64,
    pub n_envs: usize,
    pub goals_per_env: usize,
    pub methods: Vec<MethodSummary>,
}

impl EvalSummary {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>16} {:>12} {:>11} {:>9}",
            "method", "seeds", "success %", "mean return", "collide %", "graze %"
        );
        for m in &self.methods {
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>9.2} ± {:<4.2} {:>12.3} {:>11.2} {:>9.2}",
                m.name,
                m.seeds.len(),
                m.success_mean,
                m.success_se,
                m.mean_return,
                m.collision_rate,
                m.grazing_success_rate
            );
        }
        s
    }
}

pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn summarize(names: &[String], records: &[EpisodeRecord]) -> Vec<MethodSummary> {
    names
        .iter()
        .map(|name| {
            let mine: Vec<&EpisodeRecord> = records.iter().filter(|r| &r.method == name).collect();
            let mut seeds: Vec<u64> = Vec::new();
            for r in &mine {
                if !seeds.contains(&r.model_seed) {
                    seeds.push(r.model_seed);
                }
            }
            let per_seed: Vec<f64> = seeds
                .iter()
                .map(|&s| {
                    let eps: Vec<&&EpisodeRecord> = mine.iter().filter(|r| r.model_seed == s).collect();
                    100.0 * eps.iter().filter(|r| r.report.success).count() as f64 / eps.len() as f64
                })
                .collect();
            let (mean, se) = mean_se(&per_seed);
            let n = mine.len().max(1) as f64;
            MethodSummary {
                name: name.clone(),
                seeds,
                success_per_seed: per_seed,
                success_mean: mean,
                success_se: se,
                mean_return: mine.iter().map(|r| r.report.ret).sum::<f64>() / n,
                collision_rate: 100.0 * mine.iter().filter(|r| r.report.collisions > 0).count() as f64 / n,
                grazing_success_rate: 100.0
                    * mine.iter().filter(|r| r.report.success && r.report.collisions > 0).count() as f64
                    / n,
                episodes: mine.len(),
            }
        })
        .collect()
}

/// Runs every method on every episode of `set`. `sink` sees each record with
/// its full trajectory, in method then episode order.
pub fn run_eval(
    protocol: &EvalProtocol,
    set: &EvalSet,
    robot: &Robot,
    methods: &[Method<'_>],
    mut sink: impl FnMut(&EpisodeRecord, &Trajectory) -> Result<()>,
) -> Result<(EvalSummary, Vec<EpisodeRecord>)> {
    protocol.validate()?;
    let mut records = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for m in methods {
        if !names.contains(&m.name) {
            names.push(m.name.clone());
        }
        let results: Vec<Result<(EpisodeRecord, Trajectory)>> = set
            .episodes
            .par_iter()
            .map(|ep| {
                let world = &set.worlds[ep.env];
                let spec = EpisodeSpec {
                    world,
                    robot,
                    sensor: &protocol.sensor,
                    reward: protocol.reward,
                    start: ep.start,
                    goal: ep.goal,
                    horizon: protocol.horizon,
                    success_eps: protocol.success_eps,
                    detector: None,
                };
                let mut policy = (m.make)()?;
                let ro = rollout(&spec, policy.as_mut())?;
                let report = RolloutReport::from_rollout(&ro, ep.goal, policy.conditioning().to_vec());
                let traj = Trajectory {
                    world_seed: ep.world_seed,
                    start: ep.start.position(),
                    goal: ep.goal,
                    label: Label::Policy,
                    collided_steps: ro.collided_steps,
                    final_pose: ro.final_pose,
                    plan: Vec::new(),
                    transitions: ro.transitions,
                };
                let rec = EpisodeRecord {
                    method: m.name.clone(),
                    model_seed: m.model_seed,
                    episode: *ep,
                    report,
                };
                Ok((rec, traj))
            })
            .collect();
        for r in results {
            let (rec, traj) = r?;
            sink(&rec, &traj)?;
            records.push(rec);
        }
    }
    let summary = EvalSummary {
        protocol_seed: protocol.seed,
        n_envs: protocol.n_envs,
        goals_per_env: protocol.goals_per_env,
        methods: summarize(&names, &records),
    };
    Ok((summary, records))
}

#[derive(Serialize)]
struct ReportLine<'a> {
    header: ReportHeader<'a>,
    trajectory: &'a Trajectory,
}

#[derive(Serialize)]
struct ReportHeader<'a> {
    method: &'a str,
    model_seed: u64,
    env: usize,
    episode: usize,
    success: bool,
    ret: f64,
    collisions: usize,
    final_distance: f64,
    conditioning: &'a [f64],
}

/// Writes one JSON line: a report header followed by the trajectory record.
pub fn write_report_line<W: Write>(w: &mut W, rec: &EpisodeRecord, traj: &Trajectory) -> Result<()> {
    let line = ReportLine {
        header: ReportHeader {
            method: &rec.method,
            model_seed: rec.model_seed,
            env: rec.episode.env,
            episode: rec.episode.index,
            success: rec.report.success,
            ret: rec.report.ret,
            collisions: rec.report.collisions,
            final_distance: rec.report.final_distance,
            conditioning: &rec.report.conditioning,
        },
        trajectory: traj,
    };
    serde_json::to_writer(&mut *w, &line)?;
    w.write_all(b"\n").map_err(|e| Error::io(Path::new("<reports>"), e))
}

/// Drives straight at the goal with the proportional controller.
pub struct GoToGoal(pub Robot);

impl Policy for GoToGoal {
    fn act(&mut self, o: &crate::collect::StepObs<'_>) -> Result<Vec<f64>> {
        Ok(self.0.control(o.pose, o.goal).to_vec())
    }
}

/// Never moves.
pub struct Idle(pub usize);

impl Policy for Idle {
    fn act(&mut self, _o: &crate::collect::StepObs<'_>) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.0])
    }
}

const PX_PER_M: f64 = 100.0;

/// SVG plot of one episode: obstacles, start and goal markers, the driven
/// path and a marker at every colliding step.
pub fn render_svg(report: &RolloutReport, world: &World) -> Result<String> {
    if report.poses.is_empty() {
        return Err(Error::Format("report has no poses".into()));
    }
    let b = world.bounds;
    let (w, h) = (b.width() * PX_PER_M, b.height() * PX_PER_M);
    let px = |p: Vec2| ((p.x - b.min.x) * PX_PER_M, (b.max.y - p.y) * PX_PER_M);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.1}" height="{h:.1}" viewBox="0 0 {w:.1} {h:.1}">"#
    );
    let _ = writeln!(s, r##"<rect class="bounds" x="0" y="0" width="{w:.1}" height="{h:.1}" fill="#fafafa" stroke="#333"/>"##);
    for o in &world.obstacles {
        let (x, y) = px(Vec2::new(o.min.x, o.max.y));
        let _ = writeln!(
            s,
            r##"<rect class="obstacle" x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="#555"/>"##,
            o.width() * PX_PER_M,
            o.height() * PX_PER_M
        );
    }
    let pts: Vec<String> = report
        .poses
        .iter()
        .map(|p| {
            let (x, y) = px(p.position());
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(s, r##"<polyline class="path" points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##, pts.join(" "));
    for (t, &c) in report.collided.iter().enumerate() {
        if c {
            let (x, y) = px(report.poses[t + 1].position());
            let _ = writeln!(s, r##"<circle class="collision" cx="{x:.2}" cy="{y:.2}" r="4" fill="#d62728"/>"##);
        }
    }
    let (sx, sy) = px(report.poses[0].position());
    let _ = writeln!(s, r##"<circle class="start" cx="{sx:.2}" cy="{sy:.2}" r="6" fill="#2ca02c"/>"##);
    let (gx, gy) = px(report.goal);
    let _ = writeln!(s, r##"<circle class="goal" cx="{gx:.2}" cy="{gy:.2}" r="6" fill="#ff7f0e"/>"##);
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_trajectory(report: &RolloutReport, world: &World, out: &Path) -> Result<()> {
    let svg = render_svg(report, world)?;
    std::fs::write(out, svg).map_err(|e| Error::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collect::quantize;
    use crate::geometry::Rect;

    fn empty_family() -> WorldFamily {
        WorldFamily::Fixed {
            world: World::new(Rect::new(0.0, 0.0, 3.0, 3.0), vec![], 0).unwrap(),
        }
    }

    fn protocol() -> EvalProtocol {
        EvalProtocol {
            n_envs: 2,
            goals_per_env: 5,
            prm: PrmConfig {
                n_samples: 40,
                ..PrmConfig::default()
            },
            ..EvalProtocol::default()
        }
    }

    fn scripted(robot: Robot) -> Vec<Method<'static>> {
        vec![
            Method {
                name: "oracle".into(),
                model_seed: 0,
                make: Box::new(move || Ok(Box::new(GoToGoal(robot)) as Box<dyn Policy>)),
            },
            Method {
                name: "idle".into(),
                model_seed: 0,
                make: Box::new(|| Ok(Box::new(Idle(2)) as Box<dyn Policy>)),
            },
        ]
    }

    #[test]
    fn scripted_bounds() {
        let robot = Robot::diff_drive();
        let p = protocol();
        let set = build_eval_set(&p, &empty_family(), &robot).unwrap();
        assert_eq!(set.episodes.len(), 10);
        let (sum, recs) = run_eval(&p, &set, &robot, &scripted(robot), |_, _| Ok(())).unwrap();
        assert_eq!(sum.method("oracle").unwrap().success_mean, 100.0);
        assert_eq!(sum.method("idle").unwrap().success_mean, 0.0);
        for r in recs.iter().filter(|r| r.method == "idle") {
            let d = r.episode.start.position().dist(r.episode.goal);
            let want = p.horizon as f64 * quantize(-d);
            assert!((r.report.ret - want).abs() < 1e-9, "{} vs {want}", r.report.ret);
        }
    }

    #[test]
    fn episodes_start_outside_goal_disc() {
        let robot = Robot::diff_drive();
        let p = EvalProtocol {
            n_envs: 8,
            goals_per_env: 25,
            ..protocol()
        };
        let set = build_eval_set(&p, &WorldFamily::Cluttered(crate::world::WorldTemplate::cluttered()), &robot).unwrap();
        assert_eq!(set.episodes.len(), 200);
        for e in &set.episodes {
            assert!(e.start.position().dist(e.goal) >= p.success_eps, "{e:?}");
        }
    }

    #[test]
    fn rerun_is_identical() {
        let robot = Robot::diff_drive();
        let p = protocol();
        let run = || {
            let set = build_eval_set(&p, &WorldFamily::Cluttered(crate::world::WorldTemplate::cluttered()), &robot).unwrap();
            let mut lines = Vec::new();
            let (sum, _) = run_eval(&p, &set, &robot, &scripted(robot), |r, t| write_report_line(&mut lines, r, t)).unwrap();
            (sum.to_json(), lines)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn standard_error() {
        let (m, se) = mean_se(&[90.0, 92.0, 94.0]);
        assert_eq!(m, 92.0);
        assert!((se - (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_se(&[50.0]), (50.0, 0.0));
    }

    fn two_pose_report() -> RolloutReport {
        RolloutReport {
            success: false,
            steps: 1,
            ret: -1.0,
            collisions: 1,
            collided: vec![true],
            final_distance: 1.0,
            failed_at: None,
            poses: vec![Pose2::new(0.5, 0.5, 0.0), Pose2::new(0.6, 0.5, 0.0)],
            goal: Vec2::new(2.5, 2.5),
            rewards: vec![-1.0],
            actions: vec![vec![0.1, 0.0]],
            conditioning: vec![],
        }
    }

    #[test]
    fn svg_structure() {
        let world = World::new(
            Rect::new(0.0, 0.0, 3.0, 3.0),
            vec![Rect::new(1.0, 1.0, 1.4, 1.2), Rect::new(2.0, 0.2, 2.3, 0.9)],
            0,
        )
        .unwrap();
        let svg = render_svg(&two_pose_report(), &world).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let class = |c: &str| doc.descendants().filter(|n| n.attribute("class") == Some(c)).count();
        assert_eq!(class("obstacle"), 2);
        assert_eq!(class("start"), 1);
        assert_eq!(class("goal"), 1);
        assert_eq!(class("collision"), 1);
        let path = doc.descendants().find(|n| n.attribute("class") == Some("path")).unwrap();
        let points = path.attribute("points").unwrap().split_whitespace().count();
        assert_eq!(points - 1, 1);
    }

    #[test]
    fn render_errors() {
        let world = World::empty(Rect::new(0.0, 0.0, 1.0, 1.0));
        let mut r = two_pose_report();
        assert!(render_trajectory(&r, &world, Path::new("/nonexistent/dir/x.svg")).is_err());
        r.poses.clear();
        assert!(render_svg(&r, &world).is_err());
    }
}
