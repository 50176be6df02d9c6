//! Python bindings: worlds, robots, roadmaps, data collection, the
//! transformer policy and the run pipeline.

use ctnav::collect::{collect_planner_trajectories, rollout, CollectConfig, Dataset, EpisodeSpec, RewardSpec, Sensor};
use ctnav::ct::{
    eval_ct_loss, rollout_conditioned, train_ct, train_value, ConditioningRule, ControlTransformer, CtConfig, TrainConfig,
    ValueConfig, ValueNet,
};
use ctnav::eval::GoToGoal;
use ctnav::geometry::{Pose2, Vec2};
use ctnav::nn::Checkpoint;
use ctnav::pipeline::{self, RunConfig};
use ctnav::planner::{build_prm, plan_route, PrmConfig, PrmGraph};
use ctnav::robot::Robot;
use ctnav::world::{World, WorldFamily, WorldTemplate};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::path::Path;

fn err(e: ctnav::Error) -> PyErr {
    match e {
        ctnav::Error::Config(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn family(name: &str) -> PyResult<WorldFamily> {
    match name {
        "cluttered" => Ok(WorldFamily::Cluttered(WorldTemplate::cluttered())),
        "maze" => Ok(WorldFamily::maze()),
        other => Err(PyValueError::new_err(format!("unknown world family `{other}`"))),
    }
}

#[pyclass(name = "World", from_py_object)]
#[derive(Clone)]
struct PyWorld(World);

#[pymethods]
impl PyWorld {
    /// Sample a world from the `cluttered` or `maze` family.
    #[staticmethod]
    #[pyo3(signature = (family_name="cluttered", seed=0))]
    fn sample(family_name: &str, seed: u64) -> PyResult<Self> {
        family(family_name)?.sample(seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        World::from_json(text).map(Self).map_err(err)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    /// Obstacles as `(x0, y0, x1, y1)` tuples.
    fn obstacles(&self) -> Vec<(f64, f64, f64, f64)> {
        self.0
            .obstacles
            .iter()
            .map(|r| (r.min.x, r.min.y, r.max.x, r.max.y))
            .collect()
    }

    fn point_free(&self, x: f64, y: f64, radius: f64) -> bool {
        self.0.point_free(Vec2::new(x, y), radius)
    }

    /// Lidar ranges from pose `(x, y, psi)`.
    #[pyo3(signature = (pose, rays=72, max_range=1.0))]
    fn raycast(&self, pose: (f64, f64, f64), rays: usize, max_range: f64) -> Vec<f64> {
        self.0.raycast(Pose2::new(pose.0, pose.1, pose.2), rays, max_range).ranges
    }
}

#[pyclass(name = "Robot", from_py_object)]
#[derive(Clone, Copy)]
struct PyRobot(Robot);

#[pymethods]
impl PyRobot {
    #[staticmethod]
    fn diff_drive() -> Self {
        Self(Robot::diff_drive())
    }

    #[staticmethod]
    fn point() -> Self {
        Self(Robot::point())
    }

    #[getter]
    fn proprio_dim(&self) -> usize {
        self.0.proprio_dim()
    }

    /// One integration step; returns the new pose and the collision flag.
    fn step(&self, pose: (f64, f64, f64), action: Vec<f64>, world: &PyWorld) -> PyResult<((f64, f64, f64), bool)> {
        if action.len() != self.0.action_dim() {
            return Err(PyValueError::new_err("action must have two entries"));
        }
        let (p, c) = self.0.step(Pose2::new(pose.0, pose.1, pose.2), &action, &world.0);
        Ok(((p.x, p.y, p.psi), c))
    }
}

#[pyclass(name = "Roadmap")]
struct PyRoadmap(PrmGraph);

#[pymethods]
impl PyRoadmap {
    #[new]
    #[pyo3(signature = (world, n_samples=150, connect_distance=2.0, radius=0.15, seed=0))]
    fn new(world: &PyWorld, n_samples: usize, connect_distance: f64, radius: f64, seed: u64) -> PyResult<Self> {
        let cfg = PrmConfig {
            n_samples,
            connect_distance,
            radius,
            seed,
            ..PrmConfig::default()
        };
        build_prm(&world.0, &cfg).map(Self).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn vertices(&self) -> Vec<(f64, f64)> {
        self.0.vertices.iter().map(|v| (v.x, v.y)).collect()
    }

    /// Waypoints from `start` to `goal`, or `None` when disconnected.
    fn plan(&self, start: (f64, f64), goal: (f64, f64)) -> PyResult<Option<Vec<(f64, f64)>>> {
        let p = plan_route(&self.0, Vec2::new(start.0, start.1), Vec2::new(goal.0, goal.1)).map_err(err)?;
        Ok(p.map(|p| p.waypoints.iter().map(|w| (w.x, w.y)).collect()))
    }
}

#[pyclass(name = "Dataset")]
struct PyDataset(Dataset);

#[pymethods]
impl PyDataset {
    /// Roadmap-guided trajectories; `config` is a JSON collect section.
    #[staticmethod]
    #[pyo3(signature = (robot, family_name="cluttered", config="{}"))]
    fn collect(py: Python<'_>, robot: &PyRobot, family_name: &str, config: &str) -> PyResult<Self> {
        let cfg: CollectConfig = serde_json::from_str(config).map_err(json_err)?;
        let fam = family(family_name)?;
        let r = robot.0;
        let trajs = py
            .detach(|| collect_planner_trajectories(&cfg, &fam, &r))
            .map_err(err)?;
        Ok(Self(Dataset::new(trajs)))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Dataset::load(Path::new(path)).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(Path::new(path)).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn num_transitions(&self) -> usize {
        self.0.num_transitions()
    }

    /// Per-trajectory `(return, length, collided_steps)`.
    fn summary(&self) -> Vec<(f64, usize, usize)> {
        self.0
            .trajectories
            .iter()
            .map(|t| (t.ret(), t.len(), t.collided_steps))
            .collect()
    }
}

#[pyclass(name = "ControlTransformer")]
struct PyModel(ControlTransformer);

fn train_config(updates: usize, batch_size: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        updates,
        batch_size,
        lr,
        seed,
        ..TrainConfig::desk()
    }
}

#[pymethods]
impl PyModel {
    /// Desk-scale model for `robot`; `config` optionally replaces the whole
    /// model config as JSON.
    #[new]
    #[pyo3(signature = (robot, seed=0, config=None))]
    fn new(robot: &PyRobot, seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg = match config {
            Some(c) => serde_json::from_str::<CtConfig>(c).map_err(json_err)?,
            None => CtConfig::desk(&robot.0),
        };
        ControlTransformer::new(cfg, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(Path::new(path)).map_err(err)?;
        ControlTransformer::from_checkpoint(&ck).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0
            .checkpoint(None, serde_json::Value::Null)
            .save(Path::new(path))
            .map_err(err)
    }

    fn config_json(&self) -> String {
        serde_json::to_string(&self.0.config).expect("config serializes")
    }

    fn num_params(&self) -> usize {
        self.0.params.numel()
    }

    /// Train in place; returns the per-update loss.
    #[pyo3(signature = (data, updates=100, batch_size=32, lr=3e-4, seed=0))]
    fn train(&mut self, py: Python<'_>, data: &PyDataset, updates: usize, batch_size: usize, lr: f64, seed: u64) -> PyResult<Vec<f64>> {
        let tc = train_config(updates, batch_size, lr, seed);
        let m = &mut self.0;
        let d = &data.0;
        let (curve, _) = py.detach(|| train_ct(m, d, &tc, None)).map_err(err)?;
        Ok(curve.iter().map(|p| p.loss).collect())
    }

    #[pyo3(signature = (data, batches=4, batch_size=32, seed=0))]
    fn eval_loss(&self, data: &PyDataset, batches: usize, batch_size: usize, seed: u64) -> PyResult<f64> {
        eval_ct_loss(&self.0, &data.0, batches, batch_size, seed).map_err(err)
    }

    /// One episode; returns `(success, return, collisions, path)`.
    #[pyo3(signature = (world, robot, start, goal, value=None, horizon=200, success_eps=0.3))]
    #[allow(clippy::too_many_arguments)]
    fn rollout(
        &self,
        world: &PyWorld,
        robot: &PyRobot,
        start: (f64, f64, f64),
        goal: (f64, f64),
        value: Option<&PyValueNet>,
        horizon: usize,
        success_eps: f64,
    ) -> PyResult<(bool, f64, usize, Vec<(f64, f64)>)> {
        let sensor = Sensor::default();
        let spec = EpisodeSpec {
            world: &world.0,
            robot: &robot.0,
            sensor: &sensor,
            reward: RewardSpec::default(),
            start: Pose2::new(start.0, start.1, start.2),
            goal: Vec2::new(goal.0, goal.1),
            horizon,
            success_eps,
            detector: None,
        };
        let (rep, _) = rollout_conditioned(&self.0, value.map(|v| &v.0), &ConditioningRule::default(), &spec).map_err(err)?;
        Ok((rep.success, rep.ret, rep.collisions, rep.poses.iter().map(|p| (p.x, p.y)).collect()))
    }
}

#[pyclass(name = "ValueNet")]
struct PyValueNet(ValueNet);

#[pymethods]
impl PyValueNet {
    #[new]
    #[pyo3(signature = (model, seed=0))]
    fn new(model: &PyModel, seed: u64) -> Self {
        Self(ValueNet::new(ValueConfig::for_model(&model.0.config), seed))
    }

    /// Regress return-to-go on the collision-free trajectories.
    #[pyo3(signature = (data, updates=200, batch_size=32, lr=1e-3, seed=0))]
    fn train(&mut self, py: Python<'_>, data: &PyDataset, updates: usize, batch_size: usize, lr: f64, seed: u64) -> PyResult<Vec<f64>> {
        let tc = train_config(updates, batch_size, lr, seed);
        let v = &mut self.0;
        let d = &data.0;
        let (curve, _) = py
            .detach(|| train_value(v, d, &ConditioningRule::default(), &tc))
            .map_err(err)?;
        Ok(curve.iter().map(|p| p.loss).collect())
    }
}

/// Straight-to-goal controller episode; returns `(success, return)`.
#[pyfunction]
#[pyo3(signature = (world, robot, start, goal, horizon=200))]
fn go_to_goal(world: &PyWorld, robot: &PyRobot, start: (f64, f64, f64), goal: (f64, f64), horizon: usize) -> PyResult<(bool, f64)> {
    let sensor = Sensor::default();
    let spec = EpisodeSpec {
        world: &world.0,
        robot: &robot.0,
        sensor: &sensor,
        reward: RewardSpec::default(),
        start: Pose2::new(start.0, start.1, start.2),
        goal: Vec2::new(goal.0, goal.1),
        horizon,
        success_eps: 0.3,
        detector: None,
    };
    let ro = rollout(&spec, &mut GoToGoal(robot.0)).map_err(err)?;
    Ok((ro.success, ro.transitions.iter().map(|t| t.reward).sum()))
}

/// Run one pipeline command (`gen-worlds`, `build-prm`, `collect`, `train`,
/// `train-value`, `finetune`, `eval`) with a JSON config and dotted
/// overrides. Returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (command, config="{}", overrides=Vec::new(), seed=0, bc=false))]
fn run_step(py: Python<'_>, command: &str, config: &str, overrides: Vec<(String, String)>, seed: u64, bc: bool) -> PyResult<String> {
    let cfg = RunConfig::from_json(config, &overrides).map_err(err)?;
    let m = py
        .detach(|| match command {
            "gen-worlds" => pipeline::gen_worlds(&cfg),
            "build-prm" => pipeline::build_prms(&cfg),
            "collect" => pipeline::collect(&cfg),
            "train" => pipeline::train(&cfg, bc, seed, None),
            "train-value" => pipeline::train_value_net(&cfg),
            "finetune" => pipeline::finetune(&cfg, seed),
            "eval" => pipeline::evaluate(&cfg).map(|(m, _)| m),
            other => Err(ctnav::Error::Config(format!("unknown command `{other}`"))),
        })
        .map_err(err)?;
    serde_json::to_string(&m).map_err(json_err)
}

#[pymodule]
fn ctnav_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWorld>()?;
    m.add_class::<PyRobot>()?;
    m.add_class::<PyRoadmap>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyValueNet>()?;
    m.add_function(wrap_pyfunction!(go_to_goal, m)?)?;
    m.add_function(wrap_pyfunction!(run_step, m)?)?;
    m.add("__version__", pipeline::VERSION)?;
    Ok(())
}
