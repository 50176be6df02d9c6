//! End-to-end pipeline steps over a run directory. Each step validates its
//! config section, reads the artifacts of earlier steps and writes its own
//! outputs together with a manifest.

use crate::collect::{collect_planner_trajectories, collect_recoveries, Arena, CollectConfig, Dataset, Policy, RecoveryConfig};
use crate::ct::{
    loss_curve_csv, train_ct, train_value, transfer_init, ConditioningRule, ControlTransformer, CtConfig, CtPolicy,
    LossPoint, RolloutReport, TrainConfig, ValueConfig, ValueNet,
};
use crate::error::{Error, Result};
use crate::eval::{build_eval_set, render_trajectory, run_eval, write_report_line, EvalProtocol, EvalSet, EvalSummary, Method};
use crate::nn::checkpoint::{config_hash, hex, Checkpoint};
use crate::planner::{build_prm, PrmConfig};
use crate::rng::{derive_seed, stream};
use crate::robot::{FailureConfig, Robot};
use crate::world::{WorldFamily, World};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub family: WorldFamily,
    /// Stored worlds cycled through during collection.
    pub count: usize,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            family: WorldFamily::Cluttered(crate::world::WorldTemplate::cluttered()),
            count: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueSection {
    pub rule: ConditioningRule,
    pub hidden: usize,
    pub train: TrainConfig,
}

impl Default for ValueSection {
    fn default() -> Self {
        Self {
            rule: ConditioningRule::default(),
            hidden: 128,
            train: TrainConfig {
                updates: 2_000,
                batch_size: 64,
                lr: 1e-3,
                weight_decay: 1e-4,
                warmup: 100,
                grad_clip: Some(1.0),
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    /// Recovery iterations.
    pub iterations: usize,
    /// Fail/recovery pairs gathered per iteration.
    pub recoveries: usize,
    /// Gradient updates per iteration.
    pub updates: usize,
    pub detector: FailureConfig,
    pub max_episodes: Option<usize>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            iterations: 1,
            recoveries: 500,
            updates: 2_000,
            detector: FailureConfig::default(),
            max_episodes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub protocol: EvalProtocol,
    /// Evaluation worlds; the training family when absent.
    pub family: Option<WorldFamily>,
    pub model_seeds: Vec<u64>,
    pub methods: Vec<ModelKind>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            protocol: EvalProtocol::default(),
            family: None,
            model_seeds: vec![0, 1, 2],
            methods: vec![ModelKind::BcCt, ModelKind::Ct, ModelKind::FCt],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub world: WorldSection,
    pub robot: Robot,
    pub prm: PrmConfig,
    pub collect: CollectConfig,
    /// Desk-scale transformer for the robot when absent.
    pub model: Option<CtConfig>,
    pub train: TrainConfig,
    pub value: ValueSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    /// Also write the packed binary dataset.
    pub packed: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            world: WorldSection::default(),
            robot: Robot::diff_drive(),
            prm: PrmConfig::default(),
            collect: CollectConfig {
                trajectories: 500,
                ..CollectConfig::default()
            },
            model: None,
            train: TrainConfig::desk(),
            value: ValueSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
            packed: false,
        }
    }
}

/// Set the field at dotted `path` to `raw`, parsed as JSON when it parses and
/// as a string otherwise.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        if !obj.contains_key(*key) {
            return Err(Error::Config(format!("unknown config field `{path}`")));
        }
        cur = obj.get_mut(*key).expect("checked");
    }
    *cur = value;
    Ok(())
}

fn config_err(e: serde_json::Error) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(v).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a config document and apply `--a.b value` style overrides.
    pub fn from_json(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let parsed: Self = serde_json::from_str(text).map_err(config_err)?;
        let mut doc = serde_json::to_value(&parsed)?;
        if overrides.iter().any(|(k, _)| k.starts_with("model.")) && doc["model"].is_null() {
            doc["model"] = serde_json::to_value(CtConfig::desk(&parsed.robot))?;
        }
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        Self::from_value(doc)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => "{}".to_string(),
        };
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.world.count == 0 {
            return Err(Error::Config("world: count must be at least 1".into()));
        }
        self.collect_config().validate()?;
        let m = self.model_config();
        m.validate()?;
        if m.proprio_dim != self.robot.proprio_dim() || m.action_dim != self.robot.action_dim() {
            return Err(Error::Config("model: proprio_dim/action_dim do not match the robot".into()));
        }
        self.train.validate()?;
        self.value.train.validate()?;
        self.value.rule.validate()?;
        self.eval.protocol.validate()?;
        if self.eval.model_seeds.is_empty() {
            return Err(Error::Config("eval: model_seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn collect_config(&self) -> CollectConfig {
        CollectConfig {
            prm: self.prm.clone(),
            seed: self.seed,
            ..self.collect.clone()
        }
    }

    pub fn model_config(&self) -> CtConfig {
        self.model.clone().unwrap_or_else(|| CtConfig::desk(&self.robot))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Hash of every field except `out_dir`, so relocated runs hash alike.
    pub fn hash(&self) -> String {
        let mut v = self.to_value();
        if let Some(o) = v.as_object_mut() {
            o.remove("out_dir");
        }
        config_hash(&v)
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.out_dir.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    BcCt,
    Ct,
    FCt,
}

impl ModelKind {
    pub fn file_stem(self) -> &'static str {
        match self {
            ModelKind::BcCt => "bc_ct",
            ModelKind::Ct => "ct",
            ModelKind::FCt => "f_ct",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::BcCt => "BC-CT",
            ModelKind::Ct => "CT",
            ModelKind::FCt => "F-CT",
        }
    }

    pub fn producer(self) -> &'static str {
        match self {
            ModelKind::BcCt => "train --bc",
            ModelKind::Ct => "train",
            ModelKind::FCt => "finetune",
        }
    }
}

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn worlds(&self) -> PathBuf {
        self.root.join("worlds.json")
    }
    pub fn arenas(&self) -> PathBuf {
        self.root.join("arenas.json")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }
    pub fn packed(&self) -> (PathBuf, PathBuf) {
        (self.root.join("dataset.bin"), self.root.join("dataset.index.json"))
    }
    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn model(&self, kind: ModelKind, seed: u64) -> PathBuf {
        self.models().join(format!("{}_s{seed}.ckpt", kind.file_stem()))
    }
    pub fn loss_curve(&self, kind: ModelKind, seed: u64) -> PathBuf {
        self.models().join(format!("{}_s{seed}.loss.csv", kind.file_stem()))
    }
    pub fn value(&self) -> PathBuf {
        self.models().join("value.ckpt")
    }
    pub fn finetune_dataset(&self, seed: u64) -> PathBuf {
        self.root.join(format!("dataset_ft_s{seed}.jsonl"))
    }
    pub fn transfer(&self, seed: u64) -> PathBuf {
        self.models().join(format!("transfer_s{seed}.ckpt"))
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn manifest(&self, name: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{name}.json"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub config_hash: String,
    pub args: Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub config: Value,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer: producer.to_string(),
        })
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(d) = path.parent() {
        ensure_dir(d)?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

struct Step<'a> {
    cfg: &'a RunConfig,
    name: String,
    command: &'static str,
    seed: u64,
    args: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl<'a> Step<'a> {
    fn new(cfg: &'a RunConfig, command: &'static str, name: impl Into<String>, seed: u64, args: Value) -> Self {
        Self {
            cfg,
            name: name.into(),
            command,
            seed,
            args,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: PathBuf, producer: &str) -> Result<PathBuf> {
        require(&path, producer)?;
        self.inputs.push(path.clone());
        Ok(path)
    }

    fn output(&mut self, path: PathBuf) -> PathBuf {
        self.outputs.push(path.clone());
        path
    }

    fn finish(self) -> Result<Manifest> {
        let m = Manifest {
            command: self.command.to_string(),
            version: VERSION.to_string(),
            seed: self.seed,
            threads: rayon::current_num_threads(),
            config_hash: self.cfg.hash(),
            args: self.args,
            inputs: digests(&self.inputs)?,
            outputs: digests(&self.outputs)?,
            config: self.cfg.to_value(),
        };
        let text = serde_json::to_string_pretty(&m)?;
        write_file(&self.cfg.layout().manifest(&self.name), text.as_bytes())?;
        Ok(m)
    }
}

fn run_meta(cfg: &RunConfig, step: &str, seed: u64) -> Value {
    serde_json::json!({
        "step": step,
        "seed": seed,
        "run_config_hash": cfg.hash(),
        "version": VERSION,
    })
}

/// Sample the stored worlds collection cycles through.
pub fn gen_worlds(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut step = Step::new(cfg, "gen-worlds", "gen-worlds", cfg.seed, Value::Null);
    let worlds: Vec<Result<World>> = (0..cfg.world.count)
        .into_par_iter()
        .map(|i| cfg.world.family.sample(derive_seed(cfg.seed, stream::WORLD, i as u64)))
        .collect();
    let worlds: Vec<World> = worlds.into_iter().collect::<Result<_>>()?;
    let out = step.output(cfg.layout().worlds());
    write_file(&out, serde_json::to_string(&worlds)?.as_bytes())?;
    step.finish()
}

/// Roadmaps for the stored worlds.
pub fn build_prms(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut step = Step::new(cfg, "build-prm", "build-prm", cfg.seed, Value::Null);
    let worlds: Vec<World> = read_json(&step.input(cfg.layout().worlds(), "gen-worlds")?)?;
    let arenas: Vec<Result<Arena>> = worlds
        .into_par_iter()
        .enumerate()
        .map(|(i, world)| {
            let prm = PrmConfig {
                seed: derive_seed(cfg.seed, stream::PRM, i as u64),
                ..cfg.prm.clone()
            };
            let graph = build_prm(&world, &prm)?;
            Ok(Arena { world, graph })
        })
        .collect();
    let arenas: Vec<Arena> = arenas.into_iter().collect::<Result<_>>()?;
    let out = step.output(cfg.layout().arenas());
    write_file(&out, serde_json::to_string(&arenas)?.as_bytes())?;
    step.finish()
}

fn load_arenas(step: &mut Step<'_>) -> Result<Vec<Arena>> {
    let path = step.input(step.cfg.layout().arenas(), "build-prm")?;
    read_json(&path)
}

fn load_dataset(step: &mut Step<'_>, path: PathBuf, producer: &str) -> Result<Dataset> {
    Dataset::load(&step.input(path, producer)?)
}

/// Roadmap-guided trajectories on the stored worlds.
pub fn collect(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut step = Step::new(cfg, "collect", "collect", cfg.seed, Value::Null);
    let arenas = load_arenas(&mut step)?;
    let trajs = collect_planner_trajectories(&cfg.collect_config(), arenas.as_slice(), &cfg.robot)?;
    let data = Dataset::new(trajs);
    let layout = cfg.layout();
    data.save(&step.output(layout.dataset()))?;
    if cfg.packed {
        let (bin, idx) = layout.packed();
        data.write_packed(&step.output(bin), &step.output(idx))?;
    }
    step.finish()
}

fn save_curve(path: &Path, curve: &[LossPoint]) -> Result<()> {
    write_file(path, loss_curve_csv(curve).as_bytes())
}

/// Train a transformer from scratch (or from `init`) on the collected data.
/// `bc` trains the ablation without return tokens.
pub fn train(cfg: &RunConfig, bc: bool, seed: u64, init: Option<&Path>) -> Result<Manifest> {
    cfg.validate()?;
    let kind = if bc { ModelKind::BcCt } else { ModelKind::Ct };
    let args = serde_json::json!({"bc": bc, "seed": seed, "init": init});
    let mut step = Step::new(cfg, "train", format!("train_{}_s{seed}", kind.file_stem()), seed, args);
    let data = load_dataset(&mut step, cfg.layout().dataset(), "collect")?;
    let mut model = match init {
        Some(p) => ControlTransformer::from_checkpoint(&Checkpoint::load(&step.input(p.to_path_buf(), "transfer-init")?)?)?,
        None => ControlTransformer::new(cfg.model_config(), derive_seed(seed, stream::INIT, 0))?,
    };
    model.config.use_returns = !bc;
    let tc = TrainConfig { seed, ..cfg.train };
    let (curve, opt) = train_ct(&mut model, &data, &tc, None)?;
    let layout = cfg.layout();
    save_curve(&step.output(layout.loss_curve(kind, seed)), &curve)?;
    model
        .checkpoint(Some(opt), run_meta(cfg, "train", seed))
        .save(&step.output(layout.model(kind, seed)))?;
    step.finish()
}

pub fn train_value_net(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut step = Step::new(cfg, "train-value", "train-value", cfg.seed, Value::Null);
    let data = load_dataset(&mut step, cfg.layout().dataset(), "collect")?;
    let vc = ValueConfig {
        hidden: cfg.value.hidden,
        ..ValueConfig::for_model(&cfg.model_config())
    };
    let mut v = ValueNet::new(vc, derive_seed(cfg.seed, stream::INIT, 1));
    let tc = TrainConfig {
        seed: cfg.seed,
        ..cfg.value.train
    };
    let (curve, _) = train_value(&mut v, &data, &cfg.value.rule, &tc)?;
    let layout = cfg.layout();
    save_curve(&step.output(layout.models().join("value.loss.csv")), &curve)?;
    v.checkpoint(None, run_meta(cfg, "train-value", cfg.seed))
        .save(&step.output(layout.value()))?;
    step.finish()
}

fn load_model(step: &mut Step<'_>, kind: ModelKind, seed: u64) -> Result<(ControlTransformer, Checkpoint)> {
    let path = step.input(step.cfg.layout().model(kind, seed), kind.producer())?;
    let ck = Checkpoint::load(&path)?;
    Ok((ControlTransformer::from_checkpoint(&ck)?, ck))
}

fn load_value(step: &mut Step<'_>) -> Result<ValueNet> {
    let path = step.input(step.cfg.layout().value(), "train-value")?;
    ValueNet::from_checkpoint(&Checkpoint::load(&path)?)
}

/// Recovery fine-tuning: per iteration, gather fail/recovery pairs with the
/// current policy, add both to the dataset and continue training with the
/// saved optimizer state.
pub fn finetune(cfg: &RunConfig, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    let args = serde_json::json!({"seed": seed});
    let mut step = Step::new(cfg, "finetune", format!("finetune_s{seed}"), seed, args);
    let (mut model, ck) = load_model(&mut step, ModelKind::Ct, seed)?;
    let value = load_value(&mut step)?;
    let mut data = load_dataset(&mut step, cfg.layout().dataset(), "collect")?;
    let arenas = load_arenas(&mut step)?;
    let mut opt = ck.optimizer;
    let mut curve = Vec::new();
    let ft = &cfg.finetune;
    let k = cfg.value.rule.k;
    for i in 0..ft.iterations {
        let ccfg = CollectConfig {
            seed: derive_seed(seed, stream::RECOVERY, i as u64),
            ..cfg.collect_config()
        };
        let rec = RecoveryConfig {
            count: ft.recoveries,
            detector: ft.detector,
            max_episodes: ft.max_episodes.unwrap_or(RecoveryConfig::new(ft.recoveries).max_episodes),
        };
        let frozen = model.clone();
        let pairs = collect_recoveries(&ccfg, arenas.as_slice(), &cfg.robot, &rec, || {
            Ok(CtPolicy::new(&frozen, Some((&value, k))))
        })?;
        data.extend(pairs.fails.into_iter().chain(pairs.recoveries));
        let tc = TrainConfig {
            updates: ft.updates,
            seed: derive_seed(seed, stream::TRAIN, 1 + i as u64),
            ..cfg.train
        };
        let (c, o) = train_ct(&mut model, &data, &tc, opt)?;
        curve.extend(c);
        opt = Some(o);
    }
    let layout = cfg.layout();
    data.save(&step.output(layout.finetune_dataset(seed)))?;
    save_curve(&step.output(layout.loss_curve(ModelKind::FCt, seed)), &curve)?;
    model
        .checkpoint(opt, run_meta(cfg, "finetune", seed))
        .save(&step.output(layout.model(ModelKind::FCt, seed)))?;
    step.finish()
}

/// Fresh embedders and head for `cfg.robot`, trunk copied from `source`.
pub fn transfer(cfg: &RunConfig, source: &Path, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    let args = serde_json::json!({"source": source, "seed": seed});
    let mut step = Step::new(cfg, "transfer-init", format!("transfer-init_s{seed}"), seed, args);
    let src = ControlTransformer::from_checkpoint(&Checkpoint::load(&step.input(source.to_path_buf(), "train")?)?)?;
    let model = transfer_init(&src, &cfg.robot, derive_seed(seed, stream::INIT, 2))?;
    model
        .checkpoint(None, run_meta(cfg, "transfer-init", seed))
        .save(&step.output(cfg.layout().transfer(seed)))?;
    step.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingGate {
    pub ct: f64,
    pub f_ct: f64,
    /// Allowed drop in success points.
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub summary: EvalSummary,
    pub forgetting: Option<ForgettingGate>,
}

/// Evaluate every configured method and model seed on one shared episode set.
pub fn evaluate(cfg: &RunConfig) -> Result<(Manifest, EvalOutput)> {
    cfg.validate()?;
    let mut step = Step::new(cfg, "eval", "eval", cfg.eval.protocol.seed, Value::Null);
    let family = cfg.eval.family.clone().unwrap_or_else(|| cfg.world.family.clone());
    let set = build_eval_set(&cfg.eval.protocol, &family, &cfg.robot)?;
    let needs_value = cfg.eval.methods.iter().any(|&m| m != ModelKind::BcCt);
    let value = if needs_value { Some(load_value(&mut step)?) } else { None };
    let mut models = Vec::new();
    for &kind in &cfg.eval.methods {
        for &seed in &cfg.eval.model_seeds {
            let (m, _) = load_model(&mut step, kind, seed)?;
            if m.config.proprio_dim != cfg.robot.proprio_dim() {
                return Err(Error::Checkpoint(format!("{} seed {seed} was trained for another robot", kind.label())));
            }
            models.push((kind, seed, m));
        }
    }
    let k = cfg.value.rule.k;
    let methods: Vec<Method<'_>> = models
        .iter()
        .map(|(kind, seed, m)| {
            let v = if *kind == ModelKind::BcCt { None } else { value.as_ref() };
            Method {
                name: kind.label().to_string(),
                model_seed: *seed,
                make: Box::new(move || Ok(Box::new(CtPolicy::new(m, v.map(|v| (v, k)))) as Box<dyn Policy + '_>)),
            }
        })
        .collect();
    let dir = cfg.layout().eval_dir();
    ensure_dir(&dir)?;
    let reports_path = step.output(dir.join("reports.jsonl"));
    let file = std::fs::File::create(&reports_path).map_err(|e| Error::io(&reports_path, e))?;
    let mut w = BufWriter::new(file);
    let (summary, _) = run_eval(&cfg.eval.protocol, &set, &cfg.robot, &methods, |r, t| write_report_line(&mut w, r, t))?;
    w.flush().map_err(|e| Error::io(&reports_path, e))?;
    drop(w);
    let forgetting = match (summary.method("CT"), summary.method("F-CT")) {
        (Some(a), Some(b)) => Some(ForgettingGate {
            ct: a.success_mean,
            f_ct: b.success_mean,
            tolerance: 2.0,
            passed: b.success_mean >= a.success_mean - 2.0,
        }),
        _ => None,
    };
    let out = EvalOutput { summary, forgetting };
    write_file(&step.output(dir.join("summary.json")), serde_json::to_string_pretty(&out)?.as_bytes())?;
    write_file(&step.output(dir.join("summary.txt")), out.summary.to_table().as_bytes())?;
    write_file(&step.output(dir.join("eval_set.json")), serde_json::to_string(&set)?.as_bytes())?;
    Ok((step.finish()?, out))
}

#[derive(Deserialize)]
struct StoredReport {
    trajectory: crate::collect::Trajectory,
}

/// SVG of line `index` of the evaluation reports.
pub fn render(cfg: &RunConfig, index: usize, out: Option<&Path>) -> Result<Manifest> {
    let args = serde_json::json!({"index": index});
    let mut step = Step::new(cfg, "render", format!("render_{index}"), cfg.seed, args);
    let dir = cfg.layout().eval_dir();
    let set: EvalSet = read_json(&step.input(dir.join("eval_set.json"), "eval")?)?;
    let reports = step.input(dir.join("reports.jsonl"), "eval")?;
    let file = std::fs::File::open(&reports).map_err(|e| Error::io(&reports, e))?;
    let line = std::io::BufReader::new(file)
        .lines()
        .nth(index)
        .ok_or_else(|| Error::Config(format!("render: no report with index {index}")))?
        .map_err(|e| Error::io(&reports, e))?;
    let stored: StoredReport = serde_json::from_str(&line)?;
    let traj = stored.trajectory;
    let ep = set.episodes.get(index % set.episodes.len()).ok_or(Error::EmptyDataset)?;
    let world = &set.worlds[ep.env];
    let mut poses: Vec<_> = traj.transitions.iter().map(|t| t.pose).collect();
    poses.push(traj.final_pose);
    let report = RolloutReport {
        success: traj.final_distance() < cfg.eval.protocol.success_eps,
        steps: traj.len(),
        ret: traj.ret(),
        collisions: traj.collided_steps,
        collided: traj.transitions.iter().map(|t| t.collided).collect(),
        final_distance: traj.final_distance(),
        failed_at: None,
        poses,
        goal: traj.goal,
        rewards: traj.transitions.iter().map(|t| t.reward).collect(),
        actions: traj.transitions.iter().map(|t| t.action.clone()).collect(),
        conditioning: Vec::new(),
    };
    let path = out.map_or_else(|| dir.join(format!("render_{index}.svg")), Path::to_path_buf);
    render_trajectory(&report, world, &step.output(path))?;
    step.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides() {
        let cfg = RunConfig::from_json(
            r#"{"seed": 4}"#,
            &[
                ("train.lr".into(), "0.001".into()),
                ("out_dir".into(), "/tmp/x".into()),
                ("model.layers".into(), "3".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.model_config().layers, 3);
        assert!(matches!(
            RunConfig::from_json("{}", &[("train.nope".into(), "1".into())]),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::from_json(r#"{"tran": {}}"#, &[]), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_json("{}", &[("model.heads".into(), "5".into())]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_artifact_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        match collect(&cfg) {
            Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "build-prm"),
            other => panic!("{other:?}"),
        }
        match train(&cfg, false, 0, None) {
            Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "collect"),
            other => panic!("{other:?}"),
        }
    }
}
