mod common;

use common::{small_dataset, small_family, tiny_config};
use ctnav::collect::{
    collect_planner_trajectories, goal_delta, quantize, CollectConfig, Dataset, EpisodeSpec, RewardSpec, Sensor,
};
use ctnav::ct::{
    rollout_conditioned, train_ct, train_value, ConditioningRule, ControlTransformer, CtConfig, TrainConfig,
    ValueConfig, ValueNet,
};
use ctnav::eval::{build_eval_set, run_eval, EvalProtocol, GoToGoal, Method};
use ctnav::geometry::{Pose2, Rect, Vec2};
use ctnav::planner::PrmConfig;
use ctnav::robot::Robot;
use ctnav::world::{World, WorldFamily};

fn quick(updates: usize) -> TrainConfig {
    TrainConfig {
        updates,
        batch_size: 8,
        lr: 1e-3,
        weight_decay: 0.0,
        warmup: 20,
        grad_clip: Some(1.0),
        seed: 0,
    }
}

#[test]
fn conditioned_rollout_follows_rtg_recursion() {
    let robot = Robot::diff_drive();
    let data = small_dataset(&robot, 8, 3);
    let mut model = ControlTransformer::new(tiny_config(&robot), 0).unwrap();
    train_ct(&mut model, &data, &quick(40), None).unwrap();
    let mut value = ValueNet::new(
        ValueConfig {
            hidden: 16,
            ..ValueConfig::for_model(&model.config)
        },
        0,
    );
    train_value(&mut value, &data, &ConditioningRule::default(), &quick(40)).unwrap();

    let world = small_family().sample(0).unwrap();
    let sensor = Sensor::default();
    let (start, goal) = (Pose2::new(0.5, 0.5, 0.3), Vec2::new(2.5, 2.5));
    let rule = ConditioningRule {
        k: 1.5,
        ..ConditioningRule::default()
    };
    let spec = EpisodeSpec {
        world: &world,
        robot: &robot,
        sensor: &sensor,
        reward: RewardSpec::default(),
        start,
        goal,
        horizon: 40,
        success_eps: 0.3,
        detector: None,
    };
    let (rep, ro) = rollout_conditioned(&model, Some(&value), &rule, &spec).unwrap();

    let obs = sensor.observe(&world, start, goal);
    let v0 = value
        .predict(&obs.cells, &robot.proprio(start, goal), goal_delta(goal, start))
        .unwrap();
    assert_eq!(rep.conditioning[0], quantize(1.5 * v0));
    assert_eq!(rep.conditioning.len(), rep.steps);
    for t in 1..rep.steps {
        assert_eq!(rep.conditioning[t], rep.conditioning[t - 1] - rep.rewards[t - 1]);
    }
    assert_eq!(rep.ret, rep.rewards.iter().sum::<f64>());
    assert_eq!(rep.poses.len(), rep.steps + 1);
    assert_eq!(ro.transitions.len(), rep.steps);
}

#[test]
fn bc_rollout_ignores_value() {
    let robot = Robot::diff_drive();
    let cfg = CtConfig {
        use_returns: false,
        ..tiny_config(&robot)
    };
    let model = ControlTransformer::new(cfg, 0).unwrap();
    let value = ValueNet::new(ValueConfig::for_model(&model.config), 0);
    let world = small_family().sample(0).unwrap();
    let sensor = Sensor::default();
    let spec = EpisodeSpec {
        world: &world,
        robot: &robot,
        sensor: &sensor,
        reward: RewardSpec::default(),
        start: Pose2::new(0.5, 0.5, 0.0),
        goal: Vec2::new(2.5, 0.5),
        horizon: 10,
        success_eps: 0.3,
        detector: None,
    };
    let (rep, _) = rollout_conditioned(&model, Some(&value), &ConditioningRule::default(), &spec).unwrap();
    assert!(rep.conditioning.iter().all(|&r| r == 0.0));
}

#[test]
fn empty_world_end_to_end() {
    let robot = Robot::point();
    let family = WorldFamily::Fixed {
        world: World::empty(Rect::new(0.0, 0.0, 3.0, 3.0)),
    };
    let collect = CollectConfig {
        trajectories: 30,
        reset_interval: 10,
        prm: PrmConfig {
            n_samples: 40,
            ..PrmConfig::default()
        },
        seed: 1,
        ..CollectConfig::default()
    };
    let data = Dataset::new(collect_planner_trajectories(&collect, &family, &robot).unwrap());
    assert_eq!(data.len(), 30);
    assert!(data.trajectories.iter().all(|t| t.collided_steps == 0));

    let mut model = ControlTransformer::new(tiny_config(&robot), 2).unwrap();
    let (curve, _) = train_ct(&mut model, &data, &quick(150), None).unwrap();
    assert!(curve.last().unwrap().loss < curve[0].loss);
    let mut value = ValueNet::new(
        ValueConfig {
            hidden: 16,
            ..ValueConfig::for_model(&model.config)
        },
        0,
    );
    train_value(&mut value, &data, &ConditioningRule::default(), &quick(100)).unwrap();

    let protocol = EvalProtocol {
        n_envs: 2,
        goals_per_env: 4,
        prm: PrmConfig {
            n_samples: 40,
            ..PrmConfig::default()
        },
        ..EvalProtocol::default()
    };
    let set = build_eval_set(&protocol, &family, &robot).unwrap();
    let (m, v) = (&model, &value);
    let methods = vec![
        Method {
            name: "CT".into(),
            model_seed: 0,
            make: Box::new(move || Ok(Box::new(ctnav::ct::CtPolicy::new(m, Some((v, 1.0)))) as Box<_>)),
        },
        Method {
            name: "direct".into(),
            model_seed: 0,
            make: Box::new(move || Ok(Box::new(GoToGoal(robot)) as Box<_>)),
        },
    ];
    let mut lines = 0;
    let (summary, records) = run_eval(&protocol, &set, &robot, &methods, |_, _| {
        lines += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(records.len(), 16);
    assert_eq!(lines, 16);
    assert_eq!(summary.method("direct").unwrap().success_mean, 100.0);
    let ct = summary.method("CT").unwrap();
    assert!((0.0..=100.0).contains(&ct.success_mean));
    assert_eq!(ct.episodes, 8);
}
