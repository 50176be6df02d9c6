#![allow(dead_code)]

use ctnav::collect::{collect_planner_trajectories, CollectConfig, Dataset};
use ctnav::ct::{ct_loss_grad, ct_loss_probe, init_ct_params, Batch, CtConfig};
use ctnav::geometry::Rect;
use ctnav::nn::ParamStore;
use ctnav::planner::PrmConfig;
use ctnav::robot::Robot;
use ctnav::world::{World, WorldFamily};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn small_family() -> WorldFamily {
    WorldFamily::Fixed {
        world: World::new(
            Rect::new(0.0, 0.0, 3.0, 3.0),
            vec![Rect::new(1.2, 1.2, 1.8, 1.6), Rect::new(0.3, 2.1, 0.7, 2.5)],
            0,
        )
        .unwrap(),
    }
}

pub fn small_dataset(robot: &Robot, n: usize, seed: u64) -> Dataset {
    let cfg = CollectConfig {
        trajectories: n,
        reset_interval: 5,
        prm: PrmConfig {
            n_samples: 60,
            ..PrmConfig::default()
        },
        batch: 4,
        seed,
        ..CollectConfig::default()
    };
    Dataset::new(collect_planner_trajectories(&cfg, &small_family(), robot).unwrap())
}

pub fn tiny_config(robot: &Robot) -> CtConfig {
    CtConfig {
        layers: 2,
        heads: 2,
        embed_dim: 16,
        context_k: 3,
        eval_context_k: 3,
        ..CtConfig::desk(robot)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_f64: f64,
    pub max_rel_f32: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// `|a - b| / max(|a|, |b|, 1)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central differences (h = 1e-5, float64) against reverse-mode gradients of
/// the full transformer loss, with dropout active under a fixed mask. Up to
/// `per_tensor` coordinates are probed in every parameter tensor; probes whose
/// perturbation flips a ReLU input are skipped.
pub fn full_loss_grad_check(per_tensor: usize) -> GradCheck {
    let robot = Robot::diff_drive();
    let cfg = tiny_config(&robot);
    let data = small_dataset(&robot, 2, 3);
    let mut batch = Batch::new(2, 3, cfg.proprio_dim, cfg.action_dim);
    batch.set_window(0, &data.trajectories[0], 0, 2).unwrap();
    // second row padded at the end
    batch.set_window(1, &data.trajectories[1], 4, 5).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut p64: ParamStore<f64> = init_ct_params(&cfg, 5);
    for i in 0..p64.len() {
        for v in &mut p64.tensor_mut(i).data {
            *v += noise.sample(&mut rng);
        }
    }
    let drop = Some(77);
    let mut analytic = p64.clone();
    ct_loss_grad(&cfg, &mut analytic, &batch, drop).unwrap();
    let mut p32: ParamStore<f32> = p64.cast();
    ct_loss_grad(&cfg, &mut p32, &batch, drop).unwrap();

    let (_, base_pattern) = ct_loss_probe(&cfg, &p64, &batch, drop).unwrap();
    let h = 1e-5;
    let mut out = GradCheck {
        max_rel_f64: 0.0,
        max_rel_f32: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for i in 0..p64.len() {
        let n = p64.tensor(i).len();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for c in coords {
            let mut probe = p64.clone();
            let x0 = probe.tensor(i).data[c];
            probe.tensor_mut(i).data[c] = x0 + h;
            let (lp, pp) = ct_loss_probe(&cfg, &probe, &batch, drop).unwrap();
            probe.tensor_mut(i).data[c] = x0 - h;
            let (lm, pm) = ct_loss_probe(&cfg, &probe, &batch, drop).unwrap();
            if pp != base_pattern || pm != base_pattern {
                out.skipped_kinks += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let g64 = analytic.grad(i).unwrap()[c];
            let g32 = f64::from(p32.grad(i).unwrap()[c]);
            out.max_rel_f64 = out.max_rel_f64.max(rel_err(fd, g64));
            out.max_rel_f32 = out.max_rel_f32.max(rel_err(fd, g32));
            out.checked += 1;
        }
    }
    out
}
