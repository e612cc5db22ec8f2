//! Central finite-difference oracle for the analytic gradients.

use mapo::config::{RatioMode, RunConfig};
use mapo::optim::{self, Ratios};
use mapo::policy::{self, PolicyParams, World};
use mapo::rewards::GroupBatch;
use mapo::seed;
use rand::Rng;
use rand_distr::StandardNormal;

pub const POLICY_STEP: f64 = 1e-5;
pub const OBJECTIVE_STEP: f64 = 1e-5;

pub struct Check {
    pub rel_error: f64,
    pub directions: usize,
    pub excluded: usize,
}

fn random_params(world: &World, seed_value: u64, scale: f64) -> PolicyParams {
    let mut rng = seed::rng(&[0xfd, seed_value]);
    let mut p = world.initial_params();
    p.data.iter_mut().for_each(|x| *x = scale * (rng.random::<f64>() - 0.5));
    p
}

/// Random Gaussian directions plus unit vectors on coordinates where the
/// analytic gradient is non-zero and on coordinates where it is zero.
fn directions(grad: &PolicyParams, seed_value: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(&[0xd1, seed_value]);
    let n = grad.data.len();
    let mut out: Vec<Vec<f64>> = (0..6)
        .map(|_| {
            let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let nonzero: Vec<usize> = (0..n).filter(|&i| grad.data[i] != 0.0).collect();
    for k in 0..8 {
        let i = if k < 6 && !nonzero.is_empty() { nonzero[rng.random_range(0..nonzero.len())] } else { rng.random_range(0..n) };
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        out.push(e);
    }
    out
}

fn shifted(p: &PolicyParams, d: &[f64], h: f64) -> PolicyParams {
    let mut q = p.clone();
    q.data.iter_mut().zip(d).for_each(|(x, di)| *x += h * di);
    q
}

fn relative(fd: &[f64], an: &[f64]) -> f64 {
    let diff = fd.iter().zip(an).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = an.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale < 1e-12 { diff } else { diff / scale }
}

/// ∇ log π(τ) against central differences of log π(τ) on one random
/// trajectory.
pub fn policy_gradient(instance: u64) -> Check {
    let config = RunConfig { temperature: 0.5 + 0.25 * (instance % 5) as f64, ..RunConfig::default() };
    let world = World::from_config(&config).unwrap();
    let params = random_params(&world, instance, 2.0);
    let (scene, query) = mapo::env::sample_task(&world.vocab, instance, world.grid_size).unwrap();
    let traj = policy::sample_trajectory(&params, &world, &scene, &query, &config, &world.space, &mut seed::rng(&[instance]))
        .unwrap();
    let grad = policy::grad_logprob(&params, &traj).unwrap();
    let (mut fd, mut an) = (Vec::new(), Vec::new());
    let dirs = directions(&grad, instance);
    for d in &dirs {
        let h = POLICY_STEP;
        let plus = policy::trajectory_logprob(&shifted(&params, d, h), &traj).unwrap();
        let minus = policy::trajectory_logprob(&shifted(&params, d, -h), &traj).unwrap();
        fd.push((plus - minus) / (2.0 * h));
        an.push(grad.data.iter().zip(d).map(|(g, x)| g * x).sum());
    }
    Check { rel_error: relative(&fd, &an), directions: dirs.len(), excluded: 0 }
}

/// Which surrogate branch each term sits on (`true` = through the ratio).
fn branches(groups: &[GroupBatch], params: &PolicyParams, old: &PolicyParams, config: &RunConfig) -> Vec<bool> {
    let mut out = Vec::new();
    for g in groups {
        for (t, &a) in g.trajectories.iter().zip(&g.a_tilde) {
            let live = |w: f64| w * a <= optim::clipped_term(w, a, config.epsilon);
            match optim::importance_ratios(params, old, t, config.ratio_mode).unwrap() {
                Ratios::Token(ws) => out.extend(ws.into_iter().map(live)),
                Ratios::Sequence(s) => out.push(live(s)),
            }
        }
    }
    out
}

/// Full surrogate-objective gradient at θ ≠ θ_old against central
/// differences, skipping directions whose stencil straddles a clip kink.
pub fn objective_gradient(instance: u64, mode: RatioMode) -> Check {
    let config = RunConfig { group_size: 4, batch_queries: 2, ratio_mode: mode, ..RunConfig::default() };
    let world = World::from_config(&config).unwrap();
    let old = random_params(&world, instance, 2.0);
    let tasks = optim::iteration_tasks(&world, &config, instance as usize).unwrap();
    let groups = optim::sample_groups(&old, &world, &config, &world.space, instance as usize, &tasks).unwrap();
    let groups = optim::score_groups(groups, &config, &mut None).unwrap();
    let mut rng = seed::rng(&[0x0b, instance]);
    let mut params = old.clone();
    params.data.iter_mut().for_each(|x| *x += 0.15 * rng.sample::<f64, _>(StandardNormal));

    let (_, grad) = optim::mapo_objective_and_gradient(&groups, &params, &old, &config).unwrap();
    let (mut fd, mut an) = (Vec::new(), Vec::new());
    let dirs = directions(&grad, instance);
    let mut excluded = 0;
    let h = OBJECTIVE_STEP;
    for d in &dirs {
        let (p_plus, p_minus) = (shifted(&params, d, h), shifted(&params, d, -h));
        let centre = branches(&groups, &params, &old, &config);
        if branches(&groups, &p_plus, &old, &config) != centre || branches(&groups, &p_minus, &old, &config) != centre {
            excluded += 1;
            continue;
        }
        let plus = optim::mapo_objective_and_gradient(&groups, &p_plus, &old, &config).unwrap().0;
        let minus = optim::mapo_objective_and_gradient(&groups, &p_minus, &old, &config).unwrap().0;
        fd.push((plus - minus) / (2.0 * h));
        an.push(grad.data.iter().zip(d).map(|(g, x)| g * x).sum());
    }
    Check { rel_error: relative(&fd, &an), directions: dirs.len(), excluded }
}
