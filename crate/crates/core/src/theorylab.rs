//! Monte-Carlo checks of the group-baseline variance identity, the
//! dense-versus-sparse reward variance ordering and the ascent rate bound.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::env::{self, Query, Scene};
use crate::par::map_indexed;
use crate::policy::{self, Head, PolicyError, PolicyParams, World};
use crate::seed::{self, tag};
use crate::verifier::SemanticVerifier;

/// Trials per seeded work unit. Results do not depend on worker count.
pub const CHUNK: usize = 10_000;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, TheoryError> {
    Err(TheoryError::Config(msg.into()))
}

/// `r_i = σ(√ρ·c + √(1-ρ)·e_i)` with a shared factor `c`.
pub fn sample_equicorrelated<R: Rng + ?Sized>(rho: f64, sigma: f64, g: usize, rng: &mut R) -> Result<Vec<f64>, TheoryError> {
    if !(0.0..=1.0).contains(&rho) {
        return config_err(format!("rho must lie in [0, 1], got {rho}"));
    }
    if !(sigma > 0.0) {
        return config_err(format!("sigma must be positive, got {sigma}"));
    }
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    let c: f64 = rng.sample(StandardNormal);
    Ok((0..g)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            sigma * (a * c + b * e)
        })
        .collect())
}

/// Running sums for a mean and population variance.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn merge(mut self, o: Moments) -> Self {
        self.n += o.n;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
        self
    }

    fn mean(&self) -> f64 {
        self.sum / self.n
    }

    fn variance(&self) -> f64 {
        (self.sum_sq / self.n - self.mean().powi(2)).max(0.0)
    }
}

fn chunked<T: Send>(trials: usize, f: impl Fn(usize, usize) -> T + Sync + Send) -> Vec<T> {
    let chunks = trials.div_ceil(CHUNK);
    map_indexed(chunks, |c| f(c, CHUNK.min(trials - c * CHUNK)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub rho: f64,
    pub sigma2: f64,
    pub g: usize,
    pub trials: usize,
    pub empirical_var: f64,
    pub analytic_var: f64,
    pub relative_error: f64,
}

pub fn prop1_analytic(rho: f64, sigma2: f64, g: usize) -> f64 {
    (g as f64 - 1.0) / g as f64 * (1.0 - rho) * sigma2
}

/// Empirical variance of the group-centred advantage `r_0 - mean(r)`.
pub fn prop1_experiment(rho_grid: &[f64], sigma2: f64, g: usize, trials: usize, seed_value: u64) -> Result<Vec<VarianceRow>, TheoryError> {
    if g < 2 {
        return config_err("group size must be at least 2");
    }
    if trials < 2 {
        return config_err("need at least 2 trials");
    }
    let sigma = sigma2.sqrt();
    rho_grid
        .iter()
        .enumerate()
        .map(|(k, &rho)| {
            let parts = chunked(trials, |c, n| -> Result<Moments, TheoryError> {
                let mut rng = seed::rng(&[tag::THEORY, 1, seed_value, k as u64, c as u64]);
                let mut m = Moments::default();
                for _ in 0..n {
                    let r = sample_equicorrelated(rho, sigma, g, &mut rng)?;
                    let mean = r.iter().sum::<f64>() / g as f64;
                    m.push(r[0] - mean);
                }
                Ok(m)
            });
            let m = parts.into_iter().try_fold(Moments::default(), |acc, p| p.map(|p| acc.merge(p)))?;
            let empirical_var = m.variance();
            let analytic_var = prop1_analytic(rho, sigma2, g);
            let relative_error =
                if analytic_var > 0.0 { (empirical_var - analytic_var).abs() / analytic_var } else { empirical_var };
            Ok(VarianceRow { rho, sigma2, g, trials, empirical_var, analytic_var, relative_error })
        })
        .collect()
}

/// Three-trajectory toy world: a fixed softmax over trajectories, with
/// success probability `p + offsets[k]` for trajectory `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    pub logits: [f64; 3],
    pub offsets: [f64; 3],
    /// Subtract the constant baseline `E_π[p(τ)]` from both rewards.
    pub centred: bool,
}

impl Default for ToyPolicy {
    fn default() -> Self {
        Self { logits: [0.5, 0.0, -0.5], offsets: [-0.1, 0.0, 0.1], centred: true }
    }
}

impl ToyPolicy {
    /// Uncentred estimator with `p(τ) ≡ p`; its trace ratio is `p/(p²+σ²)`.
    pub fn raw() -> Self {
        Self { offsets: [0.0; 3], centred: false, ..Self::default() }
    }

    pub fn probabilities(&self) -> [f64; 3] {
        let m = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = self.logits.map(|l| (l - m).exp());
        let z: f64 = e.iter().sum();
        e.map(|x| x / z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRow {
    pub p: f64,
    pub sigma_out2: f64,
    pub sigma_sem2: f64,
    pub trials: usize,
    pub var_g_out: f64,
    pub var_g_sem: f64,
    pub ratio: f64,
}

/// Trace variance of `ĝ = ∇log π(τ)·(r − b)` for a Bernoulli outcome
/// reward and a dense reward `p(τ) + N(0, σ_sem²)`.
pub fn prop2_experiment(p_grid: &[f64], sigma_sem: f64, trials: usize, toy: &ToyPolicy, seed_value: u64) -> Result<Vec<SignalRow>, TheoryError> {
    if trials < 2 {
        return config_err("need at least 2 trials");
    }
    let pi = toy.probabilities();
    p_grid
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            if !(sigma_sem * sigma_sem < p * (1.0 - p)) {
                return config_err(format!("sigma_sem^2 must be below p(1-p) for p = {p}"));
            }
            let pt = toy.offsets.map(|o| p + o);
            if pt.iter().any(|q| !(0.0..=1.0).contains(q)) {
                return config_err(format!("trajectory success probabilities leave [0, 1] for p = {p}"));
            }
            let b = if toy.centred { pi.iter().zip(&pt).map(|(a, q)| a * q).sum() } else { 0.0 };
            let parts = chunked(trials, |c, n| {
                let mut rng = seed::rng(&[tag::THEORY, 2, seed_value, k as u64, c as u64]);
                let mut out = [Moments::default(); 3];
                let mut sem = [Moments::default(); 3];
                for _ in 0..n {
                    let u: f64 = rng.random();
                    let tau = if u < pi[0] { 0 } else if u < pi[0] + pi[1] { 1 } else { 2 };
                    let r_out = if rng.random::<f64>() < pt[tau] { 1.0 } else { 0.0 };
                    let noise: f64 = rng.sample(StandardNormal);
                    let r_sem = pt[tau] + sigma_sem * noise;
                    for j in 0..3 {
                        let score = (j == tau) as u8 as f64 - pi[j];
                        out[j].push(score * (r_out - b));
                        sem[j].push(score * (r_sem - b));
                    }
                }
                (out, sem)
            });
            let mut out = [Moments::default(); 3];
            let mut sem = [Moments::default(); 3];
            for (o, s) in parts {
                for j in 0..3 {
                    out[j] = out[j].merge(o[j]);
                    sem[j] = sem[j].merge(s[j]);
                }
            }
            let var_g_out: f64 = out.iter().map(Moments::variance).sum();
            let var_g_sem: f64 = sem.iter().map(Moments::variance).sum();
            Ok(SignalRow {
                p,
                sigma_out2: p * (1.0 - p),
                sigma_sem2: sigma_sem * sigma_sem,
                trials,
                var_g_out,
                var_g_sem,
                ratio: var_g_out / var_g_sem,
            })
        })
        .collect()
}

struct InSituSample {
    p: f64,
    grad: PolicyParams,
    r_out: f64,
    r_sem: f64,
}

/// The same comparison on NeedleGrid: trajectories come from a frozen
/// policy on one scene and `p(τ)` is the answer head's probability of the
/// correct answer at the final state.
#[allow(clippy::too_many_arguments)]
pub fn prop2_in_situ(
    params: &PolicyParams,
    world: &World,
    config: &RunConfig,
    verifier: &dyn SemanticVerifier,
    task: &(Scene, Query),
    sigma_sem: f64,
    trials: usize,
    seed_value: u64,
) -> Result<SignalRow, TheoryError> {
    if trials < 2 {
        return config_err("need at least 2 trials");
    }
    let (scene, query) = task;
    let samples = map_indexed(trials, |i| -> Result<InSituSample, TheoryError> {
        let mut rng = seed::rng(&[tag::THEORY, 3, seed_value, i as u64]);
        let traj = policy::sample_trajectory(params, world, scene, query, config, verifier, &mut rng)?;
        let last = traj.steps.last().expect("trajectory ends with an answer step");
        let probs = policy::action_distribution(params, &last.state_features, Head::Answer, config.temperature)?;
        let p = probs[query.ground_truth];
        let r_out = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
        let noise: f64 = rng.sample(StandardNormal);
        Ok(InSituSample { p, grad: policy::grad_logprob(params, &traj)?, r_out, r_sem: p + sigma_sem * noise })
    });
    let samples: Vec<_> = samples.into_iter().collect::<Result<_, _>>()?;
    let n = samples.len() as f64;
    let b = samples.iter().map(|s| s.p).sum::<f64>() / n;
    let trace_var = |pick: fn(&InSituSample) -> f64| {
        let dim = params.data.len();
        let mut moments = vec![Moments::default(); dim];
        for s in &samples {
            let r = pick(s) - b;
            for (m, g) in moments.iter_mut().zip(&s.grad.data) {
                m.push(g * r);
            }
        }
        moments.iter().map(Moments::variance).sum::<f64>()
    };
    let var_g_out = trace_var(|s| s.r_out);
    let var_g_sem = trace_var(|s| s.r_sem);
    Ok(SignalRow {
        p: b,
        sigma_out2: b * (1.0 - b),
        sigma_sem2: sigma_sem * sigma_sem,
        trials,
        var_g_out,
        var_g_sem,
        ratio: var_g_out / var_g_sem,
    })
}

/// A single NeedleGrid task for the in-situ comparison.
pub fn in_situ_task(world: &World, seed_value: u64) -> Result<(Scene, Query), TheoryError> {
    Ok(env::sample_task(&world.vocab, seed_value, world.grid_size).map_err(PolicyError::from)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub l: f64,
    pub delta: f64,
    pub sigma2: f64,
    pub t: usize,
    pub min_grad_norm2: f64,
    pub bound: f64,
    pub satisfied: bool,
}

pub const CONVERGENCE_DIM: usize = 4;
pub const CONVERGENCE_REPS: usize = 100;

pub fn convergence_bound(l: f64, delta: f64, sigma2: f64, t: usize) -> f64 {
    (2.0 * l * delta + sigma2) / (t as f64).sqrt()
}

/// Noisy gradient ascent with `η = 1/(L√T)` on `J(θ) = J* − (L/2)‖θ‖²`
/// started at gap `Δ`; records `E[min_t ‖∇J(θ_t)‖²]` over repetitions.
pub fn convergence_experiment(
    l: f64,
    delta: f64,
    sigma_grid: &[f64],
    t_grid: &[usize],
    reps: usize,
    seed_value: u64,
) -> Result<Vec<ConvergenceRow>, TheoryError> {
    if !(l > 0.0 && delta > 0.0) {
        return config_err("L and Delta must be positive");
    }
    if reps == 0 || t_grid.contains(&0) {
        return config_err("repetitions and horizons must be positive");
    }
    if sigma_grid.iter().any(|s| !(*s >= 0.0)) {
        return config_err("noise variances must be non-negative");
    }
    let mut rows = Vec::new();
    for (si, &sigma2) in sigma_grid.iter().enumerate() {
        for (ti, &t) in t_grid.iter().enumerate() {
            let eta = 1.0 / (l * (t as f64).sqrt());
            let noise_sd = (sigma2 / CONVERGENCE_DIM as f64).sqrt();
            let mins = map_indexed(reps, |r| {
                let mut rng = seed::rng(&[tag::THEORY, 4, seed_value, si as u64, ti as u64, r as u64]);
                let mut theta: [f64; CONVERGENCE_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
                let norm = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
                let radius = (2.0 * delta / l).sqrt();
                theta.iter_mut().for_each(|x| *x *= radius / norm);
                let mut best = f64::INFINITY;
                for _ in 0..t {
                    let grad = theta.map(|x| -l * x);
                    best = best.min(grad.iter().map(|g| g * g).sum());
                    for (x, g) in theta.iter_mut().zip(grad) {
                        let n: f64 = rng.sample(StandardNormal);
                        *x += eta * (g + noise_sd * n);
                    }
                }
                best
            });
            let min_grad_norm2 = mins.iter().sum::<f64>() / reps as f64;
            let bound = convergence_bound(l, delta, sigma2, t);
            rows.push(ConvergenceRow { l, delta, sigma2, t, min_grad_norm2, bound, satisfied: min_grad_norm2 <= bound });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoEstimate {
    pub rho: f64,
    pub groups: usize,
    pub valid: bool,
}

pub const RHO_MIN_GROUPS: usize = 30;

/// Pooled intraclass correlation: within-group pairs of deviations from
/// the grand mean, over the pooled variance.
pub fn estimate_rho(groups: &[Vec<f64>]) -> RhoEstimate {
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let invalid = RhoEstimate { rho: 0.0, groups: groups.len(), valid: false };
    if groups.len() < RHO_MIN_GROUPS || all.is_empty() || groups.iter().any(|g| g.len() < 2) {
        return invalid;
    }
    let mu = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / all.len() as f64;
    if var < 1e-12 {
        return invalid;
    }
    let (mut cross, mut pairs) = (0.0, 0.0);
    for g in groups {
        let s: f64 = g.iter().map(|x| x - mu).sum();
        let sq: f64 = g.iter().map(|x| (x - mu).powi(2)).sum();
        cross += s * s - sq;
        pairs += (g.len() * (g.len() - 1)) as f64;
    }
    RhoEstimate { rho: cross / pairs / var, groups: groups.len(), valid: true }
}
