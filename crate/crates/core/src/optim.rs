//! Clipped surrogate objective, AdamW ascent and the training loop.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Estimator, RatioMode, RunConfig, Schedule};
use crate::env::{self, Query, Scene};
use crate::policy::{self, PolicyError, PolicyParams, Trajectory, World};
use crate::rewards::{self, GroupBatch, RewardError};
use crate::par::map_indexed;
use crate::seed::{self, tag};
use crate::theorylab;
use crate::verifier::SemanticVerifier;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const BASELINE_DECAY: f64 = 0.9;
pub const RHO_WINDOW: usize = 64;
pub const RHO_MIN_GROUPS: usize = 30;
pub const OPTIM_MAGIC: &str = "mapo-optim-v1";

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {key}: {reason}")]
    Config { key: &'static str, reason: String },
    #[error("state error: {0}")]
    State(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ratios {
    Token(Vec<f64>),
    Sequence(f64),
}

fn check_behavior(old_params: &PolicyParams, trajectory: &Trajectory) -> Result<(), OptimError> {
    if trajectory.behavior != old_params.fingerprint() {
        return Err(OptimError::Input("trajectory was not sampled under the given old parameters".into()));
    }
    Ok(())
}

/// Log-ratio `log π_θ − log π_old` for every decision token, using the
/// behaviour log-probs stored in the trajectory.
fn log_ratios(params: &PolicyParams, trajectory: &Trajectory) -> Result<Vec<f64>, OptimError> {
    trajectory
        .tokens()
        .map(|(step, tok)| {
            if step.state_features.len() != params.state_dim() {
                return Err(OptimError::Input("trajectory features do not match parameter shape".into()));
            }
            Ok(policy::token_logprob(params, &step.state_features, tok, trajectory.temperature)? - tok.logp)
        })
        .collect()
}

pub fn importance_ratios(
    params: &PolicyParams,
    old_params: &PolicyParams,
    trajectory: &Trajectory,
    mode: RatioMode,
) -> Result<Ratios, OptimError> {
    if !params.same_shape(old_params) {
        return Err(OptimError::Input("parameter shapes differ".into()));
    }
    check_behavior(old_params, trajectory)?;
    let lr = log_ratios(params, trajectory)?;
    Ok(match mode {
        RatioMode::Token => Ratios::Token(lr.into_iter().map(f64::exp).collect()),
        RatioMode::Sequence => Ratios::Sequence(sequence_ratio(&lr)),
    })
}

fn sequence_ratio(log_ratios: &[f64]) -> f64 {
    (log_ratios.iter().sum::<f64>() / log_ratios.len() as f64).exp()
}

/// `min(w·A, clip(w, 1-ε, 1+ε)·A)`.
pub fn clipped_term(w: f64, a_tilde: f64, epsilon: f64) -> f64 {
    (w * a_tilde).min(w.clamp(1.0 - epsilon, 1.0 + epsilon) * a_tilde)
}

/// Value of one surrogate term and whether the gradient flows through `w`.
fn surrogate(w: f64, a: f64, epsilon: f64, clip: bool) -> (f64, bool) {
    let unclipped = w * a;
    if !clip {
        return (unclipped, true);
    }
    let clipped = w.clamp(1.0 - epsilon, 1.0 + epsilon) * a;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

/// True when `w` lies within `tol` of a clip boundary.
pub fn near_clip_kink(w: f64, epsilon: f64, tol: f64) -> bool {
    (w - (1.0 - epsilon)).abs() < tol || (w - (1.0 + epsilon)).abs() < tol
}

/// The surrogate objective with an explicit clipping switch; `reinforce`
/// evaluates the same expression without clipping.
pub fn surrogate_objective_and_gradient(
    groups: &[GroupBatch],
    params: &PolicyParams,
    old_params: &PolicyParams,
    mode: RatioMode,
    epsilon: f64,
    clip: bool,
) -> Result<(f64, PolicyParams), OptimError> {
    if groups.is_empty() {
        return Err(OptimError::Input("no groups".into()));
    }
    if !params.same_shape(old_params) {
        return Err(OptimError::Input("parameter shapes differ".into()));
    }
    let fingerprint = old_params.fingerprint();
    let mut objective = 0.0;
    let mut grad = PolicyParams::zeros_like(params);
    for group in groups {
        if group.is_empty() || group.a_tilde.len() != group.len() {
            return Err(OptimError::Input("group advantages do not match trajectories".into()));
        }
        let scale = 1.0 / (groups.len() * group.len()) as f64;
        for (traj, &a) in group.trajectories.iter().zip(&group.a_tilde) {
            if traj.behavior != fingerprint {
                return Err(OptimError::Input("trajectory was not sampled under the given old parameters".into()));
            }
            let lr = log_ratios(params, traj)?;
            let n = lr.len() as f64;
            match mode {
                RatioMode::Token => {
                    let mut sum = 0.0;
                    for ((step, tok), l) in traj.tokens().zip(&lr) {
                        let w = l.exp();
                        let (value, live) = surrogate(w, a, epsilon, clip);
                        sum += value;
                        if live {
                            policy::accumulate_token_gradient(
                                params,
                                &step.state_features,
                                tok,
                                traj.temperature,
                                scale * a * w / n,
                                &mut grad,
                            )?;
                        }
                    }
                    objective += scale * sum / n;
                }
                RatioMode::Sequence => {
                    let s = sequence_ratio(&lr);
                    let (value, live) = surrogate(s, a, epsilon, clip);
                    objective += scale * value;
                    if live {
                        for (step, tok) in traj.tokens() {
                            policy::accumulate_token_gradient(
                                params,
                                &step.state_features,
                                tok,
                                traj.temperature,
                                scale * a * s / n,
                                &mut grad,
                            )?;
                        }
                    }
                }
            }
        }
    }
    if !objective.is_finite() || !grad.is_finite() {
        return Err(OptimError::Numeric("non-finite objective or gradient".into()));
    }
    Ok((objective, grad))
}

/// Mean over groups of `(1/G) Σ_i (1/|τ_i|) Σ_I clipped_term(w_I, Ã_i, ε)`
/// and its gradient.
pub fn mapo_objective_and_gradient(
    groups: &[GroupBatch],
    params: &PolicyParams,
    old_params: &PolicyParams,
    config: &RunConfig,
) -> Result<(f64, PolicyParams), OptimError> {
    let clip = config.estimator != Estimator::Reinforce;
    surrogate_objective_and_gradient(groups, params, old_params, config.ratio_mode, config.epsilon, clip)
}

/// Linear warmup over `round(fraction · iterations)` steps, then cosine
/// decay to zero (or constant). `step` counts updates from 1.
pub fn learning_rate(config: &RunConfig, step: usize) -> f64 {
    let peak = config.learning_rate;
    let total = config.iterations.max(1);
    let warmup = (config.warmup_fraction * total as f64).round() as usize;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    match config.schedule {
        Schedule::Constant => peak,
        Schedule::Cosine => {
            let span = total.saturating_sub(warmup).max(1) as f64;
            let progress = ((step - warmup) as f64 / span).min(1.0);
            0.5 * peak * (1.0 + (PI * progress).cos())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub params: PolicyParams,
    pub old_params: PolicyParams,
    pub m: PolicyParams,
    pub v: PolicyParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: PolicyParams) -> Self {
        let zeros = PolicyParams::zeros_like(&params);
        Self { old_params: params.clone(), m: zeros.clone(), v: zeros, params, step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Scales `grad` to `max_norm` when its global norm exceeds it.
pub fn clip_global_norm(grad: &mut PolicyParams, max_norm: f64) -> (f64, bool) {
    let norm = grad.norm();
    if max_norm > 0.0 && norm > max_norm {
        grad.scale(max_norm / norm);
        (norm, true)
    } else {
        (norm, false)
    }
}

/// One AdamW ascent step. A non-finite gradient leaves the state untouched.
pub fn optimizer_step(
    state: &mut OptimizerState,
    gradient: &PolicyParams,
    config: &RunConfig,
    lr: f64,
) -> Result<StepReport, OptimError> {
    if !gradient.same_shape(&state.params) {
        return Err(OptimError::Input("gradient shape does not match parameters".into()));
    }
    if !gradient.is_finite() {
        return Err(OptimError::Numeric("non-finite gradient, update skipped".into()));
    }
    let mut g = gradient.clone();
    let (grad_norm, clipped) = clip_global_norm(&mut g, config.max_grad_norm);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let wd = config.weight_decay;
    for i in 0..g.data.len() {
        let gi = g.data[i];
        let m = ADAM_BETA1 * state.m.data[i] + (1.0 - ADAM_BETA1) * gi;
        let v = ADAM_BETA2 * state.v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
        state.m.data[i] = m;
        state.v.data[i] = v;
        let theta = &mut state.params.data[i];
        *theta += lr * ((m / bc1) / ((v / bc2).sqrt() + ADAM_EPS) - wd * *theta);
    }
    Ok(StepReport { grad_norm, clipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: usize,
    pub mean_r_out: f64,
    pub mean_r_sem: f64,
    pub accuracy: f64,
    pub mean_turns: f64,
    pub grad_norm: Option<f64>,
    pub rho_hat: Option<f64>,
    pub lr: f64,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed iterations.
    pub iteration: usize,
    pub optimizer: OptimizerState,
    pub baseline: Option<f64>,
    pub rho_window: VecDeque<Vec<f64>>,
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], OptimError> {
        if self.0.len() < n {
            return Err(OptimError::State("truncated optimizer state".into()));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64, OptimError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, OptimError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn f64s(&mut self, out: &mut [f64]) -> Result<(), OptimError> {
        for x in out.iter_mut() {
            *x = self.f64()?;
        }
        Ok(())
    }
}

impl TrainState {
    pub fn new(params: PolicyParams) -> Self {
        Self { iteration: 0, optimizer: OptimizerState::new(params), baseline: None, rho_window: VecDeque::new() }
    }

    /// Optimizer-side state (moments, counters, baseline, ρ window). The
    /// parameters themselves are stored as a policy checkpoint.
    pub fn optimizer_bytes(&self) -> Vec<u8> {
        let mut out = format!("{OPTIM_MAGIC}\n").into_bytes();
        for v in [self.iteration as u64, self.optimizer.step, self.optimizer.m.data.len() as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.baseline.is_some() as u64).to_le_bytes());
        out.extend_from_slice(&self.baseline.unwrap_or(0.0).to_le_bytes());
        put_f64s(&mut out, &self.optimizer.m.data);
        put_f64s(&mut out, &self.optimizer.v.data);
        out.extend_from_slice(&(self.rho_window.len() as u64).to_le_bytes());
        for group in &self.rho_window {
            out.extend_from_slice(&(group.len() as u64).to_le_bytes());
            put_f64s(&mut out, group);
        }
        out
    }

    pub fn from_parts(params: PolicyParams, optimizer_bytes: &[u8]) -> Result<Self, OptimError> {
        let magic = format!("{OPTIM_MAGIC}\n");
        let body = optimizer_bytes
            .strip_prefix(magic.as_bytes())
            .ok_or_else(|| OptimError::State("missing mapo-optim-v1 header".into()))?;
        let mut r = Reader(body);
        let iteration = r.u64()? as usize;
        let step = r.u64()?;
        if r.u64()? as usize != params.data.len() {
            return Err(OptimError::State("moment size does not match parameters".into()));
        }
        let has_baseline = r.u64()? != 0;
        let baseline = r.f64()?;
        let mut optimizer = OptimizerState::new(params);
        optimizer.step = step;
        r.f64s(&mut optimizer.m.data)?;
        r.f64s(&mut optimizer.v.data)?;
        let groups = r.u64()? as usize;
        let mut rho_window = VecDeque::new();
        for _ in 0..groups {
            let mut g = vec![0.0; r.u64()? as usize];
            r.f64s(&mut g)?;
            rho_window.push_back(g);
        }
        if !r.0.is_empty() {
            return Err(OptimError::State("trailing bytes in optimizer state".into()));
        }
        Ok(Self { iteration, optimizer, baseline: has_baseline.then_some(baseline), rho_window })
    }
}

/// Scene seed of query `query` at iteration `iter`.
pub fn task_seed(config: &RunConfig, iter: usize, query: usize) -> u64 {
    seed::derive(&[tag::TASK, config.seed, iter as u64, query as u64])
}

pub fn rollout_seed(config: &RunConfig, iter: usize, query: usize, member: usize) -> u64 {
    seed::derive(&[tag::ROLLOUT, config.seed, iter as u64, query as u64, member as u64])
}

pub fn iteration_tasks(world: &World, config: &RunConfig, iter: usize) -> Result<Vec<(Scene, Query)>, OptimError> {
    (0..config.batch_queries)
        .map(|q| env::sample_task(&world.vocab, task_seed(config, iter, q), world.grid_size).map_err(PolicyError::from))
        .collect::<Result<_, _>>()
        .map_err(OptimError::from)
}

/// Phase 1: G rollouts per query, each from its own derived seed. Output
/// order is (query, member) regardless of worker count.
pub fn sample_groups(
    params: &PolicyParams,
    world: &World,
    config: &RunConfig,
    verifier: &dyn SemanticVerifier,
    iter: usize,
    tasks: &[(Scene, Query)],
) -> Result<Vec<Vec<Trajectory>>, OptimError> {
    let g = config.group_size;
    let flat = map_indexed(tasks.len() * g, |k| {
        let (q, member) = (k / g, k % g);
        let (scene, query) = &tasks[q];
        let mut rng = seed::rng(&[rollout_seed(config, iter, q, member)]);
        policy::sample_trajectory(params, world, scene, query, config, verifier, &mut rng)
    });
    let mut groups: Vec<Vec<Trajectory>> = Vec::with_capacity(tasks.len());
    let mut it = flat.into_iter();
    for _ in 0..tasks.len() {
        groups.push(it.by_ref().take(g).collect::<Result<_, _>>()?);
    }
    Ok(groups)
}

/// Phase 2: rewards and advantages for every group, per estimator.
pub fn score_groups(
    groups: Vec<Vec<Trajectory>>,
    config: &RunConfig,
    baseline: &mut Option<f64>,
) -> Result<Vec<GroupBatch>, OptimError> {
    let mut scored: Vec<GroupBatch> =
        groups.into_iter().map(|g| rewards::score_group(g, config)).collect::<Result<_, _>>()?;
    let beta = config.effective_beta();
    let raw = |b: &GroupBatch, i: usize| b.r_out[i] + beta * b.r_sem[i];
    match config.estimator {
        Estimator::Mapo | Estimator::Grpo => {}
        Estimator::Reinforce => {
            for b in &mut scored {
                b.a_tilde = (0..b.len()).map(|i| raw(b, i)).collect();
            }
        }
        Estimator::PpoLite => {
            let (sum, n) = scored
                .iter()
                .flat_map(|b| (0..b.len()).map(move |i| raw(b, i)))
                .fold((0.0, 0usize), |(s, n), r| (s + r, n + 1));
            let batch_mean = sum / n as f64;
            let b0 = baseline.unwrap_or(batch_mean);
            for b in &mut scored {
                b.a_tilde = (0..b.len()).map(|i| raw(b, i) - b0).collect();
            }
            *baseline = Some(BASELINE_DECAY * b0 + (1.0 - BASELINE_DECAY) * batch_mean);
        }
    }
    Ok(scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub accuracy: f64,
    pub mean_sem: f64,
    pub mean_turns: f64,
}

/// Greedy decoding on `scenes` fresh tasks.
pub fn evaluate(
    params: &PolicyParams,
    world: &World,
    config: &RunConfig,
    verifier: &dyn SemanticVerifier,
    scenes: usize,
    seed_value: u64,
) -> Result<EvalReport, OptimError> {
    if scenes == 0 {
        return Err(OptimError::Input("evaluation needs at least one scene".into()));
    }
    let results = map_indexed(scenes, |k| -> Result<Trajectory, OptimError> {
        let (scene, query) = env::sample_task(&world.vocab, seed::derive(&[tag::EVAL, seed_value, k as u64]), world.grid_size)
            .map_err(PolicyError::from)?;
        Ok(policy::greedy_trajectory(params, world, &scene, &query, config, verifier)?)
    });
    let trajs: Vec<Trajectory> = results.into_iter().collect::<Result<_, _>>()?;
    let n = scenes as f64;
    Ok(EvalReport {
        scenes,
        accuracy: trajs.iter().map(|t| t.r_out as f64).sum::<f64>() / n,
        mean_sem: trajs.iter().map(|t| t.r_sem).sum::<f64>() / n,
        mean_turns: trajs.iter().map(|t| t.tool_call_count() as f64).sum::<f64>() / n,
    })
}

pub struct Trainer<'a> {
    pub config: RunConfig,
    pub world: World,
    pub verifier: &'a dyn SemanticVerifier,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, verifier: &'a dyn SemanticVerifier) -> Result<Self, OptimError> {
        config.validate().map_err(|(key, reason)| OptimError::Config { key, reason })?;
        let world = World::from_config(&config)?;
        let state = TrainState::new(world.initial_params());
        Ok(Self { config, world, verifier, state })
    }

    pub fn with_state(config: RunConfig, verifier: &'a dyn SemanticVerifier, state: TrainState) -> Result<Self, OptimError> {
        let mut t = Self::new(config, verifier)?;
        t.world.check_params(&state.optimizer.params)?;
        t.state = state;
        Ok(t)
    }

    pub fn params(&self) -> &PolicyParams {
        &self.state.optimizer.params
    }

    pub fn is_finished(&self) -> bool {
        self.state.iteration >= self.config.iterations
    }

    /// Sampling, scoring and update for the next iteration.
    pub fn run_iteration(&mut self) -> Result<IterationMetrics, OptimError> {
        let iter = self.state.iteration;
        let config = &self.config;
        let tasks = iteration_tasks(&self.world, config, iter)?;
        let behavior = self.state.optimizer.params.clone();
        self.state.optimizer.old_params = behavior.clone();

        let greedy = map_indexed(tasks.len(), |q| {
            let (scene, query) = &tasks[q];
            policy::greedy_trajectory(&behavior, &self.world, scene, query, config, self.verifier)
        });
        let mut correct = 0.0;
        for t in greedy {
            correct += t?.r_out as f64;
        }

        let groups = sample_groups(&behavior, &self.world, config, self.verifier, iter, &tasks)?;
        let scored = score_groups(groups, config, &mut self.state.baseline)?;

        let all: Vec<&Trajectory> = scored.iter().flat_map(|b| &b.trajectories).collect();
        let n = all.len() as f64;
        let mean_r_out = all.iter().map(|t| t.r_out as f64).sum::<f64>() / n;
        let mean_r_sem = all.iter().map(|t| t.r_sem).sum::<f64>() / n;
        let mean_turns = all.iter().map(|t| t.tool_call_count() as f64).sum::<f64>() / n;
        let incidents: usize = all.iter().map(|t| t.verifier_incidents).sum();
        if incidents > 0 {
            log::warn!("iteration {iter}: {incidents} verifier failures scored as 0");
        }

        for b in &scored {
            self.state.rho_window.push_back(b.r_out.clone());
            if self.state.rho_window.len() > RHO_WINDOW {
                self.state.rho_window.pop_front();
            }
        }
        let rho_hat = if self.state.rho_window.len() >= RHO_MIN_GROUPS {
            let window: Vec<Vec<f64>> = self.state.rho_window.iter().cloned().collect();
            let est = theorylab::estimate_rho(&window);
            est.valid.then_some(est.rho)
        } else {
            None
        };

        let lr = learning_rate(config, iter + 1);
        let mut grad_norm = None;
        for epoch in 0..config.update_epochs {
            let (_, grad) =
                mapo_objective_and_gradient(&scored, &self.state.optimizer.params, &behavior, config)?;
            match optimizer_step(&mut self.state.optimizer, &grad, config, lr) {
                Ok(report) => {
                    if epoch == 0 {
                        grad_norm = Some(report.grad_norm);
                    }
                }
                Err(OptimError::Numeric(msg)) => {
                    log::error!("iteration {iter}: {msg}");
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        self.state.iteration += 1;
        Ok(IterationMetrics {
            iter,
            mean_r_out,
            mean_r_sem,
            accuracy: correct / tasks.len() as f64,
            mean_turns,
            grad_norm,
            rho_hat,
            lr,
        })
    }

    pub fn train(&mut self) -> Result<Vec<IterationMetrics>, OptimError> {
        let mut out = Vec::new();
        while !self.is_finished() {
            out.push(self.run_iteration()?);
        }
        Ok(out)
    }
}
