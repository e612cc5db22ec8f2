//! Linear-softmax agent over factorised decision tokens.
//!
//! Each turn the agent emits either `(mode=ZOOM, cell, label)` or
//! `(mode=ANSWER, answer)`. Every head is a weight matrix mapping the state
//! features to logits; probabilities are `softmax(logits / temperature)`, so
//! log-probability gradients are available in closed form.

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::config::RunConfig;
use crate::env::{self, EnvError, Observation, ObservationKind, Query, Scene, Vocabulary};
use crate::protocol::ToolCall;
use crate::rewards;
use crate::seed;
use crate::verifier::{EmbeddingSpace, SemanticVerifier, VerifierError};

pub const MODE_ZOOM: usize = 0;
pub const MODE_ANSWER: usize = 1;
pub const CHECKPOINT_MAGIC: &str = "mapo-policy-v1";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Mode,
    Cell,
    Label,
    Answer,
}

impl Head {
    pub const ALL: [Head; 4] = [Head::Mode, Head::Cell, Head::Label, Head::Answer];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Mode => "mode",
            Head::Cell => "cell",
            Head::Label => "label",
            Head::Answer => "answer",
        })
    }
}

/// Weights of all four heads in one row-major buffer.
///
/// Also used as the gradient and optimizer-moment container, which keeps the
/// optimizer a flat loop over `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    arities: [usize; 4],
    state_dim: usize,
    pub data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(arities: [usize; 4], state_dim: usize) -> Self {
        let len = arities.iter().sum::<usize>() * state_dim;
        Self { arities, state_dim, data: vec![0.0; len] }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.arities, other.state_dim)
    }

    pub fn arities(&self) -> [usize; 4] {
        self.arities
    }

    pub fn arity(&self, head: Head) -> usize {
        self.arities[head.index()]
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn offset(&self, head: Head) -> usize {
        self.arities[..head.index()].iter().sum::<usize>() * self.state_dim
    }

    pub fn head(&self, head: Head) -> &[f64] {
        let o = self.offset(head);
        &self.data[o..o + self.arity(head) * self.state_dim]
    }

    pub fn head_mut(&mut self, head: Head) -> &mut [f64] {
        let o = self.offset(head);
        let len = self.arity(head) * self.state_dim;
        &mut self.data[o..o + len]
    }

    pub fn row_mut(&mut self, head: Head, row: usize) -> &mut [f64] {
        let d = self.state_dim;
        &mut self.head_mut(head)[row * d..(row + 1) * d]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.arities == other.arities && self.state_dim == other.state_dim
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += alpha * b);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|a| *a *= alpha);
    }

    /// Identity of a parameter snapshot (FNV-1a over shape and bit patterns).
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(8 * (self.data.len() + 5));
        for a in self.arities.iter().chain([&self.state_dim]) {
            bytes.extend_from_slice(&(*a as u64).to_le_bytes());
        }
        for x in &self.data {
            bytes.extend_from_slice(&x.to_bits().to_le_bytes());
        }
        seed::fnv1a(&bytes)
    }

    pub fn logits(&self, head: Head, features: &[f64]) -> Vec<f64> {
        self.head(head)
            .chunks_exact(self.state_dim)
            .map(|row| row.iter().zip(features).map(|(w, x)| w * x).sum())
            .collect()
    }

    /// Checkpoint bytes: `mapo-policy-v1\nheads=a,b,c,d\nstate_dim=n\n`
    /// followed by every weight as a little-endian f64, head by head, row-major.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let [a, b, c, d] = self.arities;
        let mut out =
            format!("{CHECKPOINT_MAGIC}\nheads={a},{b},{c},{d}\nstate_dim={}\n", self.state_dim).into_bytes();
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let bad = |m: &str| PolicyError::Checkpoint(m.to_string());
        let mut rest = bytes;
        let mut line = || -> Result<String, PolicyError> {
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            let l = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))?.to_string();
            rest = &rest[nl + 1..];
            Ok(l)
        };
        if line()? != CHECKPOINT_MAGIC {
            return Err(bad("missing mapo-policy-v1 header"));
        }
        let heads = line()?;
        let arities: Vec<usize> = heads
            .strip_prefix("heads=")
            .ok_or_else(|| bad("expected heads="))?
            .split(',')
            .map(|s| s.parse().map_err(|_| bad("bad head arity")))
            .collect::<Result<_, _>>()?;
        let arities: [usize; 4] = arities.try_into().map_err(|_| bad("expected four head arities"))?;
        let state_dim: usize = line()?
            .strip_prefix("state_dim=")
            .ok_or_else(|| bad("expected state_dim="))?
            .parse()
            .map_err(|_| bad("bad state_dim"))?;
        let mut params = Self::zeros(arities, state_dim);
        if rest.len() != 8 * params.data.len() {
            return Err(bad("payload length does not match shape"));
        }
        for (x, chunk) in params.data.iter_mut().zip(rest.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Ok(params)
    }
}

/// Everything a rollout needs besides parameters: vocabularies, the
/// verifier embedding space, the label vocabulary and the state layout.
#[derive(Debug, Clone)]
pub struct World {
    pub vocab: Vocabulary,
    pub space: EmbeddingSpace,
    pub grid_size: usize,
    pub max_turns: usize,
    pub labels: Vec<String>,
}

/// Labels the agent can attach to a zoom: every class name, every
/// `color class` pair and every `size color class` triple.
pub fn label_vocabulary(vocab: &Vocabulary) -> Vec<String> {
    let mut out: Vec<String> = vocab.classes.clone();
    for color in &vocab.colors {
        for class in &vocab.classes {
            out.push(format!("{color} {class}"));
        }
    }
    for size in &vocab.sizes {
        for color in &vocab.colors {
            for class in &vocab.classes {
                out.push(format!("{size} {color} {class}"));
            }
        }
    }
    out
}

impl World {
    pub fn new(vocab: Vocabulary, grid_size: usize, max_turns: usize, embed_dim: usize, embed_seed: u64) -> Result<Self, PolicyError> {
        vocab.validate()?;
        if grid_size < 2 || grid_size * grid_size > embed_dim {
            return Err(PolicyError::Input(format!(
                "grid size {grid_size} incompatible with embedding dimension {embed_dim}"
            )));
        }
        let space = EmbeddingSpace::new(&vocab, embed_dim, embed_seed)?;
        let labels = label_vocabulary(&vocab);
        Ok(Self { vocab, space, grid_size, max_turns, labels })
    }

    pub fn from_config(config: &RunConfig) -> Result<Self, PolicyError> {
        let w = Self::new(Vocabulary::default(), config.grid_size, config.max_turns, config.embed_dim, config.embed_seed)?;
        Ok(Self { space: w.space.with_label_max_tokens(config.label_max_tokens), ..w })
    }

    pub fn obs_dim(&self) -> usize {
        self.space.dim()
    }

    /// Query one-hot (class, then asked attribute), coarse view, latest
    /// patch, turn one-hot over `0..=max_turns`.
    pub fn state_dim(&self) -> usize {
        self.vocab.classes.len() + 2 + 2 * self.obs_dim() + self.max_turns + 1
    }

    pub fn arities(&self) -> [usize; 4] {
        [2, self.grid_size * self.grid_size, self.labels.len(), self.vocab.answer_count()]
    }

    pub fn initial_params(&self) -> PolicyParams {
        PolicyParams::zeros(self.arities(), self.state_dim())
    }

    pub fn query_offset(&self) -> usize {
        0
    }

    pub fn coarse_offset(&self) -> usize {
        self.vocab.classes.len() + 2
    }

    pub fn patch_offset(&self) -> usize {
        self.coarse_offset() + self.obs_dim()
    }

    pub fn turn_offset(&self) -> usize {
        self.patch_offset() + self.obs_dim()
    }

    pub fn check_params(&self, params: &PolicyParams) -> Result<(), PolicyError> {
        if params.arities() != self.arities() || params.state_dim() != self.state_dim() {
            return Err(PolicyError::Input(format!(
                "parameter shape {:?}x{} does not match world {:?}x{}",
                params.arities(),
                params.state_dim(),
                self.arities(),
                self.state_dim()
            )));
        }
        Ok(())
    }

    /// Encodes the state. Only the most recent non-coarse observation is
    /// kept; `history[0]` must be the coarse view.
    pub fn featurize_state(&self, history: &[Observation], query: &Query, turn: usize) -> Result<Vec<f64>, PolicyError> {
        let coarse = history.first().ok_or_else(|| PolicyError::Input("history is empty".into()))?;
        if coarse.kind != ObservationKind::Coarse {
            return Err(PolicyError::Input("history must start with the coarse view".into()));
        }
        let mut x = vec![0.0; self.state_dim()];
        x[query.target_class] = 1.0;
        x[self.vocab.classes.len() + query.asked_attribute as usize] = 1.0;
        let (c, p) = (self.coarse_offset(), self.patch_offset());
        x[c..c + self.obs_dim()].copy_from_slice(&coarse.features);
        if let Some(latest) = history[1..].last() {
            x[p..p + self.obs_dim()].copy_from_slice(&latest.features);
        }
        x[self.turn_offset() + turn.min(self.max_turns)] = 1.0;
        Ok(x)
    }
}

/// Tempered softmax over one head.
pub fn action_distribution(params: &PolicyParams, features: &[f64], head: Head, temperature: f64) -> Result<Vec<f64>, PolicyError> {
    let lp = log_distribution(params, features, head, temperature)?;
    Ok(lp.into_iter().map(f64::exp).collect())
}

pub fn log_distribution(params: &PolicyParams, features: &[f64], head: Head, temperature: f64) -> Result<Vec<f64>, PolicyError> {
    if !(temperature > 0.0) {
        return Err(PolicyError::Input(format!("temperature must be positive, got {temperature}")));
    }
    if features.len() != params.state_dim() {
        return Err(PolicyError::Input(format!(
            "features have dimension {}, params expect {}",
            features.len(),
            params.state_dim()
        )));
    }
    let scaled: Vec<f64> = params.logits(head, features).into_iter().map(|l| l / temperature).collect();
    if scaled.iter().any(|l| !l.is_finite()) {
        return Err(PolicyError::Numeric(format!("non-finite logits on the {head} head")));
    }
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(scaled.into_iter().map(|l| l - lse).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionToken {
    pub head: Head,
    pub choice: usize,
    /// Behaviour log-probability; 0 for forced tokens.
    pub logp: f64,
    /// Forced by the turn cap rather than sampled; carries no gradient.
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state_features: Vec<f64>,
    pub tokens: Vec<DecisionToken>,
    pub tool_call: Option<ToolCall>,
    pub observation: Option<Observation>,
    pub z: Option<f64>,
}

impl Step {
    pub fn is_terminal(&self) -> bool {
        self.tool_call.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub scene_seed: u64,
    pub query: Query,
    pub steps: Vec<Step>,
    pub answer: usize,
    pub r_out: u8,
    pub r_sem: f64,
    pub temperature: f64,
    /// Fingerprint of the parameters that generated the behaviour log-probs.
    pub behavior: u64,
    pub verifier_incidents: usize,
}

impl Trajectory {
    pub fn tool_call_count(&self) -> usize {
        self.steps.iter().filter(|s| !s.is_terminal()).count()
    }

    /// |τ| = 3T + 2.
    pub fn token_count(&self) -> usize {
        self.steps.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn z_scores(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.z).collect()
    }

    pub fn tokens(&self) -> impl Iterator<Item = (&Step, &DecisionToken)> {
        self.steps.iter().flat_map(|s| s.tokens.iter().map(move |t| (s, t)))
    }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn argmax(probs: &[f64]) -> usize {
    probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bp), (i, &p)| if p > bp { (i, p) } else { (bi, bp) })
        .0
}

fn rollout(
    params: &PolicyParams,
    world: &World,
    scene: &Scene,
    query: &Query,
    config: &RunConfig,
    verifier: &dyn SemanticVerifier,
    choose: &mut dyn FnMut(&[f64]) -> usize,
) -> Result<Trajectory, PolicyError> {
    world.check_params(params)?;
    let temperature = config.temperature;
    let mut history = vec![env::initial_observation(scene, world.obs_dim())?];
    let mut steps = Vec::new();
    let mut incidents = 0;
    let mut draw = |head: Head, x: &[f64]| -> Result<DecisionToken, PolicyError> {
        let logp = log_distribution(params, x, head, temperature)?;
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let choice = choose(&probs);
        Ok(DecisionToken { head, choice, logp: logp[choice], forced: false })
    };
    for turn in 0.. {
        let x = world.featurize_state(&history, query, turn)?;
        let mode = if turn >= config.max_turns {
            DecisionToken { head: Head::Mode, choice: MODE_ANSWER, logp: 0.0, forced: true }
        } else {
            draw(Head::Mode, &x)?
        };
        if mode.choice == MODE_ANSWER {
            let answer = draw(Head::Answer, &x)?;
            let r_out = env::judge_answer(&world.vocab, query, answer.choice)?;
            let answer_id = answer.choice;
            steps.push(Step { state_features: x, tokens: vec![mode, answer], tool_call: None, observation: None, z: None });
            let z: Vec<f64> = steps.iter().filter_map(|s| s.z).collect();
            let r_sem = rewards::semantic_return(&z, config.sem_scoring, config.lambda)
                .map_err(|e| PolicyError::Numeric(e.to_string()))?;
            return Ok(Trajectory {
                scene_seed: scene.seed,
                query: *query,
                steps,
                answer: answer_id,
                r_out,
                r_sem,
                temperature,
                behavior: params.fingerprint(),
                verifier_incidents: incidents,
            });
        }
        let cell = draw(Head::Cell, &x)?;
        let label = draw(Head::Label, &x)?;
        let call = ToolCall::zoom(scene.cell_bbox(cell.choice), world.labels[label.choice].clone());
        let obs = env::execute_zoom(&world.space, scene, &call.bbox);
        let z = match verifier.score(&call.label, &obs) {
            Ok(z) => z,
            Err(e) => {
                log::warn!("verifier failed, scoring step as 0: {e}");
                incidents += 1;
                0.0
            }
        };
        steps.push(Step {
            state_features: x,
            tokens: vec![mode, cell, label],
            tool_call: Some(call),
            observation: Some(obs.clone()),
            z: Some(z),
        });
        history.push(obs);
    }
    unreachable!("the turn cap forces an answer")
}

/// Samples one trajectory. The turn cap forces ANSWER at `max_turns`.
pub fn sample_trajectory<R: Rng + ?Sized>(
    params: &PolicyParams,
    world: &World,
    scene: &Scene,
    query: &Query,
    config: &RunConfig,
    verifier: &dyn SemanticVerifier,
    rng: &mut R,
) -> Result<Trajectory, PolicyError> {
    rollout(params, world, scene, query, config, verifier, &mut |p| sample_index(p, rng))
}

/// Greedy decoding: the most probable choice at every token.
pub fn greedy_trajectory(
    params: &PolicyParams,
    world: &World,
    scene: &Scene,
    query: &Query,
    config: &RunConfig,
    verifier: &dyn SemanticVerifier,
) -> Result<Trajectory, PolicyError> {
    rollout(params, world, scene, query, config, verifier, &mut |p| argmax(p))
}

/// Log-probability of one stored token under `params`.
pub fn token_logprob(params: &PolicyParams, features: &[f64], token: &DecisionToken, temperature: f64) -> Result<f64, PolicyError> {
    if token.forced {
        return Ok(0.0);
    }
    let lp = log_distribution(params, features, token.head, temperature)?;
    lp.get(token.choice)
        .copied()
        .ok_or_else(|| PolicyError::Input(format!("choice {} outside {} head", token.choice, token.head)))
}

/// `grad += weight * d/dθ log π(token)`.
///
/// Row k of the token's head receives `(1[k=a] - p_k) · x / temperature`.
pub fn accumulate_token_gradient(
    params: &PolicyParams,
    features: &[f64],
    token: &DecisionToken,
    temperature: f64,
    weight: f64,
    grad: &mut PolicyParams,
) -> Result<(), PolicyError> {
    if token.forced || weight == 0.0 {
        return Ok(());
    }
    if token.choice >= params.arity(token.head) {
        return Err(PolicyError::Input(format!("choice {} outside {} head", token.choice, token.head)));
    }
    let probs = action_distribution(params, features, token.head, temperature)?;
    let d = params.state_dim();
    let g = grad.head_mut(token.head);
    for (k, p) in probs.iter().enumerate() {
        let coef = weight * ((k == token.choice) as u8 as f64 - p) / temperature;
        if coef != 0.0 {
            g[k * d..(k + 1) * d].iter_mut().zip(features).for_each(|(gi, x)| *gi += coef * x);
        }
    }
    Ok(())
}

/// ∇θ log π(τ): the sum of token score functions.
pub fn grad_logprob(params: &PolicyParams, trajectory: &Trajectory) -> Result<PolicyParams, PolicyError> {
    let mut grad = PolicyParams::zeros_like(params);
    for (step, token) in trajectory.tokens() {
        if step.state_features.len() != params.state_dim() {
            return Err(PolicyError::Input("trajectory features do not match parameter shape".into()));
        }
        accumulate_token_gradient(params, &step.state_features, token, trajectory.temperature, 1.0, &mut grad)?;
    }
    Ok(grad)
}

/// log π(τ) under `params`, summed over tokens.
pub fn trajectory_logprob(params: &PolicyParams, trajectory: &Trajectory) -> Result<f64, PolicyError> {
    trajectory
        .tokens()
        .map(|(s, t)| token_logprob(params, &s.state_features, t, trajectory.temperature))
        .sum()
}
