//! Browser bindings: a NeedleGrid zoom explorer, the semantic score curve
//! and the group-normalisation variance curve. Every export returns JSON.

use serde::Serialize;
use thiserror::Error;
use wasm_bindgen::prelude::*;

use mapo::config::RunConfig;
use mapo::env::{self, Attribute, ObservationKind, Vocabulary};
use mapo::protocol::{self, Bbox, BboxError, ProtocolError, ToolCall};
use mapo::rewards::{self, RewardError};
use mapo::theorylab::{self, TheoryError};
use mapo::verifier::{EmbeddingSpace, VerifierError};

#[derive(Debug, Error)]
pub enum WebError {
    #[error(transparent)]
    Env(#[from] env::EnvError),
    #[error(transparent)]
    Bbox(#[from] BboxError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("invalid input: {0}")]
    Input(String),
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

fn check_grid(grid: usize) -> Result<(), WebError> {
    if (2..=8).contains(&grid) { Ok(()) } else { Err(WebError::Input("grid must be in 2..=8".into())) }
}

fn space() -> Result<EmbeddingSpace, WebError> {
    let c = RunConfig::default();
    Ok(EmbeddingSpace::new(&Vocabulary::default(), c.embed_dim, c.embed_seed)?)
}

#[derive(Serialize)]
struct CellView {
    class: String,
    color: String,
    size: String,
}

#[derive(Serialize)]
struct SceneView {
    grid: usize,
    cells: Vec<CellView>,
    target_cell: usize,
    question: String,
    answer: String,
}

pub fn scene_view(seed: u64, grid: usize) -> Result<String, WebError> {
    check_grid(grid)?;
    let vocab = Vocabulary::default();
    let (scene, query) = env::sample_task(&vocab, seed, grid)?;
    let cells = scene
        .cells
        .iter()
        .map(|c| CellView {
            class: vocab.classes[c.object_class].clone(),
            color: vocab.colors[c.color].clone(),
            size: vocab.sizes[c.size].clone(),
        })
        .collect();
    let attr = match query.asked_attribute {
        Attribute::Color => "color",
        Attribute::Size => "size",
    };
    Ok(json(&SceneView {
        grid,
        cells,
        target_cell: scene.target_cell,
        question: format!("What is the {attr} of the {}?", vocab.classes[query.target_class]),
        answer: vocab.answer_name(query.ground_truth).unwrap_or_default().to_string(),
    }))
}

#[derive(Serialize)]
struct ZoomView {
    tool_call: String,
    covered_cells: Vec<usize>,
    blank: bool,
    z: f64,
}

pub fn zoom_view(seed: u64, grid: usize, x1: f64, y1: f64, x2: f64, y2: f64, label: &str) -> Result<String, WebError> {
    check_grid(grid)?;
    let (scene, _) = env::sample_task(&Vocabulary::default(), seed, grid)?;
    let bbox = Bbox::new(x1, y1, x2, y2)?;
    let call = ToolCall::zoom(bbox, label);
    let tool_call = protocol::serialize_tool_call(&call)?;
    let space = space()?;
    let obs = env::execute_zoom(&space, &scene, &call.bbox);
    let z = space.semantic_score(&call.label, &obs)?;
    Ok(json(&ZoomView { tool_call, blank: obs.kind == ObservationKind::Blank, covered_cells: obs.covered_cells, z }))
}

#[derive(Serialize)]
struct ScorePoint {
    turns: usize,
    discounted: f64,
    sum: f64,
}

/// Semantic score of `turns` identical steps scoring `z`, for 1..=max_turns.
pub fn semantic_curve(z: f64, lambda: f64, max_turns: usize) -> Result<String, WebError> {
    if max_turns == 0 || max_turns > 64 {
        return Err(WebError::Input("max_turns must be in 1..=64".into()));
    }
    let points = (1..=max_turns)
        .map(|t| {
            let zs = vec![z; t];
            Ok(ScorePoint {
                turns: t,
                discounted: rewards::trajectory_semantic_score(&zs, lambda)?,
                sum: rewards::sum_semantic_score(&zs)?,
            })
        })
        .collect::<Result<Vec<_>, WebError>>()?;
    Ok(json(&points))
}

#[derive(Serialize)]
struct VariancePoint {
    rho: f64,
    empirical: f64,
    analytic: f64,
}

/// Empirical against analytic advantage variance over a grid of ρ.
pub fn variance_curve(g: usize, sigma2: f64, trials: usize, seed: u64) -> Result<String, WebError> {
    if trials > 200_000 {
        return Err(WebError::Input("at most 200000 trials".into()));
    }
    let grid: Vec<f64> = (0..=19).map(|k| k as f64 * 0.05).collect();
    let rows = theorylab::prop1_experiment(&grid, sigma2, g, trials, seed)?;
    let points: Vec<VariancePoint> = rows
        .iter()
        .map(|r| VariancePoint { rho: r.rho, empirical: r.empirical_var, analytic: r.analytic_var })
        .collect();
    Ok(json(&points))
}

#[wasm_bindgen]
pub fn scene(seed: u32, grid: u32) -> Result<String, String> {
    scene_view(seed.into(), grid as usize).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn zoom(seed: u32, grid: u32, x1: f64, y1: f64, x2: f64, y2: f64, label: &str) -> Result<String, String> {
    zoom_view(seed.into(), grid as usize, x1, y1, x2, y2, label).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn semantic_score_curve(z: f64, lambda: f64, max_turns: u32) -> Result<String, String> {
    semantic_curve(z, lambda, max_turns as usize).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn advantage_variance_curve(g: u32, sigma2: f64, trials: u32, seed: u32) -> Result<String, String> {
    variance_curve(g as usize, sigma2, trials as usize, seed.into()).map_err(|e| e.to_string())
}
