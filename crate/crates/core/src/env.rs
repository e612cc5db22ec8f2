//! NeedleGrid: a synthetic high-resolution visual-search world.
//!
//! A scene is an N×N grid over the unit square. Exactly one cell holds the
//! queried object class; the question asks for that object's color or size.
//! The coarse view only reveals where the queried class sits, so the answer
//! can only be read after zooming into the right cell.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::Bbox;
use crate::seed::{self, tag};
use crate::verifier::EmbeddingSpace;

pub const SCENE_RECORD_MAGIC: &str = "needlegrid-v1";

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("scene record line {line}: {reason}")]
    Record { line: usize, reason: String },
}

/// Object, color and size vocabularies. Answers are colors followed by sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub classes: Vec<String>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        Self {
            classes: s(&[
                "helmet", "bicycle", "umbrella", "dog", "bottle", "clock", "kite", "chair",
            ]),
            colors: s(&["red", "green", "blue", "yellow", "white", "black"]),
            sizes: s(&["small", "medium", "large"]),
        }
    }
}

impl Vocabulary {
    pub fn validate(&self) -> Result<(), EnvError> {
        // Distractors are drawn from non-target classes, so two classes minimum.
        if self.classes.len() < 2 {
            return Err(EnvError::Config("object vocabulary needs at least two classes".into()));
        }
        if self.colors.is_empty() || self.sizes.is_empty() {
            return Err(EnvError::Config("color and size vocabularies must be non-empty".into()));
        }
        Ok(())
    }

    pub fn answer_count(&self) -> usize {
        self.colors.len() + self.sizes.len()
    }

    pub fn answer_name(&self, id: usize) -> Option<&str> {
        if id < self.colors.len() {
            Some(&self.colors[id])
        } else {
            self.sizes.get(id - self.colors.len()).map(String::as_str)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellContent {
    pub object_class: usize,
    pub color: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub grid_size: usize,
    pub cells: Vec<CellContent>,
    pub target_cell: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Attribute {
    Color,
    Size,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub target_class: usize,
    pub asked_attribute: Attribute,
    pub ground_truth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObservationKind {
    Coarse,
    Patch,
    Blank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub kind: ObservationKind,
    pub features: Vec<f64>,
    pub covered_cells: Vec<usize>,
}

impl Observation {
    pub fn blank(dim: usize) -> Self {
        Self { kind: ObservationKind::Blank, features: vec![0.0; dim], covered_cells: Vec::new() }
    }
}

impl Scene {
    pub fn cell_count(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn target_class(&self) -> usize {
        self.cells[self.target_cell].object_class
    }

    /// Center of a cell in relative coordinates; row-major, origin top-left.
    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        cell_center(self.grid_size, cell)
    }

    pub fn cell_bbox(&self, cell: usize) -> Bbox {
        cell_bbox(self.grid_size, cell)
    }

    /// Plain-text record: header `needlegrid-v1,N,seed,target_cell`, then
    /// one `index,object_class,color,size` line per cell.
    pub fn to_record(&self) -> String {
        let mut out = format!(
            "{SCENE_RECORD_MAGIC},{},{},{}\n",
            self.grid_size, self.seed, self.target_cell
        );
        for (i, c) in self.cells.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{}", c.object_class, c.color, c.size);
        }
        out
    }

    pub fn from_record(text: &str, vocab: &Vocabulary) -> Result<Self, EnvError> {
        let bad = |line: usize, reason: &str| EnvError::Record { line, reason: reason.into() };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty record"))?;
        let fields: Vec<&str> = header.split(',').collect();
        if fields.len() != 4 || fields[0] != SCENE_RECORD_MAGIC {
            return Err(bad(1, "expected header needlegrid-v1,N,seed,target_cell"));
        }
        let grid_size: usize = fields[1].parse().map_err(|_| bad(1, "bad grid size"))?;
        let seed: u64 = fields[2].parse().map_err(|_| bad(1, "bad seed"))?;
        let target_cell: usize = fields[3].parse().map_err(|_| bad(1, "bad target cell"))?;
        if grid_size < 2 || target_cell >= grid_size * grid_size {
            return Err(bad(1, "grid size or target cell out of range"));
        }
        let mut cells = Vec::with_capacity(grid_size * grid_size);
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            let nums: Result<Vec<usize>, _> = line.split(',').map(str::parse).collect();
            let nums = nums.map_err(|_| bad(lineno, "non-integer field"))?;
            if nums.len() != 4 || nums[0] != cells.len() {
                return Err(bad(lineno, "expected index,object_class,color,size in order"));
            }
            let content = CellContent { object_class: nums[1], color: nums[2], size: nums[3] };
            if content.object_class >= vocab.classes.len()
                || content.color >= vocab.colors.len()
                || content.size >= vocab.sizes.len()
            {
                return Err(bad(lineno, "vocabulary id out of range"));
            }
            cells.push(content);
        }
        if cells.len() != grid_size * grid_size {
            return Err(bad(text.lines().count(), "cell count does not match grid size"));
        }
        let target_class = cells[target_cell].object_class;
        if cells.iter().filter(|c| c.object_class == target_class).count() != 1 {
            return Err(bad(target_cell + 2, "target class is not unique"));
        }
        Ok(Scene { seed, grid_size, cells, target_cell })
    }
}

pub fn cell_center(grid_size: usize, cell: usize) -> (f64, f64) {
    let n = grid_size as f64;
    let (row, col) = (cell / grid_size, cell % grid_size);
    ((col as f64 + 0.5) / n, (row as f64 + 0.5) / n)
}

pub fn cell_bbox(grid_size: usize, cell: usize) -> Bbox {
    let n = grid_size as f64;
    let (row, col) = (cell / grid_size, cell % grid_size);
    Bbox {
        x1: col as f64 / n,
        y1: row as f64 / n,
        x2: (col + 1) as f64 / n,
        y2: (row + 1) as f64 / n,
    }
}

pub fn generate_scene(
    vocab: &Vocabulary,
    seed: u64,
    grid_size: usize,
    target_class: usize,
) -> Result<Scene, EnvError> {
    vocab.validate()?;
    if grid_size < 2 {
        return Err(EnvError::Config(format!("grid size must be at least 2, got {grid_size}")));
    }
    if target_class >= vocab.classes.len() {
        return Err(EnvError::Config(format!("target class {target_class} outside vocabulary")));
    }
    let mut rng = seed::rng(&[tag::SCENE, seed, grid_size as u64, target_class as u64]);
    let n_cells = grid_size * grid_size;
    let target_cell = rng.random_range(0..n_cells);
    let distractor_classes = vocab.classes.len() - 1;
    let cells = (0..n_cells)
        .map(|i| {
            let object_class = if i == target_cell {
                target_class
            } else {
                // Uniform over non-target classes.
                let k = rng.random_range(0..distractor_classes);
                if k >= target_class { k + 1 } else { k }
            };
            CellContent {
                object_class,
                color: rng.random_range(0..vocab.colors.len()),
                size: rng.random_range(0..vocab.sizes.len()),
            }
        })
        .collect();
    Ok(Scene { seed, grid_size, cells, target_cell })
}

/// Draws a target class and asked attribute from `seed` and builds the
/// matching scene and query.
pub fn sample_task(vocab: &Vocabulary, seed: u64, grid_size: usize) -> Result<(Scene, Query), EnvError> {
    vocab.validate()?;
    let mut rng = seed::rng(&[tag::TASK, seed]);
    let target_class = rng.random_range(0..vocab.classes.len());
    let asked_attribute = if rng.random_bool(0.5) { Attribute::Color } else { Attribute::Size };
    let scene = generate_scene(vocab, seed, grid_size, target_class)?;
    let query = query_for(vocab, &scene, asked_attribute);
    Ok((scene, query))
}

pub fn query_for(vocab: &Vocabulary, scene: &Scene, asked_attribute: Attribute) -> Query {
    let target = scene.cells[scene.target_cell];
    let ground_truth = match asked_attribute {
        Attribute::Color => target.color,
        Attribute::Size => vocab.colors.len() + target.size,
    };
    Query { target_class: target.object_class, asked_attribute, ground_truth }
}

/// Coarse view: one channel per cell flagging the presence of the queried
/// object class. Colors and sizes are withheld entirely.
pub fn initial_observation(scene: &Scene, dim: usize) -> Result<Observation, EnvError> {
    let n_cells = scene.cell_count();
    if n_cells > dim {
        return Err(EnvError::Config(format!(
            "coarse view needs one channel per cell: {n_cells} cells > dimension {dim}"
        )));
    }
    let target_class = scene.target_class();
    let mut features = vec![0.0; dim];
    for (i, c) in scene.cells.iter().enumerate() {
        if c.object_class == target_class {
            features[i] = 1.0;
        }
    }
    Ok(Observation { kind: ObservationKind::Coarse, features, covered_cells: (0..n_cells).collect() })
}

/// Cells whose centers lie inside the (closed) box.
pub fn covered_cells(scene: &Scene, bbox: &Bbox) -> Vec<usize> {
    (0..scene.cell_count())
        .filter(|&c| {
            let (cx, cy) = scene.cell_center(c);
            bbox.x1 <= cx && cx <= bbox.x2 && bbox.y1 <= cy && cy <= bbox.y2
        })
        .collect()
}

/// Crops the scene: the patch reveals full cell contents as the mean of the
/// covered cells' verifier-space embeddings. A box covering no cell center
/// yields a blank observation.
pub fn execute_zoom(space: &EmbeddingSpace, scene: &Scene, bbox: &Bbox) -> Observation {
    let covered = covered_cells(scene, bbox);
    if covered.is_empty() {
        return Observation::blank(space.dim());
    }
    let mut features = vec![0.0; space.dim()];
    for &c in &covered {
        let e = space.content_embedding(&scene.cells[c]);
        for (f, v) in features.iter_mut().zip(e) {
            *f += v;
        }
    }
    let inv = 1.0 / covered.len() as f64;
    features.iter_mut().for_each(|f| *f *= inv);
    Observation { kind: ObservationKind::Patch, features, covered_cells: covered }
}

pub fn judge_answer(vocab: &Vocabulary, query: &Query, answer: usize) -> Result<u8, EnvError> {
    if answer >= vocab.answer_count() {
        return Err(EnvError::Input(format!(
            "answer id {answer} outside answer vocabulary of size {}",
            vocab.answer_count()
        )));
    }
    Ok(u8::from(answer == query.ground_truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn space() -> EmbeddingSpace {
        EmbeddingSpace::new(&Vocabulary::default(), 64, 11).unwrap()
    }

    #[test]
    fn same_seed_same_scene() {
        let v = Vocabulary::default();
        let a = generate_scene(&v, 7, 4, 3).unwrap();
        let b = generate_scene(&v, 7, 4, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_record(), b.to_record());
    }

    #[test]
    fn exactly_one_target_cell() {
        let v = Vocabulary::default();
        for seed in 0..200 {
            let s = generate_scene(&v, seed, 4, 3).unwrap();
            let hits: Vec<_> = (0..16).filter(|&i| s.cells[i].object_class == 3).collect();
            assert_eq!(hits, vec![s.target_cell]);
        }
    }

    #[test]
    fn target_placement_differs_across_seed_pairs() {
        // Uniform placement over 16 cells: P(differ) = 15/16 = 0.9375,
        // binomial std over 1e4 pairs ≈ 0.0024.
        let v = Vocabulary::default();
        let pairs = 10_000u64;
        let differ = (0..pairs)
            .filter(|&k| {
                let a = generate_scene(&v, 2 * k, 4, 3).unwrap();
                let b = generate_scene(&v, 2 * k + 1, 4, 3).unwrap();
                a.target_cell != b.target_cell
            })
            .count();
        let frac = differ as f64 / pairs as f64;
        assert!((frac - 15.0 / 16.0).abs() < 0.01, "fraction {frac}");
    }

    #[test]
    fn configuration_errors() {
        let v = Vocabulary::default();
        assert!(matches!(generate_scene(&v, 1, 1, 0), Err(EnvError::Config(_))));
        let empty = Vocabulary { classes: vec![], ..Vocabulary::default() };
        assert!(matches!(generate_scene(&empty, 1, 4, 0), Err(EnvError::Config(_))));
        let no_colors = Vocabulary { colors: vec![], ..Vocabulary::default() };
        assert!(matches!(generate_scene(&no_colors, 1, 4, 0), Err(EnvError::Config(_))));
    }

    #[test]
    fn coarse_view_ignores_colors_and_sizes() {
        let v = Vocabulary::default();
        let s = generate_scene(&v, 5, 8, 2).unwrap();
        let mut recolored = s.clone();
        let mut rng = seed::rng(&[99]);
        for c in recolored.cells.iter_mut() {
            c.color = rng.random_range(0..v.colors.len());
            c.size = rng.random_range(0..v.sizes.len());
        }
        assert_eq!(initial_observation(&s, 64).unwrap(), initial_observation(&recolored, 64).unwrap());
    }

    #[test]
    fn coarse_view_is_local() {
        let v = Vocabulary::default();
        let mut a = generate_scene(&v, 5, 4, 2).unwrap();
        // Place the target at 5, then at 9 with the displaced content swapped.
        let t = a.target_cell;
        a.cells.swap(t, 5);
        a.target_cell = 5;
        let mut b = a.clone();
        b.cells.swap(5, 9);
        b.target_cell = 9;
        let fa = initial_observation(&a, 64).unwrap().features;
        let fb = initial_observation(&b, 64).unwrap().features;
        let diff: Vec<usize> = (0..64).filter(|&i| fa[i] != fb[i]).collect();
        assert_eq!(diff, vec![5, 9]);
    }

    #[test]
    fn coarse_dimension_contract() {
        let v = Vocabulary::default();
        for seed in 0..20 {
            let s = generate_scene(&v, seed, 8, 1).unwrap();
            assert_eq!(initial_observation(&s, 64).unwrap().features.len(), 64);
        }
        let big = generate_scene(&v, 0, 9, 1).unwrap();
        assert!(initial_observation(&big, 64).is_err());
    }

    #[test]
    fn single_cell_zoom() {
        let sp = space();
        let s = generate_scene(&Vocabulary::default(), 3, 4, 1).unwrap();
        let obs = execute_zoom(&sp, &s, &s.cell_bbox(6));
        assert_eq!(obs.kind, ObservationKind::Patch);
        assert_eq!(obs.covered_cells, vec![6]);
        assert_eq!(obs.features, sp.content_embedding(&s.cells[6]));
    }

    #[test]
    fn full_frame_zoom_is_grand_mean() {
        let sp = space();
        let s = generate_scene(&Vocabulary::default(), 3, 4, 1).unwrap();
        let full = Bbox { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 };
        let obs = execute_zoom(&sp, &s, &full);
        assert_eq!(obs.covered_cells, (0..16).collect::<Vec<_>>());
        for d in 0..sp.dim() {
            let mean: f64 =
                s.cells.iter().map(|c| sp.content_embedding(c)[d]).sum::<f64>() / 16.0;
            assert!((obs.features[d] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn thin_box_between_centers_is_blank() {
        let sp = space();
        let s = generate_scene(&Vocabulary::default(), 3, 4, 1).unwrap();
        // Column centers sit at 0.125, 0.375, ...; this sliver sits between.
        let sliver = Bbox { x1: 0.2, y1: 0.0, x2: 0.3, y2: 1.0 };
        let obs = execute_zoom(&sp, &s, &sliver);
        assert_eq!(obs.kind, ObservationKind::Blank);
        assert!(obs.covered_cells.is_empty());
        assert!(obs.features.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn covered_cells_match_brute_force() {
        let s = generate_scene(&Vocabulary::default(), 3, 8, 1).unwrap();
        let mut rng = seed::rng(&[1234]);
        for _ in 0..1000 {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            let (c, d): (f64, f64) = (rng.random(), rng.random());
            if a == b || c == d {
                continue;
            }
            let bbox = Bbox { x1: a.min(b), x2: a.max(b), y1: c.min(d), y2: c.max(d) };
            let mut brute = Vec::new();
            for row in 0..8 {
                for col in 0..8 {
                    let cx = (2 * col + 1) as f64 / 16.0;
                    let cy = (2 * row + 1) as f64 / 16.0;
                    if cx >= bbox.x1 && cx <= bbox.x2 && cy >= bbox.y1 && cy <= bbox.y2 {
                        brute.push(row * 8 + col);
                    }
                }
            }
            assert_eq!(covered_cells(&s, &bbox), brute);
        }
    }

    #[test]
    fn zoom_is_pure() {
        let sp = space();
        let s = generate_scene(&Vocabulary::default(), 3, 4, 1).unwrap();
        let b = Bbox { x1: 0.1, y1: 0.1, x2: 0.6, y2: 0.9 };
        assert_eq!(execute_zoom(&sp, &s, &b), execute_zoom(&sp, &s, &b));
    }

    #[test]
    fn judging() {
        let v = Vocabulary::default();
        let (_, q) = sample_task(&v, 4, 4).unwrap();
        assert_eq!(judge_answer(&v, &q, q.ground_truth), Ok(1));
        assert_eq!(judge_answer(&v, &q, (q.ground_truth + 1) % v.answer_count()), Ok(0));
        assert!(matches!(judge_answer(&v, &q, v.answer_count()), Err(EnvError::Input(_))));
    }

    #[test]
    fn query_ground_truth_matches_target() {
        let v = Vocabulary::default();
        for seed in 0..100 {
            let (s, q) = sample_task(&v, seed, 5).unwrap();
            let t = s.cells[s.target_cell];
            assert_eq!(q.target_class, t.object_class);
            match q.asked_attribute {
                Attribute::Color => assert_eq!(q.ground_truth, t.color),
                Attribute::Size => assert_eq!(q.ground_truth, v.colors.len() + t.size),
            }
        }
    }

    #[test]
    fn record_round_trip_and_rejections() {
        let v = Vocabulary::default();
        let s = generate_scene(&v, 42, 5, 6).unwrap();
        let text = s.to_record();
        assert!(text.starts_with("needlegrid-v1,5,42,"));
        assert_eq!(Scene::from_record(&text, &v).unwrap(), s);

        let tampered = text.replacen("needlegrid-v1", "needlegrid-v2", 1);
        assert!(matches!(Scene::from_record(&tampered, &v), Err(EnvError::Record { line: 1, .. })));
        let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(Scene::from_record(&truncated, &v).is_err());
    }

    #[test]
    fn scripted_oracle_agent_always_solves() {
        // Zoom on the flagged coarse channel, read the attribute off the patch.
        let v = Vocabulary::default();
        let sp = space();
        for seed in 0..300 {
            let (s, q) = sample_task(&v, seed, 8).unwrap();
            let coarse = initial_observation(&s, 64).unwrap();
            let cell = coarse.features.iter().position(|&f| f == 1.0).unwrap();
            let patch = execute_zoom(&sp, &s, &s.cell_bbox(cell));
            let answer = (0..v.answer_count())
                .max_by(|&a, &b| {
                    let score = |id: usize| {
                        let word = v.answer_name(id).unwrap();
                        let e = sp.embed_label(word).unwrap();
                        let same_kind = (id < v.colors.len())
                            == (q.asked_attribute == Attribute::Color);
                        let dot: f64 = e.iter().zip(&patch.features).map(|(x, y)| x * y).sum();
                        if same_kind { dot } else { f64::NEG_INFINITY }
                    };
                    score(a).total_cmp(&score(b))
                })
                .unwrap();
            assert_eq!(judge_answer(&v, &q, answer), Ok(1), "seed {seed}");
        }
    }
}
