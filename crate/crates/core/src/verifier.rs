//! Semantic verifier: cosine similarity between a tool call's label and the
//! observation it produced.
//!
//! The built-in oracle embeds attributes as seeded random unit vectors. The
//! class, color and size vectors are orthonormalised, so the score of a label
//! against a single-cell patch is exactly the shared-attribute overlap
//! `k / sqrt(words * 3)`. [`ExternalVerifier`] speaks a one-line JSON
//! protocol so a real embedding model can stand in for the oracle.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{CellContent, Observation, ObservationKind, Vocabulary};
use crate::protocol::DEFAULT_LABEL_MAX_TOKENS;
use crate::seed::{self, tag};

pub const DEFAULT_EMBED_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("verifier timed out")]
    Timeout,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("score {0} outside [-1, 1]")]
    OutOfRange(f64),
}

/// Anything that can score a label against an observation.
pub trait SemanticVerifier: Sync {
    fn score(&self, label: &str, obs: &Observation) -> Result<f64, VerifierError>;
}

#[derive(Debug, Clone)]
pub struct EmbeddingSpace {
    dim: usize,
    seed: u64,
    label_max_tokens: usize,
    classes: Vec<Vec<f64>>,
    colors: Vec<Vec<f64>>,
    sizes: Vec<Vec<f64>>,
    words: HashMap<String, Vec<f64>>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn gaussian_vector(dim: usize, parts: &[u64]) -> Vec<f64> {
    let mut rng = seed::rng(parts);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

impl EmbeddingSpace {
    pub fn new(vocab: &Vocabulary, dim: usize, seed: u64) -> Result<Self, VerifierError> {
        vocab.validate().map_err(|e| VerifierError::Config(e.to_string()))?;
        let total = vocab.classes.len() + vocab.colors.len() + vocab.sizes.len();
        if dim < total {
            return Err(VerifierError::Config(format!(
                "embedding dimension {dim} cannot hold {total} orthogonal attributes"
            )));
        }
        // Gram-Schmidt over seeded Gaussian draws, run twice per vector.
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(total);
        for i in 0..total {
            let mut v = gaussian_vector(dim, &[tag::EMBED, seed, i as u64]);
            for _ in 0..2 {
                for b in &basis {
                    let d = dot(&v, b);
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
                v = normalized(v);
            }
            basis.push(v);
        }
        let mut it = basis.into_iter();
        let classes: Vec<_> = it.by_ref().take(vocab.classes.len()).collect();
        let colors: Vec<_> = it.by_ref().take(vocab.colors.len()).collect();
        let sizes: Vec<_> = it.collect();

        let mut words = HashMap::new();
        for (names, vecs) in [(&vocab.classes, &classes), (&vocab.colors, &colors), (&vocab.sizes, &sizes)] {
            for (n, v) in names.iter().zip(vecs) {
                words.insert(n.to_lowercase(), v.clone());
            }
        }
        Ok(Self { dim, seed, label_max_tokens: DEFAULT_LABEL_MAX_TOKENS, classes, colors, sizes, words })
    }

    pub fn with_label_max_tokens(mut self, max: usize) -> Self {
        self.label_max_tokens = max;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn class_vector(&self, id: usize) -> &[f64] {
        &self.classes[id]
    }

    pub fn color_vector(&self, id: usize) -> &[f64] {
        &self.colors[id]
    }

    pub fn size_vector(&self, id: usize) -> &[f64] {
        &self.sizes[id]
    }

    /// Normalised sum of a cell's class, color and size vectors.
    pub fn content_embedding(&self, cell: &CellContent) -> Vec<f64> {
        let v = (0..self.dim)
            .map(|d| self.classes[cell.object_class][d] + self.colors[cell.color][d] + self.sizes[cell.size][d])
            .collect();
        normalized(v)
    }

    /// Vector for one label word; unknown words hash to a seeded direction.
    pub fn word_vector(&self, word: &str) -> Vec<f64> {
        let w = word.to_lowercase();
        match self.words.get(&w) {
            Some(v) => v.clone(),
            None => normalized(gaussian_vector(self.dim, &[tag::WORD, self.seed, seed::fnv1a(w.as_bytes())])),
        }
    }

    pub fn embed_label(&self, label: &str) -> Result<Vec<f64>, VerifierError> {
        let tokens: Vec<&str> = label.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(VerifierError::Input("label is empty".into()));
        }
        if tokens.len() > self.label_max_tokens {
            return Err(VerifierError::Input(format!(
                "label has {} tokens, limit is {}",
                tokens.len(),
                self.label_max_tokens
            )));
        }
        let mut sum = vec![0.0; self.dim];
        for t in tokens {
            sum.iter_mut().zip(self.word_vector(t)).for_each(|(s, v)| *s += v);
        }
        if norm(&sum) == 0.0 {
            return Err(VerifierError::Input(format!("label {label:?} embeds to the zero vector")));
        }
        Ok(normalized(sum))
    }

    /// Unit vector for a patch, the zero vector for a blank.
    pub fn embed_observation(&self, obs: &Observation) -> Result<Vec<f64>, VerifierError> {
        if obs.features.len() != self.dim {
            return Err(VerifierError::Input(format!(
                "observation has {} features, space has {}",
                obs.features.len(),
                self.dim
            )));
        }
        match obs.kind {
            ObservationKind::Coarse => Err(VerifierError::Input("coarse views are never verifier inputs".into())),
            ObservationKind::Blank => Ok(vec![0.0; self.dim]),
            ObservationKind::Patch => Ok(normalized(obs.features.clone())),
        }
    }

    /// Unrounded cosine between the label and observation embeddings.
    pub fn raw_cosine(&self, label: &str, obs: &Observation) -> Result<f64, VerifierError> {
        let l = self.embed_label(label)?;
        let o = self.embed_observation(obs)?;
        Ok(dot(&l, &o))
    }

    pub fn semantic_score(&self, label: &str, obs: &Observation) -> Result<f64, VerifierError> {
        let z = self.raw_cosine(label, obs)?;
        // Both operands are unit (or zero), so |z| <= 1 up to a few ulps of
        // summation error; only that rounding slack is absorbed here.
        if z.abs() <= 1.0 {
            Ok(z)
        } else if z.abs() - 1.0 < 1e-12 {
            Ok(z.signum())
        } else {
            Err(VerifierError::OutOfRange(z))
        }
    }
}

impl SemanticVerifier for EmbeddingSpace {
    fn score(&self, label: &str, obs: &Observation) -> Result<f64, VerifierError> {
        self.semantic_score(label, obs)
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    label: &'a str,
    features: &'a [f64],
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

struct Endpoint<R, W> {
    reader: BufReader<R>,
    writer: W,
}

/// Line-delimited JSON adapter: one `{"label":..,"features":[..]}` request,
/// one `{"score":f}` response. Requests on one handle are serialised.
pub struct ExternalVerifier<R, W> {
    endpoint: Mutex<Endpoint<R, W>>,
}

impl<R: Read, W: Write> ExternalVerifier<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self { endpoint: Mutex::new(Endpoint { reader: BufReader::new(reader), writer }) }
    }

    pub fn external_score(&self, label: &str, obs: &Observation) -> Result<f64, VerifierError> {
        let mut ep = self.endpoint.lock().map_err(|_| VerifierError::Transport("endpoint poisoned".into()))?;
        let mut line = serde_json::to_string(&ScoreRequest { label, features: &obs.features })
            .map_err(|e| VerifierError::Protocol(e.to_string()))?;
        line.push('\n');
        ep.writer.write_all(line.as_bytes()).map_err(io_error)?;
        ep.writer.flush().map_err(io_error)?;

        let mut response = String::new();
        let n = ep.reader.read_line(&mut response).map_err(io_error)?;
        if n == 0 {
            return Err(VerifierError::Transport("endpoint closed".into()));
        }
        let parsed: ScoreResponse = serde_json::from_str(response.trim_end())
            .map_err(|e| VerifierError::Protocol(format!("{e}: {:?}", response.trim_end())))?;
        if !(-1.0..=1.0).contains(&parsed.score) {
            return Err(VerifierError::OutOfRange(parsed.score));
        }
        Ok(parsed.score)
    }
}

impl ExternalVerifier<TcpStream, TcpStream> {
    pub fn connect_tcp(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, VerifierError> {
        let stream = TcpStream::connect(addr).map_err(io_error)?;
        stream.set_read_timeout(Some(timeout)).map_err(io_error)?;
        stream.set_write_timeout(Some(timeout)).map_err(io_error)?;
        let reader = stream.try_clone().map_err(io_error)?;
        Ok(Self::new(reader, stream))
    }
}

fn io_error(e: io::Error) -> VerifierError {
    match e.kind() {
        io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => VerifierError::Timeout,
        _ => VerifierError::Transport(e.to_string()),
    }
}

impl<R: Read + Send, W: Write + Send> SemanticVerifier for ExternalVerifier<R, W> {
    fn score(&self, label: &str, obs: &Observation) -> Result<f64, VerifierError> {
        self.external_score(label, obs)
    }
}
