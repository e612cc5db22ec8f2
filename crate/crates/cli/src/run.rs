//! Run directory layout, header hashing, locking and checkpoints.
//!
//! ```text
//! DIR/config.txt            canonical config
//! DIR/metrics.jsonl         header line, then one record per iteration
//! DIR/checkpoints/          policy-NNNNNN.bin, optim-NNNNNN.bin, behavior-final.*
//! DIR/scenes/final.txt      scene records of the last iteration
//! DIR/run.lock              present while a process owns the directory
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mapo::config::RunConfig;
use mapo::optim::{IterationMetrics, TrainState};
use mapo::policy::PolicyParams;

use crate::CliError;

pub const CODE_VERSION: &str = concat!("mapo-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub config_hash: String,
    pub master_seed: u64,
    pub start_time: u64,
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunBundle {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub header: RunHeader,
    pub records: Vec<IterationMetrics>,
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_path(dir: &Path) -> PathBuf {
    dir.join("config.txt")
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.jsonl")
}

pub fn checkpoint_dir(dir: &Path) -> PathBuf {
    dir.join("checkpoints")
}

pub fn policy_checkpoint(dir: &Path, iteration: usize) -> PathBuf {
    checkpoint_dir(dir).join(format!("policy-{iteration:06}.bin"))
}

pub fn optim_checkpoint(dir: &Path, iteration: usize) -> PathBuf {
    checkpoint_dir(dir).join(format!("optim-{iteration:06}.bin"))
}

pub fn behavior_policy(dir: &Path) -> PathBuf {
    checkpoint_dir(dir).join("behavior-final.bin")
}

pub fn behavior_optim(dir: &Path) -> PathBuf {
    checkpoint_dir(dir).join("behavior-final.optim")
}

pub fn scenes_path(dir: &Path) -> PathBuf {
    dir.join("scenes").join("final.txt")
}

pub fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(CliError::io(path))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(CliError::io(path))
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    RunConfig::parse(&read_to_string(path)?).map_err(|source| CliError::Config { path: path.into(), source })
}

/// Applies the `MAPO_SEED` override, if set.
pub fn apply_seed_override(config: &mut RunConfig) -> Result<(), CliError> {
    if let Ok(v) = std::env::var("MAPO_SEED") {
        config.seed = v.trim().parse().map_err(|_| CliError::Usage(format!("MAPO_SEED must be an integer, got {v:?}")))?;
    }
    Ok(())
}

/// Writes `bytes` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(CliError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(CliError::io(path))
}

/// Exclusive ownership of a run directory; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("run.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.into())),
            Err(e) => Err(CliError::Io { path, source: e }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Appends whole lines to metrics.jsonl, one write per record.
pub struct MetricsSink {
    path: PathBuf,
    file: File,
}

impl MetricsSink {
    pub fn create(dir: &Path, header: &RunHeader) -> Result<Self, CliError> {
        let path = metrics_path(dir);
        let mut line = serde_json::to_string(header).expect("header serializes");
        line.push('\n');
        write_atomic(&path, line.as_bytes())?;
        Self::open(dir)
    }

    fn open(dir: &Path) -> Result<Self, CliError> {
        let path = metrics_path(dir);
        let file = OpenOptions::new().append(true).open(&path).map_err(CliError::io(&path))?;
        Ok(Self { path, file })
    }

    /// Reopens an existing run, keeping the header and the first `keep`
    /// records byte for byte.
    pub fn truncate_to(dir: &Path, keep: usize) -> Result<Self, CliError> {
        let path = metrics_path(dir);
        let text = read_to_string(&path)?;
        let kept: String = text.lines().take(keep + 1).flat_map(|l| [l, "\n"]).collect();
        if kept.lines().count() != keep + 1 {
            return Err(CliError::CorruptRun(format!("metrics.jsonl has fewer than {keep} records")));
        }
        write_atomic(&path, kept.as_bytes())?;
        Self::open(dir)
    }

    pub fn append(&mut self, record: &IterationMetrics) -> Result<(), CliError> {
        let finite = [record.mean_r_out, record.mean_r_sem, record.accuracy, record.mean_turns, record.lr]
            .iter()
            .chain(record.grad_norm.iter())
            .chain(record.rho_hat.iter())
            .all(|x| x.is_finite());
        if !finite {
            return Err(CliError::Runtime(format!("iteration {} produced a non-finite metric", record.iter)));
        }
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(CliError::io(&self.path))?;
        self.file.flush().map_err(CliError::io(&self.path))
    }
}

pub fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Initialises a fresh run directory and returns its header.
pub fn create_run(dir: &Path, config: &RunConfig) -> Result<RunHeader, CliError> {
    let text = config.to_text();
    write_atomic(&config_path(dir), text.as_bytes())?;
    Ok(RunHeader {
        config_hash: config_hash(&text),
        master_seed: config.seed,
        start_time: unix_time(),
        code_version: CODE_VERSION.to_string(),
    })
}

/// Reads a run directory and checks the header hash against config.txt.
pub fn load_run(dir: &Path) -> Result<RunBundle, CliError> {
    let text = read_to_string(&config_path(dir))?;
    let metrics = read_to_string(&metrics_path(dir))?;
    let mut lines = metrics.lines();
    let header: RunHeader = lines
        .next()
        .and_then(|l| serde_json::from_str(l).ok())
        .ok_or_else(|| CliError::CorruptRun("metrics.jsonl has no valid header".into()))?;
    if config_hash(&text) != header.config_hash {
        return Err(CliError::CorruptRun("config.txt does not match the header hash".into()));
    }
    let config = RunConfig::parse(&text)
        .map_err(|e| CliError::CorruptRun(format!("config.txt does not parse: {e}")))?;
    if config.seed != header.master_seed {
        return Err(CliError::CorruptRun("header seed differs from config seed".into()));
    }
    let mut records: Vec<IterationMetrics> = Vec::new();
    for (i, line) in lines.enumerate() {
        let r: IterationMetrics = serde_json::from_str(line)
            .map_err(|e| CliError::CorruptRun(format!("metrics record {}: {e}", i + 1)))?;
        if r.iter != i {
            return Err(CliError::CorruptRun(format!("metrics record {} has iteration {}", i + 1, r.iter)));
        }
        records.push(r);
    }
    Ok(RunBundle { dir: dir.into(), config, header, records })
}

pub fn save_state(dir: &Path, state: &TrainState) -> Result<(), CliError> {
    write_atomic(&policy_checkpoint(dir, state.iteration), &state.optimizer.params.to_checkpoint_bytes())?;
    write_atomic(&optim_checkpoint(dir, state.iteration), &state.optimizer_bytes())
}

pub fn load_state(policy: &Path, optim: &Path) -> Result<TrainState, CliError> {
    let params = PolicyParams::from_checkpoint_bytes(&read_bytes(policy)?)?;
    Ok(TrainState::from_parts(params, &read_bytes(optim)?)?)
}

/// Highest iteration that has both a policy and an optimizer checkpoint.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<usize>, CliError> {
    let cdir = checkpoint_dir(dir);
    if !cdir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(&cdir).map_err(CliError::io(&cdir))? {
        let name = entry.map_err(CliError::io(&cdir))?.file_name();
        let name = name.to_string_lossy();
        let Some(n) = name.strip_prefix("policy-").and_then(|s| s.strip_suffix(".bin")) else { continue };
        let Ok(n) = n.parse::<usize>() else { continue };
        if optim_checkpoint(dir, n).exists() && best.is_none_or(|b| n > b) {
            best = Some(n);
        }
    }
    Ok(best)
}
