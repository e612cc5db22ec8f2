use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use mapo::config::RunConfig;
use mapo::env::{self, Attribute, ObservationKind, Scene};
use mapo::optim::{self, Trainer};
use mapo::policy::{PolicyParams, Trajectory, World};
use mapo::protocol;
use mapo::seed::{self, tag};
use mapo::theorylab::{self, ToyPolicy};

use crate::run::{self, MetricsSink, RunLock};
use crate::{CliError, ConvergenceArgs, EvalArgs, Experiment, Prop1Args, Prop2Args, ReplayArgs, SceneGenArgs, TheoryArgs, TrainArgs};

fn io_out(e: std::io::Error) -> CliError {
    CliError::Runtime(format!("writing output: {e}"))
}

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = args.out.as_path();
    let (config, state, mut sink, _lock);
    if args.resume {
        if args.config.is_some() {
            return Err(CliError::Usage("--resume reads the config from the run directory; drop --config".into()));
        }
        _lock = RunLock::acquire(dir)?;
        let bundle = run::load_run(dir)?;
        let loaded = match run::latest_checkpoint(dir)? {
            Some(k) => run::load_state(&run::policy_checkpoint(dir, k), &run::optim_checkpoint(dir, k))?,
            None => return Err(CliError::CorruptRun("no checkpoint to resume from".into())),
        };
        if bundle.records.len() < loaded.iteration {
            return Err(CliError::CorruptRun(format!(
                "checkpoint at iteration {} but only {} metrics records",
                loaded.iteration,
                bundle.records.len()
            )));
        }
        sink = MetricsSink::truncate_to(dir, loaded.iteration)?;
        writeln!(out, "resuming {} at iteration {}", dir.display(), loaded.iteration).map_err(io_out)?;
        config = bundle.config;
        state = Some(loaded);
    } else {
        let path = args.config.as_deref().ok_or_else(|| CliError::Usage("train needs --config (or --resume)".into()))?;
        let mut cfg = run::load_config(path)?;
        run::apply_seed_override(&mut cfg)?;
        if let Err((key, reason)) = cfg.validate() {
            return Err(CliError::Usage(format!("invalid {key}: {reason}")));
        }
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        _lock = RunLock::acquire(dir)?;
        if run::metrics_path(dir).exists() {
            return Err(CliError::Runtime(format!("{} already holds a run; use --resume", dir.display())));
        }
        let header = run::create_run(dir, &cfg)?;
        sink = MetricsSink::create(dir, &header)?;
        config = cfg;
        state = None;
    }

    let world = World::from_config(&config)?;
    let mut trainer = match state {
        Some(s) => Trainer::with_state(config.clone(), &world.space, s)?,
        None => Trainer::new(config.clone(), &world.space)?,
    };
    if trainer.state.iteration == 0 {
        run::save_state(dir, &trainer.state)?;
    }
    let every = config.checkpoint_every.max(1);
    let mut last = None;
    while !trainer.is_finished() {
        if trainer.state.iteration + 1 == config.iterations {
            run::write_atomic(&run::behavior_policy(dir), &trainer.params().to_checkpoint_bytes())?;
            run::write_atomic(&run::behavior_optim(dir), &trainer.state.optimizer_bytes())?;
        }
        let m = trainer.run_iteration()?;
        sink.append(&m)?;
        if trainer.state.iteration % every == 0 || trainer.is_finished() {
            run::save_state(dir, &trainer.state)?;
        }
        last = Some(m);
    }
    let final_iter = config.iterations - 1;
    let records: Vec<String> =
        optim::iteration_tasks(&world, &config, final_iter)?.iter().map(|(s, _)| s.to_record()).collect();
    run::write_atomic(&run::scenes_path(dir), records.join("\n").as_bytes())?;

    match last {
        Some(m) => writeln!(
            out,
            "trained {} iterations: mean_r_out={:.4} mean_r_sem={:.4} accuracy={:.4} mean_turns={:.3}",
            config.iterations, m.mean_r_out, m.mean_r_sem, m.accuracy, m.mean_turns
        ),
        None => writeln!(out, "run already complete ({} iterations)", config.iterations),
    }
    .map_err(io_out)?;
    writeln!(out, "run directory: {}", dir.display()).map_err(io_out)
}

/// Config for a checkpoint: explicit path, else the run's config.txt.
fn checkpoint_config(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig, CliError> {
    if let Some(p) = explicit {
        return run::load_config(p);
    }
    let sibling = checkpoint.parent().and_then(Path::parent).map(run::config_path);
    match sibling {
        Some(p) if p.exists() => run::load_config(&p),
        _ => Ok(RunConfig::default()),
    }
}

fn load_params(path: &Path, world: &World) -> Result<PolicyParams, CliError> {
    let params = PolicyParams::from_checkpoint_bytes(&run::read_bytes(path)?)?;
    world.check_params(&params)?;
    Ok(params)
}

pub fn eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.scenes == 0 {
        return Err(CliError::Usage("--scenes must be positive".into()));
    }
    let config = checkpoint_config(&args.checkpoint, args.config.as_deref())?;
    let world = World::from_config(&config)?;
    let params = load_params(&args.checkpoint, &world)?;
    let r = optim::evaluate(&params, &world, &config, &world.space, args.scenes, args.seed)?;
    writeln!(
        out,
        "scenes={} accuracy={:.4} mean_sem={:.4} mean_turns={:.3}",
        r.scenes, r.accuracy, r.mean_sem, r.mean_turns
    )
    .map_err(io_out)
}

fn emit_rows<T: Serialize>(rows: &[T], csv_path: Option<&Path>, summary: &str, out: &mut dyn Write) -> Result<(), CliError> {
    let write_csv = |w: &mut dyn Write| -> Result<(), CliError> {
        let mut writer = csv::Writer::from_writer(w);
        for r in rows {
            writer.serialize(r).map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
        }
        writer.flush().map_err(io_out)
    };
    match csv_path {
        Some(p) => {
            let mut buf = Vec::new();
            write_csv(&mut buf)?;
            run::write_atomic(p, &buf)?;
            out.write_all(summary.as_bytes()).map_err(io_out)
        }
        None => write_csv(out),
    }
}

pub fn theory(args: &TheoryArgs, out: &mut dyn Write) -> Result<(), CliError> {
    match &args.experiment {
        Experiment::Prop1(a) => prop1(a, out),
        Experiment::Prop2(a) => prop2(a, out),
        Experiment::Convergence(a) => convergence(a, out),
    }
}

fn prop1(a: &Prop1Args, out: &mut dyn Write) -> Result<(), CliError> {
    let rows = theorylab::prop1_experiment(&a.rho, a.sigma2, a.g, a.trials, a.seed)?;
    let mut s = format!("{:>6} {:>10} {:>12} {:>12} {:>9}\n", "rho", "trials", "analytic", "empirical", "rel_err");
    for r in &rows {
        let _ = writeln!(s, "{:>6} {:>10} {:>12.6} {:>12.6} {:>9.4}", r.rho, r.trials, r.analytic_var, r.empirical_var, r.relative_error);
    }
    emit_rows(&rows, a.csv.as_deref(), &s, out)
}

fn prop2(a: &Prop2Args, out: &mut dyn Write) -> Result<(), CliError> {
    let toy = if a.raw { ToyPolicy::raw() } else { ToyPolicy::default() };
    let mut rows = theorylab::prop2_experiment(&a.p, a.sigma_sem, a.trials, &toy, a.seed)?;
    if let Some(ckpt) = &a.checkpoint {
        let config = checkpoint_config(ckpt, a.config.as_deref())?;
        let world = World::from_config(&config)?;
        let params = load_params(ckpt, &world)?;
        let task = theorylab::in_situ_task(&world, seed::derive(&[tag::THEORY, a.seed]))?;
        rows.push(theorylab::prop2_in_situ(&params, &world, &config, &world.space, &task, a.sigma_sem, a.trials.min(20_000), a.seed)?);
    }
    let mut s = format!("{:>8} {:>10} {:>12} {:>12} {:>8}\n", "p", "trials", "var_g_out", "var_g_sem", "ratio");
    for r in &rows {
        let _ = writeln!(s, "{:>8.4} {:>10} {:>12.6} {:>12.6} {:>8.3}", r.p, r.trials, r.var_g_out, r.var_g_sem, r.ratio);
    }
    emit_rows(&rows, a.csv.as_deref(), &s, out)
}

fn convergence(a: &ConvergenceArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let rows = theorylab::convergence_experiment(a.l, a.delta, &a.sigma2, &a.t, a.reps, a.seed)?;
    let mut s = format!("{:>7} {:>7} {:>14} {:>10} {:>4}\n", "sigma2", "T", "min_grad_sq", "bound", "ok");
    for r in &rows {
        let _ = writeln!(s, "{:>7} {:>7} {:>14.6e} {:>10.6} {:>4}", r.sigma2, r.t, r.min_grad_norm2, r.bound, r.satisfied);
    }
    emit_rows(&rows, a.csv.as_deref(), &s, out)
}

pub fn scene_gen(a: &SceneGenArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let world_vocab = env::Vocabulary::default();
    let records: Vec<String> = (0..a.n)
        .map(|k| {
            env::sample_task(&world_vocab, seed::derive(&[tag::SCENE, a.seed, k as u64]), a.grid)
                .map(|(s, _)| s.to_record())
        })
        .collect::<Result<_, _>>()?;
    run::write_atomic(&a.out, records.join("\n").as_bytes())?;
    writeln!(out, "wrote {} scenes to {}", a.n, a.out.display()).map_err(io_out)
}

/// Splits a scenes file into records; each starts with a header line.
pub fn parse_scene_file(text: &str, vocab: &env::Vocabulary) -> Result<Vec<Scene>, CliError> {
    let mut chunks: Vec<String> = Vec::new();
    for line in text.lines() {
        if line.starts_with(env::SCENE_RECORD_MAGIC) || chunks.is_empty() {
            chunks.push(String::new());
        }
        let chunk = chunks.last_mut().expect("pushed above");
        chunk.push_str(line);
        chunk.push('\n');
    }
    chunks
        .iter()
        .filter(|c| !c.trim().is_empty())
        .map(|c| Scene::from_record(c, vocab).map_err(CliError::from))
        .collect()
}

pub fn replay(a: &ReplayArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let text = replay_transcript(&a.run, a.index)?;
    out.write_all(text.as_bytes()).map_err(io_out)
}

/// Re-samples the final iteration from the stored behaviour snapshot and
/// renders trajectory `index` with rewards and advantages.
pub fn replay_transcript(dir: &Path, index: usize) -> Result<String, CliError> {
    let bundle = run::load_run(dir)?;
    let config = bundle.config;
    let world = World::from_config(&config)?;
    let state = run::load_state(&run::behavior_policy(dir), &run::behavior_optim(dir))
        .map_err(|e| CliError::CorruptRun(format!("behaviour snapshot: {e}")))?;
    let iter = config.iterations - 1;
    if state.iteration != iter {
        return Err(CliError::CorruptRun("behaviour snapshot is not from the final iteration".into()));
    }
    let tasks = optim::iteration_tasks(&world, &config, iter)?;
    let saved = parse_scene_file(&run::read_to_string(&run::scenes_path(dir))?, &world.vocab)?;
    if saved.len() != tasks.len() || saved.iter().zip(&tasks).any(|(s, (t, _))| s != t) {
        return Err(CliError::CorruptRun("saved scenes differ from the regenerated final iteration".into()));
    }
    let total = tasks.len() * config.group_size;
    if index >= total {
        return Err(CliError::Usage(format!("--index must be below {total}")));
    }
    let params = &state.optimizer.params;
    let groups = optim::sample_groups(params, &world, &config, &world.space, iter, &tasks)?;
    let mut baseline = state.baseline;
    let scored = optim::score_groups(groups, &config, &mut baseline)?;
    let (q, member) = (index / config.group_size, index % config.group_size);
    let batch = &scored[q];
    Ok(render(&world, &tasks[q].0, &batch.trajectories[member], iter, q, member, [
        batch.a_out[member],
        batch.a_sem[member],
        batch.a_tilde[member],
    ]))
}

fn render(world: &World, scene: &Scene, t: &Trajectory, iter: usize, q: usize, member: usize, adv: [f64; 3]) -> String {
    let v = &world.vocab;
    let attr = match t.query.asked_attribute {
        Attribute::Color => "color",
        Attribute::Size => "size",
    };
    let class = &v.classes[t.query.target_class];
    let mut s = String::new();
    let _ = writeln!(s, "# iteration {iter}, query {q}, member {member}, scene seed {}", scene.seed);
    let _ = writeln!(s, "user: What is the {attr} of the {class}?");
    for step in &t.steps {
        match (&step.tool_call, &step.observation) {
            (Some(call), Some(obs)) => {
                let block = protocol::serialize_tool_call(call).unwrap_or_else(|e| format!("<invalid tool call: {e}>"));
                let _ = writeln!(s, "assistant: {block}");
                let what = match obs.kind {
                    ObservationKind::Blank => "blank".to_string(),
                    _ => format!("cells {:?}", obs.covered_cells),
                };
                let _ = writeln!(s, "observation: <image> {what} z={:.6}", step.z.unwrap_or(0.0));
            }
            _ => {
                let name = v.answer_name(t.answer).unwrap_or("?");
                let verdict = if t.r_out == 1 { "correct" } else { "wrong" };
                let _ = writeln!(s, "assistant: answer: {name} ({verdict})");
            }
        }
    }
    let _ = writeln!(s, "rewards: r_out={} r_sem={:.6}", t.r_out, t.r_sem);
    let _ = writeln!(s, "advantages: a_out={:.6} a_sem={:.6} a_tilde={:.6}", adv[0], adv[1], adv[2]);
    s
}
