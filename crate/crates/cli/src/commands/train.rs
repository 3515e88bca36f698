//! `train`: fit a model on thin/thick pairs, with checkpoints and resume.

use std::path::{Path, PathBuf};

use slicesr::model::{load_checkpoint, save_checkpoint, ModelConfig};
use slicesr::pipeline::{format_trace, DataSource, TrainConfig, TrainState, TrainingPair};
use slicesr::volume::{read_volume, PatchSpec, Volume};

use super::{create_dir, write_text};
use crate::args::{Given, ModelArgs, TrainArgs};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pairs::{self, Role};

const MODEL_FLAGS: [&str; 7] = ["variant", "embed_dim", "heads", "encoder_depth", "n_fim", "window", "r"];

pub fn run(a: TrainArgs, given: Given<'_>) -> Result<()> {
    let (mut state, cfg) = match &a.resume {
        Some(path) => resume(path, &a, &given)?,
        None => {
            let run = RunConfig::load_or_default(a.config.as_deref())?;
            let model = model_config(run.model, &a.model, &given);
            let cfg = train_config(run.train, &a, &given);
            cfg.validate()?;
            (TrainState::new(model, &cfg)?, cfg)
        }
    };
    let r = state.model.config().r;
    let data = load_data(&a, r)?;
    log::info!(
        "{} model, {} parameters; {} real, {} pseudo, {} validation pairs",
        state.model.config().variant,
        state.model.param_count(),
        data.real.len(),
        data.pseudo.len(),
        data.validation.len()
    );
    // Fail before creating the run directory.
    data.validate(r, &cfg.patch)?;
    if state.step >= cfg.steps {
        log::warn!("checkpoint already has {} of {} steps", state.step, cfg.steps);
    }

    create_dir(&a.out)?;
    let out = a.out.clone();
    let start = state.step;
    let log_every = (cfg.steps / 20).max(1);
    state.train(&data, &cfg, |s| {
        let last = s.trace.last().expect("a step was recorded");
        if s.step % log_every == 0 || s.step == cfg.steps {
            log::info!("step {}/{} loss {:.6}", s.step, cfg.steps, last.loss);
        }
        if cfg.checkpoint_interval > 0 && s.step % cfg.checkpoint_interval == 0 {
            save_checkpoint(&s.to_checkpoint(&cfg), out.join(format!("step-{}.ckpt", s.step)))?;
        }
        Ok(())
    })?;

    let final_path = out.join("final.ckpt");
    save_checkpoint(&state.to_checkpoint(&cfg), &final_path)?;
    write_text(&out.join("trace.csv"), &format_trace(&state.trace))?;
    if !state.validation.is_empty() {
        write_text(&out.join("validation.csv"), &format_trace(&state.validation))?;
    }
    let first = state.trace.first().map_or(f64::NAN, |r| r.loss);
    let last = state.trace.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained steps {start}..{}; loss {first:.6} -> {last:.6}; wrote {}",
        state.step,
        final_path.display()
    );
    Ok(())
}

fn resume(path: &Path, a: &TrainArgs, given: &Given<'_>) -> Result<(TrainState, TrainConfig)> {
    let ckpt = load_checkpoint(path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let (state, mut cfg) = TrainState::from_checkpoint(ckpt)?;
    for flag in MODEL_FLAGS {
        if given.has(flag) {
            log::warn!("--{} ignored: the model comes from the checkpoint", flag.replace('_', "-"));
        }
    }
    // Only the schedule may change on resume; everything else would break
    // the continuation guarantee.
    given.set("steps", &mut cfg.steps, &a.steps);
    given.set("checkpoint_interval", &mut cfg.checkpoint_interval, &a.checkpoint_interval);
    given.set("validation_interval", &mut cfg.validation_interval, &a.validation_interval);
    cfg.validate()?;
    log::info!("resuming {} at step {}", path.display(), state.step);
    Ok((state, cfg))
}

fn model_config(mut m: ModelConfig, a: &ModelArgs, given: &Given<'_>) -> ModelConfig {
    given.set("variant", &mut m.variant, &a.variant);
    given.set("embed_dim", &mut m.embed_dim, &a.embed_dim);
    given.set("heads", &mut m.heads, &a.heads);
    given.set("encoder_depth", &mut m.encoder_depth, &a.encoder_depth);
    given.set("n_fim", &mut m.n_fim, &a.n_fim);
    given.set("window", &mut m.window, &a.window);
    given.set("r", &mut m.r, &a.r);
    m
}

fn train_config(mut c: TrainConfig, a: &TrainArgs, given: &Given<'_>) -> TrainConfig {
    given.set("steps", &mut c.steps, &a.steps);
    given.set("lr", &mut c.lr, &a.lr);
    given.set("seed", &mut c.seed, &a.seed);
    given.set("batch_size", &mut c.batch_size, &a.batch_size);
    if given.has("patch") {
        let [depth, height, width] = a.patch;
        c.patch = PatchSpec { depth, height, width };
    }
    given.set("checkpoint_interval", &mut c.checkpoint_interval, &a.checkpoint_interval);
    given.set("validation_interval", &mut c.validation_interval, &a.validation_interval);
    given.set("real_only_steps", &mut c.real_only_steps, &a.real_only_steps);
    given.set("pseudo_fraction", &mut c.pseudo_fraction, &a.pseudo_fraction);
    if a.no_flip {
        c.flip = false;
    }
    c
}

fn read(path: &Path) -> Result<Volume> {
    read_volume(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn load_pairs(entries: Vec<pairs::PairEntry>) -> Result<Vec<TrainingPair>> {
    pairs::complete(entries, &[Role::Thin, Role::Thick])
        .into_iter()
        .map(|p| {
            let thin = read(p.get(Role::Thin).expect("complete pair"))?;
            let thick = read(p.get(Role::Thick).expect("complete pair"))?;
            Ok(TrainingPair::new(p.id, &thick, &thin))
        })
        .collect()
}

fn vsrv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| CliError::invalid(format!("cannot list {}: {e}", dir.display())))?
    {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == pairs::EXTENSION) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn load_data(a: &TrainArgs, r: usize) -> Result<DataSource> {
    let entries = match (&a.manifest, &a.data) {
        (Some(m), _) => pairs::read_manifest(m)?,
        (None, Some(d)) => pairs::scan(&[d])?,
        (None, None) => unreachable!("clap requires --data or --manifest"),
    };
    let real = load_pairs(entries)?;
    if real.is_empty() {
        return Err(CliError::invalid("no complete thin/thick training pairs found"));
    }
    let pseudo = match &a.pseudo {
        Some(dir) => vsrv_files(dir)?
            .iter()
            .map(|path| {
                let v = read(path)?;
                Ok(TrainingPair::from_target(pairs::volume_id(path), &v, r)?)
            })
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let validation = match &a.validation {
        Some(dir) => load_pairs(pairs::scan(&[dir])?)?,
        None => Vec::new(),
    };
    Ok(DataSource {
        real,
        pseudo,
        validation,
    })
}
