//! Subcommand implementations.

use std::path::Path;

use slicesr::io_util::write_atomic;
use slicesr::volume::{generate_phantom, make_pseudo_lr, write_volume, FactorDecision};

use crate::args::{Command, GenPhantomArgs, Given, PseudoLrArgs};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pairs::{role_path, volume_id, Role};

mod eval;
mod infer;
mod train;

pub fn run(command: Command, given: Given<'_>) -> Result<()> {
    match command {
        Command::GenPhantom(a) => gen_phantom(a, given),
        Command::MakePseudoLr(a) => pseudo_lr(a, given),
        Command::Train(a) => train::run(a, given),
        Command::Infer(a) => infer::run(a, given),
        Command::Eval(a) => eval::run_eval(a),
        Command::SliceSim(a) => eval::run_slice_sim(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

/// Writes `text` to `path` atomically.
fn write_text(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    write_atomic(path, |f| f.write_all(text.as_bytes()))
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn gen_phantom(a: GenPhantomArgs, given: Given<'_>) -> Result<()> {
    let mut spec = RunConfig::load_or_default(a.config.as_deref())?.phantom;
    given.set("seed", &mut spec.seed, &a.seed);
    given.set("dims", &mut spec.dims, &a.dims);
    given.set("spacing", &mut spec.spacing_mm, &a.spacing);
    given.set("thick_factor", &mut spec.thick_factor, &a.thick_factor);
    given.set("noise_sigma", &mut spec.noise_sigma, &a.noise_sigma);
    spec.validate()?;
    create_dir(&a.out)?;
    let (thin, thick) = generate_phantom(&spec)?;
    for (v, role) in [(&thin, Role::Thin), (&thick, Role::Thick)] {
        let path = role_path(&a.out, &a.stem, role);
        write_volume(v, &path)?;
        println!("wrote {} {:?} @ {:?} mm", path.display(), v.dims(), v.spacing_mm());
    }
    Ok(())
}

fn pseudo_lr(a: PseudoLrArgs, given: Given<'_>) -> Result<()> {
    let mut rule = RunConfig::load_or_default(a.config.as_deref())?.pseudo_lr;
    given.set("max_thickness", &mut rule.max_thickness_mm, &a.max_thickness);
    given.set("min_slices", &mut rule.min_slices, &a.min_slices);
    let v = slicesr::volume::read_volume(&a.input)
        .map_err(|e| CliError::runtime(format!("{}: {e}", a.input.display())))?;
    let spacing = v.spacing_mm()[0];
    for d in rule.decide(v.depth(), spacing) {
        match d {
            FactorDecision::Accepted { k, thickness_mm, slices } => {
                println!("k={k}: accepted ({thickness_mm} mm, {slices} slices)")
            }
            FactorDecision::TooThick { k, thickness_mm } => println!(
                "k={k}: rejected, {thickness_mm} mm exceeds {} mm",
                rule.max_thickness_mm
            ),
            FactorDecision::TooFewSlices { k, slices } => println!(
                "k={k}: rejected, {slices} slices is below {}",
                rule.min_slices
            ),
        }
    }
    let outputs = make_pseudo_lr(&v, &rule);
    if outputs.is_empty() {
        log::warn!("{}: no admissible factor, nothing written", a.input.display());
        return Ok(());
    }
    create_dir(&a.out)?;
    let id = volume_id(&a.input);
    for p in outputs {
        let path = a.out.join(format!("{id}.pseudo-k{}.{}", p.k, crate::pairs::EXTENSION));
        write_volume(&p.volume, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
