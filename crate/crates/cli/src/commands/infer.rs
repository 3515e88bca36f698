//! `infer`: sliding-window super-resolution of one volume.

use slicesr::model::{load_checkpoint, Tvsrn};
use slicesr::pipeline::{infer, TrainedModel};
use slicesr::volume::{denormalize, read_volume, write_volume};

use crate::args::{Given, InferArgs};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub fn run(a: InferArgs, given: Given<'_>) -> Result<()> {
    let mut spec = RunConfig::load_or_default(a.config.as_deref())?.inference;
    given.set("window_depth", &mut spec.window_depth, &a.window_depth);
    given.set("overlap", &mut spec.overlap, &a.overlap);
    spec.validate()?;

    let ckpt = load_checkpoint(&a.checkpoint)
        .map_err(|e| CliError::runtime(format!("{}: {e}", a.checkpoint.display())))?;
    let model_r = ckpt.config.r;
    // An explicit factor is a claim about the checkpoint; check it rather
    // than silently following either side.
    spec.r = a.r.unwrap_or(model_r);
    let model = TrainedModel {
        model: Tvsrn::new(ckpt.config)?,
        params: ckpt.params,
    };
    let input = read_volume(&a.input)
        .map_err(|e| CliError::runtime(format!("{}: {e}", a.input.display())))?;
    let out = infer(&model, &input, &spec, a.workers)?;
    let volume = if a.hu { denormalize(&out.volume) } else { out.volume };
    write_volume(&volume, &a.out)?;
    println!(
        "wrote {} {:?} from {} windows (r={model_r})",
        a.out.display(),
        volume.dims(),
        out.windows
    );
    Ok(())
}
