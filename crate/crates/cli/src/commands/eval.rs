//! `eval` and `slice-sim`: image-quality reports over sets of pairs.

use std::path::Path;

use serde::Serialize;
use slicesr::metrics::{
    comparison_table, evaluate_set, slice_similarity_study, EvalPair, SliceSimilarityReport,
    SsimOptions, SLICE_GROUPS,
};
use slicesr::pipeline::baseline_interpolate;
use slicesr::volume::{read_volume, Volume};

use super::write_text;
use crate::args::{EvalArgs, SliceSimArgs, SsimArgs};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pairs::{self, PairEntry, Role};

fn ssim_options(config: Option<&Path>, a: &SsimArgs) -> Result<SsimOptions> {
    let mut opts = RunConfig::load_or_default(config)?.ssim;
    opts.reduce_window |= a.reduce_window;
    Ok(opts)
}

fn read(p: &PairEntry, role: Role) -> Result<Volume> {
    let path = p.get(role).expect("complete pair");
    read_volume(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

struct Loaded {
    id: String,
    sr: Volume,
    hr: Volume,
    baseline: Option<Volume>,
}

/// Loads one pair, or explains why it cannot be scored.
fn load(p: &PairEntry, with_baseline: bool) -> Result<Result<Loaded, String>> {
    let sr = read(p, Role::Sr)?;
    let hr = read(p, Role::Thin)?;
    if sr.dims() != hr.dims() {
        return Ok(Err(format!("prediction {:?} vs reference {:?}", sr.dims(), hr.dims())));
    }
    let baseline = if with_baseline {
        let thick = read(p, Role::Thick)?;
        let (d, t) = (hr.depth(), thick.depth());
        if t == 0 || d % t != 0 || thick.dims()[1..] != hr.dims()[1..] {
            return Ok(Err(format!("thick {:?} does not tile reference {:?}", thick.dims(), hr.dims())));
        }
        Some(baseline_interpolate(&thick, d / t)?.volume)
    } else {
        None
    };
    Ok(Ok(Loaded {
        id: p.id.clone(),
        sr,
        hr,
        baseline,
    }))
}

pub fn run_eval(a: EvalArgs) -> Result<()> {
    let opts = ssim_options(a.config.as_deref(), &a.ssim)?;
    let entries = match (&a.manifest, &a.sr) {
        (Some(m), _) => pairs::read_manifest(m)?,
        (None, Some(sr)) => {
            let reference = a.reference.as_deref().unwrap_or(sr);
            pairs::scan(&[sr.as_path(), reference])?
        }
        (None, None) => unreachable!("clap requires --sr or --manifest"),
    };
    let mut roles = vec![Role::Sr, Role::Thin];
    if a.with_baseline {
        roles.push(Role::Thick);
    }
    let mut loaded = Vec::new();
    for p in pairs::complete(entries, &roles) {
        match load(&p, a.with_baseline)? {
            Ok(l) => loaded.push(l),
            Err(why) => log::warn!("skipping {}: {why}", p.id),
        }
    }
    if loaded.is_empty() {
        return Err(CliError::invalid("no scorable prediction/reference pairs"));
    }

    let model: Vec<EvalPair> = loaded
        .iter()
        .map(|l| EvalPair { id: &l.id, sr: &l.sr, hr: &l.hr })
        .collect();
    let mut reports = vec![evaluate_set("model", &model, &opts)?];
    if a.with_baseline {
        let cubic: Vec<EvalPair> = loaded
            .iter()
            .map(|l| EvalPair {
                id: &l.id,
                sr: l.baseline.as_ref().expect("baseline computed"),
                hr: &l.hr,
            })
            .collect();
        reports.push(evaluate_set("cubic", &cubic, &opts)?);
    }
    let text: String = reports.iter().map(|r| r.to_jsonl()).collect();
    write_text(&a.out, &text)?;
    print!("{}", comparison_table(&reports));
    for r in reports.iter().filter(|r| r.identical > 0) {
        println!("{}: {} pair(s) identical to the reference", r.label, r.identical);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct SliceSimRecord<'a> {
    kind: &'static str,
    id: &'a str,
    #[serde(flatten)]
    report: &'a SliceSimilarityReport,
}

pub fn run_slice_sim(a: SliceSimArgs) -> Result<()> {
    let opts = ssim_options(a.config.as_deref(), &a.ssim)?;
    let entries = match (&a.manifest, &a.data) {
        (Some(m), _) => pairs::read_manifest(m)?,
        (None, Some(d)) => pairs::scan(&[d])?,
        (None, None) => unreachable!("clap requires --data or --manifest"),
    };
    let mut reports = Vec::new();
    for p in pairs::complete(entries, &[Role::Thin, Role::Thick]) {
        let (thin, thick) = (read(&p, Role::Thin)?, read(&p, Role::Thick)?);
        if thin.dims()[1..] != thick.dims()[1..] {
            log::warn!("skipping {}: in-plane extents differ", p.id);
            continue;
        }
        reports.push((p.id, slice_similarity_study(&thick, &thin, &opts)?));
    }
    if reports.is_empty() {
        return Err(CliError::invalid("no thin/thick pairs to compare"));
    }

    let mut text = String::new();
    for (id, report) in &reports {
        let record = SliceSimRecord { kind: "slice_similarity", id, report };
        text.push_str(&serde_json::to_string(&record).expect("report serializes"));
        text.push('\n');
    }
    write_text(&a.out, &text)?;

    println!("{:<6} {:>7} {:>6} {:>12} {:>8}", "group", "offset", "pairs", "PSNR (dB)", "SSIM");
    for (name, offset) in SLICE_GROUPS {
        let groups: Vec<_> = reports.iter().filter_map(|(_, r)| r.group(name)).filter(|g| !g.absent).collect();
        let psnr: Vec<f64> = groups.iter().filter_map(|g| g.psnr.and_then(|p| p.db())).collect();
        let ssim: Vec<f64> = groups.iter().filter_map(|g| g.ssim).collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                "-".to_string()
            } else {
                format!("{:.3}", v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        println!(
            "{name:<6} {:>5}mm {:>6} {:>12} {:>8}",
            offset,
            groups.len(),
            mean(&psnr),
            mean(&ssim)
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
