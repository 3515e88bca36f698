//! Cubic through-plane interpolation used as the reference baseline.

use super::{PipelineError, Result};
use crate::volume::{IntensityUnit, Volume};

/// Catmull-Rom weights for fractional offset `t ∈ [0, 1)` applied to
/// samples at `−1, 0, 1, 2`.
pub fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Position of output slice `t` in input-slice coordinates when every input
/// slice is the centre of `r` output slices.
pub fn source_coordinate(t: usize, r: usize) -> f64 {
    (t as f64 + 0.5) / r as f64 - 0.5
}

/// Outcome of [`baseline_interpolate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolated {
    pub volume: Volume,
    /// Set when the input had a single slice and was repeated instead.
    pub repeated: bool,
}

/// Samples a column at integer index `i`, extending linearly beyond both
/// ends so linear ramps are reproduced exactly at the borders.
fn sample(col: &[f64], i: isize) -> f64 {
    let n = col.len() as isize;
    if i < 0 {
        col[0] + i as f64 * (col[1] - col[0])
    } else if i >= n {
        let last = col[(n - 1) as usize];
        last + (i - n + 1) as f64 * (last - col[(n - 2) as usize])
    } else {
        col[i as usize]
    }
}

/// `r×` Catmull-Rom upsampling along depth; in-plane untouched, output
/// clamped to `[0, 1]`. Output slice `t` sits at input coordinate
/// `(t + 0.5)/r − 0.5`. Depth spacing is divided by `r`.
pub fn baseline_interpolate(v: &Volume, r: usize) -> Result<Interpolated> {
    if r == 0 {
        return Err(PipelineError::Config(
            "upsampling factor must be >= 1".into(),
        ));
    }
    let v = crate::volume::normalize(v);
    let [d, h, w] = v.dims();
    let n = h * w;
    let out_d = r * d;
    let mut data = vec![0f32; out_d * n];
    let repeated = d < 2;
    if repeated {
        for t in 0..out_d {
            data[t * n..(t + 1) * n].copy_from_slice(v.slice(t / r));
        }
    } else {
        let taps: Vec<(isize, [f64; 4])> = (0..out_d)
            .map(|t| {
                let u = source_coordinate(t, r);
                let f = u.floor();
                (f as isize, catmull_rom_weights(u - f))
            })
            .collect();
        let mut col = vec![0f64; d];
        for p in 0..n {
            for (z, c) in col.iter_mut().enumerate() {
                *c = v.data()[z * n + p] as f64;
            }
            for (t, (base, wts)) in taps.iter().enumerate() {
                let val: f64 = (0..4)
                    .map(|j| wts[j] * sample(&col, base - 1 + j as isize))
                    .sum();
                data[t * n + p] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let [sz, sy, sx] = v.spacing_mm();
    let volume = Volume::new(
        [out_d, h, w],
        [sz / r as f64, sy, sx],
        IntensityUnit::Normalized,
        data,
    )?;
    Ok(Interpolated { volume, repeated })
}
