//! Sliding-window volumetric inference with overlap averaging.

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::model::Tvsrn;
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::volume::{normalize, IntensityUnit, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSpec {
    /// Thick slices per window.
    pub window_depth: usize,
    /// Slices shared by consecutive windows.
    pub overlap: usize,
    /// Output slices per input slice.
    pub r: usize,
}

impl Default for InferenceSpec {
    fn default() -> Self {
        InferenceSpec {
            window_depth: 4,
            overlap: 1,
            r: 4,
        }
    }
}

impl InferenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window_depth == 0 || self.overlap >= self.window_depth || self.r == 0 {
            return Err(PipelineError::Config(format!(
                "need window_depth >= 1, overlap < window_depth and r >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.window_depth - self.overlap
    }
}

/// Window start indices: multiples of the stride until the final window
/// reaches the last slice.
pub fn window_starts(depth: usize, spec: &InferenceSpec) -> Vec<usize> {
    let mut starts = vec![0];
    let mut s = 0;
    while s + spec.window_depth < depth {
        s += spec.stride();
        starts.push(s);
    }
    starts
}

/// One input window `[1, 1, window_depth, H, W]` and its first slice index.
#[derive(Debug, Clone, PartialEq)]
pub struct InputWindow {
    pub start: usize,
    pub tensor: Tensor<f32>,
}

/// Cuts `v` into depth windows; slices past the end repeat the last slice.
pub fn extract_windows(v: &Volume, spec: &InferenceSpec) -> Result<Vec<InputWindow>> {
    spec.validate()?;
    let [d, h, w] = v.dims();
    Ok(window_starts(d, spec)
        .into_iter()
        .map(|start| {
            let mut data = Vec::with_capacity(spec.window_depth * h * w);
            for z in start..start + spec.window_depth {
                data.extend_from_slice(v.slice(z.min(d - 1)));
            }
            InputWindow {
                start,
                tensor: Tensor::new([1, 1, spec.window_depth, h, w], data).expect("positive dims"),
            }
        })
        .collect())
}

/// Averages window outputs into a depth `r·depth_in` buffer. Window `i`
/// covers output slices `[r·start, r·(start + window_depth))`; slices past
/// `r·depth_in` (from padding) are dropped. Contributions are summed in
/// `f64` in ascending start order, so the result does not depend on the
/// order of `outputs`.
pub fn assemble(
    outputs: &[(usize, Tensor<f32>)],
    depth_in: usize,
    spec: &InferenceSpec,
) -> Result<Tensor<f32>> {
    spec.validate()?;
    let first = outputs
        .first()
        .ok_or_else(|| PipelineError::Config("no window outputs to assemble".into()))?;
    let sh = first.1.shape().to_vec();
    let out_win = spec.r * spec.window_depth;
    if sh.len() != 5 || sh[0] != 1 || sh[1] != 1 || sh[2] != out_win {
        return Err(PipelineError::Shape(format!(
            "window output {sh:?} is not [1, 1, {out_win}, H, W]"
        )));
    }
    let (h, w) = (sh[3], sh[4]);
    let plane = h * w;
    let out_d = spec.r * depth_in;
    let mut order: Vec<&(usize, Tensor<f32>)> = outputs.iter().collect();
    order.sort_by_key(|(s, _)| *s);
    let mut sum = vec![0f64; out_d * plane];
    let mut count = vec![0u32; out_d];
    for (start, t) in order {
        if t.shape() != sh.as_slice() {
            return Err(PipelineError::Shape(format!(
                "window outputs disagree: {:?} vs {sh:?}",
                t.shape()
            )));
        }
        let z0 = spec.r * start;
        for dz in 0..out_win {
            let z = z0 + dz;
            if z >= out_d {
                break;
            }
            count[z] += 1;
            let src = &t.data()[dz * plane..(dz + 1) * plane];
            for (acc, &x) in sum[z * plane..(z + 1) * plane].iter_mut().zip(src) {
                *acc += x as f64;
            }
        }
    }
    if let Some(z) = count.iter().position(|&c| c == 0) {
        return Err(PipelineError::Shape(format!(
            "output slice {z} not covered by any window"
        )));
    }
    let data = sum
        .chunks(plane)
        .zip(&count)
        .flat_map(|(row, &c)| row.iter().map(move |s| (s / c as f64) as f32))
        .collect();
    Ok(Tensor::new([1, 1, out_d, h, w], data)?)
}

/// Anything mapping `[1, 1, d, H, W]` to `[1, 1, r·d, H, W]`.
pub trait WindowModel: Sync {
    fn upsample_factor(&self) -> usize;
    fn predict(&self, window: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// A model together with its trained parameters.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Tvsrn,
    pub params: ParamStore<f32>,
}

impl WindowModel for TrainedModel {
    fn upsample_factor(&self) -> usize {
        self.model.config().r
    }

    fn predict(&self, window: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.model.predict(&self.params, window)?)
    }
}

/// Statistics reported alongside an inferred volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub volume: Volume,
    pub windows: usize,
}

/// Full-volume super-resolution: window extraction, per-window forward
/// passes on up to `workers` threads, and overlap-averaged assembly. Raw
/// inputs are normalized first; the output is normalized and clamped to
/// `[0, 1]`, with depth spacing divided by `r`.
pub fn infer(
    model: &dyn WindowModel,
    v: &Volume,
    spec: &InferenceSpec,
    workers: usize,
) -> Result<Inference> {
    spec.validate()?;
    if model.upsample_factor() != spec.r {
        return Err(PipelineError::Config(format!(
            "model upsamples by {} but inference expects r={}",
            model.upsample_factor(),
            spec.r
        )));
    }
    let v = normalize(v);
    let windows = extract_windows(&v, spec)?;
    let outputs = run_windows(model, &windows, workers.max(1))?;
    let assembled = assemble(&outputs, v.depth(), spec)?;
    let [sz, sy, sx] = v.spacing_mm();
    let data = assembled
        .into_data()
        .into_iter()
        .map(|x| x.clamp(0.0, 1.0))
        .collect();
    let volume = Volume::new(
        [spec.r * v.depth(), v.height(), v.width()],
        [sz / spec.r as f64, sy, sx],
        IntensityUnit::Normalized,
        data,
    )?;
    Ok(Inference {
        volume,
        windows: windows.len(),
    })
}

/// Evaluates windows on a scoped worker pool. Each worker takes a
/// contiguous block of windows; results keep their window order.
fn run_windows(
    model: &dyn WindowModel,
    windows: &[InputWindow],
    workers: usize,
) -> Result<Vec<(usize, Tensor<f32>)>> {
    let eval = |w: &InputWindow| model.predict(&w.tensor).map(|t| (w.start, t));
    if workers == 1 || windows.len() < 2 {
        return windows.iter().map(eval).collect();
    }
    let chunk = windows.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = windows
            .chunks(chunk)
            .map(|block| s.spawn(move || block.iter().map(eval).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(windows.len());
        for h in handles {
            out.extend(h.join().map_err(|_| PipelineError::Worker)??);
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(f32, usize);
    impl WindowModel for Constant {
        fn upsample_factor(&self) -> usize {
            self.1
        }
        fn predict(&self, w: &Tensor<f32>) -> Result<Tensor<f32>> {
            let s = w.shape();
            Ok(Tensor::full([1, 1, self.1 * s[2], s[3], s[4]], self.0))
        }
    }

    #[test]
    fn start_enumeration() {
        let spec = InferenceSpec::default();
        assert_eq!(window_starts(4, &spec), vec![0]);
        assert_eq!(window_starts(7, &spec), vec![0, 3]);
        assert_eq!(window_starts(6, &spec), vec![0, 3]);
        assert_eq!(window_starts(3, &spec), vec![0]);
        assert_eq!(window_starts(10, &spec), vec![0, 3, 6]);
    }

    #[test]
    fn last_slice_is_repeated() {
        let v = Volume::from_fn(
            [6, 2, 2],
            [4.0, 1.0, 1.0],
            IntensityUnit::Normalized,
            |z, _, _| z as f32 / 10.0,
        )
        .unwrap();
        let ws = extract_windows(&v, &InferenceSpec::default()).unwrap();
        assert_eq!(ws.len(), 2);
        let firsts: Vec<f32> = (0..4).map(|z| ws[1].tensor.data()[z * 4]).collect();
        assert_eq!(firsts, vec![0.3, 0.4, 0.5, 0.5]);
    }

    #[test]
    fn two_windows_average_on_shared_span() {
        let spec = InferenceSpec {
            window_depth: 2,
            overlap: 1,
            r: 2,
        };
        let (a, b) = (0.25f32, 0.7f32);
        let outs = vec![
            (0, Tensor::full([1, 1, 4, 1, 1], a)),
            (1, Tensor::full([1, 1, 4, 1, 1], b)),
        ];
        let t = assemble(&outs, 3, &spec).unwrap();
        let mid = ((a as f64 + b as f64) / 2.0) as f32;
        assert_eq!(t.data(), &[a, a, mid, mid, b, b]);
        let swapped: Vec<_> = outs.into_iter().rev().collect();
        assert_eq!(assemble(&swapped, 3, &spec).unwrap(), t);
    }

    #[test]
    fn workers_match_sequential() {
        let v = Volume::from_fn(
            [13, 3, 3],
            [4.0, 1.0, 1.0],
            IntensityUnit::Normalized,
            |z, y, x| ((z * 9 + y * 3 + x) % 10) as f32 / 10.0,
        )
        .unwrap();
        let spec = InferenceSpec::default();
        let m = Constant(0.5, 4);
        let one = infer(&m, &v, &spec, 1).unwrap();
        let many = infer(&m, &v, &spec, 3).unwrap();
        assert_eq!(one, many);
        assert_eq!(one.volume.depth(), 52);
        assert_eq!(one.windows, 4);
        assert!(infer(&Constant(0.5, 2), &v, &spec, 1).is_err());
    }
}
