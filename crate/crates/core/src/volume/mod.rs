//! Volumes, the `.vsrv` file format, intensity preprocessing, pseudo
//! low-resolution augmentation and training patch sampling.
//!
//! File layout:
//!
//! ```text
//! VSRV1\n
//! {"dims":[D,H,W],"spacing_mm":[sz,sy,sx],"unit":"raw_hu","dtype":"f32le"}\n
//! D·H·W little-endian f32, slice 0 first, row-major within a slice
//! ```

mod phantom;

pub use phantom::{generate_phantom, Background, Phantom, PhantomSpec, Shape};

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Lower/upper clip of the raw intensity window, in HU.
pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 2048.0;

const MAGIC: &str = "VSRV1";

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a volume file (bad magic)")]
    BadMagic,
    #[error("bad volume header: {0}")]
    Header(String),
    #[error("payload holds {found} values, header dims need {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("patch {patch:?} does not fit volume {volume:?}")]
    PatchTooLarge {
        patch: [usize; 3],
        volume: [usize; 3],
    },
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityUnit {
    RawHu,
    Normalized,
}

/// A `D×H×W` scalar field with physical voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    unit: IntensityUnit,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        unit: IntensityUnit,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::Invalid(format!("dims {dims:?} must be >= 1")));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::Invalid(format!(
                "spacing {spacing_mm:?} must be positive"
            )));
        }
        let expected = dims.iter().product();
        if data.len() != expected {
            return Err(VolumeError::SizeMismatch {
                expected,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::Invalid("non-finite voxel".into()));
        }
        if unit == IntensityUnit::Normalized && data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(VolumeError::Invalid(
                "normalized voxel outside [0, 1]".into(),
            ));
        }
        Ok(Volume {
            dims,
            spacing_mm,
            unit,
            data,
        })
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        unit: IntensityUnit,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let [_, h, w] = dims;
        let data = (0..dims.iter().product::<usize>())
            .map(|i| f(i / (h * w), (i / w) % h, i % w))
            .collect();
        Self::new(dims, spacing_mm, unit, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    pub fn depth(&self) -> usize {
        self.dims[0]
    }
    pub fn height(&self) -> usize {
        self.dims[1]
    }
    pub fn width(&self) -> usize {
        self.dims[2]
    }
    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }
    pub fn unit(&self) -> IntensityUnit {
        self.unit
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    /// Axial slice `z` as a row-major `H×W` plane.
    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[z * n..(z + 1) * n]
    }

    /// `[1, 1, D, H, W]` model input.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [d, h, w] = self.dims;
        Tensor::new([1, 1, d, h, w], self.data.clone()).expect("dims are positive")
    }

    /// Wraps the buffer of a `[1, 1, D, H, W]` (or `[D, H, W]`) tensor.
    pub fn from_tensor(t: &Tensor<f32>, spacing_mm: [f64; 3], unit: IntensityUnit) -> Result<Self> {
        let s = t.shape();
        let dims = match s {
            [1, 1, d, h, w] | [d, h, w] => [*d, *h, *w],
            _ => {
                return Err(VolumeError::Invalid(format!(
                    "tensor shape {s:?} is not a volume"
                )))
            }
        };
        Self::new(dims, spacing_mm, unit, t.data().to_vec())
    }

    /// Same geometry, values clamped into `[0, 1]` and tagged normalized.
    pub fn with_normalized_data(&self, data: Vec<f32>) -> Result<Self> {
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(self.dims, self.spacing_mm, IntensityUnit::Normalized, data)
    }
}

/// `(clamp(x, −1024, 2048) + 1024) / 3072`. Already-normalized volumes are
/// returned unchanged.
pub fn normalize(v: &Volume) -> Volume {
    if v.unit == IntensityUnit::Normalized {
        return v.clone();
    }
    let data = v
        .data
        .iter()
        .map(|&x| normalize_value(x as f64) as f32)
        .collect();
    Volume {
        data,
        dims: v.dims,
        spacing_mm: v.spacing_mm,
        unit: IntensityUnit::Normalized,
    }
}

/// Maps normalized intensities back to HU.
pub fn denormalize(v: &Volume) -> Volume {
    if v.unit == IntensityUnit::RawHu {
        return v.clone();
    }
    let data = v
        .data
        .iter()
        .map(|&x| denormalize_value(x as f64) as f32)
        .collect();
    Volume {
        data,
        dims: v.dims,
        spacing_mm: v.spacing_mm,
        unit: IntensityUnit::RawHu,
    }
}

pub fn normalize_value(hu: f64) -> f64 {
    (hu.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
}

pub fn denormalize_value(x: f64) -> f64 {
    x * (HU_MAX - HU_MIN) + HU_MIN
}

/// Mean over consecutive groups of `k` slices; a trailing partial group is
/// dropped. Depth spacing becomes `k·s`.
pub fn slab_mean(v: &Volume, k: usize) -> Result<Volume> {
    if k == 0 || k > v.depth() {
        return Err(VolumeError::Invalid(format!(
            "slab factor {k} invalid for depth {}",
            v.depth()
        )));
    }
    let n = v.plane_len();
    let out_d = v.depth() / k;
    let mut data = Vec::with_capacity(out_d * n);
    let mut acc = vec![0f64; n];
    for j in 0..out_d {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for z in k * j..k * j + k {
            for (a, &x) in acc.iter_mut().zip(v.slice(z)) {
                *a += x as f64;
            }
        }
        data.extend(acc.iter().map(|a| (a / k as f64) as f32));
    }
    let [sz, sy, sx] = v.spacing_mm;
    Volume::new(
        [out_d, v.height(), v.width()],
        [sz * k as f64, sy, sx],
        v.unit,
        data,
    )
}

/// Thresholds of the pseudo low-resolution augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLrRule {
    pub max_thickness_mm: f64,
    pub min_slices: usize,
}

impl Default for PseudoLrRule {
    fn default() -> Self {
        PseudoLrRule {
            max_thickness_mm: 3.0,
            min_slices: 130,
        }
    }
}

/// Outcome of testing one downsampling factor against a [`PseudoLrRule`].
#[derive(Debug, Clone, PartialEq)]
pub enum FactorDecision {
    Accepted {
        k: usize,
        thickness_mm: f64,
        slices: usize,
    },
    TooThick {
        k: usize,
        thickness_mm: f64,
    },
    TooFewSlices {
        k: usize,
        slices: usize,
    },
}

impl PseudoLrRule {
    /// Slack for floating-point spacing products such as `3 × 1.0`.
    const TOL: f64 = 1e-9;

    pub fn admits(&self, k: usize, depth: usize, spacing_mm: f64) -> bool {
        k >= 2
            && k as f64 * spacing_mm <= self.max_thickness_mm + Self::TOL
            && depth / k >= self.min_slices
    }

    /// Every admissible factor `k = 2, 3, …` followed by the first rejected
    /// one. Both limits are monotone in `k`, so nothing past the first
    /// rejection can be admissible.
    pub fn decide(&self, depth: usize, spacing_mm: f64) -> Vec<FactorDecision> {
        let mut out = Vec::new();
        for k in 2.. {
            let thickness_mm = k as f64 * spacing_mm;
            let slices = depth / k;
            if thickness_mm > self.max_thickness_mm + Self::TOL {
                out.push(FactorDecision::TooThick { k, thickness_mm });
                break;
            }
            if slices < self.min_slices {
                out.push(FactorDecision::TooFewSlices { k, slices });
                break;
            }
            out.push(FactorDecision::Accepted {
                k,
                thickness_mm,
                slices,
            });
        }
        out
    }

    pub fn factors(&self, depth: usize, spacing_mm: f64) -> Vec<usize> {
        self.decide(depth, spacing_mm)
            .into_iter()
            .filter_map(|d| match d {
                FactorDecision::Accepted { k, .. } => Some(k),
                _ => None,
            })
            .collect()
    }
}

/// One pseudo low-resolution volume and its factor.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLr {
    pub k: usize,
    pub volume: Volume,
}

/// Slab-mean downsampled copies of `v` for every factor admitted by `rule`.
pub fn make_pseudo_lr(v: &Volume, rule: &PseudoLrRule) -> Vec<PseudoLr> {
    rule.factors(v.depth(), v.spacing_mm[0])
        .into_iter()
        .map(|k| PseudoLr {
            k,
            volume: slab_mean(v, k).expect("admitted factor fits depth"),
        })
        .collect()
}

/// In-plane and depth extent of a low-resolution training patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSpec {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            depth: 4,
            height: 64,
            width: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub volume_id: String,
    /// Low-resolution `(z, y, x)` corner.
    pub corner: [usize; 3],
    pub flipped: bool,
}

/// A low-resolution cube and its depth-aligned high-resolution target.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    /// `[1, 1, d, h, w]`
    pub lr: Tensor<f32>,
    /// `[1, 1, r·d, h, w]`
    pub hr: Tensor<f32>,
    pub provenance: Provenance,
}

fn crop(
    v: &Volume,
    z0: usize,
    d: usize,
    y0: usize,
    h: usize,
    x0: usize,
    w: usize,
    flip: bool,
) -> Tensor<f32> {
    let mut data = Vec::with_capacity(d * h * w);
    for z in z0..z0 + d {
        for y in y0..y0 + h {
            let row = &v.slice(z)[y * v.width()..(y + 1) * v.width()];
            let row = &row[x0..x0 + w];
            if flip {
                data.extend(row.iter().rev());
            } else {
                data.extend_from_slice(row);
            }
        }
    }
    Tensor::new([1, 1, d, h, w], data).expect("crop extents are positive")
}

/// Deterministic crop: low-resolution slices `[z0, z0+d)` pair with
/// high-resolution slices `[r·z0, r·(z0+d))`; the same in-plane window and
/// optional horizontal flip apply to both.
pub fn extract_patch_pair(
    lr: &Volume,
    hr: &Volume,
    r: usize,
    patch: &PatchSpec,
    corner: [usize; 3],
    flip: bool,
    volume_id: &str,
) -> Result<PatchPair> {
    check_pair(lr, hr, r, patch)?;
    let [z0, y0, x0] = corner;
    if z0 + patch.depth > lr.depth()
        || y0 + patch.height > lr.height()
        || x0 + patch.width > lr.width()
    {
        return Err(VolumeError::PatchTooLarge {
            patch: [patch.depth, patch.height, patch.width],
            volume: lr.dims(),
        });
    }
    Ok(PatchPair {
        lr: crop(lr, z0, patch.depth, y0, patch.height, x0, patch.width, flip),
        hr: crop(
            hr,
            r * z0,
            r * patch.depth,
            y0,
            patch.height,
            x0,
            patch.width,
            flip,
        ),
        provenance: Provenance {
            volume_id: volume_id.to_string(),
            corner,
            flipped: flip,
        },
    })
}

fn check_pair(lr: &Volume, hr: &Volume, r: usize, patch: &PatchSpec) -> Result<()> {
    if r == 0 {
        return Err(VolumeError::Invalid(
            "upsampling factor must be >= 1".into(),
        ));
    }
    if lr.height() != hr.height() || lr.width() != hr.width() {
        return Err(VolumeError::Invalid(format!(
            "in-plane dims differ: lr {:?} vs hr {:?}",
            lr.dims(),
            hr.dims()
        )));
    }
    if hr.depth() < r * lr.depth().min(patch.depth) {
        return Err(VolumeError::Invalid(format!(
            "hr depth {} too short for r={r}",
            hr.depth()
        )));
    }
    if patch.depth == 0 || patch.height == 0 || patch.width == 0 {
        return Err(VolumeError::Invalid("patch extents must be >= 1".into()));
    }
    if patch.depth > lr.depth() || patch.height > lr.height() || patch.width > lr.width() {
        return Err(VolumeError::PatchTooLarge {
            patch: [patch.depth, patch.height, patch.width],
            volume: lr.dims(),
        });
    }
    Ok(())
}

/// Random crop (uniform corner, coin-flip horizontal mirror). Only corners
/// whose high-resolution span lies inside `hr` are drawn.
pub fn sample_patch_pair(
    lr: &Volume,
    hr: &Volume,
    r: usize,
    patch: &PatchSpec,
    rng: &mut impl Rng,
    volume_id: &str,
) -> Result<PatchPair> {
    check_pair(lr, hr, r, patch)?;
    let max_z = (lr.depth() - patch.depth).min(hr.depth() / r - patch.depth);
    let corner = [
        rng.gen_range(0..=max_z),
        rng.gen_range(0..=lr.height() - patch.height),
        rng.gen_range(0..=lr.width() - patch.width),
    ];
    let flip = rng.gen_bool(0.5);
    extract_patch_pair(lr, hr, r, patch, corner, flip, volume_id)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    unit: IntensityUnit,
    dtype: String,
}

pub fn write_volume_to(v: &Volume, mut w: impl Write) -> Result<()> {
    let header = Header {
        dims: v.dims,
        spacing_mm: v.spacing_mm,
        unit: v.unit,
        dtype: "f32le".into(),
    };
    writeln!(w, "{MAGIC}")?;
    writeln!(
        w,
        "{}",
        serde_json::to_string(&header).map_err(|e| VolumeError::Header(e.to_string()))?
    )?;
    let mut buf = Vec::with_capacity(4 * v.data.len());
    for x in &v.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_volume_from(r: impl Read) -> Result<Volume> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end_matches('\n') != MAGIC {
        return Err(VolumeError::BadMagic);
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: Header =
        serde_json::from_str(line.trim_end()).map_err(|e| VolumeError::Header(e.to_string()))?;
    if header.dtype != "f32le" {
        return Err(VolumeError::Header(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected: usize = header.dims.iter().product();
    if payload.len() % 4 != 0 || payload.len() / 4 != expected {
        return Err(VolumeError::SizeMismatch {
            expected,
            found: payload.len() / 4,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(header.dims, header.spacing_mm, header.unit, data)
}

/// Writes atomically (temporary file, then rename).
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    crate::io_util::write_atomic(path.as_ref(), |f| {
        let mut w = BufWriter::new(f);
        write_volume_to(v, &mut w)?;
        w.flush()?;
        Ok(())
    })
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read_volume_from(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp(dims: [usize; 3]) -> Volume {
        Volume::from_fn(dims, [1.0, 0.7, 0.7], IntensityUnit::RawHu, |z, y, x| {
            (z * 100 + y * 10 + x) as f32 - 500.0
        })
        .unwrap()
    }

    #[test]
    fn normalize_reference_points() {
        assert_eq!(normalize_value(-1024.0), 0.0);
        assert_eq!(normalize_value(2048.0), 1.0);
        assert_eq!(normalize_value(512.0), 0.5);
        assert_eq!(normalize_value(5000.0), 1.0);
        assert_eq!(normalize_value(-3000.0), 0.0);
        for i in 0..=100 {
            let x = i as f64 / 100.0;
            assert!((normalize_value(denormalize_value(x)) - x).abs() < 1e-12);
            let hu = HU_MIN + i as f64 * 30.72;
            assert!((denormalize_value(normalize_value(hu)) - hu).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_volume_tags_unit() {
        let v = ramp([2, 3, 3]);
        let n = normalize(&v);
        assert_eq!(n.unit(), IntensityUnit::Normalized);
        assert_eq!(normalize(&n), n);
        assert!(n.data().iter().all(|x| (0.0..=1.0).contains(x)));
        let back = denormalize(&n);
        for (a, b) in back.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn file_round_trip_and_errors() {
        let v = ramp([3, 4, 5]);
        let mut buf = Vec::new();
        write_volume_to(&v, &mut buf).unwrap();
        assert_eq!(read_volume_from(buf.as_slice()).unwrap(), v);
        assert!(matches!(
            read_volume_from(&buf[..buf.len() - 2]),
            Err(VolumeError::SizeMismatch { .. })
        ));
        assert!(matches!(
            read_volume_from(&b"VSRV2\n"[..]),
            Err(VolumeError::BadMagic)
        ));

        let mut seven = b"VSRV1\n{\"dims\":[2,2,2],\"spacing_mm\":[1,1,1],\"unit\":\"raw_hu\",\"dtype\":\"f32le\"}\n".to_vec();
        seven.extend(std::iter::repeat(0u8).take(7 * 4));
        assert!(matches!(
            read_volume_from(seven.as_slice()),
            Err(VolumeError::SizeMismatch {
                expected: 8,
                found: 7
            })
        ));
        let neg = b"VSRV1\n{\"dims\":[1,1,1],\"spacing_mm\":[0,1,1],\"unit\":\"raw_hu\",\"dtype\":\"f32le\"}\n\0\0\0\0";
        assert!(matches!(
            read_volume_from(&neg[..]),
            Err(VolumeError::Invalid(_))
        ));
    }

    #[test]
    fn file_helpers_write_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vsrv");
        let v = ramp([2, 2, 2]);
        write_volume(&v, &p).unwrap();
        assert_eq!(read_volume(&p).unwrap(), v);
    }

    #[test]
    fn pseudo_lr_reference_cases() {
        let rule = PseudoLrRule::default();
        assert_eq!(rule.factors(300, 1.0), vec![2]);
        assert_eq!(rule.factors(400, 1.0), vec![2, 3]);
        assert!(rule.factors(300, 2.0).is_empty());
        let v = Volume::from_fn(
            [300, 2, 2],
            [1.0, 1.0, 1.0],
            IntensityUnit::RawHu,
            |_, _, _| 7.0,
        )
        .unwrap();
        let out = make_pseudo_lr(&v, &rule);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].volume.dims(), [150, 2, 2]);
        assert_eq!(out[0].volume.spacing_mm()[0], 2.0);
        assert!(out[0].volume.data().iter().all(|&x| x == 7.0));
    }

    #[test]
    fn slab_mean_averages_groups() {
        let v = ramp([7, 2, 2]);
        let s = slab_mean(&v, 3).unwrap();
        assert_eq!(s.depth(), 2);
        for j in 0..2 {
            for i in 0..4 {
                let mean: f64 = (3 * j..3 * j + 3)
                    .map(|z| v.slice(z)[i] as f64)
                    .sum::<f64>()
                    / 3.0;
                assert!((s.slice(j)[i] as f64 - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn patch_corner_alignment() {
        let hr = ramp([24, 12, 12]);
        let lr = slab_mean(&hr, 4).unwrap();
        let patch = PatchSpec {
            depth: 4,
            height: 6,
            width: 6,
        };
        let p = extract_patch_pair(&lr, &hr, 4, &patch, [1, 4, 4], false, "v").unwrap();
        assert_eq!(p.hr.shape(), &[1, 1, 16, 6, 6]);
        // first hr slice of the patch is global slice 4
        assert_eq!(p.hr.data()[0], hr.get(4, 4, 4));
        assert_eq!(p.hr.data()[15 * 36], hr.get(19, 4, 4));
        assert_eq!(p.lr.data()[0], lr.get(1, 4, 4));
    }

    #[test]
    fn full_extent_patch_is_identity_and_flip_involutes() {
        let hr = ramp([8, 4, 5]);
        let lr = slab_mean(&hr, 2).unwrap();
        let patch = PatchSpec {
            depth: 4,
            height: 4,
            width: 5,
        };
        let p = extract_patch_pair(&lr, &hr, 2, &patch, [0, 0, 0], false, "v").unwrap();
        assert_eq!(p.lr.data(), lr.data());
        assert_eq!(p.hr.data(), hr.data());
        let f = extract_patch_pair(&lr, &hr, 2, &patch, [0, 0, 0], true, "v").unwrap();
        let ff = Volume::from_tensor(&f.hr, [1.0; 3], IntensityUnit::RawHu).unwrap();
        let twice = extract_patch_pair(&lr, &ff, 2, &patch, [0, 0, 0], true, "v").unwrap();
        assert_eq!(twice.hr.data(), hr.data());
        let big = PatchSpec { depth: 5, ..patch };
        assert!(matches!(
            extract_patch_pair(&lr, &hr, 2, &big, [0, 0, 0], false, "v"),
            Err(VolumeError::PatchTooLarge { .. })
        ));
    }

    #[test]
    fn sampled_patches_stay_aligned() {
        let hr = ramp([20, 9, 9]);
        let lr = slab_mean(&hr, 4).unwrap();
        let patch = PatchSpec {
            depth: 2,
            height: 5,
            width: 5,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let p = sample_patch_pair(&lr, &hr, 4, &patch, &mut rng, "v").unwrap();
            let [z0, y0, x0] = p.provenance.corner;
            let x = if p.provenance.flipped { x0 + 4 } else { x0 };
            assert_eq!(p.hr.data()[0], hr.get(4 * z0, y0, x));
        }
    }
}
