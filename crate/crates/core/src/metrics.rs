//! Image-quality metrics (PSNR, SSIM), set-level evaluation reports and the
//! slice-distance similarity study.
//!
//! Reports are JSON lines. An evaluation report is a header record
//! followed by one record per pair:
//!
//! ```text
//! {"kind":"eval_report","label":..,"n":..,"identical":..,"psnr":{summary}|null,"ssim":{summary}}
//! {"kind":"pair","id":..,"psnr":<dB>|"identical","ssim":..}
//! ```
//!
//! where `summary` is `{"n","mean","std","lower","upper"}`. Several reports
//! may be concatenated in one file; each header starts a new report.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::volume::{normalize, Volume};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape([usize; 3], [usize; 3]),
    #[error("in-plane extent {extent:?} is smaller than the {window}x{window} SSIM window")]
    WindowTooLarge { extent: [usize; 2], window: usize },
    #[error("empty evaluation set")]
    Empty,
    #[error("incompatible spacing: {0}")]
    Spacing(String),
    #[error("malformed report: {0}")]
    Report(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Peak signal-to-noise ratio. Equal inputs have no finite PSNR and are
/// reported as [`Psnr::Identical`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Identical,
    Db(f64),
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Identical => None,
        }
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Identical => f.write_str("identical"),
            Psnr::Db(v) => write!(f, "{v:.3} dB"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PsnrRepr {
    Db(f64),
    Marker(String),
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Psnr::Db(v) => PsnrRepr::Db(v),
            Psnr::Identical => PsnrRepr::Marker("identical".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match PsnrRepr::deserialize(d)? {
            PsnrRepr::Db(v) => Ok(Psnr::Db(v)),
            PsnrRepr::Marker(m) if m == "identical" => Ok(Psnr::Identical),
            PsnrRepr::Marker(m) => Err(serde::de::Error::custom(format!(
                "unknown PSNR marker {m:?}"
            ))),
        }
    }
}

fn check_shapes(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(MetricsError::Shape(a.dims(), b.dims()));
    }
    Ok(())
}

/// PSNR of two equal-length buffers, accumulated in `f64`.
pub fn psnr_values(a: &[f32], b: &[f32], max_val: f64) -> Psnr {
    let sse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Psnr::Identical;
    }
    let mse = sse / a.len() as f64;
    Psnr::Db(10.0 * (max_val * max_val / mse).log10())
}

/// PSNR over whole volumes with peak value 1 after normalization.
pub fn psnr(a: &Volume, b: &Volume) -> Result<Psnr> {
    check_shapes(a, b)?;
    let (a, b) = (normalize(a), normalize(b));
    Ok(psnr_values(a.data(), b.data(), 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimOptions {
    /// Side of the square Gaussian window (odd).
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
    /// Shrink the window to the largest odd size that fits instead of
    /// failing on small slices.
    pub reduce_window: bool,
}

impl Default for SsimOptions {
    fn default() -> Self {
        SsimOptions {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
            reduce_window: false,
        }
    }
}

impl SsimOptions {
    /// Window side actually used for an `h×w` plane.
    pub fn effective_window(&self, h: usize, w: usize) -> Result<usize> {
        let fit = h.min(w);
        if fit >= self.window {
            return Ok(self.window);
        }
        if self.reduce_window && fit >= 1 {
            return Ok(if fit % 2 == 1 { fit } else { fit - 1 });
        }
        Err(MetricsError::WindowTooLarge {
            extent: [h, w],
            window: self.window,
        })
    }
}

/// Normalized 1D Gaussian taps of length `n`.
pub fn gaussian_taps(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0f64; h * ow];
    for y in 0..h {
        let src = &x[y * w..(y + 1) * w];
        for xo in 0..ow {
            rows[y * ow + xo] = taps.iter().zip(&src[xo..xo + n]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for yo in 0..oh {
        for (i, t) in taps.iter().enumerate() {
            let src = &rows[(yo + i) * ow..(yo + i + 1) * ow];
            for (o, v) in out[yo * ow..(yo + 1) * ow].iter_mut().zip(src) {
                *o += t * v;
            }
        }
    }
    out
}

/// Mean SSIM of one `h×w` plane pair.
pub fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize, opts: &SsimOptions) -> Result<f64> {
    let n = opts.effective_window(h, w)?;
    let taps = gaussian_taps(n, opts.sigma);
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let mu_a = filter_valid(&a, h, w, &taps);
    let mu_b = filter_valid(&b, h, w, &taps);
    let e_aa = filter_valid(&prod(&a, &a), h, w, &taps);
    let e_bb = filter_valid(&prod(&b, &b), h, w, &taps);
    let e_ab = filter_valid(&prod(&a, &b), h, w, &taps);
    let c1 = (opts.k1 * opts.data_range).powi(2);
    let c2 = (opts.k2 * opts.data_range).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM computed per axial slice and averaged over slices.
pub fn ssim_with(a: &Volume, b: &Volume, opts: &SsimOptions) -> Result<f64> {
    check_shapes(a, b)?;
    let (a, b) = (normalize(a), normalize(b));
    let [d, h, w] = a.dims();
    let mut total = 0.0;
    for z in 0..d {
        total += ssim_plane(a.slice(z), b.slice(z), h, w, opts)?;
    }
    Ok(total / d as f64)
}

/// SSIM with the standard 11×11, σ = 1.5 window.
pub fn ssim(a: &Volume, b: &Volume) -> Result<f64> {
    ssim_with(a, b, &SsimOptions::default())
}

/// Mean, sample standard deviation and a 95% percentile interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Linear-interpolation percentile of sorted data, `q ∈ [0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    /// `None` for an empty slice. The interval bounds are the 2.5th and
    /// 97.5th percentiles, widened to include the mean when a heavy tail
    /// pulls the mean outside them.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Summary {
            n,
            mean,
            std,
            lower: percentile(&sorted, 2.5).min(mean),
            upper: percentile(&sorted, 97.5).max(mean),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairMetrics {
    pub id: String,
    pub psnr: Psnr,
    pub ssim: f64,
}

/// Per-pair metrics and their summaries for one method. The PSNR summary
/// covers finite values only; identical pairs are counted separately.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub pairs: Vec<PairMetrics>,
    pub identical: usize,
    pub psnr: Option<Summary>,
    pub ssim: Summary,
}

/// One prediction/reference pair to score.
#[derive(Debug, Clone, Copy)]
pub struct EvalPair<'a> {
    pub id: &'a str,
    pub sr: &'a Volume,
    pub hr: &'a Volume,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    EvalReport {
        label: String,
        n: usize,
        identical: usize,
        psnr: Option<Summary>,
        ssim: Summary,
    },
    Pair {
        id: String,
        psnr: Psnr,
        ssim: f64,
    },
}

impl EvalReport {
    pub fn from_pairs(label: impl Into<String>, pairs: Vec<PairMetrics>) -> Result<Self> {
        let finite: Vec<f64> = pairs.iter().filter_map(|p| p.psnr.db()).collect();
        let ssims: Vec<f64> = pairs.iter().map(|p| p.ssim).collect();
        let ssim = Summary::of(&ssims).ok_or(MetricsError::Empty)?;
        Ok(EvalReport {
            label: label.into(),
            identical: pairs.len() - finite.len(),
            psnr: Summary::of(&finite),
            ssim,
            pairs,
        })
    }

    /// Header line plus one line per pair, each newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let header = Record::EvalReport {
            label: self.label.clone(),
            n: self.pairs.len(),
            identical: self.identical,
            psnr: self.psnr,
            ssim: self.ssim,
        };
        let mut out = serde_json::to_string(&header).expect("report serializes");
        out.push('\n');
        for p in &self.pairs {
            let rec = Record::Pair {
                id: p.id.clone(),
                psnr: p.psnr,
                ssim: p.ssim,
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses every report in a JSON-lines document.
    pub fn parse_all(text: &str) -> Result<Vec<EvalReport>> {
        let mut reports: Vec<(EvalReport, usize)> = Vec::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let rec: Record = serde_json::from_str(line)
                .map_err(|e| MetricsError::Report(format!("line {}: {e}", i + 1)))?;
            match rec {
                Record::EvalReport {
                    label,
                    n,
                    identical,
                    psnr,
                    ssim,
                } => reports.push((
                    EvalReport {
                        label,
                        pairs: Vec::with_capacity(n),
                        identical,
                        psnr,
                        ssim,
                    },
                    n,
                )),
                Record::Pair { id, psnr, ssim } => {
                    let (r, _) = reports.last_mut().ok_or_else(|| {
                        MetricsError::Report(format!("line {}: pair before any header", i + 1))
                    })?;
                    r.pairs.push(PairMetrics { id, psnr, ssim });
                }
            }
        }
        reports
            .into_iter()
            .map(|(r, n)| {
                if r.pairs.len() == n {
                    Ok(r)
                } else {
                    Err(MetricsError::Report(format!(
                        "report {:?} declares {n} pairs, found {}",
                        r.label,
                        r.pairs.len()
                    )))
                }
            })
            .collect()
    }

    /// Parses a document holding exactly one report.
    pub fn from_jsonl(text: &str) -> Result<EvalReport> {
        let mut all = Self::parse_all(text)?;
        if all.len() != 1 {
            return Err(MetricsError::Report(format!(
                "expected one report, found {}",
                all.len()
            )));
        }
        Ok(all.remove(0))
    }
}

/// Scores every pair and summarizes.
pub fn evaluate_set(label: &str, pairs: &[EvalPair<'_>], opts: &SsimOptions) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let metrics = pairs
        .iter()
        .map(|p| {
            Ok(PairMetrics {
                id: p.id.to_string(),
                psnr: psnr(p.sr, p.hr)?,
                ssim: ssim_with(p.sr, p.hr, opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_pairs(label, metrics)
}

/// Fixed-width comparison table, one row per report.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let mut s = format!(
        "{:<12} {:>4} {:>22} {:>20}\n",
        "method", "n", "PSNR (dB)", "SSIM"
    );
    for r in reports {
        let psnr = match r.psnr {
            Some(p) => format!("{:.3} ± {:.3}", p.mean, p.std),
            None => "identical".to_string(),
        };
        s.push_str(&format!(
            "{:<12} {:>4} {:>22} {:>20}\n",
            r.label,
            r.pairs.len(),
            psnr,
            format!("{:.4} ± {:.4}", r.ssim.mean, r.ssim.std)
        ));
    }
    s
}

/// Distance classes of the slice-similarity study.
pub const SLICE_GROUPS: [(&str, f64); 3] = [("match", 0.0), ("near", 1.0), ("far", 2.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceGroup {
    pub name: String,
    /// Nominal offset in mm.
    pub offset_mm: f64,
    /// Offset realized on the thin grid, in thin slices.
    pub offset_slices: usize,
    pub compared: usize,
    /// Comparisons dropped because the offset left the thin volume.
    pub skipped: usize,
    /// Slice pairs that were exactly equal.
    pub identical: usize,
    /// Mean PSNR over non-identical pairs; identical when every pair was.
    pub psnr: Option<Psnr>,
    pub ssim: Option<f64>,
    pub absent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSimilarityReport {
    pub thick_spacing_mm: f64,
    pub thin_spacing_mm: f64,
    pub groups: Vec<SliceGroup>,
}

impl SliceSimilarityReport {
    pub fn group(&self, name: &str) -> Option<&SliceGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Compares each thick slice with thin slices at 0, ±1 and ±2 mm from the
/// slab centre. The reference thin slice of thick slice `j` is the one
/// whose centre lies closest to the slab centre (the lower one on ties);
/// offsets are rounded to whole thin slices.
pub fn slice_similarity_study(
    thick: &Volume,
    thin: &Volume,
    opts: &SsimOptions,
) -> Result<SliceSimilarityReport> {
    let (ts, ss) = (thick.spacing_mm()[0], thin.spacing_mm()[0]);
    let ratio = ts / ss;
    let k = ratio.round() as usize;
    if k == 0 || (ratio - k as f64).abs() > 1e-6 * ratio {
        return Err(MetricsError::Spacing(format!(
            "thin spacing {ss} mm does not divide thick spacing {ts} mm"
        )));
    }
    let [_, h, w] = thick.dims();
    if thin.height() != h || thin.width() != w {
        return Err(MetricsError::Shape(thick.dims(), thin.dims()));
    }
    let (thick, thin) = (normalize(thick), normalize(thin));
    let anchor_offset = (k - 1) / 2;
    let mut groups = Vec::new();
    for (name, mm) in SLICE_GROUPS {
        let step = (mm / ss).round() as usize;
        let offsets: Vec<isize> = if step == 0 {
            vec![0]
        } else {
            vec![-(step as isize), step as isize]
        };
        let (mut psnrs, mut ssims) = (Vec::new(), Vec::new());
        let (mut skipped, mut identical) = (0, 0);
        for j in 0..thick.depth() {
            let anchor = (k * j + anchor_offset) as isize;
            for &o in &offsets {
                let i = anchor + o;
                if i < 0 || i as usize >= thin.depth() {
                    skipped += 1;
                    continue;
                }
                let (a, b) = (thick.slice(j), thin.slice(i as usize));
                match psnr_values(a, b, 1.0) {
                    Psnr::Identical => identical += 1,
                    Psnr::Db(v) => psnrs.push(v),
                }
                ssims.push(ssim_plane(a, b, h, w, opts)?);
            }
        }
        let compared = ssims.len();
        let psnr = match (compared, psnrs.is_empty()) {
            (0, _) => None,
            (_, true) => Some(Psnr::Identical),
            _ => Some(Psnr::Db(psnrs.iter().sum::<f64>() / psnrs.len() as f64)),
        };
        groups.push(SliceGroup {
            name: name.to_string(),
            offset_mm: mm,
            offset_slices: step,
            compared,
            skipped,
            identical,
            psnr,
            ssim: (compared > 0).then(|| ssims.iter().sum::<f64>() / compared as f64),
            absent: compared == 0,
        });
    }
    Ok(SliceSimilarityReport {
        thick_spacing_mm: ts,
        thin_spacing_mm: ss,
        groups,
    })
}
