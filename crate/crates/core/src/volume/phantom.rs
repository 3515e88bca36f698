//! Procedural CT-like phantoms: a smooth low-density background with
//! soft-tissue ellipsoids and bright tubular structures, plus Gaussian
//! noise. Thick-slice companions are slab means of the thin volume.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{slab_mean, IntensityUnit, Result, Volume, VolumeError};

/// Smallest admissible extent along every axis.
pub const MIN_DIM: usize = 16;
/// Value range of rendered phantoms, in HU.
pub const PHANTOM_HU: (f32, f32) = (-1000.0, 400.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Thin-volume extents `[D, H, W]`.
    pub dims: [usize; 3],
    /// Thin-volume spacing `[sz, sy, sx]` in mm.
    pub spacing_mm: [f64; 3],
    /// Thin slices per thick slice.
    pub thick_factor: usize,
    pub n_ellipsoids: usize,
    pub ellipsoid_radius_mm: [f64; 2],
    pub n_tubes: usize,
    pub tube_radius_mm: [f64; 2],
    /// Wavelength of the background undulation, in mm.
    pub background_smoothness_mm: f64,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            dims: [40, 64, 64],
            spacing_mm: [1.0, 0.75, 0.75],
            thick_factor: 4,
            n_ellipsoids: 4,
            ellipsoid_radius_mm: [3.0, 10.0],
            n_tubes: 8,
            tube_radius_mm: [0.8, 2.5],
            background_smoothness_mm: 24.0,
            noise_sigma: 8.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VolumeError::Invalid(m));
        if self.dims.iter().any(|&d| d < MIN_DIM) {
            return bad(format!(
                "phantom dims {:?} must all be >= {MIN_DIM}",
                self.dims
            ));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("spacing {:?} must be positive", self.spacing_mm));
        }
        if self.thick_factor == 0 || self.thick_factor > self.dims[0] {
            return bad(format!("thick factor {} out of range", self.thick_factor));
        }
        for (what, [lo, hi]) in [
            ("ellipsoid", self.ellipsoid_radius_mm),
            ("tube", self.tube_radius_mm),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{what} radius range [{lo}, {hi}] invalid"));
            }
        }
        if !(self.background_smoothness_mm > 0.0 && self.background_smoothness_mm.is_finite()) {
            return bad("background smoothness must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be >= 0".into());
        }
        Ok(())
    }

    /// Physical size `[D·sz, H·sy, W·sx]` in mm.
    pub fn extent_mm(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.dims[a] as f64 * self.spacing_mm[a])
    }
}

/// Sum of plane waves around a base level.
#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub base: f64,
    /// `(wave vector in cycles/mm, amplitude, phase)`
    pub waves: Vec<([f64; 3], f64, f64)>,
}

impl Background {
    pub fn flat(base: f64) -> Self {
        Background {
            base,
            waves: Vec::new(),
        }
    }

    pub fn at(&self, p: [f64; 3]) -> f64 {
        self.base
            + self
                .waves
                .iter()
                .map(|(k, a, phi)| {
                    a * (TAU * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2]) + phi).cos()
                })
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Axis-aligned ellipsoid.
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
        value: f64,
    },
    /// Capsule around the segment `a`–`b`.
    Tube {
        a: [f64; 3],
        b: [f64; 3],
        radius: f64,
        value: f64,
    },
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Ellipsoid { center, radii, .. } => {
                (0..3)
                    .map(|i| ((p[i] - center[i]) / radii[i]).powi(2))
                    .sum::<f64>()
                    <= 1.0
            }
            Shape::Tube { a, b, radius, .. } => {
                let ab: [f64; 3] = std::array::from_fn(|i| b[i] - a[i]);
                let ap: [f64; 3] = std::array::from_fn(|i| p[i] - a[i]);
                let len2: f64 = ab.iter().map(|v| v * v).sum();
                let t = if len2 > 0.0 {
                    (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let d2: f64 = (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum();
                d2 <= radius * radius
            }
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            Shape::Ellipsoid { value, .. } | Shape::Tube { value, .. } => *value,
        }
    }
}

/// Noise-free scene description; later shapes paint over earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub background: Background,
    pub shapes: Vec<Shape>,
}

fn uniform_point(rng: &mut impl Rng, extent: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| rng.gen_range(0.0..extent[i]))
}

impl Phantom {
    /// Draws the scene geometry for `spec` from `rng`.
    pub fn sample(spec: &PhantomSpec, rng: &mut impl Rng) -> Self {
        let extent = spec.extent_mm();
        let waves = (0..4)
            .map(|_| {
                let dir: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
                let k = std::array::from_fn(|i| dir[i] / norm / spec.background_smoothness_mm);
                (k, rng.gen_range(10.0..30.0), rng.gen_range(0.0..TAU))
            })
            .collect();
        let mut shapes = Vec::with_capacity(spec.n_ellipsoids + spec.n_tubes);
        let [elo, ehi] = spec.ellipsoid_radius_mm;
        for _ in 0..spec.n_ellipsoids {
            shapes.push(Shape::Ellipsoid {
                center: uniform_point(rng, extent),
                radii: std::array::from_fn(|_| rng.gen_range(elo..=ehi)),
                value: rng.gen_range(-150.0..60.0),
            });
        }
        let [tlo, thi] = spec.tube_radius_mm;
        for _ in 0..spec.n_tubes {
            shapes.push(Shape::Tube {
                a: uniform_point(rng, extent),
                b: uniform_point(rng, extent),
                radius: rng.gen_range(tlo..=thi),
                value: rng.gen_range(150.0..400.0),
            });
        }
        Phantom {
            background: Background {
                base: -820.0,
                waves,
            },
            shapes,
        }
    }

    /// Noise-free intensity at physical position `p` (mm).
    pub fn value_at(&self, p: [f64; 3]) -> f64 {
        self.shapes
            .iter()
            .rev()
            .find(|s| s.contains(p))
            .map_or_else(|| self.background.at(p), Shape::value)
    }

    /// Voxelizes at voxel centres and adds `N(0, noise_sigma)` noise; the
    /// result is clamped to the phantom HU range.
    pub fn render(
        &self,
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        noise_sigma: f64,
        rng: &mut impl Rng,
    ) -> Result<Volume> {
        let noise = Normal::new(0.0, noise_sigma.max(0.0))
            .map_err(|e| VolumeError::Invalid(e.to_string()))?;
        Volume::from_fn(dims, spacing_mm, IntensityUnit::RawHu, |z, y, x| {
            let p = [
                (z as f64 + 0.5) * spacing_mm[0],
                (y as f64 + 0.5) * spacing_mm[1],
                (x as f64 + 0.5) * spacing_mm[2],
            ];
            let n = if noise_sigma > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            ((self.value_at(p) + n) as f32).clamp(PHANTOM_HU.0, PHANTOM_HU.1)
        })
    }
}

/// Deterministic `(thin, thick)` phantom pair in raw HU. The thick volume
/// is the slab mean of `thick_factor` consecutive thin slices.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, Volume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = Phantom::sample(spec, &mut rng);
    let thin = scene.render(spec.dims, spec.spacing_mm, spec.noise_sigma, &mut rng)?;
    let thick = slab_mean(&thin, spec.thick_factor)?;
    Ok((thin, thick))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec {
            dims: [16, 24, 24],
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_phantom(&small()).unwrap();
        let b = generate_phantom(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&PhantomSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn values_stay_in_hu_window() {
        let (thin, _) = generate_phantom(&PhantomSpec {
            noise_sigma: 400.0,
            ..small()
        })
        .unwrap();
        assert!(thin
            .data()
            .iter()
            .all(|&v| (PHANTOM_HU.0..=PHANTOM_HU.1).contains(&v)));
    }

    #[test]
    fn centered_ellipsoid_geometry() {
        let spec = small();
        let ext = spec.extent_mm();
        let scene = Phantom {
            background: Background::flat(-800.0),
            shapes: vec![Shape::Ellipsoid {
                center: ext.map(|e| e / 2.0),
                radii: [4.0, 4.0, 4.0],
                value: 40.0,
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = scene
            .render(spec.dims, spec.spacing_mm, 0.0, &mut rng)
            .unwrap();
        assert_eq!(v.get(8, 12, 12), 40.0);
        assert_eq!(v.get(0, 0, 0), -800.0);
        assert_eq!(v.get(15, 23, 23), -800.0);
    }

    #[test]
    fn thick_is_slab_mean_of_thin() {
        let (thin, thick) = generate_phantom(&small()).unwrap();
        let k = 4;
        assert_eq!(thick.depth(), 4);
        assert_eq!(thick.spacing_mm()[0], 4.0);
        for j in 0..thick.depth() {
            for i in (0..thin.plane_len()).step_by(7) {
                let m = (k * j..k * j + k)
                    .map(|z| thin.slice(z)[i] as f64)
                    .sum::<f64>()
                    / k as f64;
                assert!((thick.slice(j)[i] as f64 - m).abs() <= 1e-6 * m.abs().max(1.0));
            }
        }
    }

    #[test]
    fn rejects_small_dims() {
        assert!(generate_phantom(&PhantomSpec {
            dims: [15, 32, 32],
            ..small()
        })
        .is_err());
    }
}
