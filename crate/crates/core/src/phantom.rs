//! Seeded synthetic uterus phantoms with exactly known ground truth.
//!
//! Geometry, in painting order (later structures overwrite earlier ones):
//! an ellipsoid of wall (class 1); a flattened, slit-like cavity ellipsoid
//! (class 2) nested at least `wall_thickness` inside it; one or more myoma
//! spheres (class 3) centred in the wall band; optionally a small cyst
//! sphere (class 4) on the wall. Myoma and cyst voxels never replace cavity
//! voxels. Intensities are per-class means plus Gaussian noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{voxel_index, LabelMap, Volume, NUM_CLASSES};

pub const MIN_SIZE: usize = 16;

const WALL: u8 = 1;
const CAVITY: u8 = 2;
const MYOMA: u8 = 3;
const CYST: u8 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub size: [usize; 3],
    pub spacing: [f32; 3],
    pub seed: u64,
    /// Outer semi-axes as a fraction of the extent along each axis.
    pub outer_fraction: (f64, f64),
    /// Minimum wall thickness in voxels between cavity and outer surface.
    pub wall_thickness: (f64, f64),
    /// Cavity semi-axis along its flat axis, relative to the inner ellipsoid.
    pub cavity_flatness: (f64, f64),
    pub myoma_count: (usize, usize),
    pub myoma_radius: (f64, f64),
    pub cyst_probability: f64,
    pub cyst_radius: (f64, f64),
    pub noise_sd: f64,
    /// Mean intensity of background, wall, cavity, myoma and cyst.
    pub intensity_means: [f64; NUM_CLASSES],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: [32, 32, 32],
            spacing: [1.0; 3],
            seed: 0,
            outer_fraction: (0.30, 0.42),
            wall_thickness: (2.0, 3.5),
            cavity_flatness: (0.25, 0.45),
            myoma_count: (1, 3),
            myoma_radius: (2.5, 5.0),
            cyst_probability: 0.5,
            cyst_radius: (3.5, 5.0),
            noise_sd: 0.25,
            intensity_means: [0.0, 1.0, 2.0, 0.4, 3.0],
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64), min: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi) {
        return Err(Error::Config(format!("{name} range ({lo}, {hi}) must satisfy {min} <= lo <= hi")));
    }
    Ok(())
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

impl PhantomSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| s < MIN_SIZE) {
            return Err(Error::Config(format!("phantom size {:?} must be at least {MIN_SIZE} per axis", self.size)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("spacing {:?} must be positive", self.spacing)));
        }
        check_range("outer_fraction", self.outer_fraction, 0.0)?;
        if self.outer_fraction.0 <= 0.0 || self.outer_fraction.1 > 0.45 {
            return Err(Error::Config("outer_fraction must lie in (0, 0.45]".into()));
        }
        check_range("wall_thickness", self.wall_thickness, 1.0)?;
        check_range("cavity_flatness", self.cavity_flatness, 0.0)?;
        if self.cavity_flatness.0 <= 0.0 || self.cavity_flatness.1 > 1.0 {
            return Err(Error::Config("cavity_flatness must lie in (0, 1]".into()));
        }
        let (cmin, cmax) = self.myoma_count;
        if cmin < 1 || cmin > cmax {
            return Err(Error::Config(format!("myoma_count ({cmin}, {cmax}) must satisfy 1 <= lo <= hi")));
        }
        check_range("myoma_radius", self.myoma_radius, 0.5)?;
        check_range("cyst_radius", self.cyst_radius, 0.5)?;
        if !(0.0..=1.0).contains(&self.cyst_probability) {
            return Err(Error::Config("cyst_probability must lie in [0, 1]".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) || self.intensity_means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("noise_sd and intensity means must be finite, noise_sd >= 0".into()));
        }
        // The thickest wall must leave a cavity semi-axis of at least one voxel
        // inside the smallest possible outer ellipsoid.
        let smallest = self.outer_fraction.0 * *self.size.iter().min().unwrap() as f64;
        if self.wall_thickness.1 + 1.0 > smallest {
            return Err(Error::Config(format!(
                "wall thickness up to {} leaves no room for a cavity in an ellipsoid with semi-axis {smallest:.2}",
                self.wall_thickness.1
            )));
        }
        Ok(())
    }
}

/// Analytic description of one phantom's structures, in voxel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub center: [f64; 3],
    pub outer_axes: [f64; 3],
    pub cavity_axes: [f64; 3],
    pub myomas: Vec<([f64; 3], f64)>,
    pub cyst: Option<([f64; 3], f64)>,
}

fn ellipsoid_level(p: [f64; 3], c: [f64; 3], axes: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - c[a]) / axes[a]).powi(2)).sum()
}

fn dist2(p: [f64; 3], c: [f64; 3]) -> f64 {
    (0..3).map(|a| (p[a] - c[a]).powi(2)).sum()
}

impl Geometry {
    pub fn in_outer(&self, p: [f64; 3]) -> bool {
        ellipsoid_level(p, self.center, self.outer_axes) <= 1.0
    }

    pub fn in_cavity(&self, p: [f64; 3]) -> bool {
        ellipsoid_level(p, self.center, self.cavity_axes) <= 1.0
    }

    /// Class of voxel centre `p` under the painting order.
    pub fn classify(&self, p: [f64; 3]) -> u8 {
        if self.in_cavity(p) {
            return CAVITY;
        }
        if self.cyst.is_some_and(|(c, r)| dist2(p, c) <= r * r) {
            return CYST;
        }
        if self.myomas.iter().any(|&(c, r)| dist2(p, c) <= r * r) {
            return MYOMA;
        }
        if self.in_outer(p) {
            return WALL;
        }
        0
    }
}

fn point_in_wall(rng: &mut ChaCha8Rng, center: [f64; 3], outer: [f64; 3], thickness: f64) -> [f64; 3] {
    let u: [f64; 3] = UnitSphere.sample(rng);
    let reach = (0..3).map(|a| (outer[a] * u[a]).powi(2)).sum::<f64>().sqrt();
    // Radial scale between the inner surface of the wall band and the outer surface.
    let inner = ((reach - thickness) / reach).max(0.0);
    let s = rng.gen_range(inner..=1.0);
    std::array::from_fn(|a| center[a] + s * outer[a] * u[a])
}

/// Draw the analytic geometry for `spec` (consumes the first RNG draws).
pub fn geometry(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Geometry {
    let size = spec.size.map(|s| s as f64);
    let outer_axes: [f64; 3] = std::array::from_fn(|a| sample(rng, spec.outer_fraction) * size[a]);
    let center: [f64; 3] = std::array::from_fn(|a| {
        let mid = (size[a] - 1.0) / 2.0;
        let slack = (mid - outer_axes[a]).max(0.0).min(0.05 * size[a]);
        mid + rng.gen_range(-1.0..=1.0) * slack
    });
    let thickness = sample(rng, spec.wall_thickness);
    let flat_axis = rng.gen_range(0..3);
    let flatness = sample(rng, spec.cavity_flatness);
    let cavity_axes: [f64; 3] = std::array::from_fn(|a| {
        let inner = outer_axes[a] - thickness;
        if a == flat_axis {
            (inner * flatness).max(1.0)
        } else {
            inner
        }
    });
    let count = rng.gen_range(spec.myoma_count.0..=spec.myoma_count.1);
    let myomas = (0..count)
        .map(|_| {
            let c = point_in_wall(rng, center, outer_axes, thickness);
            (c, sample(rng, spec.myoma_radius))
        })
        .collect();
    let cyst = (rng.gen::<f64>() < spec.cyst_probability).then(|| {
        let c = point_in_wall(rng, center, outer_axes, thickness);
        (c, sample(rng, spec.cyst_radius))
    });
    Geometry {
        center,
        outer_axes,
        cavity_axes,
        myomas,
        cyst,
    }
}

/// Generate an (image, ground truth) pair; fully determined by `spec`.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geo = geometry(spec, &mut rng);
    let [nd, nh, nw] = spec.size;
    let mut labels = vec![0u8; nd * nh * nw];
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                labels[voxel_index(spec.size, d, h, w)] = geo.classify([d as f64, h as f64, w as f64]);
            }
        }
    }
    for class in [WALL, CAVITY] {
        if !labels.contains(&class) {
            return Err(Error::Invalid(format!("phantom seed {} produced no voxels of class {class}", spec.seed)));
        }
    }
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let data = labels
        .iter()
        .map(|&l| (spec.intensity_means[l as usize] + noise.sample(&mut rng)) as f32)
        .collect();
    Ok((
        Volume::new(spec.size, spec.spacing, data)?,
        LabelMap::new(spec.size, spec.spacing, labels)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&PhantomSpec::with_seed(3)).unwrap();
        let b = generate(&PhantomSpec::with_seed(3)).unwrap();
        let c = generate(&PhantomSpec::with_seed(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn size_16_is_valid_and_15_is_not() {
        let mut spec = PhantomSpec {
            size: [16, 16, 16],
            ..Default::default()
        };
        assert!(generate(&spec).is_ok());
        spec.size = [15, 16, 16];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn wall_thicker_than_ellipsoid_is_rejected() {
        let spec = PhantomSpec {
            wall_thickness: (2.0, 12.0),
            ..Default::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }
}
