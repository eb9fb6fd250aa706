//! Seeded point generators inside the unit cube `(-0.5, 0.5)^3`.

use std::fmt;
use std::str::FromStr;

use eifmm::PointSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// Shrink factor keeping surface samples off the cube boundary.
pub const SURFACE_INSET: f64 = 1.0 - 1e-9;

pub const SPHERE_RADIUS: f64 = 0.5;

pub const DEFAULT_AXES: [f64; 3] = [0.5, 0.25, 0.125];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DistKind {
    Cube,
    Sphere,
    Ellipsoid,
}

impl DistKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DistKind::Cube => "cube",
            DistKind::Sphere => "sphere",
            DistKind::Ellipsoid => "ellipsoid",
        }
    }

    /// Tree depth used when none is given.
    pub fn default_depth(self) -> usize {
        match self {
            DistKind::Cube => 4,
            DistKind::Sphere => 5,
            DistKind::Ellipsoid => 6,
        }
    }
}

impl fmt::Display for DistKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cube" => Ok(DistKind::Cube),
            "sphere" => Ok(DistKind::Sphere),
            "ellipsoid" => Ok(DistKind::Ellipsoid),
            _ => Err(format!("unknown distribution `{s}` (expected cube, sphere or ellipsoid)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distribution {
    pub kind: DistKind,
    pub count: usize,
    pub seed: u64,
    /// Ellipsoid semi-axes; ignored by the other kinds.
    pub axes: [f64; 3],
}

impl Distribution {
    pub fn new(kind: DistKind, count: usize, seed: u64) -> Self {
        Distribution {
            kind,
            count,
            seed,
            axes: DEFAULT_AXES,
        }
    }

    pub fn with_axes(mut self, axes: [f64; 3]) -> Self {
        self.axes = axes;
        self
    }
}

/// Uniform point on the sphere of radius 0.5 (no inset).
fn sphere_sample(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let g: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return g.map(|v| SPHERE_RADIUS * v / norm);
        }
    }
}

pub fn generate_points(dist: &Distribution) -> PointSet {
    let mut rng = ChaCha8Rng::seed_from_u64(dist.seed);
    let mut points = PointSet::with_capacity(3, dist.count);
    for _ in 0..dist.count {
        let p = match dist.kind {
            DistKind::Cube => loop {
                let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
                // the half-open range can return -0.5 exactly
                if p.iter().all(|v| *v > -0.5) {
                    break p;
                }
            },
            DistKind::Sphere => sphere_sample(&mut rng).map(|v| v * SURFACE_INSET),
            DistKind::Ellipsoid => {
                let s = sphere_sample(&mut rng);
                std::array::from_fn(|i| {
                    let v = s[i] * dist.axes[i] / SPHERE_RADIUS * SURFACE_INSET;
                    v.clamp(-0.5 * SURFACE_INSET, 0.5 * SURFACE_INSET)
                })
            }
        };
        points.push(&p);
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_samples_lie_on_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let p = sphere_sample(&mut rng);
            let r = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((r - 0.5).abs() <= 1e-12, "radius {r}");
        }
    }

    #[test]
    fn generated_points_stay_inside() {
        for kind in [DistKind::Cube, DistKind::Sphere, DistKind::Ellipsoid] {
            let points = generate_points(&Distribution::new(kind, 2000, 11));
            assert_eq!(points.len(), 2000);
            assert!(points.as_flat().iter().all(|v| v.abs() < 0.5), "{kind}");
        }
    }

    #[test]
    fn ellipsoid_respects_axes() {
        let points = generate_points(&Distribution::new(DistKind::Ellipsoid, 3000, 2));
        for p in points.iter() {
            let q: f64 = p.iter().zip(DEFAULT_AXES).map(|(v, a)| (v / a).powi(2)).sum();
            assert!((q.sqrt() - SURFACE_INSET).abs() < 1e-12);
        }
        let span = |axis: usize| points.iter().fold(0.0f64, |m, p| m.max(p[axis].abs()));
        assert!(span(0) > 0.45 && span(1) < 0.25 && span(2) < 0.125);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let dist = Distribution::new(DistKind::Sphere, 500, 42);
        assert_eq!(generate_points(&dist), generate_points(&dist));
        let other = Distribution::new(DistKind::Sphere, 500, 43);
        assert_ne!(generate_points(&dist), generate_points(&other));
    }

    #[test]
    fn parses_names() {
        assert_eq!("ellipsoid".parse::<DistKind>(), Ok(DistKind::Ellipsoid));
        assert!("torus".parse::<DistKind>().is_err());
    }
}
