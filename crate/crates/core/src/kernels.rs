//! Translation-invariant interaction kernels.
//!
//! The library treats a kernel as a black box: only point evaluations are
//! ever requested. Every kernel must be a pure function so it can be shared
//! across worker threads.

use std::fmt;
use std::str::FromStr;

use crate::error::{EifmmError, Result};

/// Separations below this are treated as coincident points by the
/// near-field and direct summation paths, which skip them.
pub const COINCIDENT_RADIUS: f64 = 1e-300;

/// A translation-invariant two-point function `K(x, y)`.
pub trait Kernel: Send + Sync {
    fn name(&self) -> &str;

    /// `true` when `K(x, y) = K(y, x)` for all arguments.
    fn is_symmetric(&self) -> bool;

    fn evaluate(&self, x: &[f64], y: &[f64]) -> f64;
}

impl<K: Kernel + ?Sized> Kernel for &K {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn is_symmetric(&self) -> bool {
        (**self).is_symmetric()
    }
    #[inline]
    fn evaluate(&self, x: &[f64], y: &[f64]) -> f64 {
        (**self).evaluate(x, y)
    }
}

#[inline]
pub(crate) fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// The four radial kernels used in the benchmark suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BuiltinKernel {
    /// `1 / r`
    Laplace,
    /// `cos(20 r) / r`
    Oscillatory,
    /// `exp(-r^2)`
    Gaussian,
    /// `sqrt(r^2 + 1)`
    Multiquadric,
}

impl BuiltinKernel {
    pub const ALL: [BuiltinKernel; 4] = [
        BuiltinKernel::Laplace,
        BuiltinKernel::Oscillatory,
        BuiltinKernel::Gaussian,
        BuiltinKernel::Multiquadric,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BuiltinKernel::Laplace => "laplace",
            BuiltinKernel::Oscillatory => "oscillatory",
            BuiltinKernel::Gaussian => "gaussian",
            BuiltinKernel::Multiquadric => "multiquadric",
        }
    }

    /// Radial profile as a function of the separation `r`.
    #[inline]
    pub fn profile(self, r: f64) -> f64 {
        match self {
            BuiltinKernel::Laplace => 1.0 / r,
            BuiltinKernel::Oscillatory => (20.0 * r).cos() / r,
            BuiltinKernel::Gaussian => (-r * r).exp(),
            BuiltinKernel::Multiquadric => (r * r + 1.0).sqrt(),
        }
    }

    /// `true` for kernels that blow up at `r = 0`.
    pub fn is_singular(self) -> bool {
        matches!(self, BuiltinKernel::Laplace | BuiltinKernel::Oscillatory)
    }
}

impl Kernel for BuiltinKernel {
    fn name(&self) -> &str {
        self.as_str()
    }

    fn is_symmetric(&self) -> bool {
        true
    }

    #[inline]
    fn evaluate(&self, x: &[f64], y: &[f64]) -> f64 {
        self.profile(distance(x, y))
    }
}

impl fmt::Display for BuiltinKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BuiltinKernel {
    type Err = EifmmError;

    fn from_str(s: &str) -> Result<Self> {
        make_builtin_kernel(s)
    }
}

/// Looks up one of the builtin kernels by name.
pub fn make_builtin_kernel(name: &str) -> Result<BuiltinKernel> {
    match name.trim().to_ascii_lowercase().as_str() {
        "laplace" => Ok(BuiltinKernel::Laplace),
        "oscillatory" => Ok(BuiltinKernel::Oscillatory),
        "gaussian" => Ok(BuiltinKernel::Gaussian),
        "multiquadric" => Ok(BuiltinKernel::Multiquadric),
        _ => Err(EifmmError::UnknownKernel(name.to_string())),
    }
}

/// Adapter turning a closure into a [`Kernel`]. Mostly useful for tests and
/// for experimenting with kernels outside the builtin set.
pub struct FnKernel<F> {
    name: String,
    symmetric: bool,
    f: F,
}

impl<F> FnKernel<F>
where
    F: Fn(&[f64], &[f64]) -> f64 + Send + Sync,
{
    pub fn new(name: impl Into<String>, symmetric: bool, f: F) -> Self {
        Self {
            name: name.into(),
            symmetric,
            f,
        }
    }
}

impl<F> Kernel for FnKernel<F>
where
    F: Fn(&[f64], &[f64]) -> f64 + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    #[inline]
    fn evaluate(&self, x: &[f64], y: &[f64]) -> f64 {
        (self.f)(x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn builtin_values_at_known_points() {
        let origin = [0.0, 0.0, 0.0];
        assert_eq!(BuiltinKernel::Gaussian.evaluate(&origin, &origin), 1.0);
        assert_eq!(BuiltinKernel::Multiquadric.evaluate(&origin, &origin), 1.0);
        assert_eq!(BuiltinKernel::Laplace.evaluate(&origin, &[0.5, 0.0, 0.0]), 2.0);
    }

    #[test]
    fn unknown_name_is_rejected() {
        let err = make_builtin_kernel("yukawa").unwrap_err();
        assert!(err.to_string().contains("yukawa"));
        assert_eq!(
            "Gaussian".parse::<BuiltinKernel>().unwrap(),
            BuiltinKernel::Gaussian
        );
    }

    fn random_pair(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3], [f64; 3]) {
        loop {
            let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
            let y: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
            let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
            if distance(&x, &y) >= 0.1 {
                return (x, y, a);
            }
        }
    }

    #[test]
    fn translation_invariance_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kernel in BuiltinKernel::ALL {
            assert!(kernel.is_symmetric());
            for _ in 0..100 {
                let (x, y, a) = random_pair(&mut rng);
                let xs: Vec<f64> = x.iter().zip(&a).map(|(p, s)| p - s).collect();
                let ys: Vec<f64> = y.iter().zip(&a).map(|(p, s)| p - s).collect();
                let k = kernel.evaluate(&x, &y);
                assert!(k.is_finite());
                let shifted = kernel.evaluate(&xs, &ys);
                assert!(
                    (k - shifted).abs() <= 1e-14 * (1.0 + k.abs()),
                    "{kernel}: {k} vs {shifted}"
                );
                let swapped = kernel.evaluate(&y, &x);
                assert!((k - swapped).abs() <= 1e-15 * (1.0 + k.abs()));
            }
        }
    }

    #[test]
    fn fn_kernel_forwards() {
        let k = FnKernel::new("const", true, |_: &[f64], _: &[f64]| 3.0);
        assert_eq!(k.evaluate(&[1.0], &[2.0]), 3.0);
        assert_eq!(k.name(), "const");
        let by_ref: &dyn Kernel = &k;
        assert_eq!((&by_ref).evaluate(&[0.0], &[0.0]), 3.0);
    }
}
