//! Energy densities `f(y, xi, z) = a(xi) * phi(y, xi, z)`.
//!
//! The kernel factor `a` is kept separate so that energy sums can use the
//! cell-averaged lattice weights of [`Kernel::lattice`]; `phi` carries the
//! dependence on the fast variable `y` and on the difference quotient `z`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::Kernel;

pub type ValueFn = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Scalar coefficient fields `b(y)` used by the weighted densities.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient {
    Constant(f64),
    /// `1 + amplitude * mean_k sin^2(2 pi y_k)`, period 1.
    SinSquared { amplitude: f64 },
    /// Constant on unit cells; each cell independently takes `high` with
    /// probability `prob` and `low` otherwise.
    Checkerboard { low: f64, high: f64, prob: f64, seed: u64 },
}

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Counter-based draw in `[0, 1)` keyed by `(seed, cell)` (SplitMix64 rounds).
pub fn cell_uniform(seed: u64, cell: &[i64]) -> f64 {
    let mut key = mix(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    for &c in cell {
        key = mix(key ^ (c as u64).wrapping_add(0x9E37_79B9_7F4A_7C15));
    }
    (key >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl Coefficient {
    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::SinSquared { amplitude } => {
                let s: f64 = y.iter().map(|v| (2.0 * PI * v).sin().powi(2)).sum();
                1.0 + amplitude * s / y.len() as f64
            }
            Coefficient::Checkerboard {
                low,
                high,
                prob,
                seed,
            } => {
                let cell: Vec<i64> = y.iter().map(|v| (v + 1e-12).floor() as i64).collect();
                if cell_uniform(*seed, &cell) < *prob {
                    *high
                } else {
                    *low
                }
            }
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Coefficient::Constant(c) => (*c, *c),
            Coefficient::SinSquared { amplitude } => {
                let (a, b): (f64, f64) = (1.0, 1.0 + amplitude);
                (a.min(b), a.max(b))
            }
            Coefficient::Checkerboard { low, high, .. } => (low.min(*high), low.max(*high)),
        }
    }
}

#[derive(Clone)]
pub struct CustomIntegrand {
    pub value: ValueFn,
    pub dz: Option<GradFn>,
}

/// The `phi` factor of a density.
#[derive(Clone)]
pub enum Integrand {
    /// `|z|^p / p`
    PLaplace { p: f64 },
    /// `|z|^p`
    Power { p: f64 },
    /// `b(y) b(y + xi) |z|^p`
    Weighted { coeff: Coefficient, p: f64 },
    /// `|z|^2 + gamma <z, w(y)>^2` with a unit direction field `w` of period 1.
    Anisotropic { gamma: f64 },
    Custom(CustomIntegrand),
}

impl fmt::Debug for Integrand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Integrand::PLaplace { p } => write!(f, "PLaplace(p={p})"),
            Integrand::Power { p } => write!(f, "Power(p={p})"),
            Integrand::Weighted { coeff, p } => write!(f, "Weighted({coeff:?}, p={p})"),
            Integrand::Anisotropic { gamma } => write!(f, "Anisotropic(gamma={gamma})"),
            Integrand::Custom(c) => write!(f, "Custom(dz: {})", c.dz.is_some()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flags {
    pub convex_in_z: bool,
    pub x_independent: bool,
    pub periodic: bool,
    pub random: bool,
}

/// Growth constants: `lower a(xi) |z|^p <= f(y, xi, z) <= upper a(xi) (|z|^p + 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Growth {
    pub p: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Names accepted by [`DensitySpec::from_catalog`].
pub const CATALOG: &[&str] = &["plaplace", "convolution", "weighted", "anisotropic", "random_checkerboard"];

/// Parameters for catalog densities; unused fields are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityParams {
    pub p: f64,
    pub codim: usize,
    pub amplitude: f64,
    pub gamma: f64,
    pub low: f64,
    pub high: f64,
    pub prob: f64,
    pub seed: u64,
}

impl Default for DensityParams {
    fn default() -> Self {
        DensityParams {
            p: 2.0,
            codim: 1,
            amplitude: 0.5,
            gamma: 1.0,
            low: 1.0,
            high: 2.0,
            prob: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DensitySpec {
    name: String,
    codim: usize,
    kernel: Kernel,
    integrand: Integrand,
    flags: Flags,
    growth: Growth,
}

fn norm(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `|z|^p` and its gradient `p |z|^(p-2) z`, scaled by `scale`.
fn power_with_grad(z: &[f64], p: f64, scale: f64, out: &mut [f64]) {
    let r = norm(z);
    if r == 0.0 {
        out.fill(0.0);
        return;
    }
    let factor = scale * p * r.powf(p - 2.0);
    for (o, v) in out.iter_mut().zip(z) {
        *o = factor * v;
    }
}

fn direction(y: &[f64], codim: usize, out: &mut [f64]) {
    let t = 2.0 * PI * y[0];
    out.fill(0.0);
    if codim == 1 {
        out[0] = t.cos();
    } else {
        out[0] = t.cos();
        out[1] = t.sin();
    }
}

impl DensitySpec {
    fn check_p(p: f64) -> Result<()> {
        if !(p > 1.0 && p.is_finite()) {
            return Err(Error::InvalidArgument(format!("exponent p must exceed 1, got {p}")));
        }
        Ok(())
    }

    /// `a(xi) |z|^p / p`.
    pub fn plaplace(kernel: Kernel, p: f64, codim: usize) -> Result<Self> {
        Self::check_p(p)?;
        Ok(DensitySpec {
            name: "plaplace".into(),
            codim,
            kernel,
            integrand: Integrand::PLaplace { p },
            flags: Flags {
                convex_in_z: true,
                x_independent: true,
                periodic: true,
                random: false,
            },
            growth: Growth {
                p,
                lower: 1.0 / p,
                upper: 1.0 / p,
            },
        })
    }

    /// `a(xi) |z|^p`, the density of the convolution functionals.
    pub fn convolution(kernel: Kernel, p: f64, codim: usize) -> Result<Self> {
        Self::check_p(p)?;
        Ok(DensitySpec {
            name: "convolution".into(),
            codim,
            kernel,
            integrand: Integrand::Power { p },
            flags: Flags {
                convex_in_z: true,
                x_independent: true,
                periodic: true,
                random: false,
            },
            growth: Growth {
                p,
                lower: 1.0,
                upper: 1.0,
            },
        })
    }

    /// `b(y) b(y + xi) a(xi) |z|^p`.
    pub fn weighted(kernel: Kernel, coeff: Coefficient, p: f64, codim: usize) -> Result<Self> {
        Self::check_p(p)?;
        let (lo, hi) = coeff.bounds();
        if !(lo > 0.0) {
            return Err(Error::InvalidArgument(format!("coefficient must be positive, lower bound {lo}")));
        }
        let random = matches!(coeff, Coefficient::Checkerboard { .. });
        let name = if random { "random_checkerboard" } else { "weighted" };
        Ok(DensitySpec {
            name: name.into(),
            codim,
            kernel,
            flags: Flags {
                convex_in_z: true,
                x_independent: matches!(coeff, Coefficient::Constant(_)),
                periodic: !random,
                random,
            },
            growth: Growth {
                p,
                lower: lo * lo,
                upper: hi * hi,
            },
            integrand: Integrand::Weighted { coeff, p },
        })
    }

    /// `a(xi) (|z|^2 + gamma <z, w(y)>^2)`.
    pub fn anisotropic(kernel: Kernel, gamma: f64, codim: usize) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
        }
        Ok(DensitySpec {
            name: "anisotropic".into(),
            codim,
            kernel,
            integrand: Integrand::Anisotropic { gamma },
            flags: Flags {
                convex_in_z: true,
                x_independent: gamma == 0.0,
                periodic: true,
                random: false,
            },
            growth: Growth {
                p: 2.0,
                lower: 1.0,
                upper: 1.0 + gamma,
            },
        })
    }

    pub fn custom(
        name: &str,
        kernel: Kernel,
        codim: usize,
        integrand: CustomIntegrand,
        flags: Flags,
        growth: Growth,
    ) -> Self {
        DensitySpec {
            name: name.into(),
            codim,
            kernel,
            integrand: Integrand::Custom(integrand),
            flags,
            growth,
        }
    }

    pub fn from_catalog(name: &str, kernel: Kernel, params: &DensityParams) -> Result<Self> {
        let m = params.codim;
        if m == 0 {
            return Err(Error::InvalidArgument("codimension must be >= 1".into()));
        }
        match name {
            "plaplace" => Self::plaplace(kernel, params.p, m),
            "convolution" => Self::convolution(kernel, params.p, m),
            "weighted" => Self::weighted(
                kernel,
                Coefficient::SinSquared {
                    amplitude: params.amplitude,
                },
                params.p,
                m,
            ),
            "anisotropic" => Self::anisotropic(kernel, params.gamma, m),
            "random_checkerboard" => {
                if !(0.0..=1.0).contains(&params.prob) {
                    return Err(Error::InvalidArgument(format!("probability {} outside [0,1]", params.prob)));
                }
                Self::weighted(
                    kernel,
                    Coefficient::Checkerboard {
                        low: params.low,
                        high: params.high,
                        prob: params.prob,
                        seed: params.seed,
                    },
                    params.p,
                    m,
                )
            }
            other => Err(Error::InvalidArgument(format!(
                "unknown density '{other}'; catalog: {}",
                CATALOG.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn codim(&self) -> usize {
        self.codim
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn integrand(&self) -> &Integrand {
        &self.integrand
    }

    pub fn flags(&self) -> Flags {
        self.flags
    }

    pub fn growth(&self) -> Growth {
        self.growth
    }

    pub fn p(&self) -> f64 {
        self.growth.p
    }

    pub fn has_dz(&self) -> bool {
        match &self.integrand {
            Integrand::Custom(c) => c.dz.is_some(),
            _ => true,
        }
    }

    /// Same density with a different kernel.
    pub fn with_kernel(&self, kernel: Kernel) -> Self {
        let mut out = self.clone();
        out.kernel = kernel;
        out
    }

    /// Realization of a random density for another seed.
    pub fn with_seed(&self, seed: u64) -> Result<Self> {
        match &self.integrand {
            Integrand::Weighted {
                coeff: Coefficient::Checkerboard { low, high, prob, .. },
                p,
            } => {
                let mut out = self.clone();
                out.integrand = Integrand::Weighted {
                    coeff: Coefficient::Checkerboard {
                        low: *low,
                        high: *high,
                        prob: *prob,
                        seed,
                    },
                    p: *p,
                };
                Ok(out)
            }
            _ => Err(Error::InvalidArgument(format!("density '{}' is not random", self.name))),
        }
    }

    /// `phi(y, xi, z)`.
    pub fn phi(&self, y: &[f64], xi: &[f64], z: &[f64]) -> f64 {
        match &self.integrand {
            Integrand::PLaplace { p } => norm(z).powf(*p) / p,
            Integrand::Power { p } => norm(z).powf(*p),
            Integrand::Weighted { coeff, p } => {
                let mut shifted = [0.0; 8];
                let yx = &mut shifted[..y.len()];
                for ((s, a), b) in yx.iter_mut().zip(y).zip(xi) {
                    *s = a + b;
                }
                coeff.eval(y) * coeff.eval(yx) * norm(z).powf(*p)
            }
            Integrand::Anisotropic { gamma } => {
                let mut w = [0.0; 8];
                let w = &mut w[..self.codim];
                direction(y, self.codim, w);
                let proj: f64 = z.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
                z.iter().map(|v| v * v).sum::<f64>() + gamma * proj * proj
            }
            Integrand::Custom(c) => (c.value)(y, xi, z),
        }
    }

    /// `d phi / dz` into `out`.
    pub fn phi_dz(&self, y: &[f64], xi: &[f64], z: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.integrand {
            Integrand::PLaplace { p } => power_with_grad(z, *p, 1.0 / p, out),
            Integrand::Power { p } => power_with_grad(z, *p, 1.0, out),
            Integrand::Weighted { coeff, p } => {
                let mut shifted = [0.0; 8];
                let yx = &mut shifted[..y.len()];
                for ((s, a), b) in yx.iter_mut().zip(y).zip(xi) {
                    *s = a + b;
                }
                power_with_grad(z, *p, coeff.eval(y) * coeff.eval(yx), out)
            }
            Integrand::Anisotropic { gamma } => {
                let mut w = [0.0; 8];
                let w = &mut w[..self.codim];
                direction(y, self.codim, w);
                let proj: f64 = z.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
                for ((o, zv), wv) in out.iter_mut().zip(z).zip(w.iter()) {
                    *o = 2.0 * zv + 2.0 * gamma * proj * wv;
                }
            }
            Integrand::Custom(c) => match &c.dz {
                Some(dz) => dz(y, xi, z, out),
                None => return Err(Error::NotDifferentiable),
            },
        }
        Ok(())
    }

    /// Full density `a(xi) phi(y, xi, z)` with the pointwise kernel value.
    pub fn value(&self, y: &[f64], xi: &[f64], z: &[f64]) -> f64 {
        let a = self.kernel.eval(xi);
        if a == 0.0 {
            0.0
        } else {
            a * self.phi(y, xi, z)
        }
    }

    /// For `f = a(xi) |z|^2` (scale 1) or `a(xi) |z|^2 / 2` (scale 1/2), the scale.
    pub fn quadratic_scale(&self) -> Option<f64> {
        match &self.integrand {
            Integrand::Power { p } if *p == 2.0 => Some(1.0),
            Integrand::PLaplace { p } if *p == 2.0 => Some(0.5),
            Integrand::Weighted {
                coeff: Coefficient::Constant(c),
                p,
            } if *p == 2.0 => Some(c * c),
            Integrand::Anisotropic { gamma } if *gamma == 0.0 => Some(1.0),
            _ => None,
        }
    }

    /// Samples the structural hypotheses on random points and returns every violation.
    pub fn check_invariants(&self, samples: usize, seed: u64) -> std::result::Result<(), Vec<String>> {
        let d = self.dim();
        let m = self.codim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reach = self.kernel.support_radius().unwrap_or(3.0);
        let mut violations = Vec::new();
        let mut grad = vec![0.0; m];
        for _ in 0..samples {
            let y: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let xi: Vec<f64> = (0..d).map(|_| rng.gen_range(-reach..reach) / (d as f64).sqrt()).collect();
            let z1: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let z2: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = self.kernel.eval(&xi);
            let zero = vec![0.0; m];
            let f0 = self.value(&y, &xi, &zero);
            if f0 > self.growth.upper * a * (1.0 + 1e-12) + 1e-14 {
                violations.push(format!("f(y, xi, 0) = {f0} exceeds the growth kernel at xi = {xi:?}"));
            }
            let fz = self.value(&y, &xi, &z1);
            let rz = norm(&z1).powf(self.growth.p);
            if fz < self.growth.lower * a * rz * (1.0 - 1e-12) - 1e-14
                || fz > self.growth.upper * a * (rz + 1.0) * (1.0 + 1e-12) + 1e-14
            {
                violations.push(format!("growth bounds fail at y = {y:?}, xi = {xi:?}, z = {z1:?}"));
            }
            if self.flags.convex_in_z {
                let mid: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| 0.5 * (a + b)).collect();
                let lhs = self.value(&y, &xi, &mid);
                let rhs = 0.5 * (self.value(&y, &xi, &z1) + self.value(&y, &xi, &z2));
                if lhs > rhs + 1e-12 * (1.0 + rhs.abs()) {
                    violations.push(format!("midpoint convexity fails at y = {y:?}, xi = {xi:?}"));
                }
            }
            if self.flags.periodic {
                for k in 0..d {
                    let mut ys = y.clone();
                    ys[k] += 1.0;
                    let a0 = self.value(&y, &xi, &z1);
                    let a1 = self.value(&ys, &xi, &z1);
                    if (a0 - a1).abs() > 1e-10 * (1.0 + a0.abs()) {
                        violations.push(format!("periodicity fails along axis {k} at y = {y:?}"));
                    }
                }
            }
            if self.has_dz() {
                if self.phi_dz(&y, &xi, &z1, &mut grad).is_err() {
                    violations.push("dz unavailable".into());
                    continue;
                }
                let step = 1e-4 * norm(&z1).max(1e-6);
                for c in 0..m {
                    let mut zp = z1.clone();
                    let mut zm = z1.clone();
                    zp[c] += step;
                    zm[c] -= step;
                    let fd = (self.phi(&y, &xi, &zp) - self.phi(&y, &xi, &zm)) / (2.0 * step);
                    let scale = grad[c].abs().max(fd.abs()).max(1e-8);
                    if (fd - grad[c]).abs() > 1e-6 * scale {
                        violations.push(format!(
                            "dz component {c} = {} vs finite difference {fd} at z = {z1:?}",
                            grad[c]
                        ));
                    }
                }
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(d: usize) -> Kernel {
        Kernel::indicator_ball(d, 1.0).unwrap()
    }

    #[test]
    fn catalog_densities_satisfy_their_hypotheses() {
        for name in CATALOG {
            for (d, m) in [(1, 1), (2, 1), (2, 2)] {
                for p in [2.0, 4.0] {
                    let params = DensityParams {
                        p,
                        codim: m,
                        seed: 7,
                        ..Default::default()
                    };
                    let spec = DensitySpec::from_catalog(name, ball(d), &params).unwrap();
                    if let Err(v) = spec.check_invariants(300, 11) {
                        panic!("{name} d={d} m={m} p={p}: {v:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn unknown_density_lists_catalog() {
        let err = DensitySpec::from_catalog("nope", ball(1), &DensityParams::default()).unwrap_err();
        let msg = err.to_string();
        for name in CATALOG {
            assert!(msg.contains(name), "{msg}");
        }
    }

    #[test]
    fn checkerboard_is_reproducible_and_cellwise_constant() {
        let c = Coefficient::Checkerboard {
            low: 1.0,
            high: 2.0,
            prob: 0.5,
            seed: 3,
        };
        for k in -5..5 {
            let a = c.eval(&[k as f64 + 0.1]);
            let b = c.eval(&[k as f64 + 0.9]);
            assert_eq!(a, b);
            assert!(a == 1.0 || a == 2.0);
        }
        let draws: Vec<f64> = (0..200).map(|k| c.eval(&[k as f64])).collect();
        let again: Vec<f64> = (0..200).map(|k| c.eval(&[k as f64])).collect();
        assert_eq!(draws, again);
        let highs = draws.iter().filter(|&&v| v == 2.0).count();
        assert!((60..140).contains(&highs), "{highs}");
    }

    #[test]
    fn custom_without_dz_reports_not_differentiable() {
        let spec = DensitySpec::custom(
            "abs",
            ball(1),
            1,
            CustomIntegrand {
                value: Arc::new(|_, _, z| z[0].abs().powi(2)),
                dz: None,
            },
            Flags {
                convex_in_z: true,
                ..Default::default()
            },
            Growth {
                p: 2.0,
                lower: 1.0,
                upper: 1.0,
            },
        );
        let mut out = [0.0];
        assert_eq!(spec.phi_dz(&[0.0], &[0.1], &[1.0], &mut out), Err(Error::NotDifferentiable));
    }
}
