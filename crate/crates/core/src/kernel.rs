//! Interaction kernels `a(xi)` and their lattice quadrature.
//!
//! Every kernel integral is a midpoint sum over the lattice `step * Z^d`,
//! where each lattice node carries the cell average of the kernel over its
//! cube. Cells cut by a discontinuity sphere (the support boundary of an
//! indicator, a truncation radius, or the inner/outer radius of an annulus)
//! are averaged by subsampling; all other cells use the centre value. The
//! energy module builds its `xi`-lattice with the same weights, so kernel
//! constants and energy sums agree.
//!
//! Kernels with unbounded support must carry decay metadata. Their integrals
//! run out to the first radius at which the certified tail bound is below
//! `1e-8` of the running total. When that radius is too large for a lattice,
//! radial kernels switch to a radial quadrature for the outer shell.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative size of the certified tail at which unbounded integrals stop.
pub const TAIL_TOLERANCE: f64 = 1e-8;

const LATTICE_BUDGET: f64 = 4.0e6;

pub type KernelFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Pointwise envelope `a(xi) <= constant * (1 + |xi|)^(-exponent)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decay {
    pub constant: f64,
    pub exponent: f64,
}

#[derive(Clone)]
pub enum Profile {
    Zero,
    /// `chi_{|xi| <= radius}`
    IndicatorBall { radius: f64 },
    /// `exp(-|xi|^2 / width^2)`
    Gaussian { width: f64 },
    /// `(1 + |xi|)^(-exponent)`
    PolynomialDecay { exponent: f64 },
    Custom {
        f: KernelFn,
        support: Option<f64>,
        decay: Option<Decay>,
        radial: bool,
    },
}

impl fmt::Debug for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Profile::Zero => write!(f, "Zero"),
            Profile::IndicatorBall { radius } => write!(f, "IndicatorBall({radius})"),
            Profile::Gaussian { width } => write!(f, "Gaussian({width})"),
            Profile::PolynomialDecay { exponent } => write!(f, "PolynomialDecay({exponent})"),
            Profile::Custom {
                support, decay, radial, ..
            } => write!(
                f,
                "Custom {{ support: {support:?}, decay: {decay:?}, radial: {radial} }}"
            ),
        }
    }
}

/// A nonnegative interaction kernel on `R^d`.
#[derive(Debug, Clone)]
pub struct Kernel {
    dim: usize,
    profile: Profile,
    cutoff: Option<f64>,
    quadrature_step: f64,
}

/// The `xi`-lattice used by the energy sums: integer shifts `k` with
/// `xi = step * k` and quadrature weight `step^d * mean_cell(a)`.
#[derive(Debug, Clone)]
pub struct Lattice {
    dim: usize,
    step: f64,
    shifts: Vec<i64>,
    weights: Vec<f64>,
}

impl Lattice {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn shift(&self, i: usize) -> &[i64] {
        &self.shifts[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn xi(&self, i: usize) -> Vec<f64> {
        self.shift(i).iter().map(|&k| k as f64 * self.step).collect()
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.shift(i)
            .iter()
            .map(|&k| (k as f64 * self.step).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero_shift(&self, i: usize) -> bool {
        self.shift(i).iter().all(|&k| k == 0)
    }

    /// Keeps the nodes with `|xi| <= radius` (sharp node selection).
    pub fn restrict(&self, radius: f64) -> Lattice {
        let mut out = Lattice {
            dim: self.dim,
            step: self.step,
            shifts: Vec::new(),
            weights: Vec::new(),
        };
        for i in 0..self.len() {
            if self.norm(i) <= radius * (1.0 + 1e-12) {
                out.shifts.extend_from_slice(self.shift(i));
                out.weights.push(self.weights[i]);
            }
        }
        out
    }

    /// Largest `|xi|` carried by the lattice.
    pub fn reach(&self) -> f64 {
        (0..self.len()).map(|i| self.norm(i)).fold(0.0, f64::max)
    }

    /// Largest `|k_i|` over all nodes and axes.
    pub fn max_shift(&self) -> i64 {
        self.shifts.iter().map(|k| k.abs()).max().unwrap_or(0)
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Homogeneous integrand term: `f(lambda xi) = lambda^degree f(xi)` and
/// `|f(xi)| <= bound * |xi|^degree`.
pub(crate) struct Term<'a> {
    pub degree: f64,
    pub bound: f64,
    pub f: &'a (dyn Fn(&[f64]) -> f64 + Sync),
}

/// Surface measure of the unit sphere in `R^d`.
pub fn sphere_area(dim: usize) -> f64 {
    match dim {
        0 => 0.0,
        1 => 2.0,
        2 => 2.0 * PI,
        d => 2.0 * PI * sphere_area(d - 2) / (d as f64 - 2.0),
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn subsamples(dim: usize) -> usize {
    match dim {
        1 => 64,
        2 => 16,
        3 => 8,
        _ => 4,
    }
}

/// Odometer over `[-k_max, k_max]^dim`.
fn for_each_index(dim: usize, k_max: i64, mut visit: impl FnMut(&[i64])) {
    let mut k = vec![-k_max; dim];
    loop {
        visit(&k);
        let mut axis = dim;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            if k[axis] < k_max {
                k[axis] += 1;
                for later in k.iter_mut().skip(axis + 1) {
                    *later = -k_max;
                }
                break;
            }
        }
    }
}

impl Kernel {
    fn build(dim: usize, profile: Profile, quadrature_step: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidKernel("dimension must be >= 1".into()));
        }
        if !(quadrature_step > 0.0 && quadrature_step.is_finite()) {
            return Err(Error::InvalidKernel(format!(
                "quadrature step must be positive, got {quadrature_step}"
            )));
        }
        Ok(Kernel {
            dim,
            profile,
            cutoff: None,
            quadrature_step,
        })
    }

    pub fn zero(dim: usize) -> Result<Self> {
        Self::build(dim, Profile::Zero, 0.05)
    }

    /// `chi_{B_radius}`.
    pub fn indicator_ball(dim: usize, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidKernel(format!("radius must be positive, got {radius}")));
        }
        let step = radius * if dim >= 3 { 0.05 } else { 0.01 };
        Self::build(dim, Profile::IndicatorBall { radius }, step)
    }

    /// `exp(-|xi|^2 / width^2)`.
    pub fn gaussian(dim: usize, width: f64) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::InvalidKernel(format!("width must be positive, got {width}")));
        }
        let step = width * if dim >= 3 { 0.1 } else { 0.02 };
        Self::build(dim, Profile::Gaussian { width }, step)
    }

    /// `(1 + |xi|)^(-exponent)`; moments of order `p` need `exponent > p + d`.
    pub fn polynomial_decay(dim: usize, exponent: f64) -> Result<Self> {
        if !(exponent > dim as f64) {
            return Err(Error::InvalidKernel(format!(
                "decay exponent {exponent} must exceed the dimension {dim}"
            )));
        }
        let step = if dim >= 3 { 0.05 } else { 0.01 };
        Self::build(dim, Profile::PolynomialDecay { exponent }, step)
    }

    /// A user-supplied kernel. Negative samples are rejected.
    pub fn custom(
        dim: usize,
        f: KernelFn,
        support: Option<f64>,
        decay: Option<Decay>,
        radial: bool,
        quadrature_step: f64,
    ) -> Result<Self> {
        if let Some(s) = support {
            if !(s > 0.0) {
                return Err(Error::InvalidKernel(format!("support must be positive, got {s}")));
            }
        }
        let kernel = Self::build(
            dim,
            Profile::Custom {
                f,
                support,
                decay,
                radial,
            },
            quadrature_step,
        )?;
        let probe = support.unwrap_or(4.0);
        let k_max: i64 = match dim {
            1 => 200,
            2 => 40,
            _ => 10,
        };
        let spacing = probe / k_max as f64;
        let mut negative = None;
        for_each_index(dim, k_max, |k| {
            if negative.is_some() {
                return;
            }
            let xi: Vec<f64> = k.iter().map(|&v| v as f64 * spacing).collect();
            let value = kernel.eval(&xi);
            if value < 0.0 || !value.is_finite() {
                negative = Some((xi, value));
            }
        });
        if let Some((xi, value)) = negative {
            return Err(Error::InvalidKernel(format!(
                "kernel must be nonnegative and finite; a({xi:?}) = {value}"
            )));
        }
        Ok(kernel)
    }

    pub fn with_quadrature_step(mut self, step: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidKernel(format!("quadrature step must be positive, got {step}")));
        }
        self.quadrature_step = step;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    pub fn quadrature_step(&self) -> f64 {
        self.quadrature_step
    }

    pub fn is_radial(&self) -> bool {
        match &self.profile {
            Profile::Custom { radial, .. } => *radial,
            _ => true,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.profile, Profile::Zero)
    }

    fn profile_support(&self) -> Option<f64> {
        match &self.profile {
            Profile::Zero => Some(0.0),
            Profile::IndicatorBall { radius } => Some(*radius),
            Profile::Gaussian { .. } | Profile::PolynomialDecay { .. } => None,
            Profile::Custom { support, .. } => *support,
        }
    }

    /// Radius outside which the kernel vanishes, if any.
    pub fn support_radius(&self) -> Option<f64> {
        match (self.profile_support(), self.cutoff) {
            (Some(s), Some(t)) => Some(s.min(t)),
            (Some(s), None) => Some(s),
            (None, t) => t,
        }
    }

    pub fn eval(&self, xi: &[f64]) -> f64 {
        let r = norm(xi);
        if let Some(t) = self.cutoff {
            if r > t {
                return 0.0;
            }
        }
        match &self.profile {
            Profile::Zero => 0.0,
            Profile::IndicatorBall { radius } => {
                if r <= *radius {
                    1.0
                } else {
                    0.0
                }
            }
            Profile::Gaussian { width } => (-(r * r) / (width * width)).exp(),
            Profile::PolynomialDecay { exponent } => (1.0 + r).powf(-exponent),
            Profile::Custom { f, support, .. } => match support {
                Some(s) if r > *s => 0.0,
                _ => f(xi),
            },
        }
    }

    /// The kernel restricted to `B_T`.
    pub fn truncate(&self, t: f64) -> Result<Kernel> {
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("truncation radius must be positive, got {t}")));
        }
        let mut out = self.clone();
        out.cutoff = Some(self.cutoff.map_or(t, |c| c.min(t)));
        Ok(out)
    }

    /// Bound on `int_{|xi| > r} a(xi) |xi|^degree dxi`, when certifiable.
    pub fn tail_bound(&self, r: f64, degree: f64) -> Option<f64> {
        if let Some(s) = self.support_radius() {
            if r >= s {
                return Some(0.0);
            }
        }
        let d = self.dim as f64;
        let omega = sphere_area(self.dim);
        let power_tail = |constant: f64, alpha: f64| -> Option<f64> {
            let excess = alpha - d - degree;
            if excess > 0.0 && r > 0.0 {
                Some(constant * omega * r.powf(-excess) / excess)
            } else {
                None
            }
        };
        match &self.profile {
            Profile::Gaussian { width } => {
                let k = d - 1.0 + degree;
                let rate = 2.0 * r / (width * width) - k / r;
                if r > 0.0 && rate > 0.0 {
                    Some(omega * r.powf(k) * (-(r * r) / (width * width)).exp() / rate)
                } else {
                    None
                }
            }
            Profile::PolynomialDecay { exponent } => power_tail(1.0, *exponent),
            Profile::Custom {
                decay: Some(decay), ..
            } => power_tail(decay.constant, decay.exponent),
            _ => None,
        }
    }

    fn reference_radius(&self) -> f64 {
        match &self.profile {
            Profile::Gaussian { width } => 4.0 * width,
            _ => 4.0,
        }
    }

    /// Radii of the spheres across which the integrand may jump.
    fn discontinuities(&self, inner: f64, outer: f64) -> Vec<f64> {
        let mut radii = Vec::with_capacity(3);
        if let Some(s) = self.support_radius() {
            radii.push(s);
        }
        if inner > 0.0 {
            radii.push(inner);
        }
        if outer.is_finite() {
            radii.push(outer);
        }
        radii
    }

    /// `step^d` times the average of `a * chi_{inner < |xi| <= outer}` over the
    /// cube of side `step` centred at `center`.
    pub(crate) fn cell_weight(&self, center: &[f64], step: f64, inner: f64, outer: f64, radii: &[f64]) -> f64 {
        let half = 0.5 * step;
        let mut dmin2 = 0.0;
        let mut dmax2 = 0.0;
        for &c in center {
            let a = c.abs();
            dmin2 += (a - half).max(0.0).powi(2);
            dmax2 += (a + half).powi(2);
        }
        let (dmin, dmax) = (dmin2.sqrt(), dmax2.sqrt());
        let volume = step.powi(self.dim as i32);
        if dmin > outer || dmax <= inner {
            return 0.0;
        }
        let straddles = radii.iter().any(|&rad| dmin < rad && rad < dmax);
        if !straddles {
            let r = norm(center);
            if (inner > 0.0 && r <= inner) || r > outer {
                return 0.0;
            }
            return volume * self.eval(center);
        }
        let s = subsamples(self.dim);
        let mut acc = 0.0;
        let mut point = vec![0.0; self.dim];
        let count = s.pow(self.dim as u32);
        for flat in 0..count {
            let mut rest = flat;
            for (axis, p) in point.iter_mut().enumerate() {
                let j = rest % s;
                rest /= s;
                *p = center[axis] - half + step * (j as f64 + 0.5) / s as f64;
            }
            let r = norm(&point);
            if (inner == 0.0 || r > inner) && r <= outer {
                acc += self.eval(&point);
            }
        }
        volume * acc / count as f64
    }

    fn lattice_radius_limit(&self, step: f64) -> f64 {
        let per_axis = LATTICE_BUDGET.powf(1.0 / self.dim as f64);
        let k_max = ((per_axis - 1.0) / 2.0).floor() - 1.0;
        (k_max.max(1.0)) * step
    }

    /// Midpoint lattice sum of `a(xi) * sum_t f_t(xi)` over `inner < |xi| <= outer`.
    fn lattice_sum(&self, terms: &[Term<'_>], step: f64, inner: f64, outer: f64) -> f64 {
        let radii = self.discontinuities(inner, outer);
        let k_max = (outer / step + 0.5).floor() as i64 + 1;
        let mut sum = 0.0;
        let mut xi = vec![0.0; self.dim];
        for_each_index(self.dim, k_max, |k| {
            for (x, &kk) in xi.iter_mut().zip(k) {
                *x = kk as f64 * step;
            }
            let w = self.cell_weight(&xi, step, inner, outer, &radii);
            if w != 0.0 {
                let g: f64 = terms.iter().map(|t| (t.f)(&xi)).sum();
                sum += w * g;
            }
        });
        sum
    }

    fn angular_integral(&self, f: &(dyn Fn(&[f64]) -> f64 + Sync)) -> Result<f64> {
        match self.dim {
            1 => Ok(f(&[1.0]) + f(&[-1.0])),
            2 => {
                let n = 4096;
                let h = 2.0 * PI / n as f64;
                Ok((0..n)
                    .map(|i| {
                        let t = i as f64 * h;
                        f(&[t.cos(), t.sin()])
                    })
                    .sum::<f64>()
                    * h)
            }
            3 => {
                let (nm, na) = (256, 256);
                let hm = 2.0 / nm as f64;
                let ha = 2.0 * PI / na as f64;
                let mut acc = 0.0;
                for i in 0..nm {
                    let mu = -1.0 + (i as f64 + 0.5) * hm;
                    let s = (1.0 - mu * mu).sqrt();
                    for j in 0..na {
                        let phi = j as f64 * ha;
                        acc += f(&[s * phi.cos(), s * phi.sin(), mu]);
                    }
                }
                Ok(acc * hm * ha)
            }
            d => Err(Error::MomentNotCertifiable(format!(
                "radial shell quadrature is not available in dimension {d}"
            ))),
        }
    }

    /// Radial quadrature of the integral over `inner < |xi| <= outer`.
    fn shell_sum(&self, terms: &[Term<'_>], inner: f64, outer: f64) -> Result<f64> {
        let amplitudes = terms
            .iter()
            .map(|t| self.angular_integral(t.f).map(|a| (t.degree, a)))
            .collect::<Result<Vec<_>>>()?;
        let d = self.dim as f64;
        let mut e1 = vec![0.0; self.dim];
        let profile = |s: f64, e1: &mut Vec<f64>| {
            e1[0] = s;
            self.eval(e1)
        };
        let (lo, hi) = (inner.ln(), outer.ln());
        let n = 8000;
        let h = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let t = lo + i as f64 * h;
            let s = t.exp();
            let radial: f64 = amplitudes.iter().map(|(deg, a)| a * s.powf(*deg)).sum();
            let g = profile(s, &mut e1) * s.powf(d) * radial;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * g;
        }
        Ok(acc * h / 3.0)
    }

    fn integrate_annulus(&self, terms: &[Term<'_>], step: f64, inner: f64, outer: f64) -> Result<f64> {
        if inner >= outer {
            return Ok(0.0);
        }
        let limit = self.lattice_radius_limit(step);
        if outer <= limit {
            return Ok(self.lattice_sum(terms, step, inner, outer));
        }
        if !self.is_radial() {
            return Err(Error::MomentNotCertifiable(format!(
                "non-radial kernel needs a lattice of radius {outer}, beyond the budget radius {limit}"
            )));
        }
        let mut total = 0.0;
        if inner < limit {
            total += self.lattice_sum(terms, step, inner, limit);
        }
        total += self.shell_sum(terms, inner.max(limit), outer)?;
        Ok(total)
    }

    fn certified_radius(&self, terms: &[Term<'_>], step: f64) -> Result<f64> {
        if let Some(s) = self.support_radius() {
            return Ok(s);
        }
        let r0 = self.reference_radius().min(self.lattice_radius_limit(step));
        let reference = self.integrate_annulus(terms, step, 0.0, r0)?.abs();
        let mut r = r0;
        for _ in 0..200 {
            let mut tail = 0.0;
            for t in terms {
                if t.bound == 0.0 {
                    continue;
                }
                let b = self.tail_bound(r, t.degree).ok_or_else(|| {
                    Error::MomentNotCertifiable(format!(
                        "no tail bound for degree {} with profile {:?}",
                        t.degree, self.profile
                    ))
                })?;
                tail += t.bound * b;
            }
            if tail <= TAIL_TOLERANCE * reference {
                return Ok(r);
            }
            r *= 2.0;
        }
        Err(Error::MomentNotCertifiable(format!(
            "tail bound did not reach {TAIL_TOLERANCE} of the running total"
        )))
    }

    /// `int_{|xi| > inner} a(xi) sum_t f_t(xi) dxi`.
    pub(crate) fn integrate(&self, terms: &[Term<'_>], inner: f64) -> Result<f64> {
        self.integrate_with_step(terms, inner, self.quadrature_step)
    }

    pub(crate) fn integrate_with_step(&self, terms: &[Term<'_>], inner: f64, step: f64) -> Result<f64> {
        if self.is_zero() {
            return Ok(0.0);
        }
        let outer = self.certified_radius(terms, step)?;
        self.integrate_annulus(terms, step, inner, outer)
    }

    /// `int a(xi) (1 + |xi|^p) dxi`.
    pub fn moment(&self, p: f64) -> Result<f64> {
        if !(p >= 1.0) {
            return Err(Error::InvalidArgument(format!("moment order must be >= 1, got {p}")));
        }
        let one = |_: &[f64]| 1.0;
        let power = move |xi: &[f64]| norm(xi).powf(p);
        self.integrate(
            &[
                Term { degree: 0.0, bound: 1.0, f: &one },
                Term { degree: p, bound: 1.0, f: &power },
            ],
            0.0,
        )
    }

    /// `int_{|xi| > r} a(xi) |xi|^p dxi`.
    pub fn tail_moment(&self, p: f64, r: f64) -> Result<f64> {
        if !(r > 0.0) {
            return Err(Error::InvalidArgument(format!("tail radius must be positive, got {r}")));
        }
        let power = move |xi: &[f64]| norm(xi).powf(p);
        self.integrate(&[Term { degree: p, bound: 1.0, f: &power }], r)
    }

    /// `||z||_a^p = int a(xi) |<z, xi>|^p dxi`.
    pub fn anorm_p(&self, z: &[f64], p: f64) -> Result<f64> {
        if z.len() != self.dim {
            return Err(Error::Dimension(format!(
                "probe has length {}, kernel dimension is {}",
                z.len(),
                self.dim
            )));
        }
        let zn = norm(z);
        if zn == 0.0 {
            return Ok(0.0);
        }
        let z = z.to_vec();
        let projection = move |xi: &[f64]| {
            z.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>().abs().powf(p)
        };
        self.integrate(
            &[Term { degree: p, bound: zn.powf(p), f: &projection }],
            0.0,
        )
    }

    /// `int a(xi) |A xi|^p dxi` for an `m x d` row-major matrix `A`.
    pub fn matrix_norm_p(&self, a: &[f64], m: usize, p: f64) -> Result<f64> {
        if a.len() != m * self.dim {
            return Err(Error::Dimension(format!(
                "matrix has {} entries, expected {m} x {}",
                a.len(),
                self.dim
            )));
        }
        if m == 1 {
            return self.anorm_p(a, p);
        }
        let frob: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if frob == 0.0 {
            return Ok(0.0);
        }
        let (d, a) = (self.dim, a.to_vec());
        let f = move |xi: &[f64]| {
            let mut acc = 0.0;
            for row in 0..m {
                let v: f64 = (0..d).map(|j| a[row * d + j] * xi[j]).sum();
                acc += v * v;
            }
            acc.sqrt().powf(p)
        };
        self.integrate(&[Term { degree: p, bound: frob.powf(p), f: &f }], 0.0)
    }

    /// `int a(xi) |xi_1|^p dxi`, the radial p-Laplacian constant.
    pub fn c_p(&self, p: f64) -> Result<f64> {
        let mut e1 = vec![0.0; self.dim];
        e1[0] = 1.0;
        self.anorm_p(&e1, p)
    }

    /// `(A)_{ij} = int a(xi) xi_i xi_j dxi`.
    pub fn ahom_matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.dim;
        let mut out = DMatrix::zeros(d, d);
        if self.is_zero() {
            return Ok(out);
        }
        for i in 0..d {
            for j in i..d {
                let f = move |xi: &[f64]| xi[i] * xi[j];
                let v = self.integrate(&[Term { degree: 2.0, bound: 1.0, f: &f }], 0.0)?;
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(out)
    }

    /// Smallest doubling radius (from the reference radius) whose tail
    /// `int_{|xi|>R} a (1 + |xi|^p)` is at most `rel_tol * moment(p)`.
    /// Compactly supported kernels return their support.
    pub fn effective_radius(&self, p: f64, rel_tol: f64) -> Result<f64> {
        if let Some(s) = self.support_radius() {
            return Ok(s);
        }
        let total = self.moment(p)?;
        let mut r = self.reference_radius() / 4.0;
        for _ in 0..200 {
            let tail = self
                .tail_bound(r, 0.0)
                .zip(self.tail_bound(r, p))
                .map(|(a, b)| a + b);
            if let Some(t) = tail {
                if t <= rel_tol * total {
                    return Ok(r);
                }
            }
            r *= 1.25;
        }
        Err(Error::MomentNotCertifiable(format!(
            "no radius brings the tail below {rel_tol} of the moment"
        )))
    }

    /// The energy lattice `step * Z^d` with cell-averaged weights, limited to
    /// `|xi| <= radius` when a radius is given. Unbounded kernels need one.
    pub fn lattice(&self, step: f64, radius: Option<f64>) -> Result<Lattice> {
        if !(step > 0.0) {
            return Err(Error::InvalidArgument(format!("lattice step must be positive, got {step}")));
        }
        let outer = match (self.support_radius(), radius) {
            (Some(s), Some(r)) => s.min(r) + step,
            (Some(s), None) => s,
            (None, Some(r)) => r + step,
            (None, None) => {
                return Err(Error::MomentNotCertifiable(
                    "unbounded kernel needs an interaction radius for the energy lattice".into(),
                ))
            }
        };
        let radii = self.discontinuities(0.0, f64::INFINITY);
        let k_max = (outer / step + 0.5).floor() as i64 + 1;
        let points = (2 * k_max + 1) as f64;
        if points.powi(self.dim as i32) > LATTICE_BUDGET {
            return Err(Error::InteractionRangeExceedsDomain {
                range: outer,
                extent: self.lattice_radius_limit(step),
            });
        }
        let mut lattice = Lattice {
            dim: self.dim,
            step,
            shifts: Vec::new(),
            weights: Vec::new(),
        };
        let mut xi = vec![0.0; self.dim];
        for_each_index(self.dim, k_max, |k| {
            for (x, &kk) in xi.iter_mut().zip(k) {
                *x = kk as f64 * step;
            }
            let zero = k.iter().all(|&v| v == 0);
            if let Some(r) = radius {
                if norm(&xi) > r * (1.0 + 1e-12) {
                    return;
                }
            }
            let w = if self.is_zero() {
                0.0
            } else {
                self.cell_weight(&xi, step, 0.0, f64::INFINITY, &radii)
            };
            if w > 0.0 || zero {
                lattice.shifts.extend_from_slice(k);
                lattice.weights.push(w);
            }
        });
        Ok(lattice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn zero_kernel_moments_vanish() {
        let k = Kernel::zero(2).unwrap();
        assert_eq!(k.moment(2.0).unwrap(), 0.0);
        assert_eq!(k.anorm_p(&[1.0, 0.0], 2.0).unwrap(), 0.0);
        assert_eq!(k.ahom_matrix().unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn interval_moment_matches_antiderivative() {
        let k = Kernel::indicator_ball(1, 1.0).unwrap();
        assert!(close(k.moment(2.0).unwrap(), 8.0 / 3.0, 1e-4));
    }

    #[test]
    fn disk_moment_matches_polar_value() {
        let k = Kernel::indicator_ball(2, 1.0).unwrap();
        assert!(close(k.moment(2.0).unwrap(), PI + PI / 2.0, 1e-4));
    }

    #[test]
    fn interval_tail_moments() {
        let k = Kernel::indicator_ball(1, 1.0).unwrap();
        assert_eq!(k.tail_moment(3.0, 1.0).unwrap(), 0.0);
        assert!(close(k.tail_moment(2.0, 0.5).unwrap(), 7.0 / 12.0, 1e-4));
    }

    #[test]
    fn truncation_restricts_indicator() {
        let k = Kernel::indicator_ball(2, 2.0).unwrap();
        let t = k.truncate(1.0).unwrap();
        let unit = Kernel::indicator_ball(2, 1.0).unwrap();
        for xi in [[0.3, 0.2], [0.99, 0.0], [1.01, 0.0], [1.5, 1.0], [0.0, -1.0]] {
            assert_eq!(t.eval(&xi), unit.eval(&xi));
        }
        assert_eq!(t.support_radius(), Some(1.0));
        let same = k.truncate(5.0).unwrap();
        for xi in [[0.3, 0.2], [1.9, 0.0], [2.1, 0.0]] {
            assert_eq!(same.eval(&xi), k.eval(&xi));
        }
    }

    #[test]
    fn sign_changing_kernel_rejected() {
        let f: KernelFn = Arc::new(|xi: &[f64]| 1.0 - 2.0 * xi[0].abs());
        let err = Kernel::custom(1, f, Some(1.0), None, true, 0.01).unwrap_err();
        assert!(matches!(err, Error::InvalidKernel(_)));
    }

    #[test]
    fn unbounded_custom_without_decay_is_not_certifiable() {
        let f: KernelFn = Arc::new(|xi: &[f64]| 1.0 / (1.0 + xi[0] * xi[0]));
        let k = Kernel::custom(1, f, None, None, true, 0.01).unwrap();
        assert!(matches!(k.moment(2.0), Err(Error::MomentNotCertifiable(_))));
    }

    #[test]
    fn anorm_of_interval_is_two_over_p_plus_one() {
        let k = Kernel::indicator_ball(1, 1.0).unwrap();
        for p in [2.0, 3.0, 4.0] {
            for m in [0.5f64, 1.0, -2.0] {
                let expected = 2.0 / (p + 1.0) * m.abs().powf(p);
                let got = k.anorm_p(&[m], p).unwrap();
                assert!(close(got, expected, 5e-4), "p={p} m={m} got {got} expected {expected}");
            }
        }
    }

    #[test]
    fn ahom_of_interval_and_disk() {
        let k1 = Kernel::indicator_ball(1, 1.0).unwrap();
        assert!(close(k1.ahom_matrix().unwrap()[(0, 0)], 2.0 / 3.0, 1e-4));
        let k2 = Kernel::indicator_ball(2, 1.0).unwrap();
        let a = k2.ahom_matrix().unwrap();
        assert!(close(a[(0, 0)], PI / 4.0, 1e-4));
        assert!(close(a[(1, 1)], PI / 4.0, 1e-4));
        assert!(a[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn energy_lattice_of_interval_at_tenth_step() {
        let k = Kernel::indicator_ball(1, 1.0).unwrap();
        let lat = k.lattice(0.1, None).unwrap();
        assert_eq!(lat.len(), 21);
        assert!(close(lat.total_weight(), 2.0, 1e-12));
        let edge = (0..lat.len()).find(|&i| lat.shift(i) == [10]).unwrap();
        assert!(close(lat.weight(edge), 0.05, 1e-12));
    }

    #[test]
    fn gaussian_moment_matches_closed_form() {
        // int exp(-x^2/w^2)(1 + x^2) dx = w sqrt(pi) (1 + w^2/2)
        let w = 0.7;
        let k = Kernel::gaussian(1, w).unwrap();
        let expected = w * PI.sqrt() * (1.0 + w * w / 2.0);
        assert!(close(k.moment(2.0).unwrap(), expected, 1e-8));
    }
}
