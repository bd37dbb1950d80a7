//! Discrete nonlocal energies and their exact gradients.
//!
//! The discrete energy of a nodal field `u` at scale `eps` on a grid of
//! spacing `h` (with `h` dividing `eps`) is
//!
//! ```text
//! F(u) = sum_xi w(xi) sum_{x in pairs(eps xi)} h^d phi(x/eps, xi, (u(x + eps xi) - u(x)) / eps)
//! ```
//!
//! with `xi` on the lattice `(h/eps) Z^d` and `w(xi) = (h/eps)^d * mean_cell(a)`.
//! Partial sums are formed per lattice node and reduced in lattice order, so
//! the result does not depend on the number of worker threads.

use rayon::prelude::*;

use crate::density::DensitySpec;
use crate::error::{Error, Result};
use crate::grid::{build_layer_mask, fd_gradient, integer_ratio, Domain, GridField};
use crate::kernel::{Kernel, Lattice};

/// Relative tail tolerance used to cut unbounded kernels in energy sums.
pub const INTERACTION_TAIL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct XiContribution {
    pub shift: Vec<i64>,
    pub xi: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyValue {
    pub total: f64,
    /// Contribution of the `xi = 0` node, `sum_x h^d w(0) phi(x/eps, 0, 0)`.
    pub zero_shift: f64,
    pub per_xi: Option<Vec<XiContribution>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyOptions {
    /// Keep only lattice nodes with `|xi| <= truncation`.
    pub truncation: Option<f64>,
    /// On periodic domains, evaluate at `v = M x + u` (row-major `m x d`).
    pub affine: Option<Vec<f64>>,
    pub keep_breakdown: bool,
}

/// Precomputed lattice and geometry for repeated energy/gradient evaluation.
#[derive(Debug, Clone)]
pub struct EnergyPlan {
    spec: DensitySpec,
    domain: Domain,
    eps: f64,
    lattice: Lattice,
    affine: Option<Vec<f64>>,
    scaled_coords: Vec<f64>,
    keep_breakdown: bool,
}

/// Checks that `h` divides `eps` and returns the ratio.
pub fn check_commensurate(h: f64, eps: f64) -> Result<i64> {
    match integer_ratio(eps, h) {
        Some(n) if n >= 1 => Ok(n),
        _ => Err(Error::IncommensurateGrid { h, eps }),
    }
}

impl EnergyPlan {
    pub fn new(spec: &DensitySpec, domain: &Domain, eps: f64, opts: &EnergyOptions) -> Result<Self> {
        if spec.dim() != domain.dim() {
            return Err(Error::Dimension(format!(
                "density is {}-d, domain is {}-d",
                spec.dim(),
                domain.dim()
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
        }
        check_commensurate(domain.h(), eps)?;
        if let Some(m) = &opts.affine {
            if m.len() != spec.codim() * spec.dim() {
                return Err(Error::Dimension(format!(
                    "affine matrix has {} entries, expected {}",
                    m.len(),
                    spec.codim() * spec.dim()
                )));
            }
            if !domain.is_periodic() {
                return Err(Error::InvalidArgument("affine offsets need a periodic domain".into()));
            }
        }
        let step = domain.h() / eps;
        let kernel = spec.kernel();
        let radius = match kernel.support_radius() {
            Some(_) => opts.truncation,
            None => {
                let r = kernel.effective_radius(spec.p().max(1.0), INTERACTION_TAIL_TOLERANCE)?;
                Some(opts.truncation.map_or(r, |t| t.min(r)))
            }
        };
        let mut lattice = kernel.lattice(step, radius)?;
        if let Some(t) = opts.truncation {
            lattice = lattice.restrict(t);
        }
        if !domain.is_periodic() {
            let range = eps * lattice.reach();
            let extent = domain.min_length();
            if range >= extent {
                return Err(Error::InteractionRangeExceedsDomain { range, extent });
            }
        }
        let d = domain.dim();
        let mut scaled_coords = vec![0.0; domain.num_nodes() * d];
        for node in 0..domain.num_nodes() {
            domain.coords_into(node, &mut scaled_coords[node * d..(node + 1) * d]);
        }
        scaled_coords.iter_mut().for_each(|c| *c /= eps);
        Ok(EnergyPlan {
            spec: spec.clone(),
            domain: domain.clone(),
            eps,
            lattice,
            affine: opts.affine.clone(),
            scaled_coords,
            keep_breakdown: opts.keep_breakdown,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn spec(&self) -> &DensitySpec {
        &self.spec
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn num_unknowns(&self) -> usize {
        self.domain.num_nodes() * self.spec.codim()
    }

    fn y(&self, node: usize) -> &[f64] {
        let d = self.domain.dim();
        &self.scaled_coords[node * d..(node + 1) * d]
    }

    /// Difference quotient of pair `(i, j)` for lattice node `q` into `z`.
    #[inline]
    fn quotient(&self, u: &[f64], i: usize, j: usize, xi: &[f64], z: &mut [f64]) {
        let m = self.spec.codim();
        let inv = 1.0 / self.eps;
        for c in 0..m {
            z[c] = (u[j * m + c] - u[i * m + c]) * inv;
        }
        if let Some(mat) = &self.affine {
            let d = xi.len();
            for c in 0..m {
                z[c] += (0..d).map(|k| mat[c * d + k] * xi[k]).sum::<f64>();
            }
        }
    }

    fn xi_partial(&self, u: &[f64], q: usize) -> f64 {
        let w = self.lattice.weight(q);
        if w == 0.0 {
            return 0.0;
        }
        let xi = self.lattice.xi(q);
        let mut z = vec![0.0; self.spec.codim()];
        let mut acc = 0.0;
        for (i, j) in self.domain.pairs(self.lattice.shift(q)) {
            self.quotient(u, i, j, &xi, &mut z);
            acc += self.spec.phi(self.y(i), &xi, &z);
        }
        acc * w * self.domain.cell_volume()
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        let partials: Vec<f64> = (0..self.lattice.len())
            .into_par_iter()
            .map(|q| self.xi_partial(u, q))
            .collect();
        partials.iter().sum()
    }

    pub fn evaluate(&self, u: &[f64]) -> EnergyValue {
        let partials: Vec<f64> = (0..self.lattice.len())
            .into_par_iter()
            .map(|q| self.xi_partial(u, q))
            .collect();
        let total = partials.iter().sum();
        let zero_shift = (0..self.lattice.len())
            .filter(|&q| self.lattice.is_zero_shift(q))
            .map(|q| partials[q])
            .sum();
        let per_xi = self.keep_breakdown.then(|| {
            partials
                .iter()
                .enumerate()
                .map(|(q, &value)| XiContribution {
                    shift: self.lattice.shift(q).to_vec(),
                    xi: self.lattice.xi(q),
                    value,
                })
                .collect()
        });
        EnergyValue {
            total,
            zero_shift,
            per_xi,
        }
    }

    /// Exact partial derivatives of [`EnergyPlan::value`] with respect to the
    /// nodal values; entries of nodes outside `free` are set to zero.
    pub fn gradient(&self, u: &[f64], free: Option<&[bool]>, out: &mut [f64]) -> Result<()> {
        if !self.spec.has_dz() {
            return Err(Error::NotDifferentiable);
        }
        let m = self.spec.codim();
        let scale = self.domain.cell_volume() / self.eps;
        let lattice = &self.lattice;
        let xis: Vec<Vec<f64>> = (0..lattice.len()).map(|q| lattice.xi(q)).collect();
        let negated: Vec<Vec<i64>> = (0..lattice.len())
            .map(|q| lattice.shift(q).iter().map(|k| -k).collect())
            .collect();
        out.par_chunks_mut(m).enumerate().for_each(|(i, g)| {
            g.fill(0.0);
            if let Some(f) = free {
                if !f[i] {
                    return;
                }
            }
            let mut z = vec![0.0; m];
            let mut dz = vec![0.0; m];
            for q in 0..lattice.len() {
                let w = lattice.weight(q);
                if w == 0.0 || lattice.is_zero_shift(q) {
                    continue;
                }
                let xi = &xis[q];
                if let Some(j) = self.domain.shifted(i, lattice.shift(q)) {
                    self.quotient(u, i, j, xi, &mut z);
                    // dz never fails here: has_dz was checked above
                    let _ = self.spec.phi_dz(self.y(i), xi, &z, &mut dz);
                    for c in 0..m {
                        g[c] -= w * dz[c];
                    }
                }
                if let Some(k) = self.domain.shifted(i, &negated[q]) {
                    self.quotient(u, k, i, xi, &mut z);
                    let _ = self.spec.phi_dz(self.y(k), xi, &z, &mut dz);
                    for c in 0..m {
                        g[c] += w * dz[c];
                    }
                }
            }
            for v in g.iter_mut() {
                *v *= scale;
            }
        });
        Ok(())
    }
}

fn check_field(spec: &DensitySpec, u: &GridField) -> Result<()> {
    if u.codim() != spec.codim() {
        return Err(Error::Dimension(format!(
            "field codimension {} vs density codimension {}",
            u.codim(),
            spec.codim()
        )));
    }
    Ok(())
}

/// The nonlocal energy at scale `eps`.
pub fn eval_f(spec: &DensitySpec, u: &GridField, eps: f64) -> Result<EnergyValue> {
    eval_f_with(spec, u, eps, &EnergyOptions::default())
}

pub fn eval_f_with(spec: &DensitySpec, u: &GridField, eps: f64, opts: &EnergyOptions) -> Result<EnergyValue> {
    check_field(spec, u)?;
    let plan = EnergyPlan::new(spec, u.domain(), eps, opts)?;
    Ok(plan.evaluate(u.values()))
}

/// Convolution energy `G_eps[a]` with density `a(xi) |z|^p`.
pub fn eval_g(kernel: &Kernel, u: &GridField, eps: f64, p: f64) -> Result<EnergyValue> {
    let spec = DensitySpec::convolution(kernel.clone(), p, u.codim())?;
    eval_f(&spec, u, eps)
}

/// Energy restricted to lattice nodes with `|xi| <= t`.
pub fn eval_truncated(spec: &DensitySpec, t: f64, u: &GridField, eps: f64) -> Result<EnergyValue> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("truncation must be positive, got {t}")));
    }
    eval_f_with(
        spec,
        u,
        eps,
        &EnergyOptions {
            truncation: Some(t),
            ..Default::default()
        },
    )
}

/// Gradient of the discrete energy; zero on nodes outside `free`.
pub fn grad_f(spec: &DensitySpec, u: &GridField, eps: f64, free: Option<&[bool]>) -> Result<GridField> {
    check_field(spec, u)?;
    if let Some(f) = free {
        if f.len() != u.domain().num_nodes() {
            return Err(Error::Dimension("free mask length differs from node count".into()));
        }
    }
    let plan = EnergyPlan::new(spec, u.domain(), eps, &EnergyOptions::default())?;
    let mut out = vec![0.0; u.values().len()];
    plan.gradient(u.values(), free, &mut out)?;
    GridField::from_values(u.domain(), u.codim(), out)
}

/// Energy with transported interaction vectors and a sampling density:
///
/// `sum_{x,y} h^{2d} eps^{-d} rho(x) rho(y) f(x/eps, (T(y) - T(x))/eps, (u(y) - u(x))/eps)`
///
/// over node pairs with `|y - x| <= 2 eps R`. The kernel factor is averaged
/// over the cube of side `h/eps` around the transported `xi`, which makes the
/// identity map reproduce the lattice weights of [`eval_f`].
pub fn eval_perturbed(
    spec: &DensitySpec,
    rho: &GridField,
    t_map: &[f64],
    u: &GridField,
    eps: f64,
) -> Result<EnergyValue> {
    check_field(spec, u)?;
    let dom = u.domain();
    let d = dom.dim();
    let m = u.codim();
    if rho.codim() != 1 || !rho.domain().same_grid(dom) {
        return Err(Error::MismatchedDomains("density field must be scalar on the same grid".into()));
    }
    if rho.values().iter().any(|&r| !(r > 0.0)) {
        return Err(Error::DensityMustBePositive);
    }
    if t_map.len() != dom.num_nodes() * d {
        return Err(Error::Dimension("transport map must give one point per node".into()));
    }
    check_commensurate(dom.h(), eps)?;
    let kernel = spec.kernel();
    let support = match kernel.support_radius() {
        Some(s) => s,
        None => kernel.effective_radius(spec.p(), INTERACTION_TAIL_TOLERANCE)?,
    };
    let h = dom.h();
    let step = h / eps;
    let reach = 2.0 * eps * support;
    let k_max = (reach / h).floor() as i64;
    let mut offsets: Vec<Vec<i64>> = Vec::new();
    let span = 2 * k_max + 1;
    for flat in 0..span.pow(d as u32) {
        let mut rest = flat;
        let mut s = vec![0i64; d];
        for v in s.iter_mut() {
            *v = rest % span - k_max;
            rest /= span;
        }
        let dist = s.iter().map(|&k| (k as f64 * h).powi(2)).sum::<f64>().sqrt();
        if dist <= reach * (1.0 + 1e-12) {
            offsets.push(s);
        }
    }
    let radii: Vec<f64> = kernel.support_radius().into_iter().collect();
    let vol = step.powi(d as i32);
    let displacement: Vec<f64> = (0..dom.num_nodes())
        .flat_map(|i| {
            let x = dom.coords(i);
            (0..d).map(move |k| x[k]).collect::<Vec<_>>()
        })
        .zip(t_map)
        .map(|(x, t)| t - x)
        .collect();
    let uv = u.values();
    let rv = rho.values();
    let cell = dom.cell_volume();
    let partials: Vec<f64> = offsets
        .par_iter()
        .map(|s| {
            let mut acc = 0.0;
            let mut xi = vec![0.0; d];
            let mut z = vec![0.0; m];
            let mut y = vec![0.0; d];
            for (i, j) in dom.pairs(s) {
                for k in 0..d {
                    xi[k] = (s[k] as f64 * h + displacement[j * d + k] - displacement[i * d + k]) / eps;
                }
                let a = kernel.cell_weight(&xi, step, 0.0, f64::INFINITY, &radii) / vol;
                if a == 0.0 {
                    continue;
                }
                for c in 0..m {
                    z[c] = (uv[j * m + c] - uv[i * m + c]) / eps;
                }
                dom.coords_into(i, &mut y);
                y.iter_mut().for_each(|v| *v /= eps);
                acc += a * spec.phi(&y, &xi, &z) * rv[i] * rv[j];
            }
            acc * cell * cell / eps.powi(d as i32)
        })
        .collect();
    let zero_shift = offsets
        .iter()
        .zip(&partials)
        .filter(|(s, _)| s.iter().all(|&k| k == 0))
        .map(|(_, v)| v)
        .sum();
    Ok(EnergyValue {
        total: partials.iter().sum(),
        zero_shift,
        per_xi: None,
    })
}

/// Trapezoidal node weights (halved on each truncated face).
pub fn trapezoid_weights(dom: &Domain) -> Vec<f64> {
    let base = dom.cell_volume();
    (0..dom.num_nodes())
        .map(|node| {
            if dom.is_periodic() {
                return base;
            }
            let multi = dom.multi_index(node);
            multi
                .iter()
                .zip(dom.counts())
                .fold(base, |w, (&i, &n)| if i == 0 || i == n - 1 { 0.5 * w } else { w })
        })
        .collect()
}

/// `sum_x w_x int a(xi) |Du(x) xi|^p dxi` with finite-difference `Du` and
/// trapezoidal node weights `w_x`.
pub fn eval_local_limit(kernel: &Kernel, u: &GridField, p: f64) -> Result<f64> {
    let dom = u.domain();
    if kernel.dim() != dom.dim() {
        return Err(Error::Dimension("kernel and domain dimensions differ".into()));
    }
    let grad = fd_gradient(u);
    let weights = trapezoid_weights(dom);
    let (m, d) = (u.codim(), dom.dim());
    if p == 2.0 {
        let a = kernel.ahom_matrix()?;
        let mut total = 0.0;
        for (node, w) in weights.iter().enumerate() {
            let du = grad.at(node);
            let mut local = 0.0;
            for row in 0..m {
                let r = &du[row * d..(row + 1) * d];
                for i in 0..d {
                    for j in 0..d {
                        local += r[i] * a[(i, j)] * r[j];
                    }
                }
            }
            total += w * local;
        }
        return Ok(total);
    }
    if m == 1 && kernel.is_radial() {
        let cp = kernel.c_p(p)?;
        return Ok(weights
            .iter()
            .enumerate()
            .map(|(node, w)| {
                let g = grad.at(node);
                w * cp * g.iter().map(|v| v * v).sum::<f64>().sqrt().powf(p)
            })
            .sum());
    }
    let mut total = 0.0;
    for (node, w) in weights.iter().enumerate() {
        total += w * kernel.matrix_norm_p(grad.at(node), m, p)?;
    }
    Ok(total)
}

/// `(sum_x h^d |u|^p) / G_eps^r(u)` for `u` vanishing on the layer of width `eps r`.
pub fn poincare_ratio(r: f64, u: &GridField, eps: f64, p: f64) -> Result<f64> {
    let dom = u.domain();
    let mask = build_layer_mask(dom, eps * r)?;
    for node in 0..dom.num_nodes() {
        if mask.contains(node) && u.node(node).iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidArgument(format!(
                "field does not vanish on the boundary layer (node {node})"
            )));
        }
    }
    let mass = u.lp_power(p);
    if mass == 0.0 {
        return Err(Error::RatioUndefined);
    }
    let kernel = Kernel::indicator_ball(dom.dim(), r)?;
    let g = eval_g(&kernel, u, eps, p)?;
    Ok(mass / g.total)
}
