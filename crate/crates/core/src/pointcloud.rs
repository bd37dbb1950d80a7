//! Graph energies on random point clouds.
//!
//! For a cloud `x_1..x_n` and values `u_i`, the discrete energy is
//!
//! ```text
//! E_n(u) = 1 / (eps^d n^2) sum_{i,j} f((x_j - x_i) / eps, (u_j - u_i) / eps)
//! ```
//!
//! Pairs further apart than `eps R` (with `R` the kernel support) are found
//! with a uniform cell list. Each point's neighbours are summed in index
//! order and the per-point sums are reduced in point order, which makes the
//! result identical to the plain double loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::density::DensitySpec;
use crate::error::{Error, Result};
use crate::grid::{Domain, GridField};
use crate::homogenize::fhom_closed_form;

/// Sampling densities on the box `[0, L_1] x ... x [0, L_d]`.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplingDensity {
    Uniform,
    /// Proportional to `c + beta x_1`.
    Affine { c: f64, beta: f64 },
}

impl SamplingDensity {
    pub fn parse(name: &str, c: f64, beta: f64) -> Result<Self> {
        match name {
            "uniform" => Ok(SamplingDensity::Uniform),
            "affine" => Ok(SamplingDensity::Affine { c, beta }),
            other => Err(Error::Parse(format!(
                "unknown sampling density '{other}' (expected uniform or affine)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SamplingDensity::Uniform => "uniform",
            SamplingDensity::Affine { .. } => "affine",
        }
    }

    /// Unnormalized value and its maximum over the box.
    fn raw(&self, x: &[f64]) -> f64 {
        match self {
            SamplingDensity::Uniform => 1.0,
            SamplingDensity::Affine { c, beta } => c + beta * x[0],
        }
    }

    fn check(&self, lengths: &[f64]) -> Result<(f64, f64)> {
        let (lo, hi) = match self {
            SamplingDensity::Uniform => (1.0, 1.0),
            SamplingDensity::Affine { c, beta } => {
                let end = c + beta * lengths[0];
                (c.min(end), c.max(end))
            }
        };
        if !(lo > 0.0 && hi.is_finite()) {
            return Err(Error::Unnormalizable(format!(
                "{self:?} is not bounded away from zero on the box"
            )));
        }
        Ok((lo, hi))
    }

    /// Normalizing constant `int raw`.
    fn mass(&self, lengths: &[f64]) -> f64 {
        let vol: f64 = lengths.iter().product();
        match self {
            SamplingDensity::Uniform => vol,
            SamplingDensity::Affine { c, beta } => vol * (c + 0.5 * beta * lengths[0]),
        }
    }

    /// Probability density at `x`.
    pub fn density(&self, x: &[f64], lengths: &[f64]) -> f64 {
        self.raw(x) / self.mass(lengths)
    }

    /// `int rho^2` over the box.
    pub fn square_integral(&self, lengths: &[f64]) -> f64 {
        let vol: f64 = lengths.iter().product();
        let z = self.mass(lengths);
        match self {
            SamplingDensity::Uniform => vol / (z * z),
            SamplingDensity::Affine { c, beta } => {
                let l = lengths[0];
                let line = c * c * l + c * beta * l * l + beta * beta * l.powi(3) / 3.0;
                vol / l * line / (z * z)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    lengths: Vec<f64>,
    points: Vec<f64>,
    seed: u64,
    density: SamplingDensity,
}

impl PointCloud {
    /// Cloud from explicit coordinates (row-major, `d` per point).
    pub fn from_points(lengths: &[f64], points: Vec<f64>) -> Result<Self> {
        let d = lengths.len();
        if d == 0 || points.len() % d != 0 {
            return Err(Error::Dimension("coordinates do not split into points".into()));
        }
        if points.len() / d < 1 {
            return Err(Error::InvalidArgument("a cloud needs at least one point".into()));
        }
        for (k, &x) in points.iter().enumerate() {
            if !(x >= 0.0 && x <= lengths[k % d]) {
                return Err(Error::InvalidArgument(format!("point coordinate {x} outside the box")));
            }
        }
        Ok(PointCloud {
            dim: d,
            lengths: lengths.to_vec(),
            points,
            seed: 0,
            density: SamplingDensity::Uniform,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn density(&self) -> &SamplingDensity {
        &self.density
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.len() as f64
    }

    /// Same cloud with points reordered by `perm` (`new[k] = old[perm[k]]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
        let mut out = self.clone();
        out.points = perm.iter().flat_map(|&p| self.point(p).to_vec()).collect();
        Ok(out)
    }
}

/// `n` i.i.d. points by rejection from the uniform proposal. Every proposal
/// consumes `d + 1` uniforms, so a flat density reproduces the uniform stream.
pub fn sample_cloud(rho: &SamplingDensity, lengths: &[f64], n: usize, seed: u64) -> Result<PointCloud> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("a sampled cloud needs n >= 2, got {n}")));
    }
    if lengths.is_empty() || lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument("box lengths must be positive".into()));
    }
    let (_, hi) = rho.check(lengths)?;
    let d = lengths.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n * d);
    let mut x = vec![0.0; d];
    while points.len() < n * d {
        for (v, l) in x.iter_mut().zip(lengths) {
            *v = rng.gen::<f64>() * l;
        }
        let accept: f64 = rng.gen();
        if accept * hi < rho.raw(&x) {
            points.extend_from_slice(&x);
        }
    }
    Ok(PointCloud {
        dim: d,
        lengths: lengths.to_vec(),
        points,
        seed,
        density: rho.clone(),
    })
}

/// Uniform cell list with cells of side at least `side`.
struct CellList {
    dims: Vec<usize>,
    side: Vec<f64>,
    start: Vec<usize>,
    members: Vec<usize>,
}

impl CellList {
    fn new(cloud: &PointCloud, side: f64) -> Self {
        let d = cloud.dim();
        let dims: Vec<usize> = cloud
            .lengths()
            .iter()
            .map(|&l| ((l / side).floor() as usize).clamp(1, 1 << 20))
            .collect();
        let side: Vec<f64> = cloud.lengths().iter().zip(&dims).map(|(l, &k)| l / k as f64).collect();
        let total: usize = dims.iter().product();
        let cell_of: Vec<usize> = (0..cloud.len())
            .map(|i| {
                let p = cloud.point(i);
                let mut idx = 0;
                for k in 0..d {
                    let c = ((p[k] / side[k]).floor() as usize).min(dims[k] - 1);
                    idx = idx * dims[k] + c;
                }
                idx
            })
            .collect();
        let mut start = vec![0usize; total + 1];
        for &c in &cell_of {
            start[c + 1] += 1;
        }
        for c in 0..total {
            start[c + 1] += start[c];
        }
        let mut fill = start.clone();
        let mut members = vec![0usize; cloud.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            members[fill[c]] = i;
            fill[c] += 1;
        }
        CellList {
            dims,
            side,
            start,
            members,
        }
    }

    /// Indices of all points in the cells adjacent to `x`, sorted.
    fn neighbours(&self, x: &[f64], out: &mut Vec<usize>) {
        out.clear();
        let d = self.dims.len();
        let centre: Vec<i64> = (0..d)
            .map(|k| ((x[k] / self.side[k]).floor() as i64).min(self.dims[k] as i64 - 1))
            .collect();
        let span = 3usize.pow(d as u32);
        'cells: for code in 0..span {
            let mut rest = code;
            let mut idx = 0usize;
            for k in 0..d {
                let c = centre[k] + (rest % 3) as i64 - 1;
                rest /= 3;
                if c < 0 || c >= self.dims[k] as i64 {
                    continue 'cells;
                }
                idx = idx * self.dims[k] + c as usize;
            }
            out.extend_from_slice(&self.members[self.start[idx]..self.start[idx + 1]]);
        }
        out.sort_unstable();
        out.dedup();
    }
}

/// Discrete energy for a general `f(xi, z)` vanishing for `|xi| > radius`.
pub fn eval_discrete_energy_with<F>(f: F, radius: f64, cloud: &PointCloud, eps: f64, u: &[f64], m: usize) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    let n = cloud.len();
    let d = cloud.dim();
    if m == 0 || u.len() != n * m {
        return Err(Error::Dimension(format!("expected {} values, got {}", n * m, u.len())));
    }
    if !(eps > 0.0) || !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument("eps and the kernel support must be positive".into()));
    }
    let reach = eps * radius;
    let cells = CellList::new(cloud, reach);
    let partials: Vec<f64> = (0..n)
        .into_par_iter()
        .map_init(
            || (Vec::new(), vec![0.0; d], vec![0.0; m]),
            |(nb, xi, z), i| {
                let xi_pt = cloud.point(i);
                cells.neighbours(xi_pt, nb);
                let mut acc = 0.0;
                for &j in nb.iter() {
                    let xj = cloud.point(j);
                    let mut r2 = 0.0;
                    for k in 0..d {
                        xi[k] = (xj[k] - xi_pt[k]) / eps;
                        r2 += (xj[k] - xi_pt[k]).powi(2);
                    }
                    if r2.sqrt() > reach {
                        continue;
                    }
                    for c in 0..m {
                        z[c] = (u[j * m + c] - u[i * m + c]) / eps;
                    }
                    acc += f(xi, z);
                }
                acc
            },
        )
        .collect();
    let total: f64 = partials.iter().sum();
    Ok(total / (eps.powi(d as i32) * (n as f64).powi(2)))
}

/// Discrete energy of an x-independent density with compactly supported kernel.
pub fn eval_discrete_energy(spec: &DensitySpec, cloud: &PointCloud, eps: f64, u: &[f64]) -> Result<f64> {
    if !spec.flags().x_independent {
        return Err(Error::ClosedFormRequiresXIndependence);
    }
    if spec.dim() != cloud.dim() {
        return Err(Error::Dimension("density and cloud dimensions differ".into()));
    }
    let radius = spec
        .kernel()
        .support_radius()
        .ok_or_else(|| Error::InvalidKernel("point-cloud energies need a compactly supported kernel".into()))?;
    let y = vec![0.0; cloud.dim()];
    eval_discrete_energy_with(|xi, z| spec.value(&y, xi, z), radius, cloud, eps, u, spec.codim())
}

/// Each grid node takes the value of its nearest point (lowest index on ties).
pub fn nearest_interpolate(cloud: &PointCloud, u: &[f64], m: usize, dom: &Domain) -> Result<GridField> {
    let n = cloud.len();
    if dom.dim() != cloud.dim() {
        return Err(Error::Dimension("domain and cloud dimensions differ".into()));
    }
    if m == 0 || u.len() != n * m {
        return Err(Error::Dimension(format!("expected {} values, got {}", n * m, u.len())));
    }
    let d = dom.dim();
    let values: Vec<f64> = (0..dom.num_nodes())
        .into_par_iter()
        .flat_map_iter(|node| {
            let x = dom.coords(node);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for i in 0..n {
                let p = cloud.point(i);
                let r2: f64 = (0..d).map(|k| (p[k] - x[k]).powi(2)).sum();
                if r2 < best_d {
                    best_d = r2;
                    best = i;
                }
            }
            u[best * m..(best + 1) * m].to_vec()
        })
        .collect();
    GridField::from_values(dom, m, values)
}

/// `eps(n) = prefactor (log n / n)^exponent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsRule {
    pub prefactor: f64,
    pub exponent: f64,
}

impl EpsRule {
    /// `(log n / n)^{1/(d+2)}`.
    pub fn standard(dim: usize) -> Self {
        EpsRule {
            prefactor: 1.0,
            exponent: 1.0 / (dim as f64 + 2.0),
        }
    }

    pub fn eps(&self, n: usize) -> f64 {
        let n = n as f64;
        self.prefactor * (n.ln() / n).powf(self.exponent)
    }

    /// The rule must send `log n / (n eps^d)` to zero, i.e. `exponent < 1/d`.
    pub fn check(&self, dim: usize) -> Result<()> {
        if !(self.prefactor > 0.0) || !(self.exponent > 0.0 && self.exponent * (dim as f64) < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "eps rule {self:?} violates log n / (n eps^{dim}) -> 0"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudRow {
    pub n: usize,
    pub seed: u64,
    pub eps: f64,
    pub energy: f64,
    pub target: f64,
    /// `(energy - target) / target`, or `energy - target` when the target is zero.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudSummary {
    pub n: usize,
    pub mean_abs_gap: f64,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudReport {
    pub rows: Vec<CloudRow>,
    pub summary: Vec<CloudSummary>,
}

/// Evaluates the energy of `u_i = M x_i` on clouds of each size and seed and
/// compares it with `int rho^2 * f_hom(M)`.
pub fn cloud_convergence_run(
    spec: &DensitySpec,
    rho: &SamplingDensity,
    lengths: &[f64],
    m_probe: &[f64],
    n_list: &[usize],
    rule: EpsRule,
    seeds: &[u64],
) -> Result<CloudReport> {
    let (d, m) = (spec.dim(), spec.codim());
    if lengths.len() != d {
        return Err(Error::Dimension("box and density dimensions differ".into()));
    }
    rule.check(d)?;
    if seeds.is_empty() || n_list.is_empty() {
        return Err(Error::InvalidArgument("need at least one n and one seed".into()));
    }
    let target = rho.square_integral(lengths) * fhom_closed_form(spec, m_probe)?;
    let tasks: Vec<(usize, u64)> = n_list
        .iter()
        .flat_map(|&n| seeds.iter().map(move |&s| (n, s)))
        .collect();
    let rows: Vec<Result<CloudRow>> = tasks
        .par_iter()
        .map(|&(n, seed)| {
            let cloud = sample_cloud(rho, lengths, n, seed)?;
            let u: Vec<f64> = (0..n)
                .flat_map(|i| {
                    let x = cloud.point(i);
                    (0..m)
                        .map(|c| (0..d).map(|k| m_probe[c * d + k] * x[k]).sum::<f64>())
                        .collect::<Vec<_>>()
                })
                .collect();
            let eps = rule.eps(n);
            let energy = eval_discrete_energy(spec, &cloud, eps, &u)?;
            let gap = if target != 0.0 {
                (energy - target) / target
            } else {
                energy - target
            };
            Ok(CloudRow {
                n,
                seed,
                eps,
                energy,
                target,
                gap,
            })
        })
        .collect();
    let rows: Vec<CloudRow> = rows.into_iter().collect::<Result<_>>()?;
    let summary = n_list
        .iter()
        .map(|&n| {
            let gaps: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.gap.abs()).collect();
            let k = gaps.len() as f64;
            let mean = gaps.iter().sum::<f64>() / k;
            let spread = if gaps.len() > 1 {
                (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            CloudSummary {
                n,
                mean_abs_gap: mean,
                spread,
            }
        })
        .collect();
    Ok(CloudReport { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoundaryMode;
    use crate::kernel::Kernel;

    #[test]
    fn sampling_is_reproducible_and_flat_affine_matches_uniform() {
        let a = sample_cloud(&SamplingDensity::Uniform, &[1.0, 1.0], 2, 42).unwrap();
        let b = sample_cloud(&SamplingDensity::Uniform, &[1.0, 1.0], 2, 42).unwrap();
        assert_eq!(a.points(), b.points());
        let flat = sample_cloud(&SamplingDensity::Affine { c: 2.0, beta: 0.0 }, &[1.0, 1.0], 50, 7).unwrap();
        let uni = sample_cloud(&SamplingDensity::Uniform, &[1.0, 1.0], 50, 7).unwrap();
        assert_eq!(flat.points(), uni.points());
    }

    #[test]
    fn unnormalizable_densities_are_rejected() {
        let rho = SamplingDensity::Affine { c: 1.0, beta: -2.0 };
        assert!(matches!(
            sample_cloud(&rho, &[1.0], 10, 0),
            Err(Error::Unnormalizable(_))
        ));
        assert!(sample_cloud(&SamplingDensity::Uniform, &[1.0], 1, 0).is_err());
    }

    #[test]
    fn affine_square_integral_matches_quadrature() {
        let rho = SamplingDensity::Affine { c: 1.0, beta: 0.5 };
        let lengths = [2.0, 1.0];
        let n = 20_000;
        let mut sum = 0.0;
        for k in 0..n {
            let x = (k as f64 + 0.5) / n as f64 * 2.0;
            sum += rho.density(&[x, 0.0], &lengths).powi(2) * 2.0 / n as f64;
        }
        assert!((sum - rho.square_integral(&lengths)).abs() < 1e-8);
    }

    #[test]
    fn two_points_split_the_interval_at_the_midpoint() {
        let cloud = PointCloud::from_points(&[1.0], vec![0.25, 0.75]).unwrap();
        let dom = Domain::unit(1, 0.125, BoundaryMode::Truncated).unwrap();
        let g = nearest_interpolate(&cloud, &[1.0, 2.0], 1, &dom).unwrap();
        assert_eq!(g.values(), &[1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let single = PointCloud::from_points(&[1.0], vec![0.3]).unwrap();
        let g = nearest_interpolate(&single, &[5.0], 1, &dom).unwrap();
        assert!(g.values().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn constant_values_have_zero_energy() {
        let k = Kernel::indicator_ball(2, 1.0).unwrap();
        let spec = DensitySpec::convolution(k, 2.0, 1).unwrap();
        let cloud = sample_cloud(&SamplingDensity::Uniform, &[1.0, 1.0], 100, 3).unwrap();
        let u = vec![1.25; 100];
        assert_eq!(eval_discrete_energy(&spec, &cloud, 0.2, &u).unwrap(), 0.0);
    }

    #[test]
    fn eps_rule_checks_the_rate() {
        assert!(EpsRule::standard(2).check(2).is_ok());
        let bad = EpsRule {
            prefactor: 1.0,
            exponent: 0.6,
        };
        assert!(bad.check(2).is_err());
        let r = EpsRule::standard(2);
        assert!(r.eps(4000) < r.eps(500));
    }
}
