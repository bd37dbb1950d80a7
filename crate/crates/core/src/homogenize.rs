//! Homogenized densities by closed form, cell problem, box asymptotics and
//! random realizations.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::density::DensitySpec;
use crate::error::{Error, Result};
use crate::minimize::{solve_box, solve_cell, MinimizeOptions, Solution};

/// Tail tolerance used to cut unbounded kernels in the closed form.
pub const CLOSED_FORM_TAIL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ClosedForm,
    Cell,
    Asymptotic,
    Stochastic,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::ClosedForm => "closed_form",
            Method::Cell => "cell",
            Method::Asymptotic => "asymptotic",
            Method::Stochastic => "stochastic",
        }
    }
}

/// One solver run inside a report. `index` is `N`, `R` or `0` for the closed
/// form; `seed` is set for stochastic runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub index: f64,
    pub seed: Option<u64>,
    pub value: f64,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub converged: bool,
}

impl Run {
    fn from_solution(index: f64, seed: Option<u64>, s: &Solution) -> Self {
        Run {
            index,
            seed,
            value: s.value,
            iterations: s.iterations,
            final_grad_norm: s.final_grad_norm,
            converged: s.converged,
        }
    }
}

/// Sample mean and variance of the stochastic runs at one box size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub r: f64,
    pub mean: f64,
    pub variance: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomogReport {
    pub m: Vec<f64>,
    pub method: Method,
    pub runs: Vec<Run>,
    pub extrapolated: f64,
    /// `value[k+1] - value[k]` along the ladder (asymptotic and cell).
    pub differences: Vec<f64>,
    pub moments: Vec<Moments>,
}

impl HomogReport {
    pub fn values(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.value).collect()
    }

    pub fn all_converged(&self) -> bool {
        self.runs.iter().all(|r| r.converged)
    }
}

fn check_probe(spec: &DensitySpec, m: &[f64]) -> Result<()> {
    let want = spec.codim() * spec.dim();
    if m.len() != want {
        return Err(Error::Dimension(format!("M has {} entries, expected {want}", m.len())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("M must be finite".into()));
    }
    Ok(())
}

fn differences(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| w[1] - w[0]).collect()
}

/// `sum_xi w(xi) phi(xi, M xi)` on the kernel's quadrature lattice.
pub fn fhom_closed_form(spec: &DensitySpec, m: &[f64]) -> Result<f64> {
    if !spec.flags().x_independent {
        return Err(Error::ClosedFormRequiresXIndependence);
    }
    check_probe(spec, m)?;
    let kernel = spec.kernel();
    let radius = match kernel.support_radius() {
        Some(_) => None,
        None => Some(kernel.effective_radius(spec.p().max(1.0), CLOSED_FORM_TAIL)?),
    };
    let lattice = kernel.lattice(kernel.quadrature_step(), radius)?;
    let (d, c) = (spec.dim(), spec.codim());
    let y = vec![0.0; d];
    let partials: Vec<f64> = (0..lattice.len())
        .into_par_iter()
        .map(|q| {
            let xi = lattice.xi(q);
            let z: Vec<f64> = (0..c)
                .map(|row| (0..d).map(|k| m[row * d + k] * xi[k]).sum())
                .collect();
            lattice.weight(q) * spec.phi(&y, &xi, &z)
        })
        .collect();
    Ok(partials.iter().sum())
}

/// Cell formula on the ladder `N in {n0, 2 n0}`.
pub fn fhom_cell(spec: &DensitySpec, m: &[f64], n0: usize, t: Option<f64>, opts: &MinimizeOptions) -> Result<HomogReport> {
    check_probe(spec, m)?;
    let ladder = [n0, 2 * n0];
    let sols: Vec<Result<Solution>> = ladder.par_iter().map(|&n| solve_cell(spec, m, n, t, opts)).collect();
    let mut runs = Vec::new();
    for (n, s) in ladder.iter().zip(sols) {
        runs.push(Run::from_solution(*n as f64, None, &s?));
    }
    let values: Vec<f64> = runs.iter().map(|r| r.value).collect();
    Ok(HomogReport {
        m: m.to_vec(),
        method: Method::Cell,
        extrapolated: *values.last().unwrap_or(&f64::NAN),
        differences: differences(&values),
        runs,
        moments: Vec::new(),
    })
}

/// Parameters shared by the box-based routes.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSetup {
    /// Grid cells per unit length.
    pub resolution: usize,
    /// Interaction cutoff.
    pub t: Option<f64>,
    /// Boundary layer width; `None` selects `max(1, t)`.
    pub layer: Option<f64>,
}

impl Default for BoxSetup {
    fn default() -> Self {
        BoxSetup {
            resolution: 16,
            t: None,
            layer: None,
        }
    }
}

fn check_ladder(r_list: &[f64]) -> Result<()> {
    if r_list.is_empty() {
        return Err(Error::InvalidArgument("empty box-size list".into()));
    }
    if r_list.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("box sizes must increase".into()));
    }
    Ok(())
}

/// Box formula at each `R` in `r_list`; the last value is reported.
pub fn fhom_asymptotic(
    spec: &DensitySpec,
    m: &[f64],
    r_list: &[f64],
    setup: &BoxSetup,
    opts: &MinimizeOptions,
) -> Result<HomogReport> {
    check_probe(spec, m)?;
    check_ladder(r_list)?;
    let sols: Vec<Result<Solution>> = r_list
        .par_iter()
        .map(|&r| solve_box(spec, m, r, setup.resolution, setup.t, setup.layer, opts))
        .collect();
    let mut runs = Vec::new();
    for (r, s) in r_list.iter().zip(sols) {
        runs.push(Run::from_solution(*r, None, &s?));
    }
    let values: Vec<f64> = runs.iter().map(|r| r.value).collect();
    Ok(HomogReport {
        m: m.to_vec(),
        method: Method::Asymptotic,
        extrapolated: *values.last().unwrap_or(&f64::NAN),
        differences: differences(&values),
        runs,
        moments: Vec::new(),
    })
}

/// Box formula over independent realizations; one run per `(R, seed)`.
pub fn fhom_stochastic(
    spec: &DensitySpec,
    m: &[f64],
    r_list: &[f64],
    seeds: &[u64],
    setup: &BoxSetup,
    opts: &MinimizeOptions,
) -> Result<HomogReport> {
    check_probe(spec, m)?;
    check_ladder(r_list)?;
    if !spec.flags().random {
        return Err(Error::InvalidArgument(format!("density '{}' is not random", spec.name())));
    }
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument("stochastic estimates need at least two seeds".into()));
    }
    let tasks: Vec<(f64, u64)> = r_list
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let sols: Vec<Result<Solution>> = tasks
        .par_iter()
        .map(|&(r, seed)| {
            let realization = spec.with_seed(seed)?;
            solve_box(&realization, m, r, setup.resolution, setup.t, setup.layer, opts)
        })
        .collect();
    let mut runs = Vec::new();
    for (&(r, seed), s) in tasks.iter().zip(sols) {
        runs.push(Run::from_solution(r, Some(seed), &s?));
    }
    let moments: Vec<Moments> = r_list
        .iter()
        .map(|&r| {
            let vals: Vec<f64> = runs.iter().filter(|x| x.index == r).map(|x| x.value).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let variance = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            Moments {
                r,
                mean,
                variance,
                samples: vals.len(),
            }
        })
        .collect();
    let means: Vec<f64> = moments.iter().map(|x| x.mean).collect();
    Ok(HomogReport {
        m: m.to_vec(),
        method: Method::Stochastic,
        extrapolated: *means.last().unwrap_or(&f64::NAN),
        differences: differences(&means),
        runs,
        moments,
    })
}

/// `A_hom` of a quadratic x-independent scalar density `s a(xi) |z|^2`.
pub fn ahom_quadratic(spec: &DensitySpec) -> Result<DMatrix<f64>> {
    let scale = match spec.quadratic_scale() {
        Some(s) if spec.codim() == 1 && spec.flags().x_independent => s,
        _ => return Err(Error::NotQuadratic),
    };
    Ok(spec.kernel().ahom_matrix()? * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{Coefficient, DensityParams};
    use crate::kernel::Kernel;

    fn interval() -> Kernel {
        Kernel::indicator_ball(1, 1.0).unwrap()
    }

    #[test]
    fn closed_form_of_interval_quadratic() {
        let spec = DensitySpec::convolution(interval(), 2.0, 1).unwrap();
        for m in [0.0, 1.0, -2.0, 0.3] {
            let v = fhom_closed_form(&spec, &[m]).unwrap();
            let want = 2.0 / 3.0 * m * m;
            assert!((v - want).abs() <= 1e-4 * want.max(1e-300), "{v} vs {want}");
        }
    }

    #[test]
    fn closed_form_of_disk_quadratic() {
        let k = Kernel::indicator_ball(2, 1.0).unwrap();
        let spec = DensitySpec::convolution(k, 2.0, 1).unwrap();
        let v = fhom_closed_form(&spec, &[1.0, 0.0]).unwrap();
        assert!((v - std::f64::consts::FRAC_PI_4).abs() < 1e-3, "{v}");
        let a = ahom_quadratic(&spec).unwrap();
        let probe = [0.6, -0.8];
        let quad: f64 = (0..2).map(|i| (0..2).map(|j| probe[i] * a[(i, j)] * probe[j]).sum::<f64>()).sum();
        let closed = fhom_closed_form(&spec, &probe).unwrap();
        assert!((quad - closed).abs() < 1e-3 * closed);
    }

    #[test]
    fn closed_form_rejects_x_dependence() {
        let spec = DensitySpec::weighted(interval(), Coefficient::SinSquared { amplitude: 0.5 }, 2.0, 1).unwrap();
        assert_eq!(fhom_closed_form(&spec, &[1.0]), Err(Error::ClosedFormRequiresXIndependence));
        assert_eq!(ahom_quadratic(&spec).unwrap_err(), Error::NotQuadratic);
        let quartic = DensitySpec::plaplace(interval(), 4.0, 1).unwrap();
        assert_eq!(ahom_quadratic(&quartic).unwrap_err(), Error::NotQuadratic);
    }

    #[test]
    fn degenerate_random_density_has_no_variance() {
        let params = DensityParams {
            low: 1.5,
            high: 1.5,
            ..Default::default()
        };
        let spec = DensitySpec::from_catalog("random_checkerboard", interval(), &params).unwrap();
        let setup = BoxSetup {
            resolution: 8,
            ..Default::default()
        };
        let rep = fhom_stochastic(&spec, &[1.0], &[4.0, 8.0], &[1, 2, 3], &setup, &MinimizeOptions::default()).unwrap();
        for mom in &rep.moments {
            assert!(mom.variance <= 1e-20, "{mom:?}");
        }
        let zero = fhom_stochastic(&spec, &[0.0], &[4.0], &[1, 2], &setup, &MinimizeOptions::default()).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ladders_are_validated() {
        let spec = DensitySpec::convolution(interval(), 2.0, 1).unwrap();
        let opts = MinimizeOptions::default();
        assert!(fhom_asymptotic(&spec, &[1.0], &[8.0, 4.0], &BoxSetup::default(), &opts).is_err());
        assert!(fhom_asymptotic(&spec, &[1.0, 2.0], &[4.0], &BoxSetup::default(), &opts).is_err());
    }
}
