//! Accelerated first-order minimization of convex discrete energies.
//!
//! [`descend`] runs a monotone variant of Nesterov's accelerated gradient
//! method with Armijo backtracking. A trial point is accepted only when it
//! does not raise the objective above the current iterate; otherwise the
//! momentum is reset and a plain gradient step is taken. Pinned unknowns
//! never move, and an optional gauge projection removes the per-component
//! mean after every update.
//!
//! Close to the minimum the decrease per step drops below the resolution of
//! the objective values. There the step is accepted by a curvature test on
//! gradients, and values may rise by at most a few ulps.

use std::io::Write;

use crate::density::DensitySpec;
use crate::energy::{EnergyOptions, EnergyPlan};
use crate::error::{Error, Result};
use crate::grid::{build_layer_mask, sample_function, BoundaryMode, Domain, GridField};

/// Relative size of roundoff in objective values.
const ROUNDOFF: f64 = 64.0 * f64::EPSILON;

/// A smooth objective on a flat vector of unknowns.
pub trait Objective: Sync {
    fn len(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeOptions {
    pub max_iters: usize,
    /// Sup-norm threshold on the free gradient. `None` selects `1e-8 (1 + E0)`.
    pub grad_tol: Option<f64>,
    pub shrink: f64,
    pub sufficient_decrease: f64,
    pub momentum: bool,
    pub keep_trace: bool,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            max_iters: 100_000,
            grad_tol: None,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            momentum: true,
            keep_trace: false,
        }
    }
}

impl MinimizeOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.grad_tol {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument(format!("grad_tol must be positive, got {t}")));
            }
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidArgument(format!("shrink must lie in (0, 1), got {}", self.shrink)));
        }
        if !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sufficient decrease must lie in (0, 1), got {}",
                self.sufficient_decrease
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub energy: f64,
    pub grad_norm: f64,
    pub step: f64,
}

/// Writes trace rows as CSV with header `iter,energy,grad_norm,step`.
pub fn write_trace<W: Write>(rows: &[TraceRow], mut w: W) -> Result<()> {
    writeln!(w, "iter,energy,grad_norm,step")?;
    for r in rows {
        writeln!(w, "{},{:e},{:e},{:e}", r.iter, r.energy, r.grad_norm, r.step)?;
    }
    Ok(())
}

/// Outcome of [`descend`] on a flat vector.
#[derive(Debug, Clone)]
pub struct Descent {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub grad_tol: f64,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub field: GridField,
    pub value: f64,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub grad_tol: f64,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

/// Constraints on the unknowns of [`descend`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Constraints<'a> {
    /// Per-unknown flag; `false` entries stay at their initial value.
    pub free: Option<&'a [bool]>,
    /// Remove the mean of each of this many interleaved components.
    pub gauge: Option<usize>,
}

fn project(x: &mut [f64], gauge: Option<usize>) {
    if let Some(m) = gauge {
        let n = x.len() / m;
        for c in 0..m {
            let mean = x.iter().skip(c).step_by(m).sum::<f64>() / n as f64;
            x.iter_mut().skip(c).step_by(m).for_each(|v| *v -= mean);
        }
    }
}

fn masked_gradient(obj: &dyn Objective, x: &[f64], cons: &Constraints, out: &mut [f64]) {
    obj.gradient(x, out);
    if let Some(f) = cons.free {
        for (g, &free) in out.iter_mut().zip(f) {
            if !free {
                *g = 0.0;
            }
        }
    }
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Secant estimate of the inverse curvature along the gradient.
fn initial_step(obj: &dyn Objective, x: &[f64], g: &[f64], cons: &Constraints) -> f64 {
    let gn = dot(g, g).sqrt();
    if gn == 0.0 {
        return 1.0;
    }
    let s = 1e-6 * (1.0 + sup(x)) / sup(g);
    let probe: Vec<f64> = x.iter().zip(g).map(|(a, b)| a - s * b).collect();
    let mut g2 = vec![0.0; x.len()];
    masked_gradient(obj, &probe, cons, &mut g2);
    let diff: f64 = g.iter().zip(&g2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    if diff > 0.0 {
        2.0 * s * gn / diff
    } else {
        1.0
    }
}

/// Minimizes `obj` from `x0`; the accepted iterates have nonincreasing values.
pub fn descend(obj: &dyn Objective, x0: Vec<f64>, cons: Constraints, opts: &MinimizeOptions) -> Result<Descent> {
    opts.validate()?;
    let n = obj.len();
    if x0.len() != n {
        return Err(Error::Dimension(format!("initial point has {} entries, expected {n}", x0.len())));
    }
    if let Some(f) = cons.free {
        if f.len() != n {
            return Err(Error::Dimension("free mask length differs from unknown count".into()));
        }
    }
    let mut x = x0;
    project(&mut x, cons.gauge);
    let mut fx = obj.value(&x);
    if !fx.is_finite() {
        return Err(Error::InvalidArgument("objective is not finite at the initial point".into()));
    }
    let tol = opts.grad_tol.unwrap_or(1e-8 * (1.0 + fx.abs()));
    let mut gx = vec![0.0; n];
    masked_gradient(obj, &x, &cons, &mut gx);
    let mut t = initial_step(obj, &x, &gx, &cons);
    let mut x_prev = x.clone();
    let mut theta: f64 = 1.0;
    let mut y = x.clone();
    let mut gy = gx.clone();
    let mut fy = fx;
    let mut trial = vec![0.0; n];
    let mut g_trial = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut gnorm = sup(&gx);
    if opts.keep_trace {
        trace.push(TraceRow {
            iter: 0,
            energy: fx,
            grad_norm: gnorm,
            step: 0.0,
        });
    }
    while gnorm > tol && iterations < opts.max_iters {
        iterations += 1;
        let gy2 = dot(&gy, &gy);
        let mut f_trial;
        let mut backtracks = 0;
        let mut g_trial_ready = false;
        let mut flat = false;
        loop {
            for i in 0..n {
                trial[i] = y[i] - t * gy[i];
            }
            project(&mut trial, cons.gauge);
            f_trial = obj.value(&trial);
            if f_trial <= fy - opts.sufficient_decrease * t * gy2 {
                break;
            }
            let noise = ROUNDOFF * (fy.abs() + fx.abs());
            if (f_trial - fy).abs() <= noise && t * gy2 <= noise / opts.sufficient_decrease {
                // values no longer resolve the decrease: test curvature instead
                masked_gradient(obj, &trial, &cons, &mut g_trial);
                let mut curv = 0.0;
                let mut len2 = 0.0;
                for i in 0..n {
                    let di = trial[i] - y[i];
                    curv += (g_trial[i] - gy[i]) * di;
                    len2 += di * di;
                }
                if curv * t <= len2 {
                    g_trial_ready = true;
                    flat = true;
                    break;
                }
            }
            t *= opts.shrink;
            backtracks += 1;
            if t < 1e-300 || backtracks > 200 {
                break;
            }
        }
        let allowed = if flat { fx + ROUNDOFF * fx.abs() } else { fx };
        if !(f_trial <= allowed) {
            if y == x {
                // no progress possible from the current iterate
                break;
            }
            theta = 1.0;
            y.copy_from_slice(&x);
            gy.copy_from_slice(&gx);
            fy = fx;
            continue;
        }
        x_prev.copy_from_slice(&x);
        x.copy_from_slice(&trial);
        fx = f_trial;
        if g_trial_ready {
            gx.copy_from_slice(&g_trial);
        } else {
            masked_gradient(obj, &x, &cons, &mut gx);
        }
        gnorm = sup(&gx);
        if opts.keep_trace {
            trace.push(TraceRow {
                iter: iterations,
                energy: fx,
                grad_norm: gnorm,
                step: t,
            });
        }
        if backtracks == 0 {
            t /= opts.shrink.sqrt();
        }
        if opts.momentum {
            let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            let beta = (theta - 1.0) / theta_next;
            theta = theta_next;
            for i in 0..n {
                y[i] = x[i] + beta * (x[i] - x_prev[i]);
            }
            project(&mut y, cons.gauge);
            fy = obj.value(&y);
            masked_gradient(obj, &y, &cons, &mut gy);
        } else {
            y.copy_from_slice(&x);
            gy.copy_from_slice(&gx);
            fy = fx;
        }
    }
    Ok(Descent {
        x,
        value: fx,
        iterations,
        final_grad_norm: gnorm,
        grad_tol: tol,
        converged: gnorm <= tol,
        trace,
    })
}

impl Objective for EnergyPlan {
    fn len(&self) -> usize {
        self.num_unknowns()
    }

    fn value(&self, x: &[f64]) -> f64 {
        EnergyPlan::value(self, x)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        // has_dz is checked before any plan reaches the solver
        let _ = EnergyPlan::gradient(self, x, None, out);
    }
}

fn check_solvable(spec: &DensitySpec) -> Result<()> {
    if !spec.flags().convex_in_z {
        return Err(Error::RequiresConvexity);
    }
    if !spec.has_dz() {
        return Err(Error::NotDifferentiable);
    }
    Ok(())
}

/// Expands a per-node mask to a per-unknown mask.
pub fn expand_mask(nodes: &[bool], codim: usize) -> Vec<bool> {
    nodes.iter().flat_map(|&b| std::iter::repeat(b).take(codim)).collect()
}

fn into_solution(d: Descent, domain: &Domain, codim: usize, scale: f64) -> Result<Solution> {
    Ok(Solution {
        field: GridField::from_values(domain, codim, d.x)?,
        value: d.value * scale,
        iterations: d.iterations,
        final_grad_norm: d.final_grad_norm,
        grad_tol: d.grad_tol,
        converged: d.converged,
        trace: d.trace,
    })
}

/// Minimizes the energy over fields equal to `g` on the layer of width `eps r`.
pub fn solve_dirichlet(
    spec: &DensitySpec,
    domain: &Domain,
    eps: f64,
    g: impl Fn(&[f64], &mut [f64]),
    r: f64,
    opts: &MinimizeOptions,
) -> Result<Solution> {
    check_solvable(spec)?;
    if !(r > 0.0) {
        return Err(Error::InvalidArgument(format!("layer width factor must be positive, got {r}")));
    }
    let m = spec.codim();
    let mask = build_layer_mask(domain, eps * r)?;
    let free = expand_mask(&mask.free(), m);
    let plan = EnergyPlan::new(spec, domain, eps, &EnergyOptions::default())?;
    let init = sample_function(domain, m, g);
    let d = descend(
        &plan,
        init.into_values(),
        Constraints {
            free: Some(&free),
            gauge: None,
        },
        opts,
    )?;
    into_solution(d, domain, m, 1.0)
}

/// Periodic cell problem for the corrector `w = v - M x` on `N^d` nodes of
/// the unit cell, with interactions cut at `|xi| <= t` when given.
pub fn solve_cell(spec: &DensitySpec, m_mat: &[f64], n: usize, t: Option<f64>, opts: &MinimizeOptions) -> Result<Solution> {
    check_solvable(spec)?;
    if !spec.flags().periodic {
        return Err(Error::InvalidArgument(format!(
            "cell problems need a periodic density, '{}' is not",
            spec.name()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 nodes per period, got {n}")));
    }
    let dom = Domain::unit(spec.dim(), 1.0 / n as f64, BoundaryMode::Periodic)?;
    let eopts = EnergyOptions {
        truncation: t,
        affine: Some(m_mat.to_vec()),
        keep_breakdown: false,
    };
    let plan = EnergyPlan::new(spec, &dom, 1.0, &eopts)?;
    let m = spec.codim();
    let d = descend(
        &plan,
        vec![0.0; plan.num_unknowns()],
        Constraints {
            free: None,
            gauge: Some(m),
        },
        opts,
    )?;
    into_solution(d, &dom, m, 1.0)
}

/// Box problem on `[0, R]^d` at unit scale: minimizes over `v = M x` on the
/// boundary layer of width `layer` (default `max(1, t)`), and returns the
/// minimum divided by `R^d`. `resolution` is the number of grid cells per
/// unit length.
pub fn solve_box(
    spec: &DensitySpec,
    m_mat: &[f64],
    r: f64,
    resolution: usize,
    t: Option<f64>,
    layer: Option<f64>,
    opts: &MinimizeOptions,
) -> Result<Solution> {
    check_solvable(spec)?;
    let (d, m) = (spec.dim(), spec.codim());
    if m_mat.len() != m * d {
        return Err(Error::Dimension(format!("M has {} entries, expected {}", m_mat.len(), m * d)));
    }
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let dom = Domain::new(&vec![r; d], 1.0 / resolution as f64, BoundaryMode::Truncated)?;
    let width = layer.unwrap_or_else(|| t.unwrap_or(1.0).max(1.0));
    let mask = build_layer_mask(&dom, width)?;
    let free = expand_mask(&mask.free(), m);
    let eopts = EnergyOptions {
        truncation: t,
        ..Default::default()
    };
    let plan = EnergyPlan::new(spec, &dom, 1.0, &eopts)?;
    let init = sample_function(&dom, m, |x, out| {
        for c in 0..m {
            out[c] = (0..d).map(|k| m_mat[c * d + k] * x[k]).sum();
        }
    });
    let sol = descend(
        &plan,
        init.into_values(),
        Constraints {
            free: Some(&free),
            gauge: None,
        },
        opts,
    )?;
    into_solution(sol, &dom, m, 1.0 / r.powi(d as i32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::density::{Coefficient, CustomIntegrand, DensitySpec, Flags, Growth};
    use crate::kernel::Kernel;
    use nalgebra::{DMatrix, DVector};

    struct Quadratic {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl Objective for Quadratic {
        fn len(&self) -> usize {
            self.b.len()
        }
        fn value(&self, x: &[f64]) -> f64 {
            let v = DVector::from_column_slice(x);
            0.5 * v.dot(&(&self.a * &v)) - self.b.dot(&v)
        }
        fn gradient(&self, x: &[f64], out: &mut [f64]) {
            let v = DVector::from_column_slice(x);
            let g = &self.a * v - &self.b;
            out.copy_from_slice(g.as_slice());
        }
    }

    #[test]
    fn quadratic_matches_linear_solve() {
        let n = 30;
        let a = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                2.0 + 0.1 * i as f64
            } else if i.abs_diff(j) == 1 {
                -1.0
            } else {
                0.0
            }
        });
        let b = DVector::from_fn(n, |i, _| (i as f64).sin());
        let exact = a.clone().lu().solve(&b).unwrap();
        let q = Quadratic { a, b };
        let opts = MinimizeOptions {
            grad_tol: Some(1e-12),
            keep_trace: true,
            ..Default::default()
        };
        let d = descend(&q, vec![0.0; n], Constraints::default(), &opts).unwrap();
        assert!(d.converged);
        for (x, e) in d.x.iter().zip(exact.iter()) {
            assert!((x - e).abs() < 1e-9);
        }
        assert!(d.iterations < 2000, "{} iterations", d.iterations);
        for w in d.trace.windows(2) {
            assert!(w[1].energy <= w[0].energy + ROUNDOFF * w[0].energy.abs());
        }
    }

    #[test]
    fn pinned_entries_and_gauge_are_respected() {
        let n = 6;
        let q = Quadratic {
            a: DMatrix::identity(n, n),
            b: DVector::from_element(n, 1.0),
        };
        let free = [true, false, true, true, false, true];
        let x0 = vec![0.0, 7.0, 0.0, 0.0, -3.0, 0.0];
        let d = descend(
            &q,
            x0,
            Constraints {
                free: Some(&free),
                gauge: None,
            },
            &MinimizeOptions::default(),
        )
        .unwrap();
        assert_eq!(d.x[1], 7.0);
        assert_eq!(d.x[4], -3.0);
        assert!((d.x[0] - 1.0).abs() < 1e-6);

        let d = descend(
            &q,
            vec![1.0; n],
            Constraints {
                free: None,
                gauge: Some(2),
            },
            &MinimizeOptions::default(),
        )
        .unwrap();
        assert!(d.x.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn options_are_validated() {
        let bad = MinimizeOptions {
            shrink: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = MinimizeOptions {
            grad_tol: Some(0.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn constant_boundary_data_gives_constant_minimizer() {
        let k = Kernel::indicator_ball(1, 1.0).unwrap();
        let spec = DensitySpec::plaplace(k, 3.0, 1).unwrap();
        let dom = Domain::unit(1, 0.01, BoundaryMode::Truncated).unwrap();
        let sol = solve_dirichlet(&spec, &dom, 0.1, |_, o| o[0] = 1.5, 1.0, &MinimizeOptions::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.value, 0.0);
        assert!(sol.field.values().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn zero_probe_cell_problem_is_trivial() {
        let k = Kernel::indicator_ball(1, 1.0).unwrap();
        let spec = DensitySpec::weighted(k, Coefficient::SinSquared { amplitude: 0.5 }, 2.0, 1).unwrap();
        let sol = solve_cell(&spec, &[0.0], 16, None, &MinimizeOptions::default()).unwrap();
        assert_eq!(sol.value, 0.0);
        assert!(sol.field.values().iter().all(|&v| v == 0.0));
        let sol = solve_box(&spec, &[0.0], 4.0, 8, None, None, &MinimizeOptions::default()).unwrap();
        assert_eq!(sol.value, 0.0);
    }

    #[test]
    fn nonconvex_density_is_rejected() {
        let k = Kernel::indicator_ball(1, 1.0).unwrap();
        let spec = DensitySpec::custom(
            "double_well",
            k,
            1,
            CustomIntegrand {
                value: Arc::new(|_: &[f64], _: &[f64], z: &[f64]| (z[0] * z[0] - 1.0).powi(2)),
                dz: None,
            },
            Flags {
                convex_in_z: false,
                x_independent: true,
                periodic: true,
                random: false,
            },
            Growth {
                p: 4.0,
                lower: 0.5,
                upper: 2.0,
            },
        );
        let dom = Domain::unit(1, 0.01, BoundaryMode::Truncated).unwrap();
        let err = solve_dirichlet(&spec, &dom, 0.1, |_, o| o[0] = 0.0, 1.0, &MinimizeOptions::default());
        assert_eq!(err.unwrap_err(), Error::RequiresConvexity);
    }

    #[test]
    fn trace_is_written_as_csv() {
        let rows = [TraceRow {
            iter: 0,
            energy: 1.0,
            grad_norm: 0.5,
            step: 0.0,
        }];
        let mut buf = Vec::new();
        write_trace(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,energy,grad_norm,step\n0,"));
    }
}
