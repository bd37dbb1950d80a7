//! Gradient flows of the discrete energies and local reference flows.
//!
//! Flows use the `L^2` gradient `h^{-d} dE/du` of the discrete energy, so
//! that a minimizing-movement step with the penalty
//! `(1/2 tau) sum_x h^d |u - u_prev|^2` and a forward Euler step approximate
//! the same evolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::density::DensitySpec;
use crate::energy::{eval_local_limit, EnergyOptions, EnergyPlan};
use crate::error::{Error, Result};
use crate::grid::{build_layer_mask, Domain, GridField};
use crate::kernel::Kernel;
use crate::minimize::{descend, expand_mask, Constraints, MinimizeOptions, Objective};

/// Number of power iterations behind the explicit stability bound.
pub const POWER_ITERATIONS: usize = 20;

/// Safety factor in `tau <= STABILITY_FACTOR / L`.
pub const STABILITY_FACTOR: f64 = 1.9;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub domain: Domain,
    pub codim: usize,
    /// Uniform time grid `k tau`, one entry per step plus the initial time.
    pub times: Vec<f64>,
    pub energies: Vec<f64>,
    /// `|u_n - u_{n-1}|_{L^2} / tau`, one per step.
    pub step_norms: Vec<f64>,
    /// Decimated `(time, values)` snapshots, always including both ends.
    pub states: Vec<(f64, Vec<f64>)>,
    /// Index of the step at which the run stopped early, if it did.
    pub failed_step: Option<usize>,
}

impl Trajectory {
    fn new(u0: &GridField, energy: f64) -> Self {
        Trajectory {
            domain: u0.domain().clone(),
            codim: u0.codim(),
            times: vec![0.0],
            energies: vec![energy],
            step_norms: Vec::new(),
            states: vec![(0.0, u0.values().to_vec())],
            failed_step: None,
        }
    }

    fn record(&mut self, t: f64, energy: f64, step_norm: f64, state: &[f64], keep: bool) {
        self.times.push(t);
        self.energies.push(energy);
        self.step_norms.push(step_norm);
        if keep {
            self.states.push((t, state.to_vec()));
        }
    }

    fn close(&mut self, state: &[f64]) {
        let t = *self.times.last().unwrap_or(&0.0);
        if self.states.last().map(|s| s.0) != Some(t) {
            self.states.push((t, state.to_vec()));
        }
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    pub fn final_state(&self) -> Result<GridField> {
        let (_, v) = self.states.last().ok_or_else(|| Error::InvalidArgument("empty trajectory".into()))?;
        GridField::from_values(&self.domain, self.codim, v.clone())
    }

    /// State at time `t`, linear in time between stored snapshots.
    pub fn state_at(&self, t: f64) -> Result<GridField> {
        let first = self.states.first().ok_or_else(|| Error::InvalidArgument("empty trajectory".into()))?;
        let last = self.states.last().unwrap_or(first);
        let tol = 1e-9 * (1.0 + last.0.abs());
        if t < first.0 - tol || t > last.0 + tol {
            return Err(Error::InvalidArgument(format!(
                "time {t} outside the stored range [{}, {}]",
                first.0, last.0
            )));
        }
        let k = self.states.partition_point(|s| s.0 < t - tol);
        let values = if k == 0 {
            first.1.clone()
        } else if k >= self.states.len() {
            last.1.clone()
        } else if (self.states[k].0 - t).abs() <= tol {
            self.states[k].1.clone()
        } else {
            let (t0, a) = &self.states[k - 1];
            let (t1, b) = &self.states[k];
            let s = (t - t0) / (t1 - t0);
            a.iter().zip(b).map(|(x, y)| (1.0 - s) * x + s * y).collect()
        };
        GridField::from_values(&self.domain, self.codim, values)
    }

    /// `E(0) - E(T) - (1/2) sum tau |step|^2`; nonnegative for exact minimizing movements.
    pub fn energy_identity_slack(&self) -> f64 {
        let tau = if self.times.len() > 1 { self.times[1] - self.times[0] } else { 0.0 };
        let dissipated: f64 = self.step_norms.iter().map(|s| 0.5 * tau * s * s).sum();
        self.energies[0] - self.energies[self.energies.len() - 1] - dissipated
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowOptions {
    pub solver: MinimizeOptions,
    /// Width of a boundary layer held fixed during the flow (truncated domains).
    pub pinned_layer: Option<f64>,
    /// Keep every `k`-th state; `None` keeps about 100.
    pub decimation: Option<usize>,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            solver: MinimizeOptions::default(),
            pinned_layer: None,
            decimation: None,
        }
    }
}

fn check_flow_spec(spec: &DensitySpec) -> Result<()> {
    if spec.p() < 2.0 {
        return Err(Error::FlowExponent(spec.p()));
    }
    if !spec.flags().convex_in_z {
        return Err(Error::RequiresConvexity);
    }
    if !spec.has_dz() {
        return Err(Error::NotDifferentiable);
    }
    Ok(())
}

fn check_step(tau: f64, t_end: f64) -> Result<usize> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidArgument(format!("t_end must be nonnegative, got {t_end}")));
    }
    Ok((t_end / tau - 1e-9).ceil().max(0.0) as usize)
}

fn decimation(steps: usize, opts: &FlowOptions) -> usize {
    opts.decimation.unwrap_or_else(|| steps.div_ceil(100)).max(1)
}

/// Energy plan plus the per-unknown free mask used by a flow.
struct FlowSetup {
    plan: EnergyPlan,
    free: Option<Vec<bool>>,
    inv_cell: f64,
}

impl FlowSetup {
    fn new(spec: &DensitySpec, eps: f64, u: &GridField, opts: &FlowOptions) -> Result<Self> {
        check_flow_spec(spec)?;
        if u.codim() != spec.codim() {
            return Err(Error::Dimension("field and density codimensions differ".into()));
        }
        let dom = u.domain();
        let plan = EnergyPlan::new(spec, dom, eps, &EnergyOptions::default())?;
        let free = match opts.pinned_layer {
            Some(w) => Some(expand_mask(&build_layer_mask(dom, w)?.free(), u.codim())),
            None => None,
        };
        Ok(FlowSetup {
            plan,
            free,
            inv_cell: 1.0 / dom.cell_volume(),
        })
    }

    /// `h^{-d} dE/du`, zero on pinned unknowns.
    fn l2_gradient(&self, u: &[f64], out: &mut [f64]) {
        Objective::gradient(&self.plan, u, out);
        for (i, g) in out.iter_mut().enumerate() {
            *g *= self.inv_cell;
            if let Some(f) = &self.free {
                if !f[i] {
                    *g = 0.0;
                }
            }
        }
    }
}

struct Proximal<'a> {
    plan: &'a EnergyPlan,
    prev: &'a [f64],
    weight: f64,
}

impl Objective for Proximal<'_> {
    fn len(&self) -> usize {
        self.prev.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let dist: f64 = x.iter().zip(self.prev).map(|(a, b)| (a - b) * (a - b)).sum();
        self.plan.value(x) + 0.5 * self.weight * dist
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        Objective::gradient(self.plan, x, out);
        for ((g, a), b) in out.iter_mut().zip(x).zip(self.prev) {
            *g += self.weight * (a - b);
        }
    }
}

/// Result of one minimizing-movement step.
#[derive(Debug, Clone)]
pub struct MmStep {
    pub state: Vec<f64>,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn mm_step_with(setup: &FlowSetup, prev: &[f64], tau: f64, opts: &MinimizeOptions) -> Result<MmStep> {
    let prox = Proximal {
        plan: &setup.plan,
        prev,
        weight: 1.0 / (tau * setup.inv_cell),
    };
    let d = descend(
        &prox,
        prev.to_vec(),
        Constraints {
            free: setup.free.as_deref(),
            gauge: None,
        },
        opts,
    )?;
    let energy = setup.plan.value(&d.x);
    Ok(MmStep {
        state: d.x,
        energy,
        iterations: d.iterations,
        converged: d.converged,
    })
}

/// One step `argmin E(u) + (1/2 tau) sum_x h^d |u - u_prev|^2`, warm-started at `u_prev`.
pub fn mm_step(spec: &DensitySpec, eps: f64, u_prev: &GridField, tau: f64, opts: &FlowOptions) -> Result<GridField> {
    check_step(tau, 0.0)?;
    let setup = FlowSetup::new(spec, eps, u_prev, opts)?;
    let step = mm_step_with(&setup, u_prev.values(), tau, &opts.solver)?;
    if !step.converged {
        return Err(Error::InvalidArgument(format!(
            "minimizing-movement step did not converge in {} iterations",
            step.iterations
        )));
    }
    GridField::from_values(u_prev.domain(), u_prev.codim(), step.state)
}

fn l2_step(dom: &Domain, a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (dom.cell_volume() * s).sqrt()
}

/// Minimizing movements from `u0` up to `t_end`. A step whose inner solve
/// fails to converge ends the run and is recorded in `failed_step`.
pub fn mm_trajectory(
    spec: &DensitySpec,
    eps: f64,
    u0: &GridField,
    tau: f64,
    t_end: f64,
    opts: &FlowOptions,
) -> Result<Trajectory> {
    let steps = check_step(tau, t_end)?;
    let setup = FlowSetup::new(spec, eps, u0, opts)?;
    let every = decimation(steps, opts);
    let mut traj = Trajectory::new(u0, setup.plan.value(u0.values()));
    let mut u = u0.values().to_vec();
    for n in 1..=steps {
        let step = mm_step_with(&setup, &u, tau, &opts.solver)?;
        if !step.converged {
            traj.failed_step = Some(n);
            break;
        }
        let norm = l2_step(u0.domain(), &step.state, &u) / tau;
        u = step.state;
        traj.record(n as f64 * tau, step.energy, norm, &u, n % every == 0);
    }
    traj.close(&u);
    Ok(traj)
}

/// Power-iteration estimate of the largest eigenvalue of the linearized
/// `L^2` gradient at `u`.
fn stiffness(setup: &FlowSetup, u: &[f64]) -> f64 {
    let n = u.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
    if let Some(f) = &setup.free {
        for (x, &keep) in v.iter_mut().zip(f) {
            if !keep {
                *x = 0.0;
            }
        }
    }
    let mut g0 = vec![0.0; n];
    let mut g1 = vec![0.0; n];
    setup.l2_gradient(u, &mut g0);
    let scale = 1e-6 * (1.0 + u.iter().fold(0.0f64, |a, b| a.max(b.abs())));
    let mut lambda = 0.0;
    let mut probe = vec![0.0; n];
    for _ in 0..POWER_ITERATIONS {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        for i in 0..n {
            probe[i] = u[i] + scale * v[i];
        }
        setup.l2_gradient(&probe, &mut g1);
        for i in 0..n {
            v[i] = (g1[i] - g0[i]) / scale;
        }
        lambda = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    lambda
}

/// `STABILITY_FACTOR / L` for the explicit flow started at `u0`.
pub fn stability_bound(spec: &DensitySpec, eps: f64, u0: &GridField, opts: &FlowOptions) -> Result<f64> {
    let setup = FlowSetup::new(spec, eps, u0, opts)?;
    let l = stiffness(&setup, u0.values());
    Ok(if l > 0.0 { STABILITY_FACTOR / l } else { f64::INFINITY })
}

/// Forward Euler `u <- u - tau h^{-d} dE/du`.
pub fn explicit_flow(
    spec: &DensitySpec,
    eps: f64,
    u0: &GridField,
    tau: f64,
    t_end: f64,
    opts: &FlowOptions,
) -> Result<Trajectory> {
    let steps = check_step(tau, t_end)?;
    let setup = FlowSetup::new(spec, eps, u0, opts)?;
    let l = stiffness(&setup, u0.values());
    let bound = if l > 0.0 { STABILITY_FACTOR / l } else { f64::INFINITY };
    if tau > bound {
        return Err(Error::StepExceedsStability { tau, bound });
    }
    let every = decimation(steps, opts);
    let energy0 = setup.plan.value(u0.values());
    let mut traj = Trajectory::new(u0, energy0);
    let mut u = u0.values().to_vec();
    let mut g = vec![0.0; u.len()];
    let mut energy = energy0;
    for n in 1..=steps {
        setup.l2_gradient(&u, &mut g);
        let mut sq = 0.0;
        for (x, gi) in u.iter_mut().zip(&g) {
            *x -= tau * gi;
            sq += gi * gi;
        }
        let next = setup.plan.value(&u);
        if next > energy + 64.0 * f64::EPSILON * energy.abs() {
            return Err(Error::StepExceedsStability { tau, bound });
        }
        energy = next;
        let norm = (u0.domain().cell_volume() * sq).sqrt();
        traj.record(n as f64 * tau, energy, norm, &u, n % every == 0);
    }
    traj.close(&u);
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceMode {
    /// Exact Fourier solution of `u_t = div(A_hom Du)` (p = 2).
    SpectralP2,
    /// Explicit finite differences for `u_t = c_p Delta_p u` (radial kernels).
    FdPLaplace,
}

impl ReferenceMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "spectral_p2" => Ok(ReferenceMode::SpectralP2),
            "fd_plaplace" => Ok(ReferenceMode::FdPLaplace),
            other => Err(Error::Parse(format!(
                "unknown reference mode '{other}' (expected spectral_p2 or fd_plaplace)"
            ))),
        }
    }
}

/// Local limit flow of the plaplace density `a(xi) |z|^p / p` on a periodic
/// domain, sampled every `dt` up to `t_end`. The recorded energy is the local
/// limit `(1/p) int int a(xi) |Du xi|^p`.
pub fn reference_local_flow(
    kernel: &Kernel,
    p: f64,
    u0: &GridField,
    t_end: f64,
    dt: f64,
    mode: ReferenceMode,
) -> Result<Trajectory> {
    let dom = u0.domain();
    if !dom.is_periodic() {
        return Err(Error::InvalidArgument("reference flows need a periodic domain".into()));
    }
    if kernel.dim() != dom.dim() {
        return Err(Error::Dimension("kernel and domain dimensions differ".into()));
    }
    if p < 2.0 {
        return Err(Error::FlowExponent(p));
    }
    let steps = check_step(dt, t_end)?;
    let energy = |u: &GridField| -> Result<f64> { Ok(eval_local_limit(kernel, u, p)? / p) };
    let mut traj = Trajectory::new(u0, energy(u0)?);
    match mode {
        ReferenceMode::SpectralP2 => {
            if p != 2.0 {
                return Err(Error::InvalidArgument(format!("spectral reference needs p = 2, got {p}")));
            }
            let spectral = Spectral::new(kernel, u0)?;
            let mut prev = u0.values().to_vec();
            for n in 1..=steps {
                let t = n as f64 * dt;
                let u = spectral.at(t);
                let field = GridField::from_values(dom, u0.codim(), u)?;
                let norm = field.l2_distance(&GridField::from_values(dom, u0.codim(), prev)?)? / dt;
                traj.record(t, energy(&field)?, norm, field.values(), true);
                prev = field.into_values();
            }
        }
        ReferenceMode::FdPLaplace => {
            if !kernel.is_radial() {
                return Err(Error::NonRadialKernel(
                    "fd_plaplace uses c_p and needs a radial kernel".into(),
                ));
            }
            let cp = kernel.c_p(p)?;
            let mut u = u0.values().to_vec();
            let mut rate = vec![0.0; u.len()];
            for n in 1..=steps {
                let prev = u.clone();
                let mut left = dt;
                while left > 0.0 {
                    let gmax = plaplace_rate(dom, u0.codim(), cp, p, &u, &mut rate);
                    let stiff = 2.0 * dom.dim() as f64 * cp * (p - 1.0) * gmax.powf(p - 2.0) / dom.h().powi(2);
                    let sub = if stiff > 0.0 { left.min(0.9 / stiff) } else { left };
                    for (x, r) in u.iter_mut().zip(&rate) {
                        *x += sub * r;
                    }
                    left -= sub;
                    if left < 1e-14 * dt {
                        break;
                    }
                }
                let field = GridField::from_values(dom, u0.codim(), u.clone())?;
                let norm = l2_step(dom, &u, &prev) / dt;
                traj.record(n as f64 * dt, energy(&field)?, norm, &u, true);
            }
        }
    }
    let last = traj.states.last().map(|s| s.1.clone()).unwrap_or_default();
    traj.close(&last);
    Ok(traj)
}

/// `c_p div(|Du|^{p-2} Du)` in flux form on a periodic grid; returns the
/// largest edge gradient.
fn plaplace_rate(dom: &Domain, m: usize, cp: f64, p: f64, u: &[f64], out: &mut [f64]) -> f64 {
    let d = dom.dim();
    let h = dom.h();
    out.fill(0.0);
    let mut gmax: f64 = 0.0;
    let unit = |axis: usize, sign: i64| -> Vec<i64> {
        let mut s = vec![0i64; d];
        s[axis] = sign;
        s
    };
    let plus: Vec<Vec<i64>> = (0..d).map(|k| unit(k, 1)).collect();
    let minus: Vec<Vec<i64>> = (0..d).map(|k| unit(k, -1)).collect();
    for node in 0..dom.num_nodes() {
        for axis in 0..d {
            let j = dom.shifted(node, &plus[axis]).unwrap_or(node);
            for c in 0..m {
                let along = (u[j * m + c] - u[node * m + c]) / h;
                // transverse components: average of central differences at both ends
                let mut sq = along * along;
                for other in (0..d).filter(|&o| o != axis) {
                    let central = |at: usize| {
                        let a = dom.shifted(at, &plus[other]).unwrap_or(at);
                        let b = dom.shifted(at, &minus[other]).unwrap_or(at);
                        (u[a * m + c] - u[b * m + c]) / (2.0 * h)
                    };
                    let t = 0.5 * (central(node) + central(j));
                    sq += t * t;
                }
                let g = sq.sqrt();
                gmax = gmax.max(g);
                let flux = cp * g.powf(p - 2.0) * along / h;
                out[node * m + c] += flux;
                out[j * m + c] -= flux;
            }
        }
    }
    gmax
}

/// Fourier data of `u0` for the exact p = 2 flow.
struct Spectral {
    counts: Vec<usize>,
    codim: usize,
    modes: Vec<Vec<Complex<f64>>>,
    decay: Vec<f64>,
}

fn fft_axes(data: &mut [Complex<f64>], counts: &[usize], inverse: bool) {
    let d = counts.len();
    let mut planner = FftPlanner::new();
    let total: usize = counts.iter().product();
    let mut stride = 1;
    for axis in (0..d).rev() {
        let n = counts[axis];
        let fft = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let mut line = vec![Complex::new(0.0, 0.0); n];
        for start in 0..total {
            if (start / stride) % n != 0 {
                continue;
            }
            for (k, v) in line.iter_mut().enumerate() {
                *v = data[start + k * stride];
            }
            fft.process(&mut line);
            for (k, v) in line.iter().enumerate() {
                data[start + k * stride] = *v;
            }
        }
        stride *= n;
    }
}

impl Spectral {
    fn new(kernel: &Kernel, u0: &GridField) -> Result<Self> {
        let dom = u0.domain();
        let counts = dom.counts().to_vec();
        let a = kernel.ahom_matrix()?;
        let d = counts.len();
        let m = u0.codim();
        let mut modes = Vec::with_capacity(m);
        for c in 0..m {
            let mut data: Vec<Complex<f64>> = u0
                .values()
                .iter()
                .skip(c)
                .step_by(m)
                .map(|&v| Complex::new(v, 0.0))
                .collect();
            fft_axes(&mut data, &counts, false);
            modes.push(data);
        }
        let decay = (0..dom.num_nodes())
            .map(|node| {
                let multi = dom.multi_index(node);
                let k: Vec<f64> = multi
                    .iter()
                    .zip(&counts)
                    .zip(dom.lengths())
                    .map(|((&i, &n), &len)| {
                        let wave = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
                        2.0 * std::f64::consts::PI * wave / len
                    })
                    .collect();
                (0..d).map(|i| (0..d).map(|j| k[i] * a[(i, j)] * k[j]).sum::<f64>()).sum()
            })
            .collect();
        Ok(Spectral {
            counts,
            codim: m,
            modes,
            decay,
        })
    }

    fn at(&self, t: f64) -> Vec<f64> {
        let total: usize = self.counts.iter().product();
        let mut out = vec![0.0; total * self.codim];
        for (c, modes) in self.modes.iter().enumerate() {
            let mut data: Vec<Complex<f64>> = modes
                .iter()
                .zip(&self.decay)
                .map(|(z, lam)| z * (-lam * t).exp())
                .collect();
            fft_axes(&mut data, &self.counts, true);
            for (node, z) in data.iter().enumerate() {
                out[node * self.codim + c] = z.re / total as f64;
            }
        }
        out
    }
}

/// Distances between two trajectories at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowError {
    pub time: f64,
    pub l2: f64,
    pub sup: f64,
}

/// `L^2` and sup distances at each requested time (linear in time between snapshots).
pub fn compare_flows(a: &Trajectory, b: &Trajectory, times: &[f64]) -> Result<Vec<FlowError>> {
    if !a.domain.same_grid(&b.domain) || a.codim != b.codim {
        return Err(Error::MismatchedDomains(format!(
            "{:?}x{} vs {:?}x{}",
            a.domain.counts(),
            a.codim,
            b.domain.counts(),
            b.codim
        )));
    }
    times
        .iter()
        .map(|&t| {
            let ua = a.state_at(t)?;
            let ub = b.state_at(t)?;
            Ok(FlowError {
                time: t,
                l2: ua.l2_distance(&ub)?,
                sup: ua.sup_distance(&ub)?,
            })
        })
        .collect()
}
