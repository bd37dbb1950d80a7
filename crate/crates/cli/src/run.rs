//! Experiment execution: builds tasks from a validated config, runs them on
//! the worker pool and collects tables in a fixed order.

use std::f64::consts::PI;

use convhom::density::{DensityParams, DensitySpec};
use convhom::energy::{eval_f, trapezoid_weights};
use convhom::flow::{
    compare_flows, explicit_flow, mm_trajectory, reference_local_flow, FlowOptions, ReferenceMode, Trajectory,
};
use convhom::grid::{fd_gradient, sample_function, BoundaryMode, Domain, GridField};
use convhom::homogenize::{
    fhom_asymptotic, fhom_cell, fhom_closed_form, fhom_stochastic, BoxSetup, HomogReport, Method,
};
use convhom::kernel::Kernel;
use convhom::minimize::{solve_dirichlet, write_trace, MinimizeOptions};
use convhom::pointcloud::{cloud_convergence_run, EpsRule, SamplingDensity};
use convhom::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{kernel_name, ExperimentConfig};
use crate::output::Table;

/// Outcome of one independent task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub name: String,
    pub error: Option<String>,
}

#[derive(Debug, Default)]
pub struct RunOutput {
    pub tables: Vec<Table>,
    pub tasks: Vec<TaskRecord>,
}

impl RunOutput {
    fn task<T>(&mut self, name: String, r: Result<T, Error>) -> Option<T> {
        match r {
            Ok(v) => {
                self.tasks.push(TaskRecord { name, error: None });
                Some(v)
            }
            Err(e) => {
                self.tasks.push(TaskRecord {
                    name,
                    error: Some(e.to_string()),
                });
                None
            }
        }
    }
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

fn matrix(m: &[f64]) -> String {
    m.iter().map(|v| num(*v)).collect::<Vec<_>>().join(";")
}

pub fn build_kernel(cfg: &ExperimentConfig) -> Result<Kernel, Error> {
    let d = cfg.dim();
    match kernel_name(&cfg.kernel.name) {
        "indicator_ball" => Kernel::indicator_ball(d, cfg.kernel.radius),
        "gaussian" => Kernel::gaussian(d, cfg.kernel.width),
        "polynomial_decay" => Kernel::polynomial_decay(d, cfg.kernel.exponent),
        other => Err(Error::InvalidKernel(format!("unknown kernel '{other}'"))),
    }
}

pub fn build_density(cfg: &ExperimentConfig) -> Result<DensitySpec, Error> {
    let dc = &cfg.density;
    let params = DensityParams {
        p: dc.p,
        codim: dc.codim,
        amplitude: dc.amplitude,
        gamma: dc.gamma,
        low: dc.low,
        high: dc.high,
        prob: dc.prob,
        seed: cfg.seeds[0],
    };
    DensitySpec::from_catalog(&dc.name, build_kernel(cfg)?, &params)
}

pub fn build_domain(cfg: &ExperimentConfig) -> Result<Domain, Error> {
    Domain::new(&cfg.grid.lengths, cfg.grid.h, BoundaryMode::parse(&cfg.grid.boundary)?)
}

fn solver_options(cfg: &ExperimentConfig) -> MinimizeOptions {
    MinimizeOptions {
        max_iters: cfg.tolerances.max_iters,
        grad_tol: cfg.tolerances.grad_tol,
        keep_trace: cfg.tolerances.trace,
        ..Default::default()
    }
}

fn affine(m_mat: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (c, o) in out.iter_mut().enumerate() {
        *o = (0..d).map(|k| m_mat[c * d + k] * x[k]).sum();
    }
}

/// Initial or boundary field named in the config.
pub fn initial_field(cfg: &ExperimentConfig, dom: &Domain, seed: u64) -> GridField {
    let m = cfg.density.codim;
    let lengths = dom.lengths().to_vec();
    match cfg.probes.initial.as_str() {
        "sine" => sample_function(dom, m, |x, o| {
            let v: f64 = x.iter().zip(&lengths).map(|(xi, l)| (2.0 * PI * xi / l).sin()).product();
            o.iter_mut().for_each(|c| *c = v);
        }),
        "bump" => sample_function(dom, m, |x, o| {
            let w = 0.1 * lengths.iter().cloned().fold(f64::INFINITY, f64::min);
            let r2: f64 = x.iter().zip(&lengths).map(|(xi, l)| (xi - 0.5 * l).powi(2)).sum();
            let v = (-r2 / (2.0 * w * w)).exp();
            o.iter_mut().for_each(|c| *c = v);
        }),
        "random" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = (0..dom.num_nodes() * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            GridField::from_values(dom, m, values).expect("sizes match")
        }
        _ => {
            let probe = cfg.probes.m[0].clone();
            sample_function(dom, m, |x, o| affine(&probe, x, o))
        }
    }
}

/// `sum_x w(x) f_hom(Du(x))` for x-independent densities.
fn local_limit(spec: &DensitySpec, u: &GridField) -> Result<Option<f64>, Error> {
    if !spec.flags().x_independent {
        return Ok(None);
    }
    let grad = fd_gradient(u);
    let weights = trapezoid_weights(u.domain());
    let mut total = 0.0;
    for (node, w) in weights.iter().enumerate() {
        total += w * fhom_closed_form(spec, grad.at(node))?;
    }
    Ok(Some(total))
}

pub fn run_energy(cfg: &ExperimentConfig) -> Result<RunOutput, Error> {
    let spec = build_density(cfg)?;
    let dom = build_domain(cfg)?;
    let u = initial_field(cfg, &dom, cfg.seeds[0]);
    let local = local_limit(&spec, &u)?;
    let results: Vec<Result<f64, Error>> = cfg.scales.eps.par_iter().map(|&eps| Ok(eval_f(&spec, &u, eps)?.total)).collect();
    let mut out = RunOutput::default();
    let mut table = Table::new("energy.csv", &["eps", "value", "local_limit", "gap"]);
    for (&eps, r) in cfg.scales.eps.iter().zip(results) {
        if let Some(value) = out.task(format!("energy eps={eps}"), r) {
            let (l, g) = match local {
                Some(l) => (num(l), num(value - l)),
                None => (String::new(), String::new()),
            };
            table.push(vec![num(eps), num(value), l, g]);
        }
    }
    out.tables.push(table);
    Ok(out)
}

pub fn run_minimize(cfg: &ExperimentConfig) -> Result<RunOutput, Error> {
    let spec = build_density(cfg)?;
    let dom = build_domain(cfg)?;
    let opts = solver_options(cfg);
    let tasks: Vec<(usize, f64)> = (0..cfg.probes.m.len())
        .flat_map(|k| cfg.scales.eps.iter().map(move |&e| (k, e)))
        .collect();
    let sols: Vec<_> = tasks
        .par_iter()
        .map(|&(k, eps)| {
            let probe = &cfg.probes.m[k];
            solve_dirichlet(&spec, &dom, eps, |x, o| affine(probe, x, o), cfg.scales.dirichlet_r, &opts)
        })
        .collect();
    let mut out = RunOutput::default();
    let mut table = Table::new(
        "minimize.csv",
        &["m", "eps", "value", "iterations", "final_grad_norm", "grad_tol", "converged"],
    );
    for (&(k, eps), r) in tasks.iter().zip(sols) {
        let m = &cfg.probes.m[k];
        if let Some(sol) = out.task(format!("minimize m={} eps={eps}", matrix(m)), r) {
            table.push(vec![
                matrix(m),
                num(eps),
                num(sol.value),
                sol.iterations.to_string(),
                num(sol.final_grad_norm),
                num(sol.grad_tol),
                sol.converged.to_string(),
            ]);
            if cfg.tolerances.trace {
                let mut buf = Vec::new();
                write_trace(&sol.trace, &mut buf)?;
                out.tables.push(Table::raw(&format!("minimize_trace_m{k}_eps{eps}.csv"), buf, sol.trace.len()));
            }
        }
    }
    out.tables.insert(0, table);
    Ok(out)
}

fn homog_report(
    cfg: &ExperimentConfig,
    spec: &DensitySpec,
    method: &str,
    m: &[f64],
    opts: &MinimizeOptions,
) -> Result<HomogReport, Error> {
    let setup = BoxSetup {
        resolution: cfg.scales.resolution,
        t: cfg.scales.t,
        layer: cfg.scales.layer,
    };
    match method {
        "closed_form" => {
            let value = fhom_closed_form(spec, m)?;
            Ok(HomogReport {
                m: m.to_vec(),
                method: Method::ClosedForm,
                runs: vec![convhom::homogenize::Run {
                    index: 0.0,
                    seed: None,
                    value,
                    iterations: 0,
                    final_grad_norm: 0.0,
                    converged: true,
                }],
                extrapolated: value,
                differences: Vec::new(),
                moments: Vec::new(),
            })
        }
        "cell" => fhom_cell(spec, m, cfg.scales.n, cfg.scales.t, opts),
        "asymptotic" => fhom_asymptotic(spec, m, &cfg.scales.r_list, &setup, opts),
        "stochastic" => fhom_stochastic(spec, m, &cfg.scales.r_list, &cfg.seeds, &setup, opts),
        other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
    }
}

const HOMOG_COLUMNS: &[&str] = &["m", "method", "index", "seed", "value", "iterations", "converged"];

fn homog_rows(table: &mut Table, rep: &HomogReport) {
    for run in &rep.runs {
        table.push(vec![
            matrix(&rep.m),
            rep.method.as_str().to_string(),
            num(run.index),
            run.seed.map(|s| s.to_string()).unwrap_or_default(),
            num(run.value),
            run.iterations.to_string(),
            run.converged.to_string(),
        ]);
    }
}

fn run_homog_methods(cfg: &ExperimentConfig, methods: &[String], file: &str) -> Result<RunOutput, Error> {
    let spec = build_density(cfg)?;
    let opts = solver_options(cfg);
    let tasks: Vec<(usize, &str)> = (0..cfg.probes.m.len())
        .flat_map(|k| methods.iter().map(move |m| (k, m.as_str())))
        .collect();
    let reports: Vec<_> = tasks
        .par_iter()
        .map(|&(k, method)| homog_report(cfg, &spec, method, &cfg.probes.m[k], &opts))
        .collect();
    let mut out = RunOutput::default();
    let mut table = Table::new(file, HOMOG_COLUMNS);
    let mut moments = Table::new(&file.replace(".csv", "_moments.csv"), &["m", "r", "mean", "variance", "samples"]);
    for (&(k, method), r) in tasks.iter().zip(reports) {
        let name = format!("homogenize m={} method={method}", matrix(&cfg.probes.m[k]));
        if let Some(rep) = out.task(name, r) {
            homog_rows(&mut table, &rep);
            for mo in &rep.moments {
                moments.push(vec![
                    matrix(&rep.m),
                    num(mo.r),
                    num(mo.mean),
                    num(mo.variance),
                    mo.samples.to_string(),
                ]);
            }
        }
    }
    out.tables.push(table);
    if !moments.is_empty() {
        out.tables.push(moments);
    }
    Ok(out)
}

pub fn run_homogenize(cfg: &ExperimentConfig) -> Result<RunOutput, Error> {
    run_homog_methods(cfg, &[cfg.homogenize.method.clone()], "homogenize.csv")
}

/// Homogenization over every probe and every configured method.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<RunOutput, Error> {
    run_homog_methods(cfg, &cfg.homogenize.methods, "sweep.csv")
}

fn integrate(
    cfg: &ExperimentConfig,
    spec: &DensitySpec,
    eps: f64,
    u0: &GridField,
    integrator: &str,
) -> Result<Trajectory, Error> {
    let opts = FlowOptions {
        solver: solver_options(cfg),
        pinned_layer: None,
        decimation: cfg.flow.decimation,
    };
    let (tau, t_end) = (cfg.scales.tau, cfg.scales.t_end);
    match integrator {
        "mm" => mm_trajectory(spec, eps, u0, tau, t_end, &opts),
        "explicit" => explicit_flow(spec, eps, u0, tau, t_end, &opts),
        _ => {
            let mode = ReferenceMode::parse(cfg.flow.reference.as_deref().unwrap_or("spectral_p2"))?;
            reference_local_flow(spec.kernel(), spec.p(), u0, t_end, tau, mode)
        }
    }
}

pub fn run_flow(cfg: &ExperimentConfig) -> Result<RunOutput, Error> {
    let spec = build_density(cfg)?;
    let dom = build_domain(cfg)?;
    let u0 = initial_field(cfg, &dom, cfg.seeds[0]);
    let integrator = cfg.flow.integrator.as_str();
    let reference = match &cfg.flow.reference {
        Some(mode) if integrator != "reference" => {
            let mode = ReferenceMode::parse(mode)?;
            Some(reference_local_flow(spec.kernel(), spec.p(), &u0, cfg.scales.t_end, cfg.scales.tau, mode))
        }
        _ => None,
    };
    let trajs: Vec<_> = cfg
        .scales
        .eps
        .par_iter()
        .map(|&eps| integrate(cfg, &spec, eps, &u0, integrator))
        .collect();
    let mut out = RunOutput::default();
    let reference = match reference {
        Some(r) => out.task("flow reference".into(), r),
        None => None,
    };
    let mut energies = Table::new("flow.csv", &["integrator", "eps", "time", "energy", "step_norm"]);
    let mut states = Table::new("flow_states.csv", &["eps", "time", "node", "component", "value"]);
    let mut errors = Table::new("flow_errors.csv", &["eps", "time", "l2", "sup"]);
    for (&eps, r) in cfg.scales.eps.iter().zip(trajs) {
        let Some(traj) = out.task(format!("flow {integrator} eps={eps}"), r) else {
            continue;
        };
        if let Some(n) = traj.failed_step {
            out.tasks.push(TaskRecord {
                name: format!("flow {integrator} eps={eps} step {n}"),
                error: Some("inner minimization did not converge".into()),
            });
        }
        for (k, (&t, &e)) in traj.times.iter().zip(&traj.energies).enumerate() {
            let step = if k == 0 { String::new() } else { num(traj.step_norms[k - 1]) };
            energies.push(vec![integrator.to_string(), num(eps), num(t), num(e), step]);
        }
        let m = traj.codim;
        for (t, values) in &traj.states {
            for (i, v) in values.iter().enumerate() {
                states.push(vec![num(eps), num(*t), (i / m).to_string(), (i % m).to_string(), num(*v)]);
            }
        }
        if let Some(reference) = &reference {
            let times: Vec<f64> = traj.states.iter().map(|s| s.0).collect();
            if let Some(errs) = out.task(format!("flow compare eps={eps}"), compare_flows(&traj, reference, &times)) {
                for e in errs {
                    errors.push(vec![num(eps), num(e.time), num(e.l2), num(e.sup)]);
                }
            }
        }
    }
    out.tables.push(energies);
    out.tables.push(states);
    if reference.is_some() {
        out.tables.push(errors);
    }
    Ok(out)
}

pub fn run_pointcloud(cfg: &ExperimentConfig) -> Result<RunOutput, Error> {
    let spec = build_density(cfg)?;
    let pc = &cfg.pointcloud;
    let rho = SamplingDensity::parse(&pc.density, pc.c, pc.beta)?;
    let rule = EpsRule {
        prefactor: pc.prefactor,
        exponent: pc.exponent.unwrap_or(1.0 / (cfg.dim() as f64 + 2.0)),
    };
    let mut out = RunOutput::default();
    let mut rows = Table::new("pointcloud.csv", &["m", "n", "seed", "eps", "energy", "target", "gap"]);
    let mut summary = Table::new("pointcloud_summary.csv", &["m", "n", "mean_abs_gap", "spread"]);
    for m in &cfg.probes.m {
        let r = cloud_convergence_run(&spec, &rho, &cfg.grid.lengths, m, &pc.n_list, rule, &cfg.seeds);
        if let Some(rep) = out.task(format!("pointcloud m={}", matrix(m)), r) {
            for row in &rep.rows {
                rows.push(vec![
                    matrix(m),
                    row.n.to_string(),
                    row.seed.to_string(),
                    num(row.eps),
                    num(row.energy),
                    num(row.target),
                    num(row.gap),
                ]);
            }
            for s in &rep.summary {
                summary.push(vec![matrix(m), s.n.to_string(), num(s.mean_abs_gap), num(s.spread)]);
            }
        }
    }
    out.tables.push(rows);
    out.tables.push(summary);
    Ok(out)
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, Error> {
    match cfg.experiment.as_str() {
        "energy" => run_energy(cfg),
        "minimize" => run_minimize(cfg),
        "homogenize" => run_homogenize(cfg),
        "flow" => run_flow(cfg),
        "pointcloud" => run_pointcloud(cfg),
        "sweep" => run_sweep(cfg),
        other => Err(Error::InvalidArgument(format!("unknown experiment '{other}'"))),
    }
}
