use convhom::density::DensitySpec;
use convhom::grid::{build_layer_mask, BoundaryMode, Domain};
use convhom::kernel::Kernel;
use convhom::minimize::{solve_dirichlet, MinimizeOptions};
use nalgebra::{DMatrix, DVector};

fn interval() -> Kernel {
    Kernel::indicator_ball(1, 1.0).unwrap()
}

/// Interval weights at lattice step `s`: `s` inside, `s/2` where the cell is cut.
fn interval_weights(s: f64) -> Vec<(i64, f64)> {
    let reach = (1.0 / s).round() as i64;
    (-reach..=reach)
        .map(|k| (k, if k.abs() == reach { 0.5 * s } else { s }))
        .collect()
}

/// Stiffness of `sum_k w_k h sum_i (u_{i+k} - u_i)^2 / (2 eps^2)` on `n` nodes.
fn stiffness(n: usize, h: f64, eps: f64) -> DMatrix<f64> {
    let mut k_mat = DMatrix::zeros(n, n);
    for (k, w) in interval_weights(h / eps) {
        let c = w * h / (eps * eps);
        for i in 0..n {
            let j = i as i64 + k;
            if j < 0 || j >= n as i64 || k == 0 {
                continue;
            }
            let j = j as usize;
            k_mat[(i, i)] += c;
            k_mat[(j, j)] += c;
            k_mat[(i, j)] -= c;
            k_mat[(j, i)] -= c;
        }
    }
    k_mat
}

fn tight() -> MinimizeOptions {
    MinimizeOptions {
        grad_tol: Some(1e-12),
        ..Default::default()
    }
}

#[test]
fn quadratic_dirichlet_matches_dense_solve() {
    let (h, eps, r) = (0.01, 0.1, 1.0);
    let dom = Domain::unit(1, h, BoundaryMode::Truncated).unwrap();
    let n = dom.num_nodes();
    let spec = DensitySpec::plaplace(interval(), 2.0, 1).unwrap();
    let g = |x: f64| x * x + 0.3 * (5.0 * x).sin();
    let sol = solve_dirichlet(&spec, &dom, eps, |x, o| o[0] = g(x[0]), r, &tight()).unwrap();
    assert!(sol.converged);

    let free = build_layer_mask(&dom, eps * r).unwrap().free();
    let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
    let fixed: Vec<usize> = (0..n).filter(|&i| !free[i]).collect();
    assert!(idx.len() <= 500);
    let k_mat = stiffness(n, h, eps);
    let gb = DVector::from_iterator(fixed.len(), fixed.iter().map(|&i| g(i as f64 * h)));
    let kff = k_mat.select_rows(&idx).select_columns(&idx);
    let kfb = k_mat.select_rows(&idx).select_columns(&fixed);
    let uf = kff.lu().solve(&(-(kfb * gb))).unwrap();
    let mut u = DVector::zeros(n);
    for (a, &i) in idx.iter().enumerate() {
        u[i] = uf[a];
    }
    for &i in &fixed {
        u[i] = g(i as f64 * h);
    }
    let value = 0.5 * u.dot(&(&k_mat * &u));
    assert!((sol.value - value).abs() <= 1e-6 * value, "{} vs {value}", sol.value);
    let err = (0..n).map(|i| (sol.field.values()[i] - u[i]).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-6 * u.amax(), "field error {err}");
    for &i in &fixed {
        assert_eq!(sol.field.values()[i], g(i as f64 * h));
    }
}

#[test]
fn affine_datum_gives_affine_minimizer() {
    for eps in [0.1, 0.05] {
        let dom = Domain::unit(1, eps / 10.0, BoundaryMode::Truncated).unwrap();
        let spec = DensitySpec::convolution(interval(), 2.0, 1).unwrap();
        let sol = solve_dirichlet(&spec, &dom, eps, |x, o| o[0] = x[0], 1.0, &tight()).unwrap();
        for i in 0..dom.num_nodes() {
            let x = dom.coords(i)[0];
            assert!((sol.field.values()[i] - x).abs() < 1e-9);
        }
        assert!((sol.value - 2.0 / 3.0).abs() < eps);
    }
}

/// `sum_k w_k h sum_i |u_{i+k} - u_i|^4 / (4 eps^4)` with `h = eps`.
fn quartic_energy(u: &[f64], h: f64) -> f64 {
    let mut total = 0.0;
    for (k, w) in interval_weights(1.0) {
        for i in 0..u.len() {
            let j = i as i64 + k;
            if j < 0 || j >= u.len() as i64 {
                continue;
            }
            let z = (u[j as usize] - u[i]) / h;
            total += w * h * z.powi(4) / 4.0;
        }
    }
    total
}

#[test]
fn quartic_five_free_nodes_matches_grid_search() {
    let h = 0.1;
    let dom = Domain::unit(1, h, BoundaryMode::Truncated).unwrap();
    let spec = DensitySpec::plaplace(interval(), 4.0, 1).unwrap();
    let g = |x: f64| x * x;
    let sol = solve_dirichlet(&spec, &dom, 0.1, |x, o| o[0] = g(x[0]), 3.0, &tight()).unwrap();
    let free = build_layer_mask(&dom, 0.3).unwrap().free();
    let idx: Vec<usize> = (0..11).filter(|&i| free[i]).collect();
    assert_eq!(idx, vec![3, 4, 5, 6, 7]);

    // cyclic coordinate search on the 1e-3 grid, then on its neighbours jointly
    let mut u: Vec<f64> = (0..11).map(|i| g(i as f64 * h)).collect();
    for &i in &idx {
        u[i] = (u[i] * 1e3).round() / 1e3;
    }
    let mut best = quartic_energy(&u, h);
    loop {
        let mut improved = false;
        for &i in &idx {
            for dir in [-1e-3, 1e-3] {
                loop {
                    u[i] += dir;
                    let e = quartic_energy(&u, h);
                    if e < best {
                        best = e;
                        improved = true;
                    } else {
                        u[i] -= dir;
                        break;
                    }
                }
            }
        }
        for a in 0..idx.len() - 1 {
            for dir in [-1e-3, 1e-3] {
                u[idx[a]] += dir;
                u[idx[a + 1]] += dir;
                let e = quartic_energy(&u, h);
                if e < best {
                    best = e;
                    improved = true;
                } else {
                    u[idx[a]] -= dir;
                    u[idx[a + 1]] -= dir;
                }
            }
        }
        if !improved {
            break;
        }
    }
    assert!(sol.value <= best + 1e-12, "{} > {best}", sol.value);
    assert!(best - sol.value <= 1e-3 * best, "{} vs {best}", sol.value);
    for &i in &idx {
        assert!((sol.field.values()[i] - u[i]).abs() <= 5e-3, "node {i}");
    }
    assert!((quartic_energy(sol.field.values(), h) - sol.value).abs() <= 1e-12 * sol.value);
}

#[test]
fn trace_is_nonincreasing() {
    let dom = Domain::unit(1, 0.01, BoundaryMode::Truncated).unwrap();
    let spec = DensitySpec::plaplace(interval(), 3.0, 1).unwrap();
    let opts = MinimizeOptions {
        keep_trace: true,
        ..Default::default()
    };
    let sol = solve_dirichlet(&spec, &dom, 0.1, |x, o| o[0] = (6.0 * x[0]).sin(), 1.0, &opts).unwrap();
    assert!(sol.converged);
    assert!(sol.final_grad_norm <= sol.grad_tol);
    for w in sol.trace.windows(2) {
        assert!(w[1].energy <= w[0].energy * (1.0 + 64.0 * f64::EPSILON));
    }
}
