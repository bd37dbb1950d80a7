use convhom::density::DensitySpec;
use convhom::grid::{fd_gradient, BoundaryMode, Domain};
use convhom::kernel::Kernel;
use convhom::pointcloud::{eval_discrete_energy, nearest_interpolate, sample_cloud, PointCloud, SamplingDensity};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn disc_spec(p: f64) -> DensitySpec {
    DensitySpec::convolution(Kernel::indicator_ball(2, 1.0).unwrap(), p, 1).unwrap()
}

/// Plain double loop over all ordered pairs, point by point.
fn brute_force(cloud: &PointCloud, eps: f64, u: &[f64], p: f64) -> f64 {
    let n = cloud.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            let (a, b) = (cloud.point(i), cloud.point(j));
            let r2: f64 = (0..2).map(|k| (b[k] - a[k]).powi(2)).sum();
            if r2.sqrt() > eps {
                continue;
            }
            acc += ((u[j] - u[i]) / eps).abs().powf(p);
        }
        total += acc;
    }
    total / (eps * eps * (n * n) as f64)
}

#[test]
fn three_points_match_the_hand_sum() {
    let cloud = PointCloud::from_points(&[1.0, 1.0], vec![0.1, 0.1, 0.2, 0.1, 0.5, 0.5]).unwrap();
    let u = [1.0, 3.0, -2.0];
    let eps = 0.2;
    // only the pair (0, 1) at distance 0.1 interacts: two ordered terms of (2 / eps)^2
    let hand = 2.0 * (2.0f64 / eps).powi(2) / (eps * eps * 9.0);
    let got = eval_discrete_energy(&disc_spec(2.0), &cloud, eps, &u).unwrap();
    assert!((got - hand).abs() <= 1e-12 * hand, "{got} vs {hand}");
}

#[test]
fn cell_list_matches_brute_force_exactly() {
    for (n, seed) in [(2usize, 1u64), (50, 2), (200, 3)] {
        let cloud = sample_cloud(&SamplingDensity::Uniform, &[1.0, 1.0], n, seed).unwrap();
        let u: Vec<f64> = (0..n).map(|i| (cloud.point(i)[0] * 7.0).sin() + cloud.point(i)[1]).collect();
        for eps in [0.05, 0.15, 0.4] {
            let got = eval_discrete_energy(&disc_spec(3.0), &cloud, eps, &u).unwrap();
            assert_eq!(got, brute_force(&cloud, eps, &u, 3.0), "n {n} eps {eps}");
        }
    }
}

#[test]
fn relabelling_points_leaves_the_energy_unchanged() {
    let n = 300;
    let cloud = sample_cloud(&SamplingDensity::Uniform, &[1.0, 1.0], n, 9).unwrap();
    let u: Vec<f64> = (0..n).map(|i| cloud.point(i)[0] - 2.0 * cloud.point(i)[1]).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let moved = cloud.permuted(&perm).unwrap();
    let v: Vec<f64> = perm.iter().map(|&i| u[i]).collect();
    for k in 0..n {
        assert_eq!(moved.point(k), cloud.point(perm[k]));
    }
    let a = eval_discrete_energy(&disc_spec(2.0), &cloud, 0.1, &u).unwrap();
    let b = eval_discrete_energy(&disc_spec(2.0), &moved, 0.1, &v).unwrap();
    assert!((a - b).abs() <= 1e-12 * a, "{a} vs {b}");
}

#[test]
fn affine_energy_scales_with_the_slope() {
    let cloud = sample_cloud(&SamplingDensity::Uniform, &[1.0, 1.0], 400, 5).unwrap();
    for p in [2.0, 4.0] {
        let spec = disc_spec(p);
        // powers of two keep the scaling exact in floating point
        let u: Vec<f64> = (0..400).map(|i| cloud.point(i)[0]).collect();
        let base = eval_discrete_energy(&spec, &cloud, 0.125, &u).unwrap();
        for lambda in [2.0f64, -0.5, 4.0] {
            let v: Vec<f64> = u.iter().map(|x| lambda * x).collect();
            let e = eval_discrete_energy(&spec, &cloud, 0.125, &v).unwrap();
            assert_eq!(e, lambda.abs().powf(p) * base, "p {p} lambda {lambda}");
        }
    }
}

#[test]
fn uniform_quadrant_masses_are_binomial() {
    let n = 10_000;
    let cloud = sample_cloud(&SamplingDensity::Uniform, &[1.0, 1.0], n, 17).unwrap();
    let mut counts = [0usize; 4];
    for i in 0..n {
        let p = cloud.point(i);
        counts[(p[0] >= 0.5) as usize + 2 * (p[1] >= 0.5) as usize] += 1;
    }
    let sd = (n as f64 * 0.25 * 0.75).sqrt();
    for c in counts {
        assert!((c as f64 - 0.25 * n as f64).abs() <= 3.0 * sd, "{counts:?}");
    }
}

#[test]
fn flat_affine_density_reproduces_the_uniform_stream() {
    let a = sample_cloud(&SamplingDensity::Uniform, &[1.0, 2.0], 100, 3).unwrap();
    let b = sample_cloud(&SamplingDensity::Affine { c: 1.0, beta: 0.0 }, &[1.0, 2.0], 100, 3).unwrap();
    assert_eq!(a.points(), b.points());
    assert!(sample_cloud(&SamplingDensity::Affine { c: -1.0, beta: 0.5 }, &[1.0], 10, 0).is_err());
}

#[test]
fn nearest_interpolation_recovers_affine_slopes() {
    let mut last = f64::INFINITY;
    for n in [500usize, 4000] {
        let cloud = sample_cloud(&SamplingDensity::Uniform, &[1.0, 1.0], n, 8).unwrap();
        let u: Vec<f64> = (0..n).map(|i| 2.0 * cloud.point(i)[0] - cloud.point(i)[1]).collect();
        let dom = Domain::unit(2, 0.05, BoundaryMode::Truncated).unwrap();
        let field = nearest_interpolate(&cloud, &u, 1, &dom).unwrap();
        let grad = fd_gradient(&field);
        // average of the centred differences over the interior approximates M
        let (mut gx, mut gy, mut count) = (0.0, 0.0, 0.0);
        for node in 0..dom.num_nodes() {
            let idx = dom.multi_index(node);
            if idx.iter().all(|&i| (4..=16).contains(&i)) {
                gx += grad.at(node)[0];
                gy += grad.at(node)[1];
                count += 1.0;
            }
        }
        let err = ((gx / count - 2.0).powi(2) + (gy / count + 1.0).powi(2)).sqrt();
        assert!(err <= 3.0 * (n as f64).powf(-0.5), "n {n}: {err}");
        assert!(err < last || err < 1e-2);
        last = err;
    }
}
