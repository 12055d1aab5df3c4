//! Seeded statistical checks of the samplers, the initializer, the estimator
//! and the plug-in covariance estimates.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use spherefit::experiments::{
    half_sphere_spec, replicate, run_plan, whole_sphere_spec, Algorithm, ExperimentPlan, PipelineOptions,
};
use spherefit::inference::{theoretical_gamma, theoretical_sigma, CovarianceAccumulators};
use spherefit::model::{
    sample_cloud, sample_radial, sample_unit_direction, theoretical_r_star, RadialLaw, TruncationRegion,
};
use spherefit::prm::{EstimatorState, StepSchedule};
use spherefit::rng::{derive_seed, stream};

fn direction_draws(region: &TruncationRegion, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = stream(seed);
    (0..n).map(|_| sample_unit_direction(region, 3, &mut rng).unwrap()).collect()
}

#[test]
fn complete_sphere_directions_are_centered() {
    let us = direction_draws(&TruncationRegion::Complete, 1_000_000, 11);
    for v in [
        DVector::from_vec(vec![1.0, 0.0, 0.0]),
        DVector::from_vec(vec![0.0, 0.0, 1.0]),
        DVector::from_vec(vec![1.0, -2.0, 0.5]).normalize(),
    ] {
        let mean = us.iter().map(|u| u.dot(&v)).sum::<f64>() / us.len() as f64;
        assert!(mean.abs() < 0.005, "{mean}");
    }
    assert!(us.iter().all(|u| (u.norm() - 1.0).abs() < 1e-12));
}

#[test]
fn half_sphere_direction_covariance() {
    let region = TruncationRegion::HalfSpace { axis: 1, sign: 1 };
    let us = direction_draws(&region, 1_000_000, 12);
    assert!(us.iter().all(|u| region.contains(u) && (u.norm() - 1.0).abs() < 1e-12));
    let m = us.len() as f64;
    let mean = us.iter().fold(DVector::zeros(3), |a, u| a + u) / m;
    let cov = us.iter().fold(DMatrix::zeros(3, 3), |a, u| a + (u - &mean) * (u - &mean).transpose()) / m;
    let lmin = cov.symmetric_eigen().eigenvalues.min();
    assert!((lmin - 1.0 / 12.0).abs() < 0.003, "{lmin}");
    assert!((mean[1] - 0.5).abs() < 0.005);
}

#[test]
fn shell_radii_follow_the_uniform_law() {
    let spec = whole_sphere_spec();
    let mut rng = stream(13);
    let pts = sample_cloud(&spec, 100_000, &mut rng).unwrap();
    let mut w: Vec<f64> = pts.iter().map(|p| p.norm() / 50.0).collect();
    w.sort_by(f64::total_cmp);
    let m = w.len() as f64;
    let cdf = |x: f64| ((x - 0.9) / 0.2).clamp(0.0, 1.0);
    let d = w
        .iter()
        .enumerate()
        .map(|(i, &x)| (cdf(x) - i as f64 / m).abs().max(((i + 1) as f64 / m - cdf(x)).abs()))
        .fold(0.0, f64::max);
    assert!(d < 0.01, "{d}");
}

#[test]
fn radial_gaussian_mean_matches_quadrature() {
    for (r, sigma) in [(50.0, 1.0), (2.0, 1.0)] {
        let law = RadialLaw::RadialGaussian { sigma };
        let mut rng = stream(14);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r * sample_radial(&law, r, 3, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let spec = spherefit::DistributionSpec::new(
            spherefit::SphereParams::new(vec![0.0; 3], r).unwrap(),
            law,
            TruncationRegion::Complete,
        )
        .unwrap();
        let expect = theoretical_r_star(&spec).unwrap();
        assert!((mean - expect).abs() < 4.0 * sd / (n as f64).sqrt(), "{mean} vs {expect}");
    }
}

#[test]
fn initializer_lands_near_the_truth() {
    let spec = whole_sphere_spec();
    let opts = PipelineOptions::default();
    let good = (0..200u64)
        .into_par_iter()
        .filter(|&k| {
            let rep = replicate(&spec, 2000, derive_seed(21, &[k]), &opts).unwrap();
            rep.initial.center.norm() < 2.0 && (rep.initial.radius - 50.0).abs() < 2.0
        })
        .count();
    assert!(good >= 190, "{good}/200");
}

#[test]
fn whole_sphere_region_contains_the_truth() {
    let spec = whole_sphere_spec();
    let theta = spec.theta().unwrap();
    let opts = PipelineOptions::default();
    let good = (0..200u64)
        .into_par_iter()
        .filter(|&k| {
            let rep = replicate(&spec, 2000, derive_seed(21, &[k]), &opts).unwrap();
            rep.region.contains(&theta, 0.0)
        })
        .count();
    assert!(good >= 190, "{good}/200");
}

#[test]
fn half_sphere_region_contains_the_truth() {
    let spec = half_sphere_spec();
    let theta = spec.theta().unwrap();
    let opts = PipelineOptions::default();
    let good = (0..200u64)
        .into_par_iter()
        .filter(|&k| {
            let rep = replicate(&spec, 2000, derive_seed(22, &[k]), &opts).unwrap();
            rep.region.contains(&theta, 0.0)
        })
        .count();
    assert!(good >= 190, "{good}/200");
}

#[test]
fn projections_stop_after_a_while() {
    let spec = whole_sphere_spec();
    let opts = PipelineOptions::default();
    let quiet = (0..50u64)
        .into_par_iter()
        .filter(|&k| {
            let rep = replicate(&spec, 10_000, derive_seed(23, &[k]), &opts).unwrap();
            let st = rep.run(StepSchedule::default(), true, 0).unwrap();
            st.last_projection.is_none_or(|s| s <= 2000)
        })
        .count();
    assert!(quiet >= 48, "{quiet}/50");
}

fn frobenius_errors(n: usize, seed: u64) -> (f64, f64) {
    let spec = whole_sphere_spec();
    let theta = spec.theta().unwrap();
    let g = theoretical_gamma(&spec).unwrap();
    let s = theoretical_sigma(&spec).unwrap();
    let mut rng = stream(seed);
    let pts = sample_cloud(&spec, n, &mut rng).unwrap();
    let acc = CovarianceAccumulators::at_fixed(&pts, &theta).unwrap();
    ((&acc.gamma_hat - g).norm(), (&acc.sigma_hat - s).norm())
}

#[test]
fn plug_in_estimates_improve_with_n() {
    let sizes = [1_000, 10_000, 100_000];
    let reps = 20u64;
    let avg: Vec<(f64, f64)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let errs: Vec<(f64, f64)> =
                (0..reps).into_par_iter().map(|k| frobenius_errors(n, derive_seed(24, &[i as u64, k]))).collect();
            let m = reps as f64;
            (errs.iter().map(|e| e.0).sum::<f64>() / m, errs.iter().map(|e| e.1).sum::<f64>() / m)
        })
        .collect();
    for w in avg.windows(2) {
        assert!(w[1].0 < w[0].0 && w[1].1 < w[0].1, "{avg:?}");
    }
}

#[test]
fn theoretical_gamma_matches_monte_carlo_hessian() {
    for spec in [whole_sphere_spec(), half_sphere_spec()] {
        let theta = spec.theta().unwrap();
        let mut rng = stream(25);
        let pts = sample_cloud(&spec, 1_000_000, &mut rng).unwrap();
        let acc = CovarianceAccumulators::at_fixed(&pts, &theta).unwrap();
        let g = theoretical_gamma(&spec).unwrap();
        assert!((&acc.gamma_hat - &g).amax() < 0.01, "{}", acc.gamma_hat);
    }
}

#[test]
fn backfitting_beats_averaging_on_the_whole_sphere() {
    let plan = ExperimentPlan {
        spec: whole_sphere_spec(),
        sample_sizes: vec![2000],
        schedules: vec![StepSchedule::default()],
        replications: 200,
        algorithms: vec![Algorithm::Averaged, Algorithm::Backfit],
        master_seed: 26,
        options: PipelineOptions::default(),
    };
    let report = run_plan(&plan).unwrap();
    let avg = &report.cells[0];
    let bf = &report.cells[1];
    assert_eq!(bf.algorithm, Algorithm::Backfit);
    assert!(bf.center_mse <= avg.center_mse, "{} vs {}", bf.center_mse, avg.center_mse);
}

#[test]
fn unprojected_recursion_runs_away_with_large_steps() {
    let spec = whole_sphere_spec();
    let opts = PipelineOptions::default();
    let flagged = (0..20u64)
        .into_par_iter()
        .filter(|&k| {
            let rep = replicate(&spec, 2000, derive_seed(27, &[k]), &opts).unwrap();
            let mut st = EstimatorState::new(rep.initial.clone(), StepSchedule::new(10.0, 0.51).unwrap(), None).unwrap();
            for x in rep.stream() {
                st.update(x).unwrap();
            }
            st.diverged
        })
        .count();
    assert!(flagged >= 15, "{flagged}/20");
}
