//! Monte Carlo runs of the conditional detail sampler against the closed-form
//! covariance of the discretized chain.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use wsgm::gauss_analysis::WsgmOneScaleCurve;
use wsgm::gauss_process::{
    analytic_normalizer, build_spectrum, conditional_gaussian, SpectrumNormalization, SpectrumSpec,
};
use wsgm::rng;
use wsgm::sgm::{euler_maruyama_reverse, ExactConditionalScore, Schedule};
use wsgm::wavelet::make_filters;

/// Empirical second moment of `(x̄_1, x_1)` from `n` chains with `steps` steps.
fn empirical_joint(steps: usize, n: usize, horizon: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let g = build_spectrum(&SpectrumSpec {
        eta: 1.0,
        xi: PI / 8.0,
        side: 16,
        dims: 1,
        normalization: SpectrumNormalization::TraceD,
    })
    .unwrap();
    let f = make_filters("daubechies", 4).unwrap();
    let c = conditional_gaussian(&g, &f, analytic_normalizer(&g, &f)).unwrap();
    let score = ExactConditionalScore::new(c.a.clone(), &c.gamma).unwrap();
    let low_chol = c.var_low.clone().cholesky().unwrap().l();
    let sched = Schedule::new(horizon, steps).unwrap();
    let (nd, nl) = (c.gamma.nrows(), c.var_low.nrows());
    let mut acc = DMatrix::zeros(nd + nl, nd + nl);
    let mut r = rng::seeded(2024);
    for _ in 0..n {
        let z = DVector::from_fn(nl, |_, _| r.sample::<f64, _>(StandardNormal));
        let low = &low_chol * z;
        let det = euler_maruyama_reverse(&score, &sched, nd, Some(low.as_slice()), &mut r).unwrap();
        let v = DVector::from_iterator(nd + nl, det.into_iter().chain(low.iter().copied()));
        acc += &v * v.transpose();
    }
    let curve = WsgmOneScaleCurve::new(&g, &f, horizon).unwrap();
    (acc / n as f64, curve.generated_joint(steps).unwrap(), curve.true_joint().clone())
}

/// Largest entrywise deviation in units of the Gaussian sampling error of a
/// second moment, `sqrt((C_ii C_jj + C_ij²) / n)`.
fn worst_z(emp: &DMatrix<f64>, c: &DMatrix<f64>, n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            let se = ((c[(i, i)] * c[(j, j)] + c[(i, j)].powi(2)) / n as f64).sqrt();
            worst = worst.max((emp[(i, j)] - c[(i, j)]).abs() / se);
        }
    }
    worst
}

#[test]
fn coarse_step_chain_matches_recursion_not_target() {
    let n = 20_000;
    let (emp, generated, target) = empirical_joint(6, n, 5.0);
    let z_gen = worst_z(&emp, &generated, n);
    let z_target = worst_z(&emp, &target, n);
    assert!(z_gen < 5.0, "chain deviates from its recursion by {z_gen:.2} standard errors");
    assert!(z_target > 10.0, "six steps should visibly miss the target, got {z_target:.2}");
}

#[test]
fn fine_step_chain_reaches_target() {
    let n = 8_000;
    let (emp, generated, target) = empirical_joint(400, n, 8.0);
    assert!(worst_z(&emp, &generated, n) < 5.0);
    assert!(worst_z(&emp, &target, n) < 5.0);
}
