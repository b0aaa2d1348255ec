//! Randomized verification suites: backward-recursion equivalence, oracle
//! exactness, and gradient checks. The `check` CLI subcommand and the
//! acceptance tests both run these, so a reported pass means the same thing
//! in both places.
//!
//! Sampling ranges: transition/initial logits uniform in [-3, 3], weights
//! uniform in [-2, 2], biases in [-1, 1], observations standard normal,
//! T in [1, 50], H in [1, 8], F in [1, 5] (shrunk where a suite's oracle
//! demands it). Every trial derives its own seed from the master seed, so
//! results do not depend on execution order.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::grad::{backprop, finite_diff_grad, max_grad_discrepancy};
use crate::layer::{
    backward_hmm, backward_hmm_mutated, backward_kalman, forward_filter, smooth_sequence,
    BackwardMode, UbruParams,
};
use crate::numerics::{sigmoid, Tensor2};
use crate::oracle::{
    enumerate_posterior, scaled_forward_backward, ChainSpec, EmissionLikelihoods, PosteriorMode,
};
use crate::train::derive_seed;

pub const EQUIVALENCE_TOL: f64 = 1e-10;
pub const IDENTITY_TOL: f64 = 1e-10;
pub const ORACLE_REL_TOL: f64 = 1e-8;
pub const GRAD_REL_TOL: f64 = 1e-5;
pub const GRAD_ABS_FLOOR: f64 = 1e-8;
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one randomized trial.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub index: usize,
    pub seed: u64,
    pub max_error: f64,
    pub passed: bool,
}

/// Aggregate outcome of a suite run.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub trials: Vec<TrialResult>,
    pub max_error: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.trials.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TrialResult> {
        self.trials.iter().filter(|t| !t.passed)
    }

    fn from_trials(name: &'static str, tolerance: f64, trials: Vec<TrialResult>) -> Self {
        let max_error = trials.iter().map(|t| t.max_error).fold(0.0, f64::max);
        SuiteReport {
            name,
            trials,
            max_error,
            tolerance,
        }
    }
}

fn sample_params(rng: &mut StdRng, f_dim: usize, h_dim: usize) -> UbruParams {
    let w = Tensor2::from_vec(
        f_dim,
        h_dim,
        (0..f_dim * h_dim)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect(),
    )
    .expect("finite");
    let logits = |rng: &mut StdRng| (0..h_dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
    UbruParams::new(
        w,
        (0..h_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        logits(rng),
        logits(rng),
        logits(rng),
    )
    .expect("finite")
}

fn sample_input(rng: &mut StdRng, f_dim: usize, t_len: usize) -> Tensor2 {
    Tensor2::from_vec(
        f_dim,
        t_len,
        (0..f_dim * t_len)
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    )
    .expect("finite")
}

// ---------------------------------------------------------------------------
// Equivalence suite
// ---------------------------------------------------------------------------

/// Per trial: sample a layer and an input, run both backward recursions and
/// record (a) the max elementwise gap between the two gamma sequences and
/// (b) the worst violation of the complement identity
/// `(1 - alpha_t) * beta_bar_t = 1 - gamma_t`.
pub fn run_equivalence_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    run_equivalence_suite_impl(trials, seed, false)
}

/// Same suite with the planted tau01 sign error switched on; exists so the
/// suite can demonstrate that it detects a defective recursion.
#[doc(hidden)]
pub fn run_equivalence_suite_mutated(trials: usize, seed: u64) -> Result<SuiteReport> {
    run_equivalence_suite_impl(trials, seed, true)
}

fn run_equivalence_suite_impl(trials: usize, seed: u64, mutate: bool) -> Result<SuiteReport> {
    let mut results = Vec::with_capacity(trials);
    for index in 0..trials {
        let trial_seed = derive_seed(seed, index as u64);
        let mut rng = StdRng::seed_from_u64(trial_seed);
        let f_dim = rng.gen_range(1..=5);
        let h_dim = rng.gen_range(1..=8);
        let t_len = rng.gen_range(1..=50);
        let params = sample_params(&mut rng, f_dim, h_dim);
        let x = sample_input(&mut rng, f_dim, t_len);

        let fs = forward_filter(&params, &x)?;
        let kalman = backward_kalman(&params, &fs)?;
        let (betas, hmm) = if mutate {
            backward_hmm_mutated(&params, &fs)?
        } else {
            backward_hmm(&params, &fs)?
        };

        let gap = kalman.gammas().max_abs_diff(hmm.gammas());
        let mut identity = 0.0f64;
        for t in 0..t_len {
            for i in 0..h_dim {
                let lhs = (1.0 - fs.alphas().get(t, i)) * betas.betas_bar().get(t, i);
                let rhs = 1.0 - hmm.gammas().get(t, i);
                identity = identity.max((lhs - rhs).abs());
            }
        }
        let max_error = gap.max(identity);
        results.push(TrialResult {
            index,
            seed: trial_seed,
            max_error,
            passed: gap < EQUIVALENCE_TOL && identity < IDENTITY_TOL,
        });
    }
    Ok(SuiteReport::from_trials(
        "equivalence",
        EQUIVALENCE_TOL,
        results,
    ))
}

// ---------------------------------------------------------------------------
// Oracle suite
// ---------------------------------------------------------------------------

/// Per trial (T <= 12 so enumeration stays cheap): the layer's filtered and
/// smoothed posteriors must match brute-force enumeration and the classical
/// rescaled recursion within relative tolerance, unit by unit.
pub fn run_oracle_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut results = Vec::with_capacity(trials);
    for index in 0..trials {
        let trial_seed = derive_seed(seed.wrapping_add(0x6f72), index as u64);
        let mut rng = StdRng::seed_from_u64(trial_seed);
        let f_dim = rng.gen_range(1..=5);
        let h_dim = rng.gen_range(1..=8);
        let t_len = rng.gen_range(1..=12);
        let params = sample_params(&mut rng, f_dim, h_dim);
        let x = sample_input(&mut rng, f_dim, t_len);

        let fs = forward_filter(&params, &x)?;
        let smoothed = backward_kalman(&params, &fs)?;

        let mut max_rel = 0.0f64;
        for i in 0..h_dim {
            let chain = ChainSpec::new(
                sigmoid(params.u_rho0()[i]).value(),
                sigmoid(params.u_tau11()[i]).value(),
                sigmoid(params.u_tau01()[i]).value(),
            )?;
            let ratios: Vec<f64> = (0..t_len).map(|t| (-fs.scores().get(t, i)).exp()).collect();
            let enum_f = enumerate_posterior(&chain, &ratios, PosteriorMode::Filtered)?;
            let enum_s = enumerate_posterior(&chain, &ratios, PosteriorMode::Smoothed)?;
            let emis = EmissionLikelihoods::from_ratios(&ratios)?;
            let (classical_f, classical_s) = scaled_forward_backward(&chain, &emis)?;
            for t in 0..t_len {
                let alpha = fs.alphas().get(t, i);
                let gamma = smoothed.gammas().get(t, i);
                for (ours, reference) in [
                    (alpha, enum_f.get(t, 0)),
                    (alpha, classical_f[t]),
                    (gamma, enum_s.get(t, 0)),
                    (gamma, classical_s[t]),
                ] {
                    max_rel = max_rel.max((ours - reference).abs() / reference.abs().max(1e-300));
                }
            }
        }
        results.push(TrialResult {
            index,
            seed: trial_seed,
            max_error: max_rel,
            passed: max_rel < ORACLE_REL_TOL,
        });
    }
    Ok(SuiteReport::from_trials("oracle", ORACLE_REL_TOL, results))
}

// ---------------------------------------------------------------------------
// Gradient suite
// ---------------------------------------------------------------------------

/// Per trial: a random configuration (T <= 20, H <= 4, F <= 5, mode
/// alternating none/kalman), loss `sum_i c_i gamma_i` with random
/// coefficients; analytic gradients must match central finite differences
/// within 1e-5 relative (1e-8 absolute floor) on every component.
pub fn run_grad_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut results = Vec::with_capacity(trials);
    for index in 0..trials {
        let trial_seed = derive_seed(seed.wrapping_add(0x6772), index as u64);
        let mut rng = StdRng::seed_from_u64(trial_seed);
        let f_dim = rng.gen_range(1..=5);
        let h_dim = rng.gen_range(1..=4);
        let t_len = rng.gen_range(1..=20);
        let mode = if index % 2 == 0 {
            BackwardMode::None
        } else {
            BackwardMode::Kalman
        };
        let params = sample_params(&mut rng, f_dim, h_dim);
        let x = sample_input(&mut rng, f_dim, t_len);

        // Random linear loss: dL/dgamma is the coefficient tensor itself.
        let coeffs = Tensor2::from_vec(
            t_len,
            h_dim,
            (0..t_len * h_dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )?;
        let analytic = backprop(&params, &x, mode, &coeffs)?;
        let loss_coeffs = coeffs.clone();
        let numeric = finite_diff_grad(
            &params,
            &x,
            mode,
            move |sp| {
                sp.gammas()
                    .data()
                    .iter()
                    .zip(loss_coeffs.data())
                    .map(|(g, c)| g * c)
                    .sum()
            },
            FD_STEP,
        )?;
        let (margin, _slot) =
            max_grad_discrepancy(&analytic, &numeric, GRAD_REL_TOL, GRAD_ABS_FLOOR);
        results.push(TrialResult {
            index,
            seed: trial_seed,
            max_error: margin.max(0.0),
            passed: margin <= 0.0,
        });
    }
    Ok(SuiteReport::from_trials("grads", 0.0, results))
}

// ---------------------------------------------------------------------------
// Degenerate-identity suite
// ---------------------------------------------------------------------------

/// Per trial, two closed-form identities on otherwise random parameters:
/// equal transitions make smoothing a no-op (gamma = alpha), and zero
/// weights make gamma the chain marginals.
pub fn run_degenerate_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let tol = 1e-12;
    let mut results = Vec::with_capacity(trials);
    for index in 0..trials {
        let trial_seed = derive_seed(seed.wrapping_add(0x6465), index as u64);
        let mut rng = StdRng::seed_from_u64(trial_seed);
        let f_dim = rng.gen_range(1..=5);
        let h_dim = rng.gen_range(1..=8);
        let t_len = rng.gen_range(1..=50);
        let mut max_error = 0.0f64;

        // tau11 == tau01: gamma must equal alpha.
        let base = sample_params(&mut rng, f_dim, h_dim);
        let shared = base.u_tau11().to_vec();
        let equal_tau = UbruParams::new(
            base.w().clone(),
            base.b().to_vec(),
            shared.clone(),
            shared,
            base.u_rho0().to_vec(),
        )?;
        let x = sample_input(&mut rng, f_dim, t_len);
        let fs = forward_filter(&equal_tau, &x)?;
        let smoothed = backward_kalman(&equal_tau, &fs)?;
        max_error = max_error.max(smoothed.gammas().max_abs_diff(fs.alphas()));

        // W = 0, b = 0: gamma must equal the chain marginals.
        let prior_only = UbruParams::new(
            Tensor2::zeros(f_dim, h_dim),
            vec![0.0; h_dim],
            base.u_tau11().to_vec(),
            base.u_tau01().to_vec(),
            base.u_rho0().to_vec(),
        )?;
        let smoothed = smooth_sequence(&prior_only, &x, BackwardMode::Kalman)?;
        for i in 0..h_dim {
            let chain = ChainSpec::new(
                sigmoid(prior_only.u_rho0()[i]).value(),
                sigmoid(prior_only.u_tau11()[i]).value(),
                sigmoid(prior_only.u_tau01()[i]).value(),
            )?;
            let marginals = chain.marginals(t_len);
            for t in 0..t_len {
                max_error = max_error.max((smoothed.gammas().get(t, i) - marginals[t]).abs());
            }
        }

        results.push(TrialResult {
            index,
            seed: trial_seed,
            max_error,
            passed: max_error < tol,
        });
    }
    Ok(SuiteReport::from_trials("degenerate", 1e-12, results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equivalence_suite_passes() {
        let report = run_equivalence_suite(50, 1).unwrap();
        assert!(report.passed(), "max error {}", report.max_error);
    }

    #[test]
    fn equivalence_suite_catches_planted_sign_error() {
        let report = run_equivalence_suite_mutated(50, 1).unwrap();
        assert!(!report.passed(), "mutated recursion must fail the suite");
        assert!(report.max_error > 1e-6);
    }

    #[test]
    fn oracle_suite_passes() {
        let report = run_oracle_suite(25, 2).unwrap();
        assert!(report.passed(), "max rel error {}", report.max_error);
    }

    #[test]
    fn grad_suite_passes() {
        let report = run_grad_suite(10, 3).unwrap();
        assert!(report.passed(), "worst margin {}", report.max_error);
    }

    #[test]
    fn degenerate_suite_passes() {
        let report = run_degenerate_suite(20, 4).unwrap();
        assert!(report.passed(), "max error {}", report.max_error);
    }

    #[test]
    fn suites_are_order_independent() {
        // Trial seeds derive from the master seed, so trial k's result is
        // the same whether it runs in a batch of 5 or 10.
        let small = run_equivalence_suite(5, 9).unwrap();
        let large = run_equivalence_suite(10, 9).unwrap();
        for (a, b) in small.trials.iter().zip(&large.trials) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.max_error, b.max_error);
        }
    }
}
