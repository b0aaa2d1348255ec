//! Independent ground-truth computations used to verify the recurrent unit:
//! a brute-force enumeration posterior, the classical rescaled two-state
//! forward-backward recursion, and the shared-covariance Gaussian emission
//! model that grounds the likelihood-ratio parameterization.
//!
//! Nothing in this module calls into `layer`; agreement between the two is
//! established purely in tests and in the verification suites.

use crate::error::{Result, UbruError};
use crate::numerics::{Prob, Tensor2};

/// Hard limit for the enumeration oracle; cost is `2^(T+1)` hidden sequences.
pub const ENUMERATION_MAX_LEN: usize = 16;

// ---------------------------------------------------------------------------
// Gaussian emission model
// ---------------------------------------------------------------------------

/// Two multivariate normal emission distributions sharing one covariance:
/// `x | present ~ N(mu, sigma)` and `x | absent ~ N(nu, sigma)`.
#[derive(Debug, Clone)]
pub struct GaussianEmissionModel {
    mu: Vec<f64>,
    nu: Vec<f64>,
    sigma: Tensor2,
    chol: Tensor2,
}

impl GaussianEmissionModel {
    pub fn new(mu: Vec<f64>, nu: Vec<f64>, sigma: Tensor2) -> Result<Self> {
        let f_dim = mu.len();
        if nu.len() != f_dim || sigma.rows() != f_dim || sigma.cols() != f_dim {
            return Err(UbruError::Dimension(format!(
                "mu {} / nu {} / sigma {}x{}",
                mu.len(),
                nu.len(),
                sigma.rows(),
                sigma.cols()
            )));
        }
        for r in 0..f_dim {
            for c in 0..r {
                if (sigma.get(r, c) - sigma.get(c, r)).abs() > 1e-12 {
                    return Err(UbruError::NotPositiveDefinite(format!(
                        "asymmetric at ({r},{c})"
                    )));
                }
            }
        }
        let chol = cholesky(&sigma)?;
        Ok(GaussianEmissionModel {
            mu,
            nu,
            sigma,
            chol,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn sigma(&self) -> &Tensor2 {
        &self.sigma
    }

    /// Log density of `N(x; mean, sigma)` where `mean` selects mu or nu.
    pub fn log_density(&self, x: &[f64], present: bool) -> f64 {
        let mean = if present { &self.mu } else { &self.nu };
        let f_dim = self.feature_dim();
        let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
        let solved = solve_spd(&self.chol, &diff);
        let quad: f64 = diff.iter().zip(&solved).map(|(a, b)| a * b).sum();
        let log_det: f64 = (0..f_dim).map(|i| self.chol.get(i, i).ln()).sum::<f64>() * 2.0;
        -0.5 * (quad + log_det + f_dim as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    /// The likelihood ratio `p(x | absent) / p(x | present)`.
    pub fn likelihood_ratio(&self, x: &[f64]) -> f64 {
        (self.log_density(x, false) - self.log_density(x, true)).exp()
    }
}

/// Feedforward parameters of one unit, derived from its emission model so
/// that `exp(-w.x - b) = p(x | absent) / p(x | present)` holds identically:
/// `w = sigma^-1 (mu - nu)` and `b = (nu' sigma^-1 nu - mu' sigma^-1 mu) / 2`.
pub fn params_from_gaussian(model: &GaussianEmissionModel) -> (Vec<f64>, f64) {
    let diff: Vec<f64> = model.mu.iter().zip(&model.nu).map(|(m, n)| m - n).collect();
    let w = solve_spd(&model.chol, &diff);
    let sig_inv_nu = solve_spd(&model.chol, &model.nu);
    let sig_inv_mu = solve_spd(&model.chol, &model.mu);
    let nu_quad: f64 = model.nu.iter().zip(&sig_inv_nu).map(|(a, b)| a * b).sum();
    let mu_quad: f64 = model.mu.iter().zip(&sig_inv_mu).map(|(a, b)| a * b).sum();
    let b = 0.5 * (nu_quad - mu_quad);
    (w, b)
}

/// Lower-triangular Cholesky factor of an SPD matrix.
fn cholesky(sigma: &Tensor2) -> Result<Tensor2> {
    let n = sigma.rows();
    let mut l = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = sigma.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(UbruError::NotPositiveDefinite(format!(
                        "pivot {sum} at row {i}"
                    )));
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solve `sigma y = rhs` given the Cholesky factor of sigma.
fn solve_spd(chol: &Tensor2, rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut sum = rhs[i];
        for k in 0..i {
            sum -= chol.get(i, k) * z[k];
        }
        z[i] = sum / chol.get(i, i);
    }
    let mut y = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = z[i];
        for k in i + 1..n {
            sum -= chol.get(k, i) * y[k];
        }
        y[i] = sum / chol.get(i, i);
    }
    y
}

// ---------------------------------------------------------------------------
// Two-state chain
// ---------------------------------------------------------------------------

/// Initial and transition probabilities of a single two-state chain.
#[derive(Debug, Clone, Copy)]
pub struct ChainSpec {
    pub rho0: Prob,
    pub tau11: Prob,
    pub tau01: Prob,
}

impl ChainSpec {
    pub fn new(rho0: f64, tau11: f64, tau01: f64) -> Result<Self> {
        Ok(ChainSpec {
            rho0: Prob::new(rho0)?,
            tau11: Prob::new(tau11)?,
            tau01: Prob::new(tau01)?,
        })
    }

    /// `P(s_t = 1 | s_{t-1} = prev)`.
    #[inline]
    fn present_prob(&self, prev_present: bool) -> f64 {
        if prev_present {
            self.tau11.value()
        } else {
            self.tau01.value()
        }
    }

    /// Marginal probabilities `m_1..m_T` with `m_0 = rho0` folded in.
    pub fn marginals(&self, t_len: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(t_len);
        let mut m = self.rho0.value();
        for _ in 0..t_len {
            m = self.tau11.value() * m + self.tau01.value() * (1.0 - m);
            out.push(m);
        }
        out
    }
}

/// Per-timestep emission likelihoods for both states.
#[derive(Debug, Clone)]
pub struct EmissionLikelihoods {
    b1: Vec<f64>,
    b2: Vec<f64>,
}

impl EmissionLikelihoods {
    pub fn new(b1: Vec<f64>, b2: Vec<f64>) -> Result<Self> {
        if b1.len() != b2.len() {
            return Err(UbruError::Dimension(format!(
                "b1 length {} != b2 length {}",
                b1.len(),
                b2.len()
            )));
        }
        if b1.iter().chain(&b2).any(|&v| !v.is_finite() || v <= 0.0) {
            return Err(UbruError::Domain(
                "emission likelihoods must be strictly positive and finite".into(),
            ));
        }
        Ok(EmissionLikelihoods { b1, b2 })
    }

    /// The ratio convention the unit itself sees: `b1 := 1`, `b2 := r_t`.
    /// Posteriors only depend on the ratio, so this loses nothing.
    pub fn from_ratios(r: &[f64]) -> Result<Self> {
        Self::new(vec![1.0; r.len()], r.to_vec())
    }

    pub fn len(&self) -> usize {
        self.b1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b1.is_empty()
    }
}

/// Which conditioning the posterior uses: observations up to t, or all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorMode {
    Filtered,
    Smoothed,
}

/// Exact posterior of `s_t = 1` by summation over all hidden sequences
/// `s_0..s_T` in `{0,1}^(T+1)`, including the virtual un-emitting state s_0.
///
/// Emissions follow the ratio convention (`1` when present, `r_t` when
/// absent). Returns a `T x 1` tensor. Refuses `T > 16`.
pub fn enumerate_posterior(chain: &ChainSpec, r: &[f64], mode: PosteriorMode) -> Result<Tensor2> {
    let t_len = r.len();
    if t_len == 0 {
        return Err(UbruError::Dimension("empty ratio sequence".into()));
    }
    if t_len > ENUMERATION_MAX_LEN {
        return Err(UbruError::SequenceTooLong {
            len: t_len,
            max: ENUMERATION_MAX_LEN,
        });
    }
    if r.iter().any(|&v| !v.is_finite() || v <= 0.0) {
        return Err(UbruError::Domain("ratios must be strictly positive".into()));
    }

    let mut out = Tensor2::zeros(t_len, 1);
    match mode {
        PosteriorMode::Smoothed => {
            // One enumeration over full sequences; accumulate per-t marginals.
            let mut total = 0.0;
            let mut present_mass = vec![0.0; t_len];
            for mask in 0u32..(1u32 << (t_len + 1)) {
                let w = sequence_weight(chain, r, mask, t_len);
                total += w;
                for (t, mass) in present_mass.iter_mut().enumerate() {
                    if mask >> (t + 1) & 1 == 1 {
                        *mass += w;
                    }
                }
            }
            for t in 0..t_len {
                out.set(t, 0, present_mass[t] / total);
            }
        }
        PosteriorMode::Filtered => {
            // Independent enumeration of s_0..s_t for every t.
            for t in 1..=t_len {
                let mut total = 0.0;
                let mut present_mass = 0.0;
                for mask in 0u32..(1u32 << (t + 1)) {
                    let w = sequence_weight(chain, r, mask, t);
                    total += w;
                    if mask >> t & 1 == 1 {
                        present_mass += w;
                    }
                }
                out.set(t - 1, 0, present_mass / total);
            }
        }
    }
    Ok(out)
}

/// Joint weight of the hidden prefix `s_0..s_k` encoded in `mask` (bit j is
/// s_j), with emissions attached to steps 1..k.
fn sequence_weight(chain: &ChainSpec, r: &[f64], mask: u32, k: usize) -> f64 {
    let mut w = if mask & 1 == 1 {
        chain.rho0.value()
    } else {
        chain.rho0.complement()
    };
    for j in 1..=k {
        let prev = mask >> (j - 1) & 1 == 1;
        let cur = mask >> j & 1 == 1;
        let p1 = chain.present_prob(prev);
        w *= if cur { p1 } else { 1.0 - p1 };
        if !cur {
            w *= r[j - 1];
        }
    }
    w
}

/// Classical rescaled forward-backward recursion for the two-state chain.
///
/// Returns `(filtered, smoothed)` where `filtered[t] = P(s_t = 1 | x_1..x_t)`
/// and `smoothed[t] = P(s_t = 1 | x_1..x_T)`. The initial distribution folds
/// the virtual state through one transition, matching the enumeration oracle.
pub fn scaled_forward_backward(
    chain: &ChainSpec,
    emis: &EmissionLikelihoods,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t_len = emis.len();
    if t_len == 0 {
        return Err(UbruError::Dimension("empty emission sequence".into()));
    }

    // Row-stochastic transition matrix over [present, absent].
    let a = [
        [chain.tau11.value(), chain.tau11.complement()],
        [chain.tau01.value(), chain.tau01.complement()],
    ];
    let m1 =
        chain.tau11.value() * chain.rho0.value() + chain.tau01.value() * chain.rho0.complement();
    let pi = [m1, 1.0 - m1];

    let mut alpha = vec![[0.0f64; 2]; t_len];
    let mut scale = vec![0.0f64; t_len];
    for t in 0..t_len {
        let b = [emis.b1[t], emis.b2[t]];
        let mut unnorm = [0.0f64; 2];
        for j in 0..2 {
            let pred = if t == 0 {
                pi[j]
            } else {
                alpha[t - 1][0] * a[0][j] + alpha[t - 1][1] * a[1][j]
            };
            unnorm[j] = pred * b[j];
        }
        let c = unnorm[0] + unnorm[1];
        if !c.is_finite() || c <= 0.0 {
            return Err(UbruError::DegenerateEvidence { timestep: t + 1 });
        }
        scale[t] = c;
        alpha[t] = [unnorm[0] / c, unnorm[1] / c];
    }
    let filtered: Vec<f64> = alpha.iter().map(|row| row[0]).collect();

    let mut beta = vec![[1.0f64; 2]; t_len];
    for t in (0..t_len - 1).rev() {
        let b_next = [emis.b1[t + 1], emis.b2[t + 1]];
        for i in 0..2 {
            let mut acc = 0.0;
            for j in 0..2 {
                acc += a[i][j] * b_next[j] * beta[t + 1][j];
            }
            beta[t][i] = acc / scale[t + 1];
        }
    }
    let smoothed: Vec<f64> = (0..t_len)
        .map(|t| {
            let g1 = alpha[t][0] * beta[t][0];
            let g2 = alpha[t][1] * beta[t][1];
            g1 / (g1 + g2)
        })
        .collect();

    Ok((filtered, smoothed))
}
