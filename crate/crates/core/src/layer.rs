//! The recurrent unit itself: trainable parameters, the forward filter, two
//! equivalent backward smoothers, and layer composition (bidirectional mode,
//! stacking with a log-softmax head).
//!
//! Per hidden unit, the recurrence tracks an independent two-state chain.
//! The forward pass runs in the logit domain,
//!
//! ```text
//! p_t = tau11 * alpha_{t-1} + tau01 * (1 - alpha_{t-1}),   alpha_0 = rho0
//! alpha_t = sigmoid(s_t + logit(p_t)),                     s_t = W'x_t + b
//! ```
//!
//! so no likelihood ratio is ever exponentiated there. The two smoothers
//! produce the same posteriors: the direct one propagates gamma backward
//! through flipped transitions without touching the emissions,
//!
//! ```text
//! gamma_t = alpha_t * ( tau11 * gamma_{t+1} / p_{t+1}
//!                     + (1 - tau11) * (1 - gamma_{t+1}) / (1 - p_{t+1}) )
//! ```
//!
//! while the beta form materializes r_{t+1} = exp(-s_{t+1}) and combines
//! `gamma_t = alpha_t * beta_t`. The beta form is kept for the equivalence
//! checks and diagnostics; smoothing defaults to the direct recursion.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UbruError};
use crate::numerics::{affine_scores, logit, sigmoid, Prob, Tensor2};

/// Score magnitudes are clamped to this before `exp(-s)` inside the beta
/// recursion; events are counted on the returned `BetaPair`.
pub const SCORE_EXP_CLAMP: f64 = 700.0;

// ---------------------------------------------------------------------------
// Parameters and state
// ---------------------------------------------------------------------------

/// All trainable tensors of one layer: feedforward weights `w` (`F x H`),
/// bias `b`, and the unconstrained logits of the transition and initial
/// probabilities. Probabilities are always derived through the sigmoid, so
/// gradient descent on the raw fields can never leave `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UbruParams {
    w: Tensor2,
    b: Vec<f64>,
    u_tau11: Vec<f64>,
    u_tau01: Vec<f64>,
    u_rho0: Vec<f64>,
}

impl UbruParams {
    pub fn new(
        w: Tensor2,
        b: Vec<f64>,
        u_tau11: Vec<f64>,
        u_tau01: Vec<f64>,
        u_rho0: Vec<f64>,
    ) -> Result<Self> {
        let h = w.cols();
        for (name, v) in [
            ("b", &b),
            ("u_tau11", &u_tau11),
            ("u_tau01", &u_tau01),
            ("u_rho0", &u_rho0),
        ] {
            if v.len() != h {
                return Err(UbruError::Dimension(format!(
                    "{name} length {} != hidden dim {h}",
                    v.len()
                )));
            }
            if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
                return Err(UbruError::NonFinite(format!("{name} entry {bad}")));
            }
        }
        Ok(UbruParams {
            w,
            b,
            u_tau11,
            u_tau01,
            u_rho0,
        })
    }

    /// Zero weights and logits: every probability 0.5, observations ignored.
    pub fn uninformative(input_dim: usize, hidden_dim: usize) -> Self {
        UbruParams {
            w: Tensor2::zeros(input_dim, hidden_dim),
            b: vec![0.0; hidden_dim],
            u_tau11: vec![0.0; hidden_dim],
            u_tau01: vec![0.0; hidden_dim],
            u_rho0: vec![0.0; hidden_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn w(&self) -> &Tensor2 {
        &self.w
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn u_tau11(&self) -> &[f64] {
        &self.u_tau11
    }

    pub fn u_tau01(&self) -> &[f64] {
        &self.u_tau01
    }

    pub fn u_rho0(&self) -> &[f64] {
        &self.u_rho0
    }

    pub fn tau11(&self) -> Vec<Prob> {
        self.u_tau11.iter().map(|&u| sigmoid(u)).collect()
    }

    pub fn tau01(&self) -> Vec<Prob> {
        self.u_tau01.iter().map(|&u| sigmoid(u)).collect()
    }

    pub fn rho0(&self) -> Vec<Prob> {
        self.u_rho0.iter().map(|&u| sigmoid(u)).collect()
    }

    /// Mutable views for the optimizer; order is (w, b, u_tau11, u_tau01, u_rho0).
    pub(crate) fn fields_mut(
        &mut self,
    ) -> (&mut Tensor2, &mut [f64], &mut [f64], &mut [f64], &mut [f64]) {
        (
            &mut self.w,
            &mut self.b,
            &mut self.u_tau11,
            &mut self.u_tau01,
            &mut self.u_rho0,
        )
    }
}

/// Everything the forward filter computes, kept per timestep so the backward
/// smoothers and the adjoint sweeps can replay it: scores `s_t`, priors
/// `p_t`, posteriors `alpha_t` (all `T x H`), and the virtual `alpha_0`.
#[derive(Debug, Clone)]
pub struct FilterState {
    scores: Tensor2,
    priors: Tensor2,
    alphas: Tensor2,
    alpha0: Vec<f64>,
}

impl FilterState {
    pub fn seq_len(&self) -> usize {
        self.alphas.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.alphas.cols()
    }

    pub fn scores(&self) -> &Tensor2 {
        &self.scores
    }

    pub fn priors(&self) -> &Tensor2 {
        &self.priors
    }

    pub fn alphas(&self) -> &Tensor2 {
        &self.alphas
    }

    pub fn alpha0(&self) -> &[f64] {
        &self.alpha0
    }
}

/// The smoothed posterior sequence `gamma` (`T x H`), the layer's output.
#[derive(Debug, Clone)]
pub struct SmoothedPosteriors {
    gammas: Tensor2,
}

impl SmoothedPosteriors {
    pub fn gammas(&self) -> &Tensor2 {
        &self.gammas
    }

    pub fn into_gammas(self) -> Tensor2 {
        self.gammas
    }

    pub(crate) fn from_alphas(fs: &FilterState) -> Self {
        SmoothedPosteriors {
            gammas: fs.alphas.clone(),
        }
    }
}

/// The beta-form backward variables, with `exp_clamps` counting how many
/// scores hit the `SCORE_EXP_CLAMP` guard before exponentiation.
#[derive(Debug, Clone)]
pub struct BetaPair {
    betas: Tensor2,
    betas_bar: Tensor2,
    exp_clamps: usize,
}

impl BetaPair {
    pub fn betas(&self) -> &Tensor2 {
        &self.betas
    }

    pub fn betas_bar(&self) -> &Tensor2 {
        &self.betas_bar
    }

    pub fn exp_clamps(&self) -> usize {
        self.exp_clamps
    }
}

/// Which smoother runs after the forward filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackwardMode {
    /// Forward only: the output is the filtered posterior.
    None,
    /// Direct gamma recursion (default: no emission terms needed).
    Kalman,
    /// Beta recursion; verification and diagnostics only.
    Hmm,
}

impl fmt::Display for BackwardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BackwardMode::None => "none",
            BackwardMode::Kalman => "kalman",
            BackwardMode::Hmm => "hmm",
        };
        f.write_str(s)
    }
}

impl FromStr for BackwardMode {
    type Err = UbruError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BackwardMode::None),
            "kalman" => Ok(BackwardMode::Kalman),
            "hmm" => Ok(BackwardMode::Hmm),
            other => Err(UbruError::Domain(format!(
                "unknown backward mode {other:?} (expected none|kalman|hmm)"
            ))),
        }
    }
}

/// Shape and mode of one layer in a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub bidirectional: bool,
    pub backward_mode: BackwardMode,
}

impl LayerConfig {
    pub fn output_dim(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden_dim
        } else {
            self.hidden_dim
        }
    }
}

// ---------------------------------------------------------------------------
// Forward filter
// ---------------------------------------------------------------------------

/// Run the filter over `x` (`F x T`): for t = 1..T, predict the prior from
/// the previous posterior and fold in the score through the sigmoid. All
/// intermediates are stored.
pub fn forward_filter(params: &UbruParams, x: &Tensor2) -> Result<FilterState> {
    if x.rows() != params.input_dim() {
        return Err(UbruError::Dimension(format!(
            "input has {} feature rows, layer expects {}",
            x.rows(),
            params.input_dim()
        )));
    }
    let t_len = x.cols();
    if t_len == 0 {
        return Err(UbruError::Dimension("sequence length must be >= 1".into()));
    }
    if !x.is_finite() {
        return Err(UbruError::NonFinite("input sequence".into()));
    }

    let h = params.hidden_dim();
    let scores = affine_scores(&params.w, &params.b, x)?;
    let tau11: Vec<f64> = params.u_tau11.iter().map(|&u| sigmoid(u).value()).collect();
    let tau01: Vec<f64> = params.u_tau01.iter().map(|&u| sigmoid(u).value()).collect();
    let alpha0: Vec<f64> = params.u_rho0.iter().map(|&u| sigmoid(u).value()).collect();

    let mut priors = Tensor2::zeros(t_len, h);
    let mut alphas = Tensor2::zeros(t_len, h);
    let mut prev = alpha0.clone();
    for t in 0..t_len {
        for i in 0..h {
            let p = Prob::clamped(tau11[i] * prev[i] + tau01[i] * (1.0 - prev[i]));
            let a = sigmoid(scores.get(t, i) + logit(p));
            priors.set(t, i, p.value());
            alphas.set(t, i, a.value());
        }
        prev.copy_from_slice(alphas.row(t));
    }

    Ok(FilterState {
        scores,
        priors,
        alphas,
        alpha0,
    })
}

// ---------------------------------------------------------------------------
// Backward smoothers
// ---------------------------------------------------------------------------

/// Direct backward recursion: `gamma_T = alpha_T`, then gamma propagates
/// backward through the flipped transitions. No emission terms appear.
pub fn backward_kalman(params: &UbruParams, fs: &FilterState) -> Result<SmoothedPosteriors> {
    check_state(params, fs)?;
    let (t_len, h) = (fs.seq_len(), fs.hidden_dim());
    let tau11: Vec<f64> = params.u_tau11.iter().map(|&u| sigmoid(u).value()).collect();

    let mut gammas = Tensor2::zeros(t_len, h);
    gammas
        .row_mut(t_len - 1)
        .copy_from_slice(fs.alphas.row(t_len - 1));
    for t in (0..t_len - 1).rev() {
        for i in 0..h {
            let g_next = gammas.get(t + 1, i);
            let p_next = fs.priors.get(t + 1, i);
            let tau = tau11[i];
            let bracket = tau * g_next / p_next + (1.0 - tau) * (1.0 - g_next) / (1.0 - p_next);
            let g = Prob::clamped(fs.alphas.get(t, i) * bracket);
            gammas.set(t, i, g.value());
        }
    }
    Ok(SmoothedPosteriors { gammas })
}

/// Beta-form backward recursion. Equivalent to [`backward_kalman`] (the
/// equivalence is part of the verification suites); needs the likelihood
/// ratios `r_{t+1} = exp(-s_{t+1})`, with the exponent guard described on
/// [`SCORE_EXP_CLAMP`].
pub fn backward_hmm(
    params: &UbruParams,
    fs: &FilterState,
) -> Result<(BetaPair, SmoothedPosteriors)> {
    backward_hmm_impl(params, fs, 1.0)
}

/// Same recursion with the sign of the tau01 term flipped. This exists only
/// so the verification suites can prove they catch a planted defect; it is
/// reachable from `check --mutate-tau01` and from tests, nowhere else.
#[doc(hidden)]
pub fn backward_hmm_mutated(
    params: &UbruParams,
    fs: &FilterState,
) -> Result<(BetaPair, SmoothedPosteriors)> {
    backward_hmm_impl(params, fs, -1.0)
}

fn backward_hmm_impl(
    params: &UbruParams,
    fs: &FilterState,
    tau01_sign: f64,
) -> Result<(BetaPair, SmoothedPosteriors)> {
    check_state(params, fs)?;
    let (t_len, h) = (fs.seq_len(), fs.hidden_dim());
    let tau11: Vec<f64> = params.u_tau11.iter().map(|&u| sigmoid(u).value()).collect();
    let tau01: Vec<f64> = params.u_tau01.iter().map(|&u| sigmoid(u).value()).collect();

    let mut betas = Tensor2::zeros(t_len, h);
    let mut betas_bar = Tensor2::zeros(t_len, h);
    let mut gammas = Tensor2::zeros(t_len, h);
    let mut exp_clamps = 0usize;

    for i in 0..h {
        betas.set(t_len - 1, i, 1.0);
        betas_bar.set(t_len - 1, i, 1.0);
    }
    gammas
        .row_mut(t_len - 1)
        .copy_from_slice(fs.alphas.row(t_len - 1));

    for t in (0..t_len - 1).rev() {
        for i in 0..h {
            let s_next = fs.scores.get(t + 1, i);
            let s_safe = if s_next.abs() > SCORE_EXP_CLAMP {
                exp_clamps += 1;
                s_next.clamp(-SCORE_EXP_CLAMP, SCORE_EXP_CLAMP)
            } else {
                s_next
            };
            let r = (-s_safe).exp();
            let p_next = fs.priors.get(t + 1, i);
            let denom = p_next + r * (1.0 - p_next);
            let b_next = betas.get(t + 1, i);
            let bb_next = betas_bar.get(t + 1, i);
            let t11 = tau11[i];
            let t01 = tau01_sign * tau01[i];
            let beta = (t11 * b_next + r * (1.0 - t11) * bb_next) / denom;
            let beta_bar = (t01 * b_next + r * (1.0 - t01) * bb_next) / denom;
            betas.set(t, i, beta);
            betas_bar.set(t, i, beta_bar);
            let g = Prob::clamped(fs.alphas.get(t, i) * beta);
            gammas.set(t, i, g.value());
        }
    }

    Ok((
        BetaPair {
            betas,
            betas_bar,
            exp_clamps,
        },
        SmoothedPosteriors { gammas },
    ))
}

fn check_state(params: &UbruParams, fs: &FilterState) -> Result<()> {
    if fs.hidden_dim() != params.hidden_dim() {
        return Err(UbruError::Dimension(format!(
            "filter state has {} units, layer has {}",
            fs.hidden_dim(),
            params.hidden_dim()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Whole-sequence smoothing
// ---------------------------------------------------------------------------

/// Filter the whole sequence, then smooth according to `mode`. Scores are
/// computed for all timesteps up front (inside the filter); with
/// `BackwardMode::None` the filtered posteriors are returned as the output.
pub fn smooth_sequence(
    params: &UbruParams,
    x: &Tensor2,
    mode: BackwardMode,
) -> Result<SmoothedPosteriors> {
    let fs = forward_filter(params, x)?;
    match mode {
        BackwardMode::None => Ok(SmoothedPosteriors {
            gammas: fs.alphas.clone(),
        }),
        BackwardMode::Kalman => backward_kalman(params, &fs),
        BackwardMode::Hmm => backward_hmm(params, &fs).map(|(_, sp)| sp),
    }
}

/// Smooth in both time directions with fully independent parameter sets and
/// concatenate: columns `[0, H)` read the sequence forward, columns `[H, 2H)`
/// are the time-reversed smoothing of the reversed input.
pub fn bidirectional_smooth(
    fwd: &UbruParams,
    rev: &UbruParams,
    x: &Tensor2,
    mode: BackwardMode,
) -> Result<Tensor2> {
    if fwd.input_dim() != rev.input_dim() || fwd.hidden_dim() != rev.hidden_dim() {
        return Err(UbruError::Dimension(format!(
            "direction shapes differ: {}x{} vs {}x{}",
            fwd.input_dim(),
            fwd.hidden_dim(),
            rev.input_dim(),
            rev.hidden_dim()
        )));
    }
    let h = fwd.hidden_dim();
    let forward_out = smooth_sequence(fwd, x, mode)?.into_gammas();
    let reversed_out = smooth_sequence(rev, &x.reversed_cols(), mode)?.into_gammas();
    let t_len = forward_out.rows();

    let mut out = Tensor2::zeros(t_len, 2 * h);
    for t in 0..t_len {
        out.row_mut(t)[..h].copy_from_slice(forward_out.row(t));
        out.row_mut(t)[h..].copy_from_slice(reversed_out.row(t_len - 1 - t));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stacking
// ---------------------------------------------------------------------------

/// One layer of a stack: configuration plus one parameter set per direction.
#[derive(Debug, Clone)]
pub struct StackLayer {
    pub config: LayerConfig,
    pub fwd: UbruParams,
    pub rev: Option<UbruParams>,
}

impl StackLayer {
    pub fn validate(&self) -> Result<()> {
        if self.fwd.input_dim() != self.config.input_dim
            || self.fwd.hidden_dim() != self.config.hidden_dim
        {
            return Err(UbruError::Dimension(format!(
                "layer params {}x{} != config {}x{}",
                self.fwd.input_dim(),
                self.fwd.hidden_dim(),
                self.config.input_dim,
                self.config.hidden_dim
            )));
        }
        match (&self.rev, self.config.bidirectional) {
            (Some(rev), true) => {
                if rev.input_dim() != self.config.input_dim
                    || rev.hidden_dim() != self.config.hidden_dim
                {
                    return Err(UbruError::Dimension("reverse params shape".into()));
                }
                Ok(())
            }
            (None, false) => Ok(()),
            (Some(_), false) => Err(UbruError::Dimension(
                "reverse params supplied for a unidirectional layer".into(),
            )),
            (None, true) => Err(UbruError::Dimension(
                "bidirectional layer missing reverse params".into(),
            )),
        }
    }

    /// The layer's `T x output_dim` posterior block for input `x` (`F x T`).
    pub fn run(&self, x: &Tensor2) -> Result<Tensor2> {
        self.validate()?;
        if self.config.bidirectional {
            bidirectional_smooth(
                &self.fwd,
                self.rev.as_ref().expect("validated above"),
                x,
                self.config.backward_mode,
            )
        } else {
            Ok(smooth_sequence(&self.fwd, x, self.config.backward_mode)?.into_gammas())
        }
    }
}

/// Affine classification head over the last layer's posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineHead {
    weights: Tensor2,
    bias: Vec<f64>,
}

impl AffineHead {
    /// `weights` is `H_out x C`, `bias` has length `C`.
    pub fn new(weights: Tensor2, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(UbruError::Dimension(format!(
                "head bias length {} != classes {}",
                bias.len(),
                weights.cols()
            )));
        }
        Ok(AffineHead { weights, bias })
    }

    pub fn zeros(input_dim: usize, num_classes: usize) -> Self {
        AffineHead {
            weights: Tensor2::zeros(input_dim, num_classes),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Tensor2 {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub(crate) fn fields_mut(&mut self) -> (&mut Tensor2, &mut [f64]) {
        (&mut self.weights, &mut self.bias)
    }

    /// Per-timestep logits (`T x C`) for a `T x H_out` feature block.
    pub fn logits(&self, features: &Tensor2) -> Result<Tensor2> {
        if features.cols() != self.input_dim() {
            return Err(UbruError::Dimension(format!(
                "head expects {} features, got {}",
                self.input_dim(),
                features.cols()
            )));
        }
        let (t_len, c) = (features.rows(), self.num_classes());
        let mut out = Tensor2::zeros(t_len, c);
        for t in 0..t_len {
            let row = out.row_mut(t);
            row.copy_from_slice(&self.bias);
            for h in 0..self.input_dim() {
                let v = features.get(t, h);
                let w_row = self.weights.row(h);
                for k in 0..c {
                    row[k] += v * w_row[k];
                }
            }
        }
        Ok(out)
    }
}

/// Normalize each row into log-probabilities in place.
pub fn log_softmax_rows(logits: &mut Tensor2) {
    for t in 0..logits.rows() {
        let row = logits.row_mut(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row {
            *v -= lse;
        }
    }
}

/// Run a stack of layers over `x` (`F x T`), returning the last layer's
/// posterior block (`T x H_out`). Each layer consumes the previous layer's
/// posteriors.
pub fn stack_features(layers: &[StackLayer], x: &Tensor2) -> Result<Tensor2> {
    if layers.is_empty() {
        return Err(UbruError::Dimension("empty layer stack".into()));
    }
    let mut input = x.clone();
    let mut out = Tensor2::zeros(0, 0);
    for (idx, layer) in layers.iter().enumerate() {
        if input.rows() != layer.config.input_dim {
            return Err(UbruError::Dimension(format!(
                "layer {idx} expects {} inputs, got {}",
                layer.config.input_dim,
                input.rows()
            )));
        }
        out = layer.run(&input)?;
        input = out.transpose();
    }
    Ok(out)
}

/// Layers plus the affine head and a final row-wise log-softmax: per-
/// timestep log-probabilities (`T x C`).
pub fn stack_forward(layers: &[StackLayer], head: &AffineHead, x: &Tensor2) -> Result<Tensor2> {
    let features = stack_features(layers, x)?;
    let mut logits = head.logits(&features)?;
    log_softmax_rows(&mut logits);
    Ok(logits)
}
