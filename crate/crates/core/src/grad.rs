//! Exact reverse-mode gradients of a scalar loss through the filter and the
//! direct backward smoother, for every trainable tensor, plus the central
//! finite-difference oracle they are verified against.
//!
//! The computation graph is a fixed two-sweep chain, so the adjoints are
//! hand-coded rather than taped: the reverse sweep first runs the adjoint of
//! the smoothing recursion from t = 1 up to t = T, then the adjoint of the
//! filter from t = T back to t = 1, accumulating into the parameter
//! gradients. Memory stays at O(T*H) and every step is auditable against
//! the forward formulas.

use crate::error::{Result, UbruError};
use crate::layer::{
    backward_kalman, forward_filter, BackwardMode, FilterState, SmoothedPosteriors, UbruParams,
};
use crate::numerics::{sigmoid, Tensor2};

/// Per-parameter gradients, shaped exactly like [`UbruParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    dw: Tensor2,
    db: Vec<f64>,
    du_tau11: Vec<f64>,
    du_tau01: Vec<f64>,
    du_rho0: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        GradientBundle {
            dw: Tensor2::zeros(input_dim, hidden_dim),
            db: vec![0.0; hidden_dim],
            du_tau11: vec![0.0; hidden_dim],
            du_tau01: vec![0.0; hidden_dim],
            du_rho0: vec![0.0; hidden_dim],
        }
    }

    pub fn zeros_like(params: &UbruParams) -> Self {
        Self::zeros(params.input_dim(), params.hidden_dim())
    }

    pub fn dw(&self) -> &Tensor2 {
        &self.dw
    }

    pub fn db(&self) -> &[f64] {
        &self.db
    }

    pub fn du_tau11(&self) -> &[f64] {
        &self.du_tau11
    }

    pub fn du_tau01(&self) -> &[f64] {
        &self.du_tau01
    }

    pub fn du_rho0(&self) -> &[f64] {
        &self.du_rho0
    }

    /// `self += other * scale`, for batch accumulation in a fixed order.
    pub fn accumulate(&mut self, other: &GradientBundle, scale: f64) {
        for (a, b) in self.dw.data_mut().iter_mut().zip(other.dw.data()) {
            *a += b * scale;
        }
        for (dst, src) in [
            (&mut self.db, &other.db),
            (&mut self.du_tau11, &other.du_tau11),
            (&mut self.du_tau01, &other.du_tau01),
            (&mut self.du_rho0, &other.du_rho0),
        ] {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b * scale;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.dw.data_mut() {
            *v *= s;
        }
        for field in [
            &mut self.db,
            &mut self.du_tau11,
            &mut self.du_tau01,
            &mut self.du_rho0,
        ] {
            for v in field {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dw.is_finite()
            && [&self.db, &self.du_tau11, &self.du_tau01, &self.du_rho0]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Total number of scalar components (same as the parameter count).
    pub fn len(&self) -> usize {
        self.dw.data().len() + 4 * self.db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat read access in slot order (w row-major, b, u_tau11, u_tau01, u_rho0).
    pub fn component(&self, slot: usize) -> f64 {
        let nw = self.dw.data().len();
        if slot < nw {
            return self.dw.data()[slot];
        }
        let k = slot - nw;
        let h = self.db.len();
        match k / h {
            0 => self.db[k % h],
            1 => self.du_tau11[k % h],
            2 => self.du_tau01[k % h],
            _ => self.du_rho0[k % h],
        }
    }

    fn set_component(&mut self, slot: usize, value: f64) {
        let nw = self.dw.data().len();
        if slot < nw {
            self.dw.data_mut()[slot] = value;
            return;
        }
        let k = slot - nw;
        let h = self.db.len();
        match k / h {
            0 => self.db[k % h] = value,
            1 => self.du_tau11[k % h] = value,
            2 => self.du_tau01[k % h] = value,
            _ => self.du_rho0[k % h] = value,
        }
    }
}

/// Forward quantities and adjoint buffers of one reverse-mode call.
#[derive(Debug, Clone)]
pub struct Workspace {
    filter: FilterState,
    smoothed: SmoothedPosteriors,
    gamma_adj: Tensor2,
    alpha_adj: Tensor2,
    prior_adj: Tensor2,
    score_adj: Tensor2,
    input_adj: Tensor2,
}

impl Workspace {
    pub fn filter(&self) -> &FilterState {
        &self.filter
    }

    pub fn smoothed(&self) -> &SmoothedPosteriors {
        &self.smoothed
    }

    pub fn gamma_adj(&self) -> &Tensor2 {
        &self.gamma_adj
    }

    pub fn alpha_adj(&self) -> &Tensor2 {
        &self.alpha_adj
    }

    pub fn prior_adj(&self) -> &Tensor2 {
        &self.prior_adj
    }

    pub fn score_adj(&self) -> &Tensor2 {
        &self.score_adj
    }

    /// `dL/dX` (`F x T`), for chaining through stacked layers.
    pub fn input_adj(&self) -> &Tensor2 {
        &self.input_adj
    }
}

/// Number of scalar parameters of a layer.
pub fn param_count(params: &UbruParams) -> usize {
    params.input_dim() * params.hidden_dim() + 4 * params.hidden_dim()
}

/// A copy of `params` with one scalar slot shifted by `delta`.
fn perturbed(params: &UbruParams, slot: usize, delta: f64) -> UbruParams {
    let mut p = params.clone();
    let (w, b, u11, u01, ur) = p.fields_mut();
    let nw = w.rows() * w.cols();
    if slot < nw {
        w.data_mut()[slot] += delta;
    } else {
        let k = slot - nw;
        let h = b.len();
        match k / h {
            0 => b[k % h] += delta,
            1 => u11[k % h] += delta,
            2 => u01[k % h] += delta,
            _ => ur[k % h] += delta,
        }
    }
    p
}

/// Gradients of `sum_{t,i} dl_dgamma[t][i] * gamma[t][i]`'s generating loss:
/// given the loss gradient with respect to the layer output, produce the
/// gradient with respect to every parameter.
pub fn backprop(
    params: &UbruParams,
    x: &Tensor2,
    mode: BackwardMode,
    dl_dgamma: &Tensor2,
) -> Result<GradientBundle> {
    backprop_with_workspace(params, x, mode, dl_dgamma).map(|(g, _)| g)
}

/// As [`backprop`] but also returns the [`Workspace`] with the stored
/// forward quantities, all adjoint buffers, and the input gradient.
pub fn backprop_with_workspace(
    params: &UbruParams,
    x: &Tensor2,
    mode: BackwardMode,
    dl_dgamma: &Tensor2,
) -> Result<(GradientBundle, Workspace)> {
    if mode == BackwardMode::Hmm {
        return Err(UbruError::UnsupportedMode(
            "gradients are defined for modes none and kalman; the beta recursion is inference-only"
                .into(),
        ));
    }
    let filter = forward_filter(params, x)?;
    let (t_len, h) = (filter.seq_len(), filter.hidden_dim());
    if dl_dgamma.rows() != t_len || dl_dgamma.cols() != h {
        return Err(UbruError::Dimension(format!(
            "loss gradient is {}x{}, expected {t_len}x{h}",
            dl_dgamma.rows(),
            dl_dgamma.cols()
        )));
    }
    if !dl_dgamma.is_finite() {
        return Err(UbruError::NonFinite("loss gradient".into()));
    }

    let smoothed = match mode {
        BackwardMode::None => SmoothedPosteriors::from_alphas(&filter),
        BackwardMode::Kalman => backward_kalman(params, &filter)?,
        BackwardMode::Hmm => unreachable!("rejected above"),
    };

    let tau11: Vec<f64> = params
        .u_tau11()
        .iter()
        .map(|&u| sigmoid(u).value())
        .collect();
    let tau01: Vec<f64> = params
        .u_tau01()
        .iter()
        .map(|&u| sigmoid(u).value())
        .collect();

    let mut gamma_adj = dl_dgamma.clone();
    let mut alpha_adj = Tensor2::zeros(t_len, h);
    let mut prior_adj = Tensor2::zeros(t_len, h);
    let mut tau11_bar = vec![0.0; h];
    let mut tau01_bar = vec![0.0; h];

    match mode {
        BackwardMode::None => {
            // gamma is an alias of alpha.
            alpha_adj = gamma_adj.clone();
        }
        BackwardMode::Kalman => {
            // Adjoint of the smoothing recursion, in reverse order of the
            // primal sweep: the primal fills gamma from t = T-1 down to 1,
            // so its adjoint walks t = 1 up to T-1, after which each
            // gamma_adj row is total when consumed.
            let gammas = smoothed.gammas();
            for t in 0..t_len.saturating_sub(1) {
                for i in 0..h {
                    let gbar = gamma_adj.get(t, i);
                    if gbar == 0.0 {
                        continue;
                    }
                    let a = filter.alphas().get(t, i);
                    let g_next = gammas.get(t + 1, i);
                    let p_next = filter.priors().get(t + 1, i);
                    let tau = tau11[i];
                    let pos = tau / p_next;
                    let neg = (1.0 - tau) / (1.0 - p_next);
                    let bracket = pos * g_next + neg * (1.0 - g_next);

                    alpha_adj.set(t, i, alpha_adj.get(t, i) + gbar * bracket);
                    gamma_adj.set(t + 1, i, gamma_adj.get(t + 1, i) + gbar * a * (pos - neg));
                    prior_adj.set(
                        t + 1,
                        i,
                        prior_adj.get(t + 1, i)
                            + gbar
                                * a
                                * (-tau * g_next / (p_next * p_next)
                                    + (1.0 - tau) * (1.0 - g_next)
                                        / ((1.0 - p_next) * (1.0 - p_next))),
                    );
                    tau11_bar[i] += gbar * a * (g_next / p_next - (1.0 - g_next) / (1.0 - p_next));
                }
            }
            // Base case gamma_T = alpha_T.
            for i in 0..h {
                let last = t_len - 1;
                alpha_adj.set(last, i, alpha_adj.get(last, i) + gamma_adj.get(last, i));
            }
        }
        BackwardMode::Hmm => unreachable!(),
    }

    // Adjoint of the filter, t = T down to 1. Each alpha_adj row is total
    // here: later rows only feed earlier ones through the prior.
    let mut score_adj = Tensor2::zeros(t_len, h);
    let mut alpha0_bar = vec![0.0; h];
    for t in (0..t_len).rev() {
        for i in 0..h {
            let a = filter.alphas().get(t, i);
            let p = filter.priors().get(t, i);
            let zbar = alpha_adj.get(t, i) * a * (1.0 - a);
            score_adj.set(t, i, zbar);
            let pbar = prior_adj.get(t, i) + zbar / (p * (1.0 - p));

            let prev = if t == 0 {
                filter.alpha0()[i]
            } else {
                filter.alphas().get(t - 1, i)
            };
            tau11_bar[i] += pbar * prev;
            tau01_bar[i] += pbar * (1.0 - prev);
            let carry = pbar * (tau11[i] - tau01[i]);
            if t == 0 {
                alpha0_bar[i] += carry;
            } else {
                alpha_adj.set(t - 1, i, alpha_adj.get(t - 1, i) + carry);
            }
        }
    }

    // Scores into W, b, X; probability chains through their sigmoids.
    let mut grad = GradientBundle::zeros_like(params);
    let mut input_adj = Tensor2::zeros(x.rows(), x.cols());
    for t in 0..t_len {
        for i in 0..h {
            let sbar = score_adj.get(t, i);
            if sbar == 0.0 {
                continue;
            }
            grad.db[i] += sbar;
            for f in 0..x.rows() {
                let d = grad.dw.get(f, i) + sbar * x.get(f, t);
                grad.dw.set(f, i, d);
                input_adj.set(f, t, input_adj.get(f, t) + sbar * params.w().get(f, i));
            }
        }
    }
    let rho0: Vec<f64> = params
        .u_rho0()
        .iter()
        .map(|&u| sigmoid(u).value())
        .collect();
    for i in 0..h {
        grad.du_tau11[i] = tau11_bar[i] * tau11[i] * (1.0 - tau11[i]);
        grad.du_tau01[i] = tau01_bar[i] * tau01[i] * (1.0 - tau01[i]);
        grad.du_rho0[i] = alpha0_bar[i] * rho0[i] * (1.0 - rho0[i]);
    }

    let ws = Workspace {
        filter,
        smoothed,
        gamma_adj,
        alpha_adj,
        prior_adj,
        score_adj,
        input_adj,
    };
    Ok((grad, ws))
}

/// Central finite differences of an arbitrary scalar loss over every
/// parameter component: `(L(theta + h) - L(theta - h)) / 2h`.
pub fn finite_diff_grad<F>(
    params: &UbruParams,
    x: &Tensor2,
    mode: BackwardMode,
    loss_fn: F,
    step: f64,
) -> Result<GradientBundle>
where
    F: Fn(&SmoothedPosteriors) -> f64,
{
    if !step.is_finite() || step <= 0.0 {
        return Err(UbruError::Domain(format!("step {step} must be positive")));
    }
    let mut grad = GradientBundle::zeros_like(params);
    for slot in 0..param_count(params) {
        let up = crate::layer::smooth_sequence(&perturbed(params, slot, step), x, mode)?;
        let down = crate::layer::smooth_sequence(&perturbed(params, slot, -step), x, mode)?;
        grad.set_component(slot, (loss_fn(&up) - loss_fn(&down)) / (2.0 * step));
    }
    Ok(grad)
}

/// `|a - b| <= abs_floor + rel_tol * max(|a|, |b|)` elementwise; returns the
/// worst violation margin (<= 0 means pass) and the offending slot.
pub fn max_grad_discrepancy(
    a: &GradientBundle,
    b: &GradientBundle,
    rel_tol: f64,
    abs_floor: f64,
) -> (f64, usize) {
    let mut worst = f64::NEG_INFINITY;
    let mut worst_slot = 0;
    for slot in 0..a.len() {
        let (x, y) = (a.component(slot), b.component(slot));
        let margin = (x - y).abs() - (abs_floor + rel_tol * x.abs().max(y.abs()));
        if margin > worst {
            worst = margin;
            worst_slot = slot;
        }
    }
    (worst, worst_slot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn random_params(rng: &mut StdRng, f_dim: usize, h_dim: usize) -> UbruParams {
        let w = Tensor2::from_vec(
            f_dim,
            h_dim,
            (0..f_dim * h_dim)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect(),
        )
        .unwrap();
        let logits = |rng: &mut StdRng| (0..h_dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        UbruParams::new(
            w,
            (0..h_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            logits(rng),
            logits(rng),
            logits(rng),
        )
        .unwrap()
    }

    fn random_input(rng: &mut StdRng, f_dim: usize, t_len: usize) -> Tensor2 {
        Tensor2::from_vec(
            f_dim,
            t_len,
            (0..f_dim * t_len)
                .map(|_| rng.sample(StandardNormal))
                .collect(),
        )
        .unwrap()
    }

    fn sum_of_squares(sp: &SmoothedPosteriors) -> f64 {
        sp.gammas().data().iter().map(|g| g * g).sum()
    }

    fn sum_of_squares_grad(sp: &SmoothedPosteriors) -> Tensor2 {
        let g = sp.gammas();
        let mut out = Tensor2::zeros(g.rows(), g.cols());
        for (dst, src) in out.data_mut().iter_mut().zip(g.data()) {
            *dst = 2.0 * src;
        }
        out
    }

    #[test]
    fn zero_loss_gradient_gives_zero_parameter_gradient() {
        let mut rng = StdRng::seed_from_u64(1);
        let params = random_params(&mut rng, 3, 2);
        let x = random_input(&mut rng, 3, 6);
        for mode in [BackwardMode::None, BackwardMode::Kalman] {
            let grad = backprop(&params, &x, mode, &Tensor2::zeros(6, 2)).unwrap();
            assert!(grad.dw().data().iter().all(|&v| v == 0.0));
            assert!(grad.db().iter().all(|&v| v == 0.0));
            assert!(grad.du_tau11().iter().all(|&v| v == 0.0));
            assert!(grad.du_tau01().iter().all(|&v| v == 0.0));
            assert!(grad.du_rho0().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_step_bias_gradient_is_sigmoid_derivative() {
        // T=1, mode none, L = gamma_1: dL/db = alpha_1 (1 - alpha_1).
        let mut rng = StdRng::seed_from_u64(2);
        let params = random_params(&mut rng, 1, 1);
        let x = random_input(&mut rng, 1, 1);
        let fs = forward_filter(&params, &x).unwrap();
        let a = fs.alphas().get(0, 0);
        let dl = Tensor2::from_vec(1, 1, vec![1.0]).unwrap();
        let grad = backprop(&params, &x, BackwardMode::None, &dl).unwrap();
        assert!((grad.db()[0] - a * (1.0 - a)).abs() < 1e-15);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(3);
        let (f_dim, h_dim, t_len) = (4, 3, 8);
        for mode in [BackwardMode::None, BackwardMode::Kalman] {
            let params = random_params(&mut rng, f_dim, h_dim);
            let x = random_input(&mut rng, f_dim, t_len);
            let sp = crate::layer::smooth_sequence(&params, &x, mode).unwrap();
            let dl = sum_of_squares_grad(&sp);
            let analytic = backprop(&params, &x, mode, &dl).unwrap();
            let numeric = finite_diff_grad(&params, &x, mode, sum_of_squares, 1e-5).unwrap();
            let (margin, slot) = max_grad_discrepancy(&analytic, &numeric, 1e-5, 1e-8);
            assert!(
                margin <= 0.0,
                "mode {mode}: slot {slot} off by margin {margin} (analytic {}, numeric {})",
                analytic.component(slot),
                numeric.component(slot)
            );
        }
    }

    #[test]
    fn quadratic_loss_on_bias_only_matches_sigmoid_chain() {
        // W = 0, T = 1, L = gamma^2: dL/db = 2 alpha * alpha(1-alpha).
        let params = UbruParams::new(
            Tensor2::zeros(1, 1),
            vec![0.7],
            vec![0.4],
            vec![-0.3],
            vec![0.2],
        )
        .unwrap();
        let x = Tensor2::from_vec(1, 1, vec![0.9]).unwrap();
        let fs = forward_filter(&params, &x).unwrap();
        let a = fs.alphas().get(0, 0);
        let numeric =
            finite_diff_grad(&params, &x, BackwardMode::None, sum_of_squares, 1e-6).unwrap();
        let analytic_db = 2.0 * a * a * (1.0 - a);
        assert!((numeric.db()[0] - analytic_db).abs() < 1e-9);
    }

    #[test]
    fn finite_difference_steps_are_consistent() {
        let mut rng = StdRng::seed_from_u64(4);
        let params = random_params(&mut rng, 2, 2);
        let x = random_input(&mut rng, 2, 5);
        let g5 = finite_diff_grad(&params, &x, BackwardMode::Kalman, sum_of_squares, 1e-5).unwrap();
        let g6 = finite_diff_grad(&params, &x, BackwardMode::Kalman, sum_of_squares, 1e-6).unwrap();
        let (margin, slot) = max_grad_discrepancy(&g5, &g6, 1e-3, 1e-8);
        assert!(margin <= 0.0, "slot {slot}: margin {margin}");
    }

    #[test]
    fn hmm_mode_gradients_are_rejected() {
        let params = UbruParams::uninformative(2, 2);
        let x = Tensor2::zeros(2, 3);
        let err = backprop(&params, &x, BackwardMode::Hmm, &Tensor2::zeros(3, 2));
        assert!(matches!(err, Err(UbruError::UnsupportedMode(_))));
    }

    #[test]
    fn filtering_gradients_ignore_future_observations() {
        // With mode none and loss touching only gamma_{1..k}, observations
        // after k contribute nothing: changing them leaves the whole bundle
        // bitwise identical.
        let mut rng = StdRng::seed_from_u64(5);
        let (f_dim, h_dim, t_len, k) = (3, 2, 9, 4);
        let params = random_params(&mut rng, f_dim, h_dim);
        let x1 = random_input(&mut rng, f_dim, t_len);
        let mut x2 = x1.clone();
        for t in k..t_len {
            for f in 0..f_dim {
                x2.set(f, t, rng.sample(StandardNormal));
            }
        }
        let mut dl = Tensor2::zeros(t_len, h_dim);
        for t in 0..k {
            for i in 0..h_dim {
                dl.set(t, i, rng.gen_range(-1.0..1.0));
            }
        }
        let g1 = backprop(&params, &x1, BackwardMode::None, &dl).unwrap();
        let g2 = backprop(&params, &x2, BackwardMode::None, &dl).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn gradients_are_deterministic() {
        let mut rng = StdRng::seed_from_u64(6);
        let params = random_params(&mut rng, 3, 3);
        let x = random_input(&mut rng, 3, 12);
        let sp = crate::layer::smooth_sequence(&params, &x, BackwardMode::Kalman).unwrap();
        let dl = sum_of_squares_grad(&sp);
        let g1 = backprop(&params, &x, BackwardMode::Kalman, &dl).unwrap();
        let g2 = backprop(&params, &x, BackwardMode::Kalman, &dl).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn workspace_exposes_input_gradient() {
        // dL/dX checked against finite differences on the input entries.
        let mut rng = StdRng::seed_from_u64(7);
        let (f_dim, h_dim, t_len) = (2, 2, 4);
        let params = random_params(&mut rng, f_dim, h_dim);
        let x = random_input(&mut rng, f_dim, t_len);
        let sp = crate::layer::smooth_sequence(&params, &x, BackwardMode::Kalman).unwrap();
        let dl = sum_of_squares_grad(&sp);
        let (_, ws) = backprop_with_workspace(&params, &x, BackwardMode::Kalman, &dl).unwrap();

        let h = 1e-6;
        for f in 0..f_dim {
            for t in 0..t_len {
                let mut up = x.clone();
                up.set(f, t, x.get(f, t) + h);
                let mut down = x.clone();
                down.set(f, t, x.get(f, t) - h);
                let lu = sum_of_squares(
                    &crate::layer::smooth_sequence(&params, &up, BackwardMode::Kalman).unwrap(),
                );
                let ld = sum_of_squares(
                    &crate::layer::smooth_sequence(&params, &down, BackwardMode::Kalman).unwrap(),
                );
                let numeric = (lu - ld) / (2.0 * h);
                let analytic = ws.input_adj().get(f, t);
                assert!(
                    (numeric - analytic).abs() < 1e-6 + 1e-5 * numeric.abs().max(analytic.abs()),
                    "f={f} t={t}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let params = UbruParams::uninformative(2, 2);
        let x = Tensor2::zeros(2, 3);
        assert!(backprop(&params, &x, BackwardMode::Kalman, &Tensor2::zeros(2, 2)).is_err());
        assert!(finite_diff_grad(&params, &x, BackwardMode::Kalman, |_| 0.0, 0.0).is_err());
        assert!(finite_diff_grad(&params, &x, BackwardMode::Kalman, |_| 0.0, -1e-5).is_err());
    }
}
