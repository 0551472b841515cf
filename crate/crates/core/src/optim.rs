//! Adam with global-norm gradient clipping, and a central finite-difference
//! gradient checker used by the verification tests.

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Adam optimizer state. Moment buffers are allocated lazily on the first
/// step so the struct can be built before the parameter set is final.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 clip applied to all gradients jointly before the update.
    pub clip_norm: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64, clip_norm: f64) -> AdamState<T> {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every parameter in the set. Gradients are first
/// jointly rescaled so their global norm does not exceed `clip_norm`, then
/// the bias-corrected update is applied in place. Every parameter must have
/// received a gradient accumulation since the last `zero()`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &GradStore<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for id in params.ids() {
        if !grads.touched(id) {
            return Err(Error::Contract(format!(
                "adam_step: parameter {} has no accumulated gradient",
                params.name(id)
            )));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|(_, v)| Tensor::zeros(v.shape())).collect();
        state.v = params.iter().map(|(_, v)| Tensor::zeros(v.shape())).collect();
    }
    state.step += 1;
    let norm = grads.global_norm().to_f64();
    if !norm.is_finite() {
        return Err(Error::Numeric("gradient norm is not finite".into()));
    }
    let clip_scale = if state.clip_norm > 0.0 && norm > state.clip_norm {
        state.clip_norm / norm
    } else {
        1.0
    };
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - state.beta1.powi(state.step as i32));
    let bc2 = T::from_f64(1.0 - state.beta2.powi(state.step as i32));
    let lr = T::from_f64(state.lr);
    let eps = T::from_f64(state.eps);
    let cs = T::from_f64(clip_scale);
    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let g = grads.grad(id);
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = params.value_mut(id);
        for ((pv, &gv0), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            let gv = gv0 * cs;
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain learning-rate override, used by the per-epoch decay schedules.
pub fn set_learning_rate<T: Scalar>(state: &mut AdamState<T>, lr: f64) {
    state.lr = lr;
}

/// Result of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over coordinates not flagged as unreliable.
    pub max_rel_err: f64,
    /// Coordinates (param name, flat index) where the two one-sided
    /// differences disagree, i.e. the loss is locally non-smooth there.
    pub unreliable: Vec<(String, usize)>,
    pub coords_checked: usize,
    /// Worst coordinate: (param name, flat index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compare analytic gradients against central finite differences.
///
/// `f` must be a deterministic function of the parameter values (dropout
/// off). `analytic` holds the already-computed gradients of `f` at the
/// current parameters. Each coordinate is perturbed by `±eps`; a coordinate
/// is flagged unreliable when the forward and backward one-sided
/// differences disagree by more than 10% of their scale, which catches
/// ties under hard max-like ops.
///
/// Per-coordinate relative error is `|a - n| / max(|a|, |n|, floor)`. The
/// floor keeps coordinates whose true gradient sits below the finite-
/// difference noise (about `|f| * 1e-16 / eps` in 64-bit) from reporting
/// meaningless ratios; `1e-5` suits full-loss checks at `eps = 1e-5`.
pub fn gradient_check<T: Scalar>(
    params: &mut ParamSet<T>,
    analytic: &GradStore<T>,
    eps: f64,
    floor: f64,
    mut f: impl FnMut(&ParamSet<T>) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut max_rel_err: f64 = 0.0;
    let mut unreliable = Vec::new();
    let mut coords = 0usize;
    let mut worst = None;
    let ids: Vec<_> = params.ids().collect();
    let f0 = f(params)?;
    for id in ids {
        let n = params.value(id).len();
        for k in 0..n {
            let orig = params.value(id).data()[k];
            params.value_mut(id).data_mut()[k] = orig + T::from_f64(eps);
            let fp = f(params)?;
            params.value_mut(id).data_mut()[k] = orig - T::from_f64(eps);
            let fm = f(params)?;
            params.value_mut(id).data_mut()[k] = orig;

            let mut num = (fp - fm) / (2.0 * eps);
            let fwd = (fp - f0) / eps;
            let bwd = (f0 - fm) / eps;
            let side_scale = fwd.abs().max(bwd.abs()).max(1e-6);
            let gap = (fwd - bwd).abs();
            if gap / side_scale > 0.1 && gap > 1e-7 {
                // Candidate kink. Smooth one-sided gaps scale with eps
                // (they measure eps * f''); a genuine slope discontinuity
                // does not shrink under a finer step.
                let fine = eps / 4.0;
                params.value_mut(id).data_mut()[k] = orig + T::from_f64(fine);
                let fp2 = f(params)?;
                params.value_mut(id).data_mut()[k] = orig - T::from_f64(fine);
                let fm2 = f(params)?;
                params.value_mut(id).data_mut()[k] = orig;
                let gap2 = ((fp2 - f0) / fine - (f0 - fm2) / fine).abs();
                if gap2 > 0.5 * gap {
                    unreliable.push((params.name(id).to_string(), k));
                    continue;
                }
                num = (fp2 - fm2) / (2.0 * fine);
            }
            let ana = analytic.grad(id).data()[k].to_f64();
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(floor);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((params.name(id).to_string(), k, ana, num));
            }
            coords += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, unreliable, coords_checked: coords, worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::params::{GradStore, ParamSet};

    #[test]
    fn zero_gradients_leave_fresh_params_unchanged() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", Tensor::from_vec(&[2], vec![0.5, -0.25]).unwrap());
        let before = ps.value(id).clone();
        let mut gs = GradStore::new(&ps);
        gs.accumulate(id, &Tensor::zeros(&[2]));
        let mut adam = AdamState::new(0.1, 5.0);
        adam_step(&mut ps, &gs, &mut adam).unwrap();
        assert_eq!(ps.value(id), &before);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::zeros(&[2]));
        let gs = GradStore::new(&ps);
        let mut adam = AdamState::new(0.1, 5.0);
        let err = adam_step(&mut ps, &gs, &mut adam).unwrap_err();
        assert!(matches!(err, crate::error::Error::Contract(_)));
    }

    #[test]
    fn first_step_matches_hand_evaluated_adam() {
        // g = 1, lr = 0.1: mhat = 1, vhat = 1, update = -0.1 / (1 + 1e-8)
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", Tensor::scalar(2.0));
        let mut gs = GradStore::new(&ps);
        gs.accumulate(id, &Tensor::scalar(1.0));
        let mut adam = AdamState::new(0.1, 0.0);
        adam_step(&mut ps, &gs, &mut adam).unwrap();
        let expect = 2.0 - 0.1 * 1.0 / (1.0_f64.sqrt() + 1e-8);
        assert!((ps.value(id).item() - expect).abs() < 1e-15);
    }

    #[test]
    fn clip_rescales_by_half_when_norm_doubles_limit() {
        // grads (6, 8) have norm 10; clip 5 halves them before the update.
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let mut gs = GradStore::new(&ps);
        gs.accumulate(id, &Tensor::from_vec(&[2], vec![6.0, 8.0]).unwrap());
        let mut adam = AdamState::new(0.001, 5.0);
        adam_step(&mut ps, &gs, &mut adam).unwrap();
        // effective grads are (3, 4); first step gives mhat = g, vhat = g^2
        let w = ps.value(id).data();
        assert!((w[0] + 0.001 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((w[1] + 0.001 * 4.0 / (4.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn gradient_check_quadratic_is_exact() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("theta", Tensor::from_vec(&[3], vec![0.3, -0.7, 1.1]).unwrap());
        let mut gs = GradStore::new(&ps);
        // loss = ||theta||^2, analytic grad = 2 theta
        {
            let mut g = Graph::eval(&ps);
            let th = g.param(id);
            let sq = g.mul(th, th).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap();
            g.flush_param_grads(&mut gs);
        }
        let report = gradient_check(&mut ps, &gs, 1e-5, 1e-6, |p| {
            Ok(p.value(id).squared_norm())
        })
        .unwrap();
        assert!(report.unreliable.is_empty());
        assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
    }

    #[test]
    fn gradient_check_flags_hard_max_tie() {
        // f = max(a, b) at a == b is non-differentiable; the checker should
        // flag both coordinates rather than reporting a bogus error.
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("pair", Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap());
        let mut gs = GradStore::new(&ps);
        gs.accumulate(id, &Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap());
        let report = gradient_check(&mut ps, &gs, 1e-4, 1e-6, |p| {
            let d = p.value(id).data();
            Ok(d[0].max(d[1]))
        })
        .unwrap();
        assert_eq!(report.unreliable.len(), 2);
    }
}
