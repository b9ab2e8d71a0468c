//! Adam and a finite-difference gradient checker.

use crate::error::{Error, Result};

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
///
/// Rejects non-finite gradients without touching `params` or `state` so a
/// diverged step can be reported and the last good state kept.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            expected: format!("{} parameters", params.len()),
            got: format!("{} grads / {} state", grads.len(), state.m.len()),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "adam_step gradient",
            index: i,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Compare an analytic gradient against central finite differences.
///
/// Returns the max over coordinates of
/// `|analytic - central| / max(1, |analytic|, |central|)`.
/// Non-finite function values are reported with the offending coordinate.
pub fn grad_check<F>(mut f: F, analytic: &[f64], point: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != point.len() {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            expected: format!("{} coordinates", point.len()),
            got: format!("{}", analytic.len()),
        });
    }
    if h <= 0.0 {
        return Err(Error::InvalidConfig(format!("grad_check step h = {h} must be > 0")));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check function value",
                index: i,
            });
        }
        let central = (fp - fm) / (2.0 * h);
        let denom = 1.0f64.max(analytic[i].abs()).max(central.abs());
        worst = worst.max((analytic[i] - central).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{mlp_backward, mlp_forward, mlp_forward_trace, Activation, MlpSpec};
    use crate::rng::Rng;
    use crate::tensor::DenseMatrix;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_magnitude_is_bias_corrected() {
        // Hand-computed: t=1, m_hat = g, v_hat = g^2, step = lr * g/(|g|+eps),
        // so a unit gradient moves the parameter by almost exactly lr.
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8, "{}", p[0]);
    }

    #[test]
    fn non_finite_gradient_rejected_state_untouched() {
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.5, 0.5], &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
        let (p0, st0) = (p.clone(), st.clone());
        let err = adam_step(&mut p, &[0.1, f64::NAN], &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
        assert_eq!(p, p0);
        assert_eq!(st, st0);
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut rng = Rng::new(99);
            let mut p = vec![0.0; 8];
            rng.fill_normal(&mut p);
            let mut st = AdamState::new(8);
            for _ in 0..50 {
                let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
                adam_step(&mut p, &g, &mut st, 0.05, 0.9, 0.999, 1e-8).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_exact_quadratic() {
        let point: Vec<f64> = vec![0.3, -1.2, 2.5, 0.0];
        let analytic: Vec<f64> = point.iter().map(|v| 2.0 * v).collect();
        let err = grad_check(
            |x| x.iter().map(|v| v * v).sum(),
            &analytic,
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn grad_check_constant_function_is_exact_zero() {
        let point = vec![1.0, 2.0];
        let err = grad_check(|_| 3.5, &[0.0, 0.0], &point, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_reports_non_finite_coordinate() {
        let point = vec![0.0, 0.0];
        let err = grad_check(
            |x| if x[1] > 0.0 { f64::NAN } else { 0.0 },
            &[0.0, 0.0],
            &point,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    /// Spec invariant: backprop matches central differences to < 1e-6
    /// across random small topologies and seeds.
    #[test]
    fn mlp_backward_matches_finite_differences() {
        for (seed, widths) in [
            (1u64, vec![3usize, 4, 2]),
            (2, vec![2, 16, 16, 1]),
            (3, vec![5, 8, 8, 8, 3]),
            (4, vec![1, 2, 1]),
            (5, vec![4, 12, 6, 2]),
        ] {
            for residual in [false, true] {
                let mut spec = MlpSpec::new(widths.clone(), Activation::Tanh).unwrap();
                spec.residual = residual;
                let mut rng = Rng::new(seed);
                let params = spec.init_params(&mut rng);
                let mut xv = vec![0.0; 3 * spec.input_dim()];
                rng.fill_normal(&mut xv);
                let x = DenseMatrix::from_vec(3, spec.input_dim(), xv).unwrap();

                // Scalar objective: sum of outputs.
                let trace = mlp_forward_trace(&params, &spec, &x).unwrap();
                let ones = DenseMatrix::from_vec(
                    3,
                    spec.output_dim(),
                    vec![1.0; 3 * spec.output_dim()],
                )
                .unwrap();
                let (analytic, _) = mlp_backward(&params, &spec, &trace, &ones).unwrap();
                let err = grad_check(
                    |p| {
                        mlp_forward(p, &spec, &x)
                            .unwrap()
                            .data()
                            .iter()
                            .sum::<f64>()
                    },
                    &analytic,
                    &params,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "seed {seed} widths {widths:?} residual {residual}: {err}");
            }
        }
    }
}
