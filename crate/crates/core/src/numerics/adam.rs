use crate::numerics::mlp::{MlpParams, ParamGrads};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: MlpParams,
    pub second_moment: MlpParams,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let shapes = params.shapes();
        Self {
            step: 0,
            first_moment: MlpParams::zeros_like(&shapes),
            second_moment: MlpParams::zeros_like(&shapes),
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn apply(&mut self, params: &mut MlpParams, grads: &ParamGrads, lr: f64) {
        debug_assert_eq!(params.shapes(), grads.shapes());
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = self
            .first_moment
            .slices_mut()
            .zip(self.second_moment.slices_mut());
        for ((p, g), (m, v)) in params.slices_mut().zip(grads.slices()).zip(moments) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// One Adam update; free-function form of [`AdamState::apply`].
pub fn adam_step(params: &mut MlpParams, grads: &ParamGrads, state: &mut AdamState, lr: f64) {
    state.apply(params, grads, lr);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix::Matrix;
    use crate::numerics::mlp::Dense;

    fn scalar(v: f64) -> MlpParams {
        MlpParams {
            layers: vec![Dense {
                weight: Matrix::from_rows(&[[v]]),
                bias: vec![0.0],
            }],
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar(2.0), &mut st, 0.1);
        let delta = p.layers[0].weight.get(0, 0) - 1.0;
        assert!((delta + 0.1).abs() < 1e-7, "{delta}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(0.7);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &scalar(0.0), &mut st, 0.01);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn repeated_runs_identical() {
        let run = || {
            let mut p = scalar(0.3);
            let mut st = AdamState::new(&p);
            let mut trace = Vec::new();
            for i in 0..20 {
                adam_step(&mut p, &scalar((i as f64).sin()), &mut st, 0.05);
                trace.push(p.layers[0].weight.get(0, 0).to_bits());
            }
            trace
        };
        assert_eq!(run(), run());
    }
}
