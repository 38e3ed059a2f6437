//! Twin Q networks, a state-value network and Polyak-averaged targets.

use crate::dataset::Batch;
use crate::error::Result;
use crate::numerics::{AdamState, Matrix, Mlp, MlpParams, MlpSpec, OutputActivation, ParamGrads};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct CriticConfig {
    pub gamma: f64,
    pub tau: f64,
    pub policy_noise_sigma: f64,
    pub noise_clip: f64,
    pub action_bound: f64,
    pub q_lr: f64,
    pub v_lr: f64,
    pub expectile: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 5e-3,
            policy_noise_sigma: 0.2,
            noise_clip: 0.5,
            action_bound: 1.0,
            q_lr: 3e-4,
            v_lr: 3e-4,
            expectile: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticEnsemble {
    pub q1: Mlp,
    pub q2: Mlp,
    pub v: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub policy_target: Mlp,
}

impl CriticEnsemble {
    pub fn q_spec(state_dim: usize, action_dim: usize, hidden: &[usize]) -> MlpSpec {
        MlpSpec::new(state_dim + action_dim, hidden.to_vec(), 1, OutputActivation::Identity)
    }

    pub fn v_spec(state_dim: usize, hidden: &[usize]) -> MlpSpec {
        MlpSpec::new(state_dim, hidden.to_vec(), 1, OutputActivation::Identity)
    }

    /// Fresh critics; targets start as exact copies of their sources, the
    /// policy target as a copy of `actor`.
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        q_hidden: &[usize],
        v_hidden: &[usize],
        actor: &Mlp,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let q1 = Mlp::init(Self::q_spec(state_dim, action_dim, q_hidden), rng)?;
        let q2 = Mlp::init(Self::q_spec(state_dim, action_dim, q_hidden), rng)?;
        let v = Mlp::init(Self::v_spec(state_dim, v_hidden), rng)?;
        Ok(Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy_target: actor.clone(),
            q1,
            q2,
            v,
        })
    }

    /// Per-sample `(q1, q2)` at `(s, a)`.
    pub fn q_values(&self, states: &Matrix, actions: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = states.hcat(actions)?;
        Ok((
            self.q1.predict(&x)?.into_vec(),
            self.q2.predict(&x)?.into_vec(),
        ))
    }

    pub fn q_min(&self, states: &Matrix, actions: &Matrix) -> Result<Vec<f64>> {
        let (a, b) = self.q_values(states, actions)?;
        Ok(a.into_iter().zip(b).map(|(x, y)| x.min(y)).collect())
    }

    pub fn value(&self, states: &Matrix) -> Result<Vec<f64>> {
        Ok(self.v.predict(states)?.into_vec())
    }

    /// `min(q1, q2)` and its gradient with respect to the action columns.
    /// Ties take the gradient of `q1`.
    pub fn q_min_action_grad(&self, states: &Matrix, actions: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        let x = states.hcat(actions)?;
        let c1 = self.q1.forward_cached(&x)?;
        let c2 = self.q2.forward_cached(&x)?;
        let n = x.rows();
        let mut g1 = Matrix::zeros(n, 1);
        let mut g2 = Matrix::zeros(n, 1);
        let mut qmin = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b) = (c1.output().get(i, 0), c2.output().get(i, 0));
            if a <= b {
                g1.set(i, 0, 1.0);
                qmin.push(a);
            } else {
                g2.set(i, 0, 1.0);
                qmin.push(b);
            }
        }
        let d1 = self.q1.input_grad(&c1, &g1)?;
        let d2 = self.q2.input_grad(&c2, &g2)?;
        let sd = states.cols();
        let mut grad = Matrix::zeros(n, actions.cols());
        for i in 0..n {
            for j in 0..actions.cols() {
                grad.set(i, j, d1.get(i, sd + j) + d2.get(i, sd + j));
            }
        }
        Ok((qmin, grad))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticOptimizer {
    pub q1: AdamState,
    pub q2: AdamState,
    pub v: AdamState,
}

impl CriticOptimizer {
    pub fn new(ens: &CriticEnsemble) -> Self {
        Self {
            q1: AdamState::new(&ens.q1.params),
            q2: AdamState::new(&ens.q2.params),
            v: AdamState::new(&ens.v.params),
        }
    }
}

/// `r + gamma * (1 - done) * min(q1', q2')`
pub fn bootstrap(r: f64, gamma: f64, done: f64, q1_next: f64, q2_next: f64) -> f64 {
    r + gamma * (1.0 - done) * q1_next.min(q2_next)
}

#[derive(Debug, Clone)]
pub struct TdTarget {
    pub y: Vec<f64>,
    pub next_actions: Matrix,
    pub noise: Matrix,
}

/// Bootstrapped targets with clipped Gaussian smoothing on the target
/// policy's next action.
pub fn td_target(
    ens: &CriticEnsemble,
    cfg: &CriticConfig,
    batch: &Batch,
    rng: &mut SeededRng,
) -> Result<TdTarget> {
    let mut next_actions = ens.policy_target.predict(&batch.next_states)?;
    let mut noise = Matrix::zeros(next_actions.rows(), next_actions.cols());
    let (c, bound) = (cfg.noise_clip, cfg.action_bound);
    for (a, e) in next_actions.data_mut().iter_mut().zip(noise.data_mut()) {
        *e = (cfg.policy_noise_sigma * rng.normal()).clamp(-c, c);
        *a = (*a + *e).clamp(-bound, bound);
    }
    let x = batch.next_states.hcat(&next_actions)?;
    let q1n = ens.q1_target.predict(&x)?;
    let q2n = ens.q2_target.predict(&x)?;
    let y = (0..batch.len())
        .map(|i| {
            bootstrap(
                batch.rewards[i],
                cfg.gamma,
                batch.dones[i],
                q1n.get(i, 0),
                q2n.get(i, 0),
            )
        })
        .collect();
    Ok(TdTarget {
        y,
        next_actions,
        noise,
    })
}

/// `mean[(y - q1)^2 + (y - q2)^2]` with `y` held constant.
pub fn q_loss_and_grads(
    ens: &CriticEnsemble,
    states: &Matrix,
    actions: &Matrix,
    y: &[f64],
) -> Result<(f64, ParamGrads, ParamGrads)> {
    let x = states.hcat(actions)?;
    let n = x.rows() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(2);
    for net in [&ens.q1, &ens.q2] {
        let cache = net.forward_cached(&x)?;
        let mut g = Matrix::zeros(x.rows(), 1);
        for (i, &yi) in y.iter().enumerate() {
            let d = cache.output().get(i, 0) - yi;
            loss += d * d / n;
            g.set(i, 0, 2.0 * d / n);
        }
        grads.push(net.backward(&cache, &g)?);
    }
    let g2 = grads.pop().unwrap();
    let g1 = grads.pop().unwrap();
    Ok((loss, g1, g2))
}

/// One Adam step for both Q networks; returns the TD loss.
pub fn q_update(
    ens: &mut CriticEnsemble,
    opt: &mut CriticOptimizer,
    cfg: &CriticConfig,
    batch: &Batch,
    rng: &mut SeededRng,
) -> Result<f64> {
    let target = td_target(ens, cfg, batch, rng)?;
    let (loss, g1, g2) = q_loss_and_grads(ens, &batch.states, &batch.actions, &target.y)?;
    opt.q1.apply(&mut ens.q1.params, &g1, cfg.q_lr);
    opt.q2.apply(&mut ens.q2.params, &g2, cfg.q_lr);
    Ok(loss)
}

/// `|expectile - [u < 0]|`
pub fn expectile_weight(u: f64, expectile: f64) -> f64 {
    if u < 0.0 {
        1.0 - expectile
    } else {
        expectile
    }
}

/// `mean[ |tau - [u < 0]| u^2 ]`, `u = q_target - v(s)`, gradient into `v` only.
pub fn v_loss_and_grads(
    v: &Mlp,
    states: &Matrix,
    q_target: &[f64],
    expectile: f64,
) -> Result<(f64, ParamGrads)> {
    let cache = v.forward_cached(states)?;
    let n = states.rows() as f64;
    let mut loss = 0.0;
    let mut g = Matrix::zeros(states.rows(), 1);
    for (i, &q) in q_target.iter().enumerate() {
        let u = q - cache.output().get(i, 0);
        let w = expectile_weight(u, expectile);
        loss += w * u * u / n;
        g.set(i, 0, -2.0 * w * u / n);
    }
    Ok((loss, v.backward(&cache, &g)?))
}

pub fn v_update(
    ens: &mut CriticEnsemble,
    opt: &mut CriticOptimizer,
    cfg: &CriticConfig,
    batch: &Batch,
) -> Result<f64> {
    let q = ens.q_min(&batch.states, &batch.actions)?;
    let (loss, g) = v_loss_and_grads(&ens.v, &batch.states, &q, cfg.expectile)?;
    opt.v.apply(&mut ens.v.params, &g, cfg.v_lr);
    Ok(loss)
}

/// `min(q1, q2)(s, a) - v(s)` per sample.
pub fn advantage(ens: &CriticEnsemble, states: &Matrix, actions: &Matrix) -> Result<Vec<f64>> {
    let q = ens.q_min(states, actions)?;
    let v = ens.value(states)?;
    Ok(q.into_iter().zip(v).map(|(q, v)| q - v).collect())
}

/// Same as [`advantage`] but reusing precomputed state values.
pub fn advantage_with_values(
    ens: &CriticEnsemble,
    states: &Matrix,
    actions: &Matrix,
    values: &[f64],
) -> Result<Vec<f64>> {
    let q = ens.q_min(states, actions)?;
    Ok(q.into_iter().zip(values).map(|(q, v)| q - v).collect())
}

/// Polyak-average both Q targets and the policy target toward their sources.
pub fn polyak_update(ens: &mut CriticEnsemble, actor: &MlpParams, tau: f64) {
    assert!((0.0..=1.0).contains(&tau), "tau must lie in [0, 1]");
    ens.q1_target.params.soft_update_from(&ens.q1.params, tau);
    ens.q2_target.params.soft_update_from(&ens.q2.params, tau);
    ens.policy_target.params.soft_update_from(actor, tau);
}
