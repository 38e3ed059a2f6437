//! The deterministic actor and the adaptive advantage policy constraint.
//!
//! For every sampled `(s, a)` the constraint target is chosen in two stages:
//!
//! 1. `ã = argmax A(s, ·)` over the dataset action and the VAE proposals,
//!    ties resolved toward the dataset action;
//! 2. `ā = ã` when `A(s, ã) >= epsilon_A`, otherwise `ā = π(s)` with the
//!    gradient stopped, which leaves the actor free to follow the critic.
//!
//! The actor then minimizes `mean[-λ Q(s, π(s)) + w2 |π(s) - ā|^2]` with
//! `λ = α N / Σ|Q(s_i, π(s_i))|` held constant.

use crate::critic::{advantage_with_values, CriticEnsemble};
use crate::error::Result;
use crate::numerics::{AdamState, Matrix, Mlp, MlpSpec, OutputActivation, ParamGrads};
use crate::rng::SeededRng;
use crate::vae::{sample_action, VaeModel};

/// Denominator guard for the λ normalization.
pub const LAMBDA_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub net: Mlp,
}

impl Actor {
    pub fn spec(state_dim: usize, action_dim: usize, hidden: &[usize], bound: f64) -> MlpSpec {
        MlpSpec::new(
            state_dim,
            hidden.to_vec(),
            action_dim,
            OutputActivation::TanhScaled(bound),
        )
    }

    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        bound: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            net: Mlp::init(Self::spec(state_dim, action_dim, hidden, bound), rng)?,
        })
    }
}

/// Deterministic action, no exploration noise.
pub fn act(actor: &Actor, states: &Matrix) -> Result<Matrix> {
    actor.net.predict(states)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub alpha: f64,
    pub w2: f64,
    pub epsilon_a: f64,
    pub actor_lr: f64,
    /// VAE proposals per state.
    pub candidates: usize,
    /// `false` pins `ā = ã` for every sample.
    pub adaptive: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            alpha: 2.5,
            w2: 1.0,
            epsilon_a: 0.0,
            actor_lr: 3e-4,
            candidates: 1,
            adaptive: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    ConstrainToTilde,
    SelfLearn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TildeSource {
    Dataset,
    Vae,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    pub a_bar: Vec<f64>,
    pub branch: Branch,
    pub tilde_source: TildeSource,
    pub a_tilde_advantage: f64,
}

/// Index of the best candidate (0 = dataset action) and its advantage; a
/// proposal must be strictly better to displace the dataset action.
pub fn argmax_advantage(adv_data: f64, adv_candidates: &[f64]) -> (usize, f64) {
    let mut best = (0, adv_data);
    for (k, &a) in adv_candidates.iter().enumerate() {
        if a > best.1 {
            best = (k + 1, a);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct TildeSelection {
    pub a_tilde: Matrix,
    pub advantages: Vec<f64>,
    pub sources: Vec<TildeSource>,
    /// `A(s, a_data)` per sample, for diagnostics.
    pub adv_data: Vec<f64>,
}

/// Pick `ã` per sample among the dataset action and `candidates` VAE
/// proposals (none when `vae` is `None`).
pub fn select_tilde(
    states: &Matrix,
    a_data: &Matrix,
    vae: Option<(&VaeModel, f64)>,
    critic: &CriticEnsemble,
    candidates: usize,
    rng: &mut SeededRng,
) -> Result<TildeSelection> {
    let values = critic.value(states)?;
    let adv_data = advantage_with_values(critic, states, a_data, &values)?;
    let mut proposals = Vec::new();
    let mut prop_adv = Vec::new();
    if let Some((model, latent_clip)) = vae {
        for _ in 0..candidates {
            let a_hat = sample_action(model, states, latent_clip, rng)?;
            prop_adv.push(advantage_with_values(critic, states, &a_hat, &values)?);
            proposals.push(a_hat);
        }
    }
    let n = states.rows();
    let mut a_tilde = a_data.clone();
    let mut advantages = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    let mut row_adv = vec![0.0; proposals.len()];
    for i in 0..n {
        for (slot, adv) in row_adv.iter_mut().zip(&prop_adv) {
            *slot = adv[i];
        }
        let (k, adv) = argmax_advantage(adv_data[i], &row_adv);
        if k > 0 {
            a_tilde.row_mut(i).copy_from_slice(proposals[k - 1].row(i));
            sources.push(TildeSource::Vae);
        } else {
            sources.push(TildeSource::Dataset);
        }
        advantages.push(adv);
    }
    Ok(TildeSelection {
        a_tilde,
        advantages,
        sources,
        adv_data,
    })
}

/// Constrain toward `ã` when `A(s, ã) >= epsilon_A` (inclusive), otherwise
/// self-learn against the detached policy output `policy_actions`.
pub fn select_bar(
    selection: &TildeSelection,
    policy_actions: &Matrix,
    config: &PolicyConfig,
) -> Vec<SelectionOutcome> {
    (0..selection.advantages.len())
        .map(|i| {
            let adv = selection.advantages[i];
            let constrain = !config.adaptive || adv >= config.epsilon_a;
            let (a_bar, branch) = if constrain {
                (selection.a_tilde.row(i).to_vec(), Branch::ConstrainToTilde)
            } else {
                (policy_actions.row(i).to_vec(), Branch::SelfLearn)
            };
            SelectionOutcome {
                a_bar,
                branch,
                tilde_source: selection.sources[i],
                a_tilde_advantage: adv,
            }
        })
        .collect()
}

/// `λ = α N / Σ|Q_i|`, guarded against a zero denominator.
pub fn lambda_coeff(q_values: &[f64], alpha: f64) -> f64 {
    let n = q_values.len() as f64;
    let denom: f64 = q_values.iter().map(|q| q.abs()).sum();
    alpha * n / denom.max(LAMBDA_EPS)
}

#[derive(Debug, Clone)]
pub struct PolicyLoss {
    pub loss: f64,
    pub lambda: f64,
    pub q_mean: f64,
    /// Mean `|π(s) - ā|`.
    pub constraint_gap: f64,
    /// Per-sample `min(q1, q2)(s, π(s))` before the update.
    pub q_values: Vec<f64>,
    pub grads: ParamGrads,
}

/// Actor loss and gradient; critic parameters are read only. `lambda`
/// overrides the batch normalization (used to freeze it in gradient checks).
pub fn policy_loss_and_grads(
    actor: &Actor,
    critic: &CriticEnsemble,
    states: &Matrix,
    a_bar: &Matrix,
    config: &PolicyConfig,
    lambda: Option<f64>,
) -> Result<PolicyLoss> {
    let cache = actor.net.forward_cached(states)?;
    let pi = cache.output();
    let (q, dq) = critic.q_min_action_grad(states, pi)?;
    let lambda = lambda.unwrap_or_else(|| lambda_coeff(&q, config.alpha));
    let n = states.rows();
    let nf = n as f64;
    let mut loss = 0.0;
    let mut gap = 0.0;
    let mut d_pi = Matrix::zeros(n, pi.cols());
    for i in 0..n {
        let mut sq = 0.0;
        for j in 0..pi.cols() {
            let diff = pi.get(i, j) - a_bar.get(i, j);
            sq += diff * diff;
            d_pi.set(i, j, (-lambda * dq.get(i, j) + 2.0 * config.w2 * diff) / nf);
        }
        loss += (-lambda * q[i] + config.w2 * sq) / nf;
        gap += sq.sqrt() / nf;
    }
    let grads = actor.net.backward(&cache, &d_pi)?;
    Ok(PolicyLoss {
        loss,
        lambda,
        q_mean: q.iter().sum::<f64>() / nf,
        constraint_gap: gap,
        q_values: q,
        grads,
    })
}

pub fn outcomes_to_matrix(outcomes: &[SelectionOutcome]) -> Matrix {
    let rows: Vec<&[f64]> = outcomes.iter().map(|o| o.a_bar.as_slice()).collect();
    Matrix::from_rows(&rows)
}

/// One Adam step on the actor.
pub fn policy_update(
    actor: &mut Actor,
    opt: &mut AdamState,
    critic: &CriticEnsemble,
    states: &Matrix,
    outcomes: &[SelectionOutcome],
    config: &PolicyConfig,
) -> Result<PolicyLoss> {
    let a_bar = outcomes_to_matrix(outcomes);
    let out = policy_loss_and_grads(actor, critic, states, &a_bar, config, None)?;
    opt.apply(&mut actor.net.params, &out.grads, config.actor_lr);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, MlpParams};

    fn setup(seed: u64) -> (Actor, CriticEnsemble, Matrix, Matrix) {
        let mut rng = SeededRng::new(seed);
        let actor = Actor::new(3, 2, &[16, 16], 1.0, &mut rng).unwrap();
        let critic = CriticEnsemble::new(3, 2, &[16, 16], &[16], &actor.net, &mut rng).unwrap();
        let s = Matrix::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let a = Matrix::from_vec(4, 2, (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        (actor, critic, s, a)
    }

    fn selection(adv: &[f64]) -> TildeSelection {
        let n = adv.len();
        TildeSelection {
            a_tilde: Matrix::filled(n, 2, 0.5),
            advantages: adv.to_vec(),
            sources: vec![TildeSource::Dataset; n],
            adv_data: adv.to_vec(),
        }
    }

    #[test]
    fn argmax_prefers_dataset_on_ties() {
        assert_eq!(argmax_advantage(0.3, &[0.7]), (1, 0.7));
        assert_eq!(argmax_advantage(0.4, &[0.4]), (0, 0.4));
        assert_eq!(argmax_advantage(0.4, &[]), (0, 0.4));
        assert_eq!(argmax_advantage(-1.0, &[0.1, 0.5, 0.2]), (2, 0.5));
    }

    #[test]
    fn branch_rule_is_inclusive() {
        let cfg = PolicyConfig::default();
        let pi = Matrix::filled(3, 2, -0.25);
        let out = select_bar(&selection(&[0.2, -0.1, 0.0]), &pi, &cfg);
        assert_eq!(out[0].branch, Branch::ConstrainToTilde);
        assert_eq!(out[1].branch, Branch::SelfLearn);
        assert_eq!(out[1].a_bar, vec![-0.25, -0.25]);
        assert_eq!(out[2].branch, Branch::ConstrainToTilde);
        let fixed = PolicyConfig {
            adaptive: false,
            ..cfg
        };
        let out = select_bar(&selection(&[-5.0]), &Matrix::filled(1, 2, 0.0), &fixed);
        assert_eq!(out[0].branch, Branch::ConstrainToTilde);
    }

    #[test]
    fn lambda_examples() {
        assert!((lambda_coeff(&[1.0, 4.0], 2.5) - 1.0).abs() < 1e-12);
        assert!((lambda_coeff(&[-1.0, 4.0], 2.5) - 1.0).abs() < 1e-12);
        let q = 3.0;
        for n in [1, 7, 256] {
            assert!((lambda_coeff(&vec![q; n], 2.5) - 2.5 / q).abs() < 1e-12);
        }
        assert_eq!(lambda_coeff(&[0.0, 0.0], 1.0), 2.0 / LAMBDA_EPS);
        let qs = [0.3, -1.2, 2.2];
        let scaled: Vec<f64> = qs.iter().map(|v| v * 10.0).collect();
        assert!((lambda_coeff(&qs, 2.5) / lambda_coeff(&scaled, 2.5) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn select_tilde_without_vae_returns_dataset() {
        let (_, critic, s, a) = setup(1);
        let sel = select_tilde(&s, &a, None, &critic, 1, &mut SeededRng::new(0)).unwrap();
        assert_eq!(sel.a_tilde, a);
        assert_eq!(sel.advantages, sel.adv_data);
        assert!(sel.sources.iter().all(|&t| t == TildeSource::Dataset));
    }

    #[test]
    fn selected_advantage_dominates_dataset() {
        let (_, critic, s, a) = setup(2);
        let mut rng = SeededRng::new(2);
        let vae = VaeModel::new(3, 2, 4, &[8], 1.0, &mut rng).unwrap();
        let sel = select_tilde(&s, &a, Some((&vae, 0.5)), &critic, 3, &mut rng).unwrap();
        for i in 0..4 {
            assert!(sel.advantages[i] >= sel.adv_data[i]);
            let row_adv = crate::critic::advantage(
                &critic,
                &s.select_rows(&[i]),
                &sel.a_tilde.select_rows(&[i]),
            )
            .unwrap()[0];
            assert!((row_adv - sel.advantages[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn self_learn_rows_have_zero_regularizer_gradient() {
        let (actor, critic, s, _) = setup(3);
        let pi = act(&actor, &s).unwrap();
        let cfg = PolicyConfig::default();
        let out = select_bar(&selection(&[-1.0; 4]), &pi, &cfg);
        assert!(out.iter().all(|o| o.branch == Branch::SelfLearn));
        let a_bar = outcomes_to_matrix(&out);
        let full = policy_loss_and_grads(&actor, &critic, &s, &a_bar, &cfg, None).unwrap();
        let q_only = PolicyConfig { w2: 0.0, ..cfg.clone() };
        let pure = policy_loss_and_grads(&actor, &critic, &s, &a_bar, &q_only, None).unwrap();
        assert_eq!(full.grads, pure.grads);
        assert_eq!(full.constraint_gap, 0.0);
    }

    #[test]
    fn pure_cloning_pulls_toward_data() {
        let (mut actor, critic, s, a) = setup(4);
        let cfg = PolicyConfig {
            actor_lr: 1e-2,
            ..PolicyConfig::default()
        };
        let mut opt = AdamState::new(&actor.net.params);
        let before = policy_loss_and_grads(&actor, &critic, &s, &a, &cfg, Some(0.0)).unwrap();
        for _ in 0..50 {
            let out = policy_loss_and_grads(&actor, &critic, &s, &a, &cfg, Some(0.0)).unwrap();
            opt.apply(&mut actor.net.params, &out.grads, cfg.actor_lr);
        }
        let after = policy_loss_and_grads(&actor, &critic, &s, &a, &cfg, Some(0.0)).unwrap();
        assert!(after.constraint_gap < before.constraint_gap);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let (actor, critic, s, a) = setup(5);
        let cfg = PolicyConfig {
            w2: 0.7,
            ..PolicyConfig::default()
        };
        let base = policy_loss_and_grads(&actor, &critic, &s, &a, &cfg, None).unwrap();
        let lambda = Some(base.lambda);
        let err = grad_check(
            |p: &MlpParams| {
                let mut act = actor.clone();
                act.net.params = p.clone();
                policy_loss_and_grads(&act, &critic, &s, &a, &cfg, lambda).unwrap().loss
            },
            &actor.net.params,
            &base.grads,
            300,
            1e-6,
            &mut SeededRng::new(5),
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn policy_update_leaves_critic_untouched() {
        let (mut actor, critic, s, a) = setup(6);
        let snapshot = critic.clone();
        let mut opt = AdamState::new(&actor.net.params);
        let sel = TildeSelection {
            a_tilde: a.clone(),
            advantages: vec![1.0; 4],
            sources: vec![TildeSource::Dataset; 4],
            adv_data: vec![1.0; 4],
        };
        let pi = act(&actor, &s).unwrap();
        let out = select_bar(&sel, &pi, &PolicyConfig::default());
        let before = actor.clone();
        policy_update(&mut actor, &mut opt, &critic, &s, &out, &PolicyConfig::default()).unwrap();
        assert_eq!(critic, snapshot);
        assert_ne!(actor, before);
    }

    #[test]
    fn act_examples() {
        let spec = Actor::spec(4, 2, &[8], 1.0);
        let zero = Actor {
            net: Mlp::zeros(spec).unwrap(),
        };
        let s = Matrix::filled(3, 4, 2.0);
        assert!(act(&zero, &s).unwrap().data().iter().all(|&v| v == 0.0));
        let (actor, ..) = setup(7);
        let s = Matrix::filled(2, 3, 50.0);
        let a1 = act(&actor, &s).unwrap();
        assert!(a1.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(a1, act(&actor, &s).unwrap());
    }
}
