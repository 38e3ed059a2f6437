//! Property-based checks of the numerical and algorithmic invariants.

use a2pr_core::critic::{bootstrap, expectile_weight, polyak_update, td_target, CriticConfig, CriticEnsemble};
use a2pr_core::dataset::{Batch, NormStats, OfflineDataset};
use a2pr_core::maze::{step, MazeAction, MazeConfig, MazeState, Transition};
use a2pr_core::numerics::matrix::{matmul, matmul_nt, matmul_tn};
use a2pr_core::numerics::gradcheck::relative_error;
use a2pr_core::numerics::{Matrix, Mlp, MlpSpec, OutputActivation};
use a2pr_core::policy::{
    argmax_advantage, lambda_coeff, policy_loss_and_grads, select_bar, Actor, Branch, PolicyConfig,
    TildeSelection, TildeSource,
};
use a2pr_core::rng::SeededRng;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = SeededRng::new(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap()
}

fn naive(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            c.set(i, j, (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum());
        }
    }
    c
}

fn close(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn products_agree_with_naive(m in 1usize..9, k in 0usize..9, n in 1usize..9, seed in any::<u64>()) {
        let a = matrix(m, k, seed);
        let b = matrix(k, n, seed ^ 1);
        prop_assert!(close(&matmul(&a, &b), &naive(&a, &b)));
        prop_assert!(close(&matmul_tn(&a.transpose(), &b), &naive(&a, &b)));
        prop_assert!(close(&matmul_nt(&a, &b.transpose()), &naive(&a, &b)));
    }

    #[test]
    fn mlp_gradients_match_finite_differences(seed in any::<u64>(), tanh in any::<bool>()) {
        let act = if tanh { OutputActivation::TanhScaled(1.5) } else { OutputActivation::Identity };
        let spec = MlpSpec::new(3, vec![7, 5], 2, act);
        let mut rng = SeededRng::new(seed);
        let mut net = Mlp::init(spec.clone(), &mut rng).unwrap();
        // zero biases put dead-input rows exactly on a ReLU kink
        for layer in &mut net.params.layers {
            for b in &mut layer.bias {
                *b = rng.uniform(-0.5, 0.5);
            }
        }
        let x = matrix(4, 3, seed ^ 7);
        let target = matrix(4, 2, seed ^ 9);
        let loss = |p: &a2pr_core::numerics::MlpParams| {
            let y = Mlp::from_params(spec.clone(), p.clone()).unwrap().predict(&x).unwrap();
            y.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        let (y, cache) = net.forward(&x).unwrap();
        let mut g = y.clone();
        for (gi, t) in g.data_mut().iter_mut().zip(target.data()) {
            *gi = 2.0 * (*gi - t);
        }
        let analytic = net.backward(&cache, &g).unwrap();
        let mut work = net.params.clone();
        let floor = 1e-6 * (1.0 + loss(&work));
        for i in 0..work.num_params() {
            let orig = work.get(i);
            work.set(i, orig + 1e-6);
            let up = loss(&work);
            work.set(i, orig - 1e-6);
            let down = loss(&work);
            work.set(i, orig);
            let err = relative_error(analytic.get(i), (up - down) / 2e-6, floor);
            prop_assert!(err < 1e-4, "coordinate {i}: relative error {err}");
        }
    }

    #[test]
    fn polyak_stays_between_source_and_target(tau in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let actor = Actor::new(2, 1, &[4], 1.0, &mut rng).unwrap();
        let mut ens = CriticEnsemble::new(2, 1, &[4], &[4], &actor.net, &mut rng).unwrap();
        ens.q1 = Mlp::init(ens.q1.spec.clone(), &mut rng).unwrap();
        let (src, old) = (ens.q1.params.clone(), ens.q1_target.params.clone());
        polyak_update(&mut ens, &actor.net.params, tau);
        for i in 0..src.num_params() {
            let (s, o, n) = (src.get(i), old.get(i), ens.q1_target.params.get(i));
            prop_assert!(n >= s.min(o) - 1e-15 && n <= s.max(o) + 1e-15);
        }
    }

    #[test]
    fn td_targets_are_bounded_and_noise_clipped(seed in any::<u64>(), sigma in 0.0f64..3.0, clip in 0.0f64..1.0) {
        let mut rng = SeededRng::new(seed);
        let actor = Actor::new(3, 2, &[6], 1.0, &mut rng).unwrap();
        let ens = CriticEnsemble::new(3, 2, &[6], &[6], &actor.net, &mut rng).unwrap();
        let n = 8;
        let batch = Batch {
            indices: (0..n).collect(),
            states: matrix(n, 3, seed),
            actions: matrix(n, 2, seed ^ 1),
            rewards: (0..n).map(|i| if i % 3 == 0 { 1.0 } else { -0.5 }).collect(),
            next_states: matrix(n, 3, seed ^ 2),
            dones: (0..n).map(|i| (i % 2) as f64).collect(),
        };
        let cfg = CriticConfig { policy_noise_sigma: sigma, noise_clip: clip, ..CriticConfig::default() };
        let t = td_target(&ens, &cfg, &batch, &mut rng).unwrap();
        prop_assert!(t.noise.data().iter().all(|e| e.abs() <= clip));
        prop_assert!(t.next_actions.data().iter().all(|a| a.abs() <= 1.0));
        let x = batch.next_states.hcat(&t.next_actions).unwrap();
        let b = ens.q1_target.predict(&x).unwrap().data().iter()
            .chain(ens.q2_target.predict(&x).unwrap().data())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        for (i, y) in t.y.iter().enumerate() {
            prop_assert!(y.abs() <= 1.0 + 0.99 * b + 1e-12);
            if batch.dones[i] == 1.0 {
                prop_assert_eq!(*y, batch.rewards[i]);
            }
        }
    }

    #[test]
    fn bootstrap_is_monotone_in_both_target_values(r in -5.0f64..5.0, q1 in -5.0f64..5.0, q2 in -5.0f64..5.0, d in 0.0f64..5.0) {
        let y = bootstrap(r, 0.99, 0.0, q1, q2);
        prop_assert!(bootstrap(r, 0.99, 0.0, q1 + d, q2) >= y);
        prop_assert!(bootstrap(r, 0.99, 0.0, q1, q2 + d) >= y);
        prop_assert!(y <= r + 0.99 * q1.max(q2));
    }

    #[test]
    fn expectile_weights_sum_to_one(u in -10.0f64..10.0, tau in 0.01f64..0.99) {
        let w = expectile_weight(u, tau) + expectile_weight(-u, tau);
        if u != 0.0 {
            prop_assert!((w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_never_loses_to_the_data_action(adv_data in -3.0f64..3.0, cands in prop::collection::vec(-3.0f64..3.0, 0..5)) {
        let (k, a) = argmax_advantage(adv_data, &cands);
        prop_assert!(a >= adv_data);
        prop_assert!(cands.iter().all(|c| a >= *c));
        if k == 0 { prop_assert_eq!(a, adv_data); } else { prop_assert_eq!(a, cands[k - 1]); }
    }

    #[test]
    fn branch_rule_and_self_learn_pull(advs in prop::collection::vec(-1.0f64..1.0, 1..8), eps in -0.5f64..0.5, seed in any::<u64>()) {
        let n = advs.len();
        let mut rng = SeededRng::new(seed);
        let actor = Actor::new(3, 2, &[6], 1.0, &mut rng).unwrap();
        let critic = CriticEnsemble::new(3, 2, &[6], &[6], &actor.net, &mut rng).unwrap();
        let states = matrix(n, 3, seed ^ 3);
        let pi = actor.net.predict(&states).unwrap();
        let sel = TildeSelection {
            a_tilde: matrix(n, 2, seed ^ 4).map(|v| v.clamp(-1.0, 1.0)),
            advantages: advs.clone(),
            sources: vec![TildeSource::Dataset; n],
            adv_data: advs.clone(),
        };
        let cfg = PolicyConfig { epsilon_a: eps, ..PolicyConfig::default() };
        let out = select_bar(&sel, &pi, &cfg);
        for (o, a) in out.iter().zip(&advs) {
            prop_assert_eq!(o.branch == Branch::ConstrainToTilde, *a >= eps);
        }
        // rows on the self-learn branch add nothing to the regularizer:
        // the loss gradient equals the gradient with those rows' w2 term removed
        if out.iter().all(|o| o.branch == Branch::SelfLearn) {
            let a_bar = a2pr_core::policy::outcomes_to_matrix(&out);
            let with = policy_loss_and_grads(&actor, &critic, &states, &a_bar, &cfg, Some(1.0)).unwrap();
            let no_reg = PolicyConfig { w2: 0.0, ..cfg.clone() };
            let without = policy_loss_and_grads(&actor, &critic, &states, &a_bar, &no_reg, Some(1.0)).unwrap();
            prop_assert_eq!(with.grads, without.grads);
            prop_assert_eq!(with.constraint_gap, 0.0);
        }
    }

    #[test]
    fn lambda_scales_inversely_with_q(qs in prop::collection::vec(-50.0f64..50.0, 1..16), k in 0.1f64..10.0, alpha in 0.1f64..5.0) {
        let scaled: Vec<f64> = qs.iter().map(|q| q * k).collect();
        let (l1, l2) = (lambda_coeff(&qs, alpha), lambda_coeff(&scaled, alpha));
        prop_assert!(l1.is_finite() && l1 > 0.0);
        if qs.iter().map(|q| q.abs()).sum::<f64>() * k.min(1.0) > 1e-6 {
            prop_assert!((l1 / l2 - k).abs() < 1e-9 * k);
        }
    }

    #[test]
    fn dataset_bytes_round_trip(raw in prop::collection::vec((prop::array::uniform4(-10.0f32..10.0), prop::array::uniform2(-1.0f32..1.0), -1.0f32..5.0, any::<bool>()), 0..40)) {
        let tr: Vec<Transition> = raw.iter().map(|(s, a, r, d)| Transition {
            s: s.map(f64::from),
            a: a.map(f64::from),
            r: *r as f64,
            s_next: s.map(|v| f64::from(v) + 0.5),
            done: *d,
        }).collect();
        let data = OfflineDataset::from_transitions(&tr);
        let bytes = data.to_bytes();
        prop_assert_eq!(OfflineDataset::from_bytes(&bytes).unwrap(), data);
        if !bytes.is_empty() {
            prop_assert!(OfflineDataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn normalization_inverts(mean in prop::array::uniform3(-5.0f64..5.0), std in prop::array::uniform3(0.001f64..5.0), x in prop::array::uniform3(-20.0f64..20.0)) {
        let stats = NormStats { mean: mean.to_vec(), std: std.to_vec() };
        let back = stats.denormalize(&stats.normalize(&x));
        for (a, b) in back.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn maze_step_respects_limits(x in 0.0f64..7.0, y in 0.0f64..7.0, vx in -2.0f64..2.0, vy in -2.0f64..2.0, fx in -5.0f64..5.0, fy in -5.0f64..5.0) {
        let cfg = MazeConfig::default();
        let s = MazeState { x, y, vx, vy, t: 0 };
        let (n, r, done) = step(&cfg, &s, MazeAction::new(fx, fy));
        prop_assert!(cfg.bounds.contains(n.x, n.y));
        prop_assert!((n.vx * n.vx + n.vy * n.vy).sqrt() <= cfg.max_speed + 1e-12);
        prop_assert!(r == 0.0 || done);
        prop_assert!([0.0, 1.0, 2.0, 4.0].contains(&r));
    }
}
