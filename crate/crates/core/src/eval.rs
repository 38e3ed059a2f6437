//! Policy rollouts, normalized scores, Monte-Carlo value checks, advantage
//! comparisons and trajectory export.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::critic::{advantage, CriticEnsemble};
use crate::dataset::{NormStats, OfflineDataset, DEFAULT_EXPERT_NOISE};
use crate::error::{Error, Result};
use crate::maze::{
    expert_controller, random_controller, reset, run_episode, Episode, MazeAction, MazeConfig,
    MazeState, STATE_DIM, TRAJECTORY_HEADER,
};
use crate::numerics::Matrix;
use crate::policy::{act, Actor};
use crate::rng::SeededRng;

pub const ANCHOR_EPISODES: usize = 1000;
pub const ANCHOR_SEED: u64 = 0xa2c4;
pub const ANCHOR_FILE: &str = "score_anchors.csv";
const ANCHOR_HEADER: &str = "key,episodes,j_random,j_expert";

/// Mean undiscounted returns of the uniform random controller and the
/// noisy expert aimed at the highest-reward goal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreAnchors {
    pub j_random: f64,
    pub j_expert: f64,
}

impl ScoreAnchors {
    /// `100 (J - J_random) / (J_expert - J_random)`; NaN when the anchors
    /// coincide.
    pub fn normalize(&self, j: f64) -> f64 {
        normalized_score(j, self)
    }
}

pub fn normalized_score(j: f64, anchors: &ScoreAnchors) -> f64 {
    let den = anchors.j_expert - anchors.j_random;
    if den.abs() < 1e-12 {
        return f64::NAN;
    }
    100.0 * (j - anchors.j_random) / den
}

pub fn compute_anchors(env: &MazeConfig, episodes: usize, seed: u64) -> Result<ScoreAnchors> {
    env.validate()?;
    if episodes == 0 {
        return Err(Error::Config("anchor episode count must be positive".into()));
    }
    let j_random = mean_return(env, episodes, seed, |_, rng| random_controller(rng));
    let j_expert = match env.best_goal() {
        Some(g) => mean_return(env, episodes, seed ^ 1, move |s, rng| {
            expert_controller(env, s, g, DEFAULT_EXPERT_NOISE, rng)
        }),
        None => 0.0,
    };
    Ok(ScoreAnchors { j_random, j_expert })
}

fn mean_return<F>(env: &MazeConfig, episodes: usize, seed: u64, mut policy: F) -> f64
where
    F: FnMut(&MazeState, &mut SeededRng) -> MazeAction,
{
    let mut total = 0.0;
    for i in 0..episodes {
        let mut rng = SeededRng::with_stream(seed, i as u64);
        let start = reset(env, &mut rng);
        total += run_episode(env, start, |s| policy(s, &mut rng)).total_reward;
    }
    total / episodes as f64
}

fn anchor_key(env: &MazeConfig, episodes: usize) -> String {
    let mut h = Sha256::new();
    h.update(env.fingerprint().as_bytes());
    h.update(format!(";episodes={episodes};seed={ANCHOR_SEED}").as_bytes());
    h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
}

/// Anchors for `env`, read from `<dir>/score_anchors.csv` when a matching
/// entry exists, otherwise computed and appended there.
pub fn load_or_compute_anchors(env: &MazeConfig, dir: Option<&Path>) -> Result<ScoreAnchors> {
    let key = anchor_key(env, ANCHOR_EPISODES);
    let Some(dir) = dir else {
        return compute_anchors(env, ANCHOR_EPISODES, ANCHOR_SEED);
    };
    let path = dir.join(ANCHOR_FILE);
    let existing = fs::read_to_string(&path).unwrap_or_default();
    for line in existing.lines().skip(1) {
        let p: Vec<&str> = line.split(',').collect();
        if p.len() == 4 && p[0] == key {
            if let (Ok(r), Ok(e)) = (p[2].parse(), p[3].parse()) {
                return Ok(ScoreAnchors {
                    j_random: r,
                    j_expert: e,
                });
            }
        }
    }
    let anchors = compute_anchors(env, ANCHOR_EPISODES, ANCHOR_SEED)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = if existing.starts_with(ANCHOR_HEADER) {
        existing
    } else {
        format!("{ANCHOR_HEADER}\n")
    };
    if !text.ends_with('\n') {
        text.push('\n');
    }
    text.push_str(&format!(
        "{key},{ANCHOR_EPISODES},{},{}\n",
        anchors.j_random, anchors.j_expert
    ));
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(anchors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub return_mean: f64,
    /// Population standard deviation over episodes.
    pub return_std: f64,
    pub normalized_score: f64,
    /// Fraction of episodes ending in each goal, in goal order.
    pub goal_hit_fractions: Vec<f64>,
    pub length_mean: f64,
    pub length_min: usize,
    pub length_max: usize,
}

pub const EVAL_REPORT_HEADER: &str =
    "episodes,return_mean,return_std,normalized_score,length_mean,length_min,length_max,goal_hit_fractions";

impl EvalReport {
    pub fn from_episodes(env: &MazeConfig, episodes: &[Episode], anchors: &ScoreAnchors) -> Self {
        let n = episodes.len().max(1) as f64;
        let returns: Vec<f64> = episodes.iter().map(|e| e.total_reward).collect();
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        let mut hits = vec![0.0; env.goals.len()];
        for e in episodes {
            if let Some(g) = e.goal {
                hits[g] += 1.0 / n;
            }
        }
        let lens: Vec<usize> = episodes.iter().map(|e| e.len()).collect();
        Self {
            episodes: episodes.len(),
            return_mean: mean,
            return_std: var.sqrt(),
            normalized_score: normalized_score(mean, anchors),
            goal_hit_fractions: hits,
            length_mean: lens.iter().sum::<usize>() as f64 / n,
            length_min: lens.iter().copied().min().unwrap_or(0),
            length_max: lens.iter().copied().max().unwrap_or(0),
        }
    }

    pub fn to_csv_line(&self) -> String {
        let hits: Vec<String> = self.goal_hit_fractions.iter().map(|h| h.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.episodes,
            self.return_mean,
            self.return_std,
            self.normalized_score,
            self.length_mean,
            self.length_min,
            self.length_max,
            hits.join(";")
        )
    }
}

/// Roll out `episodes` episodes; episode `i` draws its start state and any
/// policy noise from stream `i` of `base_seed`.
pub fn rollouts<F>(env: &MazeConfig, episodes: usize, base_seed: u64, mut policy: F) -> Vec<Episode>
where
    F: FnMut(&MazeState, &mut SeededRng) -> MazeAction,
{
    (0..episodes)
        .map(|i| {
            let mut rng = SeededRng::with_stream(base_seed, i as u64);
            let start = reset(env, &mut rng);
            run_episode(env, start, |s| policy(s, &mut rng))
        })
        .collect()
}

/// Deterministic actor action for one raw observation.
pub fn actor_action(actor: &Actor, stats: &NormStats, obs: &[f64]) -> Result<MazeAction> {
    let x = Matrix::from_vec(1, obs.len(), stats.normalize(obs))?;
    let a = act(actor, &x)?;
    Ok(MazeAction::new(a.get(0, 0), a.get(0, 1)))
}

/// Actor rollouts. With `noise_scale > 0` the policy sees
/// `obs + noise_scale * N(0, I)`; the dynamics keep the true state.
pub fn evaluate_actor(
    actor: &Actor,
    stats: &NormStats,
    env: &MazeConfig,
    episodes: usize,
    noise_scale: f64,
    base_seed: u64,
    anchors: &ScoreAnchors,
) -> Result<(EvalReport, Vec<Episode>)> {
    if noise_scale < 0.0 {
        return Err(Error::Config(format!("noise scale must be >= 0, got {noise_scale}")));
    }
    let mut failure = None;
    let eps = rollouts(env, episodes, base_seed, |s, rng| {
        let mut obs = s.observation();
        if noise_scale > 0.0 {
            for o in obs.iter_mut() {
                *o += noise_scale * rng.normal();
            }
        }
        actor_action(actor, stats, &obs).unwrap_or_else(|e| {
            failure.get_or_insert(e);
            MazeAction::new(0.0, 0.0)
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((EvalReport::from_episodes(env, &eps, anchors), eps))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrueQReport {
    pub states: usize,
    pub est_q_mean: f64,
    pub true_q_mean: f64,
    /// `est_q_mean - true_q_mean`.
    pub gap: f64,
}

pub const TRUE_Q_HEADER: &str = "states,est_q_mean,true_q_mean,gap";

impl TrueQReport {
    pub fn to_csv_line(&self) -> String {
        format!("{},{},{},{}", self.states, self.est_q_mean, self.true_q_mean, self.gap)
    }
}

/// Critic estimate `min(q1, q2)(s, π(s))` against the discounted return of a
/// full deterministic rollout of `π`, averaged over `n_states` initial states.
pub fn true_q_report(
    actor: &Actor,
    critic: &CriticEnsemble,
    stats: &NormStats,
    env: &MazeConfig,
    n_states: usize,
    gamma: f64,
    rng: &mut SeededRng,
) -> Result<TrueQReport> {
    if n_states == 0 {
        return Err(Error::Config("true-Q needs at least one state".into()));
    }
    let starts: Vec<MazeState> = (0..n_states).map(|_| reset(env, rng)).collect();
    let mut rows = Vec::with_capacity(n_states * STATE_DIM);
    for s in &starts {
        rows.extend(stats.normalize(&s.observation()));
    }
    let x = Matrix::from_vec(n_states, STATE_DIM, rows)?;
    let est = critic.q_min(&x, &act(actor, &x)?)?;
    let mut true_sum = 0.0;
    for s in &starts {
        let mut failure = None;
        let ep = run_episode(env, *s, |st| {
            actor_action(actor, stats, &st.observation()).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                MazeAction::new(0.0, 0.0)
            })
        });
        if let Some(e) = failure {
            return Err(e);
        }
        true_sum += ep.discounted_return(gamma);
    }
    let n = n_states as f64;
    let est_q_mean = est.iter().sum::<f64>() / n;
    let true_q_mean = true_sum / n;
    Ok(TrueQReport {
        states: n_states,
        est_q_mean,
        true_q_mean,
        gap: est_q_mean - true_q_mean,
    })
}

/// One trained method for the advantage comparison.
pub struct MethodCheckpoint<'a> {
    pub name: &'a str,
    pub actor: &'a Actor,
    pub critic: &'a CriticEnsemble,
    pub stats: &'a NormStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageRow {
    pub method: String,
    pub n_states: usize,
    pub mean_adv_policy: f64,
    pub mean_adv_data: f64,
}

pub const ADVANTAGE_HEADER: &str = "method,n_states,mean_adv_policy,mean_adv_data";

impl AdvantageRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.method, self.n_states, self.mean_adv_policy, self.mean_adv_data
        )
    }
}

/// Dataset indices for a shared state sample: without replacement when the
/// dataset is large enough, with replacement (and a warning) otherwise.
pub fn sample_state_indices(n_data: usize, n_states: usize, rng: &mut SeededRng) -> Vec<usize> {
    assert!(n_data > 0, "empty dataset");
    if n_states > n_data {
        log::warn!("{n_states} states requested from {n_data} transitions; sampling with replacement");
        return (0..n_states).map(|_| rng.index(n_data)).collect();
    }
    let mut idx: Vec<usize> = (0..n_data).collect();
    for i in 0..n_states {
        let j = i + rng.index(n_data - i);
        idx.swap(i, j);
    }
    idx.truncate(n_states);
    idx
}

/// Mean `A(s, π(s))` and `A(s, a_data)` under each method's own critic, all
/// methods scored on the same dataset states.
pub fn mean_advantage_report(
    methods: &[MethodCheckpoint<'_>],
    dataset: &OfflineDataset,
    n_states: usize,
    rng: &mut SeededRng,
) -> Result<Vec<AdvantageRow>> {
    if dataset.is_empty() || n_states == 0 {
        return Err(Error::Config("advantage report needs a non-empty dataset and n_states > 0".into()));
    }
    let idx = sample_state_indices(dataset.len(), n_states, rng);
    let raw_states = dataset.states_matrix().select_rows(&idx);
    let actions = dataset.actions_matrix().select_rows(&idx);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    methods
        .iter()
        .map(|m| {
            let s = m.stats.normalize_matrix(&raw_states);
            let pi = act(m.actor, &s)?;
            Ok(AdvantageRow {
                method: m.name.to_string(),
                n_states,
                mean_adv_policy: mean(advantage(m.critic, &s, &pi)?),
                mean_adv_data: mean(advantage(m.critic, &s, &actions)?),
            })
        })
        .collect()
}

pub const TRACE_HEADER: &str = "step,episode,t,x,y,vx,vy,fx,fy,reward,done";

/// Append evaluation episodes recorded at training step `step`.
pub fn write_trace_rows<W: Write>(mut w: W, step: u64, episodes: &[Episode]) -> std::io::Result<()> {
    for (i, ep) in episodes.iter().enumerate() {
        for (t, tr) in ep.transitions.iter().enumerate() {
            writeln!(
                w,
                "{step},{i},{t},{},{},{},{},{},{},{},{}",
                tr.s[0],
                tr.s[1],
                tr.s[2],
                tr.s[3],
                tr.a[0],
                tr.a[1],
                tr.r,
                u8::from(tr.done)
            )?;
        }
    }
    Ok(())
}

/// Inclusive training-step range `lo:hi`; either side may be empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepWindow {
    pub lo: u64,
    pub hi: u64,
}

impl StepWindow {
    pub const ALL: StepWindow = StepWindow { lo: 0, hi: u64::MAX };

    pub fn contains(&self, step: u64) -> bool {
        (self.lo..=self.hi).contains(&step)
    }
}

impl std::str::FromStr for StepWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("window must look like LO:HI, got '{s}'"));
        let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
        let lo = if lo.is_empty() { 0 } else { lo.trim().parse().map_err(|_| bad())? };
        let hi = if hi.is_empty() {
            u64::MAX
        } else {
            hi.trim().parse().map_err(|_| bad())?
        };
        if lo > hi {
            return Err(bad());
        }
        Ok(Self { lo, hi })
    }
}

/// Re-emit the recorded evaluation episodes whose training step falls in
/// `window` as a trajectory CSV, numbering episodes consecutively.
/// Returns the number of episodes written.
pub fn export_trace_window<W: Write>(trace: &str, window: StepWindow, mut w: W) -> Result<usize> {
    let io = |e| Error::io("<trajectory output>", e);
    writeln!(w, "{TRAJECTORY_HEADER}").map_err(io)?;
    let mut lines = trace.lines();
    match lines.next() {
        Some(h) if h == TRACE_HEADER => {}
        None => return Ok(0),
        Some(_) => return Err(Error::Config("trace file has an unexpected header".into())),
    }
    let mut current: Option<(u64, u64)> = None;
    let mut count = 0usize;
    for line in lines.filter(|l| !l.is_empty()) {
        let mut parts = line.splitn(3, ',');
        let bad = || Error::Config(format!("malformed trace line '{line}'"));
        let step: u64 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let ep: u64 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let rest = parts.next().ok_or_else(bad)?;
        if !window.contains(step) {
            continue;
        }
        if current != Some((step, ep)) {
            current = Some((step, ep));
            count += 1;
        }
        writeln!(w, "{},{rest}", count - 1).map_err(io)?;
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::{write_trajectory_csv, ACTION_DIM};

    fn zero_actor() -> Actor {
        let mut rng = SeededRng::new(0);
        let mut a = Actor::new(STATE_DIM, ACTION_DIM, &[8], 1.0, &mut rng).unwrap();
        a.net.params.scale(0.0);
        a
    }

    #[test]
    fn normalized_score_anchor_points() {
        let a = ScoreAnchors {
            j_random: 0.2,
            j_expert: 4.0,
        };
        assert!((normalized_score(0.2, &a)).abs() < 1e-12);
        assert!((normalized_score(4.0, &a) - 100.0).abs() < 1e-12);
        assert!(normalized_score(2.0, &a) < normalized_score(2.1, &a));
        assert!(normalized_score(1.0, &ScoreAnchors { j_random: 1.0, j_expert: 1.0 }).is_nan());
    }

    #[test]
    fn anchors_are_cached() {
        let dir = tempfile::tempdir().unwrap();
        let env = MazeConfig::default();
        let a = load_or_compute_anchors(&env, Some(dir.path())).unwrap();
        let text = fs::read_to_string(dir.path().join(ANCHOR_FILE)).unwrap();
        assert_eq!(text.lines().count(), 2);
        let b = load_or_compute_anchors(&env, Some(dir.path())).unwrap();
        assert_eq!(a, b);
        assert!(a.j_expert > 3.9 && a.j_random < a.j_expert);
    }

    #[test]
    fn expert_scores_near_100() {
        let env = MazeConfig::default();
        let anchors = compute_anchors(&env, 200, ANCHOR_SEED).unwrap();
        let eps = rollouts(&env, 200, 99, |s, rng| expert_controller(&env, s, 0, DEFAULT_EXPERT_NOISE, rng));
        let report = EvalReport::from_episodes(&env, &eps, &anchors);
        assert!((report.normalized_score - 100.0).abs() < 3.0, "{}", report.normalized_score);
        assert!(report.goal_hit_fractions.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn observation_noise_never_reaches_dynamics() {
        let env = MazeConfig::default();
        let anchors = ScoreAnchors { j_random: 0.0, j_expert: 4.0 };
        let actor = zero_actor();
        let stats = NormStats::identity(STATE_DIM);
        let (clean, e0) = evaluate_actor(&actor, &stats, &env, 3, 0.0, 5, &anchors).unwrap();
        let (noisy, e1) = evaluate_actor(&actor, &stats, &env, 3, 1.0, 5, &anchors).unwrap();
        assert_eq!(clean, noisy);
        for (a, b) in e0.iter().zip(&e1) {
            assert_eq!(a.transitions, b.transitions);
        }
        assert!(evaluate_actor(&actor, &stats, &env, 1, -1.0, 5, &anchors).is_err());
    }

    #[test]
    fn true_q_degenerate_cases() {
        let mut rng = SeededRng::new(3);
        let actor = Actor::new(STATE_DIM, ACTION_DIM, &[8], 1.0, &mut rng).unwrap();
        let critic = CriticEnsemble::new(STATE_DIM, ACTION_DIM, &[8], &[8], &actor.net, &mut rng).unwrap();
        let stats = NormStats::identity(STATE_DIM);
        let mut empty = MazeConfig::default();
        empty.goals.clear();
        let r = true_q_report(&actor, &critic, &stats, &empty, 4, 0.99, &mut SeededRng::new(1)).unwrap();
        assert_eq!(r.true_q_mean, 0.0);
        assert_eq!(r.gap, r.est_q_mean);

        // a goal covering the whole start region pays on the first step
        let mut near = MazeConfig::default();
        near.goals = vec![crate::maze::Goal { x: 3.5, y: 3.5, reward: 2.0, radius: 1.0 }];
        let r = true_q_report(&actor, &critic, &stats, &near, 4, 0.0, &mut SeededRng::new(1)).unwrap();
        assert_eq!(r.true_q_mean, 2.0);

        let a = true_q_report(&actor, &critic, &stats, &MazeConfig::default(), 10, 0.99, &mut SeededRng::new(8)).unwrap();
        let b = true_q_report(&actor, &critic, &stats, &MazeConfig::default(), 10, 0.99, &mut SeededRng::new(8)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.states, 10);
    }

    #[test]
    fn state_sampling() {
        let mut rng = SeededRng::new(0);
        let idx = sample_state_indices(10, 10, &mut rng);
        let mut sorted = idx.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(sample_state_indices(3, 7, &mut rng).len(), 7);
    }

    #[test]
    fn identical_methods_identical_advantages() {
        let mut rng = SeededRng::new(2);
        let actor = Actor::new(STATE_DIM, ACTION_DIM, &[8], 1.0, &mut rng).unwrap();
        let critic = CriticEnsemble::new(STATE_DIM, ACTION_DIM, &[8], &[8], &actor.net, &mut rng).unwrap();
        let env = MazeConfig::default();
        let eps = rollouts(&env, 2, 0, |_, r| random_controller(r));
        let tr: Vec<_> = eps.iter().flat_map(|e| e.transitions.clone()).collect();
        let data = OfflineDataset::from_transitions(&tr);
        let stats = NormStats::identity(STATE_DIM);
        let m = |name| MethodCheckpoint { name, actor: &actor, critic: &critic, stats: &stats };
        let rows = mean_advantage_report(&[m("a"), m("b")], &data, 50, &mut rng).unwrap();
        assert_eq!(rows[0].mean_adv_policy, rows[1].mean_adv_policy);
        assert_eq!(rows[0].mean_adv_data, rows[1].mean_adv_data);
    }

    #[test]
    fn trace_window_export() {
        let env = MazeConfig::default();
        let eps = rollouts(&env, 2, 0, |_, r| random_controller(r));
        let mut trace = format!("{TRACE_HEADER}\n").into_bytes();
        write_trace_rows(&mut trace, 0, &eps).unwrap();
        write_trace_rows(&mut trace, 100, &eps).unwrap();
        let trace = String::from_utf8(trace).unwrap();

        let mut out = Vec::new();
        let n = export_trace_window(&trace, "100:".parse().unwrap(), &mut out).unwrap();
        assert_eq!(n, 2);
        let mut direct = Vec::new();
        write_trajectory_csv(&mut direct, eps.iter().cloned().enumerate()).unwrap();
        assert_eq!(out, direct);

        let mut empty = Vec::new();
        assert_eq!(export_trace_window(&trace, "1:99".parse().unwrap(), &mut empty).unwrap(), 0);
        assert_eq!(String::from_utf8(empty).unwrap(), format!("{TRAJECTORY_HEADER}\n"));
        assert!("9:1".parse::<StepWindow>().is_err());
    }
}
