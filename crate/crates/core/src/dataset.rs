//! Offline transition datasets: synthesis from scripted maze controllers,
//! the `A2PRDS01` binary format, state standardization and minibatch
//! sampling.
//!
//! File layout, all little-endian:
//!
//! | field        | type                     |
//! |--------------|--------------------------|
//! | magic        | `b"A2PRDS01"`            |
//! | version      | `u32` (= 1)              |
//! | n            | `u32`                    |
//! | state_dim    | `u32`                    |
//! | action_dim   | `u32`                    |
//! | states       | `n * state_dim` × `f32`  |
//! | actions      | `n * action_dim` × `f32` |
//! | rewards      | `n` × `f32`              |
//! | next_states  | `n * state_dim` × `f32`  |
//! | dones        | `n` × `u8` (0/1)         |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::maze::{
    self, expert_controller, random_controller, MazeConfig, Transition, ACTION_DIM, STATE_DIM,
};
use crate::numerics::Matrix;
use crate::rng::SeededRng;

pub const MAGIC: &[u8; 8] = b"A2PRDS01";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 8 + 4 * 4;
pub const STD_FLOOR: f64 = 1e-3;
pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_EXPERT_NOISE: f64 = 0.1;

/// Episodes longer than this abort generation.
const MAX_EPISODE_STEPS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    state_dim: usize,
    action_dim: usize,
    states: Vec<f32>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
    next_states: Vec<f32>,
    dones: Vec<u8>,
}

impl OfflineDataset {
    pub fn from_transitions(transitions: &[Transition]) -> Self {
        let n = transitions.len();
        let mut d = Self {
            state_dim: STATE_DIM,
            action_dim: ACTION_DIM,
            states: Vec::with_capacity(n * STATE_DIM),
            actions: Vec::with_capacity(n * ACTION_DIM),
            rewards: Vec::with_capacity(n),
            next_states: Vec::with_capacity(n * STATE_DIM),
            dones: Vec::with_capacity(n),
        };
        for t in transitions {
            d.states.extend(t.s.iter().map(|&v| v as f32));
            d.actions.extend(t.a.iter().map(|&v| v as f32));
            d.rewards.push(t.r as f32);
            d.next_states.extend(t.s_next.iter().map(|&v| v as f32));
            d.dones.push(u8::from(t.done));
        }
        d
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state(&self, i: usize) -> &[f32] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f32] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f32] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn reward(&self, i: usize) -> f32 {
        self.rewards[i]
    }

    pub fn done(&self, i: usize) -> bool {
        self.dones[i] != 0
    }

    pub fn rewards(&self) -> &[f32] {
        &self.rewards
    }

    pub fn states_matrix(&self) -> Matrix {
        to_matrix(&self.states, self.state_dim)
    }

    pub fn actions_matrix(&self) -> Matrix {
        to_matrix(&self.actions, self.action_dim)
    }

    pub fn next_states_matrix(&self) -> Matrix {
        to_matrix(&self.next_states, self.state_dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(
            HEADER_LEN + 4 * (self.states.len() * 2 + self.actions.len() + n) + n,
        );
        out.extend_from_slice(MAGIC);
        for v in [VERSION, n as u32, self.state_dim as u32, self.action_dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for arr in [&self.states, &self.actions, &self.rewards, &self.next_states] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.dones);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::BadMagic("dataset file".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated("dataset header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let (n, sd, ad) = (word(1) as usize, word(2) as usize, word(3) as usize);
        if sd == 0 || ad == 0 {
            return Err(Error::Length(format!(
                "state_dim {sd} and action_dim {ad} must be positive"
            )));
        }
        let expected = n
            .checked_mul(4 * (2 * sd + ad + 1) + 1)
            .ok_or_else(|| Error::Length("header sizes overflow".into()))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < expected {
            return Err(Error::Truncated(format!(
                "header declares {n} transitions ({expected} payload bytes), found {}",
                payload.len()
            )));
        }
        if payload.len() > expected {
            return Err(Error::Length(format!(
                "{} bytes after the declared payload",
                payload.len() - expected
            )));
        }
        let mut cursor = payload;
        let mut floats = |count: usize| -> Vec<f32> {
            let (head, tail) = cursor.split_at(4 * count);
            cursor = tail;
            head.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let states = floats(n * sd);
        let actions = floats(n * ad);
        let rewards = floats(n);
        let next_states = floats(n * sd);
        let dones = cursor.to_vec();
        if let Some(bad) = dones.iter().find(|&&d| d > 1) {
            return Err(Error::Length(format!("done flag {bad} is not 0/1")));
        }
        Ok(Self {
            state_dim: sd,
            action_dim: ad,
            states,
            actions,
            rewards,
            next_states,
            dones,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Count of transitions per distinct reward value, ascending.
    pub fn reward_histogram(&self) -> Vec<(f32, usize)> {
        let mut hist: Vec<(f32, usize)> = Vec::new();
        for &r in &self.rewards {
            match hist.iter_mut().find(|(v, _)| *v == r) {
                Some((_, c)) => *c += 1,
                None => hist.push((r, 1)),
            }
        }
        hist.sort_by(|a, b| a.0.total_cmp(&b.0));
        hist
    }
}

fn to_matrix(v: &[f32], cols: usize) -> Matrix {
    Matrix::from_vec(v.len() / cols, cols, v.iter().map(|&x| x as f64).collect())
        .expect("dataset arrays are length-consistent")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Controller {
    Expert { target: usize },
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecipeEntry {
    pub controller: Controller,
    pub fraction: f64,
}

/// Ordered list of controller shares, written `kind:target:fraction` joined
/// by commas, e.g. `expert:g0:0.05,random:_:0.95`.
#[derive(Debug, Clone, PartialEq)]
pub struct Recipe(pub Vec<RecipeEntry>);

impl Recipe {
    /// 5% / 45% / 50% expert data toward goals 0, 1, 2.
    pub fn multi_goal() -> Self {
        Self(vec![
            RecipeEntry { controller: Controller::Expert { target: 0 }, fraction: 0.05 },
            RecipeEntry { controller: Controller::Expert { target: 1 }, fraction: 0.45 },
            RecipeEntry { controller: Controller::Expert { target: 2 }, fraction: 0.50 },
        ])
    }

    /// 99% uniform-random actions, 1% expert toward goal 0.
    pub fn mostly_random() -> Self {
        Self(vec![
            RecipeEntry { controller: Controller::Random, fraction: 0.99 },
            RecipeEntry { controller: Controller::Expert { target: 0 }, fraction: 0.01 },
        ])
    }

    pub fn validate(&self, env: &MazeConfig) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Config("empty recipe".into()));
        }
        let mut sum = 0.0;
        for e in &self.0 {
            if !(0.0..=1.0).contains(&e.fraction) {
                return Err(Error::Config(format!("fraction {} outside [0, 1]", e.fraction)));
            }
            if let Controller::Expert { target } = e.controller {
                if target >= env.goals.len() {
                    return Err(Error::Config(format!("no goal g{target}")));
                }
            }
            sum += e.fraction;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("recipe fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let bad = || Error::Config(format!("recipe entry '{part}' is not kind:target:fraction"));
            let fields: Vec<&str> = part.split(':').collect();
            let [kind, target, fraction] = fields[..] else {
                return Err(bad());
            };
            let fraction: f64 = fraction.parse().map_err(|_| bad())?;
            let controller = match kind {
                "random" => Controller::Random,
                "expert" => {
                    let idx = target.strip_prefix('g').unwrap_or(target);
                    Controller::Expert {
                        target: idx.parse().map_err(|_| bad())?,
                    }
                }
                _ => return Err(bad()),
            };
            entries.push(RecipeEntry { controller, fraction });
        }
        Ok(Recipe(entries))
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|e| match e.controller {
                Controller::Expert { target } => format!("expert:g{target}:{}", e.fraction),
                Controller::Random => format!("random:_:{}", e.fraction),
            })
            .collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSummary {
    /// Transitions contributed by each recipe entry.
    pub per_entry: Vec<usize>,
    pub episodes: Vec<usize>,
}

/// Fill each recipe entry's share of `total` with whole episodes (the last
/// episode of an entry may be cut), concatenated in recipe order.
pub fn generate_maze_dataset(
    env: &MazeConfig,
    recipe: &Recipe,
    total: usize,
    expert_noise: f64,
    rng: &mut SeededRng,
) -> Result<(OfflineDataset, GenerationSummary)> {
    env.validate()?;
    recipe.validate(env)?;
    if total == 0 {
        return Err(Error::Config("total transitions must be positive".into()));
    }
    let mut budgets: Vec<usize> = recipe
        .0
        .iter()
        .map(|e| (e.fraction * total as f64).round() as usize)
        .collect();
    let head: usize = budgets[..budgets.len() - 1].iter().sum();
    *budgets.last_mut().unwrap() = total.saturating_sub(head);

    let mut all = Vec::with_capacity(total);
    let mut summary = GenerationSummary {
        per_entry: Vec::new(),
        episodes: Vec::new(),
    };
    for (entry, &budget) in recipe.0.iter().zip(&budgets) {
        let mut produced = 0;
        let mut episodes = 0;
        while produced < budget {
            let mut state = maze::reset(env, rng);
            episodes += 1;
            let mut steps = 0;
            loop {
                let a = match entry.controller {
                    Controller::Expert { target } => {
                        expert_controller(env, &state, target, expert_noise, rng)
                    }
                    Controller::Random => random_controller(rng),
                };
                let (next, r, done) = maze::step(env, &state, a);
                all.push(Transition {
                    s: state.observation(),
                    a: a.as_array(),
                    r,
                    s_next: next.observation(),
                    done,
                });
                produced += 1;
                steps += 1;
                state = next;
                if done || produced == budget {
                    break;
                }
                if steps >= MAX_EPISODE_STEPS {
                    return Err(Error::GenerationTimeout(format!(
                        "{entry:?} ran {steps} steps without terminating"
                    )));
                }
            }
        }
        summary.per_entry.push(produced);
        summary.episodes.push(episodes);
    }
    all.truncate(total);
    Ok((OfflineDataset::from_transitions(&all), summary))
}

/// Per-dimension standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Mean and population std over the rows of all given matrices, std
    /// floored at [`STD_FLOOR`].
    pub fn from_matrices(mats: &[&Matrix]) -> Self {
        let dim = mats[0].cols();
        let count: usize = mats.iter().map(|m| m.rows()).sum();
        let mut mean = vec![0.0; dim];
        for m in mats {
            for r in 0..m.rows() {
                for (acc, v) in mean.iter_mut().zip(m.row(r)) {
                    *acc += v;
                }
            }
        }
        for v in &mut mean {
            *v /= count as f64;
        }
        let mut var = vec![0.0; dim];
        for m in mats {
            for r in 0..m.rows() {
                for ((acc, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Self { mean, std }
    }

    pub fn normalize(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, sd))| (v - m) / sd)
            .collect()
    }

    pub fn denormalize(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, sd))| v * sd + m)
            .collect()
    }

    pub fn normalize_matrix(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
        out
    }
}

pub fn compute_norm_stats(dataset: &OfflineDataset) -> NormStats {
    NormStats::from_matrices(&[&dataset.states_matrix(), &dataset.next_states_matrix()])
}

pub fn normalize_state(stats: &NormStats, s: &[f64]) -> Vec<f64> {
    stats.normalize(s)
}

/// A minibatch promoted to 64-bit, states already standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub states: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub next_states: Matrix,
    pub dones: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Dataset arrays promoted to `f64` with states standardized once up front.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub stats: NormStats,
    pub states: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub next_states: Matrix,
    pub dones: Vec<f64>,
}

impl PreparedData {
    pub fn new(dataset: &OfflineDataset, stats: NormStats) -> Self {
        Self {
            states: stats.normalize_matrix(&dataset.states_matrix()),
            actions: dataset.actions_matrix(),
            rewards: dataset.rewards.iter().map(|&r| r as f64).collect(),
            next_states: stats.normalize_matrix(&dataset.next_states_matrix()),
            dones: dataset.dones.iter().map(|&d| d as f64).collect(),
            stats,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn gather(&self, indices: Vec<usize>) -> Batch {
        Batch {
            states: self.states.select_rows(&indices),
            actions: self.actions.select_rows(&indices),
            rewards: indices.iter().map(|&i| self.rewards[i]).collect(),
            next_states: self.next_states.select_rows(&indices),
            dones: indices.iter().map(|&i| self.dones[i]).collect(),
            indices,
        }
    }
}

/// Uniform sampling with replacement from its own generator.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSampler {
    pub rng: SeededRng,
    pub batch_size: usize,
}

impl BatchSampler {
    pub fn new(rng: SeededRng, batch_size: usize) -> Self {
        Self { rng, batch_size }
    }

    pub fn indices(&mut self, n: usize) -> Vec<usize> {
        assert!(n > 0, "cannot sample from an empty dataset");
        (0..self.batch_size).map(|_| self.rng.index(n)).collect()
    }
}

pub fn sample_batch(data: &PreparedData, sampler: &mut BatchSampler) -> Batch {
    let idx = sampler.indices(data.len());
    data.gather(idx)
}
