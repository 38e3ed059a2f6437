//! Continuous 2D point-mass maze with several rewarded goals.
//!
//! The agent observes `(x, y, vx, vy)` and applies a force `(fx, fy)` in
//! `[-1, 1]^2`. Reward is sparse: an episode ends with the goal's reward the
//! first time the agent enters a goal disc, or with zero at the horizon.

use std::io::Write;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

/// Velocity feedback gain of the scripted expert.
const EXPERT_VELOCITY_GAIN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Goal {
    pub x: f64,
    pub y: f64,
    pub reward: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MazeConfig {
    pub goals: Vec<Goal>,
    pub bounds: Bounds,
    pub dt: f64,
    pub damping: f64,
    pub max_speed: f64,
    pub max_steps: u32,
    pub start_center: (f64, f64),
    pub start_noise: f64,
}

impl Default for MazeConfig {
    fn default() -> Self {
        let goal = |x, y, reward| Goal {
            x,
            y,
            reward,
            radius: 0.5,
        };
        Self {
            goals: vec![goal(1.0, 1.0, 4.0), goal(6.0, 1.0, 2.0), goal(1.0, 6.0, 1.0)],
            bounds: Bounds {
                x_min: 0.0,
                x_max: 7.0,
                y_min: 0.0,
                y_max: 7.0,
            },
            dt: 0.1,
            damping: 0.9,
            max_speed: 2.0,
            max_steps: 200,
            start_center: (3.5, 3.5),
            start_noise: 0.25,
        }
    }
}

impl MazeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let b = &self.bounds;
        if !(b.x_min < b.x_max && b.y_min < b.y_max) {
            return bad(format!("empty bounds {b:?}"));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad(format!("damping must lie in (0, 1], got {}", self.damping));
        }
        if !(self.max_speed > 0.0) || self.max_steps == 0 || self.start_noise < 0.0 {
            return bad("max_speed, max_steps must be positive and start_noise >= 0".into());
        }
        for g in &self.goals {
            if !(g.radius > 0.0) || !b.contains(g.x, g.y) {
                return bad(format!("goal {g:?} needs radius > 0 and a center inside bounds"));
            }
        }
        Ok(())
    }

    /// Index of the highest-reward goal (first on ties).
    pub fn best_goal(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, g) in self.goals.iter().enumerate() {
            if best.is_none_or(|b| g.reward > self.goals[b].reward) {
                best = Some(i);
            }
        }
        best
    }

    /// Stable textual fingerprint, used to key cached score anchors.
    pub fn fingerprint(&self) -> String {
        let mut s = format!(
            "bounds={:?};dt={};damping={};max_speed={};max_steps={};start={:?};noise={}",
            self.bounds,
            self.dt,
            self.damping,
            self.max_speed,
            self.max_steps,
            self.start_center,
            self.start_noise
        );
        for g in &self.goals {
            s.push_str(&format!(";goal={},{},{},{}", g.x, g.y, g.reward, g.radius));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MazeState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub t: u32,
}

impl MazeState {
    pub fn observation(&self) -> [f64; STATE_DIM] {
        [self.x, self.y, self.vx, self.vy]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MazeAction {
    pub fx: f64,
    pub fy: f64,
}

impl MazeAction {
    pub fn new(fx: f64, fy: f64) -> Self {
        Self { fx, fy }
    }

    pub fn clipped(self) -> Self {
        Self {
            fx: self.fx.clamp(-1.0, 1.0),
            fy: self.fy.clamp(-1.0, 1.0),
        }
    }

    pub fn as_array(&self) -> [f64; ACTION_DIM] {
        [self.fx, self.fy]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: [f64; STATE_DIM],
    pub a: [f64; ACTION_DIM],
    pub r: f64,
    pub s_next: [f64; STATE_DIM],
    pub done: bool,
}

pub fn reset(config: &MazeConfig, rng: &mut SeededRng) -> MazeState {
    let n = config.start_noise;
    let (cx, cy) = config.start_center;
    let (dx, dy) = if n > 0.0 {
        (rng.uniform(-n, n), rng.uniform(-n, n))
    } else {
        (0.0, 0.0)
    };
    let b = &config.bounds;
    MazeState {
        x: (cx + dx).clamp(b.x_min, b.x_max),
        y: (cy + dy).clamp(b.y_min, b.y_max),
        vx: 0.0,
        vy: 0.0,
        t: 0,
    }
}

/// Reward of the best goal whose disc contains `(x, y)`, if any.
pub fn goal_hit(config: &MazeConfig, x: f64, y: f64) -> Option<usize> {
    let mut hit: Option<usize> = None;
    for (i, g) in config.goals.iter().enumerate() {
        let d = ((x - g.x).powi(2) + (y - g.y).powi(2)).sqrt();
        if d <= g.radius && hit.is_none_or(|h| g.reward > config.goals[h].reward) {
            hit = Some(i);
        }
    }
    hit
}

pub fn step(config: &MazeConfig, state: &MazeState, action: MazeAction) -> (MazeState, f64, bool) {
    let a = action.clipped();
    let mut vx = config.damping * state.vx + a.fx * config.dt;
    let mut vy = config.damping * state.vy + a.fy * config.dt;
    let speed = (vx * vx + vy * vy).sqrt();
    if speed > config.max_speed {
        let k = config.max_speed / speed;
        vx *= k;
        vy *= k;
    }
    let b = &config.bounds;
    let x = (state.x + vx * config.dt).clamp(b.x_min, b.x_max);
    let y = (state.y + vy * config.dt).clamp(b.y_min, b.y_max);
    let t = state.t + 1;
    let hit = goal_hit(config, x, y);
    let reward = hit.map_or(0.0, |i| config.goals[i].reward);
    let done = hit.is_some() || t >= config.max_steps;
    (MazeState { x, y, vx, vy, t }, reward, done)
}

/// Pursuit controller: unit vector toward the goal minus velocity feedback,
/// plus Gaussian noise, clipped to the action box.
pub fn expert_controller(
    config: &MazeConfig,
    state: &MazeState,
    target: usize,
    noise_scale: f64,
    rng: &mut SeededRng,
) -> MazeAction {
    let g = &config.goals[target];
    let (dx, dy) = (g.x - state.x, g.y - state.y);
    let dist = (dx * dx + dy * dy).sqrt();
    let (ux, uy) = if dist > 0.0 { (dx / dist, dy / dist) } else { (0.0, 0.0) };
    let mut fx = ux - EXPERT_VELOCITY_GAIN * state.vx;
    let mut fy = uy - EXPERT_VELOCITY_GAIN * state.vy;
    if noise_scale > 0.0 {
        fx += noise_scale * rng.normal();
        fy += noise_scale * rng.normal();
    }
    MazeAction::new(fx, fy).clipped()
}

pub fn random_controller(rng: &mut SeededRng) -> MazeAction {
    MazeAction::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0))
}

#[derive(Debug, Clone, Default)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub total_reward: f64,
    /// Goal index reached, if any.
    pub goal: Option<usize>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut g = 0.0;
        for tr in self.transitions.iter().rev() {
            g = tr.r + gamma * g;
        }
        g
    }
}

/// Roll out one episode from `start` until termination.
pub fn run_episode<F>(config: &MazeConfig, start: MazeState, mut policy: F) -> Episode
where
    F: FnMut(&MazeState) -> MazeAction,
{
    let mut state = start;
    let mut ep = Episode::default();
    loop {
        let a = policy(&state).clipped();
        let (next, r, done) = step(config, &state, a);
        ep.transitions.push(Transition {
            s: state.observation(),
            a: a.as_array(),
            r,
            s_next: next.observation(),
            done,
        });
        ep.total_reward += r;
        if r != 0.0 {
            ep.goal = goal_hit(config, next.x, next.y);
        }
        state = next;
        if done {
            return ep;
        }
    }
}

pub const TRAJECTORY_HEADER: &str = "episode,t,x,y,vx,vy,fx,fy,reward,done";

/// One row per transition: the pre-action state, the applied force, and the
/// resulting reward and termination flag.
pub fn write_trajectory_csv<W: Write>(
    mut w: W,
    episodes: impl IntoIterator<Item = (usize, Episode)>,
) -> std::io::Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for (idx, ep) in episodes {
        for (t, tr) in ep.transitions.iter().enumerate() {
            writeln!(
                w,
                "{idx},{t},{},{},{},{},{},{},{},{}",
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

#[cfg(test)]
mod tests {
    use super::*;

    fn at(x: f64, y: f64) -> MazeState {
        MazeState {
            x,
            y,
            vx: 0.0,
            vy: 0.0,
            t: 0,
        }
    }

    #[test]
    fn default_config_is_valid() {
        MazeConfig::default().validate().unwrap();
        assert_eq!(MazeConfig::default().best_goal(), Some(0));
    }

    #[test]
    fn noiseless_reset_is_start_center() {
        let cfg = MazeConfig {
            start_noise: 0.0,
            ..MazeConfig::default()
        };
        let s = reset(&cfg, &mut SeededRng::new(1));
        assert_eq!(s, at(3.5, 3.5));
    }

    #[test]
    fn reset_deterministic_and_in_bounds() {
        let cfg = MazeConfig {
            start_center: (0.1, 6.95),
            start_noise: 0.5,
            ..MazeConfig::default()
        };
        let mut a = SeededRng::new(4);
        let mut b = SeededRng::new(4);
        for _ in 0..100 {
            let s = reset(&cfg, &mut a);
            assert_eq!(s, reset(&cfg, &mut b));
            assert!(cfg.bounds.contains(s.x, s.y));
        }
    }

    #[test]
    fn zero_action_stays_put() {
        let cfg = MazeConfig::default();
        let s = at(3.5, 3.5);
        let (n, r, d) = step(&cfg, &s, MazeAction::new(0.0, 0.0));
        assert_eq!((n.x, n.y), (3.5, 3.5));
        assert_eq!(r, 0.0);
        assert!(!d);
    }

    #[test]
    fn stepping_into_best_goal_pays_four() {
        let cfg = MazeConfig::default();
        let s = MazeState {
            x: 1.5,
            y: 1.05,
            vx: -0.5,
            vy: 0.0,
            t: 10,
        };
        let (n, r, d) = step(&cfg, &s, MazeAction::new(-1.0, 0.0));
        assert!(((n.x - 1.0).powi(2) + (n.y - 1.0).powi(2)).sqrt() <= 0.5);
        assert_eq!(r, 4.0);
        assert!(d);
    }

    #[test]
    fn horizon_terminates_without_reward() {
        let cfg = MazeConfig::default();
        let s = MazeState {
            t: cfg.max_steps - 1,
            ..at(3.5, 3.5)
        };
        let (_, r, d) = step(&cfg, &s, MazeAction::new(0.3, 0.3));
        assert_eq!(r, 0.0);
        assert!(d);
    }

    #[test]
    fn overlapping_goals_pick_highest_reward() {
        let mut cfg = MazeConfig::default();
        cfg.goals = vec![
            Goal { x: 2.0, y: 2.0, reward: 1.0, radius: 1.0 },
            Goal { x: 2.2, y: 2.0, reward: 2.0, radius: 1.0 },
        ];
        assert_eq!(goal_hit(&cfg, 2.1, 2.0), Some(1));
    }

    #[test]
    fn speed_and_box_clipping() {
        let cfg = MazeConfig::default();
        let s = MazeState {
            x: 6.99,
            y: 3.0,
            vx: 5.0,
            vy: 0.0,
            t: 0,
        };
        let (n, _, _) = step(&cfg, &s, MazeAction::new(3.0, 0.0));
        assert!((n.vx * n.vx + n.vy * n.vy).sqrt() <= cfg.max_speed + 1e-12);
        assert_eq!(n.x, 7.0);
    }

    #[test]
    fn expert_brakes_at_goal_and_pursues() {
        let cfg = MazeConfig::default();
        let mut rng = SeededRng::new(0);
        let s = MazeState {
            x: 1.0,
            y: 1.0,
            vx: 0.1,
            vy: -0.1,
            t: 0,
        };
        let a = expert_controller(&cfg, &s, 0, 0.0, &mut rng);
        assert!((a.fx * a.fx + a.fy * a.fy).sqrt() <= 0.05);
        let a = expert_controller(&cfg, &at(0.2, 1.0), 0, 0.0, &mut rng);
        assert!(a.fx > 0.0);
        let a2 = expert_controller(&cfg, &at(0.2, 1.0), 0, 0.0, &mut rng);
        assert_eq!(a, a2);
    }

    #[test]
    fn random_controller_range_and_mean() {
        let mut rng = SeededRng::new(5);
        let mut sum = [0.0; 2];
        let n = 100_000;
        for _ in 0..n {
            let a = random_controller(&mut rng);
            assert!(a.fx.abs() <= 1.0 && a.fy.abs() <= 1.0);
            sum[0] += a.fx;
            sum[1] += a.fy;
        }
        assert!((sum[0] / n as f64).abs() < 0.02);
        assert!((sum[1] / n as f64).abs() < 0.02);
        let mut a = SeededRng::new(9);
        let mut b = SeededRng::new(9);
        assert_eq!(random_controller(&mut a), random_controller(&mut b));
    }

    #[test]
    fn expert_reaches_every_goal() {
        let cfg = MazeConfig::default();
        let mut rng = SeededRng::new(21);
        for target in 0..cfg.goals.len() {
            let mut reached = 0;
            let episodes = 200;
            for _ in 0..episodes {
                let start = reset(&cfg, &mut rng);
                let mut noise = rng.fork(0);
                let ep = run_episode(&cfg, start, |s| {
                    expert_controller(&cfg, s, target, 0.1, &mut noise)
                });
                if ep.goal == Some(target) {
                    reached += 1;
                }
            }
            assert!(reached as f64 >= 0.99 * episodes as f64, "goal {target}: {reached}");
        }
    }

    #[test]
    fn rewards_in_support() {
        let cfg = MazeConfig::default();
        let mut rng = SeededRng::new(8);
        for _ in 0..200 {
            let start = reset(&cfg, &mut rng);
            let mut r2 = rng.fork(1);
            let ep = run_episode(&cfg, start, |_| random_controller(&mut r2));
            for tr in &ep.transitions {
                assert!([0.0, 1.0, 2.0, 4.0].contains(&tr.r));
                if tr.done {
                    assert!(tr.r > 0.0 || ep.len() == cfg.max_steps as usize);
                }
            }
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let cfg = MazeConfig::default();
        let ep = run_episode(&cfg, at(1.2, 1.0), |_| MazeAction::new(-1.0, 0.0));
        let mut out = Vec::new();
        write_trajectory_csv(&mut out, [(0, ep.clone())]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with(TRAJECTORY_HEADER));
        assert_eq!(text.lines().count(), 1 + ep.len());
    }
}
