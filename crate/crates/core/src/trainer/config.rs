//! Training configuration and its flat `key = value` text form.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::critic::CriticConfig;
use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::vae::{ReconGate, VaeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Gated VAE, candidate selection and the adaptive branch.
    A2pr,
    /// Behavior cloning toward dataset actions only.
    Td3bc,
    /// Ungated VAE; otherwise as `A2pr`.
    BaseVae,
    /// No VAE; the branch rule still applies to dataset actions.
    NoEpbl,
    /// Gated VAE, but always constrain toward the selected action.
    NoAapc,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::A2pr,
        Variant::Td3bc,
        Variant::BaseVae,
        Variant::NoEpbl,
        Variant::NoAapc,
    ];

    pub fn uses_vae(self) -> bool {
        matches!(self, Variant::A2pr | Variant::BaseVae | Variant::NoAapc)
    }

    pub fn adaptive_branch(self) -> bool {
        matches!(self, Variant::A2pr | Variant::BaseVae | Variant::NoEpbl)
    }

    pub fn recon_gate(self) -> ReconGate {
        match self {
            Variant::BaseVae => ReconGate::Always,
            _ => ReconGate::Advantage,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::A2pr => "a2pr",
            Variant::Td3bc => "td3bc",
            Variant::BaseVae => "base_vae",
            Variant::NoEpbl => "no_epbl",
            Variant::NoAapc => "no_aapc",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant '{s}' (expected one of a2pr, td3bc, base_vae, no_epbl, no_aapc)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub policy_update_freq: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub w1: f64,
    pub w2: f64,
    pub epsilon_a: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub v_lr: f64,
    pub vae_lr: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub expectile: f64,
    pub kl_weight: f64,
    pub latent_clip: f64,
    pub vae_candidates: usize,
    pub critic_hidden: usize,
    pub critic_layers: usize,
    pub actor_hidden: usize,
    pub actor_layers: usize,
    pub vae_hidden: usize,
    pub vae_layers: usize,
    /// 0 selects twice the action dimension.
    pub latent_dim: usize,
    pub true_q_states: usize,
    pub variant: Variant,
    pub dataset_path: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 500_000,
            batch_size: 256,
            policy_update_freq: 2,
            eval_every: 5_000,
            eval_episodes: 10,
            log_every: 5_000,
            checkpoint_every: 50_000,
            seed: 0,
            gamma: 0.99,
            tau: 5e-3,
            alpha: 2.5,
            w1: 1.0,
            w2: 1.0,
            epsilon_a: 0.0,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            v_lr: 3e-4,
            vae_lr: 3e-4,
            policy_noise: 0.2,
            noise_clip: 0.5,
            expectile: 0.5,
            kl_weight: 1.0,
            latent_clip: 0.5,
            vae_candidates: 1,
            critic_hidden: 256,
            critic_layers: 3,
            actor_hidden: 256,
            actor_layers: 2,
            vae_hidden: 256,
            vae_layers: 2,
            latent_dim: 0,
            true_q_states: 10,
            variant: Variant::A2pr,
            dataset_path: PathBuf::from("dataset.bin"),
            checkpoint_dir: PathBuf::from("checkpoints"),
        }
    }
}

/// Keys that do not change the trajectory of a run; excluded from the hash
/// so a run can be extended or relocated and still resume.
const UNHASHED: [&str; 5] = [
    "total_steps",
    "checkpoint_every",
    "seed",
    "dataset_path",
    "checkpoint_dir",
];

macro_rules! kv_fields {
    ($($name:ident),* $(,)?) => {
        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Set one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $(stringify!($name) => {
                        self.$name = parse_value(key, value)?;
                    })*
                    _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), format_value(&self.$name))),*]
            }
        }
    };
}

kv_fields!(
    total_steps,
    batch_size,
    policy_update_freq,
    eval_every,
    eval_episodes,
    log_every,
    checkpoint_every,
    seed,
    gamma,
    tau,
    alpha,
    w1,
    w2,
    epsilon_a,
    actor_lr,
    critic_lr,
    v_lr,
    vae_lr,
    policy_noise,
    noise_clip,
    expectile,
    kl_weight,
    latent_clip,
    vae_candidates,
    critic_hidden,
    critic_layers,
    actor_hidden,
    actor_layers,
    vae_hidden,
    vae_layers,
    latent_dim,
    true_q_states,
    variant,
    dataset_path,
    checkpoint_dir,
);

trait ConfigValue: Sized {
    fn parse_text(s: &str) -> Option<Self>;
    fn to_text(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_text(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn to_text(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(f64, usize);

impl ConfigValue for u64 {
    fn parse_text(s: &str) -> Option<Self> {
        // allow 5e5-style counts
        s.parse()
            .ok()
            .or_else(|| s.parse::<f64>().ok().filter(|v| *v >= 0.0 && v.fract() == 0.0).map(|v| v as u64))
    }
    fn to_text(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Variant {
    fn parse_text(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn to_text(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for PathBuf {
    fn parse_text(s: &str) -> Option<Self> {
        Some(PathBuf::from(s))
    }
    fn to_text(&self) -> String {
        self.display().to_string()
    }
}

fn parse_value<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    if key == "variant" {
        // surface the variant's own message
        value.parse::<Variant>()?;
    }
    T::parse_text(value).ok_or_else(|| Error::Config(format!("bad value '{value}' for '{key}'")))
}

fn format_value<T: ConfigValue>(v: &T) -> String {
    v.to_text()
}

impl TrainConfig {
    /// Parse `key = value` lines over the defaults; `#` starts a comment.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_kv_text(text)?;
        Ok(cfg)
    }

    pub fn merge_kv_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn to_kv_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 over every trajectory-relevant key.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !UNHASHED.contains(&k) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("w1", self.w1),
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("v_lr", self.v_lr),
            ("vae_lr", self.vae_lr),
            ("latent_clip", self.latent_clip),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.gamma > 1.0 {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if !(self.expectile > 0.0 && self.expectile < 1.0) {
            return Err(Error::Config(format!("expectile must lie in (0, 1), got {}", self.expectile)));
        }
        if self.w2 < 0.0 || self.kl_weight < 0.0 || self.policy_noise < 0.0 || self.noise_clip < 0.0 {
            return Err(Error::Config("w2, kl_weight, policy_noise, noise_clip must be >= 0".into()));
        }
        let counts = [
            ("batch_size", self.batch_size as u64),
            ("policy_update_freq", self.policy_update_freq),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes as u64),
            ("log_every", self.log_every),
            ("checkpoint_every", self.checkpoint_every),
            ("vae_candidates", self.vae_candidates as u64),
            ("critic_hidden", self.critic_hidden as u64),
            ("critic_layers", self.critic_layers as u64),
            ("actor_hidden", self.actor_hidden as u64),
            ("actor_layers", self.actor_layers as u64),
            ("vae_hidden", self.vae_hidden as u64),
            ("vae_layers", self.vae_layers as u64),
            ("true_q_states", self.true_q_states as u64),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn latent_dim_for(&self, action_dim: usize) -> usize {
        if self.latent_dim == 0 {
            2 * action_dim
        } else {
            self.latent_dim
        }
    }

    pub fn critic_hidden_dims(&self) -> Vec<usize> {
        vec![self.critic_hidden; self.critic_layers]
    }

    pub fn actor_hidden_dims(&self) -> Vec<usize> {
        vec![self.actor_hidden; self.actor_layers]
    }

    pub fn vae_hidden_dims(&self) -> Vec<usize> {
        vec![self.vae_hidden; self.vae_layers]
    }

    pub fn critic_config(&self, action_bound: f64) -> CriticConfig {
        CriticConfig {
            gamma: self.gamma,
            tau: self.tau,
            policy_noise_sigma: self.policy_noise,
            noise_clip: self.noise_clip,
            action_bound,
            q_lr: self.critic_lr,
            v_lr: self.v_lr,
            expectile: self.expectile,
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            alpha: self.alpha,
            w2: self.w2,
            epsilon_a: self.epsilon_a,
            actor_lr: self.actor_lr,
            candidates: self.vae_candidates,
            adaptive: self.variant.adaptive_branch(),
        }
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            w1: self.w1,
            epsilon_a: self.epsilon_a,
            kl_weight: self.kl_weight,
            latent_clip: self.latent_clip,
            learning_rate: self.vae_lr,
            gate: self.variant.recon_gate(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_table_values() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 256);
        assert_eq!(c.policy_update_freq, 2);
        assert_eq!(c.tau, 5e-3);
        assert_eq!((c.policy_noise, c.noise_clip), (0.2, 0.5));
        assert_eq!((c.critic_hidden, c.critic_layers), (256, 3));
        assert_eq!((c.actor_hidden, c.actor_layers), (256, 2));
        assert_eq!(c.epsilon_a, 0.0);
        assert_eq!(c.total_steps, 500_000);
        c.validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let mut c = TrainConfig::default();
        c.variant = Variant::NoAapc;
        c.alpha = 40.0;
        c.critic_hidden = 64;
        let back = TrainConfig::from_kv_text(&c.to_kv_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn kv_parsing_comments_and_errors() {
        let c = TrainConfig::from_kv_text("# header\nseed = 4 # trailing\n\nvariant=td3bc\ntotal_steps = 5e5\n")
            .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.variant, Variant::Td3bc);
        assert_eq!(c.total_steps, 500_000);
        assert!(TrainConfig::from_kv_text("bogus = 1").is_err());
        assert!(TrainConfig::from_kv_text("seed").is_err());
        assert!(TrainConfig::from_kv_text("variant = sac").is_err());
        assert!(TrainConfig::from_kv_text("alpha = x").is_err());
    }

    #[test]
    fn hash_ignores_run_length_and_paths() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.total_steps = 7;
        b.checkpoint_dir = "elsewhere".into();
        assert_eq!(a.config_hash(), b.config_hash());
        b.critic_hidden = 32;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn variant_rules() {
        assert!(!Variant::Td3bc.uses_vae() && !Variant::NoEpbl.uses_vae());
        assert!(!Variant::NoAapc.adaptive_branch() && !Variant::Td3bc.adaptive_branch());
        assert_eq!(Variant::BaseVae.recon_gate(), ReconGate::Always);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }
}
