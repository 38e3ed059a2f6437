//! Checkpoint directories: one parameter file per network, Adam moments per
//! trained network, the metrics so far and a `key = value` manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::TrainConfig;
use super::metrics::{read_metrics_csv, write_metrics_csv, IntervalAccumulator};
use super::TrainState;
use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::numerics::codec::{decode_params, encode_params};
use crate::numerics::{AdamState, Mlp, MlpParams};
use crate::rng::SeededRng;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
const CONFIG_FILE: &str = "config.txt";
const METRICS_FILE: &str = "metrics.csv";
const FORMAT_TAG: &str = "a2pr-checkpoint";

fn hex_f64s(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{:016x}", x.to_bits()))
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_hex_f64s(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|t| {
            u64::from_str_radix(t, 16)
                .map(f64::from_bits)
                .map_err(|_| Error::Checkpoint(format!("bad float bits '{t}'")))
        })
        .collect()
}

fn networks(state: &TrainState) -> Vec<(&'static str, &Mlp)> {
    let c = &state.critic;
    vec![
        ("actor", &state.actor.net),
        ("q1", &c.q1),
        ("q2", &c.q2),
        ("v", &c.v),
        ("q1_target", &c.q1_target),
        ("q2_target", &c.q2_target),
        ("policy_target", &c.policy_target),
        ("vae_encoder", &state.vae.encoder),
        ("vae_decoder", &state.vae.decoder),
    ]
}

fn networks_mut(state: &mut TrainState) -> Vec<(&'static str, &mut Mlp)> {
    let c = &mut state.critic;
    vec![
        ("actor", &mut state.actor.net),
        ("q1", &mut c.q1),
        ("q2", &mut c.q2),
        ("v", &mut c.v),
        ("q1_target", &mut c.q1_target),
        ("q2_target", &mut c.q2_target),
        ("policy_target", &mut c.policy_target),
        ("vae_encoder", &mut state.vae.encoder),
        ("vae_decoder", &mut state.vae.decoder),
    ]
}

fn optimizers(state: &TrainState) -> Vec<(&'static str, &AdamState)> {
    vec![
        ("actor", &state.actor_opt),
        ("q1", &state.critic_opt.q1),
        ("q2", &state.critic_opt.q2),
        ("v", &state.critic_opt.v),
        ("vae_encoder", &state.vae_opt.encoder),
        ("vae_decoder", &state.vae_opt.decoder),
    ]
}

fn optimizers_mut(state: &mut TrainState) -> Vec<(&'static str, &mut AdamState)> {
    vec![
        ("actor", &mut state.actor_opt),
        ("q1", &mut state.critic_opt.q1),
        ("q2", &mut state.critic_opt.q2),
        ("v", &mut state.critic_opt.v),
        ("vae_encoder", &mut state.vae_opt.encoder),
        ("vae_decoder", &mut state.vae_opt.decoder),
    ]
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write `state` to `dir`, replacing any previous checkpoint there.
pub fn save_checkpoint(dir: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    for (name, net) in networks(state) {
        write(&tmp.join(format!("{name}.bin")), encode_params(&net.params))?;
    }
    for (name, opt) in optimizers(state) {
        write(&tmp.join(format!("{name}.adam_m.bin")), encode_params(&opt.first_moment))?;
        write(&tmp.join(format!("{name}.adam_v.bin")), encode_params(&opt.second_moment))?;
    }

    let mut m: BTreeMap<String, String> = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("format", FORMAT_TAG.to_string());
    put("version", CHECKPOINT_VERSION.to_string());
    put("step", state.step.to_string());
    put("seed", config.seed.to_string());
    put("config_hash", config.config_hash());
    put("variant", config.variant.to_string());
    put("state_dim", state.stats.mean.len().to_string());
    put("action_dim", state.vae.action_dim.to_string());
    put("rng_sampler", state.sampler.rng.state_string());
    put("rng_noise", state.noise_rng.state_string());
    put("rng_vae", state.vae_rng.state_string());
    put("rng_eval", state.eval_rng.state_string());
    put("norm_mean", hex_f64s(&state.stats.mean));
    put("norm_std", hex_f64s(&state.stats.std));
    put("accumulator", state.acc.to_bits_string());
    for (name, opt) in optimizers(state) {
        put(&format!("adam_step.{name}"), opt.step.to_string());
    }
    let manifest: String = m.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    write(&tmp.join(MANIFEST_FILE), manifest)?;
    write(&tmp.join(CONFIG_FILE), config.to_kv_text())?;
    let mut metrics = Vec::new();
    write_metrics_csv(&mut metrics, &state.metrics).map_err(|e| Error::io(&tmp, e))?;
    write(&tmp.join(METRICS_FILE), metrics)?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut m = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad manifest line '{line}'")))?;
        m.insert(k.trim().to_string(), v.trim().to_string());
    }
    if m.get("format").map(String::as_str) != Some(FORMAT_TAG) {
        return Err(Error::BadMagic(path.display().to_string()));
    }
    let version: u32 = field(&m, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(m)
}

fn raw<'a>(m: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("manifest lacks '{key}'")))
}

fn field<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = raw(m, key)?;
    v.parse()
        .map_err(|_| Error::Checkpoint(format!("manifest field '{key}' has bad value '{v}'")))
}

fn load_params(dir: &Path, file: &str, expected: &MlpParams) -> Result<MlpParams> {
    let p = decode_params(&read(&dir.join(file))?)?;
    if p.shapes() != expected.shapes() {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch in {file}: checkpoint has layers {:?}, config expects {:?}",
            p.shapes(),
            expected.shapes()
        )));
    }
    Ok(p)
}

/// Load the state in `dir` for continuation under `config`.
pub fn load_state(dir: &Path, config: &TrainConfig) -> Result<TrainState> {
    let m = read_manifest(dir)?;
    let seed: u64 = field(&m, "seed")?;
    if seed != config.seed {
        return Err(Error::Checkpoint(format!(
            "seed mismatch: checkpoint was written with seed {seed}, config has {}",
            config.seed
        )));
    }
    let state_dim: usize = field(&m, "state_dim")?;
    let action_dim: usize = field(&m, "action_dim")?;
    let stats = NormStats {
        mean: parse_hex_f64s(raw(&m, "norm_mean")?)?,
        std: parse_hex_f64s(raw(&m, "norm_std")?)?,
    };
    if stats.mean.len() != state_dim || stats.std.len() != state_dim {
        return Err(Error::Checkpoint("normalization stats do not match state_dim".into()));
    }
    let mut state = TrainState::init(config, state_dim, action_dim, stats)?;
    for (name, net) in networks_mut(&mut state) {
        net.params = load_params(dir, &format!("{name}.bin"), &net.params)?;
    }
    if raw(&m, "config_hash")? != config.config_hash() {
        return Err(Error::Checkpoint(
            "config hash differs from the checkpoint's (hyperparameters changed)".into(),
        ));
    }
    for (name, opt) in optimizers_mut(&mut state) {
        opt.first_moment = load_params(dir, &format!("{name}.adam_m.bin"), &opt.first_moment)?;
        opt.second_moment = load_params(dir, &format!("{name}.adam_v.bin"), &opt.second_moment)?;
        opt.step = field(&m, &format!("adam_step.{name}"))?;
    }
    state.step = field(&m, "step")?;
    state.sampler.rng = SeededRng::from_state_string(raw(&m, "rng_sampler")?)?;
    state.noise_rng = SeededRng::from_state_string(raw(&m, "rng_noise")?)?;
    state.vae_rng = SeededRng::from_state_string(raw(&m, "rng_vae")?)?;
    state.eval_rng = SeededRng::from_state_string(raw(&m, "rng_eval")?)?;
    state.acc = IntervalAccumulator::from_bits_string(raw(&m, "accumulator")?)?;
    let metrics_path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    state.metrics = read_metrics_csv(&text)?;
    Ok(state)
}

/// A checkpoint together with the configuration it was trained under.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

/// Load a checkpoint using its own stored configuration.
pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let config = TrainConfig::from_kv_text(&text)?;
    let state = load_state(dir, &config)?;
    Ok(LoadedCheckpoint { config, state })
}
