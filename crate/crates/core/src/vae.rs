//! Advantage-gated conditional VAE over actions.
//!
//! The encoder maps `s ⊕ a` to a diagonal Gaussian over a latent `z`; the
//! decoder maps `s ⊕ z` back to a bounded action. Training minimizes
//!
//! ```text
//! mean_i [ f_i * |a_i - decode(s_i, z_i)|^2 + kl_weight * KL(N(mu_i, sigma_i^2) || N(0, I)) ]
//! f_i = w1 * [A(s_i, a_i) > epsilon_A]
//! ```
//!
//! so only actions the critic rates above the threshold are reconstructed,
//! while the KL term keeps every posterior close to the prior. Sampling a
//! clipped prior latent then yields actions concentrated on the
//! high-advantage part of the dataset's support.

use crate::error::Result;
use crate::numerics::{AdamState, Matrix, Mlp, MlpSpec, OutputActivation, ParamGrads};
use crate::rng::SeededRng;

pub const LOG_SIGMA_MIN: f64 = -4.0;
pub const LOG_SIGMA_MAX: f64 = 15.0;

/// How the reconstruction term is weighted per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconGate {
    /// `w1 * [A(s, a) > epsilon_A]`
    Advantage,
    /// `w1` for every sample (plain conditional VAE).
    Always,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub w1: f64,
    pub epsilon_a: f64,
    pub kl_weight: f64,
    pub latent_clip: f64,
    pub learning_rate: f64,
    pub gate: ReconGate,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            w1: 1.0,
            epsilon_a: 0.0,
            kl_weight: 1.0,
            latent_clip: 0.5,
            learning_rate: 3e-4,
            gate: ReconGate::Advantage,
        }
    }
}

impl VaeConfig {
    pub fn gate_weight(&self, advantage: f64) -> f64 {
        match self.gate {
            ReconGate::Always => self.w1,
            ReconGate::Advantage if advantage > self.epsilon_a => self.w1,
            ReconGate::Advantage => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub state_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub action_bound: f64,
}

impl VaeModel {
    pub fn specs(
        state_dim: usize,
        action_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        action_bound: f64,
    ) -> (MlpSpec, MlpSpec) {
        (
            MlpSpec::new(
                state_dim + action_dim,
                hidden.to_vec(),
                2 * latent_dim,
                OutputActivation::Identity,
            ),
            MlpSpec::new(
                state_dim + latent_dim,
                hidden.to_vec(),
                action_dim,
                OutputActivation::TanhScaled(action_bound),
            ),
        )
    }

    pub fn new(
        state_dim: usize,
        action_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        action_bound: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let (enc, dec) = Self::specs(state_dim, action_dim, latent_dim, hidden, action_bound);
        Ok(Self {
            encoder: Mlp::init(enc, rng)?,
            decoder: Mlp::init(dec, rng)?,
            state_dim,
            action_dim,
            latent_dim,
            action_bound,
        })
    }

    pub fn decode(&self, states: &Matrix, z: &Matrix) -> Result<Matrix> {
        self.decoder.predict(&states.hcat(z)?)
    }
}

/// Posterior mean and standard deviation; `log_sigma` is clamped to
/// `[LOG_SIGMA_MIN, LOG_SIGMA_MAX]` before exponentiation.
pub fn encode(model: &VaeModel, states: &Matrix, actions: &Matrix) -> Result<(Matrix, Matrix)> {
    let out = model.encoder.predict(&states.hcat(actions)?)?;
    let l = model.latent_dim;
    let mu = out.slice_cols(0, l);
    let sigma = out
        .slice_cols(l, 2 * l)
        .map(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX).exp());
    Ok((mu, sigma))
}

/// `z = mu + sigma ⊙ noise`
pub fn reparameterize(mu: &Matrix, sigma: &Matrix, noise: &Matrix) -> Matrix {
    let mut z = mu.clone();
    for ((v, s), n) in z.data_mut().iter_mut().zip(sigma.data()).zip(noise.data()) {
        *v += s * n;
    }
    z
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Decode a prior latent clipped to `±latent_clip`.
pub fn sample_action(
    model: &VaeModel,
    states: &Matrix,
    latent_clip: f64,
    rng: &mut SeededRng,
) -> Result<Matrix> {
    let mut z = standard_normal(states.rows(), model.latent_dim, rng);
    for v in z.data_mut() {
        *v = v.clamp(-latent_clip, latent_clip);
    }
    model.decode(states, &z)
}

/// `KL(N(mu, sigma^2) || N(0, 1))` for one latent coordinate.
pub fn gaussian_kl(mu: f64, log_sigma: f64) -> f64 {
    0.5 * ((2.0 * log_sigma).exp() + mu * mu - 1.0 - 2.0 * log_sigma)
}

#[derive(Debug, Clone)]
pub struct ElboOutput {
    pub loss: f64,
    /// Mean gated squared reconstruction error.
    pub recon_term: f64,
    /// Mean KL divergence to the prior (before `kl_weight`).
    pub kl_term: f64,
    /// Samples whose reconstruction weight is nonzero.
    pub gated_in: usize,
    pub encoder_grads: ParamGrads,
    pub decoder_grads: ParamGrads,
}

/// Loss and exact gradients for fixed reparameterization noise.
pub fn elbo_loss(
    model: &VaeModel,
    states: &Matrix,
    actions: &Matrix,
    advantages: &[f64],
    config: &VaeConfig,
    noise: &Matrix,
) -> Result<ElboOutput> {
    let n = states.rows();
    let l = model.latent_dim;
    let nf = n as f64;
    let enc_cache = model.encoder.forward_cached(&states.hcat(actions)?)?;
    let enc_out = enc_cache.output();
    let mu = enc_out.slice_cols(0, l);
    let raw_ls = enc_out.slice_cols(l, 2 * l);
    let log_sigma = raw_ls.map(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX));
    let sigma = log_sigma.map(f64::exp);
    let z = reparameterize(&mu, &sigma, noise);

    let dec_cache = model.decoder.forward_cached(&states.hcat(&z)?)?;
    let recon = dec_cache.output();

    let weights: Vec<f64> = advantages.iter().map(|&a| config.gate_weight(a)).collect();
    let mut recon_sum = 0.0;
    let mut d_recon = Matrix::zeros(n, model.action_dim);
    for i in 0..n {
        let f = weights[i];
        let mut err = 0.0;
        for j in 0..model.action_dim {
            let diff = recon.get(i, j) - actions.get(i, j);
            err += diff * diff;
            d_recon.set(i, j, 2.0 * f * diff / nf);
        }
        recon_sum += f * err;
    }
    let mut kl_sum = 0.0;
    for i in 0..n {
        for d in 0..l {
            let (m, ls) = (mu.get(i, d), log_sigma.get(i, d));
            kl_sum += gaussian_kl(m, ls);
        }
    }
    let recon_term = recon_sum / nf;
    let kl_term = kl_sum / nf;
    let loss = recon_term + config.kl_weight * kl_term;

    let (dec_grads, d_dec_in) = model.decoder.backward_full(&dec_cache, &d_recon, true, true)?;
    let d_dec_in = d_dec_in.expect("requested");
    let kw = config.kl_weight / nf;
    let mut d_enc_out = Matrix::zeros(n, 2 * l);
    for i in 0..n {
        for d in 0..l {
            let dz = d_dec_in.get(i, model.state_dim + d);
            let (m, s) = (mu.get(i, d), sigma.get(i, d));
            d_enc_out.set(i, d, dz + kw * m);
            let raw = raw_ls.get(i, d);
            let inside = (LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(&raw);
            let dls = if inside {
                dz * s * noise.get(i, d) + kw * (s * s - 1.0)
            } else {
                0.0
            };
            d_enc_out.set(i, l + d, dls);
        }
    }
    let enc_grads = model.encoder.backward(&enc_cache, &d_enc_out)?;
    Ok(ElboOutput {
        loss,
        recon_term,
        kl_term,
        gated_in: weights.iter().filter(|&&w| w != 0.0).count(),
        encoder_grads: enc_grads,
        decoder_grads: dec_grads.expect("requested"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeOptimizer {
    pub encoder: AdamState,
    pub decoder: AdamState,
}

impl VaeOptimizer {
    pub fn new(model: &VaeModel) -> Self {
        Self {
            encoder: AdamState::new(&model.encoder.params),
            decoder: AdamState::new(&model.decoder.params),
        }
    }
}

/// One Adam step on the gated ELBO with fresh reparameterization noise.
pub fn vae_update(
    model: &mut VaeModel,
    opt: &mut VaeOptimizer,
    states: &Matrix,
    actions: &Matrix,
    advantages: &[f64],
    config: &VaeConfig,
    rng: &mut SeededRng,
) -> Result<ElboOutput> {
    let noise = standard_normal(states.rows(), model.latent_dim, rng);
    let out = elbo_loss(model, states, actions, advantages, config, &noise)?;
    opt.encoder
        .apply(&mut model.encoder.params, &out.encoder_grads, config.learning_rate);
    opt.decoder
        .apply(&mut model.decoder.params, &out.decoder_grads, config.learning_rate);
    Ok(out)
}
