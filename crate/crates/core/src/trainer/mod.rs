//! The offline training loop.
//!
//! One [`Trainer::train_step`] performs, in order: minibatch sampling, the
//! VAE update (gated by advantages from the critic as it stood before this
//! step), the Q update, the V update and, every `policy_update_freq` steps,
//! candidate selection, the actor update and the target updates.

mod checkpoint;
mod config;
mod metrics;

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

pub use checkpoint::{load_checkpoint, LoadedCheckpoint, CHECKPOINT_VERSION, MANIFEST_FILE};
pub use config::{TrainConfig, Variant};
pub use metrics::{read_metrics_csv, write_metrics_csv, IntervalAccumulator, MetricsRow, METRICS_HEADER};

use crate::critic::{advantage, polyak_update, q_update, v_update, CriticEnsemble, CriticOptimizer};
use crate::dataset::{compute_norm_stats, sample_batch, Batch, BatchSampler, NormStats, OfflineDataset, PreparedData};
use crate::error::{Error, Result};
use crate::eval::{evaluate_actor, load_or_compute_anchors, true_q_report, write_trace_rows, ScoreAnchors, TRACE_HEADER};
use crate::maze::MazeConfig;
use crate::numerics::AdamState;
use crate::policy::{act, outcomes_to_matrix, policy_update, select_bar, select_tilde, Actor, Branch, TildeSource};
use crate::rng::{stream, SeededRng};
use crate::vae::{vae_update, VaeModel, VaeOptimizer};

pub const ACTION_BOUND: f64 = 1.0;
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "eval_trace.csv";
pub const FINAL_DIR: &str = "final";

/// Stages of one training step, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Sample,
    VaeUpdate,
    QUpdate,
    VUpdate,
    Select,
    PolicyUpdate,
    TargetUpdate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStepMetrics {
    pub loss: f64,
    pub lambda: f64,
    pub mean_adv_data: f64,
    pub mean_adv_selected: f64,
    pub frac_vae_chosen: f64,
    pub frac_self_learn: f64,
    pub constraint_gap: f64,
    pub value_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub q_loss: f64,
    pub v_loss: f64,
    /// `(reconstruction, kl)` when the variant trains a VAE.
    pub vae: Option<(f64, f64)>,
    pub policy: Option<PolicyStepMetrics>,
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub actor: Actor,
    pub actor_opt: AdamState,
    pub critic: CriticEnsemble,
    pub critic_opt: CriticOptimizer,
    /// Present for every variant; left untouched by those without a VAE.
    pub vae: VaeModel,
    pub vae_opt: VaeOptimizer,
    pub stats: NormStats,
    pub sampler: BatchSampler,
    pub noise_rng: SeededRng,
    pub vae_rng: SeededRng,
    pub eval_rng: SeededRng,
    pub acc: IntervalAccumulator,
    pub metrics: Vec<MetricsRow>,
}

impl TrainState {
    pub fn init(config: &TrainConfig, state_dim: usize, action_dim: usize, stats: NormStats) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut init = SeededRng::with_stream(seed, stream::INIT);
        let actor = Actor::new(state_dim, action_dim, &config.actor_hidden_dims(), ACTION_BOUND, &mut init)?;
        let critic = CriticEnsemble::new(
            state_dim,
            action_dim,
            &config.critic_hidden_dims(),
            &config.critic_hidden_dims(),
            &actor.net,
            &mut init,
        )?;
        let vae = VaeModel::new(
            state_dim,
            action_dim,
            config.latent_dim_for(action_dim),
            &config.vae_hidden_dims(),
            ACTION_BOUND,
            &mut init,
        )?;
        Ok(Self {
            step: 0,
            actor_opt: AdamState::new(&actor.net.params),
            critic_opt: CriticOptimizer::new(&critic),
            vae_opt: VaeOptimizer::new(&vae),
            actor,
            critic,
            vae,
            stats,
            sampler: BatchSampler::new(SeededRng::with_stream(seed, stream::SAMPLER), config.batch_size),
            noise_rng: SeededRng::with_stream(seed, stream::TARGET_NOISE),
            vae_rng: SeededRng::with_stream(seed, stream::VAE),
            eval_rng: SeededRng::with_stream(seed, stream::EVAL),
            acc: IntervalAccumulator::default(),
            metrics: Vec::new(),
        })
    }
}

/// Result of one evaluation event.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSnapshot {
    pub return_mean: f64,
    pub return_std: f64,
    pub normalized_score: f64,
    pub est_q: f64,
    pub true_q: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub env: MazeConfig,
    pub data: PreparedData,
    pub state: TrainState,
    pub anchors: ScoreAnchors,
    /// When set, every phase of every step is appended here.
    pub call_trace: Option<Vec<Phase>>,
    /// Directory for metrics, the evaluation trace and checkpoints.
    pub output_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig, env: MazeConfig, dataset: &OfflineDataset, anchors: ScoreAnchors) -> Result<Self> {
        config.validate()?;
        env.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        let stats = compute_norm_stats(dataset);
        let state = TrainState::init(&config, dataset.state_dim(), dataset.action_dim(), stats.clone())?;
        Ok(Self {
            data: PreparedData::new(dataset, stats),
            config,
            env,
            state,
            anchors,
            call_trace: None,
            output_dir: None,
        })
    }

    /// Continue from a checkpoint written by a run with the same seed,
    /// architecture and hyperparameters.
    pub fn resume(
        config: TrainConfig,
        env: MazeConfig,
        dataset: &OfflineDataset,
        anchors: ScoreAnchors,
        checkpoint: &Path,
    ) -> Result<Self> {
        let mut t = Self::new(config, env, dataset, anchors)?;
        t.state = resume(checkpoint, &t.config)?;
        t.data = PreparedData::new(dataset, t.state.stats.clone());
        Ok(t)
    }

    fn trace(&mut self, p: Phase) {
        if let Some(t) = self.call_trace.as_mut() {
            t.push(p);
        }
    }

    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.state.step + 1;
        let variant = self.config.variant;
        let critic_cfg = self.config.critic_config(ACTION_BOUND);

        self.trace(Phase::Sample);
        let batch = sample_batch(&self.data, &mut self.state.sampler);

        let mut vae_metrics = None;
        if variant.uses_vae() {
            self.trace(Phase::VaeUpdate);
            let st = &mut self.state;
            let adv = advantage(&st.critic, &batch.states, &batch.actions)?;
            let out = vae_update(
                &mut st.vae,
                &mut st.vae_opt,
                &batch.states,
                &batch.actions,
                &adv,
                &self.config.vae_config(),
                &mut st.vae_rng,
            )?;
            self.check_finite("vae loss", out.loss, step, &batch)?;
            vae_metrics = Some((out.recon_term, out.kl_term));
        }

        self.trace(Phase::QUpdate);
        let st = &mut self.state;
        let q_loss = q_update(&mut st.critic, &mut st.critic_opt, &critic_cfg, &batch, &mut st.noise_rng)?;
        self.check_finite("q loss", q_loss, step, &batch)?;

        self.trace(Phase::VUpdate);
        let st = &mut self.state;
        let v_loss = v_update(&mut st.critic, &mut st.critic_opt, &critic_cfg, &batch)?;
        self.check_finite("v loss", v_loss, step, &batch)?;

        let mut policy = None;
        if step % self.config.policy_update_freq == 0 {
            self.trace(Phase::Select);
            let pcfg = self.config.policy_config();
            let st = &mut self.state;
            let vae = variant
                .uses_vae()
                .then_some((&st.vae, self.config.latent_clip));
            let sel = select_tilde(
                &batch.states,
                &batch.actions,
                vae,
                &st.critic,
                self.config.vae_candidates,
                &mut st.vae_rng,
            )?;
            let pi = act(&st.actor, &batch.states)?;
            let outcomes = select_bar(&sel, &pi, &pcfg);

            let n = outcomes.len() as f64;
            let a_bar = outcomes_to_matrix(&outcomes);
            let q_bar = st.critic.q_min(&batch.states, &a_bar)?;

            self.trace(Phase::PolicyUpdate);
            let st = &mut self.state;
            let out = policy_update(&mut st.actor, &mut st.actor_opt, &st.critic, &batch.states, &outcomes, &pcfg)?;
            self.check_finite("policy loss", out.loss, step, &batch)?;
            let value_gap = out.q_values.iter().zip(&q_bar).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;

            self.trace(Phase::TargetUpdate);
            let st = &mut self.state;
            polyak_update(&mut st.critic, &st.actor.net.params, self.config.tau);

            let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
            policy = Some(PolicyStepMetrics {
                loss: out.loss,
                lambda: out.lambda,
                mean_adv_data: mean(&sel.adv_data),
                mean_adv_selected: mean(&sel.advantages),
                frac_vae_chosen: sel.sources.iter().filter(|s| **s == TildeSource::Vae).count() as f64 / n,
                frac_self_learn: outcomes.iter().filter(|o| o.branch == Branch::SelfLearn).count() as f64 / n,
                constraint_gap: out.constraint_gap,
                value_gap,
            });
        }

        self.state.step = step;
        let m = StepMetrics {
            step,
            q_loss,
            v_loss,
            vae: vae_metrics,
            policy,
        };
        self.state.acc.add(&m);
        Ok(m)
    }

    fn check_finite(&self, what: &str, value: f64, step: u64, batch: &Batch) -> Result<()> {
        if value.is_finite() {
            return Ok(());
        }
        let dump = self.output_dir.as_ref().and_then(|dir| {
            let path = dir.join(format!("nonfinite_batch_step{step}.csv"));
            dump_batch(&path, batch).ok().map(|_| path)
        });
        log::error!("non-finite {what} at step {step}");
        Err(Error::NonFinite {
            what: what.to_string(),
            step,
            dump,
        })
    }

    /// Deterministic evaluation plus the Monte-Carlo value check. Episode
    /// seeds depend only on the run seed and the step, so every variant is
    /// scored on the same start states.
    pub fn evaluate(&self) -> Result<(EvalSnapshot, Vec<crate::maze::Episode>)> {
        let st = &self.state;
        let base = eval_seed(&st.eval_rng, st.step);
        let (report, episodes) = evaluate_actor(
            &st.actor,
            &st.stats,
            &self.env,
            self.config.eval_episodes,
            0.0,
            base,
            &self.anchors,
        )?;
        let mut q_rng = SeededRng::with_stream(base, u64::MAX);
        let tq = true_q_report(
            &st.actor,
            &st.critic,
            &st.stats,
            &self.env,
            self.config.true_q_states,
            self.config.gamma,
            &mut q_rng,
        )?;
        Ok((
            EvalSnapshot {
                return_mean: report.return_mean,
                return_std: report.return_std,
                normalized_score: report.normalized_score,
                est_q: tq.est_q_mean,
                true_q: tq.true_q_mean,
            },
            episodes,
        ))
    }

    fn log_row(&mut self, with_eval: bool) -> Result<()> {
        let mut row = MetricsRow {
            step: self.state.step,
            ..Default::default()
        };
        self.state.acc.drain_into(&mut row);
        if with_eval {
            let (snap, episodes) = self.evaluate()?;
            row.eval_return_mean = Some(snap.return_mean);
            row.eval_return_std = Some(snap.return_std);
            row.normalized_score = Some(snap.normalized_score);
            row.est_q = Some(snap.est_q);
            row.true_q = Some(snap.true_q);
            if let Some(dir) = &self.output_dir {
                let path = dir.join(TRACE_FILE);
                let mut f = OpenOptions::new()
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                write_trace_rows(&mut f, self.state.step, &episodes).map_err(|e| Error::io(&path, e))?;
            }
            log::info!(
                "step {} return {:.3} score {:.1} est_q {:.3} true_q {:.3}",
                row.step,
                snap.return_mean,
                snap.normalized_score,
                snap.est_q,
                snap.true_q
            );
        }
        self.state.metrics.push(row);
        Ok(())
    }

    fn prepare_output(&self) -> Result<()> {
        let Some(dir) = &self.output_dir else {
            return Ok(());
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        // keep only the trace recorded up to the current step
        let path = dir.join(TRACE_FILE);
        let old = fs::read_to_string(&path).unwrap_or_default();
        let mut text = format!("{TRACE_HEADER}\n");
        for line in old.lines().skip(1) {
            let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
            let keep = match step {
                Some(s) if self.state.metrics.is_empty() => s < self.state.step,
                Some(s) => s <= self.state.step,
                None => false,
            };
            if keep {
                text.push_str(line);
                text.push('\n');
            }
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn write_metrics(&self) -> Result<()> {
        if let Some(dir) = &self.output_dir {
            let path = dir.join(METRICS_FILE);
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, &self.state.metrics).map_err(|e| Error::io(&path, e))?;
            fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        checkpoint::save_checkpoint(dir, &self.config, &self.state)
    }

    /// Train until `config.total_steps`, logging every `log_every` steps,
    /// evaluating at step 0 and every `eval_every` steps, checkpointing every
    /// `checkpoint_every` steps and at the end.
    pub fn run(&mut self) -> Result<()> {
        self.prepare_output()?;
        if self.state.step == 0 && self.state.metrics.is_empty() {
            self.log_row(true)?;
            self.write_metrics()?;
        }
        while self.state.step < self.config.total_steps {
            self.train_step()?;
            let t = self.state.step;
            let eval = t % self.config.eval_every == 0;
            if eval || t % self.config.log_every == 0 {
                self.log_row(eval)?;
                self.write_metrics()?;
            }
            if t % self.config.checkpoint_every == 0 {
                if let Some(dir) = &self.output_dir {
                    self.save_checkpoint(&dir.join(format!("step_{t}")))?;
                }
            }
        }
        if let Some(dir) = &self.output_dir {
            self.write_metrics()?;
            self.save_checkpoint(&dir.join(FINAL_DIR))?;
        }
        Ok(())
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.state.metrics
    }
}

/// Base seed of the evaluation event at `step`.
fn eval_seed(eval_rng: &SeededRng, step: u64) -> u64 {
    let mut r = eval_rng.clone();
    r.next_u64() ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn dump_batch(path: &Path, b: &Batch) -> Result<()> {
    let mut out = String::from("index,state,action,reward,next_state,done\n");
    for i in 0..b.len() {
        let join = |r: &[f64]| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            b.indices[i],
            join(b.states.row(i)),
            join(b.actions.row(i)),
            b.rewards[i],
            join(b.next_states.row(i)),
            b.dones[i]
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Rebuild the training state from `checkpoint`, refusing checkpoints from
/// another seed, architecture or hyperparameter set.
pub fn resume(checkpoint: &Path, config: &TrainConfig) -> Result<TrainState> {
    checkpoint::load_state(checkpoint, config)
}

/// Mean of the last `last` evaluation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalEval {
    pub evaluations: usize,
    pub return_mean: f64,
    pub return_stderr: f64,
    pub score_mean: f64,
    pub est_q_mean: f64,
    pub true_q_mean: f64,
}

pub fn final_evaluation(rows: &[MetricsRow], last: usize) -> Option<FinalEval> {
    let evals: Vec<&MetricsRow> = rows.iter().filter(|r| r.eval_return_mean.is_some()).collect();
    let tail = &evals[evals.len().saturating_sub(last)..];
    if tail.is_empty() {
        return None;
    }
    let n = tail.len() as f64;
    let mean = |f: &dyn Fn(&MetricsRow) -> Option<f64>| tail.iter().filter_map(|r| f(r)).sum::<f64>() / n;
    let return_mean = mean(&|r| r.eval_return_mean);
    let var = if tail.len() > 1 {
        tail.iter()
            .map(|r| (r.eval_return_mean.unwrap() - return_mean).powi(2))
            .sum::<f64>()
            / (n - 1.0)
    } else {
        0.0
    };
    Some(FinalEval {
        evaluations: tail.len(),
        return_mean,
        return_stderr: (var / n).sqrt(),
        score_mean: mean(&|r| r.normalized_score),
        est_q_mean: mean(&|r| r.est_q),
        true_q_mean: mean(&|r| r.true_q),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub final_checkpoint: PathBuf,
    pub final_eval: Option<FinalEval>,
}

/// Full run from `config.dataset_path` into `config.checkpoint_dir` on the
/// default maze. Resumes from `resume_from` when given.
pub fn train(config: &TrainConfig, resume_from: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = OfflineDataset::load(&config.dataset_path)?;
    let env = MazeConfig::default();
    let out = config.checkpoint_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let anchors = load_or_compute_anchors(&env, Some(&out))?;
    let mut trainer = match resume_from {
        Some(ckpt) => Trainer::resume(config.clone(), env, &dataset, anchors, ckpt)?,
        None => Trainer::new(config.clone(), env, &dataset, anchors)?,
    };
    trainer.output_dir = Some(out.clone());
    fs::write(out.join("config.txt"), config.to_kv_text()).map_err(|e| Error::io(&out, e))?;
    trainer.run()?;
    Ok(TrainOutcome {
        final_eval: final_evaluation(trainer.metrics(), 10),
        metrics: trainer.state.metrics,
        final_checkpoint: out.join(FINAL_DIR),
    })
}
