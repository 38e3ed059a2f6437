use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};

use a2pr_core::dataset::{generate_maze_dataset, OfflineDataset, Recipe, DEFAULT_EXPERT_NOISE};
use a2pr_core::eval::{
    evaluate_actor, export_trace_window, load_or_compute_anchors, mean_advantage_report, rollouts,
    true_q_report, EvalReport, MethodCheckpoint, StepWindow, ADVANTAGE_HEADER, EVAL_REPORT_HEADER,
    TRUE_Q_HEADER,
};
use a2pr_core::maze::{expert_controller, random_controller, write_trajectory_csv, MazeConfig};
use a2pr_core::rng::{stream, SeededRng};
use a2pr_core::trainer::{self, load_checkpoint, TrainConfig, TRACE_FILE};
use a2pr_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "a2pr", version, about = "Offline RL with advantage-guided policy regularization")]
struct Cli {
    /// Random seed (overrides the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path: dataset file, checkpoint directory or report CSV
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Synthesize an offline maze dataset
    GenData {
        /// Comma-separated `controller:target:fraction` entries
        #[arg(long, default_value = "expert:g0:0.05,expert:g1:0.45,expert:g2:0.50")]
        recipe: String,
        /// Number of transitions
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_EXPERT_NOISE)]
        expert_noise: f64,
    },
    /// Train a policy; every config key is also a flag
    Train(TrainArgs),
    /// Roll out a checkpoint (or a scripted controller) and score it
    Eval {
        #[arg(long, required_unless_present = "controller")]
        ckpt: Option<PathBuf>,
        /// Evaluate `expert` or `random` directly instead of a checkpoint
        #[arg(long, value_parser = ["expert", "random"])]
        controller: Option<String>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Observation noise scale(s), comma-separated
        #[arg(long, default_value = "0")]
        noise: String,
    },
    /// Critic estimate vs Monte-Carlo return from initial states
    TrueQ {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10)]
        states: usize,
        /// Discount; defaults to the checkpoint's
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Mean advantage of each method's policy on shared dataset states
    MeanAdv {
        #[arg(long)]
        dataset: PathBuf,
        /// `name=checkpoint_dir`, repeatable
        #[arg(long = "method", required = true)]
        methods: Vec<String>,
        #[arg(long, default_value_t = 1000)]
        states: usize,
    },
    /// Trajectory CSV from a checkpoint or a recorded evaluation trace
    ExportTraj {
        #[arg(long, required_unless_present = "trace")]
        ckpt: Option<PathBuf>,
        /// Recorded `eval_trace.csv`
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Training-step range `LO:HI` of recorded episodes
        #[arg(long)]
        window: Option<String>,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
}

/// Flags generated from the config keys, plus `--resume`.
#[derive(Debug, Clone, Default)]
struct TrainArgs {
    overrides: Vec<(String, String)>,
    resume: Option<PathBuf>,
}

impl FromArgMatches for TrainArgs {
    fn from_arg_matches(m: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        let mut out = Self::default();
        out.update_from_arg_matches(m)?;
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> std::result::Result<(), clap::Error> {
        for key in TrainConfig::KEYS.iter().filter(|k| **k != "seed") {
            if let Some(v) = m.get_one::<String>(key) {
                self.overrides.push((key.to_string(), v.clone()));
            }
        }
        if let Some(p) = m.get_one::<PathBuf>("resume") {
            self.resume = Some(p.clone());
        }
        Ok(())
    }
}

impl Args for TrainArgs {
    fn augment_args(mut cmd: Command) -> Command {
        for (key, default) in TrainConfig::default().entries() {
            if key == "seed" {
                continue; // global --seed
            }
            let mut arg = Arg::new(key)
                .long(key.replace('_', "-"))
                .alias(key)
                .value_name("VALUE")
                .help(format!("[default: {default}]"));
            if key == "dataset_path" {
                arg = arg.alias("dataset");
            }
            cmd = cmd.arg(arg);
        }
        cmd.arg(
            Arg::new("resume")
                .long("resume")
                .value_name("CHECKPOINT")
                .value_parser(clap::value_parser!(PathBuf))
                .help("Continue from a checkpoint directory"),
        )
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}

/// Report destination: `--out` when given, stdout otherwise.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn base_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &cli.config {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        cfg.merge_kv_text(&text)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out.as_deref();
    match &cli.command {
        Cmd::GenData {
            recipe,
            n,
            expert_noise,
        } => {
            let env = MazeConfig::default();
            let recipe: Recipe = recipe.parse()?;
            if *n == 0 {
                return Err(Error::Config("--n must be positive".into()));
            }
            let mut rng = SeededRng::with_stream(seed, stream::DATA);
            let (data, summary) = generate_maze_dataset(&env, &recipe, *n, *expert_noise, &mut rng)?;
            let path = out.unwrap_or(Path::new("dataset.bin"));
            data.save(path)?;
            let mut csv = String::from("kind,key,transitions,episodes\n");
            let total_eps: usize = summary.episodes.iter().sum();
            csv.push_str(&format!("total,all,{},{total_eps}\n", data.len()));
            for ((entry, count), eps) in recipe.0.iter().zip(&summary.per_entry).zip(&summary.episodes) {
                csv.push_str(&format!("entry,{},{count},{eps}\n", Recipe(vec![entry.clone()])));
            }
            for (r, c) in data.reward_histogram() {
                csv.push_str(&format!("reward,{r},{c},\n"));
            }
            emit(None, &csv)
        }
        Cmd::Train(args) => {
            let mut cfg = base_config(&cli)?;
            for (k, v) in &args.overrides {
                cfg.set(k, v)?;
            }
            if let Some(o) = out {
                cfg.checkpoint_dir = o.to_path_buf();
            }
            cfg.validate()?;
            let outcome = trainer::train(&cfg, args.resume.as_deref())?;
            let mut csv = String::from(
                "variant,seed,steps,evaluations,final_return_mean,final_return_stderr,final_score,final_est_q,final_true_q\n",
            );
            let steps = outcome.metrics.last().map_or(0, |r| r.step);
            match outcome.final_eval {
                Some(f) => csv.push_str(&format!(
                    "{},{},{steps},{},{},{},{},{},{}\n",
                    cfg.variant,
                    cfg.seed,
                    f.evaluations,
                    f.return_mean,
                    f.return_stderr,
                    f.score_mean,
                    f.est_q_mean,
                    f.true_q_mean
                )),
                None => csv.push_str(&format!("{},{},{steps},0,,,,,\n", cfg.variant, cfg.seed)),
            }
            emit(None, &csv)
        }
        Cmd::Eval {
            ckpt,
            controller,
            episodes,
            noise,
        } => {
            let env = MazeConfig::default();
            let anchors = load_or_compute_anchors(&env, None)?;
            let scales = noise
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad noise scale '{s}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut csv = format!("noise_scale,{EVAL_REPORT_HEADER}\n");
            let loaded = match ckpt {
                Some(p) if controller.is_none() => Some(load_checkpoint(p)?),
                _ => None,
            };
            for scale in scales {
                let report = match (&loaded, controller.as_deref()) {
                    (Some(ck), _) => {
                        evaluate_actor(&ck.state.actor, &ck.state.stats, &env, *episodes, scale, seed, &anchors)?.0
                    }
                    (None, Some(kind)) => {
                        let goal = env.best_goal().unwrap_or(0);
                        let eps = rollouts(&env, *episodes, seed, |s, rng| match kind {
                            "expert" => expert_controller(&env, s, goal, DEFAULT_EXPERT_NOISE, rng),
                            _ => random_controller(rng),
                        });
                        EvalReport::from_episodes(&env, &eps, &anchors)
                    }
                    (None, None) => unreachable!("clap requires --ckpt or --controller"),
                };
                csv.push_str(&format!("{scale},{}\n", report.to_csv_line()));
            }
            emit(out, &csv)
        }
        Cmd::TrueQ { ckpt, states, gamma } => {
            let ck = load_checkpoint(ckpt)?;
            let gamma = gamma.unwrap_or(ck.config.gamma);
            let mut rng = SeededRng::with_stream(seed, stream::EVAL);
            let r = true_q_report(
                &ck.state.actor,
                &ck.state.critic,
                &ck.state.stats,
                &MazeConfig::default(),
                *states,
                gamma,
                &mut rng,
            )?;
            emit(out, &format!("{TRUE_Q_HEADER}\n{}\n", r.to_csv_line()))
        }
        Cmd::MeanAdv {
            dataset,
            methods,
            states,
        } => {
            let data = OfflineDataset::load(dataset)?;
            let mut loaded = Vec::new();
            for m in methods {
                let (name, dir) = m
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--method expects name=dir, got '{m}'")))?;
                loaded.push((name.to_string(), load_checkpoint(Path::new(dir))?));
            }
            let views: Vec<MethodCheckpoint> = loaded
                .iter()
                .map(|(name, ck)| MethodCheckpoint {
                    name,
                    actor: &ck.state.actor,
                    critic: &ck.state.critic,
                    stats: &ck.state.stats,
                })
                .collect();
            let mut rng = SeededRng::with_stream(seed, stream::EVAL);
            let rows = mean_advantage_report(&views, &data, *states, &mut rng)?;
            let mut csv = format!("{ADVANTAGE_HEADER}\n");
            for r in rows {
                csv.push_str(&r.to_csv_line());
                csv.push('\n');
            }
            emit(out, &csv)
        }
        Cmd::ExportTraj {
            ckpt,
            trace,
            window,
            episodes,
            noise,
        } => {
            let mut buf = Vec::new();
            let trace_path = trace.clone().or_else(|| {
                window.as_ref().and_then(|_| {
                    ckpt.as_ref()
                        .and_then(|c| c.parent())
                        .map(|d| d.join(TRACE_FILE))
                })
            });
            if let Some(tp) = trace_path {
                let w: StepWindow = match window {
                    Some(w) => w.parse()?,
                    None => StepWindow::ALL,
                };
                let text = fs::read_to_string(&tp).map_err(|e| Error::io(&tp, e))?;
                let n = export_trace_window(&text, w, &mut buf)?;
                log::info!("exported {n} recorded episodes");
            } else {
                let ck = load_checkpoint(ckpt.as_deref().expect("clap requires --ckpt or --trace"))?;
                let env = MazeConfig::default();
                let anchors = load_or_compute_anchors(&env, None)?;
                let (_, eps) =
                    evaluate_actor(&ck.state.actor, &ck.state.stats, &env, *episodes, *noise, seed, &anchors)?;
                write_trajectory_csv(&mut buf, eps.into_iter().enumerate())
                    .map_err(|e| Error::io("<trajectory>", e))?;
            }
            emit(out, &String::from_utf8(buf).expect("ascii csv"))
        }
    }
}
