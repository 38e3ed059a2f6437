//! The `a2pr` binary: exit codes and CSV outputs.

use std::path::Path;
use std::process::{Command, Output};

fn a2pr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a2pr"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn a2pr")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Exactly one header row and a fixed column count throughout.
fn assert_csv(text: &str, header_start: &str) -> usize {
    let mut lines = text.lines();
    let header = lines.next().expect("header");
    assert!(header.starts_with(header_start), "header {header}");
    let cols = header.split(',').count();
    let mut rows = 0;
    for l in lines {
        assert_ne!(l, header, "repeated header");
        assert_eq!(l.split(',').count(), cols, "row {l}");
        rows += 1;
    }
    rows
}

const SMALL: &[&str] = &[
    "--total-steps", "20", "--batch-size", "32", "--eval-every", "10", "--log-every", "5",
    "--checkpoint-every", "10", "--eval-episodes", "2", "--true-q-states", "2",
    "--critic-hidden", "8", "--actor-hidden", "8", "--vae-hidden", "8",
];

#[test]
fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = stdout(&a2pr(d, &["--seed", "4", "--out", "data.bin", "gen-data", "--n", "2000"]));
    assert!(assert_csv(&gen, "kind,key,transitions,episodes") >= 4);
    assert!(gen.contains("total,all,2000,"));

    let mut args = vec!["--seed", "1", "--out", "run", "train", "--dataset", "data.bin", "--variant", "a2pr"];
    args.extend_from_slice(SMALL);
    let summary = stdout(&a2pr(d, &args));
    assert_eq!(assert_csv(&summary, "variant,seed,steps"), 1);
    assert!(summary.lines().nth(1).unwrap().starts_with("a2pr,1,20,3,"));
    let metrics = std::fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(assert_csv(&metrics, "step,q_loss,v_loss"), 5);

    let eval = stdout(&a2pr(d, &["eval", "--ckpt", "run/final", "--episodes", "3", "--noise", "0,0.1"]));
    assert_eq!(assert_csv(&eval, "noise_scale,episodes,return_mean"), 2);
    let expert = stdout(&a2pr(d, &["eval", "--controller", "expert", "--episodes", "3"]));
    assert_eq!(assert_csv(&expert, "noise_scale,episodes"), 1);

    let tq = stdout(&a2pr(d, &["true-q", "--ckpt", "run/final", "--states", "3"]));
    assert_eq!(assert_csv(&tq, "states,est_q_mean,true_q_mean,gap"), 1);

    let adv = stdout(&a2pr(
        d,
        &["mean-adv", "--dataset", "data.bin", "--method", "a=run/final", "--method", "b=run/step_10", "--states", "50"],
    ));
    assert_eq!(assert_csv(&adv, "method,n_states,mean_adv_policy,mean_adv_data"), 2);

    let traj = stdout(&a2pr(d, &["export-traj", "--ckpt", "run/final", "--episodes", "2"]));
    assert!(assert_csv(&traj, "episode,t,") > 0);
    let window = stdout(&a2pr(d, &["export-traj", "--trace", "run/eval_trace.csv", "--window", "10:20"]));
    assert!(assert_csv(&window, "episode,t,") > 0);
    let empty = stdout(&a2pr(d, &["export-traj", "--trace", "run/eval_trace.csv", "--window", "11:19"]));
    assert_eq!(assert_csv(&empty, "episode,t,"), 0);

    // same seed, same metrics
    let mut again = vec!["--seed", "1", "--out", "run2", "train", "--dataset", "data.bin"];
    again.extend_from_slice(SMALL);
    stdout(&a2pr(d, &again));
    assert_eq!(metrics, std::fs::read_to_string(d.join("run2/metrics.csv")).unwrap());

    // --config is overridden by flags
    std::fs::write(d.join("cfg.txt"), "variant = td3bc\nalpha = 1.5\n").unwrap();
    let mut cfg_args = vec!["--config", "cfg.txt", "--out", "run3", "train", "--dataset", "data.bin", "--alpha", "2.0"];
    cfg_args.extend_from_slice(SMALL);
    let s = stdout(&a2pr(d, &cfg_args));
    assert!(s.lines().nth(1).unwrap().starts_with("td3bc,0,"));
    let stored = std::fs::read_to_string(d.join("run3/final/config.txt")).unwrap();
    assert!(stored.contains("alpha = 2"), "{stored}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad_recipe = a2pr(d, &["gen-data", "--n", "100", "--recipe", "expert:g0:0.4,expert:g1:0.5"]);
    assert_eq!(bad_recipe.status.code(), Some(2));
    let bad_variant = a2pr(d, &["train", "--variant", "nope"]);
    assert_eq!(bad_variant.status.code(), Some(2));
    let bad_flag = a2pr(d, &["train", "--no-such-flag", "1"]);
    assert_eq!(bad_flag.status.code(), Some(2));
    let missing = a2pr(d, &["train", "--dataset", "missing.bin", "--total-steps", "1"]);
    assert_eq!(missing.status.code(), Some(1));
    let no_ckpt = a2pr(d, &["true-q", "--ckpt", "nowhere"]);
    assert_eq!(no_ckpt.status.code(), Some(1));
    std::fs::write(d.join("junk.bin"), b"not a dataset at all").unwrap();
    let junk = a2pr(d, &["mean-adv", "--dataset", "junk.bin", "--method", "a=x"]);
    assert_eq!(junk.status.code(), Some(1));
}
