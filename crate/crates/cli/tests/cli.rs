mod common;

use std::fs;

use common::{run, small_config, stderr, stdout};

fn s(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_train_file_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tsv");
    let o = run(&["train", "--set", &format!("data.train={}", s(&missing))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.tsv"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_config_error() {
    let o = run(&["train", "--set", "freelb.beta=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("freelb.beta"));
}

#[test]
fn train_writes_artifacts_and_echoed_config_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "freelb");
    let o = run(&["train", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    for f in [
        "vocab.txt",
        "config.txt",
        "latest.ckpt",
        "best.ckpt",
        "final.ckpt",
        "history.csv",
        "summary.txt",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let history = fs::read(out.join("history.csv")).unwrap();
    let final_ck = fs::read(out.join("final.ckpt")).unwrap();

    // rerun from the echoed config into a second directory
    let out2 = dir.path().join("again");
    let o = run(&[
        "train",
        "--config",
        s(&out.join("config.txt")),
        "--set",
        &format!("out_dir={}", s(&out2)),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(out2.join("history.csv")).unwrap(), history);
    assert_eq!(fs::read(out2.join("final.ckpt")).unwrap(), final_ck);

    // a different seed changes the run
    let out3 = dir.path().join("other");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--seed",
        "4",
        "--set",
        &format!("out_dir={}", s(&out3)),
    ]);
    assert!(o.status.success());
    assert_ne!(fs::read(out3.join("history.csv")).unwrap(), history);
}

#[test]
fn eval_attack_and_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "rar");
    assert!(run(&["train", "--config", s(&cfg)]).status.success());
    let out = dir.path().join("out");
    let report = out.join("report.csv");

    let o = run(&["eval", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "clean_acc,robust_acc,mean_cos,mean_euc");
    assert_eq!(lines.len(), 2);

    let o = run(&["attack", "--config", s(&cfg), "--set", "attack.k_steps=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&report).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], row[1], "k=0 robust accuracy must equal clean");

    let o = run(&[
        "attack",
        "--config",
        s(&cfg),
        "--set",
        "attack.epsilon=0.02,0.075,0.1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 4);

    let o = run(&["reconstruct", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tsv = fs::read_to_string(out.join("reconstruct.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 40);
    assert!(tsv.lines().all(|l| l.split('\t').count() == 2));
    assert!(stdout(&o).contains("token match"));

    let base = out.join("best.ckpt");
    let o = run(&[
        "reconstruct",
        "--config",
        s(&cfg),
        "--set",
        &format!("baseline_checkpoint={}", s(&base)),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tsv = fs::read_to_string(out.join("reconstruct.tsv")).unwrap();
    assert!(tsv.lines().all(|l| l.split('\t').count() == 4));
}

#[test]
fn reconstruct_needs_a_reconstructor_head() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "plain");
    assert!(run(&["train", "--config", s(&cfg)]).status.success());
    let o = run(&["reconstruct", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no reconstructor head"));
}

#[test]
fn incompatible_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "plain");
    assert!(run(&["train", "--config", s(&cfg)]).status.success());
    let o = run(&["eval", "--config", s(&cfg), "--set", "model.hidden_dim=16"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.hidden_dim"));
}

#[test]
fn grid_outside_bounds_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "freelb");
    for bad in [
        "grid.gamma=0.9",
        "grid.alpha=0.5",
        "grid.n_steps=5",
        "grid.epsilon=0.6",
    ] {
        let o = run(&["gridsearch", "--config", s(&cfg), "--set", bad]);
        assert_eq!(o.status.code(), Some(2), "{bad}");
    }
}

fn grid_rows(path: &std::path::Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn grid_ranks_descending() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "freelb");
    let o = run(&[
        "gridsearch",
        "--config",
        s(&cfg),
        "--jobs",
        "3",
        "--set",
        "grid.gamma=0,0.6",
        "--set",
        "grid.n_steps=2,3",
        "--set",
        "max_steps=20",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    let rows = grid_rows(&out.join("grid.csv"));
    assert_eq!(rows.len(), 4);
    let accs: Vec<f64> = rows.iter().map(|r| r[6].parse().unwrap()).collect();
    assert!(accs.windows(2).all(|w| w[0] >= w[1]), "{accs:?}");
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], (i + 1).to_string());
        assert_eq!(r[7], "ok");
        assert!(out
            .join(format!(
                "grid/point-{:03}/best.ckpt",
                r[1].parse::<usize>().unwrap()
            ))
            .exists());
    }
    assert!(out.join("best_config.txt").exists());
}

#[test]
fn one_point_grid_matches_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "freelb");
    let o = run(&[
        "gridsearch",
        "--config",
        s(&cfg),
        "--set",
        "grid.gamma=0.6",
        "--set",
        "grid.alpha=0.1",
        "--set",
        "grid.epsilon=0",
        "--set",
        "grid.n_steps=2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = grid_rows(&dir.path().join("out/grid.csv"));
    assert_eq!(rows.len(), 1);
    let grid_acc: f64 = rows[0][6].parse().unwrap();

    let solo = dir.path().join("solo");
    let solo_set = format!("out_dir={}", s(&solo));
    assert!(run(&["train", "--config", s(&cfg), "--set", &solo_set])
        .status
        .success());
    let o = run(&["eval", "--config", s(&cfg), "--set", &solo_set]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(solo.join("report.csv")).unwrap();
    let clean: f64 = report
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(clean, grid_acc);
}
