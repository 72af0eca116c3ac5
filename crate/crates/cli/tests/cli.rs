use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_guided-rl"))
        .args(args)
        .env_remove("GUIDED_RL_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    out
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn pretrain_train_evaluate_aggregate_plot() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let guide_q = root.join("guide_q.grl");
    let report = ok(&[
        "pretrain-guide", "--env", "point_reach", "--steps", "500", "--out", p(&guide_q),
        "--grad-steps", "100", "--hidden", "16,16",
    ]);
    assert!(report.contains("guide success"), "{report}");
    assert!(guide_q.is_file());

    let runs = root.join("runs");
    let config = root.join("exp.toml");
    std::fs::write(
        &config,
        format!(
            "env = \"point_reach\"\nvariant = \"static_qg\"\ntotal_steps = 400\neval_every = 200\n\
             train_every = 100\ngrad_steps = 10\nbatch_size = 16\nhidden = [16, 16]\ntest_set_size = 5\n\
             seeds = [0, 1]\nguide_q_path = {:?}\nout_dir = {:?}\n",
            p(&guide_q),
            p(&runs)
        ),
    )
    .unwrap();
    for seed in ["0", "1"] {
        ok(&["train", "--config", p(&config), "--seed", seed]);
    }
    let seed_dir = runs.join("point_reach").join("static_qg").join("seed_0");
    let metrics = std::fs::read_to_string(seed_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4, "{metrics}");

    let eval = ok(&[
        "evaluate", "--snapshot", p(&seed_dir.join("snapshot")), "--env", "point_reach", "--test-set-size", "5",
    ]);
    assert!(eval.starts_with("policy success"), "{eval}");

    ok(&["aggregate", "--runs", p(&runs)]);
    let curve = runs.join("point_reach").join("static_qg").join("curve.csv");
    assert_eq!(std::fs::read_to_string(&curve).unwrap().lines().count(), 4);

    let plots = root.join("plots");
    ok(&["plot", "--curves", p(&runs), "--out", p(&plots)]);
    for panel in ["success_rate", "bc_loss", "filter_fraction"] {
        assert!(plots.join(format!("point_reach_{panel}.svg")).is_file(), "{panel}");
    }
}

#[test]
fn bad_input_exits_non_zero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let out = cli(&["train", "--config", p(&missing), "--seed", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing file"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "env = \"point_reach\"\nvariant = \"none\"\nbogus = 1\n").unwrap();
    assert!(!cli(&["train", "--config", p(&bad), "--seed", "0"]).status.success());

    assert!(!cli(&["train", "--config"]).status.success());
    assert!(!cli(&["pretrain-guide", "--env", "moon_walk", "--steps", "10", "--out", "x"]).status.success());
}
