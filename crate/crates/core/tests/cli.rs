use std::fs;
use std::path::Path;
use std::process::Command;

const CONFIG: &str = r#"
[community]
n_clusters_latent = 2
users_per_cluster = 4
test_users_per_cluster = 1
history_len = 10
test_items = 3

[train]
steps = 30

[pool]
n_clusters = 4

[prime]
budget = 3

[sweep]
alphas = [0.0, 1.0]
seeds = [0, 1]
"#;

fn evomerge(args: &[&str], config: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_evomerge"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn subcommands_produce_their_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |p: &str| tmp.path().join(p).to_str().unwrap().to_string();
    let config = tmp.path().join("exp.toml");
    fs::write(&config, CONFIG).unwrap();

    evomerge(&["gen-community", "--out", &d("c")], &config);
    let text = fs::read_to_string(tmp.path().join("c/community.txt")).unwrap();
    assert_eq!(text.matches("\nuser ").count(), 8);

    evomerge(&["train-pool", "--community", &d("c"), "--out", &d("p")], &config);
    let stdout = evomerge(
        &["personalize", "--community", &d("c"), "--pool", &d("p"), "--alpha", "0.5", "--top-k", "2", "--out", &d("r")],
        &config,
    );
    assert_eq!(stdout.lines().count(), 2);
    let trace = fs::read_to_string(tmp.path().join("r/trace.csv")).unwrap();
    assert!(trace.starts_with("generation,candidate_index,utility,mean_privacy,fitness"));

    evomerge(
        &["sweep", "--community", &d("c"), "--pool", &d("p"), "--optimizer", "one_plus_one_es", "--out", &d("s")],
        &config,
    );
    let tradeoff = fs::read_to_string(tmp.path().join("s/tradeoff.csv")).unwrap();
    assert_eq!(tradeoff.lines().count(), 3);

    evomerge(&["mia", "--community", &d("c"), "--pool", &d("p"), "--out", &d("m")], &config);
    let mia = fs::read_to_string(tmp.path().join("m/mia.csv")).unwrap();
    assert!(mia.starts_with("target_user,alpha,n_members,n_nonmembers,auc"));
    assert!(tmp.path().join("m/mia_scores.csv").exists());

    evomerge(&["plot", "--input", &d("s/tradeoff.csv"), "--x", "privacy", "--out", &d("curve.svg")], &config);
    assert!(fs::read_to_string(tmp.path().join("curve.svg")).unwrap().contains("<circle"));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    fs::write(&config, "[prime]\ntop_k = 0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_evomerge"))
        .args(["--config", config.to_str().unwrap(), "gen-community", "--out"])
        .arg(tmp.path().join("c"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("top_k"));
}
