use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 1
pop_individual = 4
pop_module = 5
generations = 2
num_network = 2
batch_size = 32
final_epochs = 1

[dataset]
kind = "rectangles"
train_size = 60
test_size = 40

[ranges]
fc_units = [8, 16]
conv_filters = [2, 4]
"#;

fn lcdn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcdn"))
        .current_dir(dir)
        .env_remove("LCDN_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn evolve_train_best_and_export() {
    let dir = setup();
    let d = dir.path();
    let out = ok(lcdn(d, &["evolve", "--config", "tiny.toml", "--output-dir", "run"]));
    assert!(out.contains("after 2 generations"), "{out}");
    let csv = fs::read_to_string(d.join("run/generations.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let out = ok(lcdn(d, &["train-best", "--config", "tiny.toml", "--output-dir", "run"]));
    assert!(out.starts_with("test error"), "{out}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/train_best.json")).unwrap()).unwrap();
    assert_eq!(report["test_samples"], 40);

    let dot = ok(lcdn(d, &["export", "--output-dir", "run", "--format", "dot"]));
    assert!(dot.starts_with("digraph network {"));
    ok(lcdn(
        d,
        &["export", "--output-dir", "run", "--format", "json", "--out", "g.json"],
    ));
    assert_eq!(
        fs::read_to_string(d.join("g.json")).unwrap(),
        fs::read_to_string(d.join("run/best_genome.json")).unwrap()
    );

    let bad = lcdn(d, &["export", "--output-dir", "run", "--format", "svg"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown export format"));
}

#[test]
fn identical_runs_write_identical_files() {
    let dir = setup();
    let d = dir.path();
    ok(lcdn(d, &["evolve", "--config", "tiny.toml", "--output-dir", "a"]));
    ok(lcdn(d, &["evolve", "--config", "tiny.toml", "--output-dir", "b"]));
    for f in ["generations.csv", "best_genome.json"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn resume_extends_a_finished_run() {
    let dir = setup();
    let d = dir.path();
    ok(lcdn(d, &["evolve", "--config", "tiny.toml", "--output-dir", "run"]));
    let mut more = TINY.replace("generations = 2", "generations = 3");
    more.push('\n');
    fs::write(d.join("more.toml"), more).unwrap();
    let out = lcdn(d, &["resume", "--config", "more.toml", "--output-dir", "run"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("resuming at generation 2 of 3"));
    ok(out);
    assert_eq!(
        fs::read_to_string(d.join("run/generations.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    // a different seed changes the config hash
    let refused = lcdn(
        d,
        &["resume", "--config", "more.toml", "--output-dir", "run", "--seed", "9"],
    );
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("config hash"));
}

#[test]
fn flags_and_environment_override_the_file() {
    let dir = setup();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_lcdn"))
        .current_dir(d)
        .env("LCDN_SEED", "5")
        .env("LCDN_GENERATIONS", "1")
        .args([
            "evolve",
            "--config",
            "tiny.toml",
            "--output-dir",
            "env",
            "--ablation",
            "no_lamarck",
        ])
        .output()
        .unwrap();
    ok(out);
    let written = fs::read_to_string(d.join("env/config.toml")).unwrap();
    assert!(written.contains("seed = 5"));
    assert!(written.contains("generations = 1"));
    assert!(written.contains("ablation = \"no_lamarck\""));

    let out = ok(lcdn(
        d,
        &[
            "evolve",
            "--config",
            "tiny.toml",
            "--output-dir",
            "flag",
            "--seed",
            "7",
            "--workers",
            "2",
        ],
    ));
    assert!(out.contains("after 2 generations"));
    let written = fs::read_to_string(d.join("flag/config.toml")).unwrap();
    assert!(written.contains("seed = 7") && written.contains("workers = 2"));
}

#[test]
fn repeat_runs_each_seed_in_its_own_directory() {
    let dir = setup();
    let d = dir.path();
    let out = ok(lcdn(
        d,
        &[
            "evolve",
            "--config",
            "tiny.toml",
            "--output-dir",
            "rep",
            "--repeat",
            "2",
        ],
    ));
    assert!(out.starts_with("2 runs"), "{out}");
    assert!(d.join("rep/run_0/generations.csv").exists());
    assert!(d.join("rep/run_1/generations.csv").exists());
    assert_eq!(
        fs::read_to_string(d.join("rep/repeats.csv")).unwrap().lines().count(),
        3
    );
}

#[test]
fn bad_input_is_reported() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("typo.toml"), "pop_individuals = 3\n").unwrap();
    let out = lcdn(d, &["evolve", "--config", "typo.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("pop_individuals"));

    let out = lcdn(d, &["evolve", "--config", "tiny.toml", "--ablation", "none"]);
    assert!(!out.status.success());

    fs::write(d.join("idx.toml"), "[dataset]\nkind = \"idx\"\ntrain_images = \"nope\"\ntrain_labels = \"nope\"\ntest_images = \"nope\"\ntest_labels = \"nope\"\n").unwrap();
    let out = lcdn(d, &["evolve", "--config", "idx.toml", "--output-dir", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    let out = lcdn(d, &["train-best", "--config", "tiny.toml", "--output-dir", "missing"]);
    assert!(!out.status.success());
}
