//! End-to-end checks of the `dics` binary: every verb, config files with
//! `--set` overrides, the results-directory resolution, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dics() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dics"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("dics-cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

/// Small-but-real config used by most verbs below.
fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.conf");
    std::fs::write(
        &path,
        "# desk-scale smoke config\n\
         epochs = 2\n\
         batch_per_domain = 4\n\
         hidden_dims = 8\n\
         feature_dim = 6\n\
         data.samples_per_domain_class = 10\n",
    )
    .unwrap();
    path
}

#[test]
fn help_lists_all_verbs() {
    let out = dics().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = stdout_of(&out);
    for verb in [
        "generate-data",
        "train",
        "eval",
        "sweep-ablation",
        "sweep-queue",
        "gradcheck",
    ] {
        assert!(text.contains(verb), "missing verb {verb} in help:\n{text}");
    }
}

#[test]
fn gradcheck_passes_and_exits_zero() {
    let out = dics()
        .args(["gradcheck", "--instances", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stdout_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("combined_objective"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn generate_train_eval_round_trip() {
    let dir = tmp_dir("round-trip");
    let config = write_config(&dir);
    let csv = dir.join("data.csv");

    let out = dics()
        .args(["generate-data", "--out"])
        .arg(&csv)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stdout_of(&out));
    assert!(stdout_of(&out).contains("row counts per (domain, class)"));
    assert!(csv.exists());
    assert!(dir.join("data.csv.meta.json").exists());

    // Train on the generated CSV via the results dir flag.
    let results = dir.join("results");
    let out = dics()
        .arg("--results-dir")
        .arg(&results)
        .args(["train", "--config"])
        .arg(&config)
        .args([
            "--set",
            "data.source=csv",
            "--set",
            &format!("data.csv_path={}", csv.display()),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stdout_of(&out));
    assert!(stdout_of(&out).contains("target-domain accuracy"));

    let checkpoint = std::fs::read_dir(&results)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| {
            p.file_name()
                .is_some_and(|n| n.to_string_lossy().starts_with("checkpoint_"))
        })
        .expect("checkpoint written");
    assert!(std::fs::read_dir(&results)
        .unwrap()
        .filter_map(|e| e.ok())
        .any(|e| e.file_name().to_string_lossy().starts_with("run_")));

    let out = dics()
        .args(["eval", "--checkpoint"])
        .arg(&checkpoint)
        .arg("--data")
        .arg(&csv)
        .args(["--domain", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stdout_of(&out));
    assert!(stdout_of(&out).contains("domain 3 accuracy"));
}

#[test]
fn env_var_sets_results_dir() {
    let dir = tmp_dir("env-var");
    let config = write_config(&dir);
    let results = dir.join("from-env");
    let out = dics()
        .env("DICS_RESULTS_DIR", &results)
        .args(["train", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stdout_of(&out));
    assert!(results.exists(), "env-var results dir was not used");
}

#[test]
fn sweeps_emit_tables_and_csv() {
    let dir = tmp_dir("sweeps");
    let config = write_config(&dir);
    let results = dir.join("results");

    let out = dics()
        .arg("--results-dir")
        .arg(&results)
        .args(["sweep-queue", "--config"])
        .arg(&config)
        .args(["--multiples", "1,4"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stdout_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("DICS-1N") && text.contains("DICS-4N"));
    assert!(std::fs::read_dir(&results)
        .unwrap()
        .filter_map(|e| e.ok())
        .any(|e| e.file_name().to_string_lossy().starts_with("queue_")));

    let out = dics()
        .arg("--results-dir")
        .arg(&results)
        .args(["sweep-ablation", "--config"])
        .arg(&config)
        .args(["--seeds", "1", "--set", "epochs=1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stdout_of(&out));
    assert!(stdout_of(&out).contains("alpha"));
    assert!(std::fs::read_dir(&results)
        .unwrap()
        .filter_map(|e| e.ok())
        .any(|e| e.file_name().to_string_lossy().starts_with("ablation_")));
}

#[test]
fn unknown_config_key_fails_loudly() {
    let dir = tmp_dir("bad-key");
    let config = dir.join("bad.conf");
    std::fs::write(&config, "alhpa = 1.0\n").unwrap();
    let out = dics()
        .args(["train", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown config key"), "stderr: {err}");

    let out = dics()
        .args(["train", "--set", "no_such_key=1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
