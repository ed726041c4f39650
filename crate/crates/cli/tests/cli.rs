use std::path::Path;
use std::process::{Command, Output};

fn ftmix(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftmix"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn ftmix")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Tiny two-model desk under `dir/desk`.
fn tiny_desk(dir: &Path) {
    let o = ftmix(
        dir,
        &[
            "prepare-desk",
            "desk",
            "--epochs",
            "1",
            "--train-size",
            "64",
            "--test-size",
            "16",
            "--eval-size",
            "4",
            "--min-accuracy",
            "0",
            "--models",
            "desk-strided,desk-pool",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

const SMALL: [&str; 6] = [
    "--set",
    "params.iterations=3",
    "--set",
    "targets=[\"desk-strided\", \"desk-pool\"]",
    "--set",
    "harness.batch_size=2",
];

fn attack(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["attack", "--preset", "desk", "--out", out];
    args.extend(SMALL);
    args.extend(extra);
    ftmix(dir, &args)
}

#[test]
fn unknown_config_key_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let o = ftmix(t.path(), &["attack", "--preset", "desk", "--set", "params.bogus=1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("bogus"));
    let o = ftmix(t.path(), &["attack", "--preset", "nope"]);
    assert_eq!(code(&o), 2);
    let o = ftmix(t.path(), &["attack", "--preset", "desk", "--set", "params.p=1.5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn model_errors_exit_3() {
    let t = tempfile::tempdir().unwrap();
    let o = ftmix(
        t.path(),
        &[
            "prepare-desk",
            "desk",
            "--epochs",
            "1",
            "--train-size",
            "32",
            "--test-size",
            "8",
            "--eval-size",
            "2",
            "--models",
            "desk-pool",
            "--min-accuracy",
            "1.01",
        ],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    tiny_desk(t.path());
    let o = attack(t.path(), "run", &["--set", "surrogates=[\"desk-vgg\"]"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("desk-vgg"));
}

#[test]
fn end_to_end_run_is_deterministic_and_corruption_is_reported() {
    let t = tempfile::tempdir().unwrap();
    tiny_desk(t.path());

    let a = attack(t.path(), "run-a", &["--evaluate"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = attack(t.path(), "run-b", &[]);
    assert_eq!(code(&b), 0, "{}", stderr(&b));
    let tensor = |run: &str| std::fs::read(t.path().join(run).join("adv").join("desk-strided.ftmt")).unwrap();
    assert_eq!(tensor("run-a"), tensor("run-b"));
    for f in ["config.toml", "attack.json", "report.json"] {
        assert!(t.path().join("run-a").join(f).is_file(), "{f}");
    }

    let o = ftmix(t.path(), &["evaluate", "run-b"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = ftmix(t.path(), &["report", "run-a", "run-b", "--out", "summary"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(t.path().join("summary/plots/scatter.svg").is_file());

    std::fs::write(t.path().join("desk/weights/desk-pool.bin"), b"corrupt").unwrap();
    let o = ftmix(t.path(), &["evaluate", "run-b"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("checksum"));

    std::fs::write(t.path().join("run-b/adv/desk-strided.ftmt"), b"corrupt").unwrap();
    let o = ftmix(t.path(), &["evaluate", "run-b", "--targets", "desk-strided"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}
