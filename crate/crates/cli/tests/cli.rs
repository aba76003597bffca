use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
teacher.layers = 1
teacher.dim = 32
teacher.heads = 2
teacher.epochs = 3
teacher.optimizer = adam
teacher.learning_rate = 0.005
student.dim = 16
student.optimizer = adam
distill.optimizer = adam
distill.epochs = 3
distill.learning_rate = 0.005
table.finetune_epochs = 5
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lutfetch"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn lutfetch")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn value(stdout: &str, key: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| {
            l.strip_prefix(&format!("{key} = "))
                .or_else(|| l.strip_prefix(&format!("{key}=")))
        })
        .unwrap_or_else(|| panic!("{key} missing in {stdout}"))
        .trim()
        .parse()
        .unwrap()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn prep_sample_count_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(
        d,
        &["prep", "--synthetic", "stride", "--len", "10000", "--out", "a.bin"],
    );
    assert_eq!(value(&out, "samples"), (10000 - 9 - 10 + 1) as f64);
    ok(
        d,
        &["prep", "--synthetic", "stride", "--len", "10000", "--out", "b.bin"],
    );
    assert_eq!(read(d, "a.bin"), read(d, "b.bin"));
    ok(
        d,
        &[
            "--seed",
            "3",
            "prep",
            "--synthetic",
            "random-in-pages",
            "--len",
            "500",
            "--out",
            "c.bin",
        ],
    );
    ok(
        d,
        &[
            "--seed",
            "3",
            "prep",
            "--synthetic",
            "random-in-pages",
            "--len",
            "500",
            "--out",
            "e.bin",
        ],
    );
    assert_eq!(read(d, "c.bin"), read(d, "e.bin"));
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run(d, &["prep", "--trace", "missing.trace", "--out", "x.bin"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.trace"));

    std::fs::write(d.join("bad.cfg"), "dataset.histroy = 4\n").unwrap();
    let out = run(d, &["--config", "bad.cfg", "configure"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("histroy"));

    let out = run(d, &["--set", "nope.key=1", "configure"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(d, &["eval", "--model", "none.attn", "--data", "none.bin"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn configure_respects_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(
        d,
        &["configure", "--tau", "100", "--storage", "1000000", "--out", "pick.cfg"],
    );
    assert!(value(&out, "latency_cycles") < 100.0);
    assert!(value(&out, "storage_bytes") < 1_000_000.0);
    let stderr = String::from_utf8(run(d, &["configure"]).stderr).unwrap();
    assert!(stderr.contains("config: constraints.latency = 100"));
    // the written fragment is a valid config file
    ok(
        d,
        &[
            "--config",
            "pick.cfg",
            "configure",
            "--tau",
            "100",
            "--storage",
            "1000000",
        ],
    );

    let out = run(d, &["configure", "--tau", "10"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("latency"));
    let out = run(d, &["configure", "--storage", "1000"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("storage"));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), SMALL).unwrap();
    ok(
        d,
        &[
            "--config",
            "run.cfg",
            "prep",
            "--synthetic",
            "stride",
            "--len",
            "200",
            "--out",
            "t.bin",
        ],
    );
    let out = run(
        d,
        &[
            "--config",
            "run.cfg",
            "--set",
            "teacher.optimizer=sgd",
            "--set",
            "teacher.learning_rate=1e300",
            "train-teacher",
            "--data",
            "t.bin",
            "--out",
            "x.attn",
        ],
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn stride_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), SMALL).unwrap();
    let c = ["--config", "run.cfg"];
    let with = |args: &[&str]| -> Vec<String> { c.iter().chain(args).map(|s| s.to_string()).collect() };
    let call = |args: &[&str]| {
        let v = with(args);
        ok(d, &v.iter().map(String::as_str).collect::<Vec<_>>())
    };

    call(&["prep", "--synthetic", "stride", "--len", "1500", "--out", "train.bin"]);
    call(&[
        "--seed",
        "9",
        "prep",
        "--synthetic",
        "stride",
        "--len",
        "600",
        "--out",
        "test.bin",
        "--trace-out",
        "test.trace",
    ]);
    call(&["train-teacher", "--data", "train.bin", "--out", "teacher.attn"]);
    call(&["train-teacher", "--data", "train.bin", "--out", "teacher2.attn"]);
    assert_eq!(read(d, "teacher.attn"), read(d, "teacher2.attn"));

    call(&[
        "distill",
        "--teacher",
        "teacher.attn",
        "--data",
        "train.bin",
        "--out",
        "student.attn",
    ]);
    let eval = call(&[
        "eval",
        "--model",
        "student.attn",
        "--data",
        "test.bin",
        "--out",
        "student.csv",
    ]);
    assert!(value(&eval, "f1") > 0.9, "{eval}");
    assert!(read(d, "student.csv").starts_with(b"model,f1,"));

    call(&[
        "tabularize",
        "--model",
        "student.attn",
        "--data",
        "train.bin",
        "--out",
        "ft.tmdl",
    ]);
    call(&[
        "tabularize",
        "--model",
        "student.attn",
        "--data",
        "train.bin",
        "--out",
        "noft.tmdl",
        "--no-finetune",
    ]);
    call(&[
        "--set",
        "table.finetune_epochs=0",
        "tabularize",
        "--model",
        "student.attn",
        "--data",
        "train.bin",
        "--out",
        "zero.tmdl",
    ]);
    assert_eq!(read(d, "noft.tmdl"), read(d, "zero.tmdl"));
    assert_ne!(read(d, "ft.tmdl"), read(d, "noft.tmdl"));
    let eval = call(&["eval", "--model", "ft.tmdl", "--data", "test.bin"]);
    assert!(value(&eval, "f1") > 0.9, "{eval}");

    let sim = call(&["simulate", "--model", "ft.tmdl", "--trace", "test.trace"]);
    assert!(sim.lines().nth(1).unwrap().starts_with("ft.tmdl"));
    let cmp = call(&[
        "compare",
        "--model",
        "a=student.attn",
        "--model",
        "b=student.attn",
        "--model",
        "table=ft.tmdl",
        "--data",
        "test.bin",
        "--trace",
        "test.trace",
        "--out",
        "cmp.csv",
    ]);
    let lines: Vec<&str> = cmp.lines().collect();
    assert_eq!(lines.len(), 4);
    let strip = |l: &str| l.split_whitespace().skip(1).collect::<Vec<_>>().join(" ");
    assert_eq!(strip(lines[1]), strip(lines[2]));
    let csv = String::from_utf8(read(d, "cmp.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}
