use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mrckg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrckg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bench_build_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("base");
    let o = mrckg(&[
        "bench",
        "synth-base",
        "--entities",
        "120",
        "--seed",
        "3",
        "--out",
        s(&base),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut trees = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("b{k}"));
        let o = mrckg(&[
            "bench",
            "build",
            "--base",
            s(&base.join("base.tsv")),
            "--synth",
            "--communities",
            s(&base.join("communities.tsv")),
            "--seed",
            "3",
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("S4:"));
        trees.push(tree(&out));
    }
    assert!(trees[0].contains_key("meta.json"));
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // usage errors
    assert_eq!(code(&mrckg(&["no-such-command"])), 2);
    assert_eq!(code(&mrckg(&["train", "--bench", "x"])), 2);
    assert_eq!(code(&mrckg(&["--help"])), 0);
    // runtime errors
    let missing = tmp.path().join("missing.tsv");
    let o = mrckg(&[
        "bench",
        "build",
        "--base",
        s(&missing),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let bad = tmp.path().join("bad.tsv");
    fs::write(&bad, "a\tb\n").unwrap();
    assert_eq!(
        code(&mrckg(&[
            "bench",
            "build",
            "--base",
            s(&bad),
            "--out",
            s(&tmp.path().join("o"))
        ])),
        2
    );
    assert_eq!(code(&mrckg(&["report", "--run", s(&tmp.path().join("norun"))])), 2);
    // a passing self-check
    let o = mrckg(&["selfcheck", "grad", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn train_report_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("base");
    assert_eq!(
        code(&mrckg(&[
            "bench",
            "synth-base",
            "--entities",
            "60",
            "--seed",
            "4",
            "--out",
            s(&base)
        ])),
        0
    );
    let bench = tmp.path().join("bench");
    let o = mrckg(&[
        "bench",
        "build",
        "--base",
        s(&base.join("base.tsv")),
        "--synth",
        "--d-v",
        "4",
        "--d-w",
        "4",
        "--snapshots",
        "3",
        "--seed",
        "4",
        "--out",
        s(&bench),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"epochs":2,"batch_size":32,"lr":0.01,"model":{"d":8,"layers":1,"heads":2,"d_ff":16,"d_p":4}}"#,
    )
    .unwrap();
    let run = tmp.path().join("run");
    let o = mrckg(&[
        "train",
        "--bench",
        s(&bench),
        "--config",
        s(&cfg),
        "--seed",
        "1",
        "--out",
        s(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..3 {
        assert!(
            run.join(format!("s{i}")).join("losses.csv").is_file(),
            "s{i}/losses.csv"
        );
    }
    let o = mrckg(&["report", "--run", s(&run), "--format", "json"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("avg_mrr") && stdout.contains("bwt"), "{stdout}");
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["matrix"]["rows"].as_array().unwrap().len(), 3);
    let o = mrckg(&["eval", "--run", s(&run), "--bench", s(&bench)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}
