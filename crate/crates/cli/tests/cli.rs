use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use edgespotter::model::SpotterConfig;

fn edgespotter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgespotter"))
        .args(args)
        .env_remove("EDGESPOTTER_OUT")
        .output()
        .expect("run binary")
}

fn ok(args: &[&str]) -> String {
    let out = edgespotter(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails(args: &[&str], code: i32, tag: &str) -> String {
    let out = edgespotter(args);
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(out.status.code(), Some(code), "{args:?}: {err}");
    assert!(err.starts_with(&format!("error[{tag}]: ")), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_model(dir: &Path) -> std::path::PathBuf {
    let cfg = SpotterConfig {
        channels: 8,
        num_proposals: 10,
        num_points: 25,
        decoder_depth: 1,
        ..Default::default()
    };
    let path = dir.join("model.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn generate_writes_requested_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let stats = ok(&[
        "generate",
        "--preset",
        "overfit",
        "--count",
        "10",
        "--seed",
        "3",
        "--out",
        s(&data),
    ]);
    let stats: serde_json::Value = serde_json::from_str(stats.trim()).unwrap();
    assert_eq!(stats["scenes"], 10);
    assert_eq!(fs::read_dir(data.join("images")).unwrap().count(), 10);
    let ann = fs::read_to_string(data.join("annotations.jsonl")).unwrap();
    assert_eq!(ann.lines().count(), 10);
}

#[test]
fn output_root_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_edgespotter"))
        .args(["generate", "--preset", "overfit", "--count", "2"])
        .env("EDGESPOTTER_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("data/annotations.jsonl").is_file());
}

#[test]
fn one_step_gives_one_log_line_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&[
        "generate",
        "--preset",
        "overfit",
        "--count",
        "2",
        "--out",
        s(&data),
    ]);
    let ckpt = dir.path().join("m.ckpt");
    let model = small_model(dir.path());
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
        "--steps",
        "1",
        "--model-config",
        s(&model),
    ]);
    let log = fs::read_to_string(dir.path().join("m.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let line: serde_json::Value = serde_json::from_str(log.trim()).unwrap();
    assert_eq!(line["step"], 1);
    assert!(line["wall_time"].is_number());
    let ckpts: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "ckpt")
        })
        .collect();
    assert_eq!(ckpts.len(), 1);
}

#[test]
fn resumed_training_replays_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&[
        "generate",
        "--preset",
        "overfit",
        "--count",
        "3",
        "--out",
        s(&data),
    ]);
    let model = small_model(dir.path());
    let full = dir.path().join("full.ckpt");
    let part = dir.path().join("part.ckpt");
    let common = ["--seed", "5", "--no-wall-time", "--model-config", s(&model)];
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&full),
        "--steps",
        "6",
    ];
    args.extend(common);
    ok(&args);
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&part),
        "--steps",
        "3",
        "--decay-steps",
        "6",
    ];
    args.extend(common);
    ok(&args);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&part),
        "--steps",
        "6",
        "--resume",
        s(&part),
        "--no-wall-time",
    ]);
    assert_eq!(
        fs::read_to_string(dir.path().join("full.jsonl")).unwrap(),
        fs::read_to_string(dir.path().join("part.jsonl")).unwrap()
    );
    assert_eq!(fs::read(&full).unwrap(), fs::read(&part).unwrap());
    let steps: Vec<u64> = fs::read_to_string(dir.path().join("part.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps, [1, 2, 3, 4, 5, 6]);
}

#[test]
fn eval_writes_metrics_and_overlays() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&[
        "generate",
        "--preset",
        "overfit",
        "--count",
        "2",
        "--out",
        s(&data),
    ]);
    let ckpt = dir.path().join("m.ckpt");
    let model = small_model(dir.path());
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
        "--steps",
        "2",
        "--model-config",
        s(&model),
    ]);
    let json = dir.path().join("eval.json");
    let overlays = dir.path().join("ov");
    let stdout = ok(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&json),
        "--overlays",
        s(&overlays),
        "--score-threshold",
        "0.0",
    ]);
    assert_eq!(stdout.lines().count(), 2);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["images"], 2);
    assert_eq!(fs::read_dir(&overlays).unwrap().count(), 2);

    let empty = dir.path().join("empty");
    fs::create_dir_all(empty.join("images")).unwrap();
    fs::write(empty.join("annotations.jsonl"), "").unwrap();
    let err = fails(
        &[
            "eval",
            "--data",
            s(&empty),
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(&json),
        ],
        3,
        "E_DATA",
    );
    assert!(err.contains("empty dataset"), "{err}");
}

#[test]
fn usage_and_data_errors_have_codes() {
    let dir = tempfile::tempdir().unwrap();
    fails(&["frobnicate"], 2, "E_USAGE");
    fails(
        &[
            "generate",
            "--count",
            "0",
            "--out",
            s(&dir.path().join("x")),
        ],
        2,
        "E_USAGE",
    );
    fails(
        &["train", "--data", s(&dir.path().join("missing"))],
        2,
        "E_USAGE",
    );
    fails(
        &[
            "bench",
            "--sizes",
            "100,200",
            "--out",
            s(&dir.path().join("b.csv")),
        ],
        2,
        "E_USAGE",
    );
    fails(
        &[
            "bench",
            "--mechanisms",
            "magic",
            "--out",
            s(&dir.path().join("b.csv")),
        ],
        2,
        "E_USAGE",
    );

    let bad = dir.path().join("bad.jsonl");
    fs::create_dir_all(dir.path().join("bad/images")).unwrap();
    fs::write(dir.path().join("bad/annotations.jsonl"), "{not json}\n").unwrap();
    let err = fails(
        &[
            "train",
            "--data",
            s(&dir.path().join("bad")),
            "--out",
            s(&bad),
        ],
        3,
        "E_DATA",
    );
    assert!(err.contains(":1:"), "{err}");
}

#[test]
fn plot_handles_bench_and_density_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let mut body = String::from("mechanism,n_tokens,channels,reps,median_ns,p10_ns,p90_ns\n");
    for n in [1000, 2000, 4000] {
        body += &format!("em,{n},64,30,{},1,1\n", n * 10);
        body += &format!("softmax,{n},64,30,{},1,1\n", n * n);
    }
    fs::write(&csv, &body).unwrap();
    let svg = dir.path().join("p.svg");
    ok(&["plot", "--input", s(&csv), "--out", s(&svg)]);
    let text = fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches(r#"class="series""#).count(), 2);
    assert!(text.contains("softmax: slope 2.00"));

    fs::write(
        &csv,
        "mechanism,n_tokens,channels,reps,median_ns,p10_ns,p90_ns\n",
    )
    .unwrap();
    fails(&["plot", "--input", s(&csv), "--out", s(&svg)], 3, "E_DATA");
    fs::write(
        &csv,
        "mechanism,n_tokens,channels,reps,median_ns,p10_ns,p90_ns\nem,1000,64\n",
    )
    .unwrap();
    let err = fails(&["plot", "--input", s(&csv), "--out", s(&svg)], 3, "E_DATA");
    assert!(err.contains(":2:"), "{err}");

    let grid = dir.path().join("g.csv");
    fs::write(&grid, "0,1\n7,2\n").unwrap();
    let pgm = dir.path().join("g.pgm");
    ok(&["plot", "--input", s(&grid), "--out", s(&pgm)]);
    let bytes = fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5"));
    let pixels = &bytes[bytes.len() - 4..];
    assert_eq!(pixels.iter().max(), Some(&pixels[2]));
}

#[test]
fn bench_writes_csv_with_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    ok(&[
        "bench",
        "--sizes",
        "64,128,512",
        "--channels",
        "8",
        "--reps",
        "30",
        "--out",
        s(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("mechanism,n_tokens,channels,reps,median_ns,p10_ns,p90_ns")
    );
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 7);
    assert_eq!(
        text.lines().filter(|l| l.starts_with("# slope,")).count(),
        2
    );
}
