use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use cald_core::geometry::AugmentationSpec;
use cald_core::io::parse_selection;
use cald_core::sim::{export_labels, export_predictions, generate_world, DetectorParams, SimDetectorModel};
use cald_core::LabelCounts;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn cald(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cald"))
        .args(args)
        .env_remove("CALD_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn score_lines(out: &Output) -> Vec<serde_json::Value> {
    stdout(out).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn tiny_score(extra: &[&str]) -> Output {
    let manifest = fixture("manifest.json");
    let preds = fixture("predictions.jsonl");
    let mut args = vec![
        "score",
        "--manifest",
        path_str(&manifest),
        "--predictions",
        path_str(&preds),
        "--augmentations",
        "F",
    ];
    args.extend_from_slice(extra);
    cald(&args)
}

#[test]
fn score_reports_every_image_in_ascending_order() {
    let out = tiny_score(&[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = score_lines(&out);
    assert_eq!(rows.len(), 3);
    let ids: Vec<&str> = rows.iter().map(|r| r["image_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["img_b", "img_c", "img_a"]);
    // identical boxes and scores: m = 1 + 0.9, so M = |1.9 - 1.3|
    let a = rows[2]["metric_M"].as_f64().unwrap();
    assert!((a - 0.6).abs() < 1e-12, "{a}");
    let b = rows[0]["metric_M"].as_f64().unwrap();
    assert!((b - 0.12098546378173936).abs() < 1e-12, "{b}");
    let c = rows[1]["metric_M"].as_f64().unwrap();
    assert!((c - 0.44274852944992094).abs() < 1e-12, "{c}");
}

#[test]
fn score_writes_to_file() {
    let dir = TempDir::new().unwrap();
    let out_path = dir.path().join("scores.jsonl");
    let out = tiny_score(&["--out", path_str(&out_path)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).is_empty());
    assert_eq!(fs::read_to_string(&out_path).unwrap().lines().count(), 3);
}

#[test]
fn mean_variant_matches_min_for_single_predictions() {
    let min = tiny_score(&["--variant", "min"]);
    let mean = tiny_score(&["--variant", "mean"]);
    assert_eq!(code(&mean), 0);
    assert_eq!(stdout(&min), stdout(&mean));
}

#[test]
fn out_of_range_beta_is_a_config_error() {
    let out = tiny_score(&["--beta", "2.5"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("beta"));
    assert_eq!(code(&tiny_score(&["--beta", "0"])), 1);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&cald(&[])), 1);
    assert_eq!(code(&cald(&["score"])), 1);
    assert_eq!(code(&cald(&["frobnicate"])), 1);
    assert_eq!(code(&tiny_score(&["--variant", "median"])), 1);
    assert_eq!(code(&tiny_score(&["--jobs", "0"])), 1);
    assert_eq!(code(&tiny_score(&["--augmentations", "FX"])), 1);
}

#[test]
fn malformed_predictions_are_data_errors_with_line_numbers() {
    let manifest = fixture("manifest.json");
    let bad = fixture("bad_predictions.jsonl");
    let out = cald(&[
        "score",
        "--manifest",
        path_str(&manifest),
        "--predictions",
        path_str(&bad),
        "--augmentations",
        "F",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));

    let missing = cald(&[
        "score",
        "--manifest",
        path_str(&manifest),
        "--predictions",
        "/nonexistent/predictions.jsonl",
    ]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn missing_augmentation_records_are_data_errors() {
    // the fixture only has flip records, the default set needs four
    let manifest = fixture("manifest.json");
    let preds = fixture("predictions.jsonl");
    let out = cald(&["score", "--manifest", path_str(&manifest), "--predictions", path_str(&preds)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("augmentation"), "{}", stderr(&out));
}

#[test]
fn help_documents_flags_and_schemas() {
    let expected: &[(&str, &[&str])] = &[
        ("score", &["--manifest", "--predictions", "--beta", "--variant", "--augmentations", "--out"]),
        (
            "select",
            &["--manifest", "--predictions", "--labels", "--budget", "--expansion", "--beta", "--out"],
        ),
        (
            "simulate",
            &["--strategy", "--cycles", "--budget", "--seeds", "--seed", "--images", "--out-csv"],
        ),
    ];
    for (cmd, flags) in expected {
        let out = cald(&[cmd, "--help"]);
        assert_eq!(code(&out), 0);
        let text = stdout(&out);
        for flag in flags.iter().chain(&["--config", "--jobs"]) {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}");
        }
        for schema in ["manifest.json", "predictions.jsonl", "labels.jsonl", "selection.jsonl", "Exit codes"] {
            assert!(text.contains(schema), "{cmd} --help lacks {schema}");
        }
    }
}

#[test]
fn config_file_sets_defaults_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cald.toml");
    fs::write(&cfg, "beta = 1.0\naugmentations = \"F\"\n").unwrap();
    let manifest = fixture("manifest.json");
    let preds = fixture("predictions.jsonl");
    let base = ["score", "--manifest", path_str(&manifest), "--predictions", path_str(&preds)];

    let mut args = base.to_vec();
    args.extend(["--config", path_str(&cfg)]);
    let out = cald(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let a = score_lines(&out).into_iter().find(|r| r["image_id"] == "img_a").unwrap();
    assert!((a["metric_M"].as_f64().unwrap() - 0.9).abs() < 1e-12);

    args.extend(["--beta", "1.3"]);
    let out = cald(&args);
    let a = score_lines(&out).into_iter().find(|r| r["image_id"] == "img_a").unwrap();
    assert!((a["metric_M"].as_f64().unwrap() - 0.6).abs() < 1e-12);

    fs::write(&cfg, "betta = 1.0\n").unwrap();
    let mut args = base.to_vec();
    args.extend(["--config", path_str(&cfg)]);
    assert_eq!(code(&cald(&args)), 1);
    fs::write(&cfg, "beta = 3.0\naugmentations = \"F\"\n").unwrap();
    assert_eq!(code(&cald(&args)), 1);
}

fn tiny_select(extra: &[&str]) -> Output {
    let manifest = fixture("manifest.json");
    let preds = fixture("predictions.jsonl");
    let labels = fixture("labels.jsonl");
    let mut args = vec![
        "select",
        "--manifest",
        path_str(&manifest),
        "--predictions",
        path_str(&preds),
        "--labels",
        path_str(&labels),
        "--augmentations",
        "F",
    ];
    args.extend_from_slice(extra);
    cald(&args)
}

fn selection_of(out: &Output) -> cald_core::pipeline::CycleReport {
    assert_eq!(code(out), 0, "{}", stderr(out));
    let mut reports = parse_selection(out.stdout.as_slice()).unwrap();
    assert!(reports.len() <= 1);
    reports.pop().unwrap_or(cald_core::pipeline::CycleReport {
        cycle: 1,
        initial: vec![],
        selected: vec![],
    })
}

fn ids(rows: &[cald_core::pipeline::SelectionRow]) -> Vec<&str> {
    rows.iter().map(|r| r.image_id.as_str()).collect()
}

#[test]
fn select_prefers_the_class_the_labeled_pool_lacks() {
    let report = selection_of(&tiny_select(&["--budget", "1"]));
    assert_eq!(ids(&report.initial), ["img_b", "img_c"]);
    assert_eq!(ids(&report.selected), ["img_c"]);
}

#[test]
fn select_with_zero_expansion_keeps_the_initial_set() {
    let report = selection_of(&tiny_select(&["--budget", "2", "--expansion", "0"]));
    let mut initial = ids(&report.initial);
    let mut selected = ids(&report.selected);
    initial.sort();
    selected.sort();
    assert_eq!(initial, selected);
}

#[test]
fn select_with_zero_budget_is_header_only() {
    let out = tiny_select(&["--budget", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("{\"format\":\"cald-selection\""));
}

#[test]
fn select_rejects_budget_beyond_unlabeled_pool() {
    let out = tiny_select(&["--budget", "3"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("budget 3 exceeds the 2 unlabeled"), "{}", stderr(&out));
}

/// A simulated dataset written through the same files users would provide.
fn simulated_dataset(dir: &Path, images: usize) -> (PathBuf, PathBuf, PathBuf) {
    let world = generate_world(images, 6, 1.0, 11).unwrap();
    let augs = AugmentationSpec::default_set();
    let labeled = &world.images[..images / 10];
    let mut counts = LabelCounts::zeros(6);
    for img in labeled {
        counts.add(&img.label_counts(6)).unwrap();
    }
    let model = SimDetectorModel::from_counts(&counts, DetectorParams::default());
    let manifest = dir.join("manifest.json");
    let preds = dir.join("predictions.jsonl");
    let labels = dir.join("labels.jsonl");
    world.manifest(&augs).write(fs::File::create(&manifest).unwrap()).unwrap();
    export_predictions(fs::File::create(&preds).unwrap(), &world, &model, &augs, 5).unwrap();
    let mut all = Vec::new();
    export_labels(&mut all, &world).unwrap();
    let kept: String = String::from_utf8(all)
        .unwrap()
        .lines()
        .take(labeled.len())
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&labels, kept).unwrap();
    (manifest, preds, labels)
}

#[test]
fn select_is_byte_identical_across_runs_and_job_counts() {
    let dir = TempDir::new().unwrap();
    let (manifest, preds, labels) = simulated_dataset(dir.path(), 300);
    let run = |jobs: &str, out: &Path| {
        let o = cald(&[
            "select",
            "--manifest",
            path_str(&manifest),
            "--predictions",
            path_str(&preds),
            "--labels",
            path_str(&labels),
            "--budget",
            "25",
            "--jobs",
            jobs,
            "--out",
            path_str(out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read(out).unwrap()
    };
    let first = run("1", &dir.path().join("s1.jsonl"));
    assert_eq!(first, run("1", &dir.path().join("s2.jsonl")));
    assert_eq!(first, run("4", &dir.path().join("s3.jsonl")));
    let reports = parse_selection(first.as_slice()).unwrap();
    assert_eq!(reports[0].initial.len(), 30);
    assert_eq!(reports[0].selected.len(), 25);
}

#[test]
fn simulate_is_reproducible_across_runs_and_job_counts() {
    let dir = TempDir::new().unwrap();
    let run = |jobs: &str, name: &str| {
        let csv = dir.path().join(name);
        let o = cald(&[
            "simulate",
            "--seeds",
            "3",
            "--cycles",
            "2",
            "--images",
            "300",
            "--initial",
            "30",
            "--budget",
            "20",
            "--jobs",
            jobs,
            "--out-csv",
            path_str(&csv),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (stdout(&o), fs::read(csv).unwrap())
    };
    let first = run("1", "a.csv");
    assert_eq!(first, run("1", "b.csv"));
    assert_eq!(first, run("4", "c.csv"));
    let text = String::from_utf8(first.1).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 2);
    assert!(text.starts_with("strategy,seed,cycle,mean_error,balance_js,mean_M_selected,mean_M_labeled"));
}

#[test]
fn simulate_seed_comes_from_environment() {
    let run = |seed: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_cald"));
        cmd.args(["simulate", "--images", "200", "--initial", "20", "--budget", "10", "--cycles", "1"]);
        cmd.env_remove("CALD_SEED");
        if let Some(s) = seed {
            cmd.env("CALD_SEED", s);
        }
        let out = cmd.output().unwrap();
        assert_eq!(code(&out), 0);
        stdout(&out)
    };
    assert_eq!(run(None), run(Some("0")));
    assert_ne!(run(None), run(Some("7")));
}

#[test]
fn simulate_strategy_names() {
    let small = ["--images", "200", "--initial", "20", "--budget", "10", "--cycles", "1"];
    let run = |strategy: &str| {
        let mut args = vec!["simulate", "--strategy", strategy];
        args.extend_from_slice(&small);
        cald(&args)
    };
    for ok in ["cald", "random", "cald_mean_variant", "cald_beta:2.0", "cald_beta:1.0"] {
        let out = run(ok);
        assert_eq!(code(&out), 0, "{ok}: {}", stderr(&out));
    }
    let out = run("greedy");
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    for name in ["cald", "random", "cald_mean_variant", "cald_beta:<beta>"] {
        assert!(err.contains(name), "{err}");
    }
    assert_eq!(code(&run("cald_beta:2.5")), 1);
}

#[test]
fn simulate_default_sizes_finish_quickly() {
    let start = Instant::now();
    let out = cald(&["simulate", "--seeds", "1", "--cycles", "2"]);
    let elapsed = start.elapsed();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 3);
    assert!(elapsed < Duration::from_secs(60), "{elapsed:?}");
}
