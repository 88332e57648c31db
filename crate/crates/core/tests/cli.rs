use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cagetrack::io::read_tracklets;
use cagetrack::mousemap::AssignmentProblem;
use cagetrack::types::Identity;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cagetrack"));
    c.env_remove("CAGETRACK_CONFIG");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const PERFECT: &str = "\
scene.duration_s = 20
scene.embedding_dim = 16
detector.miss_rate = 0
detector.box_jitter_std = 0
occlusion.enabled = false
classifier.confusion_diagonal = 1.0
classifier.no_read_rate = 0
classifier.embedding_noise = 0
";

fn setup() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().to_path_buf();
    fs::write(path.join("perfect.toml"), PERFECT).unwrap();
    fs::write(path.join("pipe.toml"), "stream.embedding_dim = 16\n").unwrap();
    (dir, path)
}

#[test]
fn four_stages_compose() {
    let (_tmp, d) = setup();
    ok(&d, &["simulate", "--scene", "perfect.toml", "--out-prefix", "s", "--seed", "4"]);
    ok(
        &d,
        &["track", "--in", "s.detections.jsonl", "--out", "t.jsonl", "--config", "pipe.toml"],
    );
    let id = ok(&d, &["identify", "--in", "t.jsonl", "--out", "i.jsonl", "--config", "pipe.toml"]);
    let ev = ok(
        &d,
        &[
            "eval",
            "--gt",
            "s.gt.jsonl",
            "--hyp",
            "i.jsonl",
            "--iou-threshold",
            "0.5",
            "--out",
            "r.json",
        ],
    );
    let report = String::from_utf8(ev.stdout).unwrap();
    assert!(report.contains("mota = 1.000000") && report.contains("idf1 = 1.000000"), "{report}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(json["id_switches"], 0);
    assert_eq!(json["mota"], 1.0);

    // the printed objective equals the re-summed scores of assigned tracklets
    let stderr = String::from_utf8(id.stderr).unwrap();
    let printed: f64 = stderr
        .lines()
        .find_map(|l| l.strip_prefix("objective = "))
        .unwrap()
        .parse()
        .unwrap();
    let (ts, ids) = read_tracklets(fs::File::open(d.join("i.jsonl")).map(std::io::BufReader::new).unwrap()).unwrap();
    let recomputed: f64 = ts
        .iter()
        .zip(&ids)
        .filter_map(|(t, i)| i.map(|i| t.class_conf_sums()[i.label().index()]))
        .sum();
    assert!((printed - recomputed).abs() <= 1e-9 * recomputed.max(1.0));
    assert_eq!(ids.iter().flatten().count(), 3);
}

#[test]
fn simulate_default_scene_shape() {
    let (_tmp, d) = setup();
    ok(&d, &["simulate", "--out-prefix", "a", "--seed", "9", "--scene.embedding_dim", "8"]);
    let gt = fs::read_to_string(d.join("a.gt.jsonl")).unwrap();
    assert!(gt.starts_with("# seed=9"));
    let frames: std::collections::BTreeSet<u64> = gt
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["frame"].as_u64().unwrap())
        .collect();
    assert_eq!(frames.len(), 1800);
    assert_eq!(gt.lines().count(), 1 + 1800 * 3);
    let dets = fs::read_to_string(d.join("a.detections.jsonl")).unwrap();
    assert!(dets.starts_with("# seed=9"));
}

#[test]
fn same_seed_same_bytes() {
    let (_tmp, d) = setup();
    for prefix in ["x", "y"] {
        ok(
            &d,
            &[
                "simulate",
                "--out-prefix",
                prefix,
                "--seed",
                "5",
                "--scene.duration_s",
                "10",
                "--scene.embedding_dim",
                "8",
            ],
        );
    }
    assert_eq!(
        fs::read(d.join("x.detections.jsonl")).unwrap(),
        fs::read(d.join("y.detections.jsonl")).unwrap()
    );
    assert_eq!(fs::read(d.join("x.gt.jsonl")).unwrap(), fs::read(d.join("y.gt.jsonl")).unwrap());
    ok(
        &d,
        &[
            "simulate",
            "--out-prefix",
            "z",
            "--seed",
            "6",
            "--scene.duration_s",
            "10",
            "--scene.embedding_dim",
            "8",
        ],
    );
    assert_ne!(
        fs::read(d.join("x.detections.jsonl")).unwrap(),
        fs::read(d.join("z.detections.jsonl")).unwrap()
    );
}

#[test]
fn empty_input_gives_empty_output() {
    let (_tmp, d) = setup();
    fs::write(d.join("empty.jsonl"), "").unwrap();
    ok(&d, &["track", "--in", "empty.jsonl", "--out", "t.jsonl"]);
    assert_eq!(fs::read_to_string(d.join("t.jsonl")).unwrap(), "");
    ok(&d, &["identify", "--in", "t.jsonl", "--out", "i.jsonl"]);
    assert_eq!(fs::read_to_string(d.join("i.jsonl")).unwrap(), "");
}

#[test]
fn malformed_line_is_reported_with_exit_2() {
    let (_tmp, d) = setup();
    let good = r#"{"frame":0,"box":[0,0,10,10],"conf":0.9,"emb":[1,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0],"tags":[0.2,0.2,0.2,0.2,0.2]}"#;
    let mut text: Vec<String> = (0..16).map(|_| good.to_string()).collect();
    text.push("{not json".into());
    fs::write(d.join("bad.jsonl"), text.join("\n")).unwrap();
    let out = run(&d, &["track", "--in", "bad.jsonl", "--out", "t.jsonl", "--config", "pipe.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 17"));
}

#[test]
fn unknown_config_key_exits_3_and_names_it() {
    let (_tmp, d) = setup();
    fs::write(d.join("e.jsonl"), "").unwrap();
    fs::write(d.join("bad.toml"), "assoc.lamda = 0.5\n").unwrap();
    let out = run(&d, &["track", "--in", "e.jsonl", "--out", "t.jsonl", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("assoc.lamda"));
    let out = run(&d, &["track", "--in", "e.jsonl", "--out", "t.jsonl", "--tracker.max_ages", "3"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_comes_from_environment_when_not_given() {
    let (_tmp, d) = setup();
    fs::write(d.join("e.jsonl"), "").unwrap();
    fs::write(d.join("bad.toml"), "nonsense.key = 1\n").unwrap();
    let out = bin()
        .current_dir(&d)
        .env("CAGETRACK_CONFIG", d.join("bad.toml"))
        .args(["track", "--in", "e.jsonl", "--out", "t.jsonl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn frame_range_mismatch_exits_4() {
    let (_tmp, d) = setup();
    fs::write(d.join("gt.jsonl"), r#"{"frame":0,"gt_id":1,"box":[0,0,5,5],"identity":null}"#).unwrap();
    fs::write(
        d.join("h.jsonl"),
        r#"{"tracklet_id":1,"identity":null,"start":7,"end":7,"obs":[{"frame":7,"box":[0,0,5,5],"tags":[0.2,0.2,0.2,0.2,0.2]}]}"#,
    )
    .unwrap();
    let out = run(&d, &["eval", "--gt", "gt.jsonl", "--hyp", "h.jsonl"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn red_barred_evidence_yields_red_barred() {
    let (_tmp, d) = setup();
    let obs: Vec<String> = (0..5)
        .map(|f| format!(r#"{{"frame":{f},"box":[0,0,5,5],"tags":[0.05,0.8,0.05,0.05,0.05],"conf":0.9}}"#))
        .collect();
    let line = format!(r#"{{"tracklet_id":3,"identity":null,"start":0,"end":4,"obs":[{}]}}"#, obs.join(","));
    fs::write(d.join("t.jsonl"), line).unwrap();
    ok(&d, &["identify", "--in", "t.jsonl", "--out", "i.jsonl", "--window-minutes", "0"]);
    let text = fs::read_to_string(d.join("i.jsonl")).unwrap();
    assert!(text.contains(r#""identity":"red_barred""#), "{text}");
}

#[test]
fn parallel_jobs_match_sequential_runs() {
    let (_tmp, d) = setup();
    for (p, seed) in [("a", "1"), ("b", "2"), ("c", "3")] {
        ok(
            &d,
            &[
                "simulate",
                "--out-prefix",
                p,
                "--seed",
                seed,
                "--scene.duration_s",
                "10",
                "--scene.embedding_dim",
                "16",
            ],
        );
        ok(
            &d,
            &[
                "track",
                "--in",
                &format!("{p}.detections.jsonl"),
                "--out",
                &format!("{p}.seq.jsonl"),
                "--config",
                "pipe.toml",
            ],
        );
    }
    ok(
        &d,
        &[
            "track",
            "--jobs",
            "2",
            "--config",
            "pipe.toml",
            "--in",
            "a.detections.jsonl",
            "--out",
            "a.par.jsonl",
            "--in",
            "b.detections.jsonl",
            "--out",
            "b.par.jsonl",
            "--in",
            "c.detections.jsonl",
            "--out",
            "c.par.jsonl",
        ],
    );
    for p in ["a", "b", "c"] {
        assert_eq!(
            fs::read(d.join(format!("{p}.seq.jsonl"))).unwrap(),
            fs::read(d.join(format!("{p}.par.jsonl"))).unwrap()
        );
    }
}

#[test]
fn identified_tracklets_never_share_an_identity_in_time() {
    // identities written by `identify` never overlap in time
    let (_tmp, d) = setup();
    ok(
        &d,
        &[
            "simulate",
            "--out-prefix",
            "s",
            "--seed",
            "8",
            "--scene.duration_s",
            "30",
            "--scene.embedding_dim",
            "16",
        ],
    );
    ok(
        &d,
        &["track", "--in", "s.detections.jsonl", "--out", "t.jsonl", "--config", "pipe.toml"],
    );
    ok(&d, &["identify", "--in", "t.jsonl", "--out", "i.jsonl", "--config", "pipe.toml"]);
    let (ts, ids) = read_tracklets(fs::File::open(d.join("i.jsonl")).map(std::io::BufReader::new).unwrap()).unwrap();
    let cage = Identity::cage(3);
    let problem = AssignmentProblem::from_tracklets(&ts, &cage).unwrap();
    let assignment: Vec<Option<usize>> = ids.iter().map(|i| i.map(|i| cage.iter().position(|c| *c == i).unwrap())).collect();
    assert!(problem.is_feasible(&assignment));
}
