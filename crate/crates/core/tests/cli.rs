use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use vtrecipe::config::RunConfig;
use vtrecipe::dataset::write_corpus;
use vtrecipe::evaluation::{apply_dsl, recall_at_k, Direction};
use vtrecipe::model::{Components, Model};
use vtrecipe::numerics::{Matrix, SeededRng};
use vtrecipe::pipeline::{read_corpus, FrameStore, VideoTextRecord};
use vtrecipe::recipe::{baseline_similarity, encode_all, eval_model, test_similarity, EvalOptions};
use vtrecipe::train::load_checkpoint;

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

fn vtrecipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtrecipe"))
        .args(args)
        .env_remove("VTRECIPE_CONFIG")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = vtrecipe(args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn records(path: &Path) -> Vec<VideoTextRecord> {
    read_corpus(path).unwrap().records
}

fn curation(dir: &Path, n: usize, missing: f64) -> PathBuf {
    let out = ok(&[
        "synth",
        "curation",
        "--out-dir",
        s(dir),
        "--records",
        &n.to_string(),
        "--missing-frames",
        &missing.to_string(),
    ]);
    PathBuf::from(out.trim())
}

#[test]
fn filter_keeps_a_tenth_of_a_thousand() {
    let dir = tempfile::tempdir().unwrap();
    let raw = curation(dir.path(), 1000, 0.0);
    let scored = dir.path().join("scored.jsonl");
    let kept = dir.path().join("kept.jsonl");
    ok(&["score", "--in", s(&raw), "--out", s(&scored)]);
    ok(&["filter", "--in", s(&scored), "--out", s(&kept), "--top-fraction", "0.1"]);
    assert_eq!(records(&kept).len(), 100);
    assert_eq!(records(&dir.path().join("kept.jsonl.rejected.jsonl")).len(), 900);
}

#[test]
fn short_videos_keep_every_frame() {
    let dir = tempfile::tempdir().unwrap();
    let store = FrameStore {
        frames: SeededRng::new(4).normal_matrix(5, 16, 1.0),
        patches: None,
    };
    let corpus = write_corpus(dir.path(), "five", &json!({}), &[(VideoTextRecord::new("v0", "a dog", "x"), Some(store))]).unwrap();
    let out = dir.path().join("keys.jsonl");
    ok(&["keyframes", "--in", s(&corpus), "--out", s(&out), "--n-key", "8"]);
    assert_eq!(records(&out)[0].keyframe_indices, Some(vec![0, 1, 2, 3, 4]));
}

#[test]
fn chained_curation_replays_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let raw = curation(dir.path(), 200, 0.0);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["curate", "--in", s(&raw), "--out-dir", s(d), "--set", "pipeline.top_fraction=0.5"]);
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 14);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
    let last = records(&a.join("7_mix.jsonl"));
    assert!(!last.is_empty());
    assert!(last.iter().all(|r| r.training_text.is_some()));
}

#[test]
fn malformed_input_and_quality_breaches_have_their_own_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    fs::write(
        &bad,
        "{\"video_id\": \"a\", \"raw_text\": \"t\", \"frame_ref\": \"f\"}\n{not json\n",
    )
    .unwrap();
    let out = vtrecipe(&["score", "--in", s(&bad), "--out", s(&dir.path().join("o.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let raw = curation(dir.path(), 100, 0.2);
    let scored = dir.path().join("scored.jsonl");
    let out = vtrecipe(&["score", "--in", s(&raw), "--out", s(&scored)]);
    assert_eq!(out.status.code(), Some(2));
    // outputs are still written on a breach
    assert_eq!(records(&scored).len() + records(&dir.path().join("scored.jsonl.rejected.jsonl")).len(), 100);
}

struct Run {
    dir: tempfile::TempDir,
    train: PathBuf,
    test: PathBuf,
}

fn pairs() -> Run {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let out = ok(&["synth", "pairs", "--out-dir", s(dir.path()), "--train", "256", "--test", "64", "--config", s(&cfg)]);
    let mut lines = out.lines().map(PathBuf::from);
    let (train, test) = (lines.next().unwrap(), lines.next().unwrap());
    Run { dir, train, test }
}

fn train(run: &Run, name: &str, epochs: usize) -> (PathBuf, String) {
    let ckpt = run.dir.path().join(name);
    let cfg = toy_config();
    let stdout = ok(&[
        "train",
        "--corpus",
        s(&run.train),
        "--out",
        s(&ckpt),
        "--epochs",
        &epochs.to_string(),
        "--config",
        s(&cfg),
    ]);
    (ckpt, stdout)
}

fn eval_r1(run: &Run, ckpt: &Path, extra: &[&str]) -> f64 {
    let out = run.dir.path().join("metrics.jsonl");
    let mut args = vec!["eval", "--checkpoint", s(ckpt), "--testset", s(&run.test), "--direction", "t2v", "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    let text = fs::read_to_string(&out).unwrap();
    let row: Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    row["r1"].as_f64().unwrap()
}

#[test]
fn training_runs_are_seeded_and_learn() {
    let run = pairs();
    let cfg = RunConfig::read(&toy_config()).unwrap();

    let (init, _) = train(&run, "init.m2rp", 0);
    let fresh = Model::new(cfg.model_config(), cfg.seed).unwrap();
    // the container stores 32-bit floats
    let stored: Vec<(String, Matrix)> = fresh
        .named_params()
        .into_iter()
        .map(|(n, m)| (n, Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) as f32 as f64)))
        .collect();
    assert_eq!(load_checkpoint(&init).unwrap().model.named_params(), stored);

    let (a, log) = train(&run, "a.m2rp", 2);
    let (b, _) = train(&run, "b.m2rp", 2);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let means: Vec<f64> = log
        .lines()
        .filter_map(|l| l.rsplit(' ').next()?.parse().ok())
        .collect();
    assert_eq!(means.len(), 2);
    assert!(means[1] < means[0], "{means:?}");

    // untrained: hits out of 64 are about Binomial(64, 1/64); 6 or more has
    // probability below 0.1%
    let random = eval_r1(&run, &init, &[]);
    assert!(random <= 100.0 * 5.0 / 64.0, "untrained R@1 {random}");
    let trained = eval_r1(&run, &a, &[]);
    assert!(trained > random + 20.0, "trained {trained} vs untrained {random}");
    assert!(eval_r1(&run, &a, &["--dsl"]) > random);

    // every component off is the reference path
    let state = load_checkpoint(&a).unwrap();
    let test = vtrecipe::dataset::load_examples(&read_corpus(&run.test).unwrap(), cfg.frames_eval, cfg.patches)
        .unwrap()
        .into_iter()
        .map(|e| e.raw)
        .collect::<Vec<_>>();
    let opts = EvalOptions {
        components: Components::BASELINE,
        dsl_beta: None,
        frames: cfg.frames_eval,
        tokens: cfg.tokens_eval,
    };
    let m = eval_model(&state.model, &opts).unwrap();
    let encoded = encode_all(&m, &test).unwrap();
    let ablated = test_similarity(&m, &encoded, None, Direction::TextToVideo).unwrap();
    let reference = baseline_similarity(&m, &encoded).unwrap();
    assert!(ablated.max_abs_diff(&reference) <= 1e-9);
    let cli = eval_r1(&run, &a, &["--ablate", "stan,mug,acg"]);
    assert_eq!(cli, recall_at_k(&reference, 1, Direction::TextToVideo).unwrap());
}

#[test]
fn dual_softmax_keeps_a_dominant_diagonal_perfect() {
    let mut rng = SeededRng::new(8);
    for n in [1, 2, 10, 64] {
        let s = Matrix::from_fn(n, n, |r, c| if r == c { 0.9 } else { 0.3 * rng.uniform() });
        for d in [Direction::TextToVideo, Direction::VideoToText] {
            for beta in [1.0, 100.0, 1e4] {
                assert_eq!(recall_at_k(&apply_dsl(&s, beta, d).unwrap(), 1, d).unwrap(), 100.0);
            }
        }
    }
}
