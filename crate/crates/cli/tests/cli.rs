use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fullinfo::data::load_archive;
use fullinfo::dsp::{fbank, mean_normalize, read_wav, write_wav, Waveform};
use fullinfo::featio::Archive;
use fullinfo::net::load_model;
use tempfile::TempDir;

fn fullinfo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fullinfo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_CORPUS: &str = r#"{
    "n_speakers": 6, "utts_per_speaker": 5, "frames_per_utt": 40,
    "test_frames_per_utt": 120, "feature_dim": 8, "seed": 3
}"#;

const TINY_TRAIN: &str = r#"{
    "train": {"epochs": 2, "lr": 0.05, "chunk_frames": 8, "batch_chunks": 4, "validation_fraction": 0.2},
    "net": {
        "input_dim": 8, "splice_left": 1, "splice_right": 1,
        "conv": [{"filters": 3, "kernel_time": 2, "kernel_freq": 3, "pool": 2}],
        "tdnn": [{"offsets": [-1, 0, 1], "width": 8}],
        "feature_dim": 4, "num_speakers": 4, "cosine_scale": 1.0, "activation": "relu"
    }
}"#;

struct Setup {
    dir: TempDir,
}

impl Setup {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("corpus.json"), TINY_CORPUS).unwrap();
        fs::write(dir.path().join("train.json"), TINY_TRAIN).unwrap();
        let s = Setup { dir };
        let o = fullinfo(&[
            "synth",
            "--out-dir",
            p(&s.path("data")),
            "--spec",
            p(&s.path("corpus.json")),
            "--train-speakers",
            "4",
            "--eval-speakers",
            "2",
            "--enroll-utts",
            "2",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        s
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let data = self.path("data/train");
        let cfg = self.path("train.json");
        let out = self.path(out);
        let mut args = vec!["train", "--data", p(&data), "--config", p(&cfg), "--out-dir", p(&out)];
        args.extend_from_slice(extra);
        fullinfo(&args)
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&fullinfo(&[])), 1);
    assert_eq!(code(&fullinfo(&["train", "--bogus"])), 1);
    assert_eq!(code(&fullinfo(&["eval", "--condition", "S20f"])), 1);
    assert_eq!(code(&fullinfo(&["--help"])), 0);
}

#[test]
fn missing_input_exits_two() {
    let dir = TempDir::new().unwrap();
    let o = fullinfo(&[
        "train",
        "--mode",
        "baseline",
        "--data",
        p(&dir.path().join("nope")),
        "--out-dir",
        p(&dir.path().join("out")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn fbank_reads_speaker_directories() {
    let dir = TempDir::new().unwrap();
    let wavs = dir.path().join("wav");
    let rate = 16000;
    let mut expected = Vec::new();
    for (spk, hz) in [("alice", 220.0f32), ("bob", 330.0)] {
        fs::create_dir_all(wavs.join(spk)).unwrap();
        for u in 0..2 {
            let n = rate as usize / 2 + u * 1600;
            let samples = (0..n)
                .map(|i| 0.3 * (2.0 * std::f32::consts::PI * hz * i as f32 / rate as f32).sin())
                .collect();
            let w = Waveform::new(samples, rate).unwrap();
            let utt = format!("{spk}_{u}");
            let path = wavs.join(spk).join(format!("{utt}.wav"));
            write_wav(&path, &w).unwrap();
            // stored as 16-bit PCM, so compare against what was written
            let stored = read_wav(&path).unwrap();
            expected.push((utt, spk.to_string(), mean_normalize(&fbank(&stored).unwrap())));
        }
    }
    let out = dir.path().join("feats");
    let o = fullinfo(&["fbank", "--in-dir", p(&wavs), "--out-dir", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut got = load_archive(&Archive::open(&out).unwrap()).unwrap();
    got.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    assert_eq!(got.len(), expected.len());
    for (g, (utt, spk, m)) in got.iter().zip(&expected) {
        assert_eq!(&g.utt_id, utt);
        assert_eq!(&g.speaker_id, spk);
        assert_eq!(g.feats.frames.shape(), m.frames.shape());
        assert!(g.feats.frames.max_abs_diff(&m.frames) < 1e-6);
    }

    // one unreadable file fails the run but the others are still reported
    fs::write(wavs.join("bob").join("bob_9.wav"), b"RIFF....").unwrap();
    let o = fullinfo(&["fbank", "--in-dir", p(&wavs), "--out-dir", p(&dir.path().join("f2"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bob_9.wav"));
}

#[test]
fn reruns_are_bit_identical() {
    let s = Setup::new();
    // the second run uses a different pool size; results must not depend on it
    for (out, threads) in [("a", "1"), ("b", "2")] {
        let o = s.train(out, &["--mode", "baseline", "--seed", "5", "--threads", threads]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(s.path("a/model.ctdn")).unwrap();
    let b = fs::read(s.path("b/model.ctdn")).unwrap();
    assert_eq!(a, b);
    let strip_time = |p: PathBuf| -> Vec<String> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_default())
            .collect()
    };
    assert_eq!(strip_time(s.path("a/metrics.csv")), strip_time(s.path("b/metrics.csv")));
    assert!(s.path("a/resolved_config.json").exists());

    let o = s.train("c", &["--mode", "baseline", "--seed", "6"]);
    assert_eq!(code(&o), 0);
    assert_ne!(a, fs::read(s.path("c/model.ctdn")).unwrap());
}

#[test]
fn fullinfo_needs_a_warmup_source() {
    let s = Setup::new();
    let o = s.train("fi", &["--mode", "fullinfo"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--warmup-from"));
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let s = Setup::new();
    assert_eq!(code(&s.train("base", &["--mode", "baseline"])), 0);
    let o = s.train("zero", &["--mode", "baseline", "--epochs", "0", "--seed", "1"]);
    assert_eq!(code(&o), 0);
    let m = load_model(s.path("zero/model.ctdn")).unwrap();
    let init = fullinfo::net::Model::<f32>::init(m.cfg.clone(), 1).unwrap();
    assert_eq!(m.params, init.params);
    let metrics = fs::read_to_string(s.path("zero/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);

    let base = s.path("base/model.ctdn");
    let o = s.train("fi", &["--mode", "fullinfo", "--warmup-from", p(&base), "--epochs", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // with no full-info epochs the result is the warmed-up net
    assert_eq!(
        fs::read(s.path("fi/model.ctdn")).unwrap(),
        fs::read(s.path("fi/warmup.ctdn")).unwrap()
    );
}

#[test]
fn diverging_training_exits_three() {
    let s = Setup::new();
    let o = s.train("nan", &["--mode", "baseline", "--lr", "1e30"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

fn eval_csv(s: &Setup) -> String {
    assert_eq!(code(&s.train("base", &["--mode", "baseline", "--seed", "2"])), 0);
    let out = s.path("eval");
    let o = fullinfo(&[
        "eval",
        "--model",
        p(&s.path("base/model.ctdn")),
        "--train-data",
        p(&s.path("data/train")),
        "--enroll",
        p(&s.path("data/enroll")),
        "--test",
        p(&s.path("data/test")),
        "--condition",
        "S20f,S50f,S100f",
        "--lda-dim",
        "2",
        "--out-dir",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("scores_S20f_cosine.txt").exists());
    assert!(out.join("scores_S100f_lda.txt").exists());
    fs::read_to_string(out.join("eer.csv")).unwrap()
}

#[test]
fn eval_matches_golden_table() {
    let s = Setup::new();
    let got = eval_csv(&s);
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/eval_small.csv");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&golden, &got).unwrap();
    }
    let want = fs::read_to_string(&golden).unwrap();
    let rows = |t: &str| t.lines().map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>()).collect::<Vec<_>>();
    let (g, w) = (rows(&got), rows(&want));
    assert_eq!(g.len(), w.len(), "{got}");
    for (gr, wr) in g.iter().zip(&w) {
        assert_eq!(gr.len(), wr.len());
        for (a, b) in gr.iter().zip(wr) {
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(x), Ok(y)) => assert!((x - y).abs() < 1e-6, "{got}"),
                _ => assert_eq!(a, b),
            }
        }
    }
}
