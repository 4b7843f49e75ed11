use std::fs;
use std::path::Path;
use std::process::Command;

use tctx::archive::{self, load_archive, save_archive};
use tctx::config::ModelConfig;
use tctx::model::ModelParams;
use tctx::synth::{read_boxes, synth_sequence, Script, Sequence};
use tctx::Error;

fn tctx(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_tctx")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "tctx {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn archive_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.tarc");
    let config = ModelConfig::tiny();
    let params = ModelParams::random(&config, 3).unwrap();
    save_archive(&params, &path).unwrap();
    let back = load_archive(&path, &config).unwrap();
    for ((na, a), (nb, b)) in params.named_tensors().iter().zip(back.named_tensors().iter()) {
        assert_eq!(na, nb);
        assert!(a.bit_eq(b));
    }
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], b"TARC1");
    fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_archive(&path, &config), Err(Error::CorruptArchive(_))));
    let mut bad = bytes.clone();
    bad[4] = b'2';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(load_archive(&path, &config), Err(Error::CorruptArchive(_))));
}

#[test]
fn archive_missing_head_tensor_is_named() {
    let config = ModelConfig::tiny();
    let params = ModelParams::random(&config, 4).unwrap();
    let tensors: Vec<_> = params
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| n != "head.cls0.weight")
        .collect();
    let err = archive::params_from_tensors(&config, archive::decode(&archive::encode(&tensors)).unwrap()).unwrap_err();
    assert!(err.to_string().contains("head.cls0.weight"), "{err}");
}

#[test]
fn synth_directories_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let script: Script = "velocity 1 0.5\nat 4 occlude 2\nat 6 shift 3 -2\nat 7 blur 2 1".parse().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth_sequence(42, 10, (64, 48), &script, &a).unwrap();
    synth_sequence(42, 10, (64, 48), &script, &b).unwrap();
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_eq!(dir_bytes(&a).len(), 11);
    let loaded = Sequence::load(&a).unwrap();
    assert_eq!(loaded.len(), 10);
    assert_eq!(loaded.frames[0].width(), 64);
    fs::remove_file(a.join("frame_000010.ppm")).unwrap();
    assert!(matches!(Sequence::load(&a), Err(Error::Format { .. })));
}

fn setup(dir: &Path, frames: usize) -> (String, String, String, String) {
    let config = dir.join("tiny.cfg");
    fs::write(&config, "preset = tiny\nweight_seed = 5\n").unwrap();
    let script = dir.join("script.txt");
    fs::write(&script, "target 30 20 14 12\nvelocity 1 0.5\nbounce\n").unwrap();
    let weights = dir.join("w.tarc");
    let seq = dir.join("seq");
    tctx(&["init-weights", "--config", p(&config), "--out", p(&weights)]);
    tctx(&[
        "synth", "--seed", "7", "--frames", &frames.to_string(), "--size", "80x60", "--script", p(&script), "--out", p(&seq),
    ]);
    let init = fs::read_to_string(seq.join("groundtruth.txt")).unwrap().lines().next().unwrap().to_string();
    (p(&config).into(), p(&weights).into(), p(&seq).into(), init)
}

#[test]
fn cli_run_replays_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let (config, weights, seq, init) = setup(dir.path(), 12);
    let go = |tag: &str, extra: &[&str]| {
        let boxes = dir.path().join(format!("{tag}.txt"));
        let trace = dir.path().join(format!("{tag}.jsonl"));
        let mut args = vec![
            "run", "--weights", &weights, "--config", &config, "--seq", &seq, "--init", &init, "--out", p(&boxes),
            "--trace", p(&trace),
        ];
        args.extend_from_slice(extra);
        tctx(&args);
        (fs::read(&boxes).unwrap(), fs::read_to_string(&trace).unwrap())
    };
    let a = go("a", &[]);
    let b = go("b", &[]);
    assert_eq!(a, b);
    let boxes = String::from_utf8(a.0.clone()).unwrap();
    assert_eq!(boxes.lines().count(), 12);
    assert_eq!(boxes.lines().next().unwrap(), init);
    assert_eq!(a.1.lines().count(), 11);
    for line in a.1.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["box"].as_array().unwrap().len() == 4);
        assert!(v.get("latency_ms").is_none());
        assert!(v["attention_max_row_error"].as_f64().unwrap() <= 1e-5);
    }
    let timed = go("t", &["--trace-timing"]);
    assert_eq!(timed.0, a.0);
    assert!(timed.1.contains("latency_ms"));
    let off = go("off", &["--toggle", "filter=off"]);
    assert_ne!(off.0, a.0);
    assert!(off.1.contains("\"gate_mean\":null"));

    let out = tctx(&["eval", "--pred", &format!("{seq}/groundtruth.txt"), "--gt", &format!("{seq}/groundtruth.txt")]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("auc 1.0000  prec@20 1.0000"));
    let boxes_path = dir.path().join("a.txt");
    assert_eq!(read_boxes(&boxes_path).unwrap().len(), 12);
}

#[test]
fn cli_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let (config, weights, seq, _) = setup(dir.path(), 3);
    let out = Command::new(env!("CARGO_BIN_EXE_tctx"))
        .args(["run", "--weights", &weights, "--config", &config, "--seq", &seq, "--init", "1,2,0,4", "--out"])
        .arg(dir.path().join("x.txt"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_tctx"))
        .args(["run", "--weights", &weights, "--config", &config, "--seq", &seq, "--init", "30,20,14,12"])
        .args(["--toggle", "filter=maybe", "--out"])
        .arg(dir.path().join("x.txt"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let full = dir.path().join("full.cfg");
    fs::write(&full, "preset = full\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tctx"))
        .args(["run", "--weights", &weights, "--config", p(&full), "--seq", &seq, "--init", "30,20,14,12", "--out"])
        .arg(dir.path().join("x.txt"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn cli_bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.cfg");
    fs::write(&config, "preset = tiny\n").unwrap();
    let csv = dir.path().join("r.csv");
    tctx(&["bench", "--config", p(&config), "--frames", "20", "--out", p(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 20);
    let sizes: Vec<&str> = rows.iter().skip(1).map(|r| r.rsplit(',').next().unwrap()).collect();
    assert!(sizes.iter().all(|s| *s == sizes[0]));
    assert!(text.contains("# median_ms,p95_ms,fps,peak_state_bytes"));
}

#[test]
fn cli_selftest_passes() {
    let out = tctx(&["selftest"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("16/16 checks passed"), "{text}");
}
