use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lmc::io::read_patch;

fn lmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lmc")
}

fn ok(args: &[&str]) -> String {
    let out = lmc(args);
    assert!(
        out.status.success(),
        "lmc {args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: &str, size: &str, seed: &str, shift: Option<&str>) {
    let mut args = vec!["synth", "--out", s(dir), "--n", n, "--size", size, "--seed", seed];
    if let Some(sh) = shift {
        args.extend(["--shift", sh]);
    }
    ok(&args);
}

#[test]
fn help_lists_defaults() {
    let text = ok(&["augment", "--help"]);
    assert!(text.contains("[default: 0.5]") && text.contains("[default: 2]"), "{text}");
    let text = ok(&["macenko", "--help"]);
    assert!(text.contains("0.65,0.704,0.286"), "{text}");
    let top = ok(&["--help"]);
    for sub in ["augment", "macenko", "train", "embed", "eval-separation", "probe", "synth"] {
        assert!(top.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn pipeline_end_to_end() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("site_a"), t.path().join("site_b"));
    synth(&a, "16", "32", "1", None);
    synth(&b, "16", "32", "2", Some("1.6,0.7"));

    let ckpt = t.path().join("enc.ckpt");
    let log = t.path().join("loss.csv");
    let stdout = ok(&[
        "train", "--data", s(&a), "--out", s(&ckpt), "--tiny", "--steps", "6", "--set", "batch_size=8",
        "--log", s(&log),
    ]);
    assert!(stdout.contains("batch_size = 8") && stdout.contains("total_steps = 6"), "{stdout}");
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 7);

    let emb = t.path().join("emb.csv");
    ok(&["embed", "--checkpoint", s(&ckpt), "--data", s(&a), "--data", s(&b), "--out", s(&emb)]);
    let rows = fs::read_to_string(&emb).unwrap();
    assert_eq!(rows.lines().count(), 33);

    let sep = t.path().join("sep.csv");
    let stdout = ok(&["eval-separation", "--embeddings", s(&emb), "--out", s(&sep)]);
    assert!(stdout.contains("site_a vs site_b"), "{stdout}");
    let report = fs::read_to_string(&sep).unwrap();
    assert!(report.starts_with("class,w2\n"), "{report}");
    for class in ["0,", "1,", "overall,"] {
        assert!(report.lines().any(|l| l.starts_with(class)), "{report}");
    }

    let probe = t.path().join("probe.csv");
    let stdout = ok(&["probe", "--train", s(&emb), "--test", s(&emb), "--out", s(&probe), "--epochs", "50"]);
    assert!(stdout.contains("accuracy = "), "{stdout}");
    assert!(fs::read_to_string(&probe).unwrap().starts_with("class,accuracy\n"));
}

#[test]
fn unknown_config_key_exits_2() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "4", "32", "0", None);
    let out = lmc(&["train", "--data", s(t.path()), "--out", s(&t.path().join("x")), "--set", "learning_rate=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn wrong_patch_size_exits_3() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "4", "16", "0", None);
    let out = lmc(&["train", "--data", s(t.path()), "--out", s(&t.path().join("x")), "--tiny", "--steps", "2"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn identity_augment_is_near_lossless() {
    let t = tempfile::tempdir().unwrap();
    let (src, dst) = (t.path().join("in"), t.path().join("out"));
    synth(&src, "3", "32", "5", None);
    ok(&["augment", "--input", s(&src), "--output", s(&dst), "--alpha-h", "1", "--alpha-e", "1"]);
    for i in 0..3 {
        let name = format!("synth_{i:05}.png");
        let (a, b) = (read_patch(&src.join(&name)).unwrap(), read_patch(&dst.join(&name)).unwrap());
        let (pa, pb) = (a.pixels(), b.pixels());
        let mae = pa
            .iter()
            .flatten()
            .zip(pb.iter().flatten())
            .map(|(x, y)| (*x as f64 - *y as f64).abs())
            .sum::<f64>()
            / (pa.len() * 3) as f64;
        assert!(mae <= 2.0, "{name}: {mae}");
    }
    let manifest = fs::read_to_string(dst.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().next(), Some("identifier,alpha_h,alpha_e"));
    assert!(manifest.lines().skip(1).all(|l| l.ends_with(",1,1")), "{manifest}");
}

#[test]
fn random_augment_replays_with_seed() {
    let t = tempfile::tempdir().unwrap();
    let src = t.path().join("in");
    synth(&src, "4", "32", "6", None);
    let run = |name: &str, seed: &str| {
        let dst = t.path().join(name);
        ok(&["augment", "--input", s(&src), "--output", s(&dst), "--random", "--seed", seed, "--pairs"]);
        dst
    };
    let (x, y, z) = (run("x", "7"), run("y", "7"), run("z", "8"));
    let mx = fs::read_to_string(x.join("manifest.csv")).unwrap();
    assert_eq!(mx, fs::read_to_string(y.join("manifest.csv")).unwrap());
    assert_ne!(mx, fs::read_to_string(z.join("manifest.csv")).unwrap());
    assert_eq!(mx.lines().count(), 5);
    assert_eq!(
        fs::read(x.join("synth_00002_v2.png")).unwrap(),
        fs::read(y.join("synth_00002_v2.png")).unwrap()
    );
}

#[test]
fn train_is_reproducible_and_resumable() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    synth(&data, "16", "32", "3", None);
    let base = ["--data", s(&data), "--tiny", "--steps", "10", "--set", "batch_size=8", "--seed", "11"];
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--out", s(out)];
        args.extend(base);
        args.extend(extra);
        ok(&args);
    };
    let (full, again) = (t.path().join("full.ckpt"), t.path().join("again.ckpt"));
    train(&full, &[]);
    train(&again, &[]);
    assert_eq!(fs::read(&full).unwrap(), fs::read(&again).unwrap());

    let half = t.path().join("half.ckpt");
    train(&half, &["--max-steps", "5"]);
    let resumed = t.path().join("resumed.ckpt");
    let stdout = ok(&["train", "--data", s(&data), "--resume", s(&half), "--out", s(&resumed)]);
    assert!(stdout.contains("# starting step = 5"), "{stdout}");
    assert_eq!(fs::read(&resumed).unwrap(), fs::read(&full).unwrap());
}

#[test]
fn macenko_normalizes_to_reference() {
    let t = tempfile::tempdir().unwrap();
    let (src, dst) = (t.path().join("in"), t.path().join("out"));
    synth(&src, "2", "32", "8", Some("1.5,0.8"));
    ok(&["macenko", "--input", s(&src), "--output", s(&dst)]);
    assert!(dst.join("synth_00000.png").is_file() && dst.join("synth_00001.png").is_file());
}
