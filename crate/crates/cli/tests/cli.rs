use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bmfa::frontend::{write_wav, Waveform};
use bmfa::tensor::read_tensor;

fn bmfa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bmfa"))
        .args(args)
        .current_dir(dir)
        .env_remove("BMFA_THREADS")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Relative path -> contents, for every file below `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

// small enough that a few training steps take well under a second
const TINY: &str = r#"{
  "corpus": {"n_speakers": 3, "utts_per_speaker": 6, "heldout_per_speaker": 2, "min_frames": 40, "max_frames": 60},
  "model": {"backbone": {"base_channels": 4, "blocks": [1, 1, 1, 1]}},
  "train": {"steps": 3, "batch": 4, "crop_min": 16, "crop_max": 32, "seed": 5}
}"#;

fn tiny_setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    ok(&bmfa(&["gen-data", "--config", "tiny.json", "--out", "data"], dir.path()));
    dir
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    ok(&bmfa(&["gen-data", "--config", "tiny.json", "--out", "a"], dir.path()));
    ok(&bmfa(&["gen-data", "--config", "tiny.json", "--out", "b"], dir.path()));
    let (a, b) = (snapshot(&dir.path().join("a")), snapshot(&dir.path().join("b")));
    assert_eq!(a.len(), 3 * 6 + 4 + 1); // features, four lists, stamp
    assert!(a == b, "two generations differ");
    ok(&bmfa(&["gen-data", "--config", "tiny.json", "--seed", "9", "--out", "c"], dir.path()));
    let c = snapshot(&dir.path().join("c"));
    assert_ne!(a[Path::new("features/spk000-utt000.btf")], c[Path::new("features/spk000-utt000.btf")]);
}

#[test]
fn default_corpus_is_twenty_by_fifty() {
    let dir = tempfile::tempdir().unwrap();
    ok(&bmfa(&["gen-data", "--out", "d"], dir.path()));
    let manifest = fs::read_to_string(dir.path().join("d/manifest.txt")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines.len(), 1000);
    let speakers: std::collections::BTreeSet<&str> = lines.iter().map(|l| l.split_whitespace().nth(1).unwrap()).collect();
    assert_eq!(speakers.len(), 20);
    let held = fs::read_to_string(dir.path().join("d/heldout.txt")).unwrap();
    assert_eq!(held.lines().count(), 200);
    assert_eq!(fs::read_to_string(dir.path().join("d/trials.txt")).unwrap().lines().count(), 200 * 199 / 2);
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"corpus": {"n_speakers": 1}}"#).unwrap();
    let out = bmfa(&["gen-data", "--config", "bad.json", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("speakers"));

    fs::write(dir.path().join("typo.json"), r#"{"train": {"stpes": 3}}"#).unwrap();
    let out = bmfa(&["gen-data", "--config", "typo.json", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(bmfa(&["no-such-command"], dir.path()).status.code(), Some(1));
    assert_eq!(bmfa(&["--threads", "0", "gradcheck", "--filter", "relu"], dir.path()).status.code(), Some(1));
}

#[test]
fn train_requires_a_seed() {
    let dir = tiny_setup();
    let out = bmfa(&["train", "--data", "data", "--run", "r", "--steps", "1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    // a --seed flag is enough
    let no_seed = TINY.replace(r#", "seed": 5"#, "");
    fs::write(dir.path().join("noseed.json"), no_seed).unwrap();
    ok(&bmfa(&["train", "--config", "noseed.json", "--data", "data", "--run", "r", "--seed", "1"], dir.path()));
}

#[test]
fn missing_run_is_a_runtime_error() {
    let dir = tiny_setup();
    let out = bmfa(&["extract", "--run", "nowhere", "--manifest", "data/heldout.txt"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_is_bit_reproducible() {
    let dir = tiny_setup();
    for run in ["r1", "r2"] {
        ok(&bmfa(&["train", "--config", "tiny.json", "--data", "data", "--run", run, "--threads", "1"], dir.path()));
    }
    let (a, b) = (snapshot(&dir.path().join("r1")), snapshot(&dir.path().join("r2")));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    assert!(a[Path::new("model.ckpt")] == b[Path::new("model.ckpt")], "checkpoints differ");
    assert_eq!(a, b);
    let metrics = String::from_utf8(a[Path::new("metrics.txt")].clone()).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3);
    assert!(metrics.starts_with("# step lr loss accuracy"));
    let stamp: serde_json::Value = serde_json::from_slice(&a[Path::new("stamp-train.json")]).unwrap();
    assert_eq!(stamp["seed"], 5);
    assert_eq!(stamp["formats"]["checkpoint"], 1);
    assert_eq!(stamp["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn extract_writes_one_512_vector_per_manifest_line() {
    let dir = tiny_setup();
    ok(&bmfa(&["train", "--config", "tiny.json", "--data", "data", "--run", "r"], dir.path()));
    ok(&bmfa(&["extract", "--run", "r", "--manifest", "data/manifest.txt", "--threads", "3"], dir.path()));
    let manifest = fs::read_to_string(dir.path().join("data/manifest.txt")).unwrap();
    let emb = fs::read_to_string(dir.path().join("r/embeddings.txt")).unwrap();
    assert_eq!(emb.lines().count(), manifest.lines().count());
    for line in emb.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 1 + 512);
        assert!(fields[1..].iter().all(|v| v.parse::<f32>().unwrap().is_finite()));
    }
    // thread count does not change the output
    ok(&bmfa(&["extract", "--run", "r", "--manifest", "data/manifest.txt", "--out", "one.txt"], dir.path()));
    assert_eq!(fs::read_to_string(dir.path().join("one.txt")).unwrap(), emb);
}

#[test]
fn self_trials_give_zero_eer() {
    let dir = tiny_setup();
    ok(&bmfa(&["train", "--config", "tiny.json", "--data", "data", "--run", "r"], dir.path()));
    let held = fs::read_to_string(dir.path().join("data/heldout.txt")).unwrap();
    let utts: Vec<(&str, &str)> = held
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f[0], f[1])
        })
        .collect();
    // every utterance against itself, plus all cross-speaker pairs as nontargets
    let mut trials = String::new();
    for (i, a) in utts.iter().enumerate() {
        trials += &format!("{} {} target\n", a.0, a.0);
        for b in &utts[i + 1..] {
            if a.1 != b.1 {
                trials += &format!("{} {} nontarget\n", a.0, b.0);
            }
        }
    }
    fs::write(dir.path().join("self.txt"), trials).unwrap();
    let out = ok(&bmfa(
        &["eval", "--run", "r", "--manifest", "data/heldout.txt", "--trials", "self.txt"],
        dir.path(),
    ));
    assert!(out.contains("EER      0.0000%"), "{out}");

    // the extract -> score -> eval route agrees
    ok(&bmfa(&["extract", "--run", "r", "--manifest", "data/heldout.txt"], dir.path()));
    ok(&bmfa(&["score", "--run", "r", "--trials", "self.txt"], dir.path()));
    let out2 = ok(&bmfa(&["eval", "--run", "r"], dir.path()));
    assert_eq!(out, out2);
}

#[test]
fn gradcheck_filter_and_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&bmfa(&["gradcheck", "--filter", "afm", "--report", "g.json"], dir.path()));
    let rows: Vec<&str> = out.lines().filter(|l| l.ends_with("ok") || l.contains(" ok ")).collect();
    assert_eq!(rows.len(), 1, "{out}");
    assert!(rows[0].starts_with("afm"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 1);

    let bad = bmfa(&["gradcheck", "--filter", "conv2d_1x1", "--corrupt"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));

    assert_eq!(bmfa(&["gradcheck", "--filter", "nothing-matches"], dir.path()).status.code(), Some(1));
}

#[test]
fn compare_prints_one_row_per_system() {
    let dir = tiny_setup();
    let cfg = TINY.replace(r#""steps": 3"#, r#""steps": 0"#);
    fs::write(dir.path().join("zero.json"), cfg).unwrap();
    let out = ok(&bmfa(&["compare", "--config", "zero.json", "--data", "data", "--run", "cmp"], dir.path()));
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.split_whitespace().next().unwrap()).collect();
    assert_eq!(
        names,
        ["baseline", "mfa_s34+concat", "mfa_s34+afm", "mea_fpm+add", "mea_fpm+afm", "bmfa+concat", "bmfa+add", "bmfa+afm"]
    );
    assert!(dir.path().join("cmp/compare.txt").exists());
    assert!(dir.path().join("cmp/bmfa+afm-seed5/model.ckpt").exists());
}

#[test]
fn extract_features_from_wav() {
    let dir = tempfile::tempdir().unwrap();
    let sr = 16_000;
    let mut list = String::new();
    for (i, freq) in [300.0f64, 1200.0].iter().enumerate() {
        let samples: Vec<f32> = (0..sr)
            .map(|n| {
                let t = n as f64 / sr as f64;
                // loud first half, near-silent second half
                let amp = if n < sr / 2 { 0.5 } else { 1e-4 };
                (amp * (2.0 * std::f64::consts::PI * freq * t).sin()) as f32
            })
            .collect();
        let name = format!("u{i}.wav");
        write_wav(dir.path().join(&name), &Waveform::new(samples, sr as u32).unwrap()).unwrap();
        list += &format!("utt{i} spk{i} {name}\n");
    }
    list += "short spk0 short.wav\n";
    write_wav(dir.path().join("short.wav"), &Waveform::new(vec![0.1; 100], sr as u32).unwrap()).unwrap();
    fs::write(dir.path().join("wavs.txt"), list).unwrap();

    let out = ok(&bmfa(&["extract-features", "--wavs", "wavs.txt", "--out", "feats"], dir.path()));
    assert!(out.starts_with("2 of 3 utterances"), "{out}");
    let manifest = fs::read_to_string(dir.path().join("feats/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
    let t = read_tensor(dir.path().join("feats/features/utt0.btf")).unwrap();
    let s = t.shape();
    assert_eq!((s.n(), s.c(), s.f()), (1, 1, 64));
    // VAD drops the quiet half: 98 frames in total, about 49 loud
    assert!(s.t() > 40 && s.t() < 60, "{s}");
}
