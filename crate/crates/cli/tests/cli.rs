use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_yunlu");

const SMALL_MODEL: &str = "[model]
d = 16
heads = 2
layers = 1
d_f = 16
l_max = 16
cnn_channels = [4, 8, 8]
[plan]
epochs = 3
warmup_steps = 4
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_small(dir: &Path, out: &str, seed: &str) -> Output {
    run(dir, &["gen-synth", "--out", out, "--train", "120", "--val", "30", "--test", "30", "--seed", seed])
}

/// Every file below `root` keyed by relative path.
fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
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

fn hash_line(o: &Output) -> String {
    stdout(o).lines().find(|l| l.starts_with("sha256")).unwrap().to_string()
}

#[test]
fn gen_synth_prints_summary_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let a = gen_small(t.path(), "a", "5");
    let b = gen_small(t.path(), "b", "5");
    let c = gen_small(t.path(), "c", "6");
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let s = stdout(&a);
    assert!(s.contains("train=120 val=30 test=30"), "{s}");
    assert!(s.contains("classes  5"));
    assert!(s.contains("audio=0.9 visual=0.5 text=0.4"));
    assert!(t.path().join("a/manifest.jsonl").is_file());

    // Printed hashes agree exactly when the directories do.
    assert_eq!(hash_line(&a), hash_line(&b));
    assert_eq!(files(&t.path().join("a")), files(&t.path().join("b")));
    assert_ne!(hash_line(&a), hash_line(&c));
    assert_ne!(files(&t.path().join("a")), files(&t.path().join("c")));
}

#[test]
fn invalid_generator_settings_are_usage_errors() {
    let t = tempfile::tempdir().unwrap();
    let o = run(t.path(), &["gen-synth", "--out", "x", "--audio-signal", "-0.5"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("audio_signal"), "{}", stderr(&o));
    assert!(!t.path().join("x").exists());

    fs::write(t.path().join("bad.toml"), "[synth]\nclases = 3\n").unwrap();
    let o = run(t.path(), &["gen-synth", "--out", "x", "--config", "bad.toml"]);
    assert_eq!(code(&o), 2);

    assert_eq!(code(&run(t.path(), &["gen-synth"])), 2);
    assert_eq!(code(&run(t.path(), &["frobnicate"])), 2);
}

#[test]
fn warmup_train_eval_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    assert_eq!(code(&gen_small(dir, "corpus", "1")), 0);
    fs::write(dir.join("run.toml"), SMALL_MODEL).unwrap();

    let w = run(dir, &["warmup", "--config", "run.toml", "--data", "corpus", "--out", "warm"]);
    assert_eq!(code(&w), 0, "{}", stderr(&w));
    assert!(stdout(&w).contains("4 steps"));
    assert_eq!(fs::read_to_string(dir.join("warm/loss.log")).unwrap().lines().count(), 4);

    let tr = run(
        dir,
        &["train", "--config", "run.toml", "--data", "corpus", "--from", "warm/checkpoint", "--out", "trained"],
    );
    assert_eq!(code(&tr), 0, "{}", stderr(&tr));
    for f in ["checkpoint/meta.json", "report.txt", "report.json", "loss.log", "run.toml"] {
        assert!(dir.join("trained").join(f).exists(), "{f} missing");
    }
    let report = fs::read_to_string(dir.join("trained/report.txt")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("accuracy = ")), "{report}");
    assert!(report.contains("split = val"));

    let ev = run(dir, &["eval", "--checkpoint", "trained/checkpoint", "--data", "corpus", "--out", "eval/test.txt"]);
    assert_eq!(code(&ev), 0, "{}", stderr(&ev));
    assert!(stdout(&ev).contains("split = test"));
    assert!(stdout(&ev).contains("samples = 30"));
    let json = fs::read_to_string(dir.join("eval/test.json")).unwrap();
    assert!(json.contains("\"accuracy\""));
}

#[test]
fn reruns_produce_identical_outputs() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    assert_eq!(code(&gen_small(dir, "corpus", "2")), 0);
    fs::write(dir.join("run.toml"), SMALL_MODEL).unwrap();
    for out in ["r1", "r2"] {
        let o = run(dir, &["train", "--config", "run.toml", "--data", "corpus", "--seed", "4", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(files(&dir.join("r1")), files(&dir.join("r2")));
}

#[test]
fn ablation_flags_reach_the_report() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    assert_eq!(code(&gen_small(dir, "corpus", "3")), 0);
    fs::write(dir.join("run.toml"), SMALL_MODEL.replace("epochs = 3", "epochs = 1")).unwrap();
    let o = run(
        dir,
        &["train", "--config", "run.toml", "--data", "corpus", "--ablate", "audio", "--ablate", "text", "--out", "r"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(dir.join("r/report.txt")).unwrap();
    assert!(report.contains("use_audio = false"));
    assert!(report.contains("use_text = false"));
    assert!(report.contains("modalities = vision"));

    let ev = run(dir, &["eval", "--checkpoint", "r/checkpoint", "--data", "corpus", "--ablate", "vision"]);
    assert_eq!(code(&ev), 2, "all branches off must be refused");

    let o = run(dir, &["train", "--config", "run.toml", "--data", "corpus", "--ablate", "vision", "--out", "v"]);
    assert_eq!(code(&o), 0);
    let ev = run(dir, &["eval", "--checkpoint", "v/checkpoint", "--data", "corpus", "--ablate", "audio"]);
    assert_eq!(code(&ev), 0, "{}", stderr(&ev));
    assert!(stdout(&ev).contains("use_audio = false"));
    assert!(stdout(&ev).contains("use_vision = false"));
}

#[test]
fn missing_or_incompatible_inputs_exit_1() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    assert_eq!(code(&gen_small(dir, "corpus", "1")), 0);

    let o = run(dir, &["eval", "--checkpoint", "nowhere", "--data", "corpus"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nowhere"));

    let o = run(dir, &["train", "--data", "no-corpus", "--out", "x"]);
    assert_eq!(code(&o), 1);

    // Geometry fixed in the file disagrees with the corpus.
    fs::write(dir.join("bad.toml"), "[model]\nd_text = 7\n").unwrap();
    let o = run(dir, &["train", "--config", "bad.toml", "--data", "corpus", "--out", "x"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("text width"), "{}", stderr(&o));

    // Warm-up checkpoint built with different dims.
    fs::write(dir.join("a.toml"), SMALL_MODEL).unwrap();
    fs::write(dir.join("b.toml"), SMALL_MODEL.replace("d = 16", "d = 8")).unwrap();
    assert_eq!(code(&run(dir, &["warmup", "--config", "a.toml", "--data", "corpus", "--out", "w"])), 0);
    let o = run(dir, &["train", "--config", "b.toml", "--data", "corpus", "--from", "w/checkpoint", "--out", "x"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("different model config"), "{}", stderr(&o));

    let o = run(dir, &["train", "--data", "corpus", "--dialects", "mandarin+wu", "--out", "x"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("wu"));

    let o = run(dir, &["train", "--data", "corpus", "--dialects", "a+b+c", "--out", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_and_names_faulty_layers() {
    let t = tempfile::tempdir().unwrap();
    let o = run(t.path(), &["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().filter(|l| l.ends_with(" ok")).collect();
    assert!(rows.len() > 20, "{out}");
    for row in &rows {
        let err: f64 = row.split_whitespace().nth(2).unwrap().parse().unwrap();
        assert!(err <= 1e-6);
    }
    assert!(out.contains("audio.") && out.contains("fusion.") && out.contains("visual.") && out.contains("text."));

    let o = run(t.path(), &["gradcheck", "--inject-fault", "conv2d"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("visual.conv0.w"), "{err}");
    assert!(!err.contains("audio."), "{err}");
}

#[test]
fn inspect_describes_each_artifact_kind() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    assert_eq!(code(&gen_small(dir, "corpus", "1")), 0);

    let o = run(dir, &["inspect", "corpus/latents/s00000.pft"]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    for key in ["dims  [4, 8, 8]", "min ", "mean ", "max "] {
        assert!(s.contains(key), "{s}");
    }

    let o = run(dir, &["inspect", "corpus"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("samples  180"));
    assert!(stdout(&o).contains("dialect  mandarin (d_a=24)"));

    fs::write(dir.join("run.toml"), SMALL_MODEL).unwrap();
    assert_eq!(code(&run(dir, &["warmup", "--config", "run.toml", "--data", "corpus", "--out", "w"])), 0);
    let o = run(dir, &["inspect", "w/checkpoint"]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    assert!(s.contains("classifier.w"), "{s}");
    assert!(s.lines().any(|l| l.starts_with("parameters ") && l.contains("tensors")));

    let bytes = fs::read(dir.join("corpus/text/s00000.pft")).unwrap();
    fs::write(dir.join("cut.pft"), &bytes[..bytes.len() / 2]).unwrap();
    let o = run(dir, &["inspect", "cut.pft"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("cut.pft"));

    fs::write(dir.join("notes.txt"), "hello").unwrap();
    assert_eq!(code(&run(dir, &["inspect", "notes.txt"])), 1);
}
