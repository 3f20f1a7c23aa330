use std::path::Path;
use std::process::{Command, Output};

use salfuse::data::{Blob, Manifest, Payload};

const RUN: &str = r#"
epochs = 2
batch_size = 8
fresh_rate = 1e-3
decay_epochs = []
seed = 5

[model]
joints = 11
image_size = 32
patch = 8
embed_dim = 32
skeleton_stem = 16
skeleton_stages = [{ channels = 32, stride = 1 }, { channels = 32, stride = 2 }, { channels = 32, stride = 2 }]
visual_width = 64
visual_heads = 4
text_width = 64
text_heads = 4
meta_hidden = 16
fusion_width = 64
fusion_heads = 4
salience_heads = 4
"#;

fn salfuse(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_salfuse"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), RUN).unwrap();
    let o = salfuse(&["synth", "--data", "ds", "--per-class", "4", "--seed", "2"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn inspect_config_reports_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let o = salfuse(&["inspect-config", "--preset", "paper"], dir.path());
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for line in [
        "epochs = 55",
        "batch_size = 16",
        "warmup_epochs = 5",
        "decay_epochs = [35, 45]",
        "context_tokens = 24",
        "lambda = 0.8",
        "frames = 16",
        "# skeleton_tokens = 100",
        "# skeleton_tokens_after_downsampling = 25",
        "# visual_tokens_after_downsampling = 8",
    ] {
        assert!(text.lines().any(|l| l == line), "missing `{line}` in\n{text}");
    }

    let o = salfuse(
        &["inspect-config", "--no-text-sup", "--text-sup-video", "--fixed-prompts", "--no-conditioning", "--no-downsample"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for line in [
        "text_sup_skeleton = false",
        "text_sup_video = true",
        "learnable_prompts = false",
        "conditioning = \"off\"",
        "skeleton_iterations = 0",
        "visual_iterations = 0",
    ] {
        assert!(text.lines().any(|l| l == line), "missing `{line}`");
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "epochs = 0\n").unwrap();
    assert_eq!(code(&salfuse(&["inspect-config", "--config", "bad.toml"], dir.path())), 2);
    std::fs::write(dir.path().join("typo.toml"), "epoch = 3\n").unwrap();
    assert_eq!(code(&salfuse(&["inspect-config", "--config", "typo.toml"], dir.path())), 2);
    assert_eq!(code(&salfuse(&["inspect-config", "--config", "absent.toml"], dir.path())), 2);
    assert_eq!(code(&salfuse(&["synth", "--data", "x", "--classes", "1"], dir.path())), 2);
    assert_eq!(code(&salfuse(&["train", "--bogus"], dir.path())), 2);
}

#[test]
fn data_errors_exit_3() {
    let dir = setup();
    let p = dir.path();
    let train = ["train", "--config", "run.toml", "--data", "ds", "--checkpoint", "out/m.sfck"];
    assert_eq!(code(&salfuse(&["train", "--config", "run.toml", "--data", "nowhere", "--checkpoint", "m.sfck"], p)), 3);

    let m = Manifest::load(&p.join("ds")).unwrap();
    let blob = p.join("ds").join(&m.samples[0].frames);
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[40] ^= 0xff;
    std::fs::write(&blob, &bytes).unwrap();
    let o = salfuse(&train, p);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));

    std::fs::remove_file(&blob).unwrap();
    let o = salfuse(&train, p);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
}

#[test]
fn non_finite_input_exits_4() {
    let dir = setup();
    let p = dir.path();
    let m = Manifest::load(&p.join("ds")).unwrap();
    let path = p.join("ds").join(&m.samples[0].skeleton);
    let mut blob = Blob::read(&path).unwrap();
    if let Payload::Skeleton(v) = &mut blob.payload {
        v.iter_mut().for_each(|x| *x = f32::NAN);
    }
    blob.write(&path).unwrap();
    let o = salfuse(&["train", "--config", "run.toml", "--data", "ds", "--checkpoint", "m.sfck"], p);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch 1"));
}

#[test]
fn train_eval_saliency_pipeline() {
    let dir = setup();
    let p = dir.path();
    let train = |ck: &str| salfuse(&["train", "--config", "run.toml", "--data", "ds", "--checkpoint", ck], p);
    assert_eq!(code(&train("a/m.sfck")), 0);
    assert_eq!(code(&train("b/m.sfck")), 0);
    let log = |d: &str| std::fs::read(p.join(d).join("m.sfck.metrics.log")).unwrap();
    assert_eq!(log("a"), log("b"));
    assert_eq!(String::from_utf8(log("a")).unwrap().lines().count(), 2);

    let eval = || salfuse(&["eval", "--data", "ds", "--checkpoint", "a/m.sfck", "--split", "test"], p);
    let (e1, e2) = (eval(), eval());
    assert_eq!(code(&e1), 0);
    assert_eq!(e1.stdout, e2.stdout);
    let report: serde_json::Value = serde_json::from_slice(&e1.stdout).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["confusion"].as_array().unwrap().len(), 4);

    let o = salfuse(&["saliency", "--data", "ds", "--checkpoint", "a/m.sfck", "--sample", "c01_s003"], p);
    assert_eq!(code(&o), 0);
    let s: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(s["visual_frames"].as_array().unwrap().len(), 8);
    assert_eq!(s["skeleton"].as_array().unwrap().len(), 11);
    let o = salfuse(&["saliency", "--data", "ds", "--checkpoint", "a/m.sfck", "--sample", "nope"], p);
    assert_eq!(code(&o), 3);

    // Resume one more epoch, and a config mismatch on eval.
    std::fs::write(p.join("run3.toml"), RUN.replace("epochs = 2", "epochs = 3")).unwrap();
    let o = salfuse(&["train", "--config", "run3.toml", "--data", "ds", "--checkpoint", "a/m.sfck", "--resume"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8(log("a")).unwrap().lines().count(), 3);
    std::fs::write(p.join("other.toml"), RUN.replace("embed_dim = 32", "embed_dim = 16")).unwrap();
    let o = salfuse(&["eval", "--data", "ds", "--checkpoint", "a/m.sfck", "--config", "other.toml"], p);
    assert_eq!(code(&o), 2);
}
