use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use halluc::data::{load_dataset, write_image, ImageTensor, ScaleFactor, ValueRange};

const TINY: &str = r#"
[generator]
lr_size = 4
scale_factor = 4
base_channels = 4
residual_blocks_per_stage = 1
blocks_between_upsamples = 1

[discriminator]
base_channels = 4

[training]
steps = 3
batch_size = 4
seed = 5
"#;

fn halluc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_halluc")).args(args).output().expect("spawn halluc")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn make_dataset(dir: &Path, identities: usize, variations: usize) -> PathBuf {
    let data = dir.join("data");
    let out = halluc(&[
        "make-dataset",
        "--identities",
        &identities.to_string(),
        "--variations",
        &variations.to_string(),
        "--size",
        "16",
        "--out",
        s(&data),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p
}

fn list_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for d in fs::read_dir(root).unwrap() {
        let p = d.unwrap().path();
        if p.is_dir() {
            out.extend(list_files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn help_for_every_command() {
    for cmd in [vec!["--help"], vec!["make-dataset", "--help"], vec!["train", "--help"], vec!["evaluate", "--help"], vec!["hallucinate", "--help"]] {
        let out = halluc(&cmd);
        assert_eq!(code(&out), 0, "{cmd:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{cmd:?}");
    }
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(code(&halluc(&["train", "--stepz", "3"])), 2);
    assert_eq!(code(&halluc(&[])), 2);
}

#[test]
fn make_dataset_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), 3, 2);
    let files = list_files(&data);
    assert_eq!(files.len(), 6);
    assert!(files[0].ends_with("id0000/v000.png"));
    let ds = load_dataset(&data, 16, ScaleFactor::X4).unwrap();
    assert_eq!(ds.identity_count(), 3);

    let again = dir.path().join("again");
    assert_eq!(code(&halluc(&["make-dataset", "--identities", "3", "--variations", "2", "--size", "16", "--out", s(&again)])), 0);
    for (a, b) in files.iter().zip(list_files(&again)) {
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    let refused = halluc(&["make-dataset", "--identities", "3", "--variations", "2", "--size", "16", "--out", s(&data)]);
    assert_eq!(code(&refused), 2);
    let forced = halluc(&["make-dataset", "--identities", "3", "--variations", "2", "--size", "16", "--out", s(&data), "--overwrite"]);
    assert_eq!(code(&forced), 0);
}

#[test]
fn unknown_config_key_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), 2, 2);
    let cfg = write_config(dir.path(), "[training]\nsteps = 1\nlearning_rat = 3\n");
    let out = halluc(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rat"), "{err}");
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn single_identity_cannot_form_imposter_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), 1, 3);
    let cfg = write_config(dir.path(), TINY);
    let out = halluc(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("P2") || String::from_utf8_lossy(&out.stderr).contains("P4"));
}

#[test]
fn missing_checkpoint_and_empty_glob() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = halluc(&["hallucinate", "--checkpoint", s(&missing), "--input", s(&dir.path().join("x*.png")), "--out", s(dir.path())]);
    assert_eq!(code(&out), 1);
    let img = dir.path().join("a.png");
    write_image(&ImageTensor::constant(4, 4, 0.5, ValueRange::Unit).unwrap(), 0, &img).unwrap();
    let out = halluc(&["hallucinate", "--checkpoint", s(&missing), "--input", s(&img), "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    let out = halluc(&["evaluate", "--checkpoint", s(&missing), "--data", s(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn oracle_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), 2, 2);
    let report = dir.path().join("report");
    let out = halluc(&[
        "evaluate", "--oracle", "--data", s(&data), "--factor", "4", "--hr-size", "16", "--no-identity", "--out", s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("psnr=99.0000") && stdout.contains("ssim=1.000000"), "{stdout}");
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(report.join("report.txt").exists());
}

#[test]
fn embedding_file_drives_identity_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), 2, 2);
    let mut text = String::from("# image_id vector\n");
    for i in 0..2 {
        for v in 0..2 {
            let e = if i == 0 { "1 0" } else { "0 1" };
            text.push_str(&format!("id{i:04}/v{v:03} {e}\nid{i:04}/v{v:03}:sr {e}\n"));
        }
    }
    let emb = dir.path().join("emb.txt");
    fs::write(&emb, text).unwrap();
    let report = dir.path().join("report");
    let out = halluc(&[
        "evaluate", "--baseline", "bicubic", "--data", s(&data), "--factor", "4", "--hr-size", "16", "--embedder", s(&emb), "--out", s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("auc=1.000000"));
    assert!(fs::read_to_string(report.join("report.txt")).unwrap().contains("verification auc"));

    fs::write(&emb, "id0000/v000 1 0\n").unwrap();
    let out = halluc(&["evaluate", "--baseline", "bicubic", "--data", s(&data), "--factor", "4", "--hr-size", "16", "--embedder", s(&emb)]);
    assert_eq!(code(&out), 3);
}

#[test]
fn train_resume_evaluate_hallucinate() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), 3, 2);
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let out = halluc(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&run), "--checkpoint-every", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists() && run.join("ckpt_000002.ckpt").exists());
    assert_eq!(fs::read_to_string(run.join("train_log.csv")).unwrap().lines().count(), 4);

    let out = halluc(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&run), "--steps", "5", "--resume", s(&ckpt)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(run.join("train_log.csv")).unwrap().lines().count(), 6);

    let other = write_config(dir.path(), &TINY.replace("seed = 5", "seed = 6"));
    let out = halluc(&["--config", s(&other), "train", "--data", s(&data), "--out", s(&run), "--resume", s(&ckpt)]);
    assert_eq!(code(&out), 2);

    let out = halluc(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&dir.path().join("eval"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("auc="));

    let lr_dir = dir.path().join("lr");
    fs::create_dir(&lr_dir).unwrap();
    for n in ["a", "b"] {
        write_image(&ImageTensor::constant(4, 4, 0.3, ValueRange::Unit).unwrap(), 0, &lr_dir.join(format!("{n}.png"))).unwrap();
    }
    let sr = dir.path().join("sr");
    let out = halluc(&["hallucinate", "--checkpoint", s(&ckpt), "--input", s(&lr_dir.join("*.png")), "--out", s(&sr)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let written = list_files(&sr);
    assert_eq!(written.len(), 2);
    assert!(written[0].ends_with("a_sr.png"));
    let img = halluc::data::read_image(&written[0]).unwrap();
    assert_eq!((img.height(), img.width()), (16, 16));

    write_image(&ImageTensor::constant(8, 8, 0.3, ValueRange::Unit).unwrap(), 0, &lr_dir.join("c.png")).unwrap();
    let out = halluc(&["hallucinate", "--checkpoint", s(&ckpt), "--input", s(&lr_dir.join("c.png")), "--out", s(&sr)]);
    assert_eq!(code(&out), 3);
}
