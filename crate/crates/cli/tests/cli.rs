use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to train in well under a second
n_videos = 10
frames_per_video = 36
image_size = 8
conv_channels = 4,4
repr_dim = 8
proj_dim = 4
weight_hidden = 6
batch_size = 4
epochs = 2
probe_videos = 10
probe_folds = 2
probe_epochs = 20
";

fn muscl(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muscl"))
        .args(args)
        .env("MUSCL_OUTPUT_DIR", out_dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_one_and_name_the_token() {
    let dir = tempfile::tempdir().unwrap();
    let o = muscl(&[], dir.path());
    assert_eq!(o.status.code(), Some(1));

    let o = muscl(&["pretrain", "--seed", "1", "--learning-rat", "3"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--learning-rat"), "{}", stderr(&o));

    let o = muscl(&["pretrain"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--seed"));

    let o = muscl(&["pretrain", "--seed", "1", "--tau", "warm"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tau"));

    let o = muscl(&["pretrain", "--seed", "1", "--config", "no/such.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no/such.cfg"));

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "epochs = 2\nwarmup = 3\n").unwrap();
    let o = muscl(&["pretrain", "--seed", "1", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("warmup"));

    let o = muscl(&["pretrain", "--seed", "1", "--epochs", "0"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = muscl(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("export-embeddings"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere").join("checkpoint.bin");
    let o = muscl(&["probe", "--seed", "1", "--checkpoint", missing.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn pretrain_probe_export_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");

    let o = muscl(&["pretrain", "--config", &cfg, "--seed", "7"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = out.join("checkpoint.bin");
    assert!(ckpt.is_file());
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,steps,train_loss,valid_loss,weight_mean,weight_std");
    assert_eq!(lines.len(), 3);
    let ckpt = ckpt.to_str().unwrap();

    let o = muscl(&["probe", "--checkpoint", ckpt, "--seed", "1"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = stdout(&o);
    assert!(report.starts_with("metric,class,value\naccuracy,,"), "{report}");

    let o = muscl(&["export-weights", "--checkpoint", ckpt, "--pairs-per-video", "2"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let weights = stdout(&o);
    assert_eq!(weights.lines().count(), 1 + 10 * 2);
    assert!(weights.starts_with("video_id,tag,frame_indices,xi1,xi2,weight\n"));

    let emb_path = dir.path().join("emb.csv");
    let o = muscl(
        &["export-embeddings", "--checkpoint", ckpt, "--out", emb_path.to_str().unwrap()],
        &out,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let emb = std::fs::read_to_string(&emb_path).unwrap();
    // 36 frames at 18 fps sampled at 3/s: six frames per video
    assert_eq!(emb.lines().count(), 1 + 10 * 6);
    assert!(emb.starts_with("video_id,frame_index,h1,"));

    let o = muscl(&["finetune", "--checkpoint", ckpt, "--seed", "1"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("finetuned.bin").is_file());

    let o = muscl(&["probe", "--checkpoint", ckpt], &out);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn plain_checkpoint_cannot_export_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = muscl(&["pretrain", "--config", &cfg, "--seed", "2", "--mode", "plain"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = out.join("checkpoint.bin");
    let o = muscl(&["export-weights", "--checkpoint", ckpt.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_then_train_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let corpus = dir.path().join("corpus");
    let o = muscl(
        &["gen-data", "--config", &cfg, "--out", corpus.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read_dir(&corpus).unwrap().count(), 10);

    let out = dir.path().join("run");
    let o = muscl(
        &["pretrain", "--config", &cfg, "--seed", "3", "--data", corpus.to_str().unwrap()],
        &out,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("checkpoint.bin").is_file());
}

#[test]
fn ablate_emits_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = muscl(&["ablate", "--config", &cfg, "--seed", "1,2", "--epochs", "1"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = stdout(&o);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "strategy,seed,accuracy,macro_f1");
    assert_eq!(lines.len(), 1 + 5 * 2);
    let cells: Vec<(String, String)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string())
        })
        .collect();
    assert_eq!(cells[0], ("simclr".to_string(), "1".to_string()));
    assert_eq!(cells[9], ("meta+s3".to_string(), "2".to_string()));
}
