use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[corpus]
av_clips = 4
sfx_clips = 4

[codec.model]
hidden = 32
latent_dim = 8
stft_resolutions = [[128, 32]]

[codec.train]
steps = 20
batch = 2
crop_frames = 4

[train]
preset = "compact"
window = 16
checkpoint_every = 2

[train.model]
layers = 1
hidden_dim = 32
heads = 2
ffn_dim = 32
audio_proj_dim = 16
video_proj_dim = 16
latent_dim = 8
video_dim = 512
text_dim = 768
time_embed_dim = 16
init = "ada_ln_zero"
positional = true

[train.optim]
warmup = 1
total_steps = 4
batch = 2

[finetune.optim]
warmup = 1
total_steps = 2
batch = 2

[generate]
steps = 2
limit = 2
duration_s = 8.0

[eval]
classifier_clips = 4
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_foleygen"))
}

fn run(args: &[&str], root: &Path) -> Output {
    let out = bin()
        .args(args)
        .env("FOLEYGEN_DATA", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    out
}

fn ok(args: &[&str], root: &Path) -> Output {
    let o = run(args, root);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();
    ok(&["--config", c, "synth-corpus"], root);
    assert!(root.join("corpus/av/manifest.jsonl").exists());
    ok(&["--config", c, "train-codec"], root);
    ok(&["--config", c, "train"], root);
    assert!(root.join("runs/pretrain/latest.fgck").exists());
    let metrics = fs::read_to_string(root.join("runs/pretrain/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    ok(&["--config", c, "finetune"], root);
    assert!(root.join("runs/finetune/latest.fgck").exists());

    let a = root.join("gen-a");
    let b = root.join("gen-b");
    ok(&["--config", c, "generate", "--out", a.to_str().unwrap(), "--gamma", "3.0"], root);
    ok(&["--config", c, "generate", "--out", b.to_str().unwrap(), "--gamma", "3.0"], root);
    let wa = fs::read(a.join("gen-av-00000.wav")).unwrap();
    let wb = fs::read(b.join("gen-av-00000.wav")).unwrap();
    assert_eq!(wa, wb, "same config and seed must give identical audio");
    let prov = fs::read_to_string(a.join("provenance.jsonl")).unwrap();
    assert!(prov.contains("denoiser_sha256") && prov.contains("\"gamma\":3.0"));

    for mode in ["extend", "quality", "text"] {
        let d = root.join(format!("gen-{mode}"));
        ok(&["--config", c, "generate", "--out", d.to_str().unwrap(), "--mode", mode], root);
        assert!(d.join("manifest.jsonl").exists());
    }

    let o = ok(&["--config", c, "eval", a.to_str().unwrap()], root);
    assert!(String::from_utf8_lossy(&o.stdout).contains("onset F1"));
    assert!(a.join("report.json").exists());

    let s = root.join("sweep");
    let o = ok(&["--config", c, "sweep", "--out", s.to_str().unwrap(), "--gamma", "1,3"], root);
    let table = String::from_utf8_lossy(&o.stdout).to_string();
    assert_eq!(table.lines().count(), 3, "{table}");

    fs::remove_file(a.join("gen-av-00001.wav")).unwrap();
    let o = run(&["--config", c, "eval", a.to_str().unwrap()], root);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-av-00001.wav"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let o = run(&["generate", "--out", "x", "--mode", "bogus"], root);
    assert_eq!(o.status.code(), Some(2));
    let cfg = root.join("bad.toml");
    fs::write(&cfg, "[train]\nunknown_key = 1\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "synth-corpus"], root);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["sweep", "--out", "x", "--gamma", ""], root);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = root.join("g");
    let o = run(&["generate", "--out", out.to_str().unwrap()], root);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing codec checkpoint"));
}
