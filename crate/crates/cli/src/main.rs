mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use foleygen::audio::{read_wav, write_wav, WavFormat, Waveform};
use foleygen::codec::{train_codec, Codec};
use foleygen::diffusion::{GuidanceMode, NegativePrompt, NoiseSchedule};
use foleygen::encoders::{fnv1a64, read_features, Caption, DatasetSource, Manifest, ManifestRecord, QualityTag, TextEncoder, VideoClip};
use foleygen::eval::{evaluate, noise_clips, ClassifierSpec, EvalItem, EvalReport, OnsetParams, ToyClassifier};
use foleygen::pipeline::{default_video_encoder, encode_manifest, train_data, GenerateRequest, Generator};
use foleygen::synthdata::{build_corpus, default_classes, generate_corpus, CorpusSpec, VideoStyle};
use foleygen::training::{begin_finetune, train, RunDir, Stage, TrainSpec, TrainState};
use serde::Serialize;

use config::{Mode, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "foleygen", version, about = "Video-guided Foley generation with text, audio and video controls")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic AV and SFX corpora with manifests.
    SynthCorpus {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the latent codec on both corpora.
    TrainCodec {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// First-stage denoiser training on the mixed corpora.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Codec checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from `<out>/latest.fgck`.
        #[arg(long)]
        resume: bool,
    },
    /// Second-stage training on the high-correspondence subset.
    Finetune {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pretrained denoiser checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Generate audio for the records of a manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Denoiser checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate and evaluate for each guidance scale.
    Sweep {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated guidance scales.
        #[arg(long, value_delimiter = ',')]
        gamma: Option<Vec<f64>>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a directory of generated clips.
    Eval {
        /// Directory produced by `generate`.
        generated: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Saved classifier.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Error category deciding the exit code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.cmd {
        Command::SynthCorpus { out } => {
            cfg.validate().map_err(|e| usage(format!("{e:#}")))?;
            cmd_synth(&cfg, out.unwrap_or_else(|| cfg.corpus_dir()))
        }
        Command::TrainCodec { out, steps } => {
            if let Some(s) = steps {
                cfg.codec.train.steps = s;
            }
            cfg.validate().map_err(|e| usage(format!("{e:#}")))?;
            cmd_train_codec(&cfg, out.unwrap_or_else(|| cfg.codec_path()))
        }
        Command::Train {
            out,
            checkpoint,
            steps,
            resume,
        } => {
            if let Some(s) = steps {
                cfg.train.optim.total_steps = s;
            }
            if let Some(c) = checkpoint {
                cfg.paths.codec = Some(c);
            }
            cfg.validate().map_err(|e| usage(format!("{e:#}")))?;
            cmd_train(&cfg, out.unwrap_or_else(|| cfg.pretrain_dir()), resume)
        }
        Command::Finetune { out, checkpoint, steps } => {
            if let Some(s) = steps {
                cfg.finetune.optim.total_steps = s;
            }
            cfg.validate().map_err(|e| usage(format!("{e:#}")))?;
            let ck = checkpoint.unwrap_or_else(|| cfg.pretrain_dir().join("latest.fgck"));
            cmd_finetune(&cfg, &ck, out.unwrap_or_else(|| cfg.finetune_dir()))
        }
        Command::Generate {
            out,
            checkpoint,
            mode,
            gamma,
            steps,
        } => {
            apply_generate_flags(&mut cfg, mode, gamma, steps);
            cfg.validate().map_err(|e| usage(format!("{e:#}")))?;
            let ck = checkpoint.unwrap_or_else(|| default_denoiser(&cfg));
            let gen = load_generator(&cfg, &ck)?;
            let n = cmd_generate(&cfg, &gen, &ck, &out)?;
            log::info!("wrote {n} clips to {}", out.display());
            Ok(())
        }
        Command::Sweep {
            out,
            checkpoint,
            gamma,
            mode,
            steps,
        } => {
            apply_generate_flags(&mut cfg, mode, None, steps);
            if let Some(g) = gamma {
                cfg.sweep.gammas = g;
            }
            if cfg.sweep.gammas.is_empty() {
                return Err(usage("sweep needs at least one guidance scale"));
            }
            cfg.validate().map_err(|e| usage(format!("{e:#}")))?;
            let ck = checkpoint.unwrap_or_else(|| default_denoiser(&cfg));
            cmd_sweep(&cfg, &ck, &out)
        }
        Command::Eval {
            generated,
            out,
            checkpoint,
        } => {
            cfg.validate().map_err(|e| usage(format!("{e:#}")))?;
            let dir = generated
                .or(cfg.eval.generated.clone())
                .ok_or_else(|| usage("eval needs a generated directory"))?;
            if let Some(c) = checkpoint {
                cfg.eval.classifier = Some(c);
            }
            let clf = classifier(&cfg)?;
            let report = cmd_eval(&dir, &clf)?;
            let out = out.unwrap_or_else(|| dir.clone());
            write_report(&out, &report)?;
            print!("{}", report.table());
            Ok(())
        }
    }
}

fn apply_generate_flags(cfg: &mut RunConfig, mode: Option<Mode>, gamma: Option<f64>, steps: Option<usize>) {
    if let Some(m) = mode {
        cfg.generate.mode = m;
    }
    if let Some(g) = gamma {
        cfg.generate.gamma = g;
    }
    if let Some(s) = steps {
        cfg.generate.steps = s;
    }
}

fn default_denoiser(cfg: &RunConfig) -> PathBuf {
    let ft = cfg.finetune_dir().join("latest.fgck");
    if ft.exists() {
        ft
    } else {
        cfg.pretrain_dir().join("latest.fgck")
    }
}

fn corpus_specs(cfg: &RunConfig) -> (CorpusSpec, CorpusSpec) {
    (
        CorpusSpec::av(cfg.corpus.av_clips, cfg.seed),
        CorpusSpec::sfx(cfg.corpus.sfx_clips, cfg.seed),
    )
}

fn cmd_synth(cfg: &RunConfig, out: PathBuf) -> Result<()> {
    let (av, sfx) = corpus_specs(cfg);
    for (spec, sub) in [(av, "av"), (sfx, "sfx")] {
        if spec.n_clips == 0 {
            continue;
        }
        let dir = out.join(sub);
        let m = build_corpus(&spec, &dir)?;
        log::info!("{} clips in {}", m.records.len(), dir.display());
    }
    Ok(())
}

fn manifests(cfg: &RunConfig) -> Vec<PathBuf> {
    ["av", "sfx"]
        .iter()
        .map(|s| cfg.corpus_dir().join(s).join("manifest.jsonl"))
        .filter(|p| p.exists())
        .collect()
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing {what}: {}", path.display());
    }
    Ok(())
}

fn cmd_train_codec(cfg: &RunConfig, out: PathBuf) -> Result<()> {
    let ms = manifests(cfg);
    if ms.is_empty() {
        bail!("no corpus manifests under {}", cfg.corpus_dir().display());
    }
    let mut audio = Vec::new();
    for m in &ms {
        let root = m.parent().unwrap_or(Path::new("."));
        for r in Manifest::load(m)?.records {
            let rel = r.audio.ok_or_else(|| anyhow!("record {} has no audio", r.id))?;
            audio.push(read_wav(&root.join(rel))?);
        }
    }
    let mut spec = cfg.codec.train.clone();
    spec.seed = cfg.seed;
    let (codec, trace) = train_codec::<f32>(&audio, cfg.codec.model.clone(), &spec)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    codec.save(&out)?;
    if let Some(last) = trace.last() {
        log::info!("codec step {} recon {:.5} kl {:.5}", last.step, last.recon, last.kl);
    }
    log::info!("codec written to {}", out.display());
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<foleygen::training::TrainData<f32>> {
    let cp = cfg.codec_path();
    require(&cp, "codec checkpoint")?;
    let codec = Codec::<f32>::load(&cp)?;
    let model = cfg.train.model();
    let venc = default_video_encoder::<f32>(VideoStyle::default().dim, model.video_dim, CorpusSpec::av(1, 0).fps);
    let ms = manifests(cfg);
    if ms.is_empty() {
        bail!("no corpus manifests under {}", cfg.corpus_dir().display());
    }
    let mut clips = Vec::new();
    for m in &ms {
        clips.extend(encode_manifest(&codec, &venc, m)?);
    }
    Ok(train_data(clips, codec.cfg.latent_rate))
}

fn train_spec(cfg: &RunConfig, stage: Stage) -> TrainSpec {
    TrainSpec {
        stage,
        optim: match stage {
            Stage::Pretrain => cfg.train.optim.clone(),
            Stage::Finetune => cfg.finetune.optim.clone(),
        },
        mix: cfg.train.mix.clone(),
        mask: cfg.train.mask.clone(),
        window: cfg.train.window,
        posterior_sampling: cfg.train.posterior_sampling,
        checkpoint_every: cfg.train.checkpoint_every,
        seed: cfg.seed,
    }
}

fn log_metric(m: &foleygen::training::MetricRecord) {
    if (m.step + 1).is_multiple_of(100) {
        log::info!(
            "step {} loss {:.4} lr {:.2e} grad {:.3} ema {:.4}",
            m.step + 1,
            m.loss,
            m.lr,
            m.grad_norm,
            m.ema_distance
        );
    }
}

fn cmd_train(cfg: &RunConfig, out: PathBuf, resume: bool) -> Result<()> {
    let data = load_data(cfg)?;
    let spec = train_spec(cfg, Stage::Pretrain);
    let run = RunDir { root: out };
    let mut st = if resume && run.latest().exists() {
        TrainState::<f32>::load(&run.latest(), &spec.optim)?
    } else {
        TrainState::new(cfg.train.model(), &spec.optim, cfg.seed)?
    };
    log::info!("denoiser with {} parameters, starting at step {}", st.model.num_parameters(), st.step);
    train(
        &mut st,
        &data,
        &spec,
        &NoiseSchedule::default_cosine(),
        &TextEncoder::default(),
        spec.optim.total_steps,
        Some(&run),
        log_metric,
    )?;
    log::info!("checkpoint at {}", run.latest().display());
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, ck: &Path, out: PathBuf) -> Result<()> {
    require(ck, "pretrained denoiser checkpoint")?;
    let data = load_data(cfg)?.subset();
    let spec = train_spec(cfg, Stage::Finetune);
    let pre = TrainState::<f32>::load(ck, &cfg.train.optim)?;
    let mut st = begin_finetune(&pre, &spec.optim);
    let run = RunDir { root: out };
    train(
        &mut st,
        &data,
        &spec,
        &NoiseSchedule::default_cosine(),
        &TextEncoder::default(),
        spec.optim.total_steps,
        Some(&run),
        log_metric,
    )?;
    log::info!("checkpoint at {}", run.latest().display());
    Ok(())
}

fn load_generator(cfg: &RunConfig, ck: &Path) -> Result<Generator<f32>> {
    let cp = cfg.codec_path();
    require(&cp, "codec checkpoint")?;
    require(ck, "denoiser checkpoint")?;
    let spec = CorpusSpec::av(1, 0);
    Ok(Generator::load(&cp, ck, VideoStyle::default().dim, spec.fps)?)
}

fn request_for(cfg: &RunConfig, r: &ManifestRecord, root: &Path, index: usize) -> Result<(GenerateRequest<f32>, String)> {
    let g = &cfg.generate;
    let classes: Vec<String> = default_classes().into_iter().map(|c| c.name).collect();
    let body = g.caption.clone().unwrap_or_else(|| r.category.clone());
    let target = if g.mode == Mode::Text && g.swap_category {
        let k = classes.iter().position(|c| *c == r.category).unwrap_or(0);
        classes[(k + 1) % classes.len()].clone()
    } else {
        body.clone()
    };
    let seed = cfg.seed ^ fnv1a64(&format!("{}:{index}", r.id));
    let mut req = GenerateRequest::new(Caption::new(target.clone(), QualityTag::Low), g.duration_s, seed);
    req.gamma = g.gamma;
    req.steps = g.steps;
    if g.use_video && g.mode != Mode::Quality {
        if let Some(rel) = &r.video {
            req.video = Some(VideoClip {
                frames: read_features::<f32>(&root.join(rel))?,
                fps: r.fps,
                duration_s: r.duration_s,
            });
        }
    }
    match g.mode {
        Mode::V2a => {}
        Mode::Text => {
            req.caption = Caption::new(target.clone(), QualityTag::Low);
            let neg = g.negative.clone().unwrap_or_else(|| r.category.clone());
            req.negative = NegativePrompt::Caption(Caption::new(neg, QualityTag::Low));
        }
        Mode::Extend => {
            req.mode = GuidanceMode::Extension;
            req.caption = Caption::null();
            let rel = r.audio.as_ref().ok_or_else(|| anyhow!("record {} has no audio", r.id))?;
            let w = read_wav(&root.join(rel))?;
            req.audio_prefix = Some(w.slice_seconds(0.0, g.prefix_s));
        }
        Mode::Quality => {
            req.mode = GuidanceMode::Quality;
            req.caption = Caption::new(target.clone(), QualityTag::High);
            req.negative = if g.null_negative {
                NegativePrompt::Null
            } else {
                NegativePrompt::Caption(Caption::new(target.clone(), QualityTag::Low))
            };
        }
    }
    Ok((req, target))
}

#[derive(Serialize)]
struct ProvenanceLine<'a> {
    id: &'a str,
    source_record: &'a str,
    #[serde(flatten)]
    provenance: foleygen::pipeline::Provenance,
}

/// Generates one WAV per manifest record; returns the number written.
fn cmd_generate(cfg: &RunConfig, gen: &Generator<f32>, ck: &Path, out: &Path) -> Result<usize> {
    let mpath = cfg.generate_manifest();
    require(&mpath, "generation manifest")?;
    let manifest = Manifest::load(&mpath)?;
    let root = mpath.parent().unwrap_or(Path::new(".")).to_path_buf();
    fs::create_dir_all(out)?;
    let limit = cfg.generate.limit.unwrap_or(usize::MAX);
    let mut records = Vec::new();
    let mut prov = String::new();
    for (i, r) in manifest.records.iter().take(limit).enumerate() {
        let (req, target) = request_for(cfg, r, &root, i)?;
        let w = gen.generate(&req)?;
        let id = format!("gen-{}", r.id);
        let rel = format!("{id}.wav");
        write_wav(&out.join(&rel), &w, WavFormat::Float32)?;
        let p = gen.provenance(&req, Some(&cfg.codec_path()), Some(ck))?;
        prov.push_str(&serde_json::to_string(&ProvenanceLine {
            id: &id,
            source_record: &r.id,
            provenance: p,
        })?);
        prov.push('\n');
        let events = if cfg.generate.mode == Mode::Extend {
            r.event_times.iter().copied().filter(|&t| t >= cfg.generate.prefix_s).collect()
        } else {
            r.event_times.clone()
        };
        records.push(ManifestRecord {
            id,
            source: r.source,
            category: target,
            quality: r.quality,
            caption: req.caption.render().unwrap_or_default(),
            audio: Some(rel),
            video: None,
            synth_seed: r.synth_seed,
            sample_rate: w.sample_rate,
            fps: r.fps,
            duration_s: cfg.generate.duration_s,
            event_times: events,
            high_correspondence: r.high_correspondence,
        });
        log::info!("generated {}", r.id);
    }
    Manifest { records: records.clone() }.save(&out.join("manifest.jsonl"))?;
    fs::write(out.join("provenance.jsonl"), prov)?;
    // Reference audio for distribution metrics is the source record's WAV.
    let refs: Vec<String> = manifest
        .records
        .iter()
        .take(limit)
        .map(|r| root.join(r.audio.clone().unwrap_or_default()).display().to_string())
        .collect();
    fs::write(out.join("references.txt"), refs.join("\n") + "\n")?;
    Ok(records.len())
}

fn classifier(cfg: &RunConfig) -> Result<ToyClassifier> {
    if let Some(p) = &cfg.eval.classifier {
        require(p, "classifier checkpoint")?;
        return Ok(ToyClassifier::load(p)?);
    }
    let n = cfg.eval.classifier_clips;
    let mut labelled = Vec::new();
    for spec in [
        CorpusSpec::av(n, cfg.seed ^ 0xc1a5),
        CorpusSpec::sfx(n, cfg.seed ^ 0xc1a6),
    ] {
        for c in generate_corpus::<f32>(&spec)? {
            labelled.push((c.audio, c.script.category));
        }
    }
    let len = labelled[0].0.samples.len();
    let noise = noise_clips(3 * n, len, labelled[0].0.sample_rate, cfg.seed ^ 0x0153);
    let names = default_classes().into_iter().map(|c| c.name).collect();
    Ok(ToyClassifier::train(
        names,
        &labelled,
        &noise,
        ClassifierSpec {
            seed: cfg.seed,
            ..ClassifierSpec::default()
        },
    )?)
}

fn cmd_eval(dir: &Path, clf: &ToyClassifier) -> Result<EvalReport> {
    let mpath = dir.join("manifest.jsonl");
    require(&mpath, "generated manifest")?;
    let manifest = Manifest::load(&mpath)?;
    let refs: Vec<PathBuf> = match fs::read_to_string(dir.join("references.txt")) {
        Ok(s) => s.lines().filter(|l| !l.is_empty()).map(PathBuf::from).collect(),
        Err(_) => Vec::new(),
    };
    let mut missing = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let p = dir.join(r.audio.clone().unwrap_or_default());
        if !p.is_file() {
            missing.push(p.display().to_string());
        }
        if let Some(rp) = refs.get(i) {
            if !rp.is_file() {
                missing.push(rp.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        bail!("missing files:\n  {}", missing.join("\n  "));
    }
    let mut items = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let generated = read_wav(&dir.join(r.audio.clone().unwrap_or_default()))?;
        let reference: Option<Waveform> = match refs.get(i) {
            Some(p) => Some(read_wav(p)?),
            None => None,
        };
        items.push(EvalItem {
            generated,
            reference,
            target_category: r.category.clone(),
            truth_events: if r.source == DatasetSource::Av { r.event_times.clone() } else { Vec::new() },
        });
    }
    Ok(evaluate(clf, &items, &OnsetParams::default())?)
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(report)?)
        .with_context(|| format!("writing report to {}", out.display()))?;
    fs::write(out.join("report.txt"), report.table())?;
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    gamma: f64,
    sync_offset: Option<f64>,
    onset_f1: Option<f64>,
    class_accuracy: Option<f64>,
    mean_rolloff_hz: Option<f64>,
    frechet_distance: Option<f64>,
    kld: Option<f64>,
    error: Option<String>,
}

fn cmd_sweep(cfg: &RunConfig, ck: &Path, out: &Path) -> Result<()> {
    let gen = load_generator(cfg, ck)?;
    let clf = classifier(cfg)?;
    let mut rows = Vec::new();
    for &gamma in &cfg.sweep.gammas {
        let mut c = cfg.clone();
        c.generate.gamma = gamma;
        let dir = out.join(format!("gamma-{gamma}"));
        let res = cmd_generate(&c, &gen, ck, &dir).and_then(|_| cmd_eval(&dir, &clf));
        let row = match res {
            Ok(rep) => {
                write_report(&dir, &rep)?;
                SweepRow {
                    gamma,
                    sync_offset: rep.sync_mean_abs_offset,
                    onset_f1: Some(rep.onset_f1),
                    class_accuracy: Some(rep.class_accuracy),
                    mean_rolloff_hz: rep.mean_rolloff_hz,
                    frechet_distance: rep.frechet_distance,
                    kld: rep.kld,
                    error: None,
                }
            }
            Err(e) => {
                log::error!("gamma {gamma}: {e:#}");
                SweepRow {
                    gamma,
                    sync_offset: None,
                    onset_f1: None,
                    class_accuracy: None,
                    mean_rolloff_hz: None,
                    frechet_distance: None,
                    kld: None,
                    error: Some(format!("{e:#}")),
                }
            }
        };
        rows.push(row);
    }
    fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&rows)?)?;
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let mut table = format!("{:>6} {:>10} {:>8} {:>8} {:>10} {:>10} {:>8}\n", "gamma", "offset", "F1", "acc", "rolloff", "FD", "KLD");
    for r in &rows {
        table.push_str(&format!(
            "{:>6} {:>10} {:>8} {:>8} {:>10} {:>10} {:>8}\n",
            r.gamma,
            f(r.sync_offset),
            f(r.onset_f1),
            f(r.class_accuracy),
            f(r.mean_rolloff_hz),
            f(r.frechet_distance),
            f(r.kld)
        ));
    }
    fs::write(out.join("sweep.txt"), &table)?;
    print!("{table}");
    if rows.iter().any(|r| r.error.is_some()) {
        bail!("some sweep rows failed");
    }
    Ok(())
}
