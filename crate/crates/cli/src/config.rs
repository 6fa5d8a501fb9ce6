use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use foleygen::codec::{CodecConfig, CodecTrainSpec};
use foleygen::denoiser::DenoiserConfig;
use foleygen::training::{MaskPolicy, MixPolicy, OptimSpec};
use serde::{Deserialize, Serialize};

pub const DATA_ROOT_ENV: &str = "FOLEYGEN_DATA";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusSection,
    pub codec: CodecSection,
    pub train: TrainSection,
    pub finetune: FinetuneSection,
    pub generate: GenerateSection,
    pub sweep: SweepSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Defaults to `$FOLEYGEN_DATA`, then `./data`.
    pub data_root: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub codec: Option<PathBuf>,
    pub pretrain: Option<PathBuf>,
    pub finetune: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub av_clips: usize,
    pub sfx_clips: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            av_clips: 64,
            sfx_clips: 64,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub model: CodecConfig,
    pub train: CodecTrainSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
    Compact,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub preset: Preset,
    /// Full architecture; overrides `preset` when given.
    pub model: Option<DenoiserConfig>,
    pub optim: OptimSpec,
    pub mix: MixPolicy,
    pub mask: MaskPolicy,
    pub window: Option<usize>,
    pub posterior_sampling: bool,
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            model: None,
            optim: OptimSpec::default(),
            mix: MixPolicy::default(),
            mask: MaskPolicy::default(),
            window: None,
            posterior_sampling: true,
            checkpoint_every: 1000,
        }
    }
}

impl TrainSection {
    pub fn model(&self) -> DenoiserConfig {
        self.model.clone().unwrap_or(match self.preset {
            Preset::Paper => DenoiserConfig::paper(),
            Preset::Desk => DenoiserConfig::desk(),
            Preset::Compact => DenoiserConfig::compact(),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub optim: OptimSpec,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            optim: OptimSpec {
                warmup: 200,
                total_steps: 2000,
                ..OptimSpec::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Video-to-audio with a quality tag and null negative.
    V2a,
    /// Text control with a negative caption.
    Text,
    /// Continue the first seconds of a reference clip.
    Extend,
    /// High-quality tag against a low-quality negative.
    Quality,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub mode: Mode,
    pub gamma: f64,
    pub steps: usize,
    pub duration_s: f64,
    /// Records of this manifest drive generation (relative to the corpus
    /// directory when not absolute).
    pub manifest: PathBuf,
    pub limit: Option<usize>,
    /// Text mode: replace each record's category with the next one.
    pub swap_category: bool,
    /// Explicit positive caption body (otherwise the record's category).
    pub caption: Option<String>,
    /// Text mode negative caption body (otherwise the record's category).
    pub negative: Option<String>,
    /// Quality mode: use a null negative instead of the low-quality tag.
    pub null_negative: bool,
    pub use_video: bool,
    pub prefix_s: f64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            mode: Mode::V2a,
            gamma: 3.0,
            steps: 100,
            duration_s: 8.0,
            manifest: PathBuf::from("av/manifest.jsonl"),
            limit: Some(16),
            swap_category: false,
            caption: None,
            negative: None,
            null_negative: false,
            use_video: true,
            prefix_s: 3.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub gammas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            gammas: vec![1.0, 3.0, 4.0, 5.0, 7.0],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Directory holding generated WAVs and their `manifest.jsonl`.
    pub generated: Option<PathBuf>,
    /// Saved classifier; trained from fresh synthetic clips when absent.
    pub classifier: Option<PathBuf>,
    pub classifier_clips: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            generated: None,
            classifier: None,
            classifier_clips: 32,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Schema checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.codec.model.validate()?;
        self.train.model().validate()?;
        self.train.optim.validate()?;
        self.train.mix.validate()?;
        self.finetune.optim.validate()?;
        if self.generate.steps == 0 || !(self.generate.gamma >= 0.0) || !(self.generate.duration_s > 0.0) {
            bail!("generate: steps must be positive, gamma non-negative and duration positive");
        }
        if self.generate.mode == Mode::Extend && !(self.generate.prefix_s > 0.0 && self.generate.prefix_s < self.generate.duration_s) {
            bail!("generate: prefix_s must lie strictly inside the clip duration");
        }
        if self.sweep.gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            bail!("sweep: every gamma must be finite and non-negative");
        }
        Ok(())
    }

    pub fn data_root(&self) -> PathBuf {
        self.paths
            .data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.paths.corpus.clone().unwrap_or_else(|| self.data_root().join("corpus"))
    }

    pub fn codec_path(&self) -> PathBuf {
        self.paths.codec.clone().unwrap_or_else(|| self.data_root().join("codec.fgck"))
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.paths.pretrain.clone().unwrap_or_else(|| self.data_root().join("runs/pretrain"))
    }

    pub fn finetune_dir(&self) -> PathBuf {
        self.paths.finetune.clone().unwrap_or_else(|| self.data_root().join("runs/finetune"))
    }

    pub fn generate_manifest(&self) -> PathBuf {
        if self.generate.manifest.is_absolute() {
            self.generate.manifest.clone()
        } else {
            self.corpus_dir().join(&self.generate.manifest)
        }
    }
}
