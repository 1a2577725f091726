//! The run configuration: one TOML file with a section per module. Every
//! section and key is optional and defaults to the tiny desk-scale setup;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::benchkit::{CorpusConfig, DegradeConfig, EvalConfig, DEFAULT_ALPHABET, DEFAULT_DURATION};
use crate::cfm::{MaskSpec, PathConfig};
use crate::dsp::VadConfig;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::sampler::SwayConfig;
use crate::trainer::{Stage, TrainConfig};
use crate::units::KmeansConfig;
use crate::vfnet::{InputMode, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; per-stage seeds are derived from it unless set.
    pub seed: u64,
    pub paths: PathsSection,
    pub corpus: CorpusSection,
    pub kmeans: KmeansSection,
    pub model: ModelSection,
    pub path: PathConfig,
    pub mask: MaskSpec,
    pub pretrain: StageSection,
    pub finetune: StageSection,
    pub sampler: SwayConfig,
    pub eval: EvalSection,
    pub vad: VadConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Parent of all run directories.
    pub run_root: PathBuf,
    /// Worker threads for corpus rendering.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_train: usize,
    pub n_test: usize,
    pub severity: f64,
    pub alphabet: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub duration: usize,
    /// Explicit degradation; replaces the severity mapping when set.
    pub degrade: Option<DegradeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KmeansSection {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub n_init: usize,
}

/// `ModelConfig` without the vocabulary, which follows from `kmeans.k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    pub ff_mult: usize,
    pub unit_emb_dim: usize,
    pub max_frames: usize,
    pub input_mode: InputMode,
    pub abs_pos: bool,
    pub cond_pos: bool,
}

/// `TrainConfig` without the stage, mask, path and input mode, which come
/// from the rest of the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_updates: u64,
    pub batch_frames: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "StageSection::default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "StageSection::default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "StageSection::default_log_every")]
    pub log_every: u64,
    #[serde(default = "StageSection::default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default = "StageSection::default_keep_checkpoints")]
    pub keep_checkpoints: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ref_symbols: usize,
    /// Target frames per conditioning frame; measured on the finetune data
    /// when unset.
    pub duplication: Option<f64>,
    pub limit: Option<usize>,
    /// Test entries whose before/after mels are kept for plotting.
    pub keep_samples: usize,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            run_root: PathBuf::from("runs"),
            workers: 1,
        }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 20,
            severity: 0.5,
            alphabet: DEFAULT_ALPHABET,
            min_symbols: 5,
            max_symbols: 8,
            duration: DEFAULT_DURATION,
            degrade: None,
        }
    }
}

impl Default for KmeansSection {
    fn default() -> Self {
        let d = KmeansConfig::default();
        Self {
            k: DEFAULT_ALPHABET,
            max_iters: d.max_iters,
            tol: d.tol,
            n_init: d.n_init,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::from_config(&ModelConfig::tiny(3))
    }
}

impl ModelSection {
    pub fn from_config(m: &ModelConfig) -> Self {
        Self {
            layers: m.layers,
            heads: m.heads,
            dim: m.dim,
            head_dim: m.head_dim,
            ff_mult: m.ff_mult,
            unit_emb_dim: m.unit_emb_dim,
            max_frames: m.max_frames,
            input_mode: m.input_mode,
            abs_pos: m.abs_pos,
            cond_pos: m.cond_pos,
        }
    }
}

impl StageSection {
    fn default_weight_decay() -> f64 {
        0.01
    }
    fn default_grad_clip() -> f64 {
        1.0
    }
    fn default_log_every() -> u64 {
        10
    }
    fn default_checkpoint_every() -> u64 {
        1000
    }
    fn default_keep_checkpoints() -> usize {
        2
    }

    pub fn from_config(t: &TrainConfig) -> Self {
        Self {
            peak_lr: t.peak_lr,
            warmup_steps: t.warmup_steps,
            total_updates: t.total_updates,
            batch_frames: t.batch_frames,
            seed: None,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            log_every: t.log_every,
            checkpoint_every: t.checkpoint_every,
            keep_checkpoints: t.keep_checkpoints,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ref_symbols: 0,
            duplication: None,
            limit: None,
            keep_samples: 3,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsSection::default(),
            corpus: CorpusSection::default(),
            kmeans: KmeansSection::default(),
            model: ModelSection::default(),
            path: PathConfig::default(),
            mask: MaskSpec::default(),
            pretrain: StageSection::from_config(&TrainConfig::tiny(Stage::Pretrain)),
            finetune: StageSection::from_config(&TrainConfig::tiny(Stage::Finetune)),
            sampler: SwayConfig::default(),
            eval: EvalSection::default(),
            vad: VadConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks every section; errors are `Config` errors.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        if self.paths.workers == 0 {
            return Err(Error::Config("paths.workers must be at least 1".into()));
        }
        if self.kmeans.k < 2 {
            return Err(Error::Config("kmeans.k must be at least 2".into()));
        }
        self.corpus_config().and_then(|c| c.validate()).map_err(cfg_err)?;
        self.kmeans_config().validate().map_err(cfg_err)?;
        self.model_config().validate().map_err(cfg_err)?;
        self.train_config(Stage::Pretrain).validate().map_err(cfg_err)?;
        self.train_config(Stage::Finetune).validate().map_err(cfg_err)?;
        self.sampler.validate().map_err(cfg_err)?;
        self.vad.validate().map_err(cfg_err)
    }

    pub fn corpus_config(&self) -> Result<CorpusConfig> {
        let c = &self.corpus;
        let degrade = match c.degrade {
            Some(d) => d,
            None => DegradeConfig::from_severity(c.severity, 0)?,
        };
        Ok(CorpusConfig {
            n_train: c.n_train,
            n_test: c.n_test,
            alphabet: c.alphabet,
            min_symbols: c.min_symbols,
            max_symbols: c.max_symbols,
            duration: c.duration,
            degrade,
            seed: self.seed,
        })
    }

    pub fn kmeans_config(&self) -> KmeansConfig {
        KmeansConfig {
            max_iters: self.kmeans.max_iters,
            tol: self.kmeans.tol,
            n_init: self.kmeans.n_init,
        }
    }

    /// Seed of the codebook fit.
    pub fn kmeans_seed(&self) -> u64 {
        derive_seed(self.seed, 4)
    }

    /// Vocabulary is `kmeans.k` units plus filler and batch padding.
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            layers: m.layers,
            heads: m.heads,
            dim: m.dim,
            head_dim: m.head_dim,
            ff_mult: m.ff_mult,
            unit_vocab: self.kmeans.k + 2,
            unit_emb_dim: m.unit_emb_dim,
            mel_dim: crate::dsp::N_MELS,
            max_frames: m.max_frames,
            input_mode: m.input_mode,
            abs_pos: m.abs_pos,
            cond_pos: m.cond_pos,
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let (s, stream) = match stage {
            Stage::Pretrain => (&self.pretrain, 1),
            Stage::Finetune => (&self.finetune, 2),
        };
        let mut t = TrainConfig::tiny(stage);
        t.peak_lr = s.peak_lr;
        t.warmup_steps = s.warmup_steps;
        t.total_updates = s.total_updates;
        t.batch_frames = s.batch_frames;
        t.seed = s.seed.unwrap_or_else(|| derive_seed(self.seed, stream));
        t.mask = self.mask;
        t.path = self.path;
        t.ablation_mode = self.model.input_mode;
        t.weight_decay = s.weight_decay;
        t.grad_clip = s.grad_clip;
        t.log_every = s.log_every;
        t.checkpoint_every = s.checkpoint_every;
        t.keep_checkpoints = s.keep_checkpoints;
        t
    }

    pub fn eval_config(&self, duplication: f64) -> EvalConfig {
        EvalConfig {
            sway: self.sampler,
            ref_symbols: self.eval.ref_symbols,
            duplication: self.eval.duplication.unwrap_or(duplication),
            seed: derive_seed(self.seed, 3),
            limit: self.eval.limit,
        }
    }

    /// Short stable digest of the config, used to name run directories.
    /// Paths and worker count do not change results and are left out.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsSection::default();
        let h = c.to_toml().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        });
        format!("{h:016x}")[..10].to_string()
    }
}
