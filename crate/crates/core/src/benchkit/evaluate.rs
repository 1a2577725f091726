use ndarray::s;
use serde::{Deserialize, Serialize};

use super::{decode_mel, metrics::frames_mse, pseudo_wer, CorpusManifest, Split, SymbolBank, FEATURE_STRIDE};
use crate::cfm::PathConfig;
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::io;
use crate::rng::derive_seed;
use crate::sampler::{estimate_target_frames, generate, GenerationRequest, RequestCond, SwayConfig};
use crate::units::{assign, collapse, Codebook, FeatureMatrix};
use crate::vfnet::{FieldNet, InputMode};

/// Frames dropped from decoded symbol runs shorter than this.
pub const DECODE_MIN_RUN: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub sway: SwayConfig,
    /// Symbols of the first training utterance used as the clean reference
    /// prefix; 0 generates without reference.
    pub ref_symbols: usize,
    /// Target frames per conditioning frame (units or degraded mel frames).
    pub duplication: f64,
    pub seed: u64,
    /// Evaluate at most this many test entries (all when `None`).
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryReport {
    pub id: String,
    pub reference: Vec<usize>,
    pub decoded: Vec<usize>,
    pub pseudo_wer: f64,
    pub mel_mse: f64,
    pub baseline_mse: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: InputMode,
    /// Symbol edits over reference symbols, pooled across entries.
    pub pseudo_wer: f64,
    /// Mean DTW-aligned mel MSE between generated and clean mel.
    pub mel_mse: f64,
    /// Mean DTW-aligned mel MSE between degraded and clean mel.
    pub baseline_mse: f64,
    pub entries: Vec<EntryReport>,
}

/// Degraded input and generated output of one test entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub id: String,
    pub before: MelSpectrogram,
    pub after: MelSpectrogram,
}

/// Generates every test entry from its degraded input and scores it
/// against the clean rendition.
pub fn evaluate(
    corpus: &CorpusManifest,
    net: &FieldNet<f32>,
    codebook: Option<&Codebook>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    evaluate_with_samples(corpus, net, codebook, cfg, 0).map(|(r, _)| r)
}

/// As [`evaluate`], also returning the mels of the first `keep` entries.
pub fn evaluate_with_samples(
    corpus: &CorpusManifest,
    net: &FieldNet<f32>,
    codebook: Option<&Codebook>,
    cfg: &EvalConfig,
    keep: usize,
) -> Result<(EvalReport, Vec<EvalSample>)> {
    let mode = net.config().input_mode;
    let first = corpus
        .split(Split::Train)
        .next()
        .ok_or_else(|| Error::invalid("corpus has no training entry for the reference"))?;
    let alphabet = 1 + corpus.entries.iter().flat_map(|e| e.script.symbols.iter()).max().copied().unwrap_or(1);
    let bank = SymbolBank::new(alphabet.max(super::DEFAULT_ALPHABET))?;
    let ref_full = io::read_mel(&corpus.resolve(&first.clean_mel_path))?.into_frames();
    let ref_frames: usize = first.script.durations.iter().take(cfg.ref_symbols).sum();
    let ref_mel = ref_full.slice(s![..ref_frames, ..]).to_owned();
    let ref_units = match (mode, codebook) {
        (InputMode::Units, Some(cb)) if ref_frames > 0 => {
            let feats = io::read_features(&corpus.resolve(&first.clean_feature_path))?;
            let rows = ref_frames.div_ceil(FEATURE_STRIDE);
            let head = FeatureMatrix::new(feats.rows().slice(s![..rows, ..]).to_owned())?;
            Some(collapse(&assign(&head, cb)?))
        }
        _ => None,
    };

    let mut entries = Vec::new();
    let mut samples = Vec::new();
    for (idx, e) in corpus.split(Split::Test).enumerate() {
        if cfg.limit.is_some_and(|l| idx >= l) {
            break;
        }
        let clean = io::read_mel(&corpus.resolve(&e.clean_mel_path))?;
        let degraded = io::read_mel(&corpus.resolve(&e.degraded_mel_path))?;
        let (cond, cond_len) = match mode {
            InputMode::Units => {
                let cb = codebook.ok_or_else(|| Error::invalid("units mode needs a codebook"))?;
                let feats = io::read_features(&corpus.resolve(&e.degraded_feature_path))?;
                let units = collapse(&assign(&feats, cb)?);
                let n = units.len();
                (
                    RequestCond::Units {
                        units,
                        ref_units: ref_units.clone(),
                        k: cb.k(),
                    },
                    n,
                )
            }
            InputMode::MelInput => (RequestCond::Mel(degraded.frames().clone()), degraded.num_frames()),
        };
        let req = GenerationRequest {
            cond,
            ref_mel: ref_mel.clone(),
            target_frames: estimate_target_frames(cond_len, cfg.duplication),
            seed: derive_seed(cfg.seed, idx as u64),
        };
        let generated = generate(&req, net, &cfg.sway, &PathConfig::default())?;
        let decoded = decode_mel(&bank, generated.frames().view(), DECODE_MIN_RUN);
        entries.push(EntryReport {
            id: e.id.clone(),
            pseudo_wer: pseudo_wer(&decoded, &e.script.symbols)?,
            reference: e.script.symbols.clone(),
            decoded,
            mel_mse: frames_mse(generated.frames().view(), clean.frames().view(), true)?,
            baseline_mse: frames_mse(degraded.frames().view(), clean.frames().view(), true)?,
            frames: generated.num_frames(),
        });
        if samples.len() < keep {
            samples.push(EvalSample { id: e.id.clone(), before: degraded, after: generated });
        }
    }
    if entries.is_empty() {
        return Err(Error::invalid("corpus has no test entries"));
    }
    let n = entries.len() as f64;
    let edits: f64 = entries.iter().map(|r| r.pseudo_wer * r.reference.len() as f64).sum();
    let refs: usize = entries.iter().map(|r| r.reference.len()).sum();
    let report = EvalReport {
        mode,
        pseudo_wer: edits / refs as f64,
        mel_mse: entries.iter().map(|r| r.mel_mse).sum::<f64>() / n,
        baseline_mse: entries.iter().map(|r| r.baseline_mse).sum::<f64>() / n,
        entries,
    };
    Ok((report, samples))
}
