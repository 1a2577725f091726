//! Synthetic paired corpus (clean target, degraded input), evaluation
//! metrics and plots.
//!
//! One fixed "speaker" maps each symbol of a small alphabet to an 80-channel
//! log-mel pattern. Features are a fixed 16-dim projection of every second
//! mel frame, standing in for self-supervised speech features.

mod corpus;
mod degrade;
mod evaluate;
mod metrics;
mod plots;

pub use corpus::{build_corpus, CorpusConfig, CorpusEntry, CorpusManifest, Split, MANIFEST_FILE};
pub use degrade::{degrade, degrade_frames, DegradeConfig};
pub use evaluate::{evaluate, evaluate_with_samples, EntryReport, EvalConfig, EvalReport, EvalSample, DECODE_MIN_RUN};
pub use metrics::{dtw_path, frames_mse, levenshtein, mel_mse, pseudo_wer};
pub use plots::{emit_plots, plot_manifest, read_loss_curve, LossCurve, OVERLAY_FILE, PLOTS_DIR, SAMPLES_DIR};

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{MelSpectrogram, N_MELS};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::units::{FeatureMatrix, UnitSequence};

pub const DEFAULT_ALPHABET: usize = 12;
pub const DEFAULT_DURATION: usize = 6;
pub const FEATURE_DIM: usize = 16;
/// Mel frames per feature frame.
pub const FEATURE_STRIDE: usize = 2;
/// Std of the per-entry variation added to clean mel frames.
pub const CLEAN_NOISE_STD: f64 = 0.1;
const BANK_SEED: u64 = 0x5EED_0F_5BEA_CE12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolScript {
    pub symbols: Vec<usize>,
    /// Mel frames rendered for each symbol.
    pub durations: Vec<usize>,
}

impl SymbolScript {
    pub fn new(symbols: Vec<usize>, durations: Vec<usize>) -> Result<Self> {
        let s = Self { symbols, durations };
        s.validate()?;
        Ok(s)
    }

    /// Every symbol held for the same number of frames.
    pub fn uniform(symbols: Vec<usize>, duration: usize) -> Result<Self> {
        let n = symbols.len();
        Self::new(symbols, vec![duration; n])
    }

    pub fn validate(&self) -> Result<()> {
        if self.symbols.is_empty() {
            return Err(Error::invalid("script must hold at least one symbol"));
        }
        if self.symbols.len() != self.durations.len() {
            return Err(Error::invalid("script needs one duration per symbol"));
        }
        if self.durations.contains(&0) {
            return Err(Error::invalid("symbol durations must be at least one frame"));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// Symbol id of every mel frame.
    pub fn frame_symbols(&self) -> Vec<usize> {
        self.symbols
            .iter()
            .zip(&self.durations)
            .flat_map(|(&s, &d)| std::iter::repeat_n(s, d))
            .collect()
    }

    /// Random script of `len` symbols with no symbol following itself.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, len: usize, alphabet: usize, duration: usize) -> Result<Self> {
        if alphabet < 2 {
            return Err(Error::invalid("alphabet needs at least two symbols"));
        }
        let mut symbols: Vec<usize> = Vec::with_capacity(len);
        for _ in 0..len {
            let s = match symbols.last() {
                None => rng.random_range(0..alphabet),
                Some(&prev) => (prev + 1 + rng.random_range(0..alphabet - 1)) % alphabet,
            };
            symbols.push(s);
        }
        Self::uniform(symbols, duration)
    }
}

/// The fixed symbol-to-pattern mapping and feature projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolBank {
    /// `alphabet x 80` log-mel patterns, centered on zero.
    pub patterns: Array2<f32>,
    /// `16 x 80`, unit-norm rows summing to zero (level shifts do not move
    /// features).
    pub projection: Array2<f32>,
}

impl SymbolBank {
    pub fn new(alphabet: usize) -> Result<Self> {
        if alphabet < 2 {
            return Err(Error::invalid("alphabet needs at least two symbols"));
        }
        let mut rng = rng_for(BANK_SEED, alphabet as u64);
        let mut patterns = Array2::zeros((alphabet, N_MELS));
        for mut row in patterns.rows_mut() {
            let bumps: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(4.0..(N_MELS as f64 - 4.0)),
                        rng.random_range(1.5..4.0),
                        rng.random_range(2.0..4.0),
                    )
                })
                .collect();
            for (c, v) in row.iter_mut().enumerate() {
                let c = c as f64;
                let mut x = -6.0 + 1.5 * (-c / 25.0).exp();
                for &(center, width, height) in &bumps {
                    x += height * (-0.5 * ((c - center) / width).powi(2)).exp();
                }
                *v = x as f32;
            }
        }
        // Zero global mean, as for a normalized log-mel.
        let mean = patterns.mean().unwrap_or(0.0);
        patterns -= mean;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut projection = Array2::zeros((FEATURE_DIM, N_MELS));
        for mut row in projection.rows_mut() {
            let raw: Vec<f64> = (0..N_MELS).map(|_| normal.sample(&mut rng)).collect();
            let mean = raw.iter().sum::<f64>() / N_MELS as f64;
            let norm = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
            for (o, v) in row.iter_mut().zip(&raw) {
                *o = ((v - mean) / norm) as f32;
            }
        }
        Ok(Self { patterns, projection })
    }

    pub fn alphabet(&self) -> usize {
        self.patterns.nrows()
    }

    /// Projects every `FEATURE_STRIDE`-th mel frame, starting with the first.
    pub fn features_of(&self, mel: ArrayView2<f32>) -> Result<FeatureMatrix> {
        if mel.ncols() != N_MELS || mel.nrows() == 0 {
            return Err(Error::invalid("features need a non-empty 80-channel mel"));
        }
        let kept = mel.slice(ndarray::s![..;FEATURE_STRIDE, ..]);
        FeatureMatrix::new(kept.dot(&self.projection.t()))
    }

    /// Patterns in feature space.
    pub fn feature_patterns(&self) -> Array2<f32> {
        self.patterns.dot(&self.projection.t())
    }

    /// Renders a script: the pattern of each symbol for its duration plus
    /// small seeded noise.
    pub fn render(&self, script: &SymbolScript, seed: u64) -> Result<Array2<f32>> {
        script.validate()?;
        if let Some(&bad) = script.symbols.iter().find(|&&s| s >= self.alphabet()) {
            return Err(Error::invalid(format!("symbol {bad} outside alphabet of {}", self.alphabet())));
        }
        let mut rng = rng_for(seed, 0);
        let normal = Normal::new(0.0, CLEAN_NOISE_STD).unwrap();
        let frames = script.frame_symbols();
        let mut mel = Array2::zeros((frames.len(), N_MELS));
        for (mut row, &s) in mel.rows_mut().into_iter().zip(&frames) {
            for (o, &p) in row.iter_mut().zip(self.patterns.row(s)) {
                *o = p + normal.sample(&mut rng) as f32;
            }
        }
        Ok(mel)
    }
}

/// Renders the clean mel of a script and its features.
pub fn make_clean_sample(bank: &SymbolBank, script: &SymbolScript, seed: u64) -> Result<(MelSpectrogram, FeatureMatrix)> {
    let mel = bank.render(script, seed)?;
    let features = bank.features_of(mel.view())?;
    Ok((MelSpectrogram::new(mel)?, features))
}

/// Nearest pattern per row, lowest index on ties.
fn nearest_rows(rows: ArrayView2<f32>, patterns: &Array2<f32>) -> Vec<usize> {
    rows.rows()
        .into_iter()
        .map(|r| crate::units::nearest_centroid(r, patterns))
        .collect()
}

/// Collapses per-frame labels into symbols, first dropping runs shorter
/// than `min_run` frames.
pub fn runs_to_symbols(labels: &[usize], min_run: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        let mut j = i;
        while j < labels.len() && labels[j] == labels[i] {
            j += 1;
        }
        if j - i >= min_run && out.last() != Some(&labels[i]) {
            out.push(labels[i]);
        }
        i = j;
    }
    out
}

/// Decodes a mel spectrogram into symbols by nearest-pattern matching.
pub fn decode_mel(bank: &SymbolBank, mel: ArrayView2<f32>, min_run: usize) -> Vec<usize> {
    runs_to_symbols(&nearest_rows(mel, &bank.patterns), min_run)
}

/// Decodes features directly by nearest projected pattern.
pub fn decode_features(bank: &SymbolBank, features: &FeatureMatrix, min_run: usize) -> Vec<usize> {
    runs_to_symbols(&nearest_rows(features.rows().view(), &bank.feature_patterns()), min_run)
}

/// Maps unit ids to symbols through a lookup table (e.g. built by majority
/// vote on clean data).
pub fn units_to_symbols(units: &UnitSequence, table: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &u in &units.ids {
        let s = table[u];
        if out.last() != Some(&s) {
            out.push(s);
        }
    }
    out
}

/// Majority symbol for every unit id, from aligned per-frame labels.
pub fn unit_symbol_table(units: &[usize], symbols: &[usize], k: usize, alphabet: usize) -> Vec<usize> {
    let mut votes = Array2::<usize>::zeros((k, alphabet));
    for (&u, &s) in units.iter().zip(symbols) {
        votes[[u, s]] += 1;
    }
    votes
        .rows()
        .into_iter()
        .map(|r| {
            let v: Array1<usize> = r.to_owned();
            v.iter().enumerate().fold((0, 0), |best, (i, &c)| if c > best.1 { (i, c) } else { best }).0
        })
        .collect()
}

/// Symbol of every feature frame (the symbol of its first mel frame).
pub fn feature_frame_symbols(script: &SymbolScript) -> Vec<usize> {
    script.frame_symbols().into_iter().step_by(FEATURE_STRIDE).collect()
}
