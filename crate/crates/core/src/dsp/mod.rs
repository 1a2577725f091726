//! Signal front-end: resampling, log-mel analysis, energy VAD trimming and
//! iterative phase reconstruction for listening to mel spectrograms.

mod mel;
mod resample;
mod vad;

pub use mel::{analysis_window, istft, log_mel, mel_filterbank, mel_to_audio, num_frames, stft};
pub use resample::resample;
pub use vad::{frame_energies_db, trim_silence, VadConfig};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const HOP_LENGTH: usize = 160;
pub const WIN_LENGTH: usize = 640;
pub const FFT_SIZE: usize = 1024;
pub const N_MELS: usize = 80;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("waveform holds non-finite samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Analysis settings carried next to every mel matrix (the JSON sidecar).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelMeta {
    pub sample_rate: u32,
    pub hop_s: f64,
    pub win_s: f64,
    pub fft_size: usize,
    pub log_floor: f64,
}

impl Default for MelMeta {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            hop_s: HOP_LENGTH as f64 / SAMPLE_RATE as f64,
            win_s: WIN_LENGTH as f64 / SAMPLE_RATE as f64,
            fft_size: FFT_SIZE,
            log_floor: LOG_FLOOR,
        }
    }
}

/// `T x 80` natural-log mel power.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    frames: Array2<f32>,
    pub meta: MelMeta,
}

impl MelSpectrogram {
    /// Wraps frames with the default analysis metadata. Values below the
    /// log floor are raised to it.
    pub fn new(frames: Array2<f32>) -> Result<Self> {
        Self::with_meta(frames, MelMeta::default())
    }

    pub fn with_meta(mut frames: Array2<f32>, meta: MelMeta) -> Result<Self> {
        if frames.ncols() != N_MELS {
            return Err(Error::invalid(format!(
                "mel spectrogram needs {N_MELS} channels, got {}",
                frames.ncols()
            )));
        }
        if frames.nrows() == 0 {
            return Err(Error::invalid("mel spectrogram needs at least one frame"));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mel spectrogram holds non-finite values"));
        }
        let floor = meta.log_floor.ln() as f32;
        frames.mapv_inplace(|v| v.max(floor));
        Ok(Self { frames, meta })
    }

    pub fn frames(&self) -> &Array2<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Array2<f32> {
        self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn floor_value(&self) -> f32 {
        self.meta.log_floor.ln() as f32
    }
}
