use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

/// Energy VAD settings. Levels are dB relative to digital full scale
/// (mean square 1.0 is 0 dB).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VadConfig {
    pub frame_s: f64,
    /// Frames at or above this level extend a detected speech region.
    pub energy_threshold_db: f64,
    /// Speech onset and offset need a frame at or above this level.
    pub edge_threshold_db: f64,
    /// Shortest run of frames above the energy threshold that counts as
    /// speech; shorter bursts at the edges are trimmed as clicks.
    pub min_speech_frames: usize,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_s: 0.02,
            energy_threshold_db: -45.0,
            edge_threshold_db: -35.0,
            min_speech_frames: 2,
        }
    }
}

impl VadConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.frame_s > 0.0
            && self.frame_s.is_finite()
            && self.edge_threshold_db >= self.energy_threshold_db
            && self.min_speech_frames >= 1;
        if !ok {
            return Err(Error::invalid(format!("bad VAD config {self:?}")));
        }
        Ok(())
    }
}

/// Frame energies in dB; the last frame may be partial.
pub fn frame_energies_db(w: &Waveform, frame_len: usize) -> Vec<f64> {
    w.samples
        .chunks(frame_len)
        .map(|c| {
            let ms = c.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / c.len() as f64;
            if ms > 0.0 {
                10.0 * ms.log10()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

/// Removes leading and trailing silence. Speech spans from the first to the
/// last frame that reaches the edge threshold inside a long enough run of
/// frames above the energy threshold, widened to the whole of those runs.
/// Nothing between the two ends is removed.
pub fn trim_silence(w: &Waveform, cfg: &VadConfig) -> Result<Waveform> {
    cfg.validate()?;
    let frame_len = ((cfg.frame_s * w.sample_rate as f64).round() as usize).max(1);
    let energy = frame_energies_db(w, frame_len);

    // Runs of frames above the energy threshold that contain an edge frame.
    let mut runs = Vec::new();
    let mut i = 0;
    while i < energy.len() {
        if energy[i] < cfg.energy_threshold_db {
            i += 1;
            continue;
        }
        let start = i;
        while i < energy.len() && energy[i] >= cfg.energy_threshold_db {
            i += 1;
        }
        let run = &energy[start..i];
        if run.len() >= cfg.min_speech_frames && run.iter().any(|&e| e >= cfg.edge_threshold_db) {
            runs.push((start, i));
        }
    }
    let (Some(&(first, _)), Some(&(_, last))) = (runs.first(), runs.last()) else {
        return Err(Error::EmptyAfterTrim);
    };
    let begin = first * frame_len;
    let end = (last * frame_len).min(w.len());
    Waveform::new(w.samples[begin..end].to_vec(), w.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(n: usize, amp: f32) -> Vec<f32> {
        (0..n).map(|i| amp * (i as f32 * 0.37).sin()).collect()
    }

    #[test]
    fn full_tone_is_untouched() {
        let w = Waveform::new(tone(16_000, 0.5), 16_000).unwrap();
        assert_eq!(trim_silence(&w, &VadConfig::default()).unwrap(), w);
    }

    #[test]
    fn silence_tone_silence() {
        let mut s = vec![0.0; 8000];
        s.extend(tone(16_000, 0.5));
        s.extend(vec![0.0; 8000]);
        let w = Waveform::new(s, 16_000).unwrap();
        let out = trim_silence(&w, &VadConfig::default()).unwrap();
        let frames = (out.duration_s() - 1.0).abs() / 0.02;
        assert!(frames <= 2.0, "trimmed to {} s", out.duration_s());
    }

    #[test]
    fn quiet_interior_is_kept() {
        let mut s = tone(8000, 0.5);
        s.extend(vec![0.0; 8000]);
        s.extend(tone(8000, 0.5));
        let w = Waveform::new(s, 16_000).unwrap();
        assert_eq!(trim_silence(&w, &VadConfig::default()).unwrap().len(), 24_000);
    }

    #[test]
    fn digital_silence_is_an_error() {
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        assert!(matches!(trim_silence(&w, &VadConfig::default()), Err(Error::EmptyAfterTrim)));
    }

    #[test]
    fn edge_must_not_be_below_interior() {
        let cfg = VadConfig {
            edge_threshold_db: -50.0,
            ..VadConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn trim_is_idempotent(
            lead in 0usize..6000,
            body in 400usize..6000,
            tail in 0usize..6000,
            amp in 0.001f32..0.9,
        ) {
            let mut s = vec![0.0; lead];
            s.extend(tone(body, amp));
            s.extend(vec![0.0; tail]);
            let w = Waveform::new(s, 16_000).unwrap();
            let cfg = VadConfig::default();
            if let Ok(once) = trim_silence(&w, &cfg) {
                prop_assert_eq!(trim_silence(&once, &cfg).unwrap(), once);
            }
        }
    }
}
