use ndarray::Array2;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{MelMeta, MelSpectrogram, Waveform, FFT_SIZE, HOP_LENGTH, LOG_FLOOR, N_MELS, SAMPLE_RATE, WIN_LENGTH};
use crate::error::{Error, Result};
use crate::rng::rng_for;

const N_BINS: usize = FFT_SIZE / 2 + 1;
const GRIFFIN_LIM_SEED: u64 = 0x6C1F_F1E5;

/// Periodic Hann window of `WIN_LENGTH`, zero-padded on both sides to
/// `FFT_SIZE`.
pub fn analysis_window() -> Vec<f64> {
    let mut w = vec![0.0; FFT_SIZE];
    let offset = (FFT_SIZE - WIN_LENGTH) / 2;
    for i in 0..WIN_LENGTH {
        let phase = 2.0 * std::f64::consts::PI * i as f64 / WIN_LENGTH as f64;
        w[offset + i] = 0.5 - 0.5 * phase.cos();
    }
    w
}

fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        f_sp * mel
    }
}

/// `80 x 513` triangular filters on the Slaney mel scale between 0 Hz and
/// Nyquist, each scaled to unit area.
pub fn mel_filterbank() -> Array2<f64> {
    let fmax = SAMPLE_RATE as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..N_BINS).map(|k| k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64).collect();
    let mut fb = Array2::zeros((N_MELS, N_BINS));
    for m in 0..N_MELS {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let scale = 2.0 / (right - left);
        for (k, &f) in bin_hz.iter().enumerate() {
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            fb[[m, k]] = up.min(down).max(0.0) * scale;
        }
    }
    fb
}

/// Reflect an index into `0..n` (mirror without repeating the edge).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Number of frames of a centered STFT over `len` samples.
pub fn num_frames(len: usize) -> usize {
    len / HOP_LENGTH + 1
}

/// Centered, reflect-padded STFT: `frames x 513` complex bins.
pub fn stft(samples: &[f64]) -> Vec<Vec<Complex<f64>>> {
    let window = analysis_window();
    let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
    let pad = (FFT_SIZE / 2) as isize;
    let n = samples.len();
    (0..num_frames(n))
        .map(|f| {
            let start = (f * HOP_LENGTH) as isize - pad;
            let mut buf: Vec<Complex<f64>> = (0..FFT_SIZE)
                .map(|i| Complex::new(samples[reflect(start + i as isize, n)] * window[i], 0.0))
                .collect();
            fft.process(&mut buf);
            buf.truncate(N_BINS);
            buf
        })
        .collect()
}

/// Weighted overlap-add inverse of [`stft`] producing `len` samples.
pub fn istft(spec: &[Vec<Complex<f64>>], len: usize) -> Vec<f64> {
    let window = analysis_window();
    let ifft = FftPlanner::new().plan_fft_inverse(FFT_SIZE);
    let pad = FFT_SIZE / 2;
    let total = len + FFT_SIZE;
    let mut out = vec![0.0; total];
    let mut norm = vec![0.0; total];
    for (f, frame) in spec.iter().enumerate() {
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        buf[..N_BINS].copy_from_slice(frame);
        for k in 1..FFT_SIZE / 2 {
            buf[FFT_SIZE - k] = frame[k].conj();
        }
        ifft.process(&mut buf);
        let start = f * HOP_LENGTH;
        for i in 0..FFT_SIZE {
            out[start + i] += buf[i].re / FFT_SIZE as f64 * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    (0..len)
        .map(|i| {
            let w = norm[i + pad];
            if w > 1e-8 {
                out[i + pad] / w
            } else {
                0.0
            }
        })
        .collect()
}

fn power_to_log_mel(power: &[Vec<f64>], fb: &Array2<f64>) -> Array2<f32> {
    let mut mel = Array2::zeros((power.len(), N_MELS));
    for (t, p) in power.iter().enumerate() {
        for m in 0..N_MELS {
            let e: f64 = fb.row(m).iter().zip(p).map(|(w, v)| w * v).sum();
            mel[[t, m]] = e.max(LOG_FLOOR).ln() as f32;
        }
    }
    mel
}

/// Natural-log mel power of a 16 kHz waveform: 40 ms Hann window, 10 ms
/// hop, 1024-point FFT, 80 Slaney mel bands, floor 1e-10.
pub fn log_mel(w: &Waveform) -> Result<MelSpectrogram> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "log_mel expects {SAMPLE_RATE} Hz audio, got {} Hz; resample first",
            w.sample_rate
        )));
    }
    if w.len() < HOP_LENGTH {
        return Err(Error::invalid(format!(
            "waveform of {} samples is shorter than one hop ({HOP_LENGTH})",
            w.len()
        )));
    }
    let samples: Vec<f64> = w.samples.iter().map(|&v| v as f64).collect();
    let power: Vec<Vec<f64>> = stft(&samples)
        .into_iter()
        .map(|frame| frame.iter().map(Complex::norm_sqr).collect())
        .collect();
    MelSpectrogram::with_meta(power_to_log_mel(&power, &mel_filterbank()), MelMeta::default())
}

/// Non-negative linear spectrum whose mel projection approximates `mel`
/// (multiplicative least-squares updates).
fn mel_to_power(mel: &MelSpectrogram, fb: &Array2<f64>) -> Vec<Vec<f64>> {
    let fbt = fb.t();
    mel.frames()
        .rows()
        .into_iter()
        .map(|row| {
            let target: Vec<f64> = row.iter().map(|&v| (v as f64).exp()).collect();
            let mut s: Vec<f64> = (0..N_BINS)
                .map(|k| fbt.row(k).iter().zip(&target).map(|(w, v)| w * v).sum::<f64>())
                .collect();
            for _ in 0..50 {
                let proj: Vec<f64> = (0..N_MELS).map(|m| fb.row(m).iter().zip(&s).map(|(w, v)| w * v).sum()).collect();
                for (k, sk) in s.iter_mut().enumerate() {
                    let num: f64 = fbt.row(k).iter().zip(&target).map(|(w, v)| w * v).sum();
                    let den: f64 = fbt.row(k).iter().zip(&proj).map(|(w, v)| w * v).sum();
                    if den > 0.0 {
                        *sk *= num / den;
                    }
                }
            }
            s
        })
        .collect()
}

/// Griffin-Lim phase reconstruction from a log-mel spectrogram. The
/// starting phase is seeded, so equal inputs give equal audio.
pub fn mel_to_audio(mel: &MelSpectrogram, iters: usize) -> Result<Waveform> {
    if iters == 0 {
        return Err(Error::invalid("mel_to_audio needs at least one iteration"));
    }
    let fb = mel_filterbank();
    let magnitude: Vec<Vec<f64>> = mel_to_power(mel, &fb)
        .into_iter()
        .map(|p| p.into_iter().map(f64::sqrt).collect())
        .collect();
    let len = (mel.num_frames() - 1) * HOP_LENGTH;
    let mut rng = rng_for(GRIFFIN_LIM_SEED, 0);
    let mut spec: Vec<Vec<Complex<f64>>> = magnitude
        .iter()
        .map(|m| {
            m.iter()
                .map(|&a| Complex::from_polar(a, rng.random_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    let mut audio = istft(&spec, len);
    for _ in 1..iters {
        let est = stft(&audio);
        for ((frame, est), mag) in spec.iter_mut().zip(&est).zip(&magnitude) {
            for ((c, e), &a) in frame.iter_mut().zip(est).zip(mag) {
                let n = e.norm();
                *c = if n > 1e-12 { e * (a / n) } else { Complex::new(a, 0.0) };
            }
        }
        audio = istft(&spec, len);
    }
    Waveform::new(audio.into_iter().map(|v| v as f32).collect(), SAMPLE_RATE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn sine(freq: f64, n: usize, amp: f64) -> Waveform {
        let s = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect();
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    fn mae(a: &MelSpectrogram, b: &MelSpectrogram) -> f64 {
        let n = a.frames().len().min(b.frames().len());
        a.frames().iter().zip(b.frames().iter()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / n as f64
    }

    #[test]
    fn one_second_has_101_frames() {
        let m = log_mel(&sine(440.0, 16_000, 0.5)).unwrap();
        assert_eq!(m.num_frames(), 101);
        assert_eq!(m.frames().ncols(), 80);
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let m = log_mel(&Waveform::new(vec![0.0; 4000], SAMPLE_RATE).unwrap()).unwrap();
        let floor = (LOG_FLOOR.ln()) as f32;
        assert!(m.frames().iter().all(|&v| v == floor));
    }

    #[test]
    fn wrong_rate_and_short_input() {
        let w = Waveform::new(vec![0.1; 4000], 8000).unwrap();
        assert!(matches!(log_mel(&w), Err(Error::InvalidInput(_))));
        let w = Waveform::new(vec![0.1; 100], SAMPLE_RATE).unwrap();
        assert!(matches!(log_mel(&w), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn filterbank_rows_have_unit_area_in_hz() {
        // Slaney normalization: each triangle integrates to 1 over mel-band Hz
        // width, so row sums times the bin spacing are close to 1 for wide bands.
        let fb = mel_filterbank();
        let bin_hz = SAMPLE_RATE as f64 / FFT_SIZE as f64;
        let last = fb.row(N_MELS - 1).sum() * bin_hz;
        assert!((last - 1.0).abs() < 0.05, "{last}");
        assert!(fb.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn stft_istft_round_trip() {
        let w = sine(300.0, 3200, 0.3);
        let x: Vec<f64> = w.samples.iter().map(|&v| v as f64).collect();
        let y = istft(&stft(&x), x.len());
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn griffin_lim_improves_each_iteration() {
        let w = sine(440.0, 4000, 0.5);
        let target = log_mel(&w).unwrap();
        let errors: Vec<f64> = (1..=5)
            .map(|k| mae(&log_mel(&mel_to_audio(&target, k).unwrap()).unwrap(), &target))
            .collect();
        assert!(errors.windows(2).all(|p| p[1] < p[0]), "{errors:?}");
    }

    #[test]
    fn griffin_lim_beats_random_phase() {
        let w = sine(700.0, 4000, 0.5);
        let target = log_mel(&w).unwrap();
        let random = mae(&log_mel(&mel_to_audio(&target, 1).unwrap()).unwrap(), &target);
        let recon = mae(&log_mel(&mel_to_audio(&target, 32).unwrap()).unwrap(), &target);
        assert!(recon < random, "{recon} vs {random}");
    }

    #[test]
    fn silent_mel_gives_silent_audio() {
        let mel = MelSpectrogram::new(Array2::from_elem((20, 80), LOG_FLOOR.ln() as f32)).unwrap();
        let a = mel_to_audio(&mel, 4).unwrap();
        let rms = (a.samples.iter().map(|v| (v * v) as f64).sum::<f64>() / a.len() as f64).sqrt();
        assert!(rms < 1e-3, "{rms}");
        assert!(matches!(mel_to_audio(&mel, 0), Err(Error::InvalidInput(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn frame_count_law(n in 160usize..6000) {
            let w = Waveform::new((0..n).map(|i| ((i * 7919) % 97) as f32 / 200.0 - 0.25).collect(), SAMPLE_RATE).unwrap();
            prop_assert_eq!(log_mel(&w).unwrap().num_frames(), n / 160 + 1);
        }

        #[test]
        fn louder_never_lowers_energy(g in 1.0f32..8.0, seed in 0u64..1000) {
            let mut rng = rng_for(seed, 1);
            let base: Vec<f32> = (0..1600).map(|_| rng.random_range(-0.1f32..0.1)).collect();
            let a = log_mel(&Waveform::new(base.clone(), SAMPLE_RATE).unwrap()).unwrap();
            let b = log_mel(&Waveform::new(base.iter().map(|v| v * g).collect(), SAMPLE_RATE).unwrap()).unwrap();
            let floor = a.floor_value();
            for (x, y) in a.frames().iter().zip(b.frames().iter()) {
                if *x > floor {
                    prop_assert!(y >= x, "{} < {}", y, x);
                }
            }
        }
    }
}
