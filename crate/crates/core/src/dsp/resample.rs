use super::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the sinc kernel on each side.
const ZERO_CROSSINGS: f64 = 48.0;
const KAISER_BETA: f64 = 9.0;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.94;

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Band-limited resampling with a Kaiser-windowed sinc kernel. The output
/// has `round(len * target / source)` samples; equal rates return the input
/// unchanged.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::invalid("cannot resample an empty waveform"));
    }
    if target_rate == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let ratio = target_rate as f64 / w.sample_rate as f64;
    let out_len = ((w.len() as f64 * ratio).round() as usize).max(1);
    // Cutoff in cycles per input sample.
    let cutoff = ROLLOFF * ratio.min(1.0);
    let half = ZERO_CROSSINGS / cutoff;
    let norm = bessel_i0(KAISER_BETA);
    let x = &w.samples;

    let samples = (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = ((t - half).ceil().max(0.0)) as usize;
            let hi = ((t + half).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0;
            for (k, &v) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - k as f64;
                let r = d / half;
                let win = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
                acc += v as f64 * cutoff * sinc(cutoff * d) * win;
            }
            acc as f32
        })
        .collect();
    Waveform::new(samples, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn tone(freqs: &[f64], rate: u32, n: usize) -> Waveform {
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / rate as f64;
                freqs.iter().map(|f| (2.0 * std::f64::consts::PI * f * t).sin()).sum::<f64>() as f32
                    / freqs.len() as f32
            })
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn identity_rate() {
        let w = tone(&[440.0], 16_000, 1000);
        assert_eq!(resample(&w, 16_000).unwrap(), w);
    }

    #[test]
    fn exact_ratio_length() {
        let w = tone(&[440.0], 32_000, 3200);
        let r = resample(&w, 16_000).unwrap();
        assert_eq!(r.len(), 1600);
        assert_eq!(r.sample_rate, 16_000);
        assert!((r.duration_s() - w.duration_s()).abs() <= 1.0 / 16_000.0);
    }

    #[test]
    fn dft_peak_is_preserved() {
        let w = tone(&[440.0], 48_000, 48_000);
        let r = resample(&w, 16_000).unwrap();
        let n = r.len();
        let mut buf: Vec<Complex<f64>> = r.samples.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let peak = (0..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
        let bin_hz = 16_000.0 / n as f64;
        assert!((peak as f64 * bin_hz - 440.0).abs() <= bin_hz, "peak at {} Hz", peak as f64 * bin_hz);
    }

    #[test]
    fn round_trip_band_limited() {
        let w = tone(&[220.0, 1375.0, 3100.0, 6800.0], 16_000, 16_000);
        let up = resample(&w, 32_000).unwrap();
        let back = resample(&up, 16_000).unwrap();
        assert_eq!(back.len(), w.len());
        let mae = w.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / w.len() as f64;
        assert!(mae < 1e-3, "round-trip MAE {mae}");
    }

    #[test]
    fn empty_is_rejected() {
        let w = Waveform::new(vec![], 16_000).unwrap();
        assert!(matches!(resample(&w, 8000), Err(Error::InvalidInput(_))));
    }
}
