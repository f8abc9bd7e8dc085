//! Waveform-level signal processing: resampling, speed and tempo changes, FFT.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{cos, sin, sqrt, PI};

/// Mono waveform with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl Waveform {
    pub fn new(sample_rate: u32, samples: Vec<f32>) -> Self {
        Self {
            sample_rate,
            samples,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

const SINC_HALF_TAPS: isize = 16;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        sin(PI * x) / (PI * x)
    }
}

/// Band-limited interpolation: output sample `j` is read at input position
/// `j · step`, low-passed at `cutoff` (fraction of the input Nyquist).
fn interpolate(input: &[f32], out_len: usize, step: f64, cutoff: f64) -> Vec<f32> {
    let half = SINC_HALF_TAPS as f64 / cutoff;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let pos = j as f64 * step;
        let lo = libm::ceil(pos - half).max(0.0) as isize;
        let hi = (libm::floor(pos + half) as isize).min(input.len() as isize - 1);
        let mut acc = 0.0;
        for i in lo..=hi {
            let d = pos - i as f64;
            // Hann window over [-half, half].
            let w = 0.5 + 0.5 * cos(PI * d / half);
            acc += f64::from(input[i as usize]) * cutoff * sinc(cutoff * d) * w;
        }
        out.push(acc as f32);
    }
    out
}

/// Change the sample rate, low-passing when downsampling.
pub fn resample(wave: &Waveform, target_rate: u32) -> Waveform {
    if wave.sample_rate == target_rate {
        return wave.clone();
    }
    let ratio = f64::from(wave.sample_rate) / f64::from(target_rate);
    let out_len = libm::round(wave.samples.len() as f64 / ratio) as usize;
    let cutoff = (1.0 / ratio).min(1.0);
    Waveform::new(
        target_rate,
        interpolate(&wave.samples, out_len, ratio, cutoff),
    )
}

/// Speed perturbation: resample by `factor` and keep the nominal rate, so
/// duration scales by `1/factor` and every frequency by `factor`.
pub fn speed(wave: &Waveform, factor: f64) -> Waveform {
    let out_len = libm::round(wave.samples.len() as f64 / factor) as usize;
    let cutoff = (1.0 / factor).min(1.0);
    Waveform::new(
        wave.sample_rate,
        interpolate(&wave.samples, out_len, factor, cutoff),
    )
}

/// Tempo perturbation by waveform-similarity overlap-add (WSOLA): duration
/// scales by `1/factor`, pitch is preserved.
pub fn tempo(wave: &Waveform, factor: f64) -> Waveform {
    let rate = f64::from(wave.sample_rate);
    let frame = ((0.030 * rate) as usize).max(8) & !1;
    let hop_out = frame / 2;
    let hop_in = hop_out as f64 * factor;
    let tolerance = (0.010 * rate) as isize;
    let x = &wave.samples;
    let out_len = libm::round(x.len() as f64 / factor) as usize;
    if x.len() < frame || out_len == 0 {
        return speed(wave, factor);
    }
    let window: Vec<f32> = (0..frame)
        .map(|i| (0.5 - 0.5 * cos(2.0 * PI * i as f64 / frame as f64)) as f32)
        .collect();

    let at = |i: isize| -> f32 {
        if i >= 0 && (i as usize) < x.len() {
            x[i as usize]
        } else {
            0.0
        }
    };

    let mut out = vec![0.0f32; out_len + frame];
    let mut prev: isize = 0;
    let frames = out_len / hop_out + 1;
    for k in 0..frames {
        let nominal = libm::round(k as f64 * hop_in) as isize;
        let chosen = if k == 0 {
            0
        } else {
            // Best match to the natural continuation of the previous segment.
            let target = prev + hop_out as isize;
            let mut best = nominal;
            let mut best_score = f64::NEG_INFINITY;
            for delta in -tolerance..=tolerance {
                let cand = nominal + delta;
                let mut s = 0.0;
                for i in (0..frame as isize).step_by(2) {
                    s += f64::from(at(cand + i)) * f64::from(at(target + i));
                }
                if s > best_score {
                    best_score = s;
                    best = cand;
                }
            }
            best
        };
        let base = k * hop_out;
        for i in 0..frame {
            if base + i < out.len() {
                out[base + i] += window[i] * at(chosen + i as isize);
            }
        }
        prev = chosen;
    }
    out.truncate(out_len);
    Waveform::new(wave.sample_rate, out)
}

/// In-place radix-2 complex FFT. `re.len()` must be a power of two.
pub fn fft(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    assert!(
        n.is_power_of_two() && im.len() == n,
        "fft size must be a power of two"
    );
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let (wr, wi) = (cos(ang), sin(ang));
        for start in (0..n).step_by(len) {
            let (mut cr, mut ci) = (1.0, 0.0);
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
        len <<= 1;
    }
}

/// Frequency (Hz) of the largest magnitude bin of a Hann-windowed spectrum
/// of the whole signal, zero-padded to a power of two.
pub fn dominant_frequency(wave: &Waveform) -> f64 {
    let n = wave.samples.len().next_power_of_two().max(2);
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    let len = wave.samples.len();
    for (i, &s) in wave.samples.iter().enumerate() {
        let w = 0.5 - 0.5 * cos(2.0 * PI * i as f64 / len as f64);
        re[i] = f64::from(s) * w;
    }
    fft(&mut re, &mut im);
    let best = (1..n / 2)
        .max_by(|&a, &b| {
            let ma = sqrt(re[a] * re[a] + im[a] * im[a]);
            let mb = sqrt(re[b] * re[b] + im[b] * im[b]);
            ma.partial_cmp(&mb).unwrap_or(core::cmp::Ordering::Equal)
        })
        .unwrap_or(0);
    best as f64 * f64::from(wave.sample_rate) / n as f64
}

#[cfg(test)]
pub(crate) fn tone(rate: u32, freq: f64, seconds: f64) -> Waveform {
    let n = (f64::from(rate) * seconds) as usize;
    Waveform::new(
        rate,
        (0..n)
            .map(|i| (0.5 * sin(2.0 * PI * freq * i as f64 / f64::from(rate))) as f32)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft_of_impulse_is_flat() {
        let mut re = vec![0.0; 8];
        let mut im = vec![0.0; 8];
        re[0] = 1.0;
        fft(&mut re, &mut im);
        assert!(re.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(im.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn fft_matches_naive_dft() {
        let x: Vec<f64> = (0..16)
            .map(|i| sin(i as f64 * 0.7) + 0.3 * cos(i as f64 * 2.1))
            .collect();
        let mut re = x.clone();
        let mut im = vec![0.0; 16];
        fft(&mut re, &mut im);
        for k in 0..16 {
            let (mut r, mut i) = (0.0, 0.0);
            for (n, &v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * n) as f64 / 16.0;
                r += v * cos(a);
                i += v * sin(a);
            }
            assert!((r - re[k]).abs() < 1e-9 && (i - im[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn speed_scales_length_and_pitch() {
        let w = tone(8000, 500.0, 1.0);
        for f in [0.9, 1.1] {
            let s = speed(&w, f);
            let expect = (8000.0 / f) as usize;
            assert!((s.samples.len() as i64 - expect as i64).abs() <= 1);
            let ratio = dominant_frequency(&s) / dominant_frequency(&w);
            assert!((ratio - f).abs() < 0.02, "speed {f}: pitch ratio {ratio}");
        }
    }

    #[test]
    fn tempo_scales_length_but_not_pitch() {
        let w = tone(8000, 500.0, 1.0);
        for f in [0.9, 1.1] {
            let t = tempo(&w, f);
            let expect = (8000.0 / f) as usize;
            assert!((t.samples.len() as i64 - expect as i64).abs() <= 1);
            let ratio = dominant_frequency(&t) / dominant_frequency(&w);
            assert!((ratio - 1.0).abs() < 0.02, "tempo {f}: pitch ratio {ratio}");
        }
    }

    #[test]
    fn downsample_preserves_low_tone() {
        let w = tone(16000, 440.0, 0.5);
        let d = resample(&w, 8000);
        assert_eq!(d.sample_rate, 8000);
        assert_eq!(d.samples.len(), 4000);
        assert!((dominant_frequency(&d) - 440.0).abs() < 5.0);
    }
}
