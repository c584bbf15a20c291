use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const LOG_OFFSET: f64 = 1e-10;

/// STFT and mel settings. The defaults turn a 30 s, 44.1 kHz clip into
/// 644 frames of 64 bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelParams {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub n_mels: usize,
    /// Output frame count; the STFT is center-cropped or padded to this.
    pub frames: usize,
}

impl Default for MelParams {
    fn default() -> Self {
        Self {
            sample_rate: 44_100,
            frame_len: 4096,
            hop: 2048,
            n_mels: 64,
            frames: 644,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `n_mels + 2` band edges in Hz, evenly spaced on the mel scale from 0 Hz
/// to Nyquist. Band `i` rises from edge `i`, peaks at `i+1`, falls to `i+2`.
pub fn mel_band_edges(sample_rate: u32, n_mels: usize) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filterbank, `[n_mels][frame_len/2 + 1]`, unnormalized peaks of 1.
pub fn mel_filterbank(sample_rate: u32, frame_len: usize, n_mels: usize) -> Vec<Vec<f64>> {
    let edges = mel_band_edges(sample_rate, n_mels);
    let bins = frame_len / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / frame_len as f64;
                    let rise = (f - lo) / (mid - lo);
                    let fall = (hi - f) / (hi - mid);
                    rise.min(fall).max(0.0)
                })
                .collect()
        })
        .collect()
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Log-mel spectrogram `[T, F, C]` of a multichannel waveform.
///
/// Frames are centered (the signal is zero-padded by half a frame on each
/// side), windowed with a periodic Hann window and reduced to magnitude
/// spectra before the mel projection and `ln(x + 1e-10)`.
pub fn log_mel_spectrogram(channels: &[Vec<f64>], params: &MelParams) -> Result<Tensor> {
    let len = channels.first().map_or(0, |c| c.len());
    if channels.is_empty() || len == 0 {
        return Err(Error::Input("empty audio".into()));
    }
    if channels.iter().any(|c| c.len() != len) {
        return Err(Error::Input("audio channels differ in length".into()));
    }
    if channels.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("audio samples".into()));
    }
    let MelParams { frame_len, hop, n_mels, frames, sample_rate } = *params;
    if frame_len == 0 || hop == 0 || n_mels == 0 || frames == 0 {
        return Err(Error::Config("mel parameters must be positive".into()));
    }

    let n_stft = 1 + len / hop;
    let (skip, take) = if n_stft >= frames {
        ((n_stft - frames) / 2, frames)
    } else {
        (0, n_stft)
    };

    let window = hann(frame_len);
    let bank = mel_filterbank(sample_rate, frame_len, n_mels);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame_len);
    let n_ch = channels.len();
    let silent = LOG_OFFSET.ln();
    let mut out = vec![silent; frames * n_mels * n_ch];
    let mut buf = vec![Complex::new(0.0, 0.0); frame_len];
    let half = frame_len / 2;

    for (c, signal) in channels.iter().enumerate() {
        for t in 0..take {
            let start = ((skip + t) * hop) as isize - half as isize;
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let x = if idx >= 0 && (idx as usize) < len { signal[idx as usize] } else { 0.0 };
                *slot = Complex::new(x * window[i], 0.0);
            }
            fft.process(&mut buf);
            let mags: Vec<f64> = buf[..=half].iter().map(|z| z.norm()).collect();
            for (m, filt) in bank.iter().enumerate() {
                let e: f64 = filt.iter().zip(&mags).map(|(w, a)| w * a).sum();
                out[(t * n_mels + m) * n_ch + c] = (e + LOG_OFFSET).ln();
            }
        }
    }
    Tensor::new(vec![frames, n_mels, n_ch], out)
}
