use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use npyz::WriterBuilder;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::resize::downsample_image;
use super::mel::{log_mel_spectrogram, MelParams};

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

fn input_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Input(format!("{}: {msg}", path.display()))
}

/// Reads an f64 (or f32) `.npy` array.
pub fn read_npy(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let open = || -> Result<npyz::NpyFile<BufReader<File>>> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        npyz::NpyFile::new(BufReader::new(f)).map_err(|e| input_err(path, e))
    };
    let npy = open()?;
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    if npy.order() == npyz::Order::Fortran {
        return Err(input_err(path, "Fortran-ordered arrays are not supported"));
    }
    let data: Vec<f64> = match npy.into_vec::<f64>() {
        Ok(v) => v,
        Err(_) => open()?
            .into_vec::<f32>()
            .map_err(|e| input_err(path, format!("expected float array: {e}")))?
            .into_iter()
            .map(f64::from)
            .collect(),
    };
    Tensor::from_parts(shape, data)
        .and_then(|t| t.ensure_finite(&path.display().to_string()).map(|_| t))
        .map_err(|e| input_err(path, e))
}

pub fn write_npy(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let shape: Vec<u64> = t.shape().iter().map(|&d| d as u64).collect();
    let io = |e: std::io::Error| Error::io(path, e);
    let mut w = npyz::WriteOptions::<f64>::new()
        .default_dtype()
        .shape(&shape)
        .writer(BufWriter::new(f))
        .begin_nd()
        .map_err(io)?;
    w.extend(t.data().iter().copied()).map_err(io)?;
    w.finish().map_err(io)
}

/// Reads a WAV file as one `Vec` per channel, scaled to `[-1, 1]`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<Vec<f64>>, u32)> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| input_err(path, e))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| input_err(path, e))?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| input_err(path, e))?
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / n_ch.max(1)); n_ch];
    for (i, x) in interleaved.into_iter().enumerate() {
        channels[i % n_ch].push(x);
    }
    Ok((channels, spec.sample_rate))
}

pub fn write_wav(path: impl AsRef<Path>, channels: &[Vec<f64>], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| input_err(path, e))?;
    let len = channels.first().map_or(0, Vec::len);
    for i in 0..len {
        for c in channels {
            w.write_sample(c[i] as f32).map_err(|e| input_err(path, e))?;
        }
    }
    w.finalize().map_err(|e| input_err(path, e))
}

/// Reads a PNG/PPM as `[H, W, 3]` with values in `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| input_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// Loads a `[T, F, C]` log-mel spectrogram: `.npy` files are taken as
/// already computed; WAV files are transformed with the default STFT settings.
pub fn load_spectrogram(path: impl AsRef<Path>, expected: [usize; 3]) -> Result<Tensor> {
    let path = path.as_ref();
    let spec = match extension(path).as_str() {
        "npy" => read_npy(path)?,
        "wav" => {
            let (channels, sample_rate) = read_wav(path)?;
            let params = MelParams {
                sample_rate,
                n_mels: expected[1],
                frames: expected[0],
                ..MelParams::default()
            };
            log_mel_spectrogram(&channels, &params).map_err(|e| input_err(path, e))?
        }
        other => return Err(input_err(path, format!("unsupported audio format {other:?}"))),
    };
    if spec.shape() != expected {
        return Err(Error::dim(format!(
            "{}: spectrogram shape {:?}, expected {expected:?}",
            path.display(),
            spec.shape()
        )));
    }
    Ok(spec)
}

/// Loads an `[H, W, C]` image, resampling to the expected size if needed.
pub fn load_image(path: impl AsRef<Path>, expected: [usize; 3]) -> Result<Tensor> {
    let path = path.as_ref();
    let img = match extension(path).as_str() {
        "npy" => read_npy(path)?,
        "png" | "ppm" | "pnm" => read_image(path)?,
        other => return Err(input_err(path, format!("unsupported image format {other:?}"))),
    };
    if img.ndim() != 3 || img.shape()[2] != expected[2] {
        return Err(Error::dim(format!(
            "{}: image shape {:?}, expected {expected:?}",
            path.display(),
            img.shape()
        )));
    }
    if img.shape()[..2] == expected[..2] {
        Ok(img)
    } else {
        downsample_image(&img, expected[0], expected[1]).map_err(|e| input_err(path, e))
    }
}
