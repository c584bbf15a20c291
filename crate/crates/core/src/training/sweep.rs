use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{predict, silent_gammas};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub grid_value: f64,
    pub mean_prediction: f64,
    /// Training-set mean of the swept dimension, repeated on every row.
    pub training_mean: f64,
}

/// `n` evenly spaced points on `[0, 1]`; a single point sits at 0.
pub fn unit_grid(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Ceteris-paribus curve for participant dimension `dim`: for each grid
/// value the dimension is set to it, every other dimension is pinned to its
/// training mean, and the point prediction is averaged over `samples` with
/// their audio, gain and image unchanged.
pub fn participant_sweep(model: &Model, samples: &[&Sample], dim: usize, grid: &[f64], seed: u64) -> Result<Vec<SweepPoint>> {
    let config = model.config();
    if !config.include_participant {
        return Err(Error::Config(format!(
            "model {} excludes participant input, so its predictions cannot depend on dimension {dim}",
            config.variant()
        )));
    }
    if dim >= config.participant_dim {
        return Err(Error::Config(format!(
            "dimension {dim} out of range for M = {}",
            config.participant_dim
        )));
    }
    if samples.is_empty() || grid.is_empty() {
        return Err(Error::Config("sweep needs samples and at least one grid point".into()));
    }
    let means = model
        .metadata
        .participant_means
        .clone()
        .ok_or_else(|| Error::Config("checkpoint lacks training participant means".into()))?;
    if means.len() != config.participant_dim {
        return Err(Error::dim("stored participant means do not match M"));
    }
    let gammas = silent_gammas(samples, model.metadata.gain_stats.as_ref(), seed)?;
    let fusion = config.fusion;
    let mut out = Vec::with_capacity(grid.len());
    for &g in grid {
        if !g.is_finite() {
            return Err(Error::NonFinite("sweep grid value".into()));
        }
        let mut p = means.clone();
        p[dim] = g;
        let p = Tensor::new(vec![p.len()], p)?;
        let pinned: Vec<Sample> = samples
            .iter()
            .map(|s| Sample {
                participant: p.clone(),
                ..(*s).clone()
            })
            .collect();
        let refs: Vec<&Sample> = pinned.iter().collect();
        let preds = predict(model, &refs, &gammas)?;
        let total = preds
            .iter()
            .map(|pr| pr.point_estimate(fusion))
            .sum::<Result<f64>>()?;
        out.push(SweepPoint {
            grid_value: g,
            mean_prediction: total / preds.len() as f64,
            training_mean: means[dim],
        });
    }
    Ok(out)
}

/// A line plot of the sweep with a dashed marker at the training mean.
pub fn sweep_svg(points: &[SweepPoint], dim: usize) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let ys: Vec<f64> = points.iter().map(|p| p.mean_prediction).collect();
    let (mut lo, mut hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    let x_of = |x: f64| pad + x * (w - 2.0 * pad);
    let y_of = |y: f64| h - pad - (y - lo) / (hi - lo) * (h - 2.0 * pad);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let line: Vec<String> = points
        .iter()
        .map(|p| format!("{:.2},{:.2}", x_of(p.grid_value), y_of(p.mean_prediction)))
        .collect();
    let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, line.join(" "));
    if let Some(p) = points.first() {
        let x = x_of(p.training_mean);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{pad}" x2="{x:.2}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
            h - pad
        );
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">participant dimension {dim}</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(svg, r#"<text x="{pad}" y="{}" font-size="11">{hi:.3}</text>"#, pad - 6.0);
    let _ = writeln!(svg, r#"<text x="{pad}" y="{}" font-size="11">{lo:.3}</text>"#, h - pad + 14.0);
    svg.push_str("</svg>\n");
    svg
}

pub fn write_sweep_svg(points: &[SweepPoint], dim: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, sweep_svg(points, dim)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;
    use crate::model::{Fusion, ModelConfig, Variant};
    use crate::preprocessing::GainStats;

    fn model(ip: bool) -> Model {
        let cfg = ModelConfig::miniature().with_variant(Variant {
            fusion: Fusion::Mid,
            include_participant: ip,
            include_visual: false,
        });
        let mut m = Model::new(cfg, 3).unwrap();
        m.metadata.participant_means = Some(vec![0.5, 0.4, 0.3, 0.5, 0.5]);
        m.metadata.gain_stats = Some(GainStats { nu: 0.0, zeta: 0.0 });
        m
    }

    #[test]
    fn grid_points() {
        assert_eq!(unit_grid(11).len(), 11);
        assert_eq!(unit_grid(11)[10], 1.0);
        assert!((unit_grid(11)[3] - 0.3).abs() < 1e-15);
        assert_eq!(unit_grid(1), vec![0.0]);
    }

    #[test]
    fn excluded_participant_is_rejected() {
        let d = generate_synthetic_dataset(10, 1, &ModelConfig::miniature()).unwrap();
        let refs: Vec<&Sample> = d.samples.iter().collect();
        let err = participant_sweep(&model(false), &refs, 0, &[0.5], 0).unwrap_err();
        assert!(err.to_string().contains("excludes participant"));
        assert!(participant_sweep(&model(true), &refs, 5, &[0.5], 0).is_err());
    }

    #[test]
    fn single_point_is_the_pinned_dataset_mean() {
        let d = generate_synthetic_dataset(10, 1, &ModelConfig::miniature()).unwrap();
        let refs: Vec<&Sample> = d.samples.iter().collect();
        let m = model(true);
        let pts = participant_sweep(&m, &refs, 0, &[0.9], 0).unwrap();
        assert_eq!(pts.len(), 1);
        let p = Tensor::vector(&[0.9, 0.4, 0.3, 0.5, 0.5]).unwrap();
        let mean = d
            .samples
            .iter()
            .map(|s| {
                let s = Sample { participant: p.clone(), ..s.clone() };
                m.forward(&s, s.gamma).unwrap().trunk.mu
            })
            .sum::<f64>()
            / 10.0;
        assert!((pts[0].mean_prediction - mean).abs() < 1e-12);
        assert_eq!(pts[0].training_mean, 0.5);
        let svg = sweep_svg(&pts, 0);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}
