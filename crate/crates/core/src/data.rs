//! Datasets: manifest ingestion, fold splits and the planted synthetic
//! generator used for desk-scale verification.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Tensor;
use crate::preprocessing::{encode_participant, load_image, load_spectrogram, write_npy, PiqKind, PiqSchema, PiqVariable};

pub const NUM_FOLDS: usize = 5;

/// One rated stimulus.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[T, F, C_s]` log-mel spectrogram of the soundscape.
    pub soundscape: Tensor,
    /// `[T, F, C_m]` log-mel spectrogram of the masker.
    pub masker: Tensor,
    /// Recorded log-gain; meaningless when the masker is silent.
    pub gamma: f64,
    /// `[M]` coded questionnaire answers.
    pub participant: Tensor,
    /// `[H, W, C_v]` environment image.
    pub image: Tensor,
    pub label: f64,
    pub fold: usize,
    pub is_silent_masker: bool,
}

/// Anything assigned to a cross-validation fold.
pub trait Folded {
    fn fold(&self) -> usize;
}

impl Folded for Sample {
    fn fold(&self) -> usize {
        self.fold
    }
}

impl Folded for ManifestRow {
    fn fold(&self) -> usize {
        self.fold
    }
}

impl<T: Folded> Folded for &T {
    fn fold(&self) -> usize {
        (*self).fold()
    }
}

/// `(train, validation)` where validation holds the rows of `val_fold`.
pub fn kfold_split<T: Folded>(items: &[T], val_fold: usize) -> Result<(Vec<&T>, Vec<&T>)> {
    if val_fold >= NUM_FOLDS {
        return Err(Error::Config(format!("validation fold {val_fold} outside 0..{}", NUM_FOLDS - 1)));
    }
    let mut counts = [0usize; NUM_FOLDS];
    for it in items {
        let f = it.fold();
        if f >= NUM_FOLDS {
            return Err(Error::Config(format!("fold id {f} outside 0..{}", NUM_FOLDS - 1)));
        }
        counts[f] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Config(format!("fold {empty} has no rows")));
    }
    Ok(items.iter().partition(|it| it.fold() != val_fold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub soundscape_path: String,
    pub masker_path: String,
    pub image_path: String,
    pub gamma: f64,
    pub silent: bool,
    /// Raw answers in `piq_1..piq_k` order.
    pub piq: Vec<String>,
    pub label: f64,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory that relative paths are resolved against.
    pub dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

const FIXED_COLUMNS: [&str; 8] = [
    "id",
    "soundscape_path",
    "masker_path",
    "image_path",
    "gamma",
    "silent",
    "label",
    "fold",
];

impl Manifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Reads and validates a manifest CSV. All row problems are collected
    /// and reported together.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let mut fixed = [0usize; FIXED_COLUMNS.len()];
        let mut missing = Vec::new();
        for (slot, name) in fixed.iter_mut().zip(FIXED_COLUMNS) {
            match col(name) {
                Some(i) => *slot = i,
                None => missing.push(format!("missing column {name}")),
            }
        }
        let mut piq_cols: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.trim().strip_prefix("piq_")?.parse::<usize>().ok().map(|k| (k, i)))
            .collect();
        piq_cols.sort();
        if piq_cols.is_empty() {
            missing.push("no piq_<k> columns".into());
        } else if piq_cols.iter().enumerate().any(|(j, (k, _))| *k != j + 1) {
            missing.push("piq columns must be numbered piq_1..piq_k".into());
        }
        if !missing.is_empty() {
            return Err(Error::Validation(missing));
        }
        let [c_id, c_s, c_m, c_img, c_gamma, c_silent, c_label, c_fold] = fixed;

        let mut rows = Vec::new();
        let mut problems = Vec::new();
        let mut ids = HashSet::new();
        for (i, rec) in reader.records().enumerate() {
            let n = i + 1;
            let rec = match rec {
                Ok(r) => r,
                Err(e) => {
                    problems.push(format!("row {n}: {e}"));
                    continue;
                }
            };
            let field = |c: usize| rec.get(c).unwrap_or("").trim().to_string();
            let mut bad = |msg: String| problems.push(format!("row {n}: {msg}"));
            let id = field(c_id);
            if id.is_empty() {
                bad("empty id".into());
            } else if !ids.insert(id.clone()) {
                bad(format!("duplicate id {id:?}"));
            }
            let gamma = match field(c_gamma).parse::<f64>() {
                Ok(g) if g.is_finite() => g,
                _ => {
                    bad(format!("gamma {:?} is not a finite number", field(c_gamma)));
                    0.0
                }
            };
            let silent = match field(c_silent).as_str() {
                "0" => false,
                "1" => true,
                other => {
                    bad(format!("silent flag {other:?} must be 0 or 1"));
                    false
                }
            };
            let label = match field(c_label).parse::<f64>() {
                Ok(y) if (-1.0..=1.0).contains(&y) => y,
                _ => {
                    bad(format!("label {:?} outside [-1, 1]", field(c_label)));
                    0.0
                }
            };
            let fold = match field(c_fold).parse::<usize>() {
                Ok(f) if f < NUM_FOLDS => f,
                _ => {
                    bad(format!("fold {:?} outside 0..{}", field(c_fold), NUM_FOLDS - 1));
                    0
                }
            };
            let paths = [field(c_s), field(c_m), field(c_img)];
            for (p, what) in paths.iter().zip(["soundscape", "masker", "image"]) {
                if !dir.join(p).is_file() {
                    bad(format!("{what} file {p:?} not found"));
                }
            }
            let [soundscape_path, masker_path, image_path] = paths;
            rows.push(ManifestRow {
                id,
                soundscape_path,
                masker_path,
                image_path,
                gamma,
                silent,
                piq: piq_cols.iter().map(|&(_, c)| field(c)).collect(),
                label,
                fold,
            });
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        if rows.is_empty() {
            return Err(Error::Validation(vec!["manifest has no rows".into()]));
        }
        Ok(Self { dir, rows })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let k = self.rows.first().map_or(0, |r| r.piq.len());
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = FIXED_COLUMNS[..6].iter().map(|s| s.to_string()).collect();
        header.extend((1..=k).map(|i| format!("piq_{i}")));
        header.extend(["label".to_string(), "fold".to_string()]);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.id.clone(),
                r.soundscape_path.clone(),
                r.masker_path.clone(),
                r.image_path.clone(),
                r.gamma.to_string(),
                if r.silent { "1" } else { "0" }.to_string(),
            ];
            rec.extend(r.piq.iter().cloned());
            rec.extend([r.label.to_string(), r.fold.to_string()]);
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads every row into a [`Sample`] shaped for `config`.
    pub fn load_samples(&self, schema: &PiqSchema, config: &ModelConfig) -> Result<Vec<Sample>> {
        if schema.width() != config.participant_dim {
            return Err(Error::Config(format!(
                "PIQ schema codes {} dimensions but the model expects {}",
                schema.width(),
                config.participant_dim
            )));
        }
        let [t, f, _] = config.audio_shape;
        let masker_shape = [t, f, config.masker_channels];
        let mut out = Vec::with_capacity(self.rows.len());
        let mut problems = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            let loaded = (|| -> Result<Sample> {
                Ok(Sample {
                    id: r.id.clone(),
                    soundscape: load_spectrogram(self.resolve(&r.soundscape_path), config.audio_shape)?,
                    masker: load_spectrogram(self.resolve(&r.masker_path), masker_shape)?,
                    gamma: r.gamma,
                    participant: encode_participant(&r.piq, schema)?,
                    image: load_image(self.resolve(&r.image_path), config.image_shape)?,
                    label: r.label,
                    fold: r.fold,
                    is_silent_masker: r.silent,
                })
            })();
            match loaded {
                Ok(s) => out.push(s),
                Err(e) => problems.push(format!("row {}: {e}", i + 1)),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(out)
    }
}

/// The questionnaire schema used by the synthetic generator: three
/// continuous items and a yes/no item, coding to `M = 5`.
pub fn synthetic_schema() -> PiqSchema {
    let cont = |name: &str, min: f64, max: f64| PiqVariable {
        name: name.into(),
        kind: PiqKind::Continuous { min, max },
    };
    PiqSchema {
        variables: vec![
            cont("wellbeing", 0.0, 10.0),
            cont("noise_sensitivity", 1.0, 5.0),
            cont("age", 0.0, 100.0),
            PiqVariable {
                name: "resident".into(),
                kind: PiqKind::Categorical {
                    levels: vec!["no".into(), "yes".into()],
                },
            },
        ],
    }
}

/// Mean recorded log-gain of non-silent synthetic maskers.
pub const SYNTHETIC_GAMMA_MEAN: f64 = -0.5;
pub const SYNTHETIC_GAMMA_SD: f64 = 0.5;
pub const SYNTHETIC_SILENT_RATE: f64 = 0.1;
pub const SYNTHETIC_LABEL_NOISE: f64 = 0.05;

/// The planted target before label noise and clamping:
///
/// ```text
/// z = 2.4 (p0 - 0.5) + 0.8 (γ - ν) + 0.6 mean(s) + 1.0 (mean(b) - 0.5)
/// g = 2 sigmoid(z) - 1
/// ```
///
/// with `ν = -0.5` and the gain term dropped for silent maskers.
pub fn planted_function(p0: f64, gamma: Option<f64>, mean_s: f64, mean_b: f64) -> f64 {
    let z = 2.4 * (p0 - 0.5)
        + 0.8 * gamma.map_or(0.0, |g| g - SYNTHETIC_GAMMA_MEAN)
        + 0.6 * mean_s
        + 1.0 * (mean_b - 0.5);
    2.0 / (1.0 + (-z).exp()) - 1.0
}

/// A generated dataset: samples in memory plus what is needed to write
/// them out as a manifest.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub samples: Vec<Sample>,
    pub rows: Vec<ManifestRow>,
    pub schema: PiqSchema,
    pub config: ModelConfig,
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws `n` samples with labels from [`planted_function`]. Folds are
/// assigned round-robin over a seeded permutation.
pub fn generate_synthetic_dataset(n: usize, seed: u64, config: &ModelConfig) -> Result<SyntheticDataset> {
    if n < 10 {
        return Err(Error::Config(format!("synthetic dataset needs n >= 10, got {n}")));
    }
    config.validate()?;
    let schema = synthetic_schema();
    if schema.width() != config.participant_dim {
        return Err(Error::Config(format!(
            "synthetic schema codes {} participant dimensions; config has {}",
            schema.width(),
            config.participant_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds: Vec<usize> = (0..n).map(|i| i % NUM_FOLDS).collect();
    folds.shuffle(&mut rng);

    let [t, f, cs] = config.audio_shape;
    let cm = config.masker_channels;
    let [h, w, cv] = config.image_shape;
    let mut samples = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for (i, &fold) in folds.iter().enumerate() {
        let level_s = gaussian(&mut rng);
        let soundscape: Vec<f64> = (0..t * f * cs).map(|_| level_s + 0.5 * gaussian(&mut rng)).collect();
        let silent = rng.gen::<f64>() < SYNTHETIC_SILENT_RATE;
        let (masker, gamma) = if silent {
            (vec![0.0; t * f * cm], 0.0)
        } else {
            let level_m = gaussian(&mut rng);
            let m = (0..t * f * cm).map(|_| level_m + 0.5 * gaussian(&mut rng)).collect();
            (m, SYNTHETIC_GAMMA_MEAN + SYNTHETIC_GAMMA_SD * gaussian(&mut rng))
        };
        let brightness: f64 = rng.gen();
        let image: Vec<f64> = (0..h * w * cv)
            .map(|_| (brightness + 0.1 * gaussian(&mut rng)).clamp(0.0, 1.0))
            .collect();
        let answers = vec![
            format!("{:.2}", rng.gen_range(0.0..=10.0)),
            format!("{:.2}", rng.gen_range(1.0..=5.0)),
            format!("{:.0}", rng.gen_range(18.0..=80.0)),
            if rng.gen::<bool>() { "yes" } else { "no" }.to_string(),
        ];
        let participant = encode_participant(&answers, &schema)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let g = planted_function(
            participant.data()[0],
            (!silent).then_some(gamma),
            mean(&soundscape),
            mean(&image),
        );
        let label = (g + SYNTHETIC_LABEL_NOISE * gaussian(&mut rng)).clamp(-1.0, 1.0);

        let id = format!("s{i:05}");
        rows.push(ManifestRow {
            id: id.clone(),
            soundscape_path: format!("tensors/{id}_soundscape.npy"),
            masker_path: format!("tensors/{id}_masker.npy"),
            image_path: format!("tensors/{id}_image.npy"),
            gamma,
            silent,
            piq: answers,
            label,
            fold,
        });
        samples.push(Sample {
            id,
            soundscape: Tensor::new(vec![t, f, cs], soundscape)?,
            masker: Tensor::new(vec![t, f, cm], masker)?,
            gamma,
            participant,
            image: Tensor::new(vec![h, w, cv], image)?,
            label,
            fold,
            is_silent_masker: silent,
        });
    }
    Ok(SyntheticDataset {
        samples,
        rows,
        schema,
        config: config.clone(),
    })
}

impl SyntheticDataset {
    /// Writes `manifest.csv`, `piq_schema.json`, `config.json` and the
    /// tensors under `dir`, returning the manifest path.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let tensors = dir.join("tensors");
        fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
        for (s, r) in self.samples.iter().zip(&self.rows) {
            write_npy(dir.join(&r.soundscape_path), &s.soundscape)?;
            write_npy(dir.join(&r.masker_path), &s.masker)?;
            write_npy(dir.join(&r.image_path), &s.image)?;
        }
        self.schema.save(dir.join("piq_schema.json"))?;
        let cfg_path = dir.join("config.json");
        fs::write(&cfg_path, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&cfg_path, e))?;
        let manifest = Manifest {
            dir: dir.to_path_buf(),
            rows: self.rows.clone(),
        };
        let path = dir.join("manifest.csv");
        manifest.save(&path)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mini() -> ModelConfig {
        ModelConfig::miniature()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_dataset(20, 7, &mini()).unwrap();
        let b = generate_synthetic_dataset(20, 7, &mini()).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.rows, b.rows);
        let c = generate_synthetic_dataset(20, 8, &mini()).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn labels_in_range_and_small_n_rejected() {
        let d = generate_synthetic_dataset(200, 1, &mini()).unwrap();
        assert!(d.samples.iter().all(|s| (-1.0..=1.0).contains(&s.label)));
        assert!(generate_synthetic_dataset(9, 1, &mini()).is_err());
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn label_correlates_with_participant_dim_zero() {
        let d = generate_synthetic_dataset(500, 3, &mini()).unwrap();
        let p0: Vec<f64> = d.samples.iter().map(|s| s.participant.data()[0]).collect();
        let y: Vec<f64> = d.samples.iter().map(|s| s.label).collect();
        let rho = pearson(&p0, &y);
        assert!(rho > 0.3, "rho {rho}");
    }

    /// Least-squares residual sum via the normal equations.
    fn ols_sse(x: &[Vec<f64>], y: &[f64]) -> f64 {
        let k = x[0].len();
        let mut a = vec![vec![0.0; k + 1]; k];
        for (row, &yi) in x.iter().zip(y) {
            for i in 0..k {
                for j in 0..k {
                    a[i][j] += row[i] * row[j];
                }
                a[i][k] += row[i] * yi;
            }
        }
        for c in 0..k {
            let piv = (c..k).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, piv);
            for r in 0..k {
                if r != c {
                    let m = a[r][c] / a[c][c];
                    for j in c..=k {
                        a[r][j] -= m * a[c][j];
                    }
                }
            }
        }
        let beta: Vec<f64> = (0..k).map(|i| a[i][k] / a[i][i]).collect();
        x.iter()
            .zip(y)
            .map(|(row, yi)| (yi - row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>()).powi(2))
            .sum()
    }

    #[test]
    fn shuffling_participant_dim_zero_hurts_a_linear_probe() {
        let d = generate_synthetic_dataset(500, 11, &mini()).unwrap();
        let feats = |s: &Sample, p0: f64| {
            vec![
                1.0,
                s.soundscape.mean(),
                if s.is_silent_masker { 0.0 } else { s.gamma - SYNTHETIC_GAMMA_MEAN },
                p0,
                s.image.mean(),
            ]
        };
        let y: Vec<f64> = d.samples.iter().map(|s| s.label).collect();
        let x: Vec<Vec<f64>> = d.samples.iter().map(|s| feats(s, s.participant.data()[0])).collect();
        let mut p0: Vec<f64> = d.samples.iter().map(|s| s.participant.data()[0]).collect();
        p0.shuffle(&mut ChaCha8Rng::seed_from_u64(0));
        let xs: Vec<Vec<f64>> = d.samples.iter().zip(&p0).map(|(s, &p)| feats(s, p)).collect();
        let (fit, shuffled) = (ols_sse(&x, &y), ols_sse(&xs, &y));
        assert!(shuffled > fit, "{shuffled} <= {fit}");
    }

    #[test]
    fn manifest_round_trip_reproduces_samples() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic_dataset(10, 5, &mini()).unwrap();
        let path = d.write_to(dir.path()).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.rows, d.rows);
        let schema = PiqSchema::load(dir.path().join("piq_schema.json")).unwrap();
        let a = m.load_samples(&schema, &mini()).unwrap();
        let b = m.load_samples(&schema, &mini()).unwrap();
        assert_eq!(a, d.samples);
        assert_eq!(a, b);
    }

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        fs::write(dir.join("a.npy"), b"x").unwrap();
        let p = dir.join("m.csv");
        fs::write(
            &p,
            format!("id,soundscape_path,masker_path,image_path,gamma,silent,piq_1,label,fold\n{body}"),
        )
        .unwrap();
        p
    }

    fn validation_items(r: Result<Manifest>) -> Vec<String> {
        match r {
            Err(Error::Validation(items)) => items,
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_errors_name_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            "a,a.npy,a.npy,a.npy,0,0,1,0.5,0\n\
             b,a.npy,a.npy,a.npy,0,0,1,1.5,1\n\
             a,a.npy,a.npy,a.npy,0,0,1,0.5,2\n\
             c,a.npy,gone.npy,a.npy,0,0,1,0.5,7\n",
        );
        let items = validation_items(Manifest::load(&p));
        assert!(items.iter().any(|s| s.starts_with("row 2:") && s.contains("label")));
        assert!(items.iter().any(|s| s.starts_with("row 3:") && s.contains("duplicate")));
        assert!(items.iter().any(|s| s.starts_with("row 4:") && s.contains("gone.npy")));
        assert!(items.iter().any(|s| s.starts_with("row 4:") && s.contains("fold")));
        assert_eq!(items.len(), 4);
    }

    #[test]
    fn well_formed_manifest_keeps_folds() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = (0..10)
            .map(|i| format!("r{i},a.npy,a.npy,a.npy,-0.5,{},3,0.1,{}\n", i % 2, i % 5))
            .collect();
        let m = Manifest::load(write_manifest(dir.path(), &body)).unwrap();
        assert_eq!(m.rows.len(), 10);
        assert_eq!(m.rows.iter().map(|r| r.fold).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
        assert!(m.rows[1].silent && !m.rows[0].silent);
    }

    #[derive(Debug, Clone, PartialEq)]
    struct Row(usize, usize);

    impl Folded for Row {
        fn fold(&self) -> usize {
            self.1
        }
    }

    #[test]
    fn split_sizes_and_errors() {
        let rows: Vec<Row> = (0..20).map(|i| Row(i, i % 5)).collect();
        let (train, val) = kfold_split(&rows, 2).unwrap();
        assert_eq!((train.len(), val.len()), (16, 4));
        assert_eq!(kfold_split(&rows, 2).unwrap(), (train, val));
        let missing: Vec<Row> = (0..8).map(|i| Row(i, i % 4)).collect();
        assert!(matches!(kfold_split(&missing, 0), Err(Error::Config(_))));
        assert!(kfold_split(&rows, 5).is_err());
    }

    proptest! {
        #[test]
        fn split_partitions(folds in prop::collection::vec(0usize..5, 5..60), val in 0usize..5) {
            let mut rows: Vec<Row> = folds.iter().enumerate().map(|(i, &f)| Row(i, f)).collect();
            for f in 0..5 {
                rows.push(Row(1000 + f, f));
            }
            let (train, v) = kfold_split(&rows, val).unwrap();
            prop_assert_eq!(train.len() + v.len(), rows.len());
            let mut ids: Vec<usize> = train.iter().chain(&v).map(|r| r.0).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), rows.len());
            prop_assert!(v.iter().all(|r| r.1 == val) && train.iter().all(|r| r.1 != val));
        }
    }
}
