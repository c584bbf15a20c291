use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::kruskal_wallis_bonferroni;
use super::train::{train, RunResult, TrainConfig};
use crate::data::{kfold_split, Sample};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};

/// A run that errored; recorded instead of aborting the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub config: String,
    pub fold: usize,
    pub seed: u64,
    pub error: String,
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub n_runs: usize,
    pub mean_mse: f64,
    /// Sample standard deviation over runs; zero for a single run.
    pub std_mse: f64,
    /// `100 (base − cfg) / base`; positive means better than the baseline.
    pub pct_delta: Option<f64>,
    pub h_statistic: Option<f64>,
    pub p_raw: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub significant: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Aggregates runs per configuration in `order`. Each non-baseline row is
/// tested against the baseline's runs with Bonferroni over the number of
/// non-baseline rows present.
pub fn summarize(order: &[String], runs: &[RunResult], failures: Vec<RunFailure>) -> Result<AblationReport> {
    let baseline = Variant::BASELINE.to_string();
    let per_config: Vec<Vec<f64>> = order
        .iter()
        .map(|c| runs.iter().filter(|r| &r.config == c).map(|r| r.mse).collect())
        .collect();
    let base_runs = order
        .iter()
        .position(|c| *c == baseline)
        .map(|i| per_config[i].clone())
        .filter(|v| !v.is_empty());
    let comparisons = order.iter().filter(|c| **c != baseline).count().max(1);
    let base_mean = base_runs.as_ref().map(|v| mean_std(v).0);
    let mut rows = Vec::new();
    for (config, mses) in order.iter().zip(&per_config) {
        if mses.is_empty() {
            continue;
        }
        let (mean, std) = mean_std(mses);
        let is_base = *config == baseline;
        let test = match (&base_runs, is_base) {
            (Some(base), false) => Some(kruskal_wallis_bonferroni(&[base.clone(), mses.clone()], comparisons)?),
            _ => None,
        };
        rows.push(AblationRow {
            config: config.clone(),
            n_runs: mses.len(),
            mean_mse: mean,
            std_mse: std,
            pct_delta: base_mean.map(|b| if is_base { 0.0 } else { 100.0 * (b - mean) / b }),
            h_statistic: test.map(|t| t.h),
            p_raw: test.map(|t| t.p_raw),
            p_adjusted: test.map(|t| t.p_adjusted),
            significant: test.map(|t| t.p_adjusted < SIGNIFICANCE_LEVEL),
        });
    }
    Ok(AblationReport {
        rows,
        runs: runs.to_vec(),
        failures,
    })
}

/// Worker count from `CPPAP_THREADS`, falling back to the number of cores.
pub fn worker_threads() -> usize {
    std::env::var("CPPAP_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains every (variant, fold, seed) combination and aggregates the
/// validation MSEs. Runs execute on `threads` workers; results are sorted
/// by (variant order, fold, seed) so completion order never matters.
pub fn run_ablation(
    samples: &[Sample],
    base: &ModelConfig,
    variants: &[Variant],
    folds: &[usize],
    seeds: &[u64],
    tc: &TrainConfig,
    threads: usize,
) -> Result<AblationReport> {
    if variants.is_empty() || folds.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one config, fold and seed".into()));
    }
    tc.validate()?;
    let splits = folds
        .iter()
        .map(|&f| kfold_split(samples, f))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        for (fi, &fold) in folds.iter().enumerate() {
            for &seed in seeds {
                jobs.push((vi, *v, fi, fold, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut outcomes: Vec<_> = pool.install(|| {
        jobs.par_iter()
            .map(|&(vi, v, fi, fold, seed)| {
                let config = base.clone().with_variant(v);
                let (tr, va) = &splits[fi];
                let out = train(&config, tr, va, seed, fold, tc).map(|(r, _)| r);
                if let Err(e) = &out {
                    log::warn!("{v} fold {fold} seed {seed} failed: {e}");
                }
                ((vi, fold, seed), v, out)
            })
            .collect()
    });
    outcomes.sort_by_key(|o| o.0);
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for ((_, fold, seed), v, out) in outcomes {
        match out {
            Ok(r) => runs.push(r),
            Err(e) => failures.push(RunFailure {
                config: v.to_string(),
                fold,
                seed,
                error: e.to_string(),
            }),
        }
    }
    let order: Vec<String> = variants.iter().map(Variant::to_string).collect();
    summarize(&order, &runs, failures)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;

    fn run(config: &str, fold: usize, seed: u64, mse: f64) -> RunResult {
        RunResult {
            config: config.into(),
            fold,
            seed,
            mse,
            epochs_run: 1,
            best_epoch: 1,
            curve: vec![],
        }
    }

    #[test]
    fn percent_delta_sign_convention() {
        let runs = vec![run("baseline", 0, 1, 0.1217), run("ip-iv-mf", 0, 1, 0.1183)];
        let order = vec!["baseline".to_string(), "ip-iv-mf".to_string()];
        let rep = summarize(&order, &runs, vec![]).unwrap();
        assert_eq!(rep.rows[0].pct_delta, Some(0.0));
        assert_eq!(rep.rows[0].p_adjusted, None);
        let d = rep.rows[1].pct_delta.unwrap();
        assert!((d - 2.8).abs() < 0.01, "{d}");
    }

    #[test]
    fn aggregation_matches_brute_force() {
        let mut runs = Vec::new();
        for (i, c) in ["baseline", "ip-ev-lf", "ep-iv-ef"].iter().enumerate() {
            for s in 0..4u64 {
                runs.push(run(c, (s % 2) as usize, s, 0.1 + 0.01 * i as f64 + 0.003 * s as f64));
            }
        }
        let order: Vec<String> = ["baseline", "ip-ev-lf", "ep-iv-ef"].iter().map(|s| s.to_string()).collect();
        let rep = summarize(&order, &runs, vec![]).unwrap();
        for row in &rep.rows {
            let v: Vec<f64> = runs.iter().filter(|r| r.config == row.config).map(|r| r.mse).collect();
            let m = v.iter().sum::<f64>() / 4.0;
            let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0).sqrt();
            assert!((row.mean_mse - m).abs() < 1e-15 && (row.std_mse - sd).abs() < 1e-15);
        }
        // two non-baseline rows → two comparisons
        let kw = kruskal_wallis_bonferroni(&[runs[0..4].iter().map(|r| r.mse).collect(), runs[4..8].iter().map(|r| r.mse).collect()], 2).unwrap();
        assert_eq!(rep.rows[1].p_adjusted, Some(kw.p_adjusted));
    }

    #[test]
    fn reduced_grid_smoke() {
        let d = generate_synthetic_dataset(30, 9, &ModelConfig::miniature()).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 2,
            patience: 5,
        };
        let variants: Vec<Variant> = vec![Variant::BASELINE, "ip-ev-lf".parse().unwrap()];
        let rep = run_ablation(&d.samples, &ModelConfig::miniature(), &variants, &[0, 1], &[1, 2], &tc, 2).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert_eq!(rep.runs.len(), 8);
        assert!(rep.failures.is_empty());
        let keys: Vec<_> = rep.runs.iter().map(|r| (r.config.clone(), r.fold, r.seed)).collect();
        assert_eq!(keys[0], ("baseline".to_string(), 0, 1));
        assert_eq!(keys[7], ("ip-ev-lf".to_string(), 1, 2));
        let single = run_ablation(&d.samples, &ModelConfig::miniature(), &variants, &[0, 1], &[1, 2], &tc, 1).unwrap();
        assert_eq!(single, rep);
    }

    #[test]
    fn failed_runs_are_recorded() {
        let d = generate_synthetic_dataset(20, 9, &ModelConfig::miniature()).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e300,
            batch_size: 4,
            max_epochs: 2,
            patience: 5,
        };
        let rep = run_ablation(&d.samples, &ModelConfig::miniature(), &[Variant::BASELINE], &[0], &[1], &tc, 1).unwrap();
        assert_eq!(rep.failures.len(), 1);
        assert!(rep.rows.is_empty());
    }
}
