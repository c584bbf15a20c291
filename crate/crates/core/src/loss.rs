//! Gaussian negative log-likelihood objective and the point-estimate MSE.

use crate::error::{Error, Result};
use crate::model::{Fusion, ModelPrediction, PredictedDistribution};

fn check_batch(len: usize, labels: &[f64]) -> Result<()> {
    if len == 0 {
        return Err(Error::dim("loss needs at least one sample"));
    }
    if len != labels.len() {
        return Err(Error::dim(format!(
            "{len} predictions but {} labels",
            labels.len()
        )));
    }
    Ok(())
}

/// `J = (1/K) Σ ((y − μ̂)/σ̂)²/2 + log σ̂` over `(μ̂, log σ̂)` pairs.
pub(crate) fn probabilistic_loss_raw(pairs: &[(f64, f64)], labels: &[f64]) -> Result<f64> {
    check_batch(pairs.len(), labels)?;
    let k = pairs.len() as f64;
    let mut total = 0.0;
    for (&(mu, log_sigma), &y) in pairs.iter().zip(labels) {
        if !(mu.is_finite() && log_sigma.is_finite() && y.is_finite()) {
            return Err(Error::NonFinite("probabilistic loss inputs".into()));
        }
        let z = (y - mu) * (-log_sigma).exp();
        total += 0.5 * z * z + log_sigma;
    }
    let j = total / k;
    if !j.is_finite() {
        return Err(Error::NonFinite("probabilistic loss".into()));
    }
    Ok(j)
}

/// Closed-form `(∂J/∂μ̂_k, ∂J/∂log σ̂_k)`.
pub(crate) fn probabilistic_loss_grad(pairs: &[(f64, f64)], labels: &[f64]) -> Vec<(f64, f64)> {
    let k = pairs.len() as f64;
    pairs
        .iter()
        .zip(labels)
        .map(|(&(mu, log_sigma), &y)| {
            let inv_var = (-2.0 * log_sigma).exp();
            let d_mu = -(y - mu) * inv_var / k;
            let d_log_sigma = (1.0 - (y - mu) * (y - mu) * inv_var) / k;
            (d_mu, d_log_sigma)
        })
        .collect()
}

/// Mean Gaussian negative log-likelihood of `labels` under `predictions`.
pub fn probabilistic_loss(predictions: &[PredictedDistribution], labels: &[f64]) -> Result<f64> {
    let pairs: Vec<_> = predictions.iter().map(|p| (p.mu, p.log_sigma)).collect();
    probabilistic_loss_raw(&pairs, labels)
}

/// Gradients of [`probabilistic_loss`] with respect to each `(μ̂, log σ̂)`.
pub fn probabilistic_loss_gradient(
    predictions: &[PredictedDistribution],
    labels: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let pairs: Vec<_> = predictions.iter().map(|p| (p.mu, p.log_sigma)).collect();
    probabilistic_loss_raw(&pairs, labels)?;
    Ok(probabilistic_loss_grad(&pairs, labels))
}

/// Squared-error MSE of the point estimate: the trunk mean for early and
/// mid-level fusion, the adapted mean for late fusion. No clamping.
pub fn mse(predictions: &[ModelPrediction], labels: &[f64], fusion: Fusion) -> Result<f64> {
    check_batch(predictions.len(), labels)?;
    let mut total = 0.0;
    for (p, &y) in predictions.iter().zip(labels) {
        let d = y - p.point_estimate(fusion)?;
        total += d * d;
    }
    Ok(total / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pd(mu: f64, log_sigma: f64) -> PredictedDistribution {
        PredictedDistribution { mu, log_sigma }
    }

    fn mp(mu: f64) -> ModelPrediction {
        ModelPrediction {
            trunk: pd(mu, 0.0),
            adapted: None,
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(probabilistic_loss(&[pd(0.3, 0.0)], &[0.3]).unwrap(), 0.0);
        assert_eq!(probabilistic_loss(&[pd(0.0, 0.0)], &[1.0]).unwrap(), 0.5);
        let j = probabilistic_loss(&[pd(0.0, 0.0), pd(0.0, 1.0)], &[0.0, 0.0]).unwrap();
        assert!((j - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn loss_rejects_non_finite_and_empty() {
        assert!(matches!(
            probabilistic_loss(&[pd(0.0, f64::INFINITY)], &[0.0]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(probabilistic_loss(&[], &[]), Err(Error::Dimension(_))));
    }

    #[test]
    fn loss_grows_with_log_sigma_at_exact_mean() {
        let at = |s| probabilistic_loss(&[pd(0.2, s)], &[0.2]).unwrap();
        assert!(at(0.0) < at(1.0));
        assert!(at(-3.0) < at(0.0));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[mp(0.1), mp(-0.4)], &[0.1, -0.4], Fusion::Early).unwrap(), 0.0);
        assert_eq!(mse(&[mp(0.0), mp(0.0)], &[1.0, -1.0], Fusion::Mid).unwrap(), 1.0);

        let mus = [0.1, -0.3, 0.7, 0.0, 0.25];
        let ys = [0.2, -0.1, 0.5, -0.6, 0.25];
        let preds: Vec<_> = mus.iter().map(|&m| mp(m)).collect();
        let brute: f64 = mus.iter().zip(&ys).map(|(m, y)| (y - m) * (y - m)).sum::<f64>() / 5.0;
        assert!((mse(&preds, &ys, Fusion::Early).unwrap() - brute).abs() < 1e-15);
    }

    #[test]
    fn mse_uses_adapted_mean_for_late_fusion() {
        let p = ModelPrediction {
            trunk: pd(0.0, 0.0),
            adapted: Some(pd(0.5, 0.0)),
        };
        assert_eq!(mse(&[p], &[0.5], Fusion::Late).unwrap(), 0.0);
        assert_eq!(mse(&[p], &[0.5], Fusion::Mid).unwrap(), 0.25);
        assert!(mse(&[mp(0.0)], &[0.0], Fusion::Late).is_err());
    }

    proptest! {
        #[test]
        fn closed_form_gradient_matches_central_differences(
            rows in prop::collection::vec((-1.0f64..1.0, -1.5f64..1.5, -1.0f64..1.0), 1..6)
        ) {
            let preds: Vec<_> = rows.iter().map(|&(m, s, _)| pd(m, s)).collect();
            let ys: Vec<_> = rows.iter().map(|r| r.2).collect();
            let grads = probabilistic_loss_gradient(&preds, &ys).unwrap();
            let h = 1e-6;
            for k in 0..preds.len() {
                for which in 0..2 {
                    let bump = |delta: f64| {
                        let mut p = preds.clone();
                        if which == 0 { p[k].mu += delta } else { p[k].log_sigma += delta }
                        probabilistic_loss(&p, &ys).unwrap()
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let an = if which == 0 { grads[k].0 } else { grads[k].1 };
                    prop_assert!((fd - an).abs() <= 1e-8, "fd {fd} vs analytic {an}");
                }
            }
        }

        #[test]
        fn mse_is_non_negative_and_zero_iff_exact(
            rows in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..10)
        ) {
            let preds: Vec<_> = rows.iter().map(|r| mp(r.0)).collect();
            let ys: Vec<_> = rows.iter().map(|r| r.1).collect();
            let v = mse(&preds, &ys, Fusion::Early).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, rows.iter().all(|r| r.0 == r.1));
            prop_assert_eq!(mse(&preds, &preds.iter().map(|p| p.trunk.mu).collect::<Vec<_>>(), Fusion::Early).unwrap(), 0.0);
        }
    }
}
