use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
}

/// Midranks (1-based) of `values`, plus the tie-correction sum Σ(t³ − t).
fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

/// Kruskal–Wallis H test with tie correction and a chi-square p-value on
/// `groups − 1` degrees of freedom; the adjusted p-value is the Bonferroni
/// `min(1, p · num_comparisons)`.
pub fn kruskal_wallis_bonferroni(groups: &[Vec<f64>], num_comparisons: usize) -> Result<KruskalWallis> {
    if groups.len() < 2 {
        return Err(Error::Input("Kruskal-Wallis needs at least two groups".into()));
    }
    if groups.iter().any(Vec::is_empty) {
        return Err(Error::Input("Kruskal-Wallis groups must be nonempty".into()));
    }
    if num_comparisons == 0 {
        return Err(Error::Input("number of comparisons must be positive".into()));
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Kruskal-Wallis input".into()));
    }
    let n = pooled.len() as f64;
    let (ranks, ties) = midranks(&pooled);
    let correction = 1.0 - ties / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(KruskalWallis { h: 0.0, p_raw: 1.0, p_adjusted: 1.0 });
    }
    let mut offset = 0;
    let mut sum = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        sum += r * r / g.len() as f64;
        offset += g.len();
    }
    let h = ((12.0 / (n * (n + 1.0)) * sum - 3.0 * (n + 1.0)) / correction).max(0.0);
    let chi = ChiSquared::new((groups.len() - 1) as f64).map_err(|e| Error::Input(e.to_string()))?;
    let p_raw = chi.sf(h).clamp(0.0, 1.0);
    Ok(KruskalWallis {
        h,
        p_raw,
        p_adjusted: (p_raw * num_comparisons as f64).min(1.0),
    })
}

/// Bonferroni adjustment on its own.
pub fn bonferroni(p: f64, num_comparisons: usize) -> f64 {
    (p * num_comparisons as f64).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn separated_groups() {
        // R = 6 and 15, N = 6: 12/42 · (36/3 + 225/3) − 21 = 27/7
        let r = kruskal_wallis_bonferroni(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]], 1).unwrap();
        assert!((r.h - 27.0 / 7.0).abs() < 1e-12);
        // chi-square(1) survival at 27/7
        assert!((r.p_raw - 0.04953461343562649).abs() < 1e-9, "{}", r.p_raw);
    }

    #[test]
    fn identical_groups() {
        let r = kruskal_wallis_bonferroni(&[vec![2.0; 4], vec![2.0; 3]], 9).unwrap();
        assert_eq!((r.h, r.p_raw, r.p_adjusted), (0.0, 1.0, 1.0));
    }

    #[test]
    fn tie_correction_oracle() {
        // groups [1,1,2] and [2,3,3]: midranks 1.5,1.5,3.5 | 3.5,5.5,5.5
        let r = kruskal_wallis_bonferroni(&[vec![1.0, 1.0, 2.0], vec![2.0, 3.0, 3.0]], 1).unwrap();
        let raw = 12.0 / 42.0 * (6.5f64.powi(2) / 3.0 + 14.5f64.powi(2) / 3.0) - 21.0;
        let c = 1.0 - 18.0 / 210.0;
        assert!((r.h - raw / c).abs() < 1e-12);
    }

    #[test]
    fn bonferroni_clamps() {
        assert_eq!(bonferroni(0.2, 9), 1.0);
        assert!((bonferroni(0.004, 9) - 0.036).abs() < 1e-15);
    }

    #[test]
    fn invalid_inputs() {
        assert!(kruskal_wallis_bonferroni(&[vec![1.0]], 1).is_err());
        assert!(kruskal_wallis_bonferroni(&[vec![1.0], vec![]], 1).is_err());
    }

    proptest! {
        #[test]
        fn h_is_rank_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 1..8),
            b in prop::collection::vec(-5.0f64..5.0, 1..8),
        ) {
            let r1 = kruskal_wallis_bonferroni(&[a.clone(), b.clone()], 1).unwrap();
            let t = |v: &Vec<f64>| v.iter().map(|x| (x / 2.0).exp() * 3.0 + 1.0).collect::<Vec<_>>();
            let r2 = kruskal_wallis_bonferroni(&[t(&a), t(&b)], 1).unwrap();
            prop_assert!((r1.h - r2.h).abs() < 1e-9);
            prop_assert!(r1.h >= 0.0 && (0.0..=1.0).contains(&r1.p_raw));
        }
    }
}
