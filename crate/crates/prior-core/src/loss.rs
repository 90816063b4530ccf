//! Per-token loss weighting.
//!
//! The training objective reweights each caption token's negative
//! log-likelihood by how surprising the token is to a text-only reference
//! model: `w_i = (1 - p_r(t_i | t_<i))^alpha`. Weights are normalized per
//! caption to sum to its token count `k`, which keeps the weighted loss on
//! the same scale as the plain sum of NLLs. An equivalent self-normalized
//! form (weights summing to 1) is provided as well; with `alpha = 1` the
//! k-scaled loss is exactly `k` times the self-normalized one.
//!
//! All losses are in nats. Everything here is pure and safe to call
//! concurrently.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Reference probabilities are clamped into `[EPSILON, 1 - EPSILON]` when
/// stored, which keeps every raw weight strictly positive.
pub const EPSILON: f64 = 1e-6;

/// Per-token negative log-likelihoods for one caption, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenNlls(Vec<f64>);

impl TokenNlls {
    /// May be empty (a fully masked caption produces no losses); ops that
    /// need at least one token check for themselves.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "token NLL at index {i} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(TokenNlls(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Clamped text-only reference probabilities for one caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceProbs {
    values: Vec<f64>,
    epsilon: f64,
}

impl ReferenceProbs {
    /// Clamp arbitrary probabilities into `[EPSILON, 1 - EPSILON]`.
    pub fn clamped(values: impl IntoIterator<Item = f64>) -> Self {
        ReferenceProbs {
            values: values.into_iter().map(clamp_prob).collect(),
            epsilon: EPSILON,
        }
    }

    /// Accept values that are already within the clamp bounds.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (i, &p) in values.iter().enumerate() {
            if !p.is_finite() || !(EPSILON..=1.0 - EPSILON).contains(&p) {
                return Err(Error::invalid(format!(
                    "reference probability at index {i} outside [{EPSILON}, {}]: {p}",
                    1.0 - EPSILON
                )));
            }
        }
        Ok(ReferenceProbs {
            values,
            epsilon: EPSILON,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPSILON, 1.0 - EPSILON)
}

/// Raw and per-caption-normalized importance weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    pub alpha: f64,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub k: usize,
}

/// Self-normalized weights: `tilde` sums to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsWeights {
    pub ratio: Vec<f64>,
    pub tilde: Vec<f64>,
}

/// Raw importance `w_i = (1 - p_i)^alpha`.
///
/// `alpha = 0` yields all ones exactly (`0^0 = 1` by definition here), so a
/// zero exponent degrades the weighted objective to the plain NTP loss
/// bit-for-bit. `alpha = 1` is computed as a plain subtraction for the same
/// exactness reason.
pub fn raw_importance(p_ref: &ReferenceProbs, alpha: f64) -> Result<Vec<f64>> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    let ps = p_ref.values();
    let w = if alpha == 0.0 {
        vec![1.0; ps.len()]
    } else if alpha == 1.0 {
        ps.iter().map(|&p| 1.0 - p).collect()
    } else {
        ps.iter().map(|&p| (1.0 - p).powf(alpha)).collect()
    };
    Ok(w)
}

/// Normalize raw weights per caption: `k * w_i / sum(w)` when `scale_by_k`,
/// plain `w_i / sum(w)` otherwise (the k-factor ablation). `alpha` is carried
/// along for bookkeeping only.
pub fn normalize_weights(raw: &[f64], alpha: f64, scale_by_k: bool) -> Result<ImportanceWeights> {
    if raw.is_empty() {
        return Err(Error::invalid("cannot normalize an empty weight vector"));
    }
    if let Some(&bad) = raw.iter().find(|&&w| !w.is_finite() || w < 0.0) {
        return Err(Error::invalid(format!(
            "raw weights must be finite and >= 0, got {bad}"
        )));
    }
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    let k = raw.len();
    let scale = if scale_by_k { k as f64 / sum } else { 1.0 / sum };
    let normalized = raw.iter().map(|&w| w * scale).collect();
    Ok(ImportanceWeights {
        alpha,
        raw: raw.to_vec(),
        normalized,
        k,
    })
}

/// Convenience: weights straight from reference probabilities.
pub fn importance_weights(
    p_ref: &ReferenceProbs,
    alpha: f64,
    scale_by_k: bool,
) -> Result<ImportanceWeights> {
    let raw = raw_importance(p_ref, alpha)?;
    normalize_weights(&raw, alpha, scale_by_k)
}

/// Plain next-token-prediction loss: the sum of per-token NLLs.
pub fn ntp_loss(nll: &TokenNlls) -> Result<f64> {
    if nll.is_empty() {
        return Err(Error::invalid("ntp_loss over an empty caption"));
    }
    Ok(nll.values().iter().sum())
}

/// Reweighted loss: `sum_i normalized_i * nll_i`.
pub fn prior_loss(nll: &TokenNlls, weights: &ImportanceWeights) -> Result<f64> {
    if nll.len() != weights.normalized.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} NLLs vs {} weights",
            nll.len(),
            weights.normalized.len()
        )));
    }
    if nll.is_empty() {
        return Err(Error::invalid("prior_loss over an empty caption"));
    }
    Ok(nll
        .values()
        .iter()
        .zip(&weights.normalized)
        .map(|(&l, &w)| w * l)
        .sum())
}

/// Per-token weight ratio, proportional form `(1 - p_i)`. The target and
/// data densities it derives from are conceptual and never materialized.
pub fn is_weight_ratio(p_ref: &ReferenceProbs) -> Vec<f64> {
    p_ref.values().iter().map(|&p| 1.0 - p).collect()
}

/// Self-normalize ratios into a proper distribution over the caption.
pub fn self_normalize(ratio: &[f64]) -> Result<IsWeights> {
    if ratio.is_empty() {
        return Err(Error::invalid("cannot self-normalize an empty ratio vector"));
    }
    let sum: f64 = ratio.iter().sum();
    if sum <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    let tilde = ratio.iter().map(|&r| r / sum).collect();
    Ok(IsWeights {
        ratio: ratio.to_vec(),
        tilde,
    })
}

/// Expected NLL under the self-normalized weights: `sum_i tilde_i * nll_i`.
pub fn is_loss(nll: &TokenNlls, weights: &IsWeights) -> Result<f64> {
    if nll.len() != weights.tilde.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} NLLs vs {} weights",
            nll.len(),
            weights.tilde.len()
        )));
    }
    if nll.is_empty() {
        return Err(Error::invalid("is_loss over an empty caption"));
    }
    Ok(nll
        .values()
        .iter()
        .zip(&weights.tilde)
        .map(|(&l, &w)| w * l)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(vals: &[f64]) -> ReferenceProbs {
        ReferenceProbs::clamped(vals.iter().copied())
    }

    fn nlls(vals: &[f64]) -> TokenNlls {
        TokenNlls::new(vals.to_vec()).unwrap()
    }

    #[test]
    fn raw_importance_direct_substitution() {
        let w = raw_importance(&probs(&[0.9, 0.1, 0.5]), 1.0).unwrap();
        for (got, want) in w.iter().zip([0.1, 0.9, 0.5]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn raw_importance_squares() {
        let w = raw_importance(&probs(&[0.5]), 2.0).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn raw_importance_zero_alpha_is_all_ones() {
        let w = raw_importance(&probs(&[0.3, 0.8]), 0.0).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
    }

    #[test]
    fn raw_importance_rejects_negative_alpha() {
        assert!(matches!(
            raw_importance(&probs(&[0.5]), -1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn normalize_scales_by_k() {
        // sum = 1.5, k = 3
        let w = normalize_weights(&[0.1, 0.9, 0.5], 1.0, true).unwrap();
        for (got, want) in w.normalized.iter().zip([0.2, 1.8, 1.0]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert_eq!(w.k, 3);
    }

    #[test]
    fn normalize_constant_weights_are_ones() {
        for c in [0.2, 1.0, 37.5] {
            let w = normalize_weights(&[c, c, c], 1.0, true).unwrap();
            for &v in &w.normalized {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_without_k() {
        let w = normalize_weights(&[0.5, 0.5, 1.0], 1.0, false).unwrap();
        for (got, want) in w.normalized.iter().zip([0.25, 0.25, 0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_all_zero() {
        assert!(matches!(
            normalize_weights(&[0.0, 0.0], 1.0, true),
            Err(Error::DegenerateWeights)
        ));
    }

    #[test]
    fn ntp_loss_sums() {
        let l = ntp_loss(&nlls(&[0.5f64.ln().abs(), 0.25f64.ln().abs()])).unwrap();
        assert!((l - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        // the rounded-literal variant
        let l = ntp_loss(&nlls(&[0.6931, 1.3863])).unwrap();
        assert!((l - 2.0794).abs() < 1e-9);
    }

    #[test]
    fn ntp_loss_edge_cases() {
        assert_eq!(ntp_loss(&nlls(&[0.0])).unwrap(), 0.0);
        assert_eq!(ntp_loss(&nlls(&[2.75])).unwrap(), 2.75);
        assert!(ntp_loss(&nlls(&[])).is_err());
    }

    #[test]
    fn prior_loss_dot_product() {
        let w = ImportanceWeights {
            alpha: 1.0,
            raw: vec![0.0, 0.0],
            normalized: vec![1.2, 0.8],
            k: 2,
        };
        let l = prior_loss(&nlls(&[0.6931, 1.3863]), &w).unwrap();
        assert!((l - 1.94076).abs() < 1e-9, "{l}");
    }

    #[test]
    fn prior_loss_uniform_weights_equal_ntp() {
        let p = probs(&[0.4, 0.4, 0.4]);
        let w = importance_weights(&p, 1.0, true).unwrap();
        let n = nlls(&[0.3, 1.1, 0.7]);
        let lp = prior_loss(&n, &w).unwrap();
        let ln = ntp_loss(&n).unwrap();
        assert!((lp - ln).abs() / ln < 1e-12);
    }

    #[test]
    fn prior_loss_zero_nll_is_zero() {
        let w = importance_weights(&probs(&[0.1, 0.5, 0.9]), 2.0, true).unwrap();
        assert_eq!(prior_loss(&nlls(&[0.0, 0.0, 0.0]), &w).unwrap(), 0.0);
    }

    #[test]
    fn prior_loss_rejects_length_mismatch() {
        let w = importance_weights(&probs(&[0.1, 0.5]), 1.0, true).unwrap();
        assert!(prior_loss(&nlls(&[1.0]), &w).is_err());
    }

    #[test]
    fn alpha_zero_equals_ntp_bitwise() {
        let p = probs(&[0.11, 0.87, 0.42, 0.9999999]);
        let w = importance_weights(&p, 0.0, true).unwrap();
        assert_eq!(w.normalized, vec![1.0, 1.0, 1.0, 1.0]);
        let n = nlls(&[0.31, 4.2, 0.001, 2.0]);
        // every weight is exactly 1.0, so the products are exact
        assert_eq!(prior_loss(&n, &w).unwrap(), ntp_loss(&n).unwrap());
    }

    #[test]
    fn ratio_examples() {
        let r = is_weight_ratio(&probs(&[0.3]));
        assert!((r[0] - 0.7).abs() < 1e-12);
        let r = is_weight_ratio(&probs(&[1.0 - EPSILON]));
        assert!((r[0] - EPSILON).abs() < 1e-16);
        let r = is_weight_ratio(&probs(&[0.5, 0.5]));
        assert_eq!(r[0], r[1]);
    }

    #[test]
    fn self_normalize_examples() {
        let w = self_normalize(&[0.5, 0.5, 1.0]).unwrap();
        for (got, want) in w.tilde.iter().zip([0.25, 0.25, 0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(self_normalize(&[1.0]).unwrap().tilde, vec![1.0]);
        let w = self_normalize(&[0.4; 5]).unwrap();
        for &v in &w.tilde {
            assert!((v - 0.2).abs() < 1e-12);
        }
        assert!(matches!(
            self_normalize(&[0.0, 0.0]),
            Err(Error::DegenerateWeights)
        ));
    }

    #[test]
    fn is_loss_dot_product() {
        let w = IsWeights {
            ratio: vec![],
            tilde: vec![0.6, 0.4],
        };
        let mut w = w;
        w.ratio = vec![0.6, 0.4];
        let l = is_loss(&nlls(&[0.6931, 1.3863]), &w).unwrap();
        assert!((l - 0.97038).abs() < 1e-9, "{l}");
        let w1 = IsWeights {
            ratio: vec![1.0],
            tilde: vec![1.0],
        };
        assert_eq!(is_loss(&nlls(&[2.0]), &w1).unwrap(), 2.0);
    }

    #[test]
    fn prior_equals_k_times_is_loss_at_alpha_one() {
        let mut rng = crate::rng::DetRng::from_seed(42);
        for _ in 0..1000 {
            let k = 1 + rng.below(40) as usize;
            let ps: Vec<f64> = (0..k).map(|_| rng.next_f64()).collect();
            let ls: Vec<f64> = (0..k).map(|_| 8.0 * rng.next_f64()).collect();
            let p = ReferenceProbs::clamped(ps);
            let n = TokenNlls::new(ls).unwrap();

            let w = importance_weights(&p, 1.0, true).unwrap();
            let lp = prior_loss(&n, &w).unwrap();

            let tilde = self_normalize(&is_weight_ratio(&p)).unwrap();
            let lis = is_loss(&n, &tilde).unwrap();

            let denom = lp.abs().max(1e-300);
            assert!(
                (lp - k as f64 * lis).abs() / denom < 1e-12,
                "k={k} lp={lp} k*lis={}",
                k as f64 * lis
            );
        }
    }

    #[test]
    fn normalized_weights_sum_to_k() {
        let mut rng = crate::rng::DetRng::from_seed(17);
        for _ in 0..1000 {
            let k = 1 + rng.below(60) as usize;
            let ps: Vec<f64> = (0..k).map(|_| rng.next_f64()).collect();
            let w = importance_weights(&ReferenceProbs::clamped(ps), 1.5, true).unwrap();
            let sum: f64 = w.normalized.iter().sum();
            assert!((sum - k as f64).abs() < 1e-9, "sum {sum} vs k {k}");
        }
    }
}
