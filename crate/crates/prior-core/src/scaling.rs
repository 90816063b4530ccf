//! Power-law fits over training-run logs: `L(D) = (D / D_c)^a` fitted by
//! closed-form least squares in log-log space, plus relative prediction
//! error at a held-out point and a two-objective comparison.

use crate::error::{Error, Result};
use crate::trainer::RunRecord;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    /// Tokens seen.
    pub d: f64,
    /// Metric value; must be positive for the log-space fit.
    pub l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// Exponent; higher means the metric grows faster with data.
    pub alpha_d: f64,
    /// Scale constant in tokens; the D at which the fitted metric is 1.
    /// Absent for a degenerate (flat) fit.
    pub d_c: Option<f64>,
    pub rmse_log: f64,
    pub n_points: usize,
    pub degenerate: bool,
}

/// Which run-log column feeds the fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMetric {
    AttrAcc,
    OverallNll,
}

impl std::str::FromStr for FitMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attr-acc" | "attr_acc" => Ok(FitMetric::AttrAcc),
            "nll" | "overall-nll" | "overall_nll" => Ok(FitMetric::OverallNll),
            other => Err(Error::invalid(format!("unknown fit metric '{other}'"))),
        }
    }
}

/// Extract (D, L) points from a run log.
pub fn points_from_records(records: &[RunRecord], metric: FitMetric) -> Vec<ScalingPoint> {
    records
        .iter()
        .map(|r| ScalingPoint {
            d: r.tokens_seen as f64,
            l: match metric {
                FitMetric::AttrAcc => r.attr_acc,
                FitMetric::OverallNll => r.overall_nll,
            },
        })
        .collect()
}

/// Least squares on `ln L = alpha * (ln D - ln D_c)`.
pub fn fit_power_law(points: &[ScalingPoint]) -> Result<ScalingFit> {
    if points.len() < 2 {
        return Err(Error::invalid("power-law fit needs at least 2 points"));
    }
    for (i, p) in points.iter().enumerate() {
        if !(p.d > 0.0) || !p.d.is_finite() {
            return Err(Error::invalid(format!(
                "point {i} has non-positive D = {}",
                p.d
            )));
        }
        if !(p.l > 0.0) || !p.l.is_finite() {
            return Err(Error::invalid(format!(
                "point {i} has non-positive L = {} (log-space fit impossible)",
                p.l
            )));
        }
    }
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|p| (p.d.ln(), p.l.ln())).collect();
    let mean_x = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in &logs {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(Error::RankDeficient(
            "all points share one D value".into(),
        ));
    }
    let alpha = sxy / sxx;
    let intercept = mean_y - alpha * mean_x;

    let mut sse = 0.0;
    for &(x, y) in &logs {
        let resid = y - (alpha * x + intercept);
        sse += resid * resid;
    }
    let rmse_log = (sse / n).sqrt();

    // flat data: exponent 0 leaves D_c unidentifiable
    if alpha == 0.0 {
        return Ok(ScalingFit {
            alpha_d: 0.0,
            d_c: None,
            rmse_log,
            n_points: points.len(),
            degenerate: true,
        });
    }
    Ok(ScalingFit {
        alpha_d: alpha,
        d_c: Some((-intercept / alpha).exp()),
        rmse_log,
        n_points: points.len(),
        degenerate: false,
    })
}

/// Evaluate a fitted law at `d`.
pub fn predict(fit: &ScalingFit, d: f64) -> Result<f64> {
    if fit.degenerate {
        return Err(Error::InvalidState(
            "cannot predict from a degenerate (flat) fit".into(),
        ));
    }
    if !(d > 0.0) {
        return Err(Error::invalid("prediction point D must be positive"));
    }
    let d_c = fit.d_c.expect("non-degenerate fit has a scale");
    Ok((d / d_c).powf(fit.alpha_d))
}

/// `|predicted - actual| / actual`.
pub fn relative_prediction_error(predicted: f64, actual: f64) -> Result<f64> {
    if actual == 0.0 {
        return Err(Error::invalid("actual value must be nonzero"));
    }
    Ok((predicted - actual).abs() / actual)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub fit: ScalingFit,
    pub holdout_d: f64,
    pub predicted: f64,
    pub actual: f64,
    pub relative_error: f64,
}

/// Fit one objective's log on points strictly below `holdout_d` and measure
/// the extrapolation error at `holdout_d` (which must be a logged point).
pub fn compare_run(points: &[ScalingPoint], holdout_d: f64) -> Result<RunComparison> {
    let train: Vec<ScalingPoint> = points.iter().filter(|p| p.d < holdout_d).copied().collect();
    if train.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 points below holdout D = {holdout_d}, found {}",
            train.len()
        )));
    }
    let actual = points
        .iter()
        .find(|p| p.d == holdout_d)
        .ok_or_else(|| {
            Error::invalid(format!("no logged point at holdout D = {holdout_d}"))
        })?
        .l;
    let fit = fit_power_law(&train)?;
    let predicted = predict(&fit, holdout_d)?;
    let relative_error = relative_prediction_error(predicted, actual)?;
    Ok(RunComparison {
        fit,
        holdout_d,
        predicted,
        actual,
        relative_error,
    })
}

/// Side-by-side fits of two objectives' logs at a shared held-out point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub metric: FitMetric,
    pub holdout_d: f64,
    pub ntp: RunComparison,
    pub prior: RunComparison,
}

pub fn compare_runs(
    ntp_records: &[RunRecord],
    prior_records: &[RunRecord],
    metric: FitMetric,
    holdout_d: f64,
) -> Result<ScalingReport> {
    let ntp = compare_run(&points_from_records(ntp_records, metric), holdout_d)?;
    let prior = compare_run(&points_from_records(prior_records, metric), holdout_d)?;
    Ok(ScalingReport {
        metric,
        holdout_d,
        ntp,
        prior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn law_points(alpha: f64, d_c: f64, ds: &[f64]) -> Vec<ScalingPoint> {
        ds.iter()
            .map(|&d| ScalingPoint {
                d,
                l: (d / d_c).powf(alpha),
            })
            .collect()
    }

    #[test]
    fn exact_recovery_on_noiseless_points() {
        let points = law_points(0.3, 100.0, &[1e3, 1e4, 1e5]);
        // sanity on the constructed values
        assert!((points[0].l - 1.9952623149688795).abs() < 1e-12);
        assert!((points[1].l - 3.9810717055349722).abs() < 1e-12);
        assert!((points[2].l - 7.943282347242816).abs() < 1e-12);
        let fit = fit_power_law(&points).unwrap();
        assert!((fit.alpha_d - 0.3).abs() < 1e-6, "alpha {}", fit.alpha_d);
        assert!((fit.d_c.unwrap() - 100.0).abs() / 100.0 < 1e-6);
        assert!(fit.rmse_log < 1e-12);
    }

    #[test]
    fn two_points_interpolate_exactly() {
        let points = law_points(0.7, 42.0, &[10.0, 1000.0]);
        let fit = fit_power_law(&points).unwrap();
        assert!(fit.rmse_log < 1e-12);
        assert!((fit.alpha_d - 0.7).abs() < 1e-9);
    }

    #[test]
    fn flat_data_is_degenerate() {
        let points = vec![
            ScalingPoint { d: 10.0, l: 2.0 },
            ScalingPoint { d: 100.0, l: 2.0 },
            ScalingPoint { d: 1000.0, l: 2.0 },
        ];
        let fit = fit_power_law(&points).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.alpha_d, 0.0);
        assert!(fit.d_c.is_none());
        assert!(matches!(
            predict(&fit, 500.0),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(fit_power_law(&[ScalingPoint { d: 1.0, l: 1.0 }]).is_err());
        let nonpos = vec![
            ScalingPoint { d: 10.0, l: 0.0 },
            ScalingPoint { d: 20.0, l: 1.0 },
        ];
        assert!(matches!(
            fit_power_law(&nonpos),
            Err(Error::InvalidArgument(_))
        ));
        let same_d = vec![
            ScalingPoint { d: 10.0, l: 1.0 },
            ScalingPoint { d: 10.0, l: 2.0 },
        ];
        assert!(matches!(
            fit_power_law(&same_d),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn predict_examples() {
        let fit = ScalingFit {
            alpha_d: 0.3,
            d_c: Some(100.0),
            rmse_log: 0.0,
            n_points: 3,
            degenerate: false,
        };
        assert!((predict(&fit, 100.0).unwrap() - 1.0).abs() < 1e-12);
        let want = 10f64.powf(1.2);
        assert!((predict(&fit, 1e6).unwrap() - want).abs() < 1e-9);
        assert!((want - 15.8489).abs() < 1e-4);
    }

    #[test]
    fn relative_error_examples() {
        assert!((relative_prediction_error(55.0, 50.0).unwrap() - 0.10).abs() < 1e-12);
        assert_eq!(relative_prediction_error(50.0, 50.0).unwrap(), 0.0);
        assert!((relative_prediction_error(45.0, 50.0).unwrap() - 0.10).abs() < 1e-12);
        assert!(relative_prediction_error(1.0, 0.0).is_err());
    }

    #[test]
    fn noise_robustness_one_percent_lognormal() {
        let mut rng = DetRng::from_seed(404);
        let ds: Vec<f64> = (0..8).map(|i| 1e3 * 2f64.powi(i)).collect();
        let alpha = 0.45;
        for _ in 0..100 {
            let points: Vec<ScalingPoint> = law_points(alpha, 500.0, &ds)
                .into_iter()
                .map(|mut p| {
                    p.l *= (0.01 * rng.gauss(1.0)).exp();
                    p
                })
                .collect();
            let fit = fit_power_law(&points).unwrap();
            assert!(
                (fit.alpha_d - alpha).abs() / alpha < 0.05,
                "alpha {} strays from {alpha}",
                fit.alpha_d
            );
        }
    }

    #[test]
    fn scale_equivariance_in_d() {
        let points = law_points(0.6, 300.0, &[1e3, 3e3, 1e4, 3e4]);
        let fit = fit_power_law(&points).unwrap();
        for c in [2.0, 10.0, 0.5] {
            let scaled: Vec<ScalingPoint> = points
                .iter()
                .map(|p| ScalingPoint { d: c * p.d, l: p.l })
                .collect();
            let fit_c = fit_power_law(&scaled).unwrap();
            assert!((fit_c.alpha_d - fit.alpha_d).abs() < 1e-9);
            let want_dc = c * fit.d_c.unwrap();
            assert!(
                (fit_c.d_c.unwrap() - want_dc).abs() / want_dc < 1e-9,
                "D_c {} vs {want_dc}",
                fit_c.d_c.unwrap()
            );
        }
    }

    #[test]
    fn fit_is_permutation_invariant() {
        let mut points = law_points(0.25, 50.0, &[1e2, 1e3, 1e4, 1e5]);
        let fit_a = fit_power_law(&points).unwrap();
        points.reverse();
        points.swap(0, 2);
        let fit_b = fit_power_law(&points).unwrap();
        assert!((fit_a.alpha_d - fit_b.alpha_d).abs() < 1e-12);
        assert!((fit_a.d_c.unwrap() - fit_b.d_c.unwrap()).abs() < 1e-9);
    }

    fn record(step: u64, d: u64, acc: f64) -> RunRecord {
        RunRecord {
            step,
            tokens_seen: d,
            train_loss: 1.0,
            overall_nll: 2.0,
            related_nll: None,
            unrelated_nll: None,
            attr_acc: acc,
        }
    }

    #[test]
    fn compare_runs_identical_logs_symmetric() {
        let records: Vec<RunRecord> = [1000u64, 2000, 4000, 8000, 16000]
            .iter()
            .enumerate()
            .map(|(i, &d)| record(i as u64, d, (d as f64 / 500.0).powf(0.4)))
            .collect();
        let report =
            compare_runs(&records, &records, FitMetric::AttrAcc, 16000.0).unwrap();
        assert_eq!(report.ntp, report.prior);
        assert!(report.ntp.relative_error < 1e-9);
    }

    #[test]
    fn compare_runs_recovers_two_different_laws() {
        let ds = [1000u64, 2000, 4000, 8000, 16000];
        let ntp: Vec<RunRecord> = ds
            .iter()
            .enumerate()
            .map(|(i, &d)| record(i as u64, d, (d as f64 / 900.0).powf(0.25)))
            .collect();
        let prior: Vec<RunRecord> = ds
            .iter()
            .enumerate()
            .map(|(i, &d)| record(i as u64, d, (d as f64 / 700.0).powf(0.45)))
            .collect();
        let report = compare_runs(&ntp, &prior, FitMetric::AttrAcc, 16000.0).unwrap();
        assert!((report.ntp.fit.alpha_d - 0.25).abs() < 1e-6);
        assert!((report.prior.fit.alpha_d - 0.45).abs() < 1e-6);
        assert!(report.ntp.relative_error < 1e-9);
        assert!(report.prior.relative_error < 1e-9);
    }

    #[test]
    fn compare_runs_needs_enough_points() {
        let records: Vec<RunRecord> = [1000u64, 2000, 16000]
            .iter()
            .enumerate()
            .map(|(i, &d)| record(i as u64, d, 0.5))
            .collect();
        assert!(compare_runs(&records, &records, FitMetric::AttrAcc, 16000.0).is_err());
    }
}
