//! Two-stage evaluation: reject-or-classify decisions, ROC over the outlier
//! score, reliability of the surviving classifications, threshold selection,
//! and cross-trial aggregation with confidence intervals.
//!
//! Conventions: flagging an outlier is the detection event, so a false alarm
//! is an inlier flagged as outlier, and scores tied with the threshold
//! reject (`score >= tau` is Outlier).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::io::Write;
use std::path::Path;

/// Verdict for one test sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Outlier,
    /// Inlier with the predicted class, always `< K`.
    Inlier(usize),
}

/// First reject, then classify: `score >= tau` is Outlier, anything else is
/// an inlier classified by `class_fn`. Scores are outlier probabilities in
/// `[0, 1]`.
pub fn decide(score: f64, tau: f64, class_fn: impl FnOnce() -> usize) -> Decision {
    if score >= tau {
        Decision::Outlier
    } else {
        Decision::Inlier(class_fn())
    }
}

/// One ROC operating point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fa_rate: f64,
    pub detection_rate: f64,
}

/// ROC curve over the outlier score, ordered by increasing false alarm,
/// always containing the endpoints (0, 0) and (1, 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyInput(format!("{name} scores")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("{name} scores contain non-finite values")));
    }
    Ok(())
}

fn frac_at_or_above(sorted: &[f64], tau: f64) -> f64 {
    let below = sorted.partition_point(|s| *s < tau);
    (sorted.len() - below) as f64 / sorted.len() as f64
}

/// ROC by sweeping the threshold over every distinct observed score (plus an
/// above-everything endpoint), with AUC by the trapezoid rule. Trapezoid
/// tie handling makes the AUC equal the pairwise-comparison statistic
/// `(#(outlier > inlier) + tie/2) / (n_out * n_in)`.
pub fn roc(inlier_scores: &[f64], outlier_scores: &[f64]) -> Result<RocCurve> {
    check_scores("inlier", inlier_scores)?;
    check_scores("outlier", outlier_scores)?;

    let mut inl = inlier_scores.to_vec();
    let mut out = outlier_scores.to_vec();
    inl.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut thresholds: Vec<f64> = inl.iter().chain(out.iter()).cloned().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fa_rate: 0.0,
        detection_rate: 0.0,
    }];
    for tau in thresholds {
        points.push(RocPoint {
            threshold: tau,
            fa_rate: frac_at_or_above(&inl, tau),
            detection_rate: frac_at_or_above(&out, tau),
        });
    }

    let mut auc = 0.0;
    for w in points.windows(2) {
        auc += (w[1].fa_rate - w[0].fa_rate) * (w[0].detection_rate + w[1].detection_rate) / 2.0;
    }
    Ok(RocCurve { points, auc })
}

/// Reliability per the accepted-inlier accuracy rule: `acc = N_c / N_a`
/// where `N_a` counts inliers decided Inlier and `N_c` those with the
/// correct class; zero when nothing is accepted. Returns `(acc, n_a, n_c)`.
pub fn reliability(decisions: &[Decision], true_classes: &[usize]) -> Result<(f64, usize, usize)> {
    if decisions.len() != true_classes.len() {
        return Err(Error::dimension(
            "reliability classes",
            decisions.len(),
            true_classes.len(),
        ));
    }
    let mut n_a = 0;
    let mut n_c = 0;
    for (d, t) in decisions.iter().zip(true_classes) {
        if let Decision::Inlier(k) = d {
            n_a += 1;
            if k == t {
                n_c += 1;
            }
        }
    }
    let acc = if n_a >= 1 { n_c as f64 / n_a as f64 } else { 0.0 };
    Ok((acc, n_a, n_c))
}

/// Reliability at one operating point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReliabilityPoint {
    pub threshold: f64,
    pub fa_rate: f64,
    pub acc: f64,
    pub n_a: usize,
    pub n_c: usize,
}

/// Reliability as a function of the operating threshold, on labeled test
/// inliers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    pub points: Vec<ReliabilityPoint>,
}

/// Sweep reliability over `thresholds` (typically the matching ROC's
/// thresholds): at each `tau`, inliers scoring `>= tau` are rejected and the
/// rest judged by their predicted class.
pub fn reliability_curve(
    inlier_scores: &[f64],
    predicted: &[usize],
    true_classes: &[usize],
    thresholds: &[f64],
) -> Result<ReliabilityCurve> {
    check_scores("inlier", inlier_scores)?;
    if predicted.len() != inlier_scores.len() {
        return Err(Error::dimension("predictions", inlier_scores.len(), predicted.len()));
    }
    if true_classes.len() != inlier_scores.len() {
        return Err(Error::dimension("true classes", inlier_scores.len(), true_classes.len()));
    }
    let n = inlier_scores.len() as f64;
    let mut points = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let mut n_a = 0;
        let mut n_c = 0;
        let mut flagged = 0;
        for ((s, p), t) in inlier_scores.iter().zip(predicted).zip(true_classes) {
            if *s >= tau {
                flagged += 1;
            } else {
                n_a += 1;
                if p == t {
                    n_c += 1;
                }
            }
        }
        let acc = if n_a >= 1 { n_c as f64 / n_a as f64 } else { 0.0 };
        points.push(ReliabilityPoint {
            threshold: tau,
            fa_rate: flagged as f64 / n,
            acc,
            n_a,
            n_c,
        });
    }
    Ok(ReliabilityCurve { points })
}

/// Threshold that rejects at least the fraction `q` of the given outlier
/// scores: the smallest score among the top `ceil(q n)`, so the empirical
/// rejection fraction at the returned threshold is always `>= q`.
pub fn threshold_for_outlier_rejection(outlier_scores: &[f64], q: f64) -> Result<f64> {
    check_scores("outlier", outlier_scores)?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!(
            "target rejection fraction must be in (0, 1], got {q}"
        )));
    }
    let mut sorted = outlier_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let m = (q * sorted.len() as f64).ceil() as usize;
    Ok(sorted[m.clamp(1, sorted.len()) - 1])
}

/// A mean with its raw confidence interval. `lo`/`hi` may leave `[0, 1]`
/// with few trials; [`CiValue::clamped`] is for display.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CiValue {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl CiValue {
    pub fn clamped(&self) -> CiValue {
        CiValue {
            mean: self.mean,
            lo: self.lo.clamp(0.0, 1.0),
            hi: self.hi.clamp(0.0, 1.0),
        }
    }
}

/// Cross-trial aggregate: mean ROC and reliability curves on a fixed
/// false-alarm grid with pointwise confidence bands, mean AUC, and the mean
/// top classification rate at false alarm `<= 0.05`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialSummary {
    pub grid: Vec<f64>,
    pub detection_mean: Vec<f64>,
    pub detection_lo: Vec<f64>,
    pub detection_hi: Vec<f64>,
    pub acc_mean: Vec<f64>,
    pub acc_lo: Vec<f64>,
    pub acc_hi: Vec<f64>,
    pub auc: CiValue,
    pub top_rate: CiValue,
    pub trials: usize,
}

/// Evenly spaced false-alarm grid on [0, 1] (201 points).
pub fn default_fa_grid() -> Vec<f64> {
    (0..=200).map(|i| i as f64 / 200.0).collect()
}

/// Right-continuous step interpolation: the value at the last curve point
/// with `fa <= g`. Curves start at fa 0, so the lookup always lands.
fn step_value(fas: &[f64], ys: &[f64], g: f64) -> f64 {
    match fas.partition_point(|fa| *fa <= g) {
        0 => ys[0],
        i => ys[i - 1],
    }
}

fn mean_ci(values: &[f64], t_factor: f64) -> CiValue {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let hw = t_factor * (var / n).sqrt();
    CiValue {
        mean,
        lo: mean - hw,
        hi: mean + hw,
    }
}

/// Quantile of Student's t with `df` degrees of freedom.
fn t_quantile(df: f64, p: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df)
        .expect("df >= 1")
        .inverse_cdf(p)
}

/// Vertical averaging across trials: each curve is step-interpolated onto
/// `grid`, then each grid point gets `mean +- t_{(1+c)/2, n-1} s/sqrt(n)`.
/// The per-trial top classification rate is the best reliability attained at
/// false alarm `<= 0.05`.
pub fn summarize_trials(
    trials: &[(RocCurve, ReliabilityCurve)],
    grid: &[f64],
    confidence: f64,
) -> Result<TrialSummary> {
    if trials.len() < 2 {
        return Err(Error::Config(format!(
            "confidence intervals need >= 2 trials, got {}",
            trials.len()
        )));
    }
    if grid.is_empty() {
        return Err(Error::EmptyInput("false-alarm grid".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] < 0.0 || *grid.last().unwrap() > 1.0 {
        return Err(Error::Config("grid must be strictly increasing within [0, 1]".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Config(format!(
            "confidence must be in (0, 1), got {confidence}"
        )));
    }

    let n = trials.len();
    let t = t_quantile((n - 1) as f64, 0.5 + confidence / 2.0);

    // trial-major interpolated values
    let mut det = vec![vec![0.0; n]; grid.len()];
    let mut acc = vec![vec![0.0; n]; grid.len()];
    let mut aucs = Vec::with_capacity(n);
    let mut tops = Vec::with_capacity(n);
    for (ti, (rc, rel)) in trials.iter().enumerate() {
        let roc_fa: Vec<f64> = rc.points.iter().map(|p| p.fa_rate).collect();
        let roc_det: Vec<f64> = rc.points.iter().map(|p| p.detection_rate).collect();
        let mut rel_points = rel.points.clone();
        rel_points.sort_by(|a, b| a.fa_rate.partial_cmp(&b.fa_rate).unwrap());
        let rel_fa: Vec<f64> = rel_points.iter().map(|p| p.fa_rate).collect();
        let rel_acc: Vec<f64> = rel_points.iter().map(|p| p.acc).collect();
        for (gi, &g) in grid.iter().enumerate() {
            det[gi][ti] = step_value(&roc_fa, &roc_det, g);
            acc[gi][ti] = step_value(&rel_fa, &rel_acc, g);
        }
        aucs.push(rc.auc);
        let top = rel_points
            .iter()
            .filter(|p| p.fa_rate <= 0.05)
            .map(|p| p.acc)
            .fold(f64::NEG_INFINITY, f64::max);
        tops.push(if top.is_finite() { top } else { 0.0 });
    }

    let mut summary = TrialSummary {
        grid: grid.to_vec(),
        detection_mean: Vec::with_capacity(grid.len()),
        detection_lo: Vec::with_capacity(grid.len()),
        detection_hi: Vec::with_capacity(grid.len()),
        acc_mean: Vec::with_capacity(grid.len()),
        acc_lo: Vec::with_capacity(grid.len()),
        acc_hi: Vec::with_capacity(grid.len()),
        auc: mean_ci(&aucs, t),
        top_rate: mean_ci(&tops, t),
        trials: n,
    };
    for gi in 0..grid.len() {
        let d = mean_ci(&det[gi], t);
        summary.detection_mean.push(d.mean);
        summary.detection_lo.push(d.lo);
        summary.detection_hi.push(d.hi);
        let a = mean_ci(&acc[gi], t);
        summary.acc_mean.push(a.mean);
        summary.acc_lo.push(a.lo);
        summary.acc_hi.push(a.hi);
    }
    Ok(summary)
}

/// Write one ROC curve as CSV rows `fa_rate,detection_rate,threshold`.
pub fn save_roc_csv(path: impl AsRef<Path>, curve: &RocCurve) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "fa_rate,detection_rate,threshold")?;
    for p in &curve.points {
        writeln!(out, "{},{},{}", p.fa_rate, p.detection_rate, p.threshold)?;
    }
    Ok(())
}

/// Write the mean reliability band as CSV rows `fa_rate,acc_mean,acc_lo,acc_hi`
/// (raw, unclamped interval values).
pub fn save_mean_reliability_csv(path: impl AsRef<Path>, summary: &TrialSummary) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "fa_rate,acc_mean,acc_lo,acc_hi")?;
    for (i, g) in summary.grid.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{}",
            g, summary.acc_mean[i], summary.acc_lo[i], summary.acc_hi[i]
        )?;
    }
    Ok(())
}

/// Write the mean ROC band as CSV rows `fa_rate,det_mean,det_lo,det_hi`
/// (raw values).
pub fn save_mean_roc_csv(path: impl AsRef<Path>, summary: &TrialSummary) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "fa_rate,det_mean,det_lo,det_hi")?;
    for (i, g) in summary.grid.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{}",
            g, summary.detection_mean[i], summary.detection_lo[i], summary.detection_hi[i]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    /// Brute-force pairwise-comparison AUC, the oracle for the sweep.
    fn pairwise_auc(inl: &[f64], out: &[f64]) -> f64 {
        let mut num = 0.0;
        for o in out {
            for i in inl {
                if o > i {
                    num += 1.0;
                } else if o == i {
                    num += 0.5;
                }
            }
        }
        num / (inl.len() * out.len()) as f64
    }

    #[test]
    fn decide_boundaries_and_tie() {
        assert_eq!(decide(0.0, 0.0, || 1), Decision::Outlier);
        assert_eq!(decide(1.0, 0.0, || 1), Decision::Outlier);
        assert_eq!(decide(0.99, 1.01, || 3), Decision::Inlier(3));
        // tie goes to Outlier
        assert_eq!(decide(0.5, 0.5, || 0), Decision::Outlier);
    }

    #[test]
    fn decide_outlier_set_shrinks_as_tau_rises() {
        let scores = [0.1, 0.3, 0.5, 0.7, 0.9];
        let mut prev = usize::MAX;
        for tau in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2] {
            let count = scores
                .iter()
                .filter(|s| decide(**s, tau, || 0) == Decision::Outlier)
                .count();
            assert!(count <= prev);
            prev = count;
        }
    }

    #[test]
    fn roc_perfect_separation() {
        let curve = roc(&[0.1, 0.2, 0.3], &[0.7, 0.8, 0.9]).unwrap();
        assert_relative_eq!(curve.auc, 1.0);
        let first = curve.points.first().unwrap();
        assert_eq!((first.fa_rate, first.detection_rate), (0.0, 0.0));
        let last = curve.points.last().unwrap();
        assert_eq!((last.fa_rate, last.detection_rate), (1.0, 1.0));
    }

    #[test]
    fn roc_identical_sets_is_half() {
        let s = [0.2, 0.4, 0.6, 0.8];
        let curve = roc(&s, &s).unwrap();
        assert_eq!(curve.auc, 0.5);
        assert_relative_eq!(pairwise_auc(&s, &s), 0.5);
    }

    #[test]
    fn roc_rates_monotone_and_bounded() {
        let mut rng = seed::stream(3, &[50]);
        let inl: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
        let out: Vec<f64> = (0..25).map(|_| rng.random::<f64>() * 0.7 + 0.3).collect();
        let curve = roc(&inl, &out).unwrap();
        for w in curve.points.windows(2) {
            assert!(w[1].fa_rate >= w[0].fa_rate);
            assert!(w[1].detection_rate >= w[0].detection_rate);
        }
        for p in &curve.points {
            assert!((0.0..=1.0).contains(&p.fa_rate));
            assert!((0.0..=1.0).contains(&p.detection_rate));
        }
    }

    #[test]
    fn roc_rejects_empty_or_nonfinite() {
        assert!(roc(&[], &[0.5]).is_err());
        assert!(roc(&[0.5], &[]).is_err());
        assert!(roc(&[f64::NAN], &[0.5]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle_on_random_instances() {
        let mut rng = seed::stream(17, &[51]);
        for trial in 0..100 {
            let n_i = rng.random_range(1..40);
            let n_o = rng.random_range(1..40);
            // coarse quantization forces plenty of ties
            let q = rng.random_range(2..12) as f64;
            let inl: Vec<f64> = (0..n_i)
                .map(|_| (rng.random::<f64>() * q).round() / q)
                .collect();
            let out: Vec<f64> = (0..n_o)
                .map(|_| (rng.random::<f64>() * q).round() / q)
                .collect();
            let sweep = roc(&inl, &out).unwrap().auc;
            let oracle = pairwise_auc(&inl, &out);
            assert!(
                (sweep - oracle).abs() <= 1e-10,
                "trial {trial}: sweep {sweep} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn reliability_hand_cases() {
        use Decision::*;
        // nothing accepted
        let (acc, n_a, _) = reliability(&[Outlier, Outlier], &[0, 1]).unwrap();
        assert_eq!((acc, n_a), (0.0, 0));
        // all pass, all correct
        let (acc, ..) = reliability(&[Inlier(0), Inlier(1)], &[0, 1]).unwrap();
        assert_eq!(acc, 1.0);
        // 3 pass, 2 correct
        let decisions = [Inlier(0), Inlier(1), Inlier(0), Outlier];
        let (acc, n_a, n_c) = reliability(&decisions, &[0, 1, 1, 0]).unwrap();
        assert_eq!((n_a, n_c), (3, 2));
        assert_relative_eq!(acc, 2.0 / 3.0);
    }

    #[test]
    fn reliability_curve_accounting_is_exact() {
        let scores = [0.1, 0.2, 0.3, 0.4, 0.9];
        let predicted = [0, 1, 0, 1, 0];
        let truth = [0, 1, 1, 1, 0];
        let thresholds = [1.1, 0.5, 0.25, 0.05];
        let curve = reliability_curve(&scores, &predicted, &truth, &thresholds).unwrap();
        for p in &curve.points {
            // accepted + rejected = all test inliers
            let rejected = (p.fa_rate * scores.len() as f64).round() as usize;
            assert_eq!(p.n_a + rejected, scores.len());
            assert!(p.n_c <= p.n_a);
        }
        // tau = 1.1 accepts everything: plain accuracy 4/5
        assert_relative_eq!(curve.points[0].acc, 0.8);
        assert_eq!(curve.points[0].fa_rate, 0.0);
        // tau = 0.5 rejects only 0.9: 4 accepted, 3 correct
        assert_relative_eq!(curve.points[1].acc, 0.75);
        // tau = 0.05 rejects all: acc 0
        assert_eq!(curve.points[3].acc, 0.0);
        assert_eq!(curve.points[3].n_a, 0);
    }

    #[test]
    fn reliability_at_zero_false_alarm_is_plain_accuracy() {
        let scores = [0.1, 0.2, 0.3];
        let predicted = [0, 0, 1];
        let truth = [0, 1, 1];
        let curve = reliability_curve(&scores, &predicted, &truth, &[0.5]).unwrap();
        assert_eq!(curve.points[0].fa_rate, 0.0);
        assert_relative_eq!(curve.points[0].acc, 2.0 / 3.0);
    }

    #[test]
    fn rejection_threshold_examples() {
        let scores: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        // 9 of 10 scores are >= 0.2
        let tau = threshold_for_outlier_rejection(&scores, 0.9).unwrap();
        assert_relative_eq!(tau, 0.2);
        // q = 1 takes the minimum
        let tau = threshold_for_outlier_rejection(&scores, 1.0).unwrap();
        assert_relative_eq!(tau, 0.1);
        assert!(threshold_for_outlier_rejection(&scores, 0.0).is_err());
        assert!(threshold_for_outlier_rejection(&[], 0.5).is_err());
    }

    #[test]
    fn summarize_identical_trials_has_zero_width() {
        let curve = roc(&[0.1, 0.2], &[0.8, 0.9]).unwrap();
        let rel = reliability_curve(
            &[0.1, 0.2],
            &[0, 1],
            &[0, 1],
            &curve.points.iter().map(|p| p.threshold).collect::<Vec<_>>(),
        )
        .unwrap();
        let trials = vec![(curve.clone(), rel.clone()), (curve, rel)];
        let s = summarize_trials(&trials, &default_fa_grid(), 0.95).unwrap();
        for i in 0..s.grid.len() {
            assert_eq!(s.detection_lo[i], s.detection_hi[i]);
            assert_eq!(s.acc_lo[i], s.acc_hi[i]);
        }
        assert_eq!(s.auc.lo, s.auc.hi);
        assert_relative_eq!(s.auc.mean, 1.0);
    }

    #[test]
    fn summarize_two_trial_ci_matches_t_table() {
        // AUCs 0.4 and 0.6: half-width = t_{0.975,1} * s/sqrt(2) = 12.706 * 0.1
        let mk = |auc: f64| {
            let mut c = roc(&[0.1], &[0.9]).unwrap();
            c.auc = auc;
            let rel = reliability_curve(&[0.1], &[0], &[0], &[0.5]).unwrap();
            (c, rel)
        };
        let trials = vec![mk(0.4), mk(0.6)];
        let s = summarize_trials(&trials, &[0.0, 0.5, 1.0], 0.95).unwrap();
        assert_relative_eq!(s.auc.mean, 0.5, max_relative = 1e-12);
        let hw = s.auc.hi - s.auc.mean;
        assert_relative_eq!(hw, 1.2706, max_relative = 1e-3);
        // raw bounds exceed [0,1]; clamped version stays inside
        assert!(s.auc.lo < 0.0 && s.auc.hi > 1.0);
        let c = s.auc.clamped();
        assert_eq!((c.lo, c.hi), (0.0, 1.0));
        assert!(s.auc.lo <= s.auc.mean && s.auc.mean <= s.auc.hi);
    }

    #[test]
    fn summarize_requires_two_trials_and_valid_grid() {
        let c = roc(&[0.1], &[0.9]).unwrap();
        let rel = reliability_curve(&[0.1], &[0], &[0], &[0.5]).unwrap();
        let one = vec![(c.clone(), rel.clone())];
        assert!(summarize_trials(&one, &[0.0, 1.0], 0.95).is_err());
        let two = vec![(c.clone(), rel.clone()), (c, rel)];
        assert!(summarize_trials(&two, &[0.5, 0.5], 0.95).is_err());
        assert!(summarize_trials(&two, &[], 0.95).is_err());
    }

    #[test]
    fn step_interpolation_is_right_continuous() {
        let fas = [0.0, 0.5, 1.0];
        let ys = [0.0, 0.8, 1.0];
        assert_eq!(step_value(&fas, &ys, 0.0), 0.0);
        assert_eq!(step_value(&fas, &ys, 0.25), 0.0);
        assert_eq!(step_value(&fas, &ys, 0.5), 0.8);
        assert_eq!(step_value(&fas, &ys, 0.75), 0.8);
        assert_eq!(step_value(&fas, &ys, 1.0), 1.0);
    }

    #[test]
    fn csv_exports_have_exact_headers() {
        let dir = tempfile::tempdir().unwrap();
        let curve = roc(&[0.1, 0.4], &[0.6, 0.9]).unwrap();
        let rel = reliability_curve(
            &[0.1, 0.4],
            &[0, 1],
            &[0, 1],
            &curve.points.iter().map(|p| p.threshold).collect::<Vec<_>>(),
        )
        .unwrap();
        let trials = vec![(curve.clone(), rel.clone()), (curve.clone(), rel)];
        let summary = summarize_trials(&trials, &default_fa_grid(), 0.95).unwrap();

        let roc_path = dir.path().join("roc.csv");
        save_roc_csv(&roc_path, &curve).unwrap();
        let text = std::fs::read_to_string(&roc_path).unwrap();
        assert!(text.starts_with("fa_rate,detection_rate,threshold\n"));
        assert_eq!(text.lines().count(), 1 + curve.points.len());

        let rel_path = dir.path().join("rel.csv");
        save_mean_reliability_csv(&rel_path, &summary).unwrap();
        let text = std::fs::read_to_string(&rel_path).unwrap();
        assert!(text.starts_with("fa_rate,acc_mean,acc_lo,acc_hi\n"));
        assert_eq!(text.lines().count(), 1 + summary.grid.len());

        let mroc_path = dir.path().join("mean_roc.csv");
        save_mean_roc_csv(&mroc_path, &summary).unwrap();
        let text = std::fs::read_to_string(&mroc_path).unwrap();
        assert!(text.starts_with("fa_rate,det_mean,det_lo,det_hi\n"));
    }

    proptest! {
        #[test]
        fn rejection_threshold_always_reaches_target(
            scores in proptest::collection::vec(0.0f64..1.0, 1..60),
            q in 0.01f64..1.0,
        ) {
            let tau = threshold_for_outlier_rejection(&scores, q).unwrap();
            let rejected = scores.iter().filter(|s| **s >= tau).count();
            prop_assert!(rejected as f64 / scores.len() as f64 >= q - 1e-12);
        }

        #[test]
        fn auc_in_unit_interval(
            inl in proptest::collection::vec(0.0f64..1.0, 1..30),
            out in proptest::collection::vec(0.0f64..1.0, 1..30),
        ) {
            let curve = roc(&inl, &out).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&curve.auc));
        }
    }
}
