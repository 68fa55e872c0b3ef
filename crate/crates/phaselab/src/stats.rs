//! The measurement layer: training roughness, pocket and collapse
//! detection over β-indexed series, seed variance, and the paired
//! statistical battery (Pearson r with a Student-t p-value, paired t,
//! Cohen's d_z, and an exact enumeration Wilcoxon signed-rank test).
//!
//! Everything here is a pure function; the exactness-sensitive pieces
//! (Wilcoxon, the t CDF via the continued-fraction incomplete beta) avoid
//! approximations that would distort small-n p-values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation undefined for constant input")]
    ConstantInput,
    #[error("β values must be strictly increasing")]
    UnsortedSeries,
    #[error("collapse undefined: no positive value in the series")]
    AllNonPositive,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("series for `{0}` missing or too short")]
    MissingSeries(String),
}

/// Mean absolute stepwise change of a margin trace:
/// `R = (1/(T−1)) Σ_{t=2..T} |m_t − m_{t−1}|`.
pub fn roughness(trace: &[f64]) -> Result<f64, StatsError> {
    if trace.len() < 2 {
        return Err(StatsError::TooFewPoints {
            need: 2,
            got: trace.len(),
        });
    }
    let sum: f64 = trace.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    Ok(sum / (trace.len() - 1) as f64)
}

/// A β-indexed series with strictly increasing β.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSeries {
    points: Vec<(f64, f64)>,
}

impl PhaseSeries {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, StatsError> {
        if points.len() < 2 {
            return Err(StatsError::TooFewPoints {
                need: 2,
                got: points.len(),
            });
        }
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(StatsError::UnsortedSeries);
        }
        if points.iter().any(|(b, v)| !b.is_finite() || !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn negated(&self) -> Self {
        Self {
            points: self.points.iter().map(|&(b, v)| (b, -v)).collect(),
        }
    }
}

/// Grid points where a capability is strictly positive, with the bounding
/// β band and whether the band is free of non-positive interior points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PocketReport {
    pub positive_points: Vec<f64>,
    pub band: Option<(f64, f64)>,
    pub contiguous: bool,
}

pub fn detect_pocket(series: &PhaseSeries) -> PocketReport {
    let positive: Vec<f64> = series
        .points
        .iter()
        .filter(|(_, v)| *v > 0.0)
        .map(|(b, _)| *b)
        .collect();
    if positive.is_empty() {
        return PocketReport {
            positive_points: positive,
            band: None,
            contiguous: false,
        };
    }
    let lo = positive[0];
    let hi = *positive.last().unwrap();
    let contiguous = series
        .points
        .iter()
        .filter(|(b, _)| *b >= lo && *b <= hi)
        .all(|(_, v)| *v > 0.0);
    PocketReport {
        positive_points: positive,
        band: Some((lo, hi)),
        contiguous,
    }
}

/// The largest single-step relative drop between adjacent grid points.
/// `is_collapse` is false when even the best step is not a drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub beta_from: f64,
    pub beta_to: f64,
    pub relative_drop: f64,
    pub is_collapse: bool,
}

/// Scans adjacent pairs with a positive left value for the maximal
/// `(v_i − v_{i+1}) / v_i`; ties resolve toward smaller β.
pub fn detect_collapse(series: &PhaseSeries) -> Result<CollapseReport, StatsError> {
    let mut best: Option<(f64, f64, f64)> = None;
    for w in series.points.windows(2) {
        let (b0, v0) = w[0];
        let (b1, v1) = w[1];
        if v0 <= 0.0 {
            continue;
        }
        let drop = (v0 - v1) / v0;
        let better = match best {
            None => true,
            Some((_, _, d)) => drop > d,
        };
        if better {
            best = Some((b0, b1, drop));
        }
    }
    match best {
        Some((beta_from, beta_to, relative_drop)) => Ok(CollapseReport {
            beta_from,
            beta_to,
            relative_drop,
            is_collapse: relative_drop > 0.0,
        }),
        None => Err(StatsError::AllNonPositive),
    }
}

/// Sample variance (n−1 denominator).
pub fn seed_variance(values: &[f64]) -> Result<f64, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFewPoints {
            need: 2,
            got: values.len(),
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
}

/// Pearson correlation with a two-sided p-value from the t-transform
/// `t = r·√((n−2)/(1−r²))` against Student's t with n−2 degrees of
/// freedom (CDF via the continued-fraction incomplete beta).
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(StatsError::TooFewPoints { need: 3, got: n });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ConstantInput);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        student_t_two_sided_p(t, df)
    };
    Ok((r, p))
}

/// Paired-comparison battery over per-seed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedStats {
    pub n: usize,
    pub mean_diff: f64,
    /// `t = d_z · √n`; `None` when the differences have zero spread.
    pub t: Option<f64>,
    /// Two-sided p for `t`; 1.0 in the degenerate all-zero case.
    pub p_t: f64,
    /// Cohen's d_z = mean(d)/sd(d); 0.0 when degenerate.
    pub d_z: f64,
    /// Exact two-sided Wilcoxon signed-rank p (enumeration over sign
    /// assignments); `None` when no non-zero differences remain or more
    /// than 20 of them exist.
    pub p_wilcoxon: Option<f64>,
    pub degenerate: bool,
}

pub fn paired_tests(a: &[f64], b: &[f64]) -> Result<PairedStats, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::TooFewPoints { need: 2, got: n });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean_diff = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs
        .iter()
        .map(|d| (d - mean_diff) * (d - mean_diff))
        .sum::<f64>()
        / (n - 1) as f64;
    let sd = var.sqrt();
    let p_wilcoxon = wilcoxon_exact_two_sided(&diffs);

    if sd == 0.0 {
        // all differences identical; t is undefined
        return Ok(PairedStats {
            n,
            mean_diff,
            t: None,
            p_t: if mean_diff == 0.0 { 1.0 } else { 0.0 },
            d_z: 0.0,
            p_wilcoxon,
            degenerate: true,
        });
    }
    let d_z = mean_diff / sd;
    let t = d_z * (n as f64).sqrt();
    let p_t = student_t_two_sided_p(t, (n - 1) as f64);
    Ok(PairedStats {
        n,
        mean_diff,
        t: Some(t),
        p_t,
        d_z,
        p_wilcoxon,
        degenerate: false,
    })
}

/// Exact two-sided Wilcoxon signed-rank p by enumerating all `2^m` sign
/// assignments of the non-zero differences (zeros dropped, ties given
/// average rank). Rank sums use doubled-integer arithmetic so comparisons
/// are exact. Returns `None` for m = 0 or m > 20.
pub fn wilcoxon_exact_two_sided(diffs: &[f64]) -> Option<f64> {
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let m = nz.len();
    if m == 0 || m > 20 {
        return None;
    }
    // ranks of |d|, average rank for ties, stored doubled to stay integer
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| nz[i].abs().partial_cmp(&nz[j].abs()).unwrap());
    let mut ranks2 = vec![0u64; m];
    let mut i = 0;
    while i < m {
        let mut j = i;
        while j + 1 < m && nz[order[j + 1]].abs() == nz[order[i]].abs() {
            j += 1;
        }
        // positions i..=j share the average of ranks i+1..=j+1 → doubled:
        let avg2 = (i + 1 + j + 1) as u64;
        for &idx in &order[i..=j] {
            ranks2[idx] = avg2;
        }
        i = j + 1;
    }
    let total2: u64 = ranks2.iter().sum();
    let w_plus2: u64 = (0..m).filter(|&i| nz[i] > 0.0).map(|i| ranks2[i]).sum();
    // deviation doubled again to avoid halves: |2·W − total|
    let obs = (2 * w_plus2).abs_diff(total2);

    let mut count: u64 = 0;
    for assignment in 0u64..(1 << m) {
        let mut w2: u64 = 0;
        for (i, r2) in ranks2.iter().enumerate() {
            if assignment & (1 << i) != 0 {
                w2 += r2;
            }
        }
        if (2 * w2).abs_diff(total2) >= obs {
            count += 1;
        }
    }
    Some(count as f64 / (1u64 << m) as f64)
}

/// Two-sided tail probability of Student's t.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(df / 2.0, 0.5, x)
}

/// Regularized incomplete beta `I_x(a, b)` via the Lentz continued
/// fraction.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos log-gamma (g = 7, 9 coefficients).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection formula
        let pi = std::f64::consts::PI;
        return pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn roughness_basics() {
        assert_eq!(roughness(&[5.0; 30]).unwrap(), 0.0);
        assert_eq!(roughness(&[2.0, 5.0, 3.0]).unwrap(), 2.5);
        assert!(roughness(&[1.0]).is_err());
    }

    #[test]
    fn roughness_matches_independent_one_pass() {
        let mut stream = StreamKey::new("stats.rough").into_stream();
        for _ in 0..100 {
            let trace: Vec<f64> = (0..200).map(|_| stream.gen_range(-5.0..5.0)).collect();
            // independently coded oracle: explicit fold carrying prev
            let mut prev = trace[0];
            let mut acc = 0.0;
            for &v in &trace[1..] {
                acc += (v - prev).abs();
                prev = v;
            }
            let oracle = acc / (trace.len() as f64 - 1.0);
            assert!((roughness(&trace).unwrap() - oracle).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn roughness_properties(values in proptest::collection::vec(-100.0f64..100.0, 2..64)) {
            let r = roughness(&values).unwrap();
            prop_assert!(r >= 0.0);
            let constant = values.iter().all(|&v| v == values[0]);
            prop_assert_eq!(r == 0.0, constant);
            // power-of-two scaling is exact in IEEE arithmetic
            let doubled: Vec<f64> = values.iter().map(|v| v * -4.0).collect();
            prop_assert_eq!(roughness(&doubled).unwrap(), 4.0 * r);
            // shift invariance to tight tolerance
            let shifted: Vec<f64> = values.iter().map(|v| v + 13.5).collect();
            let rs = roughness(&shifted).unwrap();
            prop_assert!((rs - r).abs() <= 1e-12 * (1.0 + r.abs()));
        }
    }

    fn series(pairs: &[(f64, f64)]) -> PhaseSeries {
        PhaseSeries::new(pairs.to_vec()).unwrap()
    }

    #[test]
    fn pocket_on_mixed_series() {
        let s = series(&[
            (0.004, -0.3),
            (0.006, -0.2),
            (0.008, 0.16),
            (0.009, -0.06),
            (0.010, 0.04),
            (0.012, 0.15),
            (0.015, -0.04),
        ]);
        let p = detect_pocket(&s);
        assert_eq!(p.positive_points, vec![0.008, 0.010, 0.012]);
        assert_eq!(p.band, Some((0.008, 0.012)));
        assert!(!p.contiguous);
    }

    #[test]
    fn pocket_empty_and_full() {
        let none = detect_pocket(&series(&[(0.1, -1.0), (0.2, -0.5)]));
        assert!(none.positive_points.is_empty());
        assert_eq!(none.band, None);
        let all = detect_pocket(&series(&[(0.1, 1.0), (0.2, 0.5), (0.3, 0.1)]));
        assert_eq!(all.band, Some((0.1, 0.3)));
        assert!(all.contiguous);
    }

    #[test]
    fn pocket_negation_complement() {
        let s = series(&[
            (0.1, 1.0),
            (0.2, -0.5),
            (0.3, 0.2),
            (0.4, -0.1),
            (0.5, 0.7),
        ]);
        let pos: Vec<f64> = detect_pocket(&s).positive_points;
        let neg: Vec<f64> = detect_pocket(&s.negated()).positive_points;
        let all: Vec<f64> = s.points().iter().map(|(b, _)| *b).collect();
        let mut union: Vec<f64> = pos.iter().chain(neg.iter()).copied().collect();
        union.sort_by(f64::total_cmp);
        assert_eq!(union, all, "nonzero points split between the two pockets");
        assert!(pos.iter().all(|b| !neg.contains(b)));
    }

    #[test]
    fn collapse_fixture_and_ties() {
        let s = series(&[(0.006, 1.0), (0.008, 2.0), (0.009, 1.26)]);
        let c = detect_collapse(&s).unwrap();
        assert_eq!((c.beta_from, c.beta_to), (0.008, 0.009));
        assert!((c.relative_drop - 0.37).abs() < 1e-12);
        assert!(c.is_collapse);

        // monotone increasing → reported max is non-positive, flagged;
        // both steps drop by -1.0 relative, so the tie rule picks 0.1→0.2
        let up = detect_collapse(&series(&[(0.1, 1.0), (0.2, 2.0), (0.3, 4.0)])).unwrap();
        assert!(!up.is_collapse);
        assert!(up.relative_drop <= 0.0);
        assert_eq!((up.beta_from, up.beta_to), (0.1, 0.2));
        // two equal maximal drops → smaller-β pair wins
        let tie = detect_collapse(&series(&[(0.1, 2.0), (0.2, 1.0), (0.3, 0.5)])).unwrap();
        assert_eq!((tie.beta_from, tie.beta_to), (0.1, 0.2));

        assert_eq!(
            detect_collapse(&series(&[(0.1, 0.0), (0.2, 0.0)])),
            Err(StatsError::AllNonPositive)
        );
    }

    #[test]
    fn variance_basics() {
        assert_eq!(seed_variance(&[3.0; 5]).unwrap(), 0.0);
        assert_eq!(seed_variance(&[0.0, 2.0]).unwrap(), 2.0);
        assert!(seed_variance(&[1.0]).is_err());
        // ratio shape from a variance table: 0.016 / 0.0006 ≈ 27×
        let ratio: f64 = 0.016 / 0.0006;
        assert!((ratio - 26.666_666_666_666_668).abs() < 1e-9);
        assert_eq!(format!("{:.0}", ratio), "27");
    }

    #[test]
    fn pearson_perfect_lines() {
        let (r, p) = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert_eq!(r, 1.0);
        assert_eq!(p, 0.0);
        let (r, _) = pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap();
        assert_eq!(r, -1.0);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn pearson_matches_direct_formula() {
        let mut stream = StreamKey::new("stats.pearson").into_stream();
        for _ in 0..20 {
            let n = 13;
            let x: Vec<f64> = (0..n).map(|_| stream.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = x
                .iter()
                .map(|v| -0.8 * v + stream.gen_range(-0.7..0.7))
                .collect();
            let (r, _) = pearson(&x, &y).unwrap();
            // brute-force recomputation straight from the definition
            let mx = x.iter().sum::<f64>() / n as f64;
            let my = y.iter().sum::<f64>() / n as f64;
            let num: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let dx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
            let dy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
            let oracle = num / (dx * dy).sqrt();
            assert!((r - oracle).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn pearson_affine_invariance(
            seed in 0i64..1000,
            scale in 0.1f64..10.0,
            shift in -50.0f64..50.0,
        ) {
            let mut stream = StreamKey::new("stats.affine").int(seed).into_stream();
            let x: Vec<f64> = (0..10).map(|_| stream.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..10).map(|_| stream.gen_range(-1.0..1.0)).collect();
            prop_assume!(pearson(&x, &y).is_ok());
            let (r, _) = pearson(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
            let xt: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
            let (rt, _) = pearson(&xt, &y).unwrap();
            prop_assert!((r - rt).abs() < 1e-9);
            let xn: Vec<f64> = x.iter().map(|v| -v).collect();
            let (rn, _) = pearson(&xn, &y).unwrap();
            prop_assert!((r + rn).abs() < 1e-9);
        }
    }

    #[test]
    fn wilcoxon_all_same_sign_n5() {
        let p = wilcoxon_exact_two_sided(&[0.3, 1.1, 0.2, 2.0, 0.9]).unwrap();
        assert_eq!(p, 0.0625); // 2/32 exactly
        let p = wilcoxon_exact_two_sided(&[-0.3, -1.1, -0.2, -2.0, -0.9]).unwrap();
        assert_eq!(p, 0.0625);
    }

    #[test]
    fn wilcoxon_drops_zeros_and_handles_ties() {
        // zeros dropped: effectively n = 3, all positive → p = 2/8
        let p = wilcoxon_exact_two_sided(&[0.0, 1.0, 2.0, 3.0, 0.0]).unwrap();
        assert_eq!(p, 0.25);
        // all zero → undefined
        assert_eq!(wilcoxon_exact_two_sided(&[0.0, 0.0]), None);
        // tied magnitudes with mixed signs stay in [0, 1]
        let p = wilcoxon_exact_two_sided(&[1.0, -1.0, 1.0, -1.0, 2.0]).unwrap();
        assert!((0.0..=1.0).contains(&p));
    }

    /// Brute-force Wilcoxon oracle: recursive enumeration with f64 ranks,
    /// structured differently from the implementation.
    fn wilcoxon_oracle(diffs: &[f64]) -> Option<f64> {
        let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
        let m = nz.len();
        if m == 0 {
            return None;
        }
        let mut abs: Vec<(f64, usize)> =
            nz.iter().map(|d| d.abs()).zip(0..).collect();
        abs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut ranks = vec![0.0f64; m];
        let mut i = 0;
        while i < m {
            let mut j = i;
            while j + 1 < m && abs[j + 1].0 == abs[i].0 {
                j += 1;
            }
            let avg = (i + 1 + j + 1) as f64 / 2.0;
            for k in i..=j {
                ranks[abs[k].1] = avg;
            }
            i = j + 1;
        }
        let total: f64 = ranks.iter().sum();
        let w_obs: f64 = (0..m).filter(|&i| nz[i] > 0.0).map(|i| ranks[i]).sum();
        let center = total / 2.0;
        let obs_dev = (w_obs - center).abs();
        fn recurse(ranks: &[f64], idx: usize, w: f64, center: f64, obs: f64, hits: &mut u64) {
            if idx == ranks.len() {
                if (w - center).abs() >= obs - 1e-12 {
                    *hits += 1;
                }
                return;
            }
            recurse(ranks, idx + 1, w, center, obs, hits);
            recurse(ranks, idx + 1, w + ranks[idx], center, obs, hits);
        }
        let mut hits = 0;
        recurse(&ranks, 0, 0.0, center, obs_dev, &mut hits);
        Some(hits as f64 / (1u64 << m) as f64)
    }

    #[test]
    fn wilcoxon_matches_brute_force_up_to_n10() {
        let mut stream = StreamKey::new("stats.wilcoxon").into_stream();
        for case in 0..200 {
            let n = 2 + (case % 9);
            let diffs: Vec<f64> = (0..n)
                .map(|_| {
                    // quantized values produce frequent ties and zeros
                    (stream.gen_range(-4i32..=4) as f64) / 2.0
                })
                .collect();
            assert_eq!(
                wilcoxon_exact_two_sided(&diffs),
                wilcoxon_oracle(&diffs),
                "case {case}: {diffs:?}"
            );
        }
    }

    #[test]
    fn paired_tests_basics() {
        // a == b → degenerate
        let s = paired_tests(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.d_z, 0.0);
        assert_eq!(s.p_t, 1.0);
        assert_eq!(s.t, None);

        // n = 5, all positive differences → Wilcoxon p = 0.0625
        let a = [1.3, 0.9, 1.7, 2.0, 1.1];
        let b = [1.0, 0.5, 1.1, 1.2, 0.4];
        let s = paired_tests(&a, &b).unwrap();
        assert_eq!(s.p_wilcoxon, Some(0.0625));
        assert!(s.t.unwrap() > 0.0);
        // |t| = |d_z|·√n exactly
        assert_eq!(s.t.unwrap().abs(), s.d_z.abs() * 5.0f64.sqrt());
    }

    #[test]
    fn paired_tests_match_first_principles() {
        let mut stream = StreamKey::new("stats.paired").into_stream();
        for _ in 0..50 {
            let n = 5;
            let a: Vec<f64> = (0..n).map(|_| stream.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| stream.gen_range(-1.0..1.0)).collect();
            let s = paired_tests(&a, &b).unwrap();
            let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let mean = d.iter().sum::<f64>() / n as f64;
            let sd = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
                .sqrt();
            if sd == 0.0 {
                continue;
            }
            let t = mean / (sd / (n as f64).sqrt());
            assert!((s.t.unwrap() - t).abs() < 1e-10);
            assert!((s.d_z - mean / sd).abs() < 1e-12);
            assert_eq!(s.p_wilcoxon, wilcoxon_oracle(&d));
        }
    }

    #[test]
    fn t_cdf_matches_statrs() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        for &df in &[1.0, 2.0, 4.0, 12.0, 30.0] {
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            for &t in &[0.0, 0.31, 1.0, 2.2, 4.5, 9.0] {
                let ours = student_t_two_sided_p(t, df);
                let reference = 2.0 * (1.0 - dist.cdf(t));
                assert!(
                    (ours - reference).abs() < 1e-12,
                    "t {t} df {df}: {ours} vs {reference}"
                );
            }
        }
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-13);
        assert!((ln_gamma(2.0)).abs() < 1e-13);
        assert!((ln_gamma(5.0) - 24.0f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - (std::f64::consts::PI.sqrt()).ln()).abs() < 1e-12);
    }
}
