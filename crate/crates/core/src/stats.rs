//! Agreement and significance statistics: two-way random-effects ICC for
//! absolute agreement of single measurements, Pearson correlation with its
//! t-transform p-value, and the paired Student's t-test.
//!
//! p-values come from the regularized incomplete beta function evaluated by
//! a modified-Lentz continued fraction, accurate to well below 1e-10.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatError {
    #[error("need at least {need} observations, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite input value")]
    NonFinite,
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("degenerate: all paired differences are zero")]
    DegenerateDifferences,
    #[error("degenerate ICC: the ratings have no variance at all")]
    DegenerateIcc,
    #[error("ratings matrix is ragged: row {row} has {got} entries, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
}

pub type Result<T> = std::result::Result<T, StatError>;

/// Statistic plus its two-sided p-value. `df` is set for t-based tests; `ci`
/// carries interval bounds where the computation produces them.
#[derive(Debug, Clone, PartialEq)]
pub struct StatResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub df: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

// ---- special functions ----

/// Natural log of the gamma function (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
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
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
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

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn betai(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "betai requires positive parameters");
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_bt = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let bt = ln_bt.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * beta_cf(a, b, x) / a
    } else {
        1.0 - bt * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of a t statistic with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    betai(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Upper-tail quantile: the `x >= 0` with `P(|T| > x) = two_sided_p`.
/// Solved by bisection on the monotone p-value.
pub fn student_t_two_sided_quantile(two_sided_p: f64, df: f64) -> f64 {
    assert!((0.0..1.0).contains(&two_sided_p) && two_sided_p > 0.0);
    let (mut lo, mut hi) = (0.0f64, 1e3);
    while student_t_two_sided_p(hi, df) > two_sided_p {
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if student_t_two_sided_p(mid, df) > two_sided_p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Mean with a t-based 95% confidence interval.
pub fn mean_ci95(xs: &[f64]) -> Result<StatResult> {
    if xs.len() < 2 {
        return Err(StatError::TooFew { need: 2, got: xs.len() });
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(StatError::NonFinite);
    }
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let df = (n - 1) as f64;
    let tcrit = student_t_two_sided_quantile(0.05, df);
    Ok(StatResult {
        statistic: mean,
        p_value: f64::NAN,
        n,
        df: Some(df),
        ci: Some((mean - tcrit * se, mean + tcrit * se)),
    })
}

/// ICC(2,1): two-way random effects, absolute agreement, single measurement.
/// `ratings` is one row per subject, one column per rater.
pub fn icc(ratings: &[Vec<f64>]) -> Result<f64> {
    let n = ratings.len();
    if n < 2 {
        return Err(StatError::TooFew { need: 2, got: n });
    }
    let k = ratings[0].len();
    if k < 2 {
        return Err(StatError::TooFew { need: 2, got: k });
    }
    for (row, r) in ratings.iter().enumerate() {
        if r.len() != k {
            return Err(StatError::Ragged { row, got: r.len(), expected: k });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(StatError::NonFinite);
        }
    }
    let nf = n as f64;
    let kf = k as f64;
    let grand = ratings.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = ratings.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| ratings.iter().map(|r| r[j]).sum::<f64>() / nf)
        .collect();
    let ss_total: f64 = ratings
        .iter()
        .flatten()
        .map(|v| (v - grand) * (v - grand))
        .sum();
    if ss_total == 0.0 {
        return Err(StatError::DegenerateIcc);
    }
    let ss_rows: f64 = kf * row_means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>();
    let ss_cols: f64 = nf * col_means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>();
    let ss_err = ss_total - ss_rows - ss_cols;
    let msr = ss_rows / (nf - 1.0);
    let msc = ss_cols / (kf - 1.0);
    let mse = ss_err / ((nf - 1.0) * (kf - 1.0));
    Ok((msr - mse) / (msr + (kf - 1.0) * mse + kf * (msc - mse) / nf))
}

/// Sample Pearson correlation with a two-sided p-value from the t-transform
/// `t = r sqrt((n-2)/(1-r^2))`.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<StatResult> {
    if x.len() != y.len() {
        return Err(StatError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(StatError::TooFew { need: 3, got: n });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatError::NonFinite);
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        sxy += (xi - mx) * (yi - my);
        sxx += (xi - mx) * (xi - mx);
        syy += (yi - my) * (yi - my);
    }
    if sxx == 0.0 {
        return Err(StatError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(StatError::ZeroVariance("y"));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = nf - 2.0;
    let p = if (1.0 - r * r) <= 0.0 {
        0.0
    } else {
        student_t_two_sided_p(r * (df / (1.0 - r * r)).sqrt(), df)
    };
    Ok(StatResult {
        statistic: r,
        p_value: p,
        n,
        df: Some(df),
        ci: None,
    })
}

/// Paired Student's t-test on `a - b`. All-equal nonzero differences give an
/// infinite t with p = 0; all-zero differences are degenerate.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<StatResult> {
    if a.len() != b.len() {
        return Err(StatError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(StatError::TooFew { need: 2, got: n });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatError::NonFinite);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    let df = nf - 1.0;
    if var == 0.0 {
        if mean == 0.0 {
            return Err(StatError::DegenerateDifferences);
        }
        return Ok(StatResult {
            statistic: if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
            p_value: 0.0,
            n,
            df: Some(df),
            ci: None,
        });
    }
    let t = mean / (var / nf).sqrt();
    Ok(StatResult {
        statistic: t,
        p_value: student_t_two_sided_p(t, df),
        n,
        df: Some(df),
        ci: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-12);
        assert!((ln_gamma(2.0)).abs() < 1e-12);
        // Gamma(5) = 24
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        // Gamma(1/2) = sqrt(pi)
        assert!((ln_gamma(0.5) - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-12);
    }

    #[test]
    fn betai_endpoints_and_symmetry() {
        assert_eq!(betai(2.0, 3.0, 0.0), 0.0);
        assert_eq!(betai(2.0, 3.0, 1.0), 1.0);
        // I_x(1, b) = 1 - (1-x)^b
        for x in [0.1, 0.3, 0.7] {
            let direct = 1.0 - (1.0f64 - x).powf(2.5);
            assert!((betai(1.0, 2.5, x) - direct).abs() < 1e-12);
        }
        // Symmetry: I_x(a,b) = 1 - I_{1-x}(b,a)
        for (a, b, x) in [(2.0, 5.0, 0.3), (0.5, 0.5, 0.8), (4.0, 1.5, 0.55)] {
            assert!((betai(a, b, x) - (1.0 - betai(b, a, 1.0 - x))).abs() < 1e-12);
        }
    }

    #[test]
    fn t_p_values_match_reference() {
        // Reference values computed with an independent high-precision
        // implementation of the t distribution.
        let cases = [
            (1.5, 2.0, 0.2723931248910009),
            (1.5, 5.0, 0.19390368024247315),
            (1.5, 10.0, 0.16450732644544017),
            (1.5, 29.0, 0.14442369604038574),
        ];
        for (t, df, expect) in cases {
            let p = student_t_two_sided_p(t, df);
            assert!((p - expect).abs() < 1e-12, "t={t} df={df}: {p} vs {expect}");
        }
    }

    #[test]
    fn t_quantile_matches_reference() {
        let q4 = student_t_two_sided_quantile(0.05, 4.0);
        assert!((q4 - 2.7764451051977987).abs() < 1e-9, "{q4}");
        let q29 = student_t_two_sided_quantile(0.05, 29.0);
        assert!((q29 - 2.045229642132703).abs() < 1e-9, "{q29}");
    }

    #[test]
    fn paired_t_hand_case() {
        let res = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((res.statistic - 2.0 * 3.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(res.df, Some(2.0));
        assert!((res.p_value - 0.07417990022744854).abs() < 1e-12);
    }

    #[test]
    fn paired_t_degenerate_and_infinite() {
        let same = [0.4, 0.6, 0.8];
        assert!(matches!(
            paired_t_test(&same, &same),
            Err(StatError::DegenerateDifferences)
        ));
        let res = paired_t_test(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(res.statistic.is_infinite() && res.statistic > 0.0);
        assert_eq!(res.p_value, 0.0);
    }

    #[test]
    fn paired_t_swapping_negates_t_preserves_p() {
        let a = [0.82, 0.75, 0.91, 0.66, 0.88];
        let b = [0.71, 0.77, 0.84, 0.60, 0.79];
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        assert!((ab.statistic + ba.statistic).abs() < 1e-12);
        assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ab.p_value));
    }

    #[test]
    fn pearson_exact_lines() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let res = pearson_r(&x, &y).unwrap();
        assert!((res.statistic - 1.0).abs() < 1e-12);
        assert_eq!(res.p_value, 0.0);

        let y_neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let res = pearson_r(&x, &y_neg).unwrap();
        assert!((res.statistic + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_fixed_dataset_matches_reference() {
        let x = [0.5, 1.3, 2.1, 2.9, 3.4, 4.8, 5.5, 6.1, 7.7, 8.2];
        let y = [1.1, 0.9, 2.8, 2.2, 4.1, 4.0, 5.9, 5.2, 7.4, 8.9];
        let res = pearson_r(&x, &y).unwrap();
        assert!((res.statistic - 0.96667465152975456).abs() < 1e-12);
        assert!((res.p_value - 5.1832524256446453e-6).abs() < 1e-12);
    }

    #[test]
    fn pearson_zero_variance_rejected() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let y = [1.0, 2.0, 3.0, 4.0];
        assert!(matches!(
            pearson_r(&x, &y),
            Err(StatError::ZeroVariance("x"))
        ));
    }

    #[test]
    fn icc_perfect_agreement_is_one() {
        let ratings: Vec<Vec<f64>> = vec![
            vec![1.0, 1.0, 1.0],
            vec![2.0, 2.0, 2.0],
            vec![3.5, 3.5, 3.5],
            vec![0.5, 0.5, 0.5],
        ];
        let v = icc(&ratings).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn icc_offset_rater_is_penalized() {
        // Second rater adds a constant 2.0: consistency would be perfect but
        // absolute agreement is not. Reference value 5/11.
        let ratings: Vec<Vec<f64>> = vec![
            vec![1.0, 3.0],
            vec![2.0, 4.0],
            vec![3.0, 5.0],
            vec![4.0, 6.0],
        ];
        let v = icc(&ratings).unwrap();
        assert!(v < 1.0);
        assert!((v - 0.45454545454545453).abs() < 1e-12, "{v}");
    }

    #[test]
    fn icc_fixed_matrix_matches_reference() {
        let ratings = vec![
            vec![9.0, 10.0, 8.0],
            vec![6.0, 6.5, 7.0],
            vec![8.0, 7.5, 8.5],
            vec![7.0, 7.5, 6.0],
            vec![10.0, 11.0, 10.5],
            vec![6.0, 5.5, 6.5],
        ];
        let v = icc(&ratings).unwrap();
        assert!((v - 0.8653344917463076).abs() < 1e-12, "{v}");
    }

    #[test]
    fn icc_constant_matrix_is_degenerate() {
        let ratings = vec![vec![2.0, 2.0], vec![2.0, 2.0]];
        assert!(matches!(icc(&ratings), Err(StatError::DegenerateIcc)));
    }

    #[test]
    fn icc_never_exceeds_one() {
        let mut rng = crate::rng::stream(77, 0);
        for _ in 0..100 {
            let ratings: Vec<Vec<f64>> = (0..5)
                .map(|_| {
                    (0..3)
                        .map(|_| crate::rng::uniform_in(&mut rng, 0.0, 10.0))
                        .collect()
                })
                .collect();
            let v = icc(&ratings).unwrap();
            assert!(v <= 1.0 + 1e-12, "icc {v}");
        }
    }

    #[test]
    fn mean_ci_brackets_the_mean() {
        let xs = [0.8, 0.82, 0.79, 0.85, 0.81];
        let res = mean_ci95(&xs).unwrap();
        let (lo, hi) = res.ci.unwrap();
        assert!(lo < res.statistic && res.statistic < hi);
        assert_eq!(res.n, 5);
    }
}
