//! Small statistics helpers for the experiment reports.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Normal-approximation 95% interval for the mean.
pub fn ci95(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    let half = 1.96 * std_dev(xs) / (xs.len().max(1) as f64).sqrt();
    (m - half, m + half)
}

/// Pearson correlation; `None` when either series has zero variance or the
/// series are shorter than two.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len(), "pearson needs paired series");
    if xs.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// One-sided sign test: `P(X ≥ positives)` for `X ~ Binomial(n, ½)` with
/// `n = positives + negatives` (ties dropped beforehand).
pub fn sign_test(positives: usize, negatives: usize) -> f64 {
    let n = positives + negatives;
    if n == 0 {
        return 1.0;
    }
    let ln_half = -(n as f64) * std::f64::consts::LN_2;
    let mut log_pmf = Vec::with_capacity(n + 1);
    let mut lp = ln_half;
    for i in 0..=n {
        log_pmf.push(lp);
        if i < n {
            lp += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        }
    }
    let tail = &log_pmf[positives..];
    let top = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (top + tail.iter().map(|l| (l - top).exp()).sum::<f64>().ln()).exp().min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_small_cases() {
        assert_eq!(sign_test(0, 0), 1.0);
        assert!((sign_test(3, 0) - 0.125).abs() < 1e-12);
        assert!((sign_test(2, 1) - 0.5).abs() < 1e-12);
        // 15 of 20: Σ_{i≥15} C(20,i) / 2^20 = 21700 / 1048576.
        assert!((sign_test(15, 5) - 21700.0 / 1048576.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_of_exact_line_is_one() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
        assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(pearson(&xs, &[2.0; 4]), None);
    }

    #[test]
    fn interval_brackets_the_mean() {
        let (lo, hi) = ci95(&[1.0, 2.0, 3.0]);
        assert!(lo < 2.0 && hi > 2.0);
        assert!((hi - 2.0 - 1.96 / 3f64.sqrt()).abs() < 1e-12);
    }
}
