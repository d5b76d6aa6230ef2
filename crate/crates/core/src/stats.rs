//! Small statistical helpers used by tests and the benchmark harness.

use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

/// p-value of Pearson's goodness-of-fit test against the uniform distribution.
pub fn chi_square_uniform(counts: &[u64]) -> f64 {
    let k = counts.len();
    if k < 2 {
        return 1.0;
    }
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 1.0;
    }
    let e = n as f64 / k as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    ChiSquared::new((k - 1) as f64).unwrap().sf(stat)
}

/// p-value of the two-sample chi-square homogeneity test. Bins empty in both
/// samples are dropped.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (na, nb): (u64, u64) = (a.iter().sum(), b.iter().sum());
    if na == 0 || nb == 0 {
        return 1.0;
    }
    let (na, nb) = (na as f64, nb as f64);
    let mut stat = 0.0;
    let mut bins = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let t = (x + y) as f64;
        if t == 0.0 {
            continue;
        }
        bins += 1;
        let ea = t * na / (na + nb);
        let eb = t * nb / (na + nb);
        stat += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    if bins < 2 {
        return 1.0;
    }
    ChiSquared::new((bins - 1) as f64).unwrap().sf(stat)
}

/// Per-byte-value histograms (256 bins) of a byte stream.
pub fn byte_histogram<'a, I: IntoIterator<Item = &'a u8>>(bytes: I) -> Vec<u64> {
    let mut h = vec![0u64; 256];
    for b in bytes {
        h[*b as usize] += 1;
    }
    h
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Nearest-rank percentile, `q` in [0, 100].
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((q / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Welch one-sided lower confidence bound on `mean(a) - mean(b)`.
pub fn welch_lower_bound(a: &[f64], b: &[f64], confidence: f64) -> f64 {
    let (va, vb) = (variance(a) / a.len() as f64, variance(b) / b.len() as f64);
    let se = (va + vb).sqrt();
    let diff = mean(a) - mean(b);
    if se == 0.0 {
        return diff;
    }
    let df = (va + vb).powi(2)
        / (va.powi(2) / (a.len() as f64 - 1.0) + vb.powi(2) / (b.len() as f64 - 1.0));
    let t = StudentsT::new(0.0, 1.0, df).unwrap().inverse_cdf(confidence);
    diff - t * se
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_counts_pass() {
        assert!(chi_square_uniform(&[100, 100, 100, 100]) > 0.99);
        assert!(chi_square_uniform(&[400, 0, 0, 0]) < 1e-6);
    }

    #[test]
    fn two_sample_detects_shift() {
        assert!(chi_square_two_sample(&[50, 50], &[50, 50]) > 0.99);
        assert!(chi_square_two_sample(&[90, 10], &[10, 90]) < 1e-6);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 10.0);
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&v, 100.0), 20.0);
    }

    #[test]
    fn welch_bound_sign() {
        let a = [10.0, 11.0, 10.5, 10.2, 10.8];
        let b = [5.0, 5.5, 4.8, 5.2, 5.1];
        assert!(welch_lower_bound(&a, &b, 0.95) > 4.0);
        assert!(welch_lower_bound(&b, &a, 0.95) < 0.0);
    }
}
