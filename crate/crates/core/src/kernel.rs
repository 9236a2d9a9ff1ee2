//! Gaussian-kernel smoothing helpers.

/// Silverman's rule of thumb, `0.9 min(sd, IQR / 1.34) n^(-1/5)`. Falls back
/// to whichever spread measure is positive; `None` for fewer than two points
/// or no spread at all.
pub fn silverman_bandwidth(xs: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr / 1.34),
        (true, false) => sd,
        (false, true) => iqr / 1.34,
        (false, false) => return None,
    };
    Some(0.9 * spread * (n as f64).powf(-0.2))
}

/// Linear-interpolation quantile (type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Unnormalized Gaussian kernel weight `exp(-u^2 / 2)` with `u = (x - x0) / h`.
/// An infinite bandwidth gives uniform weights.
pub fn gaussian_weight(x: f64, x0: f64, h: f64) -> f64 {
    if h.is_infinite() {
        return 1.0;
    }
    let u = (x - x0) / h;
    (-0.5 * u * u).exp()
}

/// Points within this many bandwidths count as covering the target.
pub const WINDOW_BANDWIDTHS: f64 = 3.0;

pub fn in_window(x: f64, x0: f64, h: f64) -> bool {
    h.is_infinite() || (x - x0).abs() <= WINDOW_BANDWIDTHS * h
}

/// Nadaraya-Watson estimate of `E[y | x = x0]`; `None` when no point lies in
/// the kernel window.
pub fn nadaraya_watson(xs: &[f64], ys: &[f64], x0: f64, h: f64) -> Option<f64> {
    if !xs.iter().any(|&x| in_window(x, x0, h)) {
        return None;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let w = gaussian_weight(x, x0, h);
        num += w * y;
        den += w;
    }
    (den > 0.0).then(|| num / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silverman_on_known_sample() {
        // 1..=10: sd = 3.02765, IQR (type 7) = 4.5 -> min(3.02765, 3.35821) = 3.02765
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        let h = silverman_bandwidth(&xs).unwrap();
        let want = 0.9 * 3.027_650_354_097_491_7 * 10f64.powf(-0.2);
        assert!((h - want).abs() < 1e-12);
        assert!(silverman_bandwidth(&[1.0, 1.0, 1.0]).is_none());
    }

    #[test]
    fn nw_limits() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 3.0, 5.0, 7.0];
        let flat = nadaraya_watson(&xs, &ys, 100.0, f64::INFINITY).unwrap();
        assert!((flat - 4.0).abs() < 1e-12);
        let near = nadaraya_watson(&xs, &ys, 1.0, 1e-3).unwrap();
        assert!((near - 3.0).abs() < 1e-12);
        assert!(nadaraya_watson(&xs, &ys, 10.0, 0.5).is_none());
        let c = nadaraya_watson(&xs, &[0.3; 4], 1.7, 0.4).unwrap();
        assert!((c - 0.3).abs() < 1e-15);
    }
}
