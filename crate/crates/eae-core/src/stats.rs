//! Small statistical helpers shared by the latent-dynamics and diagnostics
//! modules: Gaussian kernel density estimation and Pearson correlation.

/// Sample standard deviation (n-1 normalization), 0 for degenerate input.
fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Silverman bandwidth for a 1-D Gaussian kernel density estimate:
/// `std * (3n/4)^(-1/5)`.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    sample_std(xs) * (0.75 * n).powf(-0.2)
}

/// Gaussian-kernel density of `xs` evaluated at `x` with bandwidth `h`.
pub fn kde_density(xs: &[f64], h: f64, x: f64) -> f64 {
    let norm = 1.0 / (xs.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    xs.iter()
        .map(|xi| {
            let u = (x - xi) / h;
            (-0.5 * u * u).exp()
        })
        .sum::<f64>()
        * norm
}

/// Density curve on `n_points` equally spaced points spanning the sample
/// range. Returns `(grid, densities)`. Degenerate samples (all equal)
/// produce a single-point spike.
pub fn kde_curve(xs: &[f64], n_points: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(!xs.is_empty() && n_points >= 1);
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let h = silverman_bandwidth(xs);
    if h == 0.0 || lo == hi {
        return (vec![lo], vec![1.0]);
    }
    let mut grid = Vec::with_capacity(n_points);
    let mut dens = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let x = lo + (hi - lo) * i as f64 / (n_points - 1) as f64;
        grid.push(x);
        dens.push(kde_density(xs, h, x));
    }
    (grid, dens)
}

/// Location of the kernel-density maximum on a 1024-point grid spanning the
/// sample range. All-equal samples return that value directly.
pub fn kde_mode(xs: &[f64]) -> f64 {
    let (grid, dens) = kde_curve(xs, 1024);
    let mut best = 0;
    for i in 1..grid.len() {
        if dens[i] > dens[best] {
            best = i;
        }
    }
    grid[best]
}

/// Pearson product-moment correlation. `None` when either input has zero
/// variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// Population variance (divide by n) of one column of a row-major matrix.
pub fn column_population_variance(data: &[f64], width: usize, col: usize) -> f64 {
    let n = data.len() / width;
    let mean = (0..n).map(|r| data[r * width + col]).sum::<f64>() / n as f64;
    (0..n)
        .map(|r| {
            let d = data[r * width + col] - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kde_mode_of_identical_samples_is_that_value() {
        let xs = vec![2.5; 40];
        assert_eq!(kde_mode(&xs), 2.5);
    }

    #[test]
    fn kde_mode_tracks_the_heavier_cluster() {
        let mut xs = vec![-1.0; 100];
        xs.extend(vec![3.0; 300]);
        let mode = kde_mode(&xs);
        assert!((mode - 3.0).abs() < 0.05, "mode {mode}");
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_handles_exact_and_degenerate_cases() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&xs, &vec![1.0; 50]), None);
    }

    #[test]
    fn independent_streams_decorrelate() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut ra = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut rb = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<f64> = (0..10_000).map(|_| ra.random_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = (0..10_000).map(|_| rb.random_range(-1.0..1.0)).collect();
        assert!(pearson(&xs, &ys).unwrap().abs() < 0.1);
    }

    #[test]
    fn column_variance_is_population_normalized() {
        // Column [1, 3]: mean 2, population variance 1.
        let data = vec![1.0, 10.0, 3.0, 20.0];
        assert_eq!(column_population_variance(&data, 2, 0), 1.0);
        assert_eq!(column_population_variance(&data, 2, 1), 25.0);
    }
}
