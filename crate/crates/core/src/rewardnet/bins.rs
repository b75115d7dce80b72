use crate::error::{Error, Result};

/// Bin centers `z_i = i/(N−1)`.
pub fn bin_centers(n_bins: usize) -> Vec<f64> {
    (0..n_bins).map(|i| i as f64 / (n_bins - 1) as f64).collect()
}

/// Categorical target for scalar progress `p`: mass split between the two
/// neighbouring centers so the expectation is `p`.
pub fn project_to_bins(p: f64, n_bins: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("progress {p} outside [0, 1]")));
    }
    if n_bins < 2 {
        return Err(Error::InvalidArgument("need at least two bins".into()));
    }
    let mut out = vec![0.0; n_bins];
    let x = p * (n_bins - 1) as f64;
    let lo = (x.floor() as usize).min(n_bins - 1);
    let frac = x - lo as f64;
    if frac == 0.0 {
        out[lo] = 1.0;
    } else {
        out[lo] = 1.0 - frac;
        out[lo + 1] = frac;
    }
    Ok(out)
}

pub fn expected_progress(dist: &[f64]) -> Result<f64> {
    let total: f64 = dist.iter().sum();
    if dist.len() < 2 || (total - 1.0).abs() > 1e-5 || dist.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidArgument(format!("not a distribution (sum {total})")));
    }
    Ok(expectation(dist))
}

/// Unchecked expectation over the bin centers.
pub fn expectation(dist: &[f64]) -> f64 {
    let n = dist.len();
    dist.iter().enumerate().map(|(i, &q)| q * i as f64 / (n - 1) as f64).sum()
}
