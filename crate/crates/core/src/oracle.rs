//! Reference computations that share no code with the production paths.
//!
//! Used by the test suites and by the `selfcheck` command to validate the
//! fast implementations: central finite differences for every reverse pass,
//! a Gaussian-elimination GP posterior for the Cholesky path, an O(n²)
//! precision count for average precision, and explicit covariance matrices
//! for the guided search sampler.

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, 1e-5)`; the floor sits above the round-off
/// noise of a central difference with step `1e-5`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| relative_error(x, y)).fold(0.0, f64::max)
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, &bi)| {
            let mut r = row.clone();
            r.push(bi);
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        for row in col + 1..n {
            let factor = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= factor * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| m[i][k] * x[k]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    Some(x)
}

/// GP posterior at `query` under an RBF kernel and constant prior mean equal
/// to the observation average. Returns `(mean, latent variance)` without any
/// clamping or flooring.
pub fn gp_posterior_direct(
    steps: &[f64],
    values: &[f64],
    length_scale: f64,
    signal_var: f64,
    noise_var: f64,
    query: f64,
) -> (f64, f64) {
    let k = |a: f64, b: f64| signal_var * (-(a - b) * (a - b) / (2.0 * length_scale * length_scale)).exp();
    let n = steps.len();
    let prior = values.iter().sum::<f64>() / n as f64;
    let gram: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| k(steps[i], steps[j]) + if i == j { noise_var } else { 0.0 })
                .collect()
        })
        .collect();
    let centered: Vec<f64> = values.iter().map(|v| v - prior).collect();
    let kstar: Vec<f64> = steps.iter().map(|&s| k(s, query)).collect();
    let alpha = solve_dense(&gram, &centered).expect("non-singular gram matrix");
    let beta = solve_dense(&gram, &kstar).expect("non-singular gram matrix");
    let mean = prior + kstar.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>();
    let var = signal_var - kstar.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
    (mean, var)
}

/// Average precision as the mean, over positives, of the precision among
/// all examples scoring at least as high as that positive.
pub fn average_precision_brute_force(scores: &[f64], labels: &[bool]) -> f64 {
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
            let hits = above.iter().filter(|&&j| labels[j]).count();
            hits as f64 / above.len() as f64
        })
        .sum();
    total / positives.len() as f64
}

/// Explicit `(1/2d) I + (1/2k) U Uᵀ` for orthonormal columns `basis`
/// (isotropic `(1/d) I` when `basis` is empty).
pub fn guided_covariance(dim: usize, basis: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = basis.len();
    let mut sigma = vec![vec![0.0; dim]; dim];
    for (i, row) in sigma.iter_mut().enumerate() {
        row[i] = if k == 0 { 1.0 / dim as f64 } else { 0.5 / dim as f64 };
    }
    for u in basis {
        for i in 0..dim {
            for j in 0..dim {
                sigma[i][j] += 0.5 / k as f64 * u[i] * u[j];
            }
        }
    }
    sigma
}

/// Sample covariance (divisor `n`) of zero-mean draws.
pub fn second_moment(samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = samples[0].len();
    let mut c = vec![vec![0.0; dim]; dim];
    for s in samples {
        for i in 0..dim {
            for j in 0..dim {
                c[i][j] += s[i] * s[j];
            }
        }
    }
    let n = samples.len() as f64;
    c.iter_mut().flatten().for_each(|x| *x /= n);
    c
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let a = vec![vec![0.0, 2.0], vec![1.0, 1.0]];
        let x = solve_dense(&a, &[4.0, 3.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn brute_force_ap_example() {
        let ap = average_precision_brute_force(&[0.9, 0.8, 0.4, 0.2], &[true, false, true, false]);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }
}
