use statrs::function::gamma::digamma;

use super::DataError;
use crate::numerics::Tensor;

pub const KSG_NEIGHBOURS: usize = 5;
pub const MIN_MI_SAMPLES: usize = 1000;

/// Mutual information (nats) between paired rows of `x` and `y`.
///
/// Kraskov-Stögbauer-Grassberger estimator (first variant, max-norm) with
/// five neighbours. Needs at least a thousand pairs.
pub fn oracle_mi(x: &Tensor, y: &Tensor) -> Result<f64, DataError> {
    if x.rows() != y.rows() {
        return Err(DataError::Unpaired(x.rows(), y.rows()));
    }
    if x.rows() < MIN_MI_SAMPLES {
        return Err(DataError::InsufficientSamples {
            got: x.rows(),
            need: MIN_MI_SAMPLES,
        });
    }
    ksg_mi(x, y, KSG_NEIGHBOURS)
}

fn cheb(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (u, v)| f64::max(m, (u - v).abs()))
}

/// KSG estimate with `k` neighbours and no sample-count floor.
pub fn ksg_mi(x: &Tensor, y: &Tensor, k: usize) -> Result<f64, DataError> {
    let n = x.rows();
    if n != y.rows() {
        return Err(DataError::Unpaired(n, y.rows()));
    }
    if n <= k {
        return Err(DataError::InsufficientSamples { got: n, need: k + 1 });
    }
    let mut dx = vec![0.0; n];
    let mut dy = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut acc = 0.0;
    for i in 0..n {
        let (xi, yi) = (x.row(i), y.row(i));
        for j in 0..n {
            dx[j] = cheb(xi, x.row(j));
            dy[j] = cheb(yi, y.row(j));
            dz[j] = dx[j].max(dy[j]);
        }
        dz[i] = f64::INFINITY;
        let mut sorted = dz.clone();
        let (_, eps, _) = sorted.select_nth_unstable_by(k - 1, f64::total_cmp);
        let eps = *eps;
        let nx = (0..n).filter(|&j| j != i && dx[j] < eps).count();
        let ny = (0..n).filter(|&j| j != i && dy[j] < eps).count();
        acc += digamma(nx as f64 + 1.0) + digamma(ny as f64 + 1.0);
    }
    Ok(digamma(k as f64) + digamma(n as f64) - acc / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn column(v: Vec<f64>) -> Tensor {
        Tensor::matrix(v.len(), 1, v).unwrap()
    }

    #[test]
    fn independent_normals() {
        let mut rng = seeded_rng(1);
        let x = column(rng.normals(2000));
        let y = column(rng.normals(2000));
        let mi = oracle_mi(&x, &y).unwrap();
        assert!(mi.abs() < 0.02, "{mi}");
    }

    #[test]
    fn correlated_gaussian_matches_closed_form() {
        let mut rng = seeded_rng(2);
        let n = 2000;
        let rho: f64 = 0.9;
        let a = rng.normals(n);
        let b = rng.normals(n);
        let y: Vec<f64> = a.iter().zip(&b).map(|(u, v)| rho * u + (1.0 - rho * rho).sqrt() * v).collect();
        let mi = oracle_mi(&column(a), &column(y)).unwrap();
        let exact = -0.5 * (1.0 - rho * rho).ln();
        assert!((mi - exact).abs() < 0.05, "{mi} vs {exact}");
    }

    #[test]
    fn identical_variables_are_large() {
        let mut rng = seeded_rng(3);
        let x = column(rng.normals(1500));
        assert!(oracle_mi(&x, &x).unwrap() > 2.0);
    }

    #[test]
    fn too_few_samples() {
        let x = column(vec![0.0; 999]);
        assert!(matches!(oracle_mi(&x, &x), Err(DataError::InsufficientSamples { .. })));
    }

    #[test]
    fn symmetric() {
        let mut rng = seeded_rng(4);
        let a = rng.normals(1200);
        let b: Vec<f64> = a.iter().map(|v| v + 0.5 * rng.normal()).collect();
        let (x, y) = (column(a), column(b));
        let d = oracle_mi(&x, &y).unwrap() - oracle_mi(&y, &x).unwrap();
        assert!(d.abs() < 0.02);
    }
}
