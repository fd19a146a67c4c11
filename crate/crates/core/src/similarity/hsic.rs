//! HSIC estimators on precomputed Gram matrices.
//!
//! Both estimators are written as a Frobenius inner product of two
//! "centered" Gram matrices divided by a normalizer, which is what makes CKA
//! a cosine and keeps it in `[-1, 1]`:
//!
//! * biased: `<HKH, HLH> / (n-1)^2`, equal to `tr(KHLH) / (n-1)^2`;
//! * unbiased: `<U(K), U(L)> / (n(n-3))` where `U` zeroes the diagonal and
//!   U-centers the rest, which reproduces the usual U-statistic.

use crate::error::{Error, Result};
use crate::matcore::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Estimator {
    #[default]
    Biased,
    Unbiased,
}

impl Estimator {
    pub fn min_samples(self) -> usize {
        match self {
            Estimator::Biased => 2,
            Estimator::Unbiased => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Biased => "biased",
            Estimator::Unbiased => "unbiased",
        }
    }

    fn normalizer(self, n: usize) -> f64 {
        let n = n as f64;
        match self {
            Estimator::Biased => (n - 1.0) * (n - 1.0),
            Estimator::Unbiased => n * (n - 3.0),
        }
    }

    /// The estimator-specific centered form of `k`.
    pub(crate) fn center(self, k: &Matrix) -> Result<Matrix> {
        check_gram(k, self)?;
        Ok(match self {
            Estimator::Biased => double_center(k),
            Estimator::Unbiased => u_center(k),
        })
    }

    /// Finishes an estimate from two centered forms.
    pub(crate) fn combine(self, kc: &Matrix, lc: &Matrix) -> Result<f64> {
        Ok(kc.frobenius_inner(lc)? / self.normalizer(kc.rows()))
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "biased" => Ok(Estimator::Biased),
            "unbiased" => Ok(Estimator::Unbiased),
            _ => Err(Error::Config(format!("unknown HSIC estimator '{s}'"))),
        }
    }
}

fn check_gram(k: &Matrix, est: Estimator) -> Result<()> {
    if k.rows() != k.cols() {
        return Err(Error::Shape(format!("gram matrix must be square, got {:?}", k.shape())));
    }
    if k.rows() < est.min_samples() {
        return Err(Error::Degenerate(format!(
            "{} HSIC needs n >= {}, got {}",
            est.as_str(),
            est.min_samples(),
            k.rows()
        )));
    }
    let scale = k.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if !k.is_symmetric(1e-12 * scale) {
        return Err(Error::Shape("gram matrix is not symmetric".into()));
    }
    Ok(())
}

/// `H K H` with `H = I - 11^T/n`.
fn double_center(k: &Matrix) -> Matrix {
    let n = k.rows();
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).iter().sum::<f64>() / n as f64).collect();
    let col_means = k.column_means();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let mut out = k.clone();
    for i in 0..n {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = *v - row_means[i] - col_means[j] + grand;
        }
    }
    out
}

/// U-centering of `k` with its diagonal removed.
fn u_center(k: &Matrix) -> Matrix {
    let n = k.rows();
    let nf = n as f64;
    let mut row_sums = vec![0.0; n];
    let mut col_sums = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                row_sums[i] += k.get(i, j);
                col_sums[j] += k.get(i, j);
            }
        }
    }
    let total: f64 = row_sums.iter().sum();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = k.get(i, j) - row_sums[i] / (nf - 2.0) - col_sums[j] / (nf - 2.0)
                    + total / ((nf - 1.0) * (nf - 2.0));
                out.set(i, j, v);
            }
        }
    }
    out
}

/// HSIC between two Gram matrices of the same sample set.
pub fn hsic(k: &Matrix, l: &Matrix, estimator: Estimator) -> Result<f64> {
    if k.shape() != l.shape() {
        return Err(Error::Shape(format!(
            "gram sizes differ: {:?} vs {:?}",
            k.shape(),
            l.shape()
        )));
    }
    let kc = estimator.center(k)?;
    let lc = estimator.center(l)?;
    estimator.combine(&kc, &lc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::RngStream;

    fn random_gram(rng: &mut RngStream, n: usize, d: usize) -> Matrix {
        let x = rng.normal_matrix(n, d);
        x.matmul_transposed(&x).unwrap()
    }

    /// Closed-form unbiased HSIC written term by term, as an oracle.
    fn unbiased_oracle(k: &Matrix, l: &Matrix) -> f64 {
        let n = k.rows();
        let nf = n as f64;
        let kt = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { k.get(i, j) }).unwrap();
        let lt = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { l.get(i, j) }).unwrap();
        let kl = kt.matmul(&lt).unwrap();
        let trace: f64 = (0..n).map(|i| kl.get(i, i)).sum();
        let sum_k: f64 = kt.data().iter().sum();
        let sum_l: f64 = lt.data().iter().sum();
        let sum_kl: f64 = kl.data().iter().sum();
        (trace + sum_k * sum_l / ((nf - 1.0) * (nf - 2.0)) - 2.0 / (nf - 2.0) * sum_kl) / (nf * (nf - 3.0))
    }

    #[test]
    fn biased_self_identity() {
        let mut rng = RngStream::new(1);
        let k = random_gram(&mut rng, 7, 3);
        let hkh = double_center(&k);
        let expect = hkh.frobenius_norm().powi(2) / 36.0;
        assert!((hsic(&k, &k, Estimator::Biased).unwrap() - expect).abs() <= 1e-12 * expect.max(1.0));
    }

    #[test]
    fn constant_features_give_zero() {
        let x = Matrix::from_rows(&vec![vec![2.0, 5.0]; 6]).unwrap();
        let k = x.matmul_transposed(&x).unwrap();
        let mut rng = RngStream::new(2);
        let l = random_gram(&mut rng, 6, 2);
        for est in [Estimator::Biased, Estimator::Unbiased] {
            assert!(hsic(&k, &l, est).unwrap().abs() <= 1e-12);
        }
    }

    #[test]
    fn unbiased_matches_closed_form() {
        let mut rng = RngStream::new(3);
        for n in 4..12 {
            let k = random_gram(&mut rng, n, 3);
            let l = random_gram(&mut rng, n, 5);
            let got = hsic(&k, &l, Estimator::Unbiased).unwrap();
            let want = unbiased_oracle(&k, &l);
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "n={n}: {got} vs {want}");
        }
    }

    #[test]
    fn error_paths() {
        let k = Matrix::identity(3);
        assert!(matches!(hsic(&k, &Matrix::identity(4), Estimator::Biased), Err(Error::Shape(_))));
        assert!(matches!(hsic(&k, &k, Estimator::Unbiased), Err(Error::Degenerate(_))));
        assert!(matches!(
            hsic(&Matrix::identity(1), &Matrix::identity(1), Estimator::Biased),
            Err(Error::Degenerate(_))
        ));
        let asym = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(hsic(&asym, &asym, Estimator::Biased), Err(Error::Shape(_))));
        assert!(hsic(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3), Estimator::Biased).is_err());
    }
}
