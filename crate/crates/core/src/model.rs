//! Statistical data model: source/target matrices, row-major vectorization,
//! and the separable (Kronecker) covariance of the matrix-normal law.
//!
//! Every vector handled by the rest of the crate (test directions, nuisance
//! lines, constraint coefficients) is laid out with [`vec_rows`]: the source
//! rows first, then the target rows, each row concatenated in column order.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const EIGEN_FLOOR: f64 = -1e-10;

/// Concatenates the rows of `m` in order.
pub fn vec_rows(m: ArrayView2<'_, f64>) -> Array1<f64> {
    Array1::from_iter(m.iter().copied())
}

/// Inverse of [`vec_rows`].
pub fn mat_rows(v: ArrayView1<'_, f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    if v.len() != rows * cols {
        return Err(Error::dim("mat_rows", rows * cols, v.len()));
    }
    Ok(Array2::from_shape_vec((rows, cols), v.to_vec()).expect("length checked"))
}

/// Source and target data matrices sharing a feature dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPair {
    pub source: Array2<f64>,
    pub target: Array2<f64>,
}

impl DataPair {
    pub fn new(source: Array2<f64>, target: Array2<f64>) -> Result<Self> {
        if source.ncols() != target.ncols() {
            return Err(Error::dim("DataPair columns", source.ncols(), target.ncols()));
        }
        if target.nrows() < 2 {
            return Err(Error::Data(format!(
                "target needs at least 2 rows, got {}",
                target.nrows()
            )));
        }
        if source.ncols() == 0 {
            return Err(Error::Data("feature dimension must be positive".into()));
        }
        Ok(Self { source, target })
    }

    pub fn n_source(&self) -> usize {
        self.source.nrows()
    }

    pub fn n_target(&self) -> usize {
        self.target.nrows()
    }

    pub fn n_total(&self) -> usize {
        self.n_source() + self.n_target()
    }

    pub fn dim(&self) -> usize {
        self.source.ncols()
    }

    /// Source rows stacked over target rows.
    pub fn stacked(&self) -> Array2<f64> {
        ndarray::concatenate(ndarray::Axis(0), &[self.source.view(), self.target.view()])
            .expect("column counts checked at construction")
    }

    pub fn vectorized(&self) -> Array1<f64> {
        vec_rows(self.stacked().view())
    }

    /// Rebuilds a pair from a stacked vectorization.
    pub fn from_vectorized(v: ArrayView1<'_, f64>, n_s: usize, n_t: usize, d: usize) -> Result<Self> {
        let m = mat_rows(v, n_s + n_t, d)?;
        Self::new(m.slice(s![..n_s, ..]).to_owned(), m.slice(s![n_s.., ..]).to_owned())
    }
}

/// Row/column covariance factors for both domains.
///
/// The full covariance of the stacked vectorization is
/// `blockdiag(row_source ⊗ col_source, row_target ⊗ col_target)`; it is only
/// ever applied through [`CovarianceSpec::sigma_times`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub row_source: Array2<f64>,
    pub col_source: Array2<f64>,
    pub row_target: Array2<f64>,
    pub col_target: Array2<f64>,
}

impl CovarianceSpec {
    /// Validates each factor as symmetric positive semi-definite.
    pub fn new(
        row_source: Array2<f64>,
        col_source: Array2<f64>,
        row_target: Array2<f64>,
        col_target: Array2<f64>,
    ) -> Result<Self> {
        if col_source.nrows() != col_target.nrows() {
            return Err(Error::dim(
                "column covariance",
                col_source.nrows(),
                col_target.nrows(),
            ));
        }
        check_psd("row_source", row_source.view())?;
        check_psd("col_source", col_source.view())?;
        check_psd("row_target", row_target.view())?;
        check_psd("col_target", col_target.view())?;
        Ok(Self {
            row_source,
            col_source,
            row_target,
            col_target,
        })
    }

    /// i.i.d. unit noise in both domains.
    pub fn identity(n_s: usize, n_t: usize, d: usize) -> Self {
        Self {
            row_source: Array2::eye(n_s),
            col_source: Array2::eye(d),
            row_target: Array2::eye(n_t),
            col_target: Array2::eye(d),
        }
    }

    /// Identity rows with a shared column covariance (the correlated synthetic setting).
    pub fn with_column_cov(n_s: usize, n_t: usize, col: Array2<f64>) -> Result<Self> {
        Self::new(Array2::eye(n_s), col.clone(), Array2::eye(n_t), col)
    }

    pub fn n_source(&self) -> usize {
        self.row_source.nrows()
    }

    pub fn n_target(&self) -> usize {
        self.row_target.nrows()
    }

    pub fn dim(&self) -> usize {
        self.col_source.nrows()
    }

    /// Multiplies every factor so that the full covariance scales by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            row_source: &self.row_source * c,
            col_source: self.col_source.clone(),
            row_target: &self.row_target * c,
            col_target: self.col_target.clone(),
        }
    }

    pub fn check_shape(&self, data: &DataPair) -> Result<()> {
        if self.n_source() != data.n_source() {
            return Err(Error::dim("source row covariance", data.n_source(), self.n_source()));
        }
        if self.n_target() != data.n_target() {
            return Err(Error::dim("target row covariance", data.n_target(), self.n_target()));
        }
        if self.dim() != data.dim() {
            return Err(Error::dim("column covariance", data.dim(), self.dim()));
        }
        Ok(())
    }

    /// `Σ v` using `(U ⊗ V) vec_rows(Z) = vec_rows(U Z Vᵀ)` blockwise.
    pub fn sigma_times(&self, v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let (n_s, n_t, d) = (self.n_source(), self.n_target(), self.dim());
        let expected = (n_s + n_t) * d;
        if v.len() != expected {
            return Err(Error::dim("sigma_times", expected, v.len()));
        }
        let split = n_s * d;
        let zs = mat_rows(v.slice(s![..split]), n_s, d)?;
        let zt = mat_rows(v.slice(s![split..]), n_t, d)?;
        let ys = self.row_source.dot(&zs).dot(&self.col_source.t());
        let yt = self.row_target.dot(&zt).dot(&self.col_target.t());
        let mut out = Array1::zeros(expected);
        out.slice_mut(s![..split]).assign(&vec_rows(ys.view()));
        out.slice_mut(s![split..]).assign(&vec_rows(yt.view()));
        Ok(out)
    }
}

fn check_psd(name: &'static str, m: ArrayView2<'_, f64>) -> Result<()> {
    psd_factor(name, m).map(|_| ())
}

/// Returns `L` with `L Lᵀ = m` (Cholesky when it succeeds, otherwise an
/// eigenvalue square root after clamping the floor to zero).
pub fn psd_factor(name: &'static str, m: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Covariance {
            name,
            reason: format!("not square ({}x{})", n, m.ncols()),
        });
    }
    for i in 0..n {
        for j in 0..i {
            if (m[[i, j]] - m[[j, i]]).abs() >= SYMMETRY_TOL {
                return Err(Error::Covariance {
                    name,
                    reason: format!("asymmetric at ({i}, {j})"),
                });
            }
        }
    }
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || m[[i, j]] == 0.0));
    if diagonal {
        if let Some(i) = (0..n).find(|&i| m[[i, i]] < EIGEN_FLOOR) {
            return Err(Error::Covariance {
                name,
                reason: format!("negative diagonal entry {:e} at {i}", m[[i, i]]),
            });
        }
        return Ok(Array2::from_shape_fn((n, n), |(i, j)| {
            if i == j { m[[i, i]].max(0.0).sqrt() } else { 0.0 }
        }));
    }
    let dm = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
    if let Some(ch) = dm.clone().cholesky() {
        let l = ch.l();
        return Ok(Array2::from_shape_fn((n, n), |(i, j)| l[(i, j)]));
    }
    let eig = SymmetricEigen::new(dm);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < EIGEN_FLOOR {
        return Err(Error::Covariance {
            name,
            reason: format!("negative eigenvalue {min:e}"),
        });
    }
    let roots: Vec<f64> = eig.eigenvalues.iter().map(|&e| e.max(0.0).sqrt()).collect();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        eig.eigenvectors[(i, j)] * roots[j]
    }))
}

/// Draws `mean + L_r E L_cᵀ` with standard normal `E`.
pub fn sample_matrix_normal(
    mean: ArrayView2<'_, f64>,
    row_cov: ArrayView2<'_, f64>,
    col_cov: ArrayView2<'_, f64>,
    seed: u64,
) -> Result<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_matrix_normal_with(mean, row_cov, col_cov, &mut rng)
}

pub fn sample_matrix_normal_with<R: rand::Rng + ?Sized>(
    mean: ArrayView2<'_, f64>,
    row_cov: ArrayView2<'_, f64>,
    col_cov: ArrayView2<'_, f64>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let (n, d) = mean.dim();
    if row_cov.nrows() != n {
        return Err(Error::dim("row covariance", n, row_cov.nrows()));
    }
    if col_cov.nrows() != d {
        return Err(Error::dim("column covariance", d, col_cov.nrows()));
    }
    let lr = psd_factor("row_cov", row_cov)?;
    let lc = psd_factor("col_cov", col_cov)?;
    let e = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng));
    Ok(&mean + &lr.dot(&e).dot(&lc.t()))
}

/// AR(1)-style correlation `ρ^|i-j|`.
pub fn ar_correlation(d: usize, rho: f64) -> Array2<f64> {
    Array2::from_shape_fn((d, d), |(i, j)| rho.powi((i as i32 - j as i32).abs()))
}
