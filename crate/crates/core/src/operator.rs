//! Forward operators mapping nodal coefficients to sensor readings.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorMatrix {
    Dense(DMatrix<f64>),
    Sparse(CsrMatrix),
}

/// An `s × (d·κ)` forward operator.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOperator {
    matrix: OperatorMatrix,
    id: String,
}

impl ForwardOperator {
    pub fn dense(matrix: DMatrix<f64>, id: impl Into<String>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("forward operator has non-finite entries".into()));
        }
        Ok(ForwardOperator { matrix: OperatorMatrix::Dense(matrix), id: id.into() })
    }

    pub fn sparse(matrix: CsrMatrix, id: impl Into<String>) -> Result<Self> {
        if matrix.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("forward operator has non-finite entries".into()));
        }
        Ok(ForwardOperator { matrix: OperatorMatrix::Sparse(matrix), id: id.into() })
    }

    pub fn identity(n: usize) -> Self {
        ForwardOperator { matrix: OperatorMatrix::Sparse(CsrMatrix::identity(n)), id: "identity".into() }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn matrix(&self) -> &OperatorMatrix {
        &self.matrix
    }

    /// Number of sensors `s`.
    pub fn rows(&self) -> usize {
        match &self.matrix {
            OperatorMatrix::Dense(m) => m.nrows(),
            OperatorMatrix::Sparse(m) => m.nrows(),
        }
    }

    /// Domain dimension `d·κ`.
    pub fn cols(&self) -> usize {
        match &self.matrix {
            OperatorMatrix::Dense(m) => m.ncols(),
            OperatorMatrix::Sparse(m) => m.ncols(),
        }
    }

    /// `K c`
    pub fn apply(&self, c: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(c.len(), self.cols());
        match &self.matrix {
            OperatorMatrix::Dense(m) => m * c,
            OperatorMatrix::Sparse(m) => m.mul_vec(c),
        }
    }

    /// `Kᵀ y`
    pub fn apply_t(&self, y: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(y.len(), self.rows());
        match &self.matrix {
            OperatorMatrix::Dense(m) => m.tr_mul(y),
            OperatorMatrix::Sparse(m) => m.tr_mul_vec(y),
        }
    }

    /// `K X` for a matrix whose columns live in the domain.
    pub fn apply_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.matrix {
            OperatorMatrix::Dense(m) => m * x,
            OperatorMatrix::Sparse(_) => {
                let mut out = DMatrix::zeros(self.rows(), x.ncols());
                for j in 0..x.ncols() {
                    out.set_column(j, &self.apply(&x.column(j).into_owned()));
                }
                out
            }
        }
    }

    pub fn col_norms_sq(&self) -> Vec<f64> {
        match &self.matrix {
            OperatorMatrix::Dense(m) => m.column_iter().map(|c| c.norm_squared()).collect(),
            OperatorMatrix::Sparse(m) => m.col_norms_sq(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.matrix {
            OperatorMatrix::Dense(m) => m.clone(),
            OperatorMatrix::Sparse(m) => m.to_dense(),
        }
    }

    pub fn check_domain(&self, dim: usize) -> Result<()> {
        if self.cols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "operator {:?} has {} columns, expected {dim}",
                self.id,
                self.cols()
            )));
        }
        Ok(())
    }
}
