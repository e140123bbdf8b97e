//! Dense linear algebra on token-embedding matrices.
//!
//! All arithmetic is `f64`. The SVD is the thin decomposition with
//! `r = min(L, d)` components, singular values sorted nonincreasing.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Singular values at or below `RANK_CUTOFF · σ_max` count as zero.
pub const RANK_CUTOFF: f64 = 1e-10;

/// An `L×d` matrix of token embeddings.
///
/// `d ≥ 1` always holds; `L = 0` is allowed so that empty padding segments
/// can be represented.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: DMatrix<f64>,
}

impl EmbeddingMatrix {
    pub fn from_matrix(data: DMatrix<f64>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::InvalidInput("embedding dimension must be ≥ 1".into()));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            let (r, c) = (pos % data.nrows(), pos / data.nrows());
            return Err(Error::InvalidInput(format!("non-finite value at row {r}, column {c}")));
        }
        Ok(Self { data })
    }

    pub fn from_row_major(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}×{cols} matrix",
                values.len()
            )));
        }
        Self::from_matrix(DMatrix::from_row_slice(rows, cols, values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_row_major(rows.len(), cols, &flat)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(cols > 0, "embedding dimension must be ≥ 1");
        Self {
            data: DMatrix::zeros(rows, cols),
        }
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[(row, col)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().copied().collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.nrows()).map(|i| self.row(i)).collect()
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.data.transpose().as_slice().to_vec()
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            data: self.data.rows(start, end - start).into_owned(),
        }
    }

    /// Stack matrices vertically. All parts must share a column count.
    pub fn vstack(parts: &[&EmbeddingMatrix]) -> Result<Self> {
        let cols = parts
            .first()
            .map(|p| p.ncols())
            .ok_or_else(|| Error::EmptyInput("nothing to stack".into()))?;
        if let Some(bad) = parts.iter().find(|p| p.ncols() != cols) {
            return Err(Error::Shape(format!("cannot stack d={} under d={cols}", bad.ncols())));
        }
        let rows = parts.iter().map(|p| p.nrows()).sum();
        let mut data = DMatrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            data.rows_mut(at, p.nrows()).copy_from(&p.data);
            at += p.nrows();
        }
        Ok(Self { data })
    }

    /// Column-wise mean over tokens; the zero vector for an empty matrix.
    pub fn column_mean(&self) -> DVector<f64> {
        if self.nrows() == 0 {
            return DVector::zeros(self.ncols());
        }
        self.data.row_mean().transpose()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.norm()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::from_matrix(&self.data * factor)
    }
}

/// Thin SVD `m = left · diag(singular_values) · right`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdDecomposition {
    /// `L×r`
    pub left: DMatrix<f64>,
    /// Nonincreasing, nonnegative, length `r`.
    pub singular_values: Vec<f64>,
    /// `r×d`; row `i` is the right singular vector `v_i`.
    pub right: DMatrix<f64>,
}

impl SvdDecomposition {
    pub fn rank_bound(&self) -> usize {
        self.singular_values.len()
    }

    /// Number of leading components above the rank cutoff.
    pub fn effective_rank(&self) -> usize {
        let Some(&sigma_max) = self.singular_values.first() else {
            return 0;
        };
        if sigma_max <= 0.0 {
            return 0;
        }
        self.singular_values
            .iter()
            .take_while(|&&s| s > RANK_CUTOFF * sigma_max)
            .count()
    }

    pub fn right_vector(&self, i: usize) -> DVector<f64> {
        self.right.row(i).transpose()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let sigma = DMatrix::from_diagonal(&DVector::from_column_slice(&self.singular_values));
        &self.left * sigma * &self.right
    }

    /// Rank-one term `σ_i u_i v_iᵀ` with a caller-supplied weight.
    pub(crate) fn outer(&self, i: usize, weight: f64) -> DMatrix<f64> {
        self.left.column(i) * self.right.row(i) * weight
    }
}

/// Thin SVD with singular values sorted nonincreasing.
pub fn svd(m: &EmbeddingMatrix) -> Result<SvdDecomposition> {
    let (rows, cols) = (m.nrows(), m.ncols());
    if rows == 0 {
        return Ok(SvdDecomposition {
            left: DMatrix::zeros(0, 0),
            singular_values: Vec::new(),
            right: DMatrix::zeros(0, cols),
        });
    }
    let a = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m.get(i, j));
    let dec = a
        .thin_svd()
        .map_err(|e| Error::InvalidInput(format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (dec.U(), dec.S(), dec.V());
    let r = rows.min(cols);
    let left = DMatrix::from_fn(rows, r, |i, c| u[(i, c)]);
    let right = DMatrix::from_fn(r, cols, |c, j| v[(j, c)]);
    let values: Vec<f64> = (0..r).map(|c| s[c]).collect();

    // Re-sort stably so the ordering contract does not depend on the backend.
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut sorted_left = DMatrix::zeros(rows, r);
    let mut sorted_right = DMatrix::zeros(r, cols);
    let mut sorted_values = Vec::with_capacity(r);
    for (dst, &src) in order.iter().enumerate() {
        sorted_left.set_column(dst, &left.column(src));
        sorted_right.set_row(dst, &right.row(src));
        sorted_values.push(values[src].max(0.0));
    }
    Ok(SvdDecomposition {
        left: sorted_left,
        singular_values: sorted_values,
        right: sorted_right,
    })
}

/// Flip each `(u_i, v_i)` pair whose right vector points against the
/// anchor's column mean. Zero dot products keep their sign.
pub fn resolve_signs(dec: &SvdDecomposition, anchor: &EmbeddingMatrix) -> Result<SvdDecomposition> {
    if anchor.ncols() != dec.right.ncols() {
        return Err(Error::Shape(format!(
            "anchor has d={}, decomposition has d={}",
            anchor.ncols(),
            dec.right.ncols()
        )));
    }
    let mean = anchor.column_mean();
    let mut out = dec.clone();
    for i in 0..dec.rank_bound() {
        if (dec.right.row(i) * &mean)[0] < 0.0 {
            out.right.row_mut(i).neg_mut();
            out.left.column_mut(i).neg_mut();
        }
    }
    Ok(out)
}

/// `Σ σ_i v_i` over the sign-resolved components of `reference`.
pub fn reference_vector(reference: &EmbeddingMatrix, anchor: &EmbeddingMatrix) -> Result<DVector<f64>> {
    let dec = resolve_signs(&svd(reference)?, anchor)?;
    let mut acc = DVector::zeros(reference.ncols());
    for (i, &sigma) in dec.singular_values.iter().enumerate() {
        acc += dec.right_vector(i) * sigma;
    }
    Ok(acc)
}

pub fn cosine(u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector("cosine of a zero-norm vector".into()));
    }
    Ok((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Orthogonal projector onto the row space of a matrix.
///
/// Stored as an orthonormal basis `B` (`rank×d`) so that `P = BᵀB` is only
/// materialized on request; this is the same operator as `eᵀ(eeᵀ)†e`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSpaceProjector {
    basis: DMatrix<f64>,
}

impl RowSpaceProjector {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn rank(&self) -> usize {
        self.basis.nrows()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// The dense `d×d` projector.
    pub fn matrix(&self) -> DMatrix<f64> {
        self.basis.transpose() * &self.basis
    }
}

pub fn row_space_projector(e: &EmbeddingMatrix) -> Result<RowSpaceProjector> {
    let dec = svd(e)?;
    let rank = dec.effective_rank();
    Ok(RowSpaceProjector {
        basis: dec.right.rows(0, rank).into_owned(),
    })
}

/// `pad · P`, computed as `(pad · Bᵀ) · B`.
pub fn project_rows(pad: &EmbeddingMatrix, p: &RowSpaceProjector) -> Result<EmbeddingMatrix> {
    if pad.ncols() != p.dim() {
        return Err(Error::Shape(format!(
            "cannot project d={} rows with a d={} projector",
            pad.ncols(),
            p.dim()
        )));
    }
    let coords = pad.as_matrix() * p.basis.transpose();
    EmbeddingMatrix::from_matrix(coords * &p.basis)
}
