//! Padding embeddings as semantic containers.
//!
//! Expression semantics are blended into the padding rows, suppression
//! semantics are then subtracted, and the first `L_exp` refined rows join
//! the expression block during selective expression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{project_rows, row_space_projector, EmbeddingMatrix};

pub const DEFAULT_GAMMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PadPolicy {
    pub gamma: f64,
    pub enabled: bool,
}

impl Default for PadPolicy {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            enabled: true,
        }
    }
}

impl PadPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invariant("0 ≤ gamma ≤ 1", format!("gamma = {gamma}")));
    }
    Ok(())
}

fn check_dims(pad: &EmbeddingMatrix, other: &EmbeddingMatrix, what: &str) -> Result<()> {
    if pad.ncols() != other.ncols() {
        return Err(Error::Shape(format!(
            "padding has d={}, {what} has d={}",
            pad.ncols(),
            other.ncols()
        )));
    }
    Ok(())
}

/// `(1−γ)·pad + γ·proj_exp(pad)`.
pub fn inject_expression(e_pad: &EmbeddingMatrix, e_exp: &EmbeddingMatrix, gamma: f64) -> Result<EmbeddingMatrix> {
    check_gamma(gamma)?;
    check_dims(e_pad, e_exp, "expression")?;
    if gamma == 0.0 || e_pad.is_empty() {
        return Ok(e_pad.clone());
    }
    let projected = project_rows(e_pad, &row_space_projector(e_exp)?)?;
    EmbeddingMatrix::from_matrix(e_pad.as_matrix() * (1.0 - gamma) + projected.as_matrix() * gamma)
}

/// `pad ← pad − γ·proj_sup(pad)` for each suppression in order, each step
/// projecting the pad as left by the previous one.
pub fn remove_suppression(
    e_pad: &EmbeddingMatrix,
    e_sup_list: &[EmbeddingMatrix],
    gamma: f64,
) -> Result<EmbeddingMatrix> {
    check_gamma(gamma)?;
    let mut pad = e_pad.clone();
    for sup in e_sup_list {
        check_dims(&pad, sup, "suppression")?;
        if gamma == 0.0 || pad.is_empty() {
            continue;
        }
        let projected = project_rows(&pad, &row_space_projector(sup)?)?;
        pad = EmbeddingMatrix::from_matrix(pad.as_matrix() - projected.as_matrix() * gamma)?;
    }
    Ok(pad)
}

/// First `min(l_exp, rows)` padding rows.
pub fn padding_subset(e_pad: &EmbeddingMatrix, l_exp: usize) -> EmbeddingMatrix {
    e_pad.slice_rows(0, l_exp.min(e_pad.nrows()))
}
