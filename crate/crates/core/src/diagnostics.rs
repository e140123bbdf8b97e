//! Numeric versions of the embedding analyses: singular spectra per segment,
//! how appending padding tokens moves a segment's direction, and per-token
//! padding alignment.
//!
//! Matrix-to-matrix similarity is the cosine between token-mean vectors.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{cosine, svd, EmbeddingMatrix};

pub fn singular_spectrum(e: &EmbeddingMatrix) -> Result<Vec<f64>> {
    Ok(svd(e)?.singular_values)
}

/// `σ₁ / σ₂`; infinite when `σ₂ = 0` or only one value exists, `None` for an
/// empty or all-zero spectrum.
pub fn dominance_ratio(spectrum: &[f64]) -> Option<f64> {
    match spectrum {
        [] => None,
        [s1, ..] if *s1 == 0.0 => None,
        [_] => Some(f64::INFINITY),
        [s1, s2, ..] => Some(if *s2 == 0.0 { f64::INFINITY } else { s1 / s2 }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub labels: Vec<String>,
    pub spectra: Vec<Vec<f64>>,
    pub dominance_ratio: Vec<Option<f64>>,
}

impl SpectrumReport {
    pub fn build<'a>(segments: impl IntoIterator<Item = (String, &'a EmbeddingMatrix)>) -> Result<Self> {
        let mut report = SpectrumReport {
            labels: Vec::new(),
            spectra: Vec::new(),
            dominance_ratio: Vec::new(),
        };
        for (label, e) in segments {
            let spectrum = singular_spectrum(e)?;
            report.dominance_ratio.push(dominance_ratio(&spectrum));
            report.labels.push(label);
            report.spectra.push(spectrum);
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub n: usize,
    pub sim_to_ei: f64,
    pub sim_to_pad: f64,
}

/// Similarity of `[e_i; e_pad[:n]]` to `e_i` and to `e_pad`, for `n = 0..=n_max`.
pub fn padding_similarity_curve(
    e_i: &EmbeddingMatrix,
    e_pad: &EmbeddingMatrix,
    n_max: usize,
) -> Result<Vec<CurvePoint>> {
    if e_i.ncols() != e_pad.ncols() {
        return Err(Error::Shape(format!(
            "segment has d={}, padding has d={}",
            e_i.ncols(),
            e_pad.ncols()
        )));
    }
    if n_max > e_pad.nrows() {
        return Err(Error::Shape(format!(
            "n_max = {n_max} exceeds {} padding rows",
            e_pad.nrows()
        )));
    }
    if e_i.is_empty() || e_pad.is_empty() {
        return Err(Error::DegenerateVector(
            "similarity curve needs nonempty segment and padding".into(),
        ));
    }
    let seg_mean = e_i.column_mean();
    let pad_mean = e_pad.column_mean();

    // Running sum of [e_i; pad[:n]] keeps each mean in O(d).
    let mut sum: DVector<f64> = &seg_mean * e_i.nrows() as f64;
    let mut curve = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        if n > 0 {
            sum += e_pad.as_matrix().row(n - 1).transpose();
        }
        let mean = &sum / (e_i.nrows() + n) as f64;
        let sim_to_ei = if n == 0 { 1.0 } else { cosine(&mean, &seg_mean)? };
        curve.push(CurvePoint {
            n,
            sim_to_ei,
            sim_to_pad: cosine(&mean, &pad_mean)?,
        });
    }
    Ok(curve)
}

/// Cosine of every padding row with the token mean of `e_i`.
pub fn pad_component_similarity(e_pad: &EmbeddingMatrix, e_i: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if e_i.ncols() != e_pad.ncols() {
        return Err(Error::Shape(format!(
            "segment has d={}, padding has d={}",
            e_i.ncols(),
            e_pad.ncols()
        )));
    }
    let mean = e_i.column_mean();
    (0..e_pad.nrows())
        .map(|r| {
            cosine(&e_pad.as_matrix().row(r).transpose(), &mean)
                .map_err(|_| Error::DegenerateVector(format!("padding row {r} or segment mean has zero norm")))
        })
        .collect()
}
