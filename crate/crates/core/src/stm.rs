//! Selective text-embedding modification.
//!
//! Each stage compares the right singular vectors of one segment against a
//! reference direction `v_ref = Σ σ_i v_i` taken from a reference embedding,
//! uses the mean cosine as an adaptive threshold, and rescales only the
//! components on the chosen side of it:
//!
//! - expression: reference `[e_id; e_exp]`, components with cosine `> ζ`
//!   get `σ ← β·e^{ασ}·σ`;
//! - suppression: reference `e_id`, components with cosine `< ζ` get
//!   `σ ← β′·e^{−α′σ}·σ`.
//!
//! Components whose singular value is numerically zero carry no direction
//! and are left out of the threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{assign_roles, reassemble, segment, PromptManifest, SegmentId};
use crate::pad::{inject_expression, padding_subset, remove_suppression, PadPolicy, DEFAULT_GAMMA};
use crate::schedule::StepRange;
use crate::tensor::{cosine, reference_vector, resolve_signs, svd, EmbeddingMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StmParams {
    pub alpha_exp: f64,
    pub beta_exp: f64,
    pub alpha_sup: f64,
    pub beta_sup: f64,
    pub blocks: Vec<usize>,
    pub steps: StepRange,
    pub total_steps: usize,
}

impl Default for StmParams {
    fn default() -> Self {
        Self {
            alpha_exp: 0.025,
            beta_exp: 1.0,
            alpha_sup: -0.01,
            beta_sup: 0.05,
            blocks: vec![25, 28, 53, 54, 56],
            steps: StepRange::new(7, 11),
            total_steps: 28,
        }
    }
}

impl StmParams {
    /// Parameters under which both stages reproduce their input.
    pub fn identity() -> Self {
        Self {
            alpha_exp: 0.0,
            beta_exp: 1.0,
            alpha_sup: 0.0,
            beta_sup: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_exp", self.alpha_exp),
            ("beta_exp", self.beta_exp),
            ("alpha_sup", self.alpha_sup),
            ("beta_sup", self.beta_sup),
        ] {
            if !v.is_finite() {
                return Err(Error::invariant("finite parameters", format!("{name} = {v}")));
            }
        }
        if self.beta_exp <= 0.0 {
            return Err(Error::invariant(
                "beta_exp > 0",
                format!("beta_exp = {}", self.beta_exp),
            ));
        }
        if self.beta_sup <= 0.0 {
            return Err(Error::invariant(
                "beta_sup > 0",
                format!("beta_sup = {}", self.beta_sup),
            ));
        }
        if self.blocks.is_empty() {
            return Err(Error::invariant("blocks nonempty", "no STM blocks"));
        }
        if self.steps.is_empty() || self.steps.lo < 1 || self.steps.hi > self.total_steps {
            return Err(Error::invariant(
                "steps within [1, total_steps]",
                format!(
                    "steps [{}, {}] with total_steps {}",
                    self.steps.lo, self.steps.hi, self.total_steps
                ),
            ));
        }
        Ok(())
    }

    /// Multiplier `β·e^{ασ}` applied to a selected expression component.
    pub fn expression_factor(&self, sigma: f64) -> f64 {
        self.beta_exp * (self.alpha_exp * sigma).exp()
    }

    /// Multiplier `β′·e^{−α′σ}` applied to a selected suppression component.
    pub fn suppression_factor(&self, sigma: f64) -> f64 {
        self.beta_sup * (-self.alpha_sup * sigma).exp()
    }

    /// Largest σ for which the suppression factor stays ≤ 1, when that bound
    /// is finite (`α′ < 0`, `β′ ≤ 1`). About 299.57 for the defaults.
    pub fn suppression_crossover(&self) -> Option<f64> {
        if self.alpha_sup < 0.0 && self.beta_sup <= 1.0 {
            Some((1.0 / self.beta_sup).ln() / -self.alpha_sup)
        } else {
            None
        }
    }
}

/// Contents of a params file. Every key is optional; `gamma` is reported as
/// defaulted when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModifyParams {
    pub alpha_exp: f64,
    pub beta_exp: f64,
    pub alpha_sup: f64,
    pub beta_sup: f64,
    pub blocks: Vec<usize>,
    pub steps: StepRange,
    pub total_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub pad_subset: bool,
}

impl Default for ModifyParams {
    fn default() -> Self {
        let stm = StmParams::default();
        Self {
            alpha_exp: stm.alpha_exp,
            beta_exp: stm.beta_exp,
            alpha_sup: stm.alpha_sup,
            beta_sup: stm.beta_sup,
            blocks: stm.blocks,
            steps: stm.steps,
            total_steps: stm.total_steps,
            gamma: None,
            pad_subset: true,
        }
    }
}

impl ModifyParams {
    pub fn stm(&self) -> StmParams {
        StmParams {
            alpha_exp: self.alpha_exp,
            beta_exp: self.beta_exp,
            alpha_sup: self.alpha_sup,
            beta_sup: self.beta_sup,
            blocks: self.blocks.clone(),
            steps: self.steps,
            total_steps: self.total_steps,
        }
    }

    pub fn pad_policy(&self) -> PadPolicy {
        PadPolicy {
            gamma: self.gamma.unwrap_or(DEFAULT_GAMMA),
            enabled: self.pad_subset,
        }
    }

    pub fn gamma_defaulted(&self) -> bool {
        self.gamma.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        self.stm().validate()?;
        self.pad_policy().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Expression,
    Suppression,
}

/// What one stage saw and did, component by component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment: Option<String>,
    pub threshold: f64,
    pub similarities: Vec<f64>,
    pub selected: Vec<bool>,
    pub singular_values: Vec<f64>,
    pub scale_factors: Vec<f64>,
}

impl SelectionReport {
    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

fn selective_rescale(
    target: &EmbeddingMatrix,
    reference: &EmbeddingMatrix,
    reference_anchor: &EmbeddingMatrix,
    stage: Stage,
    factor: impl Fn(f64) -> f64,
) -> Result<(EmbeddingMatrix, SelectionReport)> {
    if target.ncols() != reference.ncols() {
        return Err(Error::Shape(format!(
            "segment has d={}, reference has d={}",
            target.ncols(),
            reference.ncols()
        )));
    }
    if target.is_empty() || reference.is_empty() {
        return Err(Error::InvalidInput(
            "selective rescaling needs nonempty segments".into(),
        ));
    }

    let v_ref = reference_vector(reference, reference_anchor)?;
    if v_ref.norm() == 0.0 {
        return Err(Error::DegenerateVector("reference vector is zero".into()));
    }

    let dec = resolve_signs(&svd(target)?, target)?;
    let rank = dec.effective_rank();
    let similarities = (0..rank)
        .map(|i| cosine(&dec.right_vector(i), &v_ref))
        .collect::<Result<Vec<_>>>()?;
    let threshold = if rank == 0 {
        0.0
    } else {
        similarities.iter().sum::<f64>() / rank as f64
    };

    let selected: Vec<bool> = similarities
        .iter()
        .map(|&s| match stage {
            Stage::Expression => s > threshold,
            Stage::Suppression => s < threshold,
        })
        .collect();
    let singular_values = dec.singular_values[..rank].to_vec();
    let scale_factors: Vec<f64> = singular_values
        .iter()
        .zip(&selected)
        .map(|(&sigma, &sel)| if sel { factor(sigma) } else { 1.0 })
        .collect();

    // Same singular vectors, updated singular values: adding the change of
    // each selected rank-one term keeps untouched components exact.
    let mut out = target.as_matrix().clone();
    for (i, (&sigma, &f)) in singular_values.iter().zip(&scale_factors).enumerate() {
        if selected[i] {
            out += dec.outer(i, f * sigma - sigma);
        }
    }

    Ok((
        EmbeddingMatrix::from_matrix(out)?,
        SelectionReport {
            stage,
            segment: None,
            threshold,
            similarities,
            selected,
            singular_values,
            scale_factors,
        },
    ))
}

/// Amplify the components of `e_exp` aligned with `[e_id; e_exp]`.
pub fn selective_expression(
    e_exp: &EmbeddingMatrix,
    e_id: &EmbeddingMatrix,
    params: &StmParams,
) -> Result<(EmbeddingMatrix, SelectionReport)> {
    if e_exp.ncols() != e_id.ncols() {
        return Err(Error::Shape(format!(
            "expression has d={}, identity has d={}",
            e_exp.ncols(),
            e_id.ncols()
        )));
    }
    let reference = EmbeddingMatrix::vstack(&[e_id, e_exp])?;
    selective_rescale(e_exp, &reference, e_exp, Stage::Expression, |s| {
        params.expression_factor(s)
    })
}

/// Shrink the components of `e_sup` pointing away from `e_id`.
pub fn selective_suppression(
    e_sup: &EmbeddingMatrix,
    e_id: &EmbeddingMatrix,
    params: &StmParams,
) -> Result<(EmbeddingMatrix, SelectionReport)> {
    selective_rescale(e_sup, e_id, e_id, Stage::Suppression, |s| params.suppression_factor(s))
}

/// Full modification of a combined embedding for one target image.
///
/// With the pad policy enabled, the padding rows are first refined (inject
/// the expression, then remove each suppression), and the first `L_exp`
/// refined rows are stacked under the expression segment for selective
/// expression. Suppressions are processed independently in manifest order.
/// Identity rows are never written.
pub fn apply_stm(
    e_single: &EmbeddingMatrix,
    manifest: &PromptManifest,
    target_index: usize,
    params: &StmParams,
    pad_policy: &PadPolicy,
) -> Result<(EmbeddingMatrix, Vec<SelectionReport>)> {
    params.validate()?;
    pad_policy.validate()?;
    let seg = segment(e_single, manifest)?;
    let roles = assign_roles(&seg, target_index)?;
    let target_id = SegmentId::Image(target_index - 1);
    let l_exp = roles.expression.nrows();

    let mut replacements = BTreeMap::new();
    let mut reports = Vec::with_capacity(roles.suppressions.len() + 1);

    let use_pad = pad_policy.enabled && !seg.pad_seg.is_empty();
    let refined_pad = if use_pad {
        let injected = inject_expression(&seg.pad_seg, &roles.expression, pad_policy.gamma)?;
        Some(remove_suppression(&injected, &roles.suppressions, pad_policy.gamma)?)
    } else {
        None
    };

    let (expressed, mut report) = match &refined_pad {
        Some(pad) => {
            let subset = padding_subset(pad, l_exp);
            let augmented = EmbeddingMatrix::vstack(&[&roles.expression, &subset])?;
            selective_expression(&augmented, &seg.id_seg, params)?
        }
        None => selective_expression(&roles.expression, &seg.id_seg, params)?,
    };
    report.segment = Some(target_id.to_string());
    reports.push(report);

    replacements.insert(target_id, expressed.slice_rows(0, l_exp));
    if let Some(pad) = refined_pad {
        let n_sub = expressed.nrows() - l_exp;
        let tail = pad.slice_rows(n_sub, pad.nrows());
        let head = expressed.slice_rows(l_exp, expressed.nrows());
        replacements.insert(SegmentId::Padding, EmbeddingMatrix::vstack(&[&head, &tail])?);
    }

    for (id, sup) in roles.suppression_ids().zip(&roles.suppressions) {
        let (suppressed, mut report) = selective_suppression(sup, &seg.id_seg, params)?;
        report.segment = Some(id.to_string());
        reports.push(report);
        replacements.insert(id, suppressed);
    }

    Ok((reassemble(&seg, &replacements)?, reports))
}
