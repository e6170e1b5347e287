//! Gradient-based local contributions of objects and words.
//!
//! The contribution of an input element to the ground-truth answer is the
//! sum of the components of the gradient of the answer mass with respect to
//! that element's encoded row. Object gradients are taken at the projected
//! object rows, word gradients at the embedded word rows (with the summary
//! recomputed from them), matching the encoder-output reading of the model
//! inputs. With several weighted ground-truth answers the differentiated
//! scalar is the score-weighted sum of their predicted probabilities, which
//! reduces to the single-answer case for one answer with weight one.

use ndarray::Array2;
use thiserror::Error;

use crate::data::Sample;
use crate::model::VqaModel;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("sample {question_id} has no ground-truth answers to attribute")]
    EmptyGroundTruth { question_id: String },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Which input family an element index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementKind {
    Object,
    Word,
}

/// Per-element contribution scores for one sample.
#[derive(Debug, Clone)]
pub struct SaliencyScores {
    /// The differentiated scalar: weighted ground-truth answer mass.
    pub target_answer_mass: f64,
    /// `(element_index, contribution)` pairs, one per object or word.
    pub scores: Vec<(usize, f64)>,
}

impl SaliencyScores {
    pub fn score(&self, index: usize) -> f64 {
        self.scores[index].1
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn gt_weights(model: &VqaModel, sample: &Sample) -> Result<Vec<f64>, SaliencyError> {
    if sample.answers.is_empty() {
        return Err(SaliencyError::EmptyGroundTruth {
            question_id: sample.question.question_id.clone(),
        });
    }
    Ok(sample.answers.dense(model.answer_vocab()))
}

fn row_sums(mass: f64, grads: &Array2<f64>) -> SaliencyScores {
    SaliencyScores {
        target_answer_mass: mass,
        scores: grads
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| (i, row.sum()))
            .collect(),
    }
}

/// Contribution of every object to the ground-truth answer mass.
pub fn object_contributions(
    model: &VqaModel,
    sample: &Sample,
) -> Result<SaliencyScores, SaliencyError> {
    let weights = gt_weights(model, sample)?;
    let image = model.encode_image(&sample.image)?;
    let question = model.encode_question(&sample.question);
    let (mass, grad_obj, _) =
        model.answer_mass_gradients(&image.features, &question.word_features, &weights);
    Ok(row_sums(mass, &grad_obj))
}

/// Contribution of every question word to the ground-truth answer mass.
pub fn word_contributions(
    model: &VqaModel,
    sample: &Sample,
) -> Result<SaliencyScores, SaliencyError> {
    let weights = gt_weights(model, sample)?;
    let image = model.encode_image(&sample.image)?;
    let question = model.encode_question(&sample.question);
    let (mass, _, grad_words) =
        model.answer_mass_gradients(&image.features, &question.word_features, &weights);
    Ok(row_sums(mass, &grad_words))
}

/// Central-difference contribution of one row of `rows` under an arbitrary
/// scalar function: perturbs each component of the row by `±epsilon` and
/// sums the per-component difference quotients.
pub fn central_difference_row_sum(
    f: &dyn Fn(&Array2<f64>) -> f64,
    rows: &Array2<f64>,
    row: usize,
    epsilon: f64,
) -> f64 {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut perturbed = rows.clone();
    let mut total = 0.0;
    for col in 0..rows.ncols() {
        let orig = rows[[row, col]];
        perturbed[[row, col]] = orig + epsilon;
        let plus = f(&perturbed);
        perturbed[[row, col]] = orig - epsilon;
        let minus = f(&perturbed);
        perturbed[[row, col]] = orig;
        total += (plus - minus) / (2.0 * epsilon);
    }
    total
}

/// Finite-difference oracle for the analytic contributions: recomputes the
/// answer mass with one encoded row perturbed component by component.
pub fn finite_difference_contribution(
    model: &VqaModel,
    sample: &Sample,
    element_kind: ElementKind,
    index: usize,
    epsilon: f64,
) -> Result<f64, SaliencyError> {
    let weights = gt_weights(model, sample)?;
    let image = model.encode_image(&sample.image)?;
    let question = model.encode_question(&sample.question);
    let obj_rows = image.features;
    let word_rows = question.word_features;
    let value = match element_kind {
        ElementKind::Object => central_difference_row_sum(
            &|rows| model.answer_mass_from_rows(rows, &word_rows, &weights),
            &obj_rows,
            index,
            epsilon,
        ),
        ElementKind::Word => central_difference_row_sum(
            &|rows| model.answer_mass_from_rows(&obj_rows, rows, &weights),
            &word_rows,
            index,
            epsilon,
        ),
    };
    Ok(value)
}

/// Relative-error agreement between an analytic and a finite-difference
/// value, with an absolute fallback for near-zero contributions.
pub fn gradients_agree(analytic: f64, finite: f64, rel_tol: f64) -> bool {
    let scale = analytic.abs().max(finite.abs());
    (analytic - finite).abs() <= rel_tol * scale || (analytic - finite).abs() <= 1e-10
}
