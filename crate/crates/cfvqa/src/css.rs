//! Counterfactual sample synthesis: V-CSS masks critical image objects,
//! Q-CSS masks critical question words, and a dynamic answer assignment
//! probe reassigns ground truth for the masked sample.
//!
//! One combined training step trains on the original sample, draws a branch,
//! synthesizes the counterfactual, and trains on it. Critical-object
//! selection keeps the smallest top set whose softmax mass over the initial
//! object set exceeds the `eta` threshold; the counterfactual visual input
//! is the complement of that set in the full image. Critical-word selection
//! masks the top-scored non-question-type words for the trained variant and
//! the complementary words for the probe variant.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AnswerScores, ImageRecord, QuestionRecord, Sample};
use crate::databench::EmbeddingLexicon;
use crate::model::{Mode, VqaModel, MASK_TOKEN};
use crate::saliency::{self, SaliencyError, SaliencyScores};

#[derive(Debug, Error)]
pub enum CssError {
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error("category {category:?} is missing from the embedding lexicon")]
    MissingEmbedding { category: String },
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// All synthesis hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CssConfig {
    /// Softmax-mass threshold for the dynamic critical-object count.
    pub eta: f64,
    /// Branch proportion: a uniform draw at or above `delta` runs V-CSS,
    /// below it Q-CSS.
    pub delta: f64,
    /// Size of the initial object set ranked by question-noun similarity.
    pub initial_set_size: usize,
    /// Number of critical words masked by Q-CSS.
    pub word_top_k: usize,
    /// Number of probe answers excluded from the reassigned ground truth.
    pub answer_top_n: usize,
    /// Probe with the fused ensemble output instead of the plain branch.
    pub probe_uses_fusion: bool,
}

impl Default for CssConfig {
    fn default() -> Self {
        CssConfig {
            eta: 0.65,
            delta: 0.5,
            initial_set_size: 8,
            word_top_k: 1,
            answer_top_n: 5,
            probe_uses_fusion: false,
        }
    }
}

impl CssConfig {
    pub fn validate(&self) -> Result<(), CssError> {
        if !(0.0 < self.eta && self.eta < 1.0) {
            return Err(CssError::InvalidConfig(format!(
                "eta {} must lie strictly between 0 and 1",
                self.eta
            )));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(CssError::InvalidConfig(format!(
                "delta {} must lie in [0, 1]",
                self.delta
            )));
        }
        if self.initial_set_size < 1 {
            return Err(CssError::InvalidConfig("initial_set_size must be >= 1".into()));
        }
        if self.word_top_k < 1 {
            return Err(CssError::InvalidConfig("word_top_k must be >= 1".into()));
        }
        if self.answer_top_n < 1 {
            return Err(CssError::InvalidConfig("answer_top_n must be >= 1".into()));
        }
        Ok(())
    }
}

/// Objects most related to the question and answer nouns, ranked by
/// embedding similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialObjectSet {
    /// `(object_id, similarity)` sorted by descending similarity.
    pub members: Vec<(u32, f64)>,
    /// No noun could be extracted; every object got similarity zero.
    pub noun_fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CounterfactualKind {
    #[serde(rename = "V")]
    Visual,
    #[serde(rename = "Q")]
    Question,
}

/// A synthesized training sample plus full provenance for audit dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSample {
    pub kind: CounterfactualKind,
    /// The sample actually trained on: reduced image or masked question,
    /// with the reassigned answers.
    pub base: Sample,
    /// V-CSS: critical objects removed from the visual input.
    pub masked_ids: Option<Vec<u32>>,
    /// V-CSS: objects kept as the counterfactual visual input.
    pub kept_ids: Option<Vec<u32>>,
    /// Q-CSS: probe question (only question type and critical words kept).
    pub q_plus_tokens: Option<Vec<String>>,
    /// Q-CSS: trained question (critical words masked).
    pub q_minus_tokens: Option<Vec<String>>,
    /// Reassigned ground truth; equals `base.answers`.
    pub assigned_answers: AnswerScores,
    /// Top-N probe answers the ground truth was purged of.
    pub probe_answers: Vec<String>,
    /// Similarity scores of the initial object set (V-CSS only).
    pub sim_scores: Vec<(u32, f64)>,
    /// Contribution scores: per object id for V-CSS, per word index for
    /// Q-CSS.
    pub saliency_scores: Vec<(u32, f64)>,
}

impl CounterfactualSample {
    /// Check the masking invariants against the originating sample.
    pub fn check_against(&self, original: &Sample) -> Result<(), String> {
        match self.kind {
            CounterfactualKind::Visual => {
                let masked: HashSet<u32> =
                    self.masked_ids.clone().unwrap_or_default().into_iter().collect();
                let kept: HashSet<u32> =
                    self.kept_ids.clone().unwrap_or_default().into_iter().collect();
                if !masked.is_disjoint(&kept) {
                    return Err("masked and kept object sets overlap".into());
                }
                let all: HashSet<u32> = original.image.object_ids().into_iter().collect();
                let union: HashSet<u32> = masked.union(&kept).copied().collect();
                if union != all {
                    return Err("masked and kept sets do not partition the image".into());
                }
                let base_ids: HashSet<u32> = self.base.image.object_ids().into_iter().collect();
                if base_ids != kept {
                    return Err("base image does not match the kept set".into());
                }
            }
            CounterfactualKind::Question => {
                let q_plus = self.q_plus_tokens.as_ref().ok_or("missing Q+ tokens")?;
                let q_minus = self.q_minus_tokens.as_ref().ok_or("missing Q- tokens")?;
                let n = original.question.tokens.len();
                if q_plus.len() != n || q_minus.len() != n {
                    return Err("token counts changed".into());
                }
                let ttc = original.question.type_token_count;
                for i in 0..n {
                    let orig = &original.question.tokens[i];
                    let masked_plus = q_plus[i] == MASK_TOKEN && *orig != MASK_TOKEN;
                    let masked_minus = q_minus[i] == MASK_TOKEN && *orig != MASK_TOKEN;
                    if i < ttc {
                        if masked_plus || masked_minus {
                            return Err(format!("question-type token {i} was masked"));
                        }
                    } else if masked_plus == masked_minus {
                        return Err(format!(
                            "token {i} must be masked in exactly one of Q+ and Q-"
                        ));
                    }
                    if !masked_plus && q_plus[i] != *orig {
                        return Err(format!("token {i} changed in Q+"));
                    }
                    if !masked_minus && q_minus[i] != *orig {
                        return Err(format!("token {i} changed in Q-"));
                    }
                }
                if self.base.question.tokens != *q_minus {
                    return Err("base question does not match Q-".into());
                }
            }
        }
        for a in &self.probe_answers {
            if self.assigned_answers.contains(a) {
                return Err(format!("assigned answers contain probe answer {a:?}"));
            }
        }
        Ok(())
    }
}

/// Per-object similarity against the nouns extracted from the question and
/// answers, in image order. Returns the scores plus whether the no-noun
/// fallback fired.
pub fn object_similarities(
    sample: &Sample,
    lexicon: &EmbeddingLexicon,
) -> Result<(Vec<(u32, f64)>, bool), CssError> {
    let mut nouns: Vec<&str> = Vec::new();
    for tok in &sample.question.tokens {
        if lexicon.is_noun(tok) && !nouns.contains(&tok.as_str()) {
            nouns.push(tok);
        }
    }
    for (answer, _) in sample.answers.iter() {
        for word in answer.split_whitespace() {
            if lexicon.is_noun(word) && !nouns.contains(&word) {
                nouns.push(word);
            }
        }
    }
    let fallback = nouns.is_empty();
    let mut sims = Vec::with_capacity(sample.image.objects.len());
    for obj in &sample.image.objects {
        if !lexicon.contains(&obj.category) {
            return Err(CssError::MissingEmbedding {
                category: obj.category.clone(),
            });
        }
        let sim = if fallback {
            0.0
        } else {
            nouns
                .iter()
                .map(|n| lexicon.cosine(&obj.category, n).expect("noun is in lexicon"))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        sims.push((obj.object_id, sim));
    }
    Ok((sims, fallback))
}

/// Select the objects most related to the question-answer pair.
pub fn initial_object_selection(
    sample: &Sample,
    lexicon: &EmbeddingLexicon,
    config: &CssConfig,
) -> Result<InitialObjectSet, CssError> {
    config.validate()?;
    let (mut sims, noun_fallback) = object_similarities(sample, lexicon)?;
    // Stable sort keeps image order among ties.
    sims.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("similarities are finite"));
    sims.truncate(config.initial_set_size);
    Ok(InitialObjectSet {
        members: sims,
        noun_fallback,
    })
}

/// Split the image into the critical set `I+` (smallest top group of the
/// initial set whose softmax contribution mass exceeds `eta`) and its
/// complement `I-` over the full object set.
pub fn critical_object_selection(
    image: &ImageRecord,
    initial: &InitialObjectSet,
    scores: &SaliencyScores,
    config: &CssConfig,
) -> (Vec<u32>, Vec<u32>) {
    assert!(!initial.members.is_empty(), "initial object set is empty");
    let index_of: std::collections::HashMap<u32, usize> = image
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| (o.object_id, i))
        .collect();
    // (object_id, image position, contribution) for the initial set, ranked
    // by contribution; ties break toward the lower image position.
    let mut ranked: Vec<(u32, usize, f64)> = initial
        .members
        .iter()
        .map(|(id, _)| {
            let pos = index_of[id];
            (*id, pos, scores.score(pos))
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("contributions are finite")
            .then(a.1.cmp(&b.1))
    });

    let max_score = ranked
        .iter()
        .map(|(_, _, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = ranked.iter().map(|(_, _, s)| (s - max_score).exp()).sum();
    let mut cumulative = 0.0;
    let mut k = ranked.len();
    for (count, (_, _, s)) in ranked.iter().enumerate() {
        cumulative += (s - max_score).exp();
        if cumulative / total > config.eta {
            k = count + 1;
            break;
        }
    }
    let critical: HashSet<u32> = ranked[..k].iter().map(|(id, _, _)| *id).collect();
    let i_plus: Vec<u32> = ranked[..k].iter().map(|(id, _, _)| *id).collect();
    let i_minus: Vec<u32> = image
        .objects
        .iter()
        .map(|o| o.object_id)
        .filter(|id| !critical.contains(id))
        .collect();
    (i_plus, i_minus)
}

/// Mask the top-scored non-question-type words: `Q-` masks the critical
/// words, `Q+` masks the complementary ones. Returns `None` for questions
/// consisting only of question-type tokens.
pub fn critical_word_selection(
    question: &QuestionRecord,
    scores: &SaliencyScores,
    config: &CssConfig,
) -> Option<(QuestionRecord, QuestionRecord)> {
    let candidates: Vec<usize> = question.non_type_indices().collect();
    if candidates.is_empty() {
        return None;
    }
    let mut ranked = candidates.clone();
    ranked.sort_by(|&a, &b| {
        scores
            .score(b)
            .partial_cmp(&scores.score(a))
            .expect("contributions are finite")
            .then(a.cmp(&b))
    });
    let critical: HashSet<usize> = ranked
        .iter()
        .take(config.word_top_k.min(ranked.len()))
        .copied()
        .collect();

    let mut q_plus = question.clone();
    let mut q_minus = question.clone();
    for idx in candidates {
        if critical.contains(&idx) {
            q_minus.tokens[idx] = MASK_TOKEN.to_string();
        } else {
            q_plus.tokens[idx] = MASK_TOKEN.to_string();
        }
    }
    Some((q_plus, q_minus))
}

/// Result of the dynamic answer assignment probe.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignedAnswers {
    /// Ground-truth entries not predicted by the probe (may be empty).
    pub a_minus: AnswerScores,
    /// The probe's top-N answers.
    pub a_plus: Vec<String>,
}

/// Probe the model on the kept-critical pair and strip every probe-predicted
/// answer from the ground truth. The model is flipped to eval mode for the
/// probe and restored afterwards; parameters are never touched.
pub fn dynamic_answer_assign(
    model: &mut VqaModel,
    probe_image: &ImageRecord,
    probe_question: &QuestionRecord,
    gt: &AnswerScores,
    config: &CssConfig,
) -> Result<AssignedAnswers, CssError> {
    let prior_mode = model.mode();
    model.set_mode(Mode::Eval);
    let probe = Sample {
        image: probe_image.clone(),
        question: probe_question.clone(),
        answers: gt.clone(),
        split_tag: crate::data::SplitTag::Train,
    };
    let result = if config.probe_uses_fusion {
        model.fused_predict(&probe)
    } else {
        model.predict(&probe)
    };
    model.set_mode(prior_mode);
    let dist = result?;

    let vocab = model.answer_vocab();
    let n = config.answer_top_n.min(vocab.len());
    let a_plus: Vec<String> = dist.ranked()[..n]
        .iter()
        .map(|&i| vocab.answer(i).to_string())
        .collect();
    let a_minus = AnswerScores::from_pairs(
        gt.iter()
            .filter(|(answer, _)| !a_plus.iter().any(|p| p == answer))
            .map(|(answer, score)| (answer.to_string(), score)),
    );
    Ok(AssignedAnswers { a_minus, a_plus })
}

fn synthesize_vcss_with_scores(
    model: &mut VqaModel,
    sample: &Sample,
    lexicon: &EmbeddingLexicon,
    scores: &SaliencyScores,
    config: &CssConfig,
) -> Result<Option<CounterfactualSample>, CssError> {
    let initial = initial_object_selection(sample, lexicon, config)?;
    let (i_plus, i_minus) = critical_object_selection(&sample.image, &initial, scores, config);
    if i_minus.is_empty() {
        return Ok(None);
    }
    let plus_set: HashSet<u32> = i_plus.iter().copied().collect();
    let minus_set: HashSet<u32> = i_minus.iter().copied().collect();
    let probe_image = sample.image.retain_objects(&plus_set);
    let assigned =
        dynamic_answer_assign(model, &probe_image, &sample.question, &sample.answers, config)?;
    let base = Sample {
        image: sample.image.retain_objects(&minus_set),
        question: sample.question.clone(),
        answers: assigned.a_minus.clone(),
        split_tag: sample.split_tag,
    };
    let id_of = |pos: usize| sample.image.objects[pos].object_id;
    Ok(Some(CounterfactualSample {
        kind: CounterfactualKind::Visual,
        base,
        masked_ids: Some(i_plus),
        kept_ids: Some(i_minus),
        q_plus_tokens: None,
        q_minus_tokens: None,
        assigned_answers: assigned.a_minus,
        probe_answers: assigned.a_plus,
        sim_scores: initial.members.clone(),
        saliency_scores: scores
            .scores
            .iter()
            .map(|(pos, s)| (id_of(*pos), *s))
            .collect(),
    }))
}

fn synthesize_qcss_with_scores(
    model: &mut VqaModel,
    sample: &Sample,
    scores: &SaliencyScores,
    config: &CssConfig,
) -> Result<Option<CounterfactualSample>, CssError> {
    let Some((q_plus, q_minus)) = critical_word_selection(&sample.question, scores, config) else {
        return Ok(None);
    };
    let assigned =
        dynamic_answer_assign(model, &sample.image, &q_plus, &sample.answers, config)?;
    let base = Sample {
        image: sample.image.clone(),
        question: q_minus.clone(),
        answers: assigned.a_minus.clone(),
        split_tag: sample.split_tag,
    };
    Ok(Some(CounterfactualSample {
        kind: CounterfactualKind::Question,
        base,
        masked_ids: None,
        kept_ids: None,
        q_plus_tokens: Some(q_plus.tokens),
        q_minus_tokens: Some(q_minus.tokens),
        assigned_answers: assigned.a_minus,
        probe_answers: assigned.a_plus,
        sim_scores: Vec::new(),
        saliency_scores: scores.scores.iter().map(|(i, s)| (*i as u32, *s)).collect(),
    }))
}

/// Full V-CSS pipeline for one sample: initial selection, contribution
/// scores, critical split, probe, and answer reassignment. Skips (returns
/// `None`) when the complement would be empty.
pub fn synthesize_vcss(
    model: &mut VqaModel,
    sample: &Sample,
    lexicon: &EmbeddingLexicon,
    config: &CssConfig,
) -> Result<Option<CounterfactualSample>, CssError> {
    config.validate()?;
    let scores = saliency::object_contributions(model, sample)?;
    synthesize_vcss_with_scores(model, sample, lexicon, &scores, config)
}

/// Full Q-CSS pipeline for one sample. Skips questions that consist only of
/// question-type tokens.
pub fn synthesize_qcss(
    model: &mut VqaModel,
    sample: &Sample,
    config: &CssConfig,
) -> Result<Option<CounterfactualSample>, CssError> {
    config.validate()?;
    let scores = saliency::word_contributions(model, sample)?;
    synthesize_qcss_with_scores(model, sample, &scores, config)
}

/// Outcome of one combined training step.
#[derive(Debug, Clone, PartialEq)]
pub struct CssStepOutcome {
    pub original_loss: f64,
    /// Loss on the synthesized sample; `None` when synthesis was skipped.
    pub counterfactual_loss: Option<f64>,
    pub branch: CounterfactualKind,
    /// The counterfactual that was trained on, for auditing.
    pub counterfactual: Option<CounterfactualSample>,
}

/// One step of the combined scheme: train on the original sample, draw the
/// branch, synthesize the counterfactual (contribution scores come from the
/// pre-update parameters, the probe from the updated ones), then train on
/// it.
pub fn css_train_step<R: Rng>(
    model: &mut VqaModel,
    sample: &Sample,
    lexicon: &EmbeddingLexicon,
    config: &CssConfig,
    rng: &mut R,
    learning_rate: f64,
) -> Result<CssStepOutcome, CssError> {
    config.validate()?;
    let cond: f64 = rng.random();
    let branch = if cond >= config.delta {
        CounterfactualKind::Visual
    } else {
        CounterfactualKind::Question
    };

    let scores = match branch {
        CounterfactualKind::Visual => saliency::object_contributions(model, sample)?,
        CounterfactualKind::Question => saliency::word_contributions(model, sample)?,
    };
    let original_loss = model.train_step(sample, learning_rate)?;
    let counterfactual = match branch {
        CounterfactualKind::Visual => {
            synthesize_vcss_with_scores(model, sample, lexicon, &scores, config)?
        }
        CounterfactualKind::Question => {
            synthesize_qcss_with_scores(model, sample, &scores, config)?
        }
    };
    let counterfactual_loss = match &counterfactual {
        Some(cf) => Some(model.train_step(&cf.base, learning_rate)?),
        None => None,
    };
    Ok(CssStepOutcome {
        original_loss,
        counterfactual_loss,
        branch,
        counterfactual,
    })
}
