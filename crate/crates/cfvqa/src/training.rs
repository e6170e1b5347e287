//! Epoch-level training driver shared by the CLI and the benchmark tests.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::css::{css_train_step, CounterfactualKind, CssConfig, CssError};
use crate::data::{soft_accuracy, AnswerVocabulary, Sample};
use crate::databench::EmbeddingLexicon;
use crate::model::{FusionKind, FusionStrategy, OptimizerSpec, TokenVocab, VqaModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("epoch {epoch}, sample {question_id}: {source}")]
    Step {
        epoch: usize,
        question_id: String,
        #[source]
        source: CssError,
    },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Which synthesis branches run during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CssVariant {
    /// Draw between V-CSS and Q-CSS with the configured proportion.
    Both,
    VisualOnly,
    QuestionOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub d_h: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
    /// Fusion used when `ensemble` is set; plain training ignores it.
    pub fusion: FusionStrategy,
    pub ensemble: bool,
    /// `None` trains without synthesis.
    pub css: Option<CssVariant>,
    pub css_config: CssConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            d_h: 24,
            epochs: 5,
            learning_rate: 0.3,
            optimizer: OptimizerSpec::default(),
            seed: 7,
            fusion: FusionStrategy::new(FusionKind::ProductOfExperts),
            ensemble: false,
            css: None,
            css_config: CssConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_counterfactual_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

/// Counters over the whole run; synthesis stays at zero for plain modes.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainStats {
    pub synthesis_steps: usize,
    pub v_branches: usize,
    pub q_branches: usize,
    pub skipped: usize,
}

pub struct TrainOutcome {
    pub model: VqaModel,
    pub epochs: Vec<EpochLog>,
    pub stats: TrainStats,
}

/// Train a fresh model on the given splits. Deterministic for a fixed seed:
/// initialization, epoch shuffles, and branch draws all derive from it.
pub fn train(
    train_samples: &[Sample],
    test_samples: &[Sample],
    answer_vocab: &AnswerVocabulary,
    lexicon: &EmbeddingLexicon,
    options: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    let first = train_samples.first().ok_or(TrainError::EmptyTrainingSet)?;
    let d_v = first.image.objects[0].feature.len();
    let fusion = if options.ensemble {
        options.fusion
    } else {
        FusionStrategy::new(FusionKind::None)
    };
    let mut model = VqaModel::new(
        d_v,
        options.d_h,
        options.seed,
        fusion,
        TokenVocab::from_samples(train_samples),
        answer_vocab.clone(),
    );
    model.set_optimizer(options.optimizer);
    let css_config = match options.css {
        Some(CssVariant::VisualOnly) => CssConfig {
            delta: 0.0,
            ..options.css_config.clone()
        },
        Some(CssVariant::QuestionOnly) => CssConfig {
            delta: 1.0,
            ..options.css_config.clone()
        },
        _ => options.css_config.clone(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut stats = TrainStats::default();
    let mut epochs = Vec::with_capacity(options.epochs);
    for epoch in 0..options.epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut cf_loss_sum = 0.0;
        let mut cf_count = 0usize;
        for idx in order {
            let sample = &train_samples[idx];
            let step = |e: CssError| TrainError::Step {
                epoch,
                question_id: sample.question.question_id.clone(),
                source: e,
            };
            if options.css.is_some() {
                let out = css_train_step(
                    &mut model,
                    sample,
                    lexicon,
                    &css_config,
                    &mut rng,
                    options.learning_rate,
                )
                .map_err(step)?;
                stats.synthesis_steps += 1;
                match out.branch {
                    CounterfactualKind::Visual => stats.v_branches += 1,
                    CounterfactualKind::Question => stats.q_branches += 1,
                }
                loss_sum += out.original_loss;
                match out.counterfactual_loss {
                    Some(l) => {
                        cf_loss_sum += l;
                        cf_count += 1;
                    }
                    None => stats.skipped += 1,
                }
            } else {
                loss_sum += model
                    .train_step(sample, options.learning_rate)
                    .map_err(|e| step(CssError::Model(e)))?;
            }
        }
        let test_accuracy = if test_samples.is_empty() {
            None
        } else {
            let mut acc = 0.0;
            for s in test_samples {
                let (answer, _) = model.predicted_answer(s)?;
                acc += soft_accuracy(&answer, &s.answers);
            }
            Some(acc / test_samples.len() as f64)
        };
        epochs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / train_samples.len() as f64,
            mean_counterfactual_loss: if cf_count > 0 {
                Some(cf_loss_sum / cf_count as f64)
            } else {
                None
            },
            test_accuracy,
        });
    }
    Ok(TrainOutcome {
        model,
        epochs,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::databench::{build_embedding_lexicon, generate_dataset, GeneratorSpec};

    fn bench() -> (GeneratorSpec, Vec<Sample>, Vec<Sample>, EmbeddingLexicon) {
        let spec = GeneratorSpec {
            train_size: 120,
            test_size: 40,
            ..GeneratorSpec::default()
        };
        let (train, test) = generate_dataset(&spec).unwrap();
        let lexicon = build_embedding_lexicon(&spec);
        (spec, train, test, lexicon)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (spec, train_set, test_set, lexicon) = bench();
        let options = TrainOptions {
            epochs: 0,
            ..TrainOptions::default()
        };
        let out = train(&train_set, &test_set, &spec.answer_vocabulary(), &lexicon, &options).unwrap();
        assert!(out.epochs.is_empty());
        assert_eq!(out.stats, TrainStats::default());
        let fresh = VqaModel::new(
            spec.d_v,
            options.d_h,
            options.seed,
            FusionStrategy::new(FusionKind::None),
            TokenVocab::from_samples(&train_set),
            spec.answer_vocabulary(),
        );
        assert_eq!(out.model.params_digest(), fresh.params_digest());
    }

    #[test]
    fn plain_training_never_invokes_synthesis() {
        let (spec, train_set, test_set, lexicon) = bench();
        let options = TrainOptions {
            epochs: 2,
            ..TrainOptions::default()
        };
        let out = train(&train_set, &test_set, &spec.answer_vocabulary(), &lexicon, &options).unwrap();
        assert_eq!(out.stats.synthesis_steps, 0);
        assert_eq!(out.stats.v_branches + out.stats.q_branches, 0);
        assert_eq!(out.epochs.len(), 2);
        assert!(out.epochs.iter().all(|e| e.mean_loss.is_finite()));
        assert!(out.epochs[1].test_accuracy.unwrap() >= 0.0);
    }

    #[test]
    fn css_training_counts_branches_and_is_deterministic() {
        let (spec, train_set, test_set, lexicon) = bench();
        let options = TrainOptions {
            epochs: 1,
            ensemble: true,
            css: Some(CssVariant::Both),
            ..TrainOptions::default()
        };
        let vocab = spec.answer_vocabulary();
        let a = train(&train_set, &test_set, &vocab, &lexicon, &options).unwrap();
        let b = train(&train_set, &test_set, &vocab, &lexicon, &options).unwrap();
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.model.params_digest(), b.model.params_digest());
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.stats.synthesis_steps, train_set.len());
        assert!(a.stats.v_branches > 0);
        assert!(a.stats.q_branches > 0);

        let v_only = TrainOptions {
            css: Some(CssVariant::VisualOnly),
            ..options.clone()
        };
        let v = train(&train_set, &test_set, &vocab, &lexicon, &v_only).unwrap();
        assert_eq!(v.stats.q_branches, 0);
        assert_eq!(v.stats.v_branches, train_set.len());
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let (spec, _, test_set, lexicon) = bench();
        let err = train(
            &[],
            &test_set,
            &spec.answer_vocabulary(),
            &lexicon,
            &TrainOptions::default(),
        );
        assert!(matches!(err, Err(TrainError::EmptyTrainingSet)));
    }
}
