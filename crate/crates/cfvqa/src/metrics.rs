//! Accuracy reporting and the three robustness metrics.
//!
//! Average importance (AI) scores how related the model's most influential
//! objects are to the question; confidence improvement (CI) measures the
//! drop in ground-truth answer mass when the critical noun is removed,
//! counted only on correctly answered samples; consensus score CS(k) is
//! the fraction of size-k rephrasing subsets answered entirely correctly.
//! Each metric has a pure kernel over plain numbers so the model-facing
//! wrappers stay thin and the kernels stay checkable against enumeration.

use std::collections::BTreeMap;

use itertools::Itertools;
use serde::Serialize;
use thiserror::Error;

use crate::css;
use crate::data::{soft_accuracy, Sample};
use crate::databench::{EmbeddingLexicon, RephrasingGroup};
use crate::model::VqaModel;
use crate::saliency;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot evaluate an empty sample list")]
    EmptySplit,
    #[error("consensus score k={k} exceeds group {group_id} of size {size}")]
    GroupTooSmall {
        k: usize,
        group_id: String,
        size: usize,
    },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Saliency(#[from] crate::saliency::SaliencyError),
    #[error(transparent)]
    Css(#[from] crate::css::CssError),
}

/// Maps question types onto the report categories.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMap {
    pub yesno_types: Vec<String>,
    pub num_types: Vec<String>,
}

impl Default for CategoryMap {
    fn default() -> Self {
        CategoryMap {
            yesno_types: vec!["is there".to_string()],
            num_types: vec!["how many".to_string()],
        }
    }
}

impl CategoryMap {
    pub fn category_of(&self, question_type: &str) -> &'static str {
        if self.yesno_types.iter().any(|t| t == question_type) {
            "YesNo"
        } else if self.num_types.iter().any(|t| t == question_type) {
            "Num"
        } else {
            "Other"
        }
    }
}

/// Mean soft accuracy overall and per category; empty categories are
/// omitted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub all: f64,
    pub per_category: BTreeMap<String, f64>,
    pub sample_count: usize,
}

pub fn accuracy_report(
    model: &VqaModel,
    samples: &[Sample],
    map: &CategoryMap,
) -> Result<AccuracyReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    let mut total = 0.0;
    let mut per: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for sample in samples {
        let (answer, _) = model.predicted_answer(sample)?;
        let acc = soft_accuracy(&answer, &sample.answers);
        total += acc;
        let entry = per
            .entry(map.category_of(&sample.question.question_type).to_string())
            .or_insert((0.0, 0));
        entry.0 += acc;
        entry.1 += 1;
    }
    Ok(AccuracyReport {
        all: total / samples.len() as f64,
        per_category: per
            .into_iter()
            .map(|(cat, (sum, n))| (cat, sum / n as f64))
            .collect(),
        sample_count: samples.len(),
    })
}

/// AI kernel: mean over samples of the mean similarity of the k objects
/// with the largest absolute contribution (all objects when fewer than k).
pub fn ai_from_scores(per_sample: &[(Vec<f64>, Vec<f64>)], k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    let mut total = 0.0;
    for (sims, contributions) in per_sample {
        debug_assert_eq!(sims.len(), contributions.len());
        let take = k.min(sims.len());
        let mut order: Vec<usize> = (0..contributions.len()).collect();
        order.sort_by(|&a, &b| {
            contributions[b]
                .abs()
                .partial_cmp(&contributions[a].abs())
                .expect("contributions are finite")
                .then(a.cmp(&b))
        });
        let mean: f64 = order[..take].iter().map(|&i| sims[i]).sum::<f64>() / take as f64;
        total += mean;
    }
    total / per_sample.len() as f64
}

/// Average importance: similarity of the top-k objects by absolute
/// contribution, averaged over samples.
pub fn average_importance(
    model: &VqaModel,
    samples: &[Sample],
    lexicon: &EmbeddingLexicon,
    k: usize,
) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    for sample in samples {
        let (sims, _) = css::object_similarities(sample, lexicon)?;
        let scores = saliency::object_contributions(model, sample)?;
        per_sample.push((
            sims.into_iter().map(|(_, s)| s).collect::<Vec<f64>>(),
            scores
                .scores
                .into_iter()
                .map(|(_, s)| s)
                .collect::<Vec<f64>>(),
        ));
    }
    Ok(ai_from_scores(&per_sample, k))
}

/// CI kernel over `(mass_original, mass_removed, counted)` cases: the mean
/// confidence drop over all cases, with only counted (correctly answered)
/// ones contributing to the numerator.
pub fn ci_from_cases(cases: &[(f64, f64, bool)]) -> f64 {
    if cases.is_empty() {
        return 0.0;
    }
    let numer: f64 = cases
        .iter()
        .map(|(orig, removed, counted)| if *counted { orig - removed } else { 0.0 })
        .sum();
    numer / cases.len() as f64
}

/// Confidence improvement over (sample, critical-word-removed) pairs. The
/// ground-truth mass is the score-weighted sum of predicted probabilities of
/// the ground-truth answers; a pair counts only when the model's prediction
/// on the original sample is a ground-truth answer.
pub fn confidence_improvement(
    model: &VqaModel,
    pairs: &[(Sample, Sample)],
) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    let vocab = model.answer_vocab();
    let mut cases = Vec::with_capacity(pairs.len());
    for (original, removed) in pairs {
        let dist = model.predict(original)?;
        let predicted = vocab.answer(dist.argmax());
        let counted = original.answers.score(predicted) > 0.0;
        let weights = original.answers.dense(vocab);
        let mass_original: f64 = dist.probs.iter().zip(&weights).map(|(p, w)| p * w).sum();
        let dist_removed = model.predict(removed)?;
        let mass_removed: f64 = dist_removed
            .probs
            .iter()
            .zip(&weights)
            .map(|(p, w)| p * w)
            .sum();
        cases.push((mass_original, mass_removed, counted));
    }
    Ok(ci_from_cases(&cases))
}

/// CS kernel: per group, the fraction of size-k member subsets in which
/// every member is correct, enumerated exhaustively.
pub fn consensus_from_flags(groups: &[(String, Vec<bool>)], k: usize) -> Result<f64, MetricsError> {
    if groups.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    let mut total = 0.0;
    for (group_id, flags) in groups {
        let n = flags.len();
        if n < k {
            return Err(MetricsError::GroupTooSmall {
                k,
                group_id: group_id.clone(),
                size: n,
            });
        }
        let mut hits = 0usize;
        let mut subsets = 0usize;
        for combo in (0..n).combinations(k) {
            subsets += 1;
            if combo.iter().all(|&i| flags[i]) {
                hits += 1;
            }
        }
        total += hits as f64 / subsets as f64;
    }
    Ok(total / groups.len() as f64)
}

/// Consensus score CS(k) over rephrasing groups; a member is correct when
/// its predicted answer has positive ground-truth score.
pub fn consensus_score(
    model: &VqaModel,
    groups: &[RephrasingGroup],
    k: usize,
) -> Result<f64, MetricsError> {
    let mut flags = Vec::with_capacity(groups.len());
    for group in groups {
        let mut member_flags = Vec::with_capacity(group.members.len());
        for member in &group.members {
            let (answer, _) = model.predicted_answer(member)?;
            member_flags.push(soft_accuracy(&answer, &member.answers) > 0.0);
        }
        flags.push((group.group_id.clone(), member_flags));
    }
    consensus_from_flags(&flags, k)
}

/// The full evaluation report: accuracy panel, AI panel, CS/CI panel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: AccuracyReport,
    pub ai: BTreeMap<usize, f64>,
    pub ci: f64,
    pub cs: BTreeMap<usize, f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned three-panel plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("accuracy\n");
        out.push_str(&format!("  {:<8} {:>8.4}\n", "All", self.accuracy.all));
        for (cat, acc) in &self.accuracy.per_category {
            out.push_str(&format!("  {cat:<8} {acc:>8.4}\n"));
        }
        out.push_str("average importance\n");
        for (k, v) in &self.ai {
            out.push_str(&format!("  {:<8} {v:>8.4}\n", format!("top-{k}")));
        }
        out.push_str("consensus / confidence\n");
        for (k, v) in &self.cs {
            out.push_str(&format!("  {:<8} {v:>8.4}\n", format!("CS({k})")));
        }
        out.push_str(&format!("  {:<8} {:>8.4}\n", "CI", self.ci));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::databench::{
        build_critical_word_removed, build_embedding_lexicon, generate_dataset,
        generate_rephrasings, GeneratorSpec,
    };
    use crate::model::{FusionKind, FusionStrategy, TokenVocab};
    use proptest::prelude::*;

    fn bench() -> (GeneratorSpec, Vec<Sample>, EmbeddingLexicon, VqaModel) {
        let spec = GeneratorSpec {
            train_size: 80,
            test_size: 40,
            ..GeneratorSpec::default()
        };
        let (train, test) = generate_dataset(&spec).unwrap();
        let lexicon = build_embedding_lexicon(&spec);
        let model = VqaModel::new(
            spec.d_v,
            8,
            3,
            FusionStrategy::new(FusionKind::None),
            TokenVocab::from_samples(&train),
            spec.answer_vocabulary(),
        );
        (spec, test, lexicon, model)
    }

    #[test]
    fn accuracy_report_matches_brute_force_loop() {
        let (_, test, _, model) = bench();
        let map = CategoryMap::default();
        let report = accuracy_report(&model, &test, &map).unwrap();
        let mut brute = 0.0;
        for s in &test {
            let (answer, _) = model.predicted_answer(s).unwrap();
            brute += soft_accuracy(&answer, &s.answers);
        }
        brute /= test.len() as f64;
        assert!((report.all - brute).abs() < 1e-12);
        assert_eq!(report.sample_count, test.len());
        // Category means recombine to the overall mean.
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in &test {
            *counts
                .entry(map.category_of(&s.question.question_type).to_string())
                .or_default() += 1;
        }
        let recombined: f64 = report
            .per_category
            .iter()
            .map(|(cat, acc)| acc * counts[cat] as f64)
            .sum::<f64>()
            / test.len() as f64;
        assert!((report.all - recombined).abs() < 1e-12);
        assert!(matches!(
            accuracy_report(&model, &[], &map),
            Err(MetricsError::EmptySplit)
        ));
    }

    #[test]
    fn accuracy_report_omits_empty_categories() {
        let (_, test, _, model) = bench();
        let color_only: Vec<Sample> = test
            .iter()
            .filter(|s| s.question.question_type == "what color")
            .cloned()
            .collect();
        let report = accuracy_report(&model, &color_only, &CategoryMap::default()).unwrap();
        assert_eq!(report.per_category.len(), 1);
        assert!(report.per_category.contains_key("Other"));
    }

    #[test]
    fn ai_kernel_hand_cases() {
        // Saliency ranks the low-similarity object first.
        let per_sample = vec![(vec![0.9, 0.2], vec![0.1, -0.5])];
        assert_eq!(ai_from_scores(&per_sample, 1), 0.2);
        // k larger than the object count falls back to all objects.
        assert_eq!(ai_from_scores(&per_sample, 5), (0.9 + 0.2) / 2.0);
        // Single object: AI is its similarity.
        assert_eq!(ai_from_scores(&[(vec![0.7], vec![1.0])], 1), 0.7);
    }

    #[test]
    fn average_importance_stays_in_similarity_range_and_is_order_invariant() {
        let (_, test, lexicon, model) = bench();
        let subset: Vec<Sample> = test.iter().take(12).cloned().collect();
        let ai = average_importance(&model, &subset, &lexicon, 2).unwrap();
        assert!((-1.0..=1.0).contains(&ai));
        let mut reversed = subset.clone();
        reversed.reverse();
        let ai_rev = average_importance(&model, &reversed, &lexicon, 2).unwrap();
        assert!((ai - ai_rev).abs() < 1e-12);
    }

    #[test]
    fn ci_kernel_hand_cases() {
        // One counted pair dropping 0.9 -> 0.6 plus one uncounted pair.
        let ci = ci_from_cases(&[(0.9, 0.6, true), (0.4, 0.9, false)]);
        assert!((ci - 0.15).abs() < 1e-12);
        // Unchanged question contributes zero.
        assert_eq!(ci_from_cases(&[(0.8, 0.8, true)]), 0.0);
        // Nothing counted: CI is exactly zero.
        assert_eq!(ci_from_cases(&[(0.9, 0.1, false), (0.7, 0.2, false)]), 0.0);
    }

    #[test]
    fn confidence_improvement_zero_when_never_correct() {
        let (_, test, lexicon, mut model) = bench();
        // Make the model always predict one fixed answer and evaluate only
        // on samples where that answer is wrong.
        let vocab_len = model.answer_vocab().len();
        for a in 0..vocab_len {
            model.params_mut().cls_out_bias[a] = 0.0;
        }
        model.params_mut().cls_out_bias[0] = 50.0;
        let always = model.answer_vocab().answer(0).to_string();
        let pairs: Vec<(Sample, Sample)> = test
            .iter()
            .filter(|s| !s.answers.contains(&always))
            .take(10)
            .map(|s| (s.clone(), build_critical_word_removed(s, &lexicon).unwrap()))
            .collect();
        let ci = confidence_improvement(&model, &pairs).unwrap();
        assert_eq!(ci, 0.0);
    }

    #[test]
    fn consensus_kernel_hand_cases() {
        let group = vec![("g".to_string(), vec![true, true, true, false])];
        assert_eq!(consensus_from_flags(&group, 1).unwrap(), 0.75);
        assert_eq!(consensus_from_flags(&group, 2).unwrap(), 0.5);
        assert_eq!(consensus_from_flags(&group, 4).unwrap(), 0.0);
        let all = vec![("g".to_string(), vec![true; 5])];
        for k in 1..=5 {
            assert_eq!(consensus_from_flags(&all, k).unwrap(), 1.0);
        }
        let none = vec![("g".to_string(), vec![false; 4])];
        for k in 1..=4 {
            assert_eq!(consensus_from_flags(&none, k).unwrap(), 0.0);
        }
        assert!(matches!(
            consensus_from_flags(&group, 5),
            Err(MetricsError::GroupTooSmall { .. })
        ));
    }

    fn binomial(n: usize, k: usize) -> f64 {
        if k > n {
            return 0.0;
        }
        let mut result = 1.0;
        for i in 0..k {
            result *= (n - i) as f64 / (i + 1) as f64;
        }
        result
    }

    proptest! {
        #[test]
        fn consensus_matches_closed_form_and_is_monotone(
            flags in prop::collection::vec(prop::collection::vec(prop::bool::ANY, 2..8), 1..6)
        ) {
            let groups: Vec<(String, Vec<bool>)> = flags
                .iter()
                .enumerate()
                .map(|(i, f)| (format!("g{i}"), f.clone()))
                .collect();
            let max_k = groups.iter().map(|(_, f)| f.len()).min().unwrap();
            let mut previous = f64::INFINITY;
            for k in 1..=max_k {
                let cs = consensus_from_flags(&groups, k).unwrap();
                // Closed form: C(correct, k) / C(n, k) per group.
                let oracle: f64 = groups
                    .iter()
                    .map(|(_, f)| {
                        let q = f.iter().filter(|b| **b).count();
                        binomial(q, k) / binomial(f.len(), k)
                    })
                    .sum::<f64>() / groups.len() as f64;
                prop_assert!((cs - oracle).abs() < 1e-12);
                prop_assert!(cs <= previous + 1e-12, "CS must be non-increasing in k");
                previous = cs;
            }
        }
    }

    #[test]
    fn consensus_score_runs_on_generated_groups() {
        let (spec, test, _, model) = bench();
        let groups: Vec<RephrasingGroup> = test
            .iter()
            .take(10)
            .map(|s| generate_rephrasings(s, 4, &spec).unwrap())
            .collect();
        let mut previous = f64::INFINITY;
        for k in 1..=4 {
            let cs = consensus_score(&model, &groups, k).unwrap();
            assert!((0.0..=1.0).contains(&cs));
            assert!(cs <= previous + 1e-12);
            previous = cs;
        }
    }

    #[test]
    fn report_renders_consistent_json_and_text() {
        let accuracy = AccuracyReport {
            all: 0.5,
            per_category: BTreeMap::from([("Other".to_string(), 0.5)]),
            sample_count: 4,
        };
        let report = EvalReport {
            accuracy,
            ai: BTreeMap::from([(1, 0.25)]),
            ci: 0.15,
            cs: BTreeMap::from([(1, 0.75), (2, 0.5)]),
        };
        let text = report.to_text();
        assert!(text.contains("All"));
        assert!(text.contains("0.5000"));
        assert!(text.contains("top-1"));
        assert!(text.contains("CS(2)"));
        assert!(text.contains("0.1500"));
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["ci"], 0.15);
        assert_eq!(json["accuracy"]["all"], 0.5);
        assert_eq!(json["cs"]["2"], 0.5);
    }

    #[test]
    fn report_values_stay_in_declared_ranges() {
        let (spec, test, lexicon, model) = bench();
        let subset: Vec<Sample> = test.iter().take(15).cloned().collect();
        let pairs: Vec<(Sample, Sample)> = subset
            .iter()
            .map(|s| (s.clone(), build_critical_word_removed(s, &lexicon).unwrap()))
            .collect();
        let groups: Vec<RephrasingGroup> = subset
            .iter()
            .take(6)
            .map(|s| generate_rephrasings(s, 4, &spec).unwrap())
            .collect();
        let accuracy = accuracy_report(&model, &subset, &CategoryMap::default()).unwrap();
        assert!((0.0..=1.0).contains(&accuracy.all));
        for acc in accuracy.per_category.values() {
            assert!((0.0..=1.0).contains(acc));
        }
        let ci = confidence_improvement(&model, &pairs).unwrap();
        assert!((-1.0..=1.0).contains(&ci));
        for k in 1..=3 {
            let ai = average_importance(&model, &subset, &lexicon, k).unwrap();
            assert!((-1.0..=1.0).contains(&ai));
        }
        for k in 1..=4 {
            let cs = consensus_score(&model, &groups, k).unwrap();
            assert!((0.0..=1.0).contains(&cs));
        }
    }
}
