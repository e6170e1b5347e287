//! Domain data model, dataset persistence, and the accuracy primitive.
//!
//! A dataset is a JSONL file with one sample per line. The wire format is
//! fixed: keys appear in declaration order, the `answers` map is sorted by
//! answer string, and floats use `serde_json`'s shortest round-trip
//! representation, so saving a loaded dataset reproduces it byte for byte.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for the "probabilities sum to one" check.
pub const DISTRIBUTION_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: answer {answer:?} is not in the vocabulary")]
    UnknownAnswer { line: usize, answer: String },
    #[error("line {line}: answer {answer:?} has score {score} outside [0, 1]")]
    ScoreOutOfRange {
        line: usize,
        answer: String,
        score: f64,
    },
    #[error("line {line}: object {object_id} has feature length {got}, expected {expected}")]
    FeatureDimMismatch {
        line: usize,
        object_id: u32,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("vocabulary contains duplicate answer {answer:?}")]
    DuplicateAnswer { answer: String },
}

/// Ordered set of candidate answer strings with stable positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerVocabulary {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocabulary {
    pub fn new<I, S>(answers: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let answers: Vec<String> = answers.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(answers.len());
        for (pos, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), pos).is_some() {
                return Err(DataError::DuplicateAnswer { answer: a.clone() });
            }
        }
        Ok(Self { answers, index })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn answer(&self, position: usize) -> &str {
        &self.answers[position]
    }

    pub fn position(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn contains(&self, answer: &str) -> bool {
        self.index.contains_key(answer)
    }

    /// Load from a JSON list of strings.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = File::open(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let answers: Vec<String> =
            serde_json::from_reader(BufReader::new(file)).map_err(|source| DataError::Parse {
                line: 1,
                source,
            })?;
        Self::new(answers)
    }

    /// Save as a JSON list of strings.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let wrap = |source| DataError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(wrap)?);
        serde_json::to_writer(&mut out, &self.answers)
            .map_err(|e| wrap(std::io::Error::other(e)))?;
        out.write_all(b"\n").map_err(wrap)?;
        out.flush().map_err(wrap)
    }
}

/// Soft ground-truth scores over answers; may be empty for counterfactual
/// samples whose reassigned answer set is the empty set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnswerScores {
    entries: BTreeMap<String, f64>,
}

impl AnswerScores {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        Self {
            entries: pairs.into_iter().map(|(a, s)| (a.into(), s)).collect(),
        }
    }

    pub fn insert(&mut self, answer: impl Into<String>, score: f64) {
        self.entries.insert(answer.into(), score);
    }

    pub fn score(&self, answer: &str) -> f64 {
        self.entries.get(answer).copied().unwrap_or(0.0)
    }

    pub fn contains(&self, answer: &str) -> bool {
        self.entries.contains_key(answer)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(a, s)| (a.as_str(), *s))
    }

    /// Dense score vector in vocabulary order (zero for absent answers).
    pub fn dense(&self, vocab: &AnswerVocabulary) -> Vec<f64> {
        let mut out = vec![0.0; vocab.len()];
        for (a, s) in &self.entries {
            if let Some(pos) = vocab.position(a) {
                out[pos] = *s;
            }
        }
        out
    }
}

/// One detected object: an id, a category noun, and a feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub object_id: u32,
    pub category: String,
    pub feature: Vec<f64>,
}

/// An image as a bag of object instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub objects: Vec<ObjectInstance>,
}

impl ImageRecord {
    pub fn object_ids(&self) -> Vec<u32> {
        self.objects.iter().map(|o| o.object_id).collect()
    }

    /// Copy of this image keeping only the objects whose id is in `keep`.
    pub fn retain_objects(&self, keep: &HashSet<u32>) -> ImageRecord {
        ImageRecord {
            image_id: self.image_id.clone(),
            objects: self
                .objects
                .iter()
                .filter(|o| keep.contains(&o.object_id))
                .cloned()
                .collect(),
        }
    }
}

/// A tokenized question with its question-type annotation. The first
/// `type_token_count` tokens spell the question type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub tokens: Vec<String>,
    pub question_type: String,
    pub type_token_count: usize,
}

impl QuestionRecord {
    /// Token indices not covered by the question-type prefix.
    pub fn non_type_indices(&self) -> std::ops::Range<usize> {
        self.type_token_count..self.tokens.len()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// One (image, question, answer-scores) triplet. Serialization goes
/// through the flat wire layout used by the dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "SampleWire", into = "SampleWire")]
pub struct Sample {
    pub image: ImageRecord,
    pub question: QuestionRecord,
    pub answers: AnswerScores,
    pub split_tag: SplitTag,
}

/// Wire form of a [`Sample`]; field order defines the canonical JSONL layout.
#[derive(Serialize, Deserialize)]
struct SampleWire {
    image_id: String,
    objects: Vec<ObjectInstance>,
    question_id: String,
    tokens: Vec<String>,
    question_type: String,
    type_token_count: usize,
    answers: BTreeMap<String, f64>,
    split_tag: SplitTag,
}

impl From<&Sample> for SampleWire {
    fn from(s: &Sample) -> Self {
        SampleWire {
            image_id: s.image.image_id.clone(),
            objects: s.image.objects.clone(),
            question_id: s.question.question_id.clone(),
            tokens: s.question.tokens.clone(),
            question_type: s.question.question_type.clone(),
            type_token_count: s.question.type_token_count,
            answers: s.answers.entries.clone(),
            split_tag: s.split_tag,
        }
    }
}

impl From<Sample> for SampleWire {
    fn from(s: Sample) -> Self {
        SampleWire {
            image_id: s.image.image_id,
            objects: s.image.objects,
            question_id: s.question.question_id,
            tokens: s.question.tokens,
            question_type: s.question.question_type,
            type_token_count: s.question.type_token_count,
            answers: s.answers.entries,
            split_tag: s.split_tag,
        }
    }
}

impl From<SampleWire> for Sample {
    fn from(w: SampleWire) -> Self {
        Sample {
            image: ImageRecord {
                image_id: w.image_id,
                objects: w.objects,
            },
            question: QuestionRecord {
                question_id: w.question_id,
                tokens: w.tokens,
                question_type: w.question_type,
                type_token_count: w.type_token_count,
            },
            answers: AnswerScores { entries: w.answers },
            split_tag: w.split_tag,
        }
    }
}

impl Sample {
    /// Serialize one sample as a canonical JSONL line (no trailing newline).
    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(&SampleWire::from(self)).expect("sample serialization cannot fail")
    }

    /// Check every invariant this module promises. `expected_dv` is the
    /// feature dimension established by earlier samples, if any; `line` is
    /// used only for error context.
    pub fn validate(
        &self,
        vocab: &AnswerVocabulary,
        expected_dv: Option<usize>,
        line: usize,
    ) -> Result<usize, DataError> {
        let invalid = |message: String| DataError::Invalid { line, message };

        if self.image.objects.is_empty() {
            return Err(invalid(format!(
                "image {} has no objects",
                self.image.image_id
            )));
        }
        let mut dv = expected_dv;
        let mut seen_ids = HashSet::new();
        for obj in &self.image.objects {
            if !seen_ids.insert(obj.object_id) {
                return Err(invalid(format!(
                    "duplicate object_id {} in image {}",
                    obj.object_id, self.image.image_id
                )));
            }
            match dv {
                None => dv = Some(obj.feature.len()),
                Some(expected) if obj.feature.len() != expected => {
                    return Err(DataError::FeatureDimMismatch {
                        line,
                        object_id: obj.object_id,
                        expected,
                        got: obj.feature.len(),
                    });
                }
                _ => {}
            }
            if obj.feature.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!(
                    "object {} has a non-finite feature value",
                    obj.object_id
                )));
            }
        }

        let q = &self.question;
        if q.tokens.is_empty() {
            return Err(invalid(format!("question {} has no tokens", q.question_id)));
        }
        if q.type_token_count == 0 || q.type_token_count > q.tokens.len() {
            return Err(invalid(format!(
                "question {}: type_token_count {} out of range 1..={}",
                q.question_id,
                q.type_token_count,
                q.tokens.len()
            )));
        }
        let prefix = q.tokens[..q.type_token_count].join(" ");
        if prefix != q.question_type {
            return Err(invalid(format!(
                "question {}: type prefix {:?} does not spell question_type {:?}",
                q.question_id, prefix, q.question_type
            )));
        }

        if self.answers.is_empty() {
            return Err(invalid(format!(
                "sample {} has an empty answer set",
                q.question_id
            )));
        }
        for (answer, score) in self.answers.iter() {
            if !vocab.contains(answer) {
                return Err(DataError::UnknownAnswer {
                    line,
                    answer: answer.to_string(),
                });
            }
            if !(0.0..=1.0).contains(&score) {
                return Err(DataError::ScoreOutOfRange {
                    line,
                    answer: answer.to_string(),
                    score,
                });
            }
        }
        Ok(dv.expect("nonempty object list sets the dimension"))
    }
}

/// Load a JSONL dataset, validating every record against the vocabulary and
/// enforcing a uniform feature dimension across the file.
pub fn load_dataset(path: &Path, vocab: &AnswerVocabulary) -> Result<Vec<Sample>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut dv: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: SampleWire =
            serde_json::from_str(&line).map_err(|source| DataError::Parse {
                line: line_no,
                source,
            })?;
        let sample = Sample::from(wire);
        dv = Some(sample.validate(vocab, dv, line_no)?);
        samples.push(sample);
    }
    Ok(samples)
}

/// Write samples as canonical JSONL. Loading the result reproduces the
/// input field for field.
pub fn save_dataset(samples: &[Sample], path: &Path) -> Result<(), DataError> {
    let wrap = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(wrap)?);
    for sample in samples {
        out.write_all(sample.to_jsonl().as_bytes()).map_err(wrap)?;
        out.write_all(b"\n").map_err(wrap)?;
    }
    out.flush().map_err(wrap)
}

/// The soft score of the predicted answer under the ground truth, in [0, 1].
pub fn soft_accuracy(predicted: &str, gt: &AnswerScores) -> f64 {
    gt.score(predicted)
}

/// A probability vector over the answer vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDistribution {
    pub probs: Vec<f64>,
}

impl AnswerDistribution {
    pub fn new(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Entries in [0, 1] and summing to one within [`DISTRIBUTION_SUM_TOL`].
    pub fn is_valid(&self) -> bool {
        let sum: f64 = self.probs.iter().sum();
        self.probs.iter().all(|p| (0.0..=1.0).contains(p))
            && (sum - 1.0).abs() <= DISTRIBUTION_SUM_TOL
    }

    /// Index of the highest-probability answer; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Answer positions sorted by descending probability, ties by index.
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.probs.len()).collect();
        order.sort_by(|&a, &b| {
            self.probs[b]
                .partial_cmp(&self.probs[a])
                .expect("probabilities are finite")
                .then(a.cmp(&b))
        });
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn vocab() -> AnswerVocabulary {
        AnswerVocabulary::new(["red", "blue", "maroon", "yes", "no"]).unwrap()
    }

    fn sample(dv: usize) -> Sample {
        Sample {
            image: ImageRecord {
                image_id: "img0".into(),
                objects: vec![
                    ObjectInstance {
                        object_id: 0,
                        category: "tie".into(),
                        feature: vec![0.25; dv],
                    },
                    ObjectInstance {
                        object_id: 1,
                        category: "shirt".into(),
                        feature: vec![-0.5; dv],
                    },
                ],
            },
            question: QuestionRecord {
                question_id: "q0".into(),
                tokens: vec!["what".into(), "color".into(), "is".into(), "the".into(), "tie".into()],
                question_type: "what color".into(),
                type_token_count: 2,
            },
            answers: AnswerScores::from_pairs([("red", 1.0)]),
            split_tag: SplitTag::Train,
        }
    }

    #[test]
    fn empty_file_loads_empty() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let samples = load_dataset(&path, &vocab()).unwrap();
        assert!(samples.is_empty());
    }

    #[test]
    fn single_sample_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        let original = vec![sample(4)];
        save_dataset(&original, &path).unwrap();
        let loaded = load_dataset(&path, &vocab()).unwrap();
        assert_eq!(loaded, original);
        assert_eq!(loaded[0].question.question_id, "q0");
        assert_eq!(loaded[0].image.image_id, "img0");

        // Re-serialization is byte-identical.
        let bytes1 = std::fs::read(&path).unwrap();
        let path2 = dir.path().join("one2.jsonl");
        save_dataset(&loaded, &path2).unwrap();
        let bytes2 = std::fs::read(&path2).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn truncated_feature_reports_line_and_dimension() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = sample(4);
        let mut bad = sample(4);
        bad.image.objects[1].feature.truncate(3);
        let mut text = good.to_jsonl();
        text.push('\n');
        text.push_str(&bad.to_jsonl());
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        let err = load_dataset(&path, &vocab()).unwrap_err();
        match err {
            DataError::FeatureDimMismatch {
                line,
                expected,
                got,
                ..
            } => {
                assert_eq!(line, 2);
                assert_eq!(expected, 4);
                assert_eq!(got, 3);
            }
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn unknown_answer_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("unknown.jsonl");
        let mut s = sample(4);
        s.answers = AnswerScores::from_pairs([("chartreuse", 1.0)]);
        std::fs::write(&path, format!("{}\n", s.to_jsonl())).unwrap();
        let err = load_dataset(&path, &vocab()).unwrap_err();
        assert!(matches!(err, DataError::UnknownAnswer { line: 1, .. }));
    }

    #[test]
    fn malformed_json_names_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("garbage.jsonl");
        std::fs::write(&path, format!("{}\n{{not json\n", sample(4).to_jsonl())).unwrap();
        let err = load_dataset(&path, &vocab()).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }));
    }

    #[test]
    fn type_prefix_must_spell_question_type() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("prefix.jsonl");
        let mut s = sample(4);
        s.question.question_type = "how many".into();
        std::fs::write(&path, format!("{}\n", s.to_jsonl())).unwrap();
        let err = load_dataset(&path, &vocab()).unwrap_err();
        assert!(matches!(err, DataError::Invalid { line: 1, .. }));
    }

    #[test]
    fn soft_accuracy_lookup() {
        let gt = AnswerScores::from_pairs([("red", 1.0), ("maroon", 0.6)]);
        assert_eq!(soft_accuracy("red", &gt), 1.0);
        assert_eq!(soft_accuracy("blue", &gt), 0.0);
        assert_eq!(soft_accuracy("maroon", &gt), 0.6);
    }

    #[test]
    fn empty_save_is_empty_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("none.jsonl");
        save_dataset(&[], &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
    }

    #[test]
    fn distribution_helpers() {
        let d = AnswerDistribution::new(vec![0.2, 0.5, 0.3]);
        assert!(d.is_valid());
        assert_eq!(d.argmax(), 1);
        assert_eq!(d.ranked(), vec![1, 2, 0]);
        assert!(!AnswerDistribution::new(vec![0.9, 0.3]).is_valid());
    }

    fn arb_sample() -> impl Strategy<Value = Sample> {
        let answer = prop::sample::select(vec!["red", "blue", "maroon", "yes", "no"]);
        let answers = prop::collection::btree_map(
            answer.prop_map(String::from),
            (0.01f64..=1.0).prop_map(|s| (s * 1000.0).round() / 1000.0),
            1..4,
        );
        let object = (0.0f64..1.0).prop_flat_map(|_| {
            prop::collection::vec(-1.0f64..1.0, 6).prop_map(|feature| ObjectInstance {
                object_id: 0,
                category: "tie".into(),
                feature,
            })
        });
        (
            prop::collection::vec(object, 1..5),
            answers,
            prop::bool::ANY,
            "[a-z]{1,8}",
        )
            .prop_map(|(mut objects, answers, train, noun)| {
                for (i, o) in objects.iter_mut().enumerate() {
                    o.object_id = i as u32;
                }
                Sample {
                    image: ImageRecord {
                        image_id: format!("img-{noun}"),
                        objects,
                    },
                    question: QuestionRecord {
                        question_id: format!("q-{noun}"),
                        tokens: vec![
                            "what".into(),
                            "color".into(),
                            "is".into(),
                            "the".into(),
                            noun,
                        ],
                        question_type: "what color".into(),
                        type_token_count: 2,
                    },
                    answers: AnswerScores { entries: answers },
                    split_tag: if train { SplitTag::Train } else { SplitTag::Test },
                }
            })
    }

    proptest! {
        #[test]
        fn save_load_round_trip(samples in prop::collection::vec(arb_sample(), 0..20)) {
            let dir = tempdir().unwrap();
            let path = dir.path().join("prop.jsonl");
            save_dataset(&samples, &path).unwrap();
            let loaded = load_dataset(&path, &vocab()).unwrap();
            prop_assert_eq!(loaded, samples);
        }

        #[test]
        fn soft_accuracy_bounded_and_monotone(score_a in 0.0f64..=1.0, score_b in 0.0f64..=1.0) {
            let lo = score_a.min(score_b);
            let hi = score_a.max(score_b);
            let gt_lo = AnswerScores::from_pairs([("red", lo)]);
            let gt_hi = AnswerScores::from_pairs([("red", hi)]);
            let acc_lo = soft_accuracy("red", &gt_lo);
            let acc_hi = soft_accuracy("red", &gt_hi);
            prop_assert!((0.0..=1.0).contains(&acc_lo));
            prop_assert!(acc_lo <= acc_hi);
        }
    }
}
