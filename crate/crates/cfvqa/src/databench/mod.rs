//! Synthetic changing-priors benchmark generator.
//!
//! Scenes are bags of objects with a category, a color, and a group-count
//! attribute; features concatenate the three one-hot blocks plus Gaussian
//! noise, so a nearest-centroid readout recovers the attributes while the
//! answer priors carry the bias. Questions come from closed templates with
//! a designated target noun; the train split skews each question type's
//! answers toward a head answer and the test split swaps that head, which
//! is the changing-priors property the benchmark exists to exhibit.

mod lexicon;

pub use lexicon::{EmbeddingLexicon, LexiconError};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    AnswerScores, AnswerVocabulary, ImageRecord, ObjectInstance, QuestionRecord, Sample, SplitTag,
};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("question {question_id} contains no lexicon noun")]
    NounAbsent { question_id: String },
    #[error("question {question_id} does not match any known template")]
    UnknownTemplate { question_id: String },
    #[error("rephrasing group needs n >= 2, got {0}")]
    GroupTooSmall(usize),
}

/// The three question families of the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    WhatColor,
    HowMany,
    IsThere,
}

const PLACES: [&str; 4] = ["image", "picture", "photo", "scene"];

impl QuestionKind {
    pub fn question_type(&self) -> &'static str {
        match self {
            QuestionKind::WhatColor => "what color",
            QuestionKind::HowMany => "how many",
            QuestionKind::IsThere => "is there",
        }
    }

    pub fn type_token_count(&self) -> usize {
        2
    }

    fn variant_count(&self) -> usize {
        match self {
            QuestionKind::WhatColor => 1 + PLACES.len(),
            QuestionKind::HowMany | QuestionKind::IsThere => 2 * PLACES.len(),
        }
    }

    fn render(&self, variant: usize, noun: &str, color: Option<&str>) -> Vec<String> {
        let toks: Vec<&str> = match self {
            QuestionKind::WhatColor => {
                if variant == 0 {
                    vec!["what", "color", "is", "the", noun]
                } else {
                    let place = PLACES[variant - 1];
                    vec!["what", "color", "is", "the", noun, "in", "the", place]
                }
            }
            QuestionKind::HowMany => {
                let place = PLACES[variant % PLACES.len()];
                let verb = if variant < PLACES.len() { "are" } else { "appear" };
                vec!["how", "many", noun, "objects", verb, "in", "the", place]
            }
            QuestionKind::IsThere => {
                let c = color.expect("is-there questions name a color");
                let place = PLACES[variant % PLACES.len()];
                if variant < PLACES.len() {
                    vec!["is", "there", "a", c, noun, "in", "the", place]
                } else {
                    vec!["is", "there", "a", c, noun, "shown", "in", "the", place]
                }
            }
        };
        toks.into_iter().map(String::from).collect()
    }

    /// Recover `(variant, noun, color)` from a rendered question.
    fn parse(&self, tokens: &[String]) -> Option<(usize, String, Option<String>)> {
        match self {
            QuestionKind::WhatColor => match tokens.len() {
                5 => Some((0, tokens[4].clone(), None)),
                8 => {
                    let place = PLACES.iter().position(|p| *p == tokens[7])?;
                    Some((1 + place, tokens[4].clone(), None))
                }
                _ => None,
            },
            QuestionKind::HowMany => {
                if tokens.len() != 8 {
                    return None;
                }
                let place = PLACES.iter().position(|p| *p == tokens[7])?;
                let variant = match tokens[4].as_str() {
                    "are" => place,
                    "appear" => PLACES.len() + place,
                    _ => return None,
                };
                Some((variant, tokens[2].clone(), None))
            }
            QuestionKind::IsThere => match tokens.len() {
                8 => {
                    let place = PLACES.iter().position(|p| *p == tokens[7])?;
                    Some((place, tokens[4].clone(), Some(tokens[3].clone())))
                }
                9 => {
                    let place = PLACES.iter().position(|p| *p == tokens[8])?;
                    Some((
                        PLACES.len() + place,
                        tokens[4].clone(),
                        Some(tokens[3].clone()),
                    ))
                }
                _ => None,
            },
        }
    }

    fn from_question_type(question_type: &str) -> Option<QuestionKind> {
        match question_type {
            "what color" => Some(QuestionKind::WhatColor),
            "how many" => Some(QuestionKind::HowMany),
            "is there" => Some(QuestionKind::IsThere),
            _ => None,
        }
    }
}

/// A named group of related object categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryGroup {
    pub name: String,
    pub members: Vec<String>,
}

/// Everything the generator needs to build one benchmark instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub question_types: Vec<QuestionKind>,
    pub category_groups: Vec<CategoryGroup>,
    /// `(alias, category)` pairs; the alias may appear as the question noun.
    pub aliases: Vec<(String, String)>,
    pub colors: Vec<String>,
    pub counts: Vec<u32>,
    pub n_v_min: usize,
    pub n_v_max: usize,
    pub d_v: usize,
    pub noise_sigma: f64,
    /// Train-split probability mass of the head answer per question type.
    pub bias_skew: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    /// Probability that the question uses a category's alias as its noun.
    pub alias_prob: f64,
    /// Probability of attaching a second, lower-scored ground-truth answer.
    pub secondary_answer_prob: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        let group = |name: &str, members: &[&str]| CategoryGroup {
            name: name.to_string(),
            members: members.iter().map(|m| m.to_string()).collect(),
        };
        GeneratorSpec {
            question_types: vec![
                QuestionKind::WhatColor,
                QuestionKind::HowMany,
                QuestionKind::IsThere,
            ],
            category_groups: vec![
                group("clothing", &["tie", "shirt", "hat"]),
                group("animals", &["dog", "cat", "bird"]),
                group("furniture", &["chair", "table", "sofa"]),
                group("outdoor", &["kite", "ball", "tree"]),
                group("structures", &["wall", "door", "fence"]),
            ],
            aliases: vec![
                ("necktie".to_string(), "tie".to_string()),
                ("puppy".to_string(), "dog".to_string()),
                ("couch".to_string(), "sofa".to_string()),
                ("kitty".to_string(), "cat".to_string()),
            ],
            colors: [
                "red", "blue", "green", "yellow", "black", "white", "orange", "purple",
            ]
            .iter()
            .map(|c| c.to_string())
            .collect(),
            counts: vec![1, 2, 3, 4],
            n_v_min: 4,
            n_v_max: 10,
            d_v: 32,
            noise_sigma: 0.1,
            bias_skew: 0.8,
            train_size: 5000,
            test_size: 1000,
            seed: 7,
            alias_prob: 0.25,
            secondary_answer_prob: 0.3,
        }
    }
}

impl GeneratorSpec {
    pub fn categories(&self) -> Vec<&str> {
        self.category_groups
            .iter()
            .flat_map(|g| g.members.iter().map(String::as_str))
            .collect()
    }

    /// Combined width of the category, color, and count one-hot blocks.
    fn signal_dims(&self) -> usize {
        self.categories().len() + self.colors.len() + self.counts.len()
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.question_types.is_empty() {
            return Err(GenError::InvalidSpec("no question types".into()));
        }
        if !(0.5 < self.bias_skew && self.bias_skew < 1.0) {
            return Err(GenError::InvalidSpec(format!(
                "bias_skew {} must lie strictly between 0.5 and 1",
                self.bias_skew
            )));
        }
        if self.n_v_min < 1 || self.n_v_min > self.n_v_max {
            return Err(GenError::InvalidSpec("bad n_v range".into()));
        }
        if self.d_v < self.signal_dims() {
            return Err(GenError::InvalidSpec(format!(
                "d_v {} is smaller than the {} signal dimensions",
                self.d_v,
                self.signal_dims()
            )));
        }
        if self.colors.len() < 2 || self.counts.len() < 2 {
            return Err(GenError::InvalidSpec(
                "need at least two colors and two counts".into(),
            ));
        }
        let cats = self.categories();
        if cats.len() < 2 {
            return Err(GenError::InvalidSpec("need at least two categories".into()));
        }
        for (alias, cat) in &self.aliases {
            if !cats.contains(&cat.as_str()) {
                return Err(GenError::InvalidSpec(format!(
                    "alias {alias:?} points at unknown category {cat:?}"
                )));
            }
        }
        Ok(())
    }

    /// Answer strings of one question type, train head first; the test
    /// split's head is the second entry.
    pub fn answers_of(&self, kind: QuestionKind) -> Vec<String> {
        match kind {
            QuestionKind::WhatColor => self.colors.clone(),
            QuestionKind::HowMany => self.counts.iter().map(|c| c.to_string()).collect(),
            QuestionKind::IsThere => vec!["yes".to_string(), "no".to_string()],
        }
    }

    /// Full answer vocabulary across every question type.
    pub fn answer_vocabulary(&self) -> AnswerVocabulary {
        let mut answers: Vec<String> = Vec::new();
        for kind in [
            QuestionKind::WhatColor,
            QuestionKind::HowMany,
            QuestionKind::IsThere,
        ] {
            for a in self.answers_of(kind) {
                if !answers.contains(&a) {
                    answers.push(a);
                }
            }
        }
        AnswerVocabulary::new(answers).expect("generator answers are unique")
    }
}

/// splitmix64-style mixer deriving per-sample seeds from (seed, salt, index).
fn mix_seed(seed: u64, salt: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 is kept away from zero.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministic embedding lexicon for a spec: orthonormal axes per group,
/// category, alias, and filler token keep all pairwise cosines controlled.
pub fn build_embedding_lexicon(spec: &GeneratorSpec) -> EmbeddingLexicon {
    const GROUP_WEIGHT: f64 = 0.65;
    const ALIAS_WEIGHT: f64 = 0.95;

    let mut other_tokens: Vec<String> = Vec::new();
    let mut push_unique = |v: &mut Vec<String>, t: &str| {
        if !v.iter().any(|x| x == t) {
            v.push(t.to_string());
        }
    };
    for t in [
        "what", "color", "is", "the", "how", "many", "objects", "are", "appear", "in", "a",
        "there", "shown", "yes", "no",
    ] {
        push_unique(&mut other_tokens, t);
    }
    for p in PLACES {
        push_unique(&mut other_tokens, p);
    }
    for c in &spec.colors {
        push_unique(&mut other_tokens, c);
    }
    for c in &spec.counts {
        push_unique(&mut other_tokens, &c.to_string());
    }

    let n_groups = spec.category_groups.len();
    let n_cats = spec.categories().len();
    let dim = n_groups + n_cats + spec.aliases.len() + other_tokens.len();

    let mut entries: Vec<(String, Vec<f64>, bool)> = Vec::new();
    let mut cat_axis = n_groups;
    let mut cat_vectors: Vec<(String, Vec<f64>)> = Vec::new();
    for (g, group) in spec.category_groups.iter().enumerate() {
        for member in &group.members {
            let mut v = vec![0.0; dim];
            v[g] = GROUP_WEIGHT;
            v[cat_axis] = (1.0 - GROUP_WEIGHT * GROUP_WEIGHT).sqrt();
            cat_vectors.push((member.clone(), v.clone()));
            entries.push((member.clone(), v, true));
            cat_axis += 1;
        }
    }
    let mut alias_axis = n_groups + n_cats;
    for (alias, cat) in &spec.aliases {
        let base = &cat_vectors
            .iter()
            .find(|(c, _)| c == cat)
            .expect("validated alias target")
            .1;
        let mut v: Vec<f64> = base.iter().map(|x| x * ALIAS_WEIGHT).collect();
        v[alias_axis] = (1.0 - ALIAS_WEIGHT * ALIAS_WEIGHT).sqrt();
        entries.push((alias.clone(), v, true));
        alias_axis += 1;
    }
    let mut other_axis = n_groups + n_cats + spec.aliases.len();
    for token in &other_tokens {
        let mut v = vec![0.0; dim];
        v[other_axis] = 1.0;
        entries.push((token.clone(), v, false));
        other_axis += 1;
    }
    EmbeddingLexicon::from_entries(dim, entries)
}

fn one_hot_feature(
    spec: &GeneratorSpec,
    cat_idx: usize,
    color_idx: usize,
    count_idx: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let cats = spec.categories().len();
    let colors = spec.colors.len();
    let mut f = vec![0.0; spec.d_v];
    f[cat_idx] = 1.0;
    f[cats + color_idx] = 1.0;
    f[cats + colors + count_idx] = 1.0;
    for v in f.iter_mut() {
        *v += spec.noise_sigma * gaussian(rng);
    }
    f
}

fn generate_sample(spec: &GeneratorSpec, tag: SplitTag, index: usize) -> Sample {
    let salt = match tag {
        SplitTag::Train => 1,
        SplitTag::Test => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, salt, index as u64));
    let kind = spec.question_types[rng.random_range(0..spec.question_types.len())];
    let answers = spec.answers_of(kind);
    let head_idx = match tag {
        SplitTag::Train => 0,
        SplitTag::Test => 1,
    };

    let primary_idx = if rng.random::<f64>() < spec.bias_skew {
        head_idx
    } else {
        let other = rng.random_range(0..answers.len() - 1);
        if other >= head_idx {
            other + 1
        } else {
            other
        }
    };
    let primary = answers[primary_idx].clone();

    let cats = spec.categories();
    let target_cat_idx = rng.random_range(0..cats.len());
    let target_cat = cats[target_cat_idx].to_string();
    let alias = spec
        .aliases
        .iter()
        .find(|(_, c)| *c == target_cat)
        .map(|(a, _)| a.clone());
    let use_alias = alias.is_some() && rng.random::<f64>() < spec.alias_prob;
    let noun = if use_alias {
        alias.expect("alias presence checked")
    } else {
        target_cat.clone()
    };

    let random_color = |rng: &mut ChaCha8Rng| rng.random_range(0..spec.colors.len());
    let random_count = |rng: &mut ChaCha8Rng| rng.random_range(0..spec.counts.len());
    let (target_color_idx, target_count_idx, named_color) = match kind {
        QuestionKind::WhatColor => {
            let color_idx = spec
                .colors
                .iter()
                .position(|c| *c == primary)
                .expect("color answer");
            (color_idx, random_count(&mut rng), None)
        }
        QuestionKind::HowMany => {
            let count_idx = spec
                .counts
                .iter()
                .position(|c| c.to_string() == primary)
                .expect("count answer");
            (random_color(&mut rng), count_idx, None)
        }
        QuestionKind::IsThere => {
            let color_idx = random_color(&mut rng);
            let named = if primary == "yes" {
                color_idx
            } else {
                let other = rng.random_range(0..spec.colors.len() - 1);
                if other >= color_idx {
                    other + 1
                } else {
                    other
                }
            };
            (
                color_idx,
                random_count(&mut rng),
                Some(spec.colors[named].clone()),
            )
        }
    };

    let n_v = rng.random_range(spec.n_v_min..=spec.n_v_max);
    let target_pos = rng.random_range(0..n_v);
    let mut objects = Vec::with_capacity(n_v);
    for pos in 0..n_v {
        let (cat_idx, color_idx, count_idx, category) = if pos == target_pos {
            (
                target_cat_idx,
                target_color_idx,
                target_count_idx,
                target_cat.clone(),
            )
        } else {
            let other = rng.random_range(0..cats.len() - 1);
            let cat_idx = if other >= target_cat_idx { other + 1 } else { other };
            (
                cat_idx,
                random_color(&mut rng),
                random_count(&mut rng),
                cats[cat_idx].to_string(),
            )
        };
        objects.push(ObjectInstance {
            object_id: pos as u32,
            category,
            feature: one_hot_feature(spec, cat_idx, color_idx, count_idx, &mut rng),
        });
    }

    let variant = rng.random_range(0..kind.variant_count());
    let tokens = kind.render(variant, &noun, named_color.as_deref());

    let mut gt = AnswerScores::from_pairs([(primary.clone(), 1.0)]);
    if kind != QuestionKind::IsThere && rng.random::<f64>() < spec.secondary_answer_prob {
        let other = rng.random_range(0..answers.len() - 1);
        let secondary_idx = if other >= primary_idx { other + 1 } else { other };
        let score = [0.3, 0.6, 0.9][rng.random_range(0..3)];
        gt.insert(answers[secondary_idx].clone(), score);
    }

    let split = match tag {
        SplitTag::Train => "train",
        SplitTag::Test => "test",
    };
    Sample {
        image: ImageRecord {
            image_id: format!("{split}-img-{index:05}"),
            objects,
        },
        question: QuestionRecord {
            question_id: format!("{split}-q-{index:05}"),
            tokens,
            question_type: kind.question_type().to_string(),
            type_token_count: kind.type_token_count(),
        },
        answers: gt,
        split_tag: tag,
    }
}

/// Generate the train and test splits of the changing-priors benchmark.
pub fn generate_dataset(spec: &GeneratorSpec) -> Result<(Vec<Sample>, Vec<Sample>), GenError> {
    spec.validate()?;
    let train = (0..spec.train_size)
        .map(|i| generate_sample(spec, SplitTag::Train, i))
        .collect();
    let test = (0..spec.test_size)
        .map(|i| generate_sample(spec, SplitTag::Test, i))
        .collect();
    Ok((train, test))
}

/// One question plus rephrasings sharing image, answers, and question type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RephrasingGroup {
    pub group_id: String,
    pub members: Vec<Sample>,
}

impl RephrasingGroup {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Expand a generated sample into a group of `n` template variants (the
/// original first). Variants differ only in filler tokens.
pub fn generate_rephrasings(
    sample: &Sample,
    n: usize,
    spec: &GeneratorSpec,
) -> Result<RephrasingGroup, GenError> {
    if n < 2 {
        return Err(GenError::GroupTooSmall(n));
    }
    spec.validate()?;
    let kind = QuestionKind::from_question_type(&sample.question.question_type).ok_or_else(
        || GenError::UnknownTemplate {
            question_id: sample.question.question_id.clone(),
        },
    )?;
    let (variant, noun, color) =
        kind.parse(&sample.question.tokens)
            .ok_or_else(|| GenError::UnknownTemplate {
                question_id: sample.question.question_id.clone(),
            })?;
    let mut members = vec![sample.clone()];
    let total = kind.variant_count();
    let mut next = variant;
    for r in 1..n {
        next = (next + 1) % total;
        if next == variant {
            // More members requested than distinct variants exist; cycle
            // rather than fail.
            next = (next + 1) % total;
        }
        let mut member = sample.clone();
        member.question.tokens = kind.render(next, &noun, color.as_deref());
        member.question.question_id = format!("{}-r{}", sample.question.question_id, r);
        members.push(member);
    }
    Ok(RephrasingGroup {
        group_id: sample.question.question_id.clone(),
        members,
    })
}

/// Delete the target noun (the first lexicon noun) from a question, leaving
/// image and answers untouched.
pub fn build_critical_word_removed(
    sample: &Sample,
    lexicon: &EmbeddingLexicon,
) -> Result<Sample, GenError> {
    let q = &sample.question;
    let noun_pos = q
        .tokens
        .iter()
        .position(|t| lexicon.is_noun(t))
        .ok_or_else(|| GenError::NounAbsent {
            question_id: q.question_id.clone(),
        })?;
    let mut out = sample.clone();
    out.question.tokens.remove(noun_pos);
    out.question.question_id = format!("{}-nr", q.question_id);
    Ok(out)
}

/// Persistence for rephrasing groups: one JSON object per line.
pub fn save_rephrasings(groups: &[RephrasingGroup], path: &std::path::Path) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for g in groups {
        serde_json::to_writer(&mut out, g).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn load_rephrasings(path: &std::path::Path) -> std::io::Result<Vec<RephrasingGroup>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)?;
    let mut groups = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        groups.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(groups)
}
