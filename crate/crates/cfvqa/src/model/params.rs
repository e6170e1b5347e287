//! Model parameters, initialization, and checkpoint persistence.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::fusion::FusionStrategy;
use super::ModelError;
use crate::data::{AnswerVocabulary, Sample};

/// Reserved token substituted for masked question words.
pub const MASK_TOKEN: &str = "[MASK]";

/// Embedding row for tokens absent from the vocabulary.
pub const UNK_ROW: usize = 0;
/// Embedding row for [`MASK_TOKEN`].
pub const MASK_ROW: usize = 1;
const RESERVED_ROWS: usize = 2;

/// Token-to-embedding-row mapping with reserved UNK and MASK rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens
            .into_iter()
            .map(Into::into)
            .filter(|t| t != MASK_TOKEN)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Sorted unique tokens of a sample collection.
    pub fn from_samples(samples: &[Sample]) -> Self {
        let unique: BTreeSet<&str> = samples
            .iter()
            .flat_map(|s| s.question.tokens.iter().map(String::as_str))
            .collect();
        Self::new(unique.into_iter().map(String::from))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Number of embedding rows including the reserved ones.
    pub fn num_rows(&self) -> usize {
        self.tokens.len() + RESERVED_ROWS
    }

    /// Embedding row of a token: MASK and unknown tokens map to the
    /// reserved rows.
    pub fn row(&self, token: &str) -> usize {
        if token == MASK_TOKEN {
            return MASK_ROW;
        }
        match self.index.get(token) {
            Some(i) => i + RESERVED_ROWS,
            None => UNK_ROW,
        }
    }
}

/// All trainable weights of the model.
///
/// Shapes follow a hidden width `d_h`: the question side embeds tokens into
/// `d_h` and summarizes them with a single-pass recurrent accumulator; the
/// visual side projects raw `d_v` features into `d_h`; a single-head
/// attention scores objects against the question summary; one-hidden-layer
/// classifiers produce the answer logits for the main and question-only
/// branches; a scalar gate parameterizes the learned-mixin fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub d_v: usize,
    pub d_h: usize,
    pub num_answers: usize,
    pub seed: u64,
    /// (num_rows, d_h); row 0 is UNK, row 1 is MASK.
    pub embed: Array2<f64>,
    /// (d_h, d_h) input weights of the recurrent accumulator.
    pub rnn_input: Array2<f64>,
    /// (d_h, d_h) state weights of the recurrent accumulator.
    pub rnn_state: Array2<f64>,
    pub rnn_bias: Array1<f64>,
    /// (d_h, d_v) visual projection.
    pub visual_proj: Array2<f64>,
    pub visual_bias: Array1<f64>,
    /// (d_h, d_h) attention bilinear form between objects and the summary.
    pub attn: Array2<f64>,
    /// (d_h, d_h) classifier hidden layer of the main branch.
    pub cls_hidden: Array2<f64>,
    pub cls_hidden_bias: Array1<f64>,
    /// (num_answers, d_h) classifier output of the main branch.
    pub cls_out: Array2<f64>,
    pub cls_out_bias: Array1<f64>,
    /// (d_h, d_h) classifier hidden layer of the question-only branch.
    pub q_hidden: Array2<f64>,
    pub q_hidden_bias: Array1<f64>,
    /// (num_answers, d_h) classifier output of the question-only branch.
    pub q_out: Array2<f64>,
    pub q_out_bias: Array1<f64>,
    /// (d_h,) learned-mixin gate weights over the question summary.
    pub gate_weight: Array1<f64>,
    pub gate_bias: f64,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let r = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-r..=r))
}

fn uniform_vector(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Array1<f64> {
    let r = 1.0 / (fan_in as f64).sqrt();
    Array1::from_shape_fn(len, |_| rng.random_range(-r..=r))
}

impl ModelParams {
    /// Seeded uniform initialization in `[-r, r]` with `r = 1/sqrt(fan_in)`
    /// per weight group.
    pub fn init(d_v: usize, d_h: usize, num_answers: usize, num_rows: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams {
            d_v,
            d_h,
            num_answers,
            seed,
            embed: uniform_matrix(&mut rng, num_rows, d_h, d_h),
            rnn_input: uniform_matrix(&mut rng, d_h, d_h, d_h),
            rnn_state: uniform_matrix(&mut rng, d_h, d_h, d_h),
            rnn_bias: uniform_vector(&mut rng, d_h, d_h),
            visual_proj: uniform_matrix(&mut rng, d_h, d_v, d_v),
            visual_bias: uniform_vector(&mut rng, d_h, d_v),
            attn: uniform_matrix(&mut rng, d_h, d_h, d_h),
            cls_hidden: uniform_matrix(&mut rng, d_h, d_h, d_h),
            cls_hidden_bias: uniform_vector(&mut rng, d_h, d_h),
            cls_out: uniform_matrix(&mut rng, num_answers, d_h, d_h),
            cls_out_bias: uniform_vector(&mut rng, num_answers, d_h),
            q_hidden: uniform_matrix(&mut rng, d_h, d_h, d_h),
            q_hidden_bias: uniform_vector(&mut rng, d_h, d_h),
            q_out: uniform_matrix(&mut rng, num_answers, d_h, d_h),
            q_out_bias: uniform_vector(&mut rng, num_answers, d_h),
            gate_weight: uniform_vector(&mut rng, d_h, d_h),
            gate_bias: rng.random_range(-1.0..=1.0) / (d_h as f64).sqrt(),
        }
    }

    pub fn all_finite(&self) -> bool {
        let mats = [
            &self.embed,
            &self.rnn_input,
            &self.rnn_state,
            &self.visual_proj,
            &self.attn,
            &self.cls_hidden,
            &self.cls_out,
            &self.q_hidden,
            &self.q_out,
        ];
        let vecs = [
            &self.rnn_bias,
            &self.visual_bias,
            &self.cls_hidden_bias,
            &self.cls_out_bias,
            &self.q_hidden_bias,
            &self.q_out_bias,
            &self.gate_weight,
        ];
        mats.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && vecs.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.gate_bias.is_finite()
    }

    fn to_wire(&self) -> BTreeMap<String, TensorWire> {
        let mut map = BTreeMap::new();
        let mut mat = |name: &str, m: &Array2<f64>| {
            map.insert(
                name.to_string(),
                TensorWire {
                    shape: vec![m.nrows(), m.ncols()],
                    values: m.iter().copied().collect(),
                },
            );
        };
        mat("embed", &self.embed);
        mat("rnn_input", &self.rnn_input);
        mat("rnn_state", &self.rnn_state);
        mat("visual_proj", &self.visual_proj);
        mat("attn", &self.attn);
        mat("cls_hidden", &self.cls_hidden);
        mat("cls_out", &self.cls_out);
        mat("q_hidden", &self.q_hidden);
        mat("q_out", &self.q_out);
        let mut map = map;
        let mut vec = |name: &str, v: &Array1<f64>| {
            map.insert(
                name.to_string(),
                TensorWire {
                    shape: vec![v.len()],
                    values: v.to_vec(),
                },
            );
        };
        vec("rnn_bias", &self.rnn_bias);
        vec("visual_bias", &self.visual_bias);
        vec("cls_hidden_bias", &self.cls_hidden_bias);
        vec("cls_out_bias", &self.cls_out_bias);
        vec("q_hidden_bias", &self.q_hidden_bias);
        vec("q_out_bias", &self.q_out_bias);
        vec("gate_weight", &self.gate_weight);
        map.insert(
            "gate_bias".to_string(),
            TensorWire {
                shape: vec![1],
                values: vec![self.gate_bias],
            },
        );
        map
    }

    /// Hex SHA-256 over the canonical serialization of every weight.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(&self.to_wire()).expect("weights serialize");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct TensorWire {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TensorWire {
    fn matrix(&self, name: &str) -> Result<Array2<f64>, ModelError> {
        if self.shape.len() != 2 || self.shape[0] * self.shape[1] != self.values.len() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name} has inconsistent shape"
            )));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.values.clone())
            .map_err(|e| ModelError::Checkpoint(format!("tensor {name}: {e}")))
    }

    fn vector(&self, name: &str) -> Result<Array1<f64>, ModelError> {
        if self.shape.len() != 1 || self.shape[0] != self.values.len() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name} has inconsistent shape"
            )));
        }
        Ok(Array1::from_vec(self.values.clone()))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointWire {
    d_v: usize,
    d_h: usize,
    num_answers: usize,
    seed: u64,
    fusion: String,
    mixin_gate: f64,
    entropy_weight: f64,
    token_vocab: Vec<String>,
    answer_vocab: Vec<String>,
    params: BTreeMap<String, TensorWire>,
}

pub(super) fn write_checkpoint(
    path: &Path,
    params: &ModelParams,
    fusion: &FusionStrategy,
    token_vocab: &TokenVocab,
    answer_vocab: &AnswerVocabulary,
) -> Result<(), ModelError> {
    let wire = CheckpointWire {
        d_v: params.d_v,
        d_h: params.d_h,
        num_answers: params.num_answers,
        seed: params.seed,
        fusion: fusion.kind.as_str().to_string(),
        mixin_gate: fusion.mixin_gate,
        entropy_weight: fusion.entropy_weight,
        token_vocab: token_vocab.tokens().to_vec(),
        answer_vocab: answer_vocab.answers().to_vec(),
        params: params.to_wire(),
    };
    let file = File::create(path)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(&mut out, &wire)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    out.write_all(b"\n")
        .and_then(|_| out.flush())
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}

pub(super) fn read_checkpoint(
    path: &Path,
) -> Result<(ModelParams, FusionStrategy, TokenVocab, AnswerVocabulary), ModelError> {
    let file = File::open(path)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    let wire: CheckpointWire = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;

    let get = |name: &str| {
        wire.params
            .get(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))
    };
    let params = ModelParams {
        d_v: wire.d_v,
        d_h: wire.d_h,
        num_answers: wire.num_answers,
        seed: wire.seed,
        embed: get("embed")?.matrix("embed")?,
        rnn_input: get("rnn_input")?.matrix("rnn_input")?,
        rnn_state: get("rnn_state")?.matrix("rnn_state")?,
        rnn_bias: get("rnn_bias")?.vector("rnn_bias")?,
        visual_proj: get("visual_proj")?.matrix("visual_proj")?,
        visual_bias: get("visual_bias")?.vector("visual_bias")?,
        attn: get("attn")?.matrix("attn")?,
        cls_hidden: get("cls_hidden")?.matrix("cls_hidden")?,
        cls_hidden_bias: get("cls_hidden_bias")?.vector("cls_hidden_bias")?,
        cls_out: get("cls_out")?.matrix("cls_out")?,
        cls_out_bias: get("cls_out_bias")?.vector("cls_out_bias")?,
        q_hidden: get("q_hidden")?.matrix("q_hidden")?,
        q_hidden_bias: get("q_hidden_bias")?.vector("q_hidden_bias")?,
        q_out: get("q_out")?.matrix("q_out")?,
        q_out_bias: get("q_out_bias")?.vector("q_out_bias")?,
        gate_weight: get("gate_weight")?.vector("gate_weight")?,
        gate_bias: get("gate_bias")?.values.first().copied().ok_or_else(|| {
            ModelError::Checkpoint("missing gate_bias value".to_string())
        })?,
    };
    let fusion = FusionStrategy {
        kind: wire
            .fusion
            .parse()
            .map_err(|e: String| ModelError::Checkpoint(e))?,
        mixin_gate: wire.mixin_gate,
        entropy_weight: wire.entropy_weight,
    };
    let token_vocab = TokenVocab::new(wire.token_vocab);
    let answer_vocab = AnswerVocabulary::new(wire.answer_vocab)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if params.num_answers != answer_vocab.len() {
        return Err(ModelError::Checkpoint(format!(
            "num_answers {} does not match vocabulary size {}",
            params.num_answers,
            answer_vocab.len()
        )));
    }
    Ok((params, fusion, token_vocab, answer_vocab))
}

/// Per-parameter gradient accumulator matching [`ModelParams`] shapes.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub embed: Array2<f64>,
    pub rnn_input: Array2<f64>,
    pub rnn_state: Array2<f64>,
    pub rnn_bias: Array1<f64>,
    pub visual_proj: Array2<f64>,
    pub visual_bias: Array1<f64>,
    pub attn: Array2<f64>,
    pub cls_hidden: Array2<f64>,
    pub cls_hidden_bias: Array1<f64>,
    pub cls_out: Array2<f64>,
    pub cls_out_bias: Array1<f64>,
    pub q_hidden: Array2<f64>,
    pub q_hidden_bias: Array1<f64>,
    pub q_out: Array2<f64>,
    pub q_out_bias: Array1<f64>,
    pub gate_weight: Array1<f64>,
    pub gate_bias: f64,
}

impl Gradients {
    /// Heavy-ball velocity update: `self = decay * self + other`.
    pub fn decay_and_add(&mut self, decay: f64, other: &Gradients) {
        macro_rules! blend {
            ($($field:ident),+) => {
                $(
                    self.$field *= decay;
                    self.$field += &other.$field;
                )+
            };
        }
        blend!(
            embed,
            rnn_input,
            rnn_state,
            rnn_bias,
            visual_proj,
            visual_bias,
            attn,
            cls_hidden,
            cls_hidden_bias,
            cls_out,
            cls_out_bias,
            q_hidden,
            q_hidden_bias,
            q_out,
            q_out_bias,
            gate_weight
        );
        self.gate_bias = decay * self.gate_bias + other.gate_bias;
    }

    pub fn zeros_like(p: &ModelParams) -> Self {
        Gradients {
            embed: Array2::zeros(p.embed.raw_dim()),
            rnn_input: Array2::zeros(p.rnn_input.raw_dim()),
            rnn_state: Array2::zeros(p.rnn_state.raw_dim()),
            rnn_bias: Array1::zeros(p.rnn_bias.len()),
            visual_proj: Array2::zeros(p.visual_proj.raw_dim()),
            visual_bias: Array1::zeros(p.visual_bias.len()),
            attn: Array2::zeros(p.attn.raw_dim()),
            cls_hidden: Array2::zeros(p.cls_hidden.raw_dim()),
            cls_hidden_bias: Array1::zeros(p.cls_hidden_bias.len()),
            cls_out: Array2::zeros(p.cls_out.raw_dim()),
            cls_out_bias: Array1::zeros(p.cls_out_bias.len()),
            q_hidden: Array2::zeros(p.q_hidden.raw_dim()),
            q_hidden_bias: Array1::zeros(p.q_hidden_bias.len()),
            q_out: Array2::zeros(p.q_out.raw_dim()),
            q_out_bias: Array1::zeros(p.q_out_bias.len()),
            gate_weight: Array1::zeros(p.gate_weight.len()),
            gate_bias: 0.0,
        }
    }
}

fn adam_update_array<D: ndarray::Dimension>(
    theta: &mut ndarray::Array<f64, D>,
    first: &mut ndarray::Array<f64, D>,
    second: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    correction1: f64,
    correction2: f64,
) {
    ndarray::Zip::from(theta)
        .and(first)
        .and(second)
        .and(grad)
        .for_each(|t, m, v, g| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *t -= lr * (m_hat / (v_hat.sqrt() + epsilon) + weight_decay * *t);
        });
}

impl ModelParams {
    /// Bias-corrected Adam step.
    #[allow(clippy::too_many_arguments)]
    pub fn adam_step(
        &mut self,
        first: &mut Gradients,
        second: &mut Gradients,
        grads: &Gradients,
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        weight_decay: f64,
        step: u64,
    ) {
        let correction1 = 1.0 - beta1.powi(step as i32);
        let correction2 = 1.0 - beta2.powi(step as i32);
        macro_rules! update {
            ($($field:ident),+) => {
                $(
                    adam_update_array(
                        &mut self.$field,
                        &mut first.$field,
                        &mut second.$field,
                        &grads.$field,
                        lr, beta1, beta2, epsilon, weight_decay, correction1, correction2,
                    );
                )+
            };
        }
        update!(
            embed,
            rnn_input,
            rnn_state,
            rnn_bias,
            visual_proj,
            visual_bias,
            attn,
            cls_hidden,
            cls_hidden_bias,
            cls_out,
            cls_out_bias,
            q_hidden,
            q_hidden_bias,
            q_out,
            q_out_bias,
            gate_weight
        );
        first.gate_bias = beta1 * first.gate_bias + (1.0 - beta1) * grads.gate_bias;
        second.gate_bias = beta2 * second.gate_bias + (1.0 - beta2) * grads.gate_bias * grads.gate_bias;
        let m_hat = first.gate_bias / correction1;
        let v_hat = second.gate_bias / correction2;
        self.gate_bias -= lr * (m_hat / (v_hat.sqrt() + epsilon) + weight_decay * self.gate_bias);
    }

    /// One plain gradient-descent step.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) {
        self.embed.scaled_add(-learning_rate, &grads.embed);
        self.rnn_input.scaled_add(-learning_rate, &grads.rnn_input);
        self.rnn_state.scaled_add(-learning_rate, &grads.rnn_state);
        self.rnn_bias.scaled_add(-learning_rate, &grads.rnn_bias);
        self.visual_proj
            .scaled_add(-learning_rate, &grads.visual_proj);
        self.visual_bias
            .scaled_add(-learning_rate, &grads.visual_bias);
        self.attn.scaled_add(-learning_rate, &grads.attn);
        self.cls_hidden.scaled_add(-learning_rate, &grads.cls_hidden);
        self.cls_hidden_bias
            .scaled_add(-learning_rate, &grads.cls_hidden_bias);
        self.cls_out.scaled_add(-learning_rate, &grads.cls_out);
        self.cls_out_bias
            .scaled_add(-learning_rate, &grads.cls_out_bias);
        self.q_hidden.scaled_add(-learning_rate, &grads.q_hidden);
        self.q_hidden_bias
            .scaled_add(-learning_rate, &grads.q_hidden_bias);
        self.q_out.scaled_add(-learning_rate, &grads.q_out);
        self.q_out_bias
            .scaled_add(-learning_rate, &grads.q_out_bias);
        self.gate_weight
            .scaled_add(-learning_rate, &grads.gate_weight);
        self.gate_bias -= learning_rate * grads.gate_bias;
    }
}
