//! Toy UpDn-style VQA model with a question-only bias branch.
//!
//! The architecture is the smallest one that exercises every gradient path
//! the synthesis pipelines need: token embeddings feed a single-pass
//! recurrent accumulator whose final state summarizes the question; raw
//! object features are projected into the hidden space; a single-head
//! attention scores objects against the summary; one-hidden-layer
//! classifiers produce answer logits for the main branch and the
//! question-only branch. Training minimizes per-answer binary cross-entropy
//! between the (optionally fused) distribution and soft targets, so empty
//! and multi-answer target sets are both well defined.
//!
//! All gradients are hand-rolled; `tests` check them against central finite
//! differences.

mod fusion;
mod math;
mod params;

pub use fusion::{fuse, FusionKind, FusionStrategy};
pub use params::{Gradients, ModelParams, TokenVocab, MASK_ROW, MASK_TOKEN, UNK_ROW};

pub(crate) use fusion::fused_scores;

use ndarray::{Array1, Array2, ArrayView1};
use thiserror::Error;

use crate::data::{AnswerDistribution, AnswerVocabulary, ImageRecord, QuestionRecord, Sample};
use math::{log_softmax, log_softmax_backward, sigmoid, softmax, softmax_backward, softplus};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("object {object_id} has feature dimension {got}, model expects {expected}")]
    DimensionMismatch {
        object_id: u32,
        expected: usize,
        got: usize,
    },
    #[error("train_step requires train mode; call set_mode(Mode::Train) first")]
    EvalMode,
    #[error("non-finite loss {loss} on sample {question_id}")]
    NonFiniteLoss { question_id: String, loss: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Encoded object features, one row per object.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    pub features: Array2<f64>,
}

/// Embedded word features plus the recurrent summary computed from them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedQuestion {
    pub word_features: Array2<f64>,
    pub summary: Array1<f64>,
}

/// The VQA model: weights, vocabularies, fusion strategy, and mode.
#[derive(Debug, Clone)]
pub struct VqaModel {
    params: ModelParams,
    token_vocab: TokenVocab,
    answer_vocab: AnswerVocabulary,
    fusion: FusionStrategy,
    mode: Mode,
    optimizer: OptimizerSpec,
    opt_state: Option<Box<OptimizerState>>,
}

/// Update rule used by `train_step`. Both rules are deterministic; the
/// default is plain gradient descent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerSpec {
    /// Gradient descent with optional heavy-ball momentum.
    Sgd { momentum: f64 },
    /// Adam with bias correction and decoupled weight decay.
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        weight_decay: f64,
    },
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Sgd { momentum: 0.0 }
    }
}

impl OptimizerSpec {
    pub fn adam(weight_decay: f64) -> Self {
        OptimizerSpec::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
enum OptimizerState {
    Momentum(Gradients),
    Adam {
        first: Gradients,
        second: Gradients,
        step: u64,
    },
}

/// Cached activations of the main branch forward pass.
struct HeadTrace {
    attn_weights: Array1<f64>,
    context: Array1<f64>,
    joint: Array1<f64>,
    hidden: Array1<f64>,
    logits: Array1<f64>,
    probs: Array1<f64>,
}

/// Cached activations of the question-only branch.
struct QonlyTrace {
    hidden: Array1<f64>,
    logits: Array1<f64>,
    probs: Array1<f64>,
}

fn accumulate_outer(dst: &mut Array2<f64>, a: &Array1<f64>, b: ArrayView1<f64>) {
    for (i, ai) in a.iter().enumerate() {
        if *ai != 0.0 {
            dst.row_mut(i).scaled_add(*ai, &b);
        }
    }
}

fn tanh_backward(grad_out: &Array1<f64>, activated: ArrayView1<f64>) -> Array1<f64> {
    Array1::from_shape_fn(grad_out.len(), |k| {
        grad_out[k] * (1.0 - activated[k] * activated[k])
    })
}

fn run_rnn(params: &ModelParams, word_rows: &Array2<f64>) -> Array2<f64> {
    let n = word_rows.nrows();
    let mut states = Array2::zeros((n, params.d_h));
    let mut h: Array1<f64> = Array1::zeros(params.d_h);
    for j in 0..n {
        let pre =
            params.rnn_input.dot(&word_rows.row(j)) + params.rnn_state.dot(&h) + &params.rnn_bias;
        h = pre.mapv(f64::tanh);
        states.row_mut(j).assign(&h);
    }
    states
}

/// The question summary: mean of the recurrent states. Mean pooling keeps
/// every word position within reach of the attention and classifier
/// gradients while the recurrence keeps the summary order-sensitive.
fn summarize(states: &Array2<f64>) -> Array1<f64> {
    states.mean_axis(ndarray::Axis(0)).expect("states nonempty")
}

fn rnn_backward(
    params: &ModelParams,
    word_rows: &Array2<f64>,
    states: &Array2<f64>,
    grad_summary: &Array1<f64>,
    mut param_grads: Option<&mut Gradients>,
) -> Array2<f64> {
    let n = states.nrows();
    let mut grad_words = Array2::zeros((n, params.d_h));
    // Every state receives a share of the mean-pooled summary gradient on
    // top of the carried recurrence gradient.
    let per_state = grad_summary / n as f64;
    let mut carry: Array1<f64> = Array1::zeros(params.d_h);
    for j in (0..n).rev() {
        let grad_h = &carry + &per_state;
        let grad_pre = tanh_backward(&grad_h, states.row(j));
        if let Some(g) = param_grads.as_deref_mut() {
            accumulate_outer(&mut g.rnn_input, &grad_pre, word_rows.row(j));
            if j > 0 {
                accumulate_outer(&mut g.rnn_state, &grad_pre, states.row(j - 1));
            }
            g.rnn_bias += &grad_pre;
        }
        grad_words
            .row_mut(j)
            .assign(&params.rnn_input.t().dot(&grad_pre));
        carry = params.rnn_state.t().dot(&grad_pre);
    }
    grad_words
}

fn head_forward(params: &ModelParams, obj_rows: &Array2<f64>, summary: &Array1<f64>) -> HeadTrace {
    let projected = obj_rows.dot(&params.attn.t());
    let attn_scores = projected.dot(summary);
    let attn_weights = softmax(&attn_scores);
    let context = obj_rows.t().dot(&attn_weights);
    let joint = &context * summary;
    let hidden = (params.cls_hidden.dot(&joint) + &params.cls_hidden_bias).mapv(f64::tanh);
    let logits = params.cls_out.dot(&hidden) + &params.cls_out_bias;
    let probs = softmax(&logits);
    HeadTrace {
        attn_weights,
        context,
        joint,
        hidden,
        logits,
        probs,
    }
}

/// Backward through the main branch from a gradient at the logits down to
/// the encoded object rows and the question summary.
fn head_backward(
    params: &ModelParams,
    obj_rows: &Array2<f64>,
    summary: &Array1<f64>,
    trace: &HeadTrace,
    grad_logits: &Array1<f64>,
    mut param_grads: Option<&mut Gradients>,
) -> (Array2<f64>, Array1<f64>) {
    let grad_hidden = params.cls_out.t().dot(grad_logits);
    let grad_pre_hidden = tanh_backward(&grad_hidden, trace.hidden.view());
    if let Some(g) = param_grads.as_deref_mut() {
        accumulate_outer(&mut g.cls_out, grad_logits, trace.hidden.view());
        g.cls_out_bias += grad_logits;
        accumulate_outer(&mut g.cls_hidden, &grad_pre_hidden, trace.joint.view());
        g.cls_hidden_bias += &grad_pre_hidden;
    }
    let grad_joint = params.cls_hidden.t().dot(&grad_pre_hidden);
    let grad_context = &grad_joint * summary;
    let mut grad_summary = &grad_joint * &trace.context;

    // context = sum_i alpha_i v_i
    let grad_alpha = obj_rows.dot(&grad_context);
    let mut grad_obj = Array2::zeros(obj_rows.raw_dim());
    accumulate_outer(&mut grad_obj, &trace.attn_weights, grad_context.view());

    // scores t_i = (A v_i) . q
    let grad_scores = softmax_backward(&trace.attn_weights, &grad_alpha);
    let attn_t_summary = params.attn.t().dot(summary);
    for i in 0..obj_rows.nrows() {
        grad_obj.row_mut(i).scaled_add(grad_scores[i], &attn_t_summary.view());
    }
    let weighted_objects = obj_rows.t().dot(&grad_scores);
    if let Some(g) = param_grads.as_deref_mut() {
        accumulate_outer(&mut g.attn, summary, weighted_objects.view());
    }
    grad_summary += &params.attn.dot(&weighted_objects);
    (grad_obj, grad_summary)
}

fn qonly_forward(params: &ModelParams, summary: &Array1<f64>) -> QonlyTrace {
    let hidden = (params.q_hidden.dot(summary) + &params.q_hidden_bias).mapv(f64::tanh);
    let logits = params.q_out.dot(&hidden) + &params.q_out_bias;
    let probs = softmax(&logits);
    QonlyTrace {
        hidden,
        logits,
        probs,
    }
}

fn qonly_backward(
    params: &ModelParams,
    summary: &Array1<f64>,
    trace: &QonlyTrace,
    grad_logits: &Array1<f64>,
    grads: &mut Gradients,
) -> Array1<f64> {
    let grad_hidden = params.q_out.t().dot(grad_logits);
    let grad_pre = tanh_backward(&grad_hidden, trace.hidden.view());
    accumulate_outer(&mut grads.q_out, grad_logits, trace.hidden.view());
    grads.q_out_bias += grad_logits;
    accumulate_outer(&mut grads.q_hidden, &grad_pre, summary.view());
    grads.q_hidden_bias += &grad_pre;
    params.q_hidden.t().dot(&grad_pre)
}

/// Per-answer binary cross-entropy of a softmaxed distribution against soft
/// targets. Returns the loss and its gradient at the pre-softmax scores.
fn bce_with_scores_backward(probs: &Array1<f64>, targets: &[f64]) -> (f64, Array1<f64>) {
    const EPS: f64 = 1e-12;
    let n = probs.len();
    let mut loss = 0.0;
    // pg[a] is probs[a] * dL/dprobs[a], written in product form so vanishing
    // probabilities cannot blow up the term.
    let mut pg = Array1::zeros(n);
    for a in 0..n {
        let p = probs[a].clamp(EPS, 1.0 - EPS);
        let t = targets[a];
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        pg[a] = -t + probs[a] * (1.0 - t) / (1.0 - p);
    }
    let total: f64 = pg.sum();
    let grad_scores = Array1::from_shape_fn(n, |a| pg[a] - probs[a] * total);
    (loss, grad_scores)
}

impl VqaModel {
    pub fn new(
        d_v: usize,
        d_h: usize,
        seed: u64,
        fusion: FusionStrategy,
        token_vocab: TokenVocab,
        answer_vocab: AnswerVocabulary,
    ) -> Self {
        let params = ModelParams::init(d_v, d_h, answer_vocab.len(), token_vocab.num_rows(), seed);
        VqaModel {
            params,
            token_vocab,
            answer_vocab,
            fusion,
            mode: Mode::Train,
            optimizer: OptimizerSpec::default(),
            opt_state: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn optimizer(&self) -> OptimizerSpec {
        self.optimizer
    }

    /// Choose the update rule for `train_step`; resets accumulated
    /// optimizer state.
    pub fn set_optimizer(&mut self, optimizer: OptimizerSpec) {
        self.optimizer = optimizer;
        self.opt_state = None;
    }

    pub fn fusion(&self) -> &FusionStrategy {
        &self.fusion
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn token_vocab(&self) -> &TokenVocab {
        &self.token_vocab
    }

    pub fn answer_vocab(&self) -> &AnswerVocabulary {
        &self.answer_vocab
    }

    /// Hex SHA-256 over the serialized weights.
    pub fn params_digest(&self) -> String {
        self.params.digest()
    }

    fn embed_rows(&self, tokens: &[String]) -> Array2<f64> {
        let mut rows = Array2::zeros((tokens.len(), self.params.d_h));
        for (j, tok) in tokens.iter().enumerate() {
            rows.row_mut(j)
                .assign(&self.params.embed.row(self.token_vocab.row(tok)));
        }
        rows
    }

    /// Project raw object features into the hidden space, one row per object.
    pub fn encode_image(&self, image: &ImageRecord) -> Result<EncodedImage, ModelError> {
        let mut rows = Array2::zeros((image.objects.len(), self.params.d_h));
        for (i, obj) in image.objects.iter().enumerate() {
            if obj.feature.len() != self.params.d_v {
                return Err(ModelError::DimensionMismatch {
                    object_id: obj.object_id,
                    expected: self.params.d_v,
                    got: obj.feature.len(),
                });
            }
            let x = ArrayView1::from(&obj.feature);
            let pre = self.params.visual_proj.dot(&x) + &self.params.visual_bias;
            rows.row_mut(i).assign(&pre.mapv(f64::tanh));
        }
        Ok(EncodedImage { features: rows })
    }

    /// Embed tokens and summarize them with the recurrent accumulator.
    /// Unknown tokens map to the reserved UNK row, [`MASK_TOKEN`] to the
    /// reserved MASK row.
    pub fn encode_question(&self, question: &QuestionRecord) -> EncodedQuestion {
        let word_features = self.embed_rows(&question.tokens);
        let states = run_rnn(&self.params, &word_features);
        let summary = summarize(&states);
        EncodedQuestion {
            word_features,
            summary,
        }
    }

    /// Main branch answer distribution. The summary is recomputed from the
    /// word features, so the output is a function of the encoded rows alone.
    pub fn forward_vqa(&self, image: &EncodedImage, question: &EncodedQuestion) -> AnswerDistribution {
        let states = run_rnn(&self.params, &question.word_features);
        let summary = summarize(&states);
        let head = head_forward(&self.params, &image.features, &summary);
        AnswerDistribution::new(head.probs.to_vec())
    }

    /// Question-only branch answer distribution; independent of any image.
    pub fn forward_qonly(&self, question: &EncodedQuestion) -> AnswerDistribution {
        let trace = qonly_forward(&self.params, &question.summary);
        AnswerDistribution::new(trace.probs.to_vec())
    }

    /// Test-stage prediction: the plain main branch, fusion bypassed.
    pub fn predict(&self, sample: &Sample) -> Result<AnswerDistribution, ModelError> {
        let image = self.encode_image(&sample.image)?;
        let question = self.encode_question(&sample.question);
        Ok(self.forward_vqa(&image, &question))
    }

    /// Prediction string plus the full distribution.
    pub fn predicted_answer(&self, sample: &Sample) -> Result<(String, AnswerDistribution), ModelError> {
        let dist = self.predict(sample)?;
        let answer = self.answer_vocab.answer(dist.argmax()).to_string();
        Ok((answer, dist))
    }

    /// Training-style fused distribution (used when probes are configured to
    /// see the ensemble output instead of the plain branch).
    pub fn fused_predict(&self, sample: &Sample) -> Result<AnswerDistribution, ModelError> {
        let image = self.encode_image(&sample.image)?;
        let question = self.encode_question(&sample.question);
        let p_vqa = self.forward_vqa(&image, &question);
        if self.fusion.kind == FusionKind::None {
            return Ok(p_vqa);
        }
        let p_q = self.forward_qonly(&question);
        let mut strategy = self.fusion;
        if self.fusion.kind == FusionKind::LearnedMixin {
            strategy.mixin_gate = self.learned_gate(&question.summary).0;
        }
        Ok(fuse(&p_vqa, &p_q, &strategy))
    }

    fn learned_gate(&self, summary: &Array1<f64>) -> (f64, f64) {
        let pre = self.params.gate_weight.dot(summary) + self.params.gate_bias;
        (softplus(pre), pre)
    }

    /// Loss of one sample under the current parameters, without updating
    /// anything. Works in either mode.
    pub fn compute_loss(&self, sample: &Sample) -> Result<f64, ModelError> {
        self.loss_and_gradients(sample).map(|(loss, _)| loss)
    }

    /// One gradient-descent step on the (fused) cross-entropy of a sample.
    /// Empty answer sets are valid targets: the loss then pushes every
    /// answer probability down.
    pub fn train_step(&mut self, sample: &Sample, learning_rate: f64) -> Result<f64, ModelError> {
        if self.mode != Mode::Train {
            return Err(ModelError::EvalMode);
        }
        let (loss, grads) = self.loss_and_gradients(sample)?;
        match self.optimizer {
            OptimizerSpec::Sgd { momentum } if momentum == 0.0 => {
                self.params.sgd_step(&grads, learning_rate);
            }
            OptimizerSpec::Sgd { momentum } => {
                let state = self.opt_state.get_or_insert_with(|| {
                    Box::new(OptimizerState::Momentum(Gradients::zeros_like(&self.params)))
                });
                let OptimizerState::Momentum(velocity) = state.as_mut() else {
                    unreachable!("state matches optimizer kind");
                };
                velocity.decay_and_add(momentum, &grads);
                self.params.sgd_step(velocity, learning_rate);
            }
            OptimizerSpec::Adam {
                beta1,
                beta2,
                epsilon,
                weight_decay,
            } => {
                let state = self.opt_state.get_or_insert_with(|| {
                    Box::new(OptimizerState::Adam {
                        first: Gradients::zeros_like(&self.params),
                        second: Gradients::zeros_like(&self.params),
                        step: 0,
                    })
                });
                let OptimizerState::Adam {
                    first,
                    second,
                    step,
                } = state.as_mut()
                else {
                    unreachable!("state matches optimizer kind");
                };
                *step += 1;
                self.params.adam_step(
                    first,
                    second,
                    &grads,
                    learning_rate,
                    beta1,
                    beta2,
                    epsilon,
                    weight_decay,
                    *step,
                );
            }
        }
        Ok(loss)
    }

    fn loss_and_gradients(&self, sample: &Sample) -> Result<(f64, Gradients), ModelError> {
        let encoded = self.encode_image(&sample.image)?;
        let obj_rows = encoded.features;
        let word_rows = self.embed_rows(&sample.question.tokens);
        let states = run_rnn(&self.params, &word_rows);
        let summary = summarize(&states);
        let head = head_forward(&self.params, &obj_rows, &summary);
        let targets = sample.answers.dense(&self.answer_vocab);

        let mut grads = Gradients::zeros_like(&self.params);
        let mut grad_summary = Array1::zeros(self.params.d_h);

        let loss;
        let grad_logits;
        match self.fusion.kind {
            FusionKind::None => {
                let (l, g) = bce_with_scores_backward(&head.probs, &targets);
                loss = l;
                grad_logits = g;
            }
            kind => {
                let qonly = qonly_forward(&self.params, &summary);
                let lp = log_softmax(&head.logits);
                let lq = log_softmax(&qonly.logits);
                let (gate, gate_pre) = if kind == FusionKind::LearnedMixin {
                    self.learned_gate(&summary)
                } else {
                    (0.0, 0.0)
                };
                let fused_probs = softmax(&fused_scores(&lp, &lq, kind, gate));
                let (mut l, grad_fused) = bce_with_scores_backward(&fused_probs, &targets);

                let (grad_lp, mut grad_lq, mut grad_gate) = match kind {
                    FusionKind::ProductOfExperts => (grad_fused.clone(), grad_fused, 0.0),
                    FusionKind::SigmoidMask => {
                        let mut grad_lp = Array1::zeros(lp.len());
                        let mut grad_lq = Array1::zeros(lp.len());
                        for a in 0..lp.len() {
                            let s = sigmoid(lq[a]);
                            grad_lp[a] = grad_fused[a] * s;
                            grad_lq[a] = grad_fused[a] * lp[a] * s * (1.0 - s);
                        }
                        (grad_lp, grad_lq, 0.0)
                    }
                    FusionKind::LearnedMixin => {
                        let grad_lq = &grad_fused * gate;
                        let grad_gate = grad_fused.dot(&lq);
                        (grad_fused, grad_lq, grad_gate)
                    }
                    FusionKind::None => unreachable!(),
                };

                if kind == FusionKind::LearnedMixin && self.fusion.entropy_weight != 0.0 {
                    // Entropy bonus on the scaled bias distribution keeps the
                    // gate from silencing the question-only branch.
                    let w = self.fusion.entropy_weight;
                    let r_log = fusion::scaled_bias_log_probs(&lq, gate);
                    let r = r_log.mapv(f64::exp);
                    let neg_entropy: f64 =
                        r.iter().zip(r_log.iter()).map(|(ri, li)| ri * li).sum();
                    l += w * neg_entropy;
                    let grad_scaled = Array1::from_shape_fn(r.len(), |a| {
                        w * r[a] * (r_log[a] - neg_entropy)
                    });
                    grad_lq += &(&grad_scaled * gate);
                    grad_gate += grad_scaled.dot(&lq);
                }

                grad_logits = log_softmax_backward(&head.probs, &grad_lp);
                let grad_qlogits = log_softmax_backward(&qonly.probs, &grad_lq);
                grad_summary +=
                    &qonly_backward(&self.params, &summary, &qonly, &grad_qlogits, &mut grads);
                if kind == FusionKind::LearnedMixin {
                    let grad_pre = grad_gate * sigmoid(gate_pre);
                    grads.gate_weight.scaled_add(grad_pre, &summary.view());
                    grads.gate_bias += grad_pre;
                    grad_summary.scaled_add(grad_pre, &self.params.gate_weight.view());
                }
                loss = l;
            }
        }
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                question_id: sample.question.question_id.clone(),
                loss,
            });
        }

        let (grad_obj, grad_summary_head) = head_backward(
            &self.params,
            &obj_rows,
            &summary,
            &head,
            &grad_logits,
            Some(&mut grads),
        );
        grad_summary += &grad_summary_head;
        let grad_words = rnn_backward(
            &self.params,
            &word_rows,
            &states,
            &grad_summary,
            Some(&mut grads),
        );

        for (j, tok) in sample.question.tokens.iter().enumerate() {
            let row = self.token_vocab.row(tok);
            let grad_row = grad_words.row(j).to_owned();
            grads.embed.row_mut(row).scaled_add(1.0, &grad_row.view());
        }
        for (i, obj) in sample.image.objects.iter().enumerate() {
            let grad_pre = tanh_backward(&grad_obj.row(i).to_owned(), obj_rows.row(i));
            accumulate_outer(
                &mut grads.visual_proj,
                &grad_pre,
                ArrayView1::from(&obj.feature),
            );
            grads.visual_bias += &grad_pre;
        }
        Ok((loss, grads))
    }

    /// Weighted ground-truth answer mass `sum_a weight(a) * P_vqa(a)` as a
    /// function of the encoded rows (the summary is recomputed from the word
    /// rows). This is the scalar the saliency module differentiates and the
    /// finite-difference oracle perturbs.
    pub(crate) fn answer_mass_from_rows(
        &self,
        obj_rows: &Array2<f64>,
        word_rows: &Array2<f64>,
        weights: &[f64],
    ) -> f64 {
        let states = run_rnn(&self.params, word_rows);
        let summary = summarize(&states);
        let head = head_forward(&self.params, obj_rows, &summary);
        head.probs.dot(&ArrayView1::from(weights))
    }

    /// Answer mass plus its analytic gradients at every encoded object row
    /// and embedded word row. Parameters are untouched.
    pub(crate) fn answer_mass_gradients(
        &self,
        obj_rows: &Array2<f64>,
        word_rows: &Array2<f64>,
        weights: &[f64],
    ) -> (f64, Array2<f64>, Array2<f64>) {
        let states = run_rnn(&self.params, word_rows);
        let summary = summarize(&states);
        let head = head_forward(&self.params, obj_rows, &summary);
        let weight_vec = Array1::from(weights.to_vec());
        let mass = head.probs.dot(&weight_vec);
        let grad_logits = softmax_backward(&head.probs, &weight_vec);
        let (grad_obj, grad_summary) =
            head_backward(&self.params, obj_rows, &summary, &head, &grad_logits, None);
        let grad_words = rnn_backward(&self.params, word_rows, &states, &grad_summary, None);
        (mass, grad_obj, grad_words)
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), ModelError> {
        params::write_checkpoint(
            path,
            &self.params,
            &self.fusion,
            &self.token_vocab,
            &self.answer_vocab,
        )
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self, ModelError> {
        let (params, fusion, token_vocab, answer_vocab) = params::read_checkpoint(path)?;
        Ok(VqaModel {
            params,
            token_vocab,
            answer_vocab,
            fusion,
            mode: Mode::Train,
            optimizer: OptimizerSpec::default(),
            opt_state: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AnswerScores, ObjectInstance, SplitTag};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D_V: usize = 3;
    const D_H: usize = 6;

    fn vocab() -> AnswerVocabulary {
        AnswerVocabulary::new(["red", "blue", "green", "yes", "no"]).unwrap()
    }

    fn tokens() -> TokenVocab {
        TokenVocab::new(["what", "color", "is", "the", "tie", "shirt", "kite"])
    }

    fn model(fusion: FusionKind) -> VqaModel {
        VqaModel::new(
            D_V,
            D_H,
            7,
            FusionStrategy::new(fusion),
            tokens(),
            vocab(),
        )
    }

    fn sample_with(features: &[Vec<f64>], toks: &[&str], answers: &[(&str, f64)]) -> Sample {
        Sample {
            image: ImageRecord {
                image_id: "img".into(),
                objects: features
                    .iter()
                    .enumerate()
                    .map(|(i, f)| ObjectInstance {
                        object_id: i as u32,
                        category: "tie".into(),
                        feature: f.clone(),
                    })
                    .collect(),
            },
            question: QuestionRecord {
                question_id: "q".into(),
                tokens: toks.iter().map(|t| t.to_string()).collect(),
                question_type: format!("{} {}", toks[0], toks[1]),
                type_token_count: 2,
            },
            answers: AnswerScores::from_pairs(answers.iter().map(|(a, s)| (a.to_string(), *s))),
            split_tag: SplitTag::Train,
        }
    }

    fn default_sample() -> Sample {
        sample_with(
            &[vec![0.4, -0.2, 0.9], vec![-0.7, 0.1, 0.3]],
            &["what", "color", "is", "the", "tie"],
            &[("red", 1.0)],
        )
    }

    #[test]
    fn encode_image_is_per_object_and_deterministic() {
        let m = model(FusionKind::None);
        let s = default_sample();
        let one_object = ImageRecord {
            image_id: "i".into(),
            objects: vec![s.image.objects[0].clone()],
        };
        assert_eq!(m.encode_image(&one_object).unwrap().features.nrows(), 1);

        let enc1 = m.encode_image(&s.image).unwrap();
        let enc2 = m.encode_image(&s.image).unwrap();
        assert_eq!(enc1, enc2);

        let mut swapped = s.image.clone();
        swapped.objects.swap(0, 1);
        let enc_swapped = m.encode_image(&swapped).unwrap();
        assert_eq!(enc_swapped.features.row(0), enc1.features.row(1));
        assert_eq!(enc_swapped.features.row(1), enc1.features.row(0));
    }

    #[test]
    fn encode_image_rejects_bad_dimension() {
        let m = model(FusionKind::None);
        let mut s = default_sample();
        s.image.objects[1].feature.push(0.0);
        assert!(matches!(
            m.encode_image(&s.image),
            Err(ModelError::DimensionMismatch { object_id: 1, .. })
        ));
    }

    #[test]
    fn encode_question_reserved_rows_and_sensitivity() {
        let m = model(FusionKind::None);
        let single = QuestionRecord {
            question_id: "q".into(),
            tokens: vec!["what".into()],
            question_type: "what".into(),
            type_token_count: 1,
        };
        assert_eq!(m.encode_question(&single).word_features.nrows(), 1);

        let masked = QuestionRecord {
            question_id: "q".into(),
            tokens: vec!["what".into(), MASK_TOKEN.into()],
            question_type: "what".into(),
            type_token_count: 1,
        };
        let enc = m.encode_question(&masked);
        assert_eq!(enc.word_features.row(1), m.params.embed.row(MASK_ROW));

        let unknown = QuestionRecord {
            question_id: "q".into(),
            tokens: vec!["zzz-unseen".into()],
            question_type: "zzz-unseen".into(),
            type_token_count: 1,
        };
        let enc_unk = m.encode_question(&unknown);
        assert_eq!(enc_unk.word_features.row(0), m.params.embed.row(UNK_ROW));

        // One differing non-type token changes the summary.
        let s = default_sample();
        let mut other = s.question.clone();
        other.tokens[4] = "shirt".into();
        let a = m.encode_question(&s.question).summary;
        let b = m.encode_question(&other).summary;
        assert_ne!(a, b);
    }

    #[test]
    fn forward_vqa_is_a_distribution() {
        let m = model(FusionKind::None);
        let s = default_sample();
        let dist = m.predict(&s).unwrap();
        assert!(dist.is_valid());
        assert_eq!(dist.len(), 5);

        // Zero raw features still produce a valid distribution.
        let zeroed = sample_with(
            &[vec![0.0; D_V]],
            &["what", "color", "is", "the", "tie"],
            &[("red", 1.0)],
        );
        assert!(m.predict(&zeroed).unwrap().is_valid());
    }

    #[test]
    fn forward_qonly_ignores_image() {
        let m = model(FusionKind::None);
        let s1 = default_sample();
        let mut s2 = s1.clone();
        s2.image.objects[0].feature = vec![0.9, 0.9, -0.9];
        let q1 = m.encode_question(&s1.question);
        let q2 = m.encode_question(&s2.question);
        let d1 = m.forward_qonly(&q1);
        let d2 = m.forward_qonly(&q2);
        assert!(d1.is_valid());
        assert_eq!(d1, d2);
        assert_eq!(d1, m.forward_qonly(&m.encode_question(&s1.question)));
    }

    #[test]
    fn attention_underflow_makes_object_removal_invisible() {
        let mut m = model(FusionKind::None);
        // A huge bilinear form pushes the score separation past the exp
        // underflow threshold, so the weaker object gets weight exactly 0.
        m.params.attn = Array2::eye(D_H) * 4.0e6;
        let s = sample_with(
            &[vec![0.8, 0.8, 0.8], vec![-0.8, -0.8, -0.8]],
            &["what", "color", "is", "the", "tie"],
            &[("red", 1.0)],
        );
        let enc = m.encode_image(&s.image).unwrap();
        let q = m.encode_question(&s.question);
        let states = run_rnn(&m.params, &q.word_features);
        let summary = summarize(&states);
        let head = head_forward(&m.params, &enc.features, &summary);
        let (drop_idx, keep_idx) = if head.attn_weights[0] == 0.0 {
            (0, 1)
        } else {
            assert_eq!(head.attn_weights[1], 0.0, "one weight must underflow");
            (1, 0)
        };
        let full = m.predict(&s).unwrap();
        let mut reduced = s.clone();
        reduced.image.objects = vec![s.image.objects[keep_idx].clone()];
        let without = m.predict(&reduced).unwrap();
        assert_eq!(full, without, "dropping object {drop_idx} changed logits");
    }

    #[test]
    fn predict_near_uniform_at_init_and_argmax_is_max() {
        let m = model(FusionKind::None);
        let s = default_sample();
        let dist = m.predict(&s).unwrap();
        for p in &dist.probs {
            assert!((0.05..=0.5).contains(p), "{p} too far from uniform");
        }
        assert_eq!(m.predict(&s).unwrap(), dist);
        let brute = dist
            .probs
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        assert_eq!(dist.argmax(), brute);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut m = model(FusionKind::ProductOfExperts);
        let s = default_sample();
        let before = m.params.clone();
        let loss_ref = m.compute_loss(&s).unwrap();
        let loss = m.train_step(&s, 0.0).unwrap();
        assert_eq!(m.params, before);
        assert_eq!(loss, loss_ref);
    }

    #[test]
    fn eval_mode_blocks_updates_but_not_loss() {
        let mut m = model(FusionKind::None);
        let s = default_sample();
        m.set_mode(Mode::Eval);
        assert_eq!(m.mode(), Mode::Eval);
        let digest = m.params_digest();
        assert!(matches!(m.train_step(&s, 0.1), Err(ModelError::EvalMode)));
        assert!(m.compute_loss(&s).unwrap().is_finite());
        assert_eq!(m.params_digest(), digest);
        m.set_mode(Mode::Train);
        assert_eq!(m.mode(), Mode::Train);
    }

    #[test]
    fn empty_targets_give_finite_loss_and_push_down() {
        let mut m = model(FusionKind::None);
        let mut s = default_sample();
        s.answers = AnswerScores::new();
        let before = m.predict(&s).unwrap();
        let expected: f64 = before.probs.iter().map(|p| -(1.0 - p).ln()).sum();
        let loss = m.train_step(&s, 0.2).unwrap();
        assert!(loss.is_finite());
        assert!((loss - expected).abs() < 1e-9);
        // The most confident answer loses mass after the step.
        let after = m.predict(&s).unwrap();
        let top = before.argmax();
        assert!(after.probs[top] < before.probs[top]);
    }

    #[test]
    fn repeated_steps_reduce_loss() {
        for kind in [
            FusionKind::None,
            FusionKind::ProductOfExperts,
            FusionKind::SigmoidMask,
            FusionKind::LearnedMixin,
        ] {
            let mut m = model(kind);
            let s = default_sample();
            let mut losses = Vec::new();
            for _ in 0..200 {
                losses.push(m.train_step(&s, 0.1).unwrap());
            }
            let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
            let tail: f64 = losses[190..].iter().sum::<f64>() / 10.0;
            assert!(
                tail < head,
                "{kind:?}: loss did not fall ({head} -> {tail})"
            );
            assert!(losses.last().unwrap() < losses.first().unwrap());
        }
    }

    #[test]
    fn none_fusion_never_touches_question_branch_classifier() {
        let mut m = model(FusionKind::None);
        let s = default_sample();
        let q_hidden = m.params.q_hidden.clone();
        let q_out = m.params.q_out.clone();
        let gate = m.params.gate_weight.clone();
        for _ in 0..5 {
            m.train_step(&s, 0.3).unwrap();
        }
        assert_eq!(m.params.q_hidden, q_hidden);
        assert_eq!(m.params.q_out, q_out);
        assert_eq!(m.params.gate_weight, gate);
    }

    /// Central finite difference of the training loss w.r.t. one parameter.
    fn loss_fd(m: &mut VqaModel, s: &Sample, read: impl Fn(&ModelParams) -> f64, write: impl Fn(&mut ModelParams, f64)) -> f64 {
        let eps = 1e-6;
        let orig = read(&m.params);
        write(&mut m.params, orig + eps);
        let plus = m.compute_loss(s).unwrap();
        write(&mut m.params, orig - eps);
        let minus = m.compute_loss(s).unwrap();
        write(&mut m.params, orig);
        (plus - minus) / (2.0 * eps)
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let s = sample_with(
            &[vec![0.4, -0.2, 0.9], vec![-0.7, 0.1, 0.3], vec![0.2, 0.5, -0.4]],
            &["what", "color", "is", "the", "kite"],
            &[("red", 1.0), ("green", 0.4)],
        );
        for kind in [
            FusionKind::None,
            FusionKind::ProductOfExperts,
            FusionKind::SigmoidMask,
            FusionKind::LearnedMixin,
        ] {
            let mut m = model(kind);
            let (_, grads) = m.loss_and_gradients(&s).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let d_h = D_H;
            // A few spot checks in every parameter group.
            for _ in 0..4 {
                let i = rng.random_range(0..d_h);
                let j = rng.random_range(0..d_h);
                let k = rng.random_range(0..D_V);
                let a = rng.random_range(0..5);
                let row = rng.random_range(0..m.params.embed.nrows());
                let checks: Vec<(f64, Box<dyn Fn(&ModelParams) -> f64>, Box<dyn Fn(&mut ModelParams, f64)>)> = vec![
                    (
                        grads.attn[[i, j]],
                        Box::new(move |p: &ModelParams| p.attn[[i, j]]),
                        Box::new(move |p: &mut ModelParams, v| p.attn[[i, j]] = v),
                    ),
                    (
                        grads.cls_hidden[[i, j]],
                        Box::new(move |p: &ModelParams| p.cls_hidden[[i, j]]),
                        Box::new(move |p: &mut ModelParams, v| p.cls_hidden[[i, j]] = v),
                    ),
                    (
                        grads.cls_out[[a, j]],
                        Box::new(move |p: &ModelParams| p.cls_out[[a, j]]),
                        Box::new(move |p: &mut ModelParams, v| p.cls_out[[a, j]] = v),
                    ),
                    (
                        grads.rnn_input[[i, j]],
                        Box::new(move |p: &ModelParams| p.rnn_input[[i, j]]),
                        Box::new(move |p: &mut ModelParams, v| p.rnn_input[[i, j]] = v),
                    ),
                    (
                        grads.rnn_state[[i, j]],
                        Box::new(move |p: &ModelParams| p.rnn_state[[i, j]]),
                        Box::new(move |p: &mut ModelParams, v| p.rnn_state[[i, j]] = v),
                    ),
                    (
                        grads.visual_proj[[i, k]],
                        Box::new(move |p: &ModelParams| p.visual_proj[[i, k]]),
                        Box::new(move |p: &mut ModelParams, v| p.visual_proj[[i, k]] = v),
                    ),
                    (
                        grads.embed[[row, j]],
                        Box::new(move |p: &ModelParams| p.embed[[row, j]]),
                        Box::new(move |p: &mut ModelParams, v| p.embed[[row, j]] = v),
                    ),
                    (
                        grads.q_hidden[[i, j]],
                        Box::new(move |p: &ModelParams| p.q_hidden[[i, j]]),
                        Box::new(move |p: &mut ModelParams, v| p.q_hidden[[i, j]] = v),
                    ),
                    (
                        grads.q_out[[a, j]],
                        Box::new(move |p: &ModelParams| p.q_out[[a, j]]),
                        Box::new(move |p: &mut ModelParams, v| p.q_out[[a, j]] = v),
                    ),
                    (
                        grads.gate_weight[i],
                        Box::new(move |p: &ModelParams| p.gate_weight[i]),
                        Box::new(move |p: &mut ModelParams, v| p.gate_weight[i] = v),
                    ),
                    (
                        grads.gate_bias,
                        Box::new(move |p: &ModelParams| p.gate_bias),
                        Box::new(move |p: &mut ModelParams, v| p.gate_bias = v),
                    ),
                    (
                        grads.rnn_bias[i],
                        Box::new(move |p: &ModelParams| p.rnn_bias[i]),
                        Box::new(move |p: &mut ModelParams, v| p.rnn_bias[i] = v),
                    ),
                    (
                        grads.visual_bias[i],
                        Box::new(move |p: &ModelParams| p.visual_bias[i]),
                        Box::new(move |p: &mut ModelParams, v| p.visual_bias[i] = v),
                    ),
                    (
                        grads.cls_out_bias[a],
                        Box::new(move |p: &ModelParams| p.cls_out_bias[a]),
                        Box::new(move |p: &mut ModelParams, v| p.cls_out_bias[a] = v),
                    ),
                ];
                for (analytic, read, write) in checks {
                    let fd = loss_fd(&mut m, &s, &*read, &*write);
                    let tol = 1e-6 * analytic.abs().max(fd.abs()).max(1.0);
                    assert!(
                        (analytic - fd).abs() < tol.max(1e-8),
                        "{kind:?}: analytic {analytic} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut m = model(FusionKind::LearnedMixin);
        let s = default_sample();
        for _ in 0..3 {
            m.train_step(&s, 0.1).unwrap();
        }
        m.save_checkpoint(&path).unwrap();
        let loaded = VqaModel::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params, m.params);
        assert_eq!(loaded.fusion, m.fusion);
        assert_eq!(loaded.params_digest(), m.params_digest());
        assert_eq!(loaded.answer_vocab.answers(), m.answer_vocab.answers());
        assert_eq!(loaded.token_vocab, m.token_vocab);

        let path2 = dir.path().join("model2.json");
        loaded.save_checkpoint(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
