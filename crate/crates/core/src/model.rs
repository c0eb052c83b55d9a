//! The essay-grading network: embedding, word-level CNN, word pooling,
//! sentence LSTM, sentence attention, a dense+sigmoid score head, and five
//! per-token gaze heads branching off the CNN output.
//!
//! The gaze heads are always present and always computed; whether their
//! predictions enter the objective is purely a property of the loss
//! (`gaze_enabled` plus the presence of labels). That keeps the score path
//! byte-identical between single-task and multi-task configurations that
//! share a seed.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::{default_gaze_loss_weights, GazeAttribute};
use crate::rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::text::{EmbeddingMatrix, EncodedEssay};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordPooling {
    Attention,
    Mean,
}

/// Architecture and loss configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub cnn_kernel: usize,
    pub cnn_filters: usize,
    pub lstm_hidden: usize,
    pub dropout_rate: f64,
    pub word_pooling: WordPooling,
    /// Projection width of the word-level attention. The reference
    /// architecture leaves this unstated; it defaults to the CNN filter
    /// count.
    pub word_attn_dim: usize,
    /// Projection width of the sentence-level attention; defaults to the
    /// LSTM hidden size.
    pub sent_attn_dim: usize,
    /// Whether gaze losses join the objective. Heads exist regardless.
    pub gaze_enabled: bool,
    /// Loss weight per attribute, indexed by `GazeAttribute::index()`.
    pub gaze_loss_weights: [f64; 5],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 50,
            cnn_kernel: 5,
            cnn_filters: 100,
            lstm_hidden: 100,
            dropout_rate: 0.5,
            word_pooling: WordPooling::Attention,
            word_attn_dim: 100,
            sent_attn_dim: 100,
            gaze_enabled: false,
            gaze_loss_weights: default_gaze_loss_weights(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.cnn_filters == 0
            || self.lstm_hidden == 0
            || self.word_attn_dim == 0
            || self.sent_attn_dim == 0
        {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        if self.cnn_kernel == 0 || self.cnn_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "cnn kernel width {} must be odd",
                self.cnn_kernel
            )));
        }
        if !self.dropout_rate.is_finite() || !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        for (i, w) in self.gaze_loss_weights.iter().enumerate() {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::Config(format!(
                    "gaze loss weight {} for {} must be a finite non-negative real",
                    w,
                    GazeAttribute::ALL[i].short_name()
                )));
            }
        }
        Ok(())
    }
}

const N_PARAMS: usize = 22;

/// Parameter names, in storage order. Gaze heads come last, two tensors
/// (weight, bias) per attribute in `GazeAttribute::ALL` order.
pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "embedding",
    "conv_kernels",
    "conv_bias",
    "word_attn_w",
    "word_attn_v",
    "lstm_wx",
    "lstm_wh",
    "lstm_bias",
    "sent_attn_w",
    "sent_attn_v",
    "score_w",
    "score_b",
    "gaze_dt_w",
    "gaze_dt_b",
    "gaze_ffd_w",
    "gaze_ffd_b",
    "gaze_ir_w",
    "gaze_ir_b",
    "gaze_rc_w",
    "gaze_rc_b",
    "gaze_skip_w",
    "gaze_skip_b",
];

const P_EMBED: usize = 0;
const P_CONV_K: usize = 1;
const P_CONV_B: usize = 2;
const P_WATTN_W: usize = 3;
const P_WATTN_V: usize = 4;
const P_LSTM_WX: usize = 5;
const P_LSTM_WH: usize = 6;
const P_LSTM_B: usize = 7;
const P_SATTN_W: usize = 8;
const P_SATTN_V: usize = 9;
const P_SCORE_W: usize = 10;
const P_SCORE_B: usize = 11;
const P_GAZE0: usize = 12;

/// All trainable tensors of one model, in fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> + '_ {
        PARAM_NAMES.iter().copied().zip(self.tensors.iter())
    }

    pub fn embedding(&self) -> &Tensor {
        &self.tensors[P_EMBED]
    }

    pub fn gaze_head(&self, attr: GazeAttribute) -> (&Tensor, &Tensor) {
        let base = P_GAZE0 + 2 * attr.index();
        (&self.tensors[base], &self.tensors[base + 1])
    }

    pub fn gaze_head_mut(&mut self, attr: GazeAttribute) -> &mut [Tensor] {
        let base = P_GAZE0 + 2 * attr.index();
        &mut self.tensors[base..base + 2]
    }

    pub fn vocab_size(&self) -> usize {
        self.tensors[P_EMBED].dim(0)
    }

    /// Rebuilds params from (name, tensor) pairs, e.g. a checkpoint.
    /// Every parameter must appear exactly once with a consistent shape
    /// family; full shape validation happens against a config separately.
    pub fn from_named(pairs: Vec<(String, Tensor)>) -> Result<Self> {
        let mut slots: Vec<Option<Tensor>> = (0..N_PARAMS).map(|_| None).collect();
        for (name, tensor) in pairs {
            let idx = PARAM_NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name:?}")))?;
            if slots[idx].is_some() {
                return Err(Error::Format(format!("duplicate parameter {name:?}")));
            }
            tensor.ensure_finite(PARAM_NAMES[idx])?;
            slots[idx] = Some(tensor);
        }
        let tensors: Vec<Tensor> = slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| Error::Format(format!("missing parameter {:?}", PARAM_NAMES[i]))))
            .collect::<Result<_>>()?;
        Ok(ModelParams { tensors })
    }

    /// Checks every tensor against the shapes the config dictates.
    pub fn validate_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expect = expected_shapes(config, self.vocab_size());
        for ((name, tensor), shape) in self.named().zip(&expect) {
            if tensor.shape() != &shape[..] {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config wants {:?}",
                    tensor.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

fn expected_shapes(config: &ModelConfig, vocab_size: usize) -> Vec<Vec<usize>> {
    let e = config.embed_dim;
    let f = config.cnn_filters;
    let h = config.lstm_hidden;
    let mut shapes = vec![
        vec![vocab_size, e],
        vec![config.cnn_kernel, e, f],
        vec![f],
        vec![f, config.word_attn_dim],
        vec![config.word_attn_dim],
        vec![f, 4 * h],
        vec![h, 4 * h],
        vec![4 * h],
        vec![h, config.sent_attn_dim],
        vec![config.sent_attn_dim],
        vec![h, 1],
        vec![1],
    ];
    for _ in 0..5 {
        shapes.push(vec![f, 1]);
        shapes.push(vec![1]);
    }
    shapes
}

/// Initializes parameters: the embedding table is copied, every weight
/// matrix is uniform in [-0.05, 0.05], biases are zero, and the LSTM
/// forget-gate bias slice is 1.0. Each tensor draws from its own seed
/// stream, so two models sharing a seed share every common tensor even if
/// they differ elsewhere (e.g. pooling mode).
pub fn init_params(
    config: &ModelConfig,
    embeddings: &EmbeddingMatrix,
    seed: u64,
) -> Result<ModelParams> {
    config.validate()?;
    if embeddings.dim != config.embed_dim {
        return Err(Error::Config(format!(
            "embedding dim {} does not match config embed_dim {}",
            embeddings.dim, config.embed_dim
        )));
    }
    let shapes = expected_shapes(config, embeddings.vocab_size());
    let h = config.lstm_hidden;
    let mut tensors = Vec::with_capacity(N_PARAMS);
    for (ordinal, shape) in shapes.iter().enumerate() {
        let name = PARAM_NAMES[ordinal];
        let t = if ordinal == P_EMBED {
            embeddings.table.clone()
        } else if name.ends_with("_b") || name.ends_with("_bias") {
            let mut t = Tensor::zeros(shape);
            if ordinal == P_LSTM_B {
                t.data_mut()[h..2 * h].fill(1.0);
            }
            t
        } else {
            let mut r = rng::stream(seed, &[rng::domain::PARAM_INIT, ordinal as u64]);
            Tensor::uniform(shape, -0.05, 0.05, &mut r)
        };
        t.ensure_finite(name)?;
        tensors.push(t);
    }
    Ok(ModelParams { tensors })
}

/// Model outputs for one essay. Gaze predictions cover the full padded
/// grid (attribute-major), zero at padded cells; attention vectors are
/// diagnostic, zero where masked or when mean pooling is configured.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EssayPrediction {
    pub score_unit: f64,
    pub max_sentences: usize,
    pub max_tokens: usize,
    /// 5 x S x T, indexed `attr * S*T + s * T + t`.
    pub gaze: Vec<f64>,
    /// S x T word-attention weights.
    pub word_attention: Vec<f64>,
    /// Per-sentence attention weights, length S.
    pub sentence_attention: Vec<f64>,
}

impl EssayPrediction {
    pub fn gaze_at(&self, attr: GazeAttribute, s: usize, t: usize) -> f64 {
        let (sm, tm) = (self.max_sentences, self.max_tokens);
        self.gaze[attr.index() * sm * tm + s * tm + t]
    }
}

pub enum ForwardMode<'a> {
    Train(&'a mut dyn RngCore),
    Eval,
}

/// Network output handles on a tape: the score, the per-sentence gaze
/// prediction vectors, and the detached numeric prediction.
pub struct NetOutputs {
    pub prediction: EssayPrediction,
    score_var: Var,
    /// Per real sentence: grid row index, real token count, and the five
    /// per-attribute prediction vectors of shape [tokens].
    gaze_vars: Vec<(usize, usize, [Var; 5])>,
}

/// A completed forward pass: the prediction plus the tape and the handles
/// needed to build a loss and run backward.
pub struct ForwardPass {
    pub tape: Tape,
    param_vars: Vec<Var>,
    outputs: NetOutputs,
}

impl ForwardPass {
    pub fn param_var(&self, ordinal: usize) -> Var {
        self.param_vars[ordinal]
    }

    pub fn prediction(&self) -> &EssayPrediction {
        &self.outputs.prediction
    }
}

/// Runs the network over one encoded essay. In `Train` mode dropout is
/// active and draws from the supplied stream; in `Eval` mode the pass is
/// deterministic. The gaze heads are evaluated on every real token
/// position regardless of whether the loss will use them.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    enc: &EncodedEssay,
    mode: ForwardMode<'_>,
) -> Result<ForwardPass> {
    params.validate_shapes(config)?;
    let mut tape = Tape::new();
    let param_vars: Vec<Var> = params
        .tensors()
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let outputs = forward_on_tape(&mut tape, &param_vars, config, enc, mode)?;
    Ok(ForwardPass {
        tape,
        param_vars,
        outputs,
    })
}

/// Same network, but on a caller-owned tape over caller-leafed parameter
/// vars (ordered like `PARAM_NAMES`). This is what gradient checking uses
/// to rebuild the graph under perturbed parameters.
pub fn forward_on_tape(
    tape: &mut Tape,
    param_vars: &[Var],
    config: &ModelConfig,
    enc: &EncodedEssay,
    mode: ForwardMode<'_>,
) -> Result<NetOutputs> {
    config.validate()?;
    if param_vars.len() != N_PARAMS {
        return Err(Error::Contract(format!(
            "{} parameter vars, expected {N_PARAMS}",
            param_vars.len()
        )));
    }
    let real_sentences: Vec<usize> = (0..enc.max_sentences)
        .filter(|&s| enc.sentence_mask[s])
        .collect();
    if real_sentences.is_empty() {
        return Err(Error::Inference(format!(
            "essay {} has no unmasked sentences",
            enc.essay_id
        )));
    }

    let mut rng = match mode {
        ForwardMode::Train(r) => Some(r),
        ForwardMode::Eval => None,
    };
    let train = rng.is_some();

    let (sm, tm) = (enc.max_sentences, enc.max_tokens);
    let mut prediction = EssayPrediction {
        score_unit: 0.0,
        max_sentences: sm,
        max_tokens: tm,
        gaze: vec![0.0; 5 * sm * tm],
        word_attention: vec![0.0; sm * tm],
        sentence_attention: vec![0.0; sm],
    };

    let mut gaze_vars = Vec::with_capacity(real_sentences.len());
    let mut sentence_vecs = Vec::with_capacity(real_sentences.len());
    for &s in &real_sentences {
        let mask_row = enc.mask_row(s);
        let tokens: Vec<u32> = enc
            .grid_row(s)
            .iter()
            .zip(mask_row)
            .filter(|(_, &m)| m)
            .map(|(&ix, _)| ix)
            .collect();
        let t_s = tokens.len();
        let active = vec![true; t_s];
        let mut x = tape.embed(param_vars[P_EMBED], &tokens, &active)?;
        if train {
            x = tape.dropout(
                x,
                config.dropout_rate,
                true,
                rng.as_deref_mut().expect("train mode carries a stream"),
            )?;
        }
        let conv = tape.conv1d_same(x, param_vars[P_CONV_K], param_vars[P_CONV_B])?;

        let mut heads = [conv; 5];
        for attr in GazeAttribute::ALL {
            let base = P_GAZE0 + 2 * attr.index();
            let lin = tape.linear(conv, param_vars[base], param_vars[base + 1])?;
            let sig = tape.sigmoid(lin)?;
            let flat = tape.reshape(sig, &[t_s])?;
            heads[attr.index()] = flat;
            let vals = tape.value(flat).data();
            for (ti, &v) in vals.iter().enumerate() {
                prediction.gaze[attr.index() * sm * tm + s * tm + ti] = v;
            }
        }
        gaze_vars.push((s, t_s, heads));

        let pooled = match config.word_pooling {
            WordPooling::Attention => {
                let (pooled, weights) =
                    tape.attention_pool(conv, param_vars[P_WATTN_W], param_vars[P_WATTN_V], None)?;
                for (ti, &w) in weights.iter().enumerate() {
                    prediction.word_attention[s * tm + ti] = w;
                }
                pooled
            }
            WordPooling::Mean => tape.mean_pool(conv, None)?,
        };
        sentence_vecs.push(pooled);
    }

    let stacked = tape.stack(&sentence_vecs)?;
    let hidden = tape.lstm_seq(
        stacked,
        param_vars[P_LSTM_WX],
        param_vars[P_LSTM_WH],
        param_vars[P_LSTM_B],
    )?;
    let (pooled, sent_weights) =
        tape.attention_pool(hidden, param_vars[P_SATTN_W], param_vars[P_SATTN_V], None)?;
    for (k, &s) in real_sentences.iter().enumerate() {
        prediction.sentence_attention[s] = sent_weights[k];
    }
    let mut pooled = pooled;
    if train {
        pooled = tape.dropout(
            pooled,
            config.dropout_rate,
            true,
            rng.as_deref_mut().expect("train mode carries a stream"),
        )?;
    }
    let pooled_row = tape.reshape(pooled, &[1, config.lstm_hidden])?;
    let score_lin = tape.linear(pooled_row, param_vars[P_SCORE_W], param_vars[P_SCORE_B])?;
    let score_sig = tape.sigmoid(score_lin)?;
    let score_var = tape.reshape(score_sig, &[1])?;
    prediction.score_unit = tape.value(score_var).item()?;

    Ok(NetOutputs {
        prediction,
        score_var,
        gaze_vars,
    })
}

/// Loss values for one essay, for logging. Gaze entries are the raw
/// (unweighted) per-attribute MSEs; `labeled_tokens` counts grid cells
/// with gaze labels.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub score: f64,
    pub gaze: [f64; 5],
    pub labeled_tokens: usize,
}

/// Builds the training objective on the pass's tape:
/// score MSE + sum of weighted per-attribute gaze MSEs over labeled
/// positions. Essays without labels (or with gaze disabled) reduce to the
/// score term exactly.
pub fn multitask_loss(
    pass: &mut ForwardPass,
    enc: &EncodedEssay,
    config: &ModelConfig,
) -> Result<(Var, LossComponents)> {
    let ForwardPass { tape, outputs, .. } = pass;
    loss_on_tape(tape, outputs, enc, config)
}

/// Loss construction against caller-owned outputs; the tape must be the
/// one the outputs were built on.
pub fn loss_on_tape(
    tape: &mut Tape,
    outputs: &NetOutputs,
    enc: &EncodedEssay,
    config: &ModelConfig,
) -> Result<(Var, LossComponents)> {
    let target = Tensor::scalar(enc.target);
    let score_loss = tape.mse(outputs.score_var, &target, None)?;
    let mut components = LossComponents {
        score: tape.value(score_loss).item()?,
        ..LossComponents::default()
    };
    let mut total = score_loss;

    let labels = match (&enc.gaze, config.gaze_enabled) {
        (Some(g), true) if g.labeled_count() > 0 => Some(g),
        _ => None,
    };
    if let Some(targets) = labels {
        if targets.max_sentences != enc.max_sentences || targets.max_tokens != enc.max_tokens {
            return Err(Error::Contract(
                "gaze target grid does not match the essay grid".into(),
            ));
        }
        components.labeled_tokens = targets.labeled_count();
        let tm = enc.max_tokens;
        for attr in GazeAttribute::ALL {
            let mut preds = Vec::with_capacity(outputs.gaze_vars.len());
            let mut tvals = Vec::new();
            let mut tmask = Vec::new();
            for &(s, t_s, heads) in &outputs.gaze_vars {
                preds.push(heads[attr.index()]);
                for ti in 0..t_s {
                    tvals.push(targets.value_at(attr, s, ti));
                    tmask.push(targets.mask[s * tm + ti]);
                }
            }
            let flat = tape.concat(&preds)?;
            let tgt = Tensor::from_vec(&[tvals.len()], tvals)?;
            let raw = tape.mse(flat, &tgt, Some(&tmask))?;
            components.gaze[attr.index()] = tape.value(raw).item()?;
            let weighted = tape.scale(raw, config.gaze_loss_weights[attr.index()])?;
            total = tape.add(total, weighted)?;
        }
    }
    components.total = tape.value(total).item()?;
    Ok((total, components))
}

/// Forward + loss + backward for one essay; returns the loss components
/// and one gradient tensor per parameter, in parameter order. Parameters
/// outside the gradient flow (e.g. gaze heads on unlabeled essays) come
/// back as zeros.
pub fn loss_and_grads(
    params: &ModelParams,
    config: &ModelConfig,
    enc: &EncodedEssay,
    dropout_rng: &mut dyn RngCore,
) -> Result<(LossComponents, Vec<Tensor>)> {
    let mut pass = forward(params, config, enc, ForwardMode::Train(dropout_rng))?;
    let (loss, components) = multitask_loss(&mut pass, enc, config)?;
    let mut grads: Gradients = pass.tape.backward(loss)?;
    let out = pass
        .param_vars
        .iter()
        .map(|&v| grads.take_or_zeros(v))
        .collect();
    Ok((components, out))
}

/// Deterministic eval-mode prediction.
pub fn predict(
    params: &ModelParams,
    config: &ModelConfig,
    enc: &EncodedEssay,
) -> Result<EssayPrediction> {
    Ok(forward(params, config, enc, ForwardMode::Eval)?.outputs.prediction)
}

/// Finite-difference check of the whole network: rebuilds the eval-mode
/// forward pass and loss under elementwise parameter perturbations and
/// returns the worst relative error against the tape's own gradients.
pub fn network_grad_check(
    params: &ModelParams,
    config: &ModelConfig,
    enc: &EncodedEssay,
    eps: f64,
) -> Result<f64> {
    params.validate_shapes(config)?;
    let build = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let outputs = forward_on_tape(tape, vars, config, enc, ForwardMode::Eval)?;
        let (loss, _) = loss_on_tape(tape, &outputs, enc, config)?;
        Ok(loss)
    };
    crate::tape::grad_check_multi(build, params.tensors(), eps)
}
