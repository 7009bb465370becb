//! Multi-task losses, negative-sample masking, and the optimization loop
//! with a dynamic batch-size schedule.
//!
//! Five losses train the model jointly: two cross entropies on the span
//! score distributions, binary cross entropies on the two gates, and a
//! cross entropy over the slot's value set computed on whichever branch
//! the gold switcher label selects. On irrelevant-slot (negative) examples
//! everything except the classifier loss is masked to exact zero.

use std::error::Error;
use std::fmt;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, GraphError, Var};
use crate::corpus::{derive_turn_goals, Dialogue, Ontology, SpanMatcher};
use crate::embeddings::{EmbeddingError, WordTable};
use crate::evaluation;
use crate::labelgen::{
    find_span, make_examples, LabelError, NegativePolicy, SwitcherLabel, TrainingExample,
};
use crate::model::forward::{Branch, ModelRun, SlotForward, ValueSet};
use crate::model::{ModelConfig, ModelError, Params};
use crate::scalar::Scalar;

const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const LABEL_SALT: u64 = 0xa54f_f53a_5f1d_36f1;
const SHUFFLE_SALT: u64 = 0x510e_527f_ade6_82d1;
const DROPOUT_SALT: u64 = 0x1f83_d9ab_fb41_bd6b;
const SLOT_ROW_SALT: u64 = 0x5be0_cd19_137e_2179;

#[derive(Debug)]
pub enum TrainError {
    Config {
        message: String,
    },
    Label(LabelError),
    Model(ModelError),
    Graph(GraphError),
    Embedding(EmbeddingError),
    MissingLabel {
        dialogue: i64,
        turn: usize,
        slot: String,
        what: &'static str,
    },
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    EmptyCorpus,
    NotEnoughExamples {
        requested: usize,
        available: usize,
    },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config { message } => write!(f, "invalid training config: {message}"),
            TrainError::Label(e) => write!(f, "label generation failed: {e}"),
            TrainError::Model(e) => write!(f, "model error: {e}"),
            TrainError::Graph(e) => write!(f, "graph error: {e}"),
            TrainError::Embedding(e) => write!(f, "embedding error: {e}"),
            TrainError::MissingLabel {
                dialogue,
                turn,
                slot,
                what,
            } => write!(
                f,
                "example (dialogue {dialogue}, turn {turn}, slot '{slot}') lacks a {what} label"
            ),
            TrainError::Diverged {
                epoch,
                batch,
                detail,
            } => write!(
                f,
                "training diverged at epoch {epoch}, batch {batch}: {detail}"
            ),
            TrainError::EmptyCorpus => write!(f, "training requires a non-empty corpus"),
            TrainError::NotEnoughExamples {
                requested,
                available,
            } => write!(
                f,
                "requested {requested} examples but only {available} are available"
            ),
        }
    }
}

impl Error for TrainError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            TrainError::Label(e) => Some(e),
            TrainError::Model(e) => Some(e),
            TrainError::Graph(e) => Some(e),
            TrainError::Embedding(e) => Some(e),
            _ => None,
        }
    }
}

impl From<LabelError> for TrainError {
    fn from(e: LabelError) -> Self {
        TrainError::Label(e)
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<GraphError> for TrainError {
    fn from(e: GraphError) -> Self {
        TrainError::Graph(e)
    }
}

impl From<EmbeddingError> for TrainError {
    fn from(e: EmbeddingError) -> Self {
        TrainError::Embedding(e)
    }
}

/// Full training recipe: model hyperparameters plus optimizer, schedule,
/// labeling, and validation settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub dataset: String,
    #[serde(flatten)]
    pub model: ModelConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// (epoch span, batch size) phases; the last phase's size persists if
    /// the spans run out before `epochs`.
    pub batch_schedule: Vec<(usize, usize)>,
    pub seed: u64,
    /// Weights for (loss_p1, loss_p2, loss_s, loss_c, loss_final).
    pub loss_weights: [f64; 5],
    pub negative_policy: NegativePolicy,
    /// Move repeated goal pairs back to their first pointable turn.
    pub first_occurrence_correction: bool,
    pub validation_fraction: f64,
    pub early_stop_val_acc: Option<f64>,
}

impl TrainConfig {
    /// Recipe for the small hotel-domain corpus: 400 epochs, L2 2e-7,
    /// every unrelated slot becomes a negative, single hidden gate layer,
    /// and 150-unit encoders so contexts match 300-d embeddings directly.
    pub fn woz() -> Self {
        TrainConfig {
            dataset: "woz".to_string(),
            model: ModelConfig {
                word_dim: 300,
                slot_dim: 300,
                d_h: 150,
                gate_hidden_depth: 1,
                use_mlp_g: false,
                share_encoder: false,
                dropout: 0.3,
            },
            epochs: 400,
            learning_rate: 1e-3,
            l2: 2e-7,
            batch_schedule: vec![(30, 32), (30, 64), (30, 128), (310, 256)],
            seed: 42,
            loss_weights: [1.0; 5],
            negative_policy: NegativePolicy::AllUnrelated,
            first_occurrence_correction: true,
            validation_fraction: 0.1,
            early_stop_val_acc: None,
        }
    }

    /// Recipe for the large multi-domain corpus: 50 epochs, L2 1e-7,
    /// Bernoulli 13/30 negative sampling, two hidden gate layers, and the
    /// generator MLP mapping 256-d contexts into 300-d embedding space.
    pub fn multiwoz() -> Self {
        TrainConfig {
            dataset: "multiwoz".to_string(),
            model: ModelConfig {
                word_dim: 300,
                slot_dim: 300,
                d_h: 128,
                gate_hidden_depth: 2,
                use_mlp_g: true,
                share_encoder: false,
                dropout: 0.3,
            },
            epochs: 50,
            learning_rate: 1e-3,
            l2: 1e-7,
            batch_schedule: vec![(5, 32), (5, 64), (5, 128), (35, 256)],
            seed: 42,
            loss_weights: [1.0; 5],
            negative_policy: NegativePolicy::Bernoulli(13.0 / 30.0),
            first_occurrence_correction: false,
            validation_fraction: 0.1,
            early_stop_val_acc: None,
        }
    }

    /// Recipe for the built-in synthetic corpus: 50-d random embeddings,
    /// 32-unit encoders, no dropout or weight decay, early-stopped once
    /// validation joint accuracy reaches 0.95.
    pub fn synth() -> Self {
        TrainConfig {
            dataset: "synth".to_string(),
            model: ModelConfig {
                word_dim: 50,
                slot_dim: 50,
                d_h: 32,
                gate_hidden_depth: 1,
                use_mlp_g: true,
                share_encoder: false,
                dropout: 0.0,
            },
            epochs: 200,
            learning_rate: 1e-3,
            l2: 0.0,
            batch_schedule: vec![(200, 32)],
            seed: 42,
            loss_weights: [1.0; 5],
            negative_policy: NegativePolicy::AllUnrelated,
            first_occurrence_correction: false,
            validation_fraction: 0.1,
            early_stop_val_acc: Some(0.95),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate().map_err(TrainError::Model)?;
        let err = |message: String| Err(TrainError::Config { message });
        if self.epochs == 0 {
            return err("epochs must be positive".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return err(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return err(format!("l2 {} must be non-negative", self.l2));
        }
        if self.batch_schedule.is_empty() {
            return err("batch schedule must have at least one phase".to_string());
        }
        for (span, size) in &self.batch_schedule {
            if *span == 0 || *size == 0 {
                return err(format!(
                    "batch schedule phase ({span}, {size}) must have positive span and size"
                ));
            }
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return err(format!("loss weights {:?} must be non-negative", self.loss_weights));
        }
        if let NegativePolicy::Bernoulli(p) = self.negative_policy {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("negative sampling rate {p} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return err(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            ));
        }
        Ok(())
    }

    /// Batch size in force at a given zero-based epoch.
    pub fn batch_size_for(&self, epoch: usize) -> usize {
        let mut consumed = 0;
        for (span, size) in &self.batch_schedule {
            consumed += span;
            if epoch < consumed {
                return *size;
            }
        }
        self.batch_schedule.last().map(|(_, s)| *s).unwrap_or(32)
    }

    /// True when `epoch` begins a new schedule phase (the best parameters
    /// so far are reloaded at these points).
    pub fn is_schedule_boundary(&self, epoch: usize) -> bool {
        epoch > 0 && self.batch_size_for(epoch) != self.batch_size_for(epoch - 1)
    }
}

/// The five per-example losses on the tape. Absent components (no span
/// label, or a masked negative) are simply not part of `total`.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub p1: Option<Var>,
    pub p2: Option<Var>,
    pub s: Var,
    pub c: Var,
    pub final_: Option<Var>,
    pub total: Var,
}

/// Switcher loss for a negative example: the target is the switcher's own
/// detached output, so the loss value and every gradient it produces are
/// exactly zero — irrelevant slots teach the switcher nothing.
pub fn masked_switcher_loss<S: Scalar>(g: &mut Graph<S>, logit: Var) -> Result<Var, GraphError> {
    let prob = g.sigmoid(logit);
    let target = g.detach(prob);
    let raw = g.bce_logits(logit, target)?;
    let anchor_value = g.scalar_value(raw);
    let anchor = g.scalar(anchor_value);
    g.sub(raw, anchor)
}

fn cross_entropy_at<S: Scalar>(g: &mut Graph<S>, scores: Var, index: usize) -> Result<Var, GraphError> {
    let p = g.pick(scores, index)?;
    let lp = g.ln(p);
    Ok(g.neg(lp))
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Cross entropy of the pointer's host-side value lookup. The span indexing
/// carries no gradient, so this contributes a constant: the model improves
/// it only indirectly, through better spans.
fn pointer_value_ce(value_logits: Option<&[f64]>, n_values: usize, gold: usize) -> f64 {
    match value_logits {
        Some(logits) => logsumexp(logits) - logits[gold],
        None => (n_values as f64).ln(),
    }
}

/// Build the loss bundle for one example from its forward outputs.
pub fn compute_losses<S: Scalar>(
    g: &mut Graph<S>,
    example: &TrainingExample,
    fwd: &SlotForward,
    n_values: usize,
    weights: &[f64; 5],
) -> Result<LossBundle, TrainError> {
    let missing = |what: &'static str| TrainError::MissingLabel {
        dialogue: example.dialogue_id,
        turn: example.turn_index,
        slot: example.slot.clone(),
        what,
    };

    let (p1, p2, s, c, final_) = if example.is_negative {
        let s = masked_switcher_loss(g, fwd.switcher.logit)?;
        let target = g.scalar(S::ZERO);
        let c = g.bce_logits(fwd.classifier.logit, target)?;
        (None, None, s, c, None)
    } else {
        let switcher = example.switcher.ok_or_else(|| missing("switcher"))?;
        let gold_value = example.value_index.ok_or_else(|| missing("value"))?;
        let (p1, p2) = match example.span {
            Some((start, end)) => (
                Some(cross_entropy_at(g, fwd.pointer.scores_p1, start)?),
                Some(cross_entropy_at(g, fwd.pointer.scores_p2, end)?),
            ),
            None if switcher == SwitcherLabel::Point => return Err(missing("span")),
            None => (None, None),
        };
        let switch_target = g.scalar(match switcher {
            SwitcherLabel::Point => S::ONE,
            SwitcherLabel::Generate => S::ZERO,
        });
        let s = g.bce_logits(fwd.switcher.logit, switch_target)?;
        let class_target = g.scalar(S::ONE);
        let c = g.bce_logits(fwd.classifier.logit, class_target)?;
        let final_ = match switcher {
            SwitcherLabel::Point => {
                let ce = pointer_value_ce(fwd.pointer.value_logits.as_deref(), n_values, gold_value);
                Some(g.scalar(S::from_f64(ce)))
            }
            SwitcherLabel::Generate => Some(cross_entropy_at(g, fwd.generator.scores_v, gold_value)?),
        };
        (p1, p2, s, c, final_)
    };

    let mut total: Option<Var> = None;
    for (term, weight) in [p1, p2, Some(s), Some(c), final_].into_iter().zip(weights) {
        if let Some(t) = term {
            let scaled = g.scale(t, S::from_f64(*weight));
            total = Some(match total {
                None => scaled,
                Some(acc) => g.add(acc, scaled)?,
            });
        }
    }
    let total = total.expect("switcher and classifier losses are always present");

    Ok(LossBundle {
        p1,
        p2,
        s,
        c,
        final_,
        total,
    })
}

/// One epoch row of the metrics log. Losses are means over the examples
/// that carried the component (zero when none did).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_p1: f64,
    pub loss_p2: f64,
    pub loss_s: f64,
    pub loss_c: f64,
    pub loss_final: f64,
    pub val_joint_acc: f64,
    pub batch_size: usize,
}

pub fn metrics_to_jsonl(metrics: &[EpochMetrics]) -> String {
    let mut out = String::new();
    for row in metrics {
        out.push_str(&serde_json::to_string(row).expect("metrics are serializable"));
        out.push('\n');
    }
    out
}

pub struct TrainArtifacts {
    pub params: Params<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub best_val_acc: f64,
    pub best_epoch: usize,
}

/// Deterministic dialogue split. With fewer than two dialogues the same
/// data serves as both sides so the validation metric is always defined.
pub fn split_dialogues(
    dialogues: &[Dialogue],
    fraction: f64,
    seed: u64,
) -> (Vec<&Dialogue>, Vec<&Dialogue>) {
    if dialogues.len() < 2 {
        let all: Vec<&Dialogue> = dialogues.iter().collect();
        return (all.clone(), all);
    }
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    order.shuffle(&mut rng);
    let n_val = ((dialogues.len() as f64 * fraction).round() as usize).clamp(1, dialogues.len() - 1);
    let val = order[..n_val].iter().map(|i| &dialogues[*i]).collect();
    let train = order[n_val..].iter().map(|i| &dialogues[*i]).collect();
    (train, val)
}

/// Generate weak-supervision examples for a set of dialogues.
pub fn build_examples(
    dialogues: &[&Dialogue],
    ontology: &Ontology,
    policy: NegativePolicy,
    first_occurrence_correction: bool,
    seed: u64,
) -> Result<Vec<TrainingExample>, TrainError> {
    let matcher = |tokens: &[String], value: &str| find_span(tokens, value);
    let matcher_ref: Option<&SpanMatcher> = if first_occurrence_correction {
        Some(&matcher)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ LABEL_SALT);
    let mut out = Vec::new();
    for dialogue in dialogues {
        let goals = derive_turn_goals(dialogue, matcher_ref);
        out.extend(make_examples(dialogue, &goals, ontology, policy, &mut rng)?);
    }
    Ok(out)
}

#[derive(Debug, Default, Clone, Copy)]
struct LossAccum {
    sums: [f64; 5],
    counts: [usize; 5],
}

impl LossAccum {
    fn add(&mut self, i: usize, value: f64) {
        self.sums[i] += value;
        self.counts[i] += 1;
    }

    fn mean(&self, i: usize) -> f64 {
        if self.counts[i] == 0 {
            0.0
        } else {
            self.sums[i] / self.counts[i] as f64
        }
    }
}

/// Forward/backward over one batch and apply one optimizer step.
///
/// Utterances repeated within the batch (the common case: several slots of
/// the same turn) are encoded once.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    params: &mut Params<f32>,
    adam: &mut Adam<f32>,
    config: &TrainConfig,
    table: &WordTable,
    value_sets: &IndexMap<String, ValueSet>,
    batch: &[&TrainingExample],
    accum: &mut LossAccum,
    dropout_rng: &mut ChaCha8Rng,
    context: (usize, usize),
) -> Result<(), TrainError> {
    let (epoch, batch_idx) = context;
    let mut run: ModelRun<f32> = ModelRun::new(params, &config.model, true);

    type Encoded = (Vec<Var>, Vec<Var>, Vec<Vec<f32>>);
    let mut encodings: IndexMap<String, Encoded> = IndexMap::new();
    let mut totals = Vec::with_capacity(batch.len());

    for example in batch {
        let key = example.tokens.join("\u{1f}");
        if !encodings.contains_key(&key) {
            let raw = table.embed_tokens(&example.tokens);
            let inputs = run.input_rows(&raw);
            let h_p = run.encode_input(&inputs, Branch::Pointer)?;
            let h_g = if config.model.share_encoder {
                h_p.clone()
            } else {
                run.encode_input(&inputs, Branch::Generator)?
            };
            encodings.insert(key.clone(), (h_p, h_g, raw));
        }
        let (h_p, h_g, raw) = &encodings[&key];
        let values = value_sets
            .get(&example.slot)
            .ok_or_else(|| ModelError::UnknownSlot {
                slot: example.slot.clone(),
            })?;
        let (h_p, h_g, raw) = (h_p.clone(), h_g.clone(), raw.clone());
        let fwd = run.slot_forward(
            &h_p,
            &h_g,
            &raw,
            &example.slot,
            values,
            example.is_negative,
            dropout_rng,
        )?;
        let bundle = compute_losses(
            &mut run.graph,
            example,
            &fwd,
            values.values.len(),
            &config.loss_weights,
        )?;
        for (i, term) in [bundle.p1, bundle.p2, Some(bundle.s), Some(bundle.c), bundle.final_]
            .into_iter()
            .enumerate()
        {
            if let Some(t) = term {
                accum.add(i, run.scalar(t));
            }
        }
        totals.push(bundle.total);
    }

    let mut sum = totals[0];
    for t in &totals[1..] {
        sum = run.graph.add(sum, *t)?;
    }
    let mean = run.graph.scale(sum, 1.0 / totals.len() as f32);

    let mean_value = f64::from(run.graph.scalar_value(mean));
    if !mean_value.is_finite() {
        let detail = format!(
            "batch loss is {mean_value}; component means so far: p1={:.4} p2={:.4} s={:.4} c={:.4} final={:.4}",
            accum.mean(0),
            accum.mean(1),
            accum.mean(2),
            accum.mean(3),
            accum.mean(4),
        );
        return Err(TrainError::Diverged {
            epoch,
            batch: batch_idx,
            detail,
        });
    }

    run.graph.backward(mean)?;
    for (name, var) in run.bound() {
        if let Some(grad) = run.graph.grad(*var) {
            let param = &mut params.map[name];
            adam.step(name, param, grad);
        }
    }
    Ok(())
}

/// Train on prepared examples, validating each epoch against held-out
/// dialogues. Returns the best parameters by validation joint accuracy.
pub fn train_prepared(
    config: &TrainConfig,
    examples: &[TrainingExample],
    val_dialogues: &[&Dialogue],
    ontology: &Ontology,
    table: &WordTable,
) -> Result<TrainArtifacts, TrainError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }

    let value_sets = ValueSet::build_all(ontology, table)?;
    let slots: Vec<String> = ontology.slot_names().cloned().collect();
    let mut params: Params<f32> = Params::init(&config.model, &slots, config.seed)?;
    let mut adam: Adam<f32> = Adam::new(config.learning_rate, config.l2);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ DROPOUT_SALT);

    let mut best_params = params.clone();
    let mut best_val_acc = -1.0f64;
    let mut best_epoch = 0usize;
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        if config.is_schedule_boundary(epoch) {
            params = best_params.clone();
        }
        let batch_size = config.batch_size_for(epoch);

        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut accum = LossAccum::default();
        for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|i| &examples[*i]).collect();
            train_batch(
                &mut params,
                &mut adam,
                config,
                table,
                &value_sets,
                &batch,
                &mut accum,
                &mut dropout_rng,
                (epoch, batch_idx),
            )?;
        }

        let val_joint_acc =
            evaluation::model_joint_accuracy(&params, &config.model, table, &value_sets, val_dialogues)?;
        metrics.push(EpochMetrics {
            epoch,
            loss_p1: accum.mean(0),
            loss_p2: accum.mean(1),
            loss_s: accum.mean(2),
            loss_c: accum.mean(3),
            loss_final: accum.mean(4),
            val_joint_acc,
            batch_size,
        });

        if val_joint_acc > best_val_acc {
            best_val_acc = val_joint_acc;
            best_epoch = epoch;
            best_params = params.clone();
        }
        if let Some(target) = config.early_stop_val_acc {
            if val_joint_acc >= target {
                break;
            }
        }
    }

    Ok(TrainArtifacts {
        params: best_params,
        metrics,
        best_val_acc,
        best_epoch,
    })
}

/// Full pipeline: split, label, train.
pub fn train(
    config: &TrainConfig,
    dialogues: &[Dialogue],
    ontology: &Ontology,
    table: &WordTable,
) -> Result<TrainArtifacts, TrainError> {
    config.validate()?;
    if dialogues.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let (train_dials, val_dials) = split_dialogues(dialogues, config.validation_fraction, config.seed);
    let examples = build_examples(
        &train_dials,
        ontology,
        config.negative_policy,
        config.first_occurrence_correction,
        config.seed,
    )?;
    train_prepared(config, &examples, &val_dials, ontology, table)
}

/// How a new slot's embedding row is set up and which data fine-tuning sees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FineTuneStrategy {
    /// Random row; new-slot examples only.
    Plain,
    /// Copy the named slot's row as the starting point.
    InitFromSimilar(String),
    /// Alternate new-slot batches with full-data batches 1:1.
    AlternateFullData,
}

/// Adapt a trained model to a new slot.
///
/// `full_examples` is consulted only by [`FineTuneStrategy::AlternateFullData`].
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    params: &mut Params<f32>,
    config: &TrainConfig,
    table: &WordTable,
    value_sets: &IndexMap<String, ValueSet>,
    new_slot: &str,
    strategy: &FineTuneStrategy,
    slot_examples: &[TrainingExample],
    full_examples: &[TrainingExample],
    epochs: usize,
    batch_size: usize,
) -> Result<(), TrainError> {
    if batch_size == 0 {
        return Err(TrainError::Config {
            message: "fine-tune batch size must be positive".to_string(),
        });
    }
    if *strategy == FineTuneStrategy::Plain && slot_examples.is_empty() {
        return Ok(());
    }

    match strategy {
        FineTuneStrategy::InitFromSimilar(source) => {
            params.add_slot_from(new_slot, source)?;
        }
        FineTuneStrategy::Plain | FineTuneStrategy::AlternateFullData => {
            if !params.has_slot(new_slot) {
                params.add_slot_random(new_slot, config.model.slot_dim, config.seed ^ SLOT_ROW_SALT);
            }
        }
    }
    if slot_examples.is_empty() {
        return Ok(());
    }

    let mut adam: Adam<f32> = Adam::new(config.learning_rate, config.l2);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT ^ 0xf17e);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ DROPOUT_SALT ^ 0xf17e);

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..slot_examples.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut full_order: Vec<usize> = (0..full_examples.len()).collect();
        if *strategy == FineTuneStrategy::AlternateFullData {
            full_order.shuffle(&mut shuffle_rng);
        }
        let mut full_cursor = 0usize;

        let mut accum = LossAccum::default();
        for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|i| &slot_examples[*i]).collect();
            train_batch(
                params,
                &mut adam,
                config,
                table,
                value_sets,
                &batch,
                &mut accum,
                &mut dropout_rng,
                (epoch, batch_idx),
            )?;

            if *strategy == FineTuneStrategy::AlternateFullData && !full_order.is_empty() {
                let mut full_batch = Vec::with_capacity(batch_size);
                for _ in 0..batch_size.min(full_order.len()) {
                    full_batch.push(&full_examples[full_order[full_cursor]]);
                    full_cursor = (full_cursor + 1) % full_order.len();
                }
                train_batch(
                    params,
                    &mut adam,
                    config,
                    table,
                    value_sets,
                    &full_batch,
                    &mut accum,
                    &mut dropout_rng,
                    (epoch, batch_idx),
                )?;
            }
        }
    }
    Ok(())
}
