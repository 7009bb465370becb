//! Metrics, ablation modes, experiment drivers, and slot-graph export.
//!
//! The headline metric is joint goal accuracy: predicted turn values are
//! folded into a running joint state (later values overwrite earlier ones,
//! slots are never deleted) and a turn counts only when that state equals
//! the gold belief state exactly.

use std::collections::BTreeSet;
use std::error::Error;
use std::fmt;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{derive_turn_goals, Dialogue, Ontology, DONTCARE};
use crate::embeddings::{EmbeddingError, WordTable};
use crate::labelgen::{find_span_in_history, LabelError, SwitcherLabel};
use crate::model::forward::{predict_turn, SlotDecision, ValueSet};
use crate::model::{ModelConfig, ModelError, Params};
use crate::training::{
    self, FineTuneStrategy, TrainConfig, TrainError,
};

const HOLD_OUT_SALT: u64 = 0x3c6e_f372_fe94_f82b;
const FEW_SHOT_SALT: u64 = 0xbb67_ae85_84ca_a73b;

#[derive(Debug)]
pub enum EvalError {
    Model(ModelError),
    Label(LabelError),
    Embedding(EmbeddingError),
    Train(Box<TrainError>),
    Misaligned { expected: usize, got: usize },
    TooFewSlots { found: usize },
    InvalidArgument { message: String },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Model(e) => write!(f, "model error during evaluation: {e}"),
            EvalError::Label(e) => write!(f, "label error during evaluation: {e}"),
            EvalError::Embedding(e) => write!(f, "embedding error during evaluation: {e}"),
            EvalError::Train(e) => write!(f, "training step of an experiment failed: {e}"),
            EvalError::Misaligned { expected, got } => {
                write!(f, "prediction/gold length mismatch: {expected} vs {got}")
            }
            EvalError::TooFewSlots { found } => {
                write!(f, "slot similarity graph needs at least 2 slots, found {found}")
            }
            EvalError::InvalidArgument { message } => write!(f, "{message}"),
        }
    }
}

impl Error for EvalError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            EvalError::Model(e) => Some(e),
            EvalError::Label(e) => Some(e),
            EvalError::Embedding(e) => Some(e),
            EvalError::Train(e) => Some(e.as_ref()),
            _ => None,
        }
    }
}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

impl From<LabelError> for EvalError {
    fn from(e: LabelError) -> Self {
        EvalError::Label(e)
    }
}

impl From<EmbeddingError> for EvalError {
    fn from(e: EmbeddingError) -> Self {
        EvalError::Embedding(e)
    }
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Train(Box::new(e))
    }
}

/// Which branch the final combination is hard-routed to, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForceBranch {
    None,
    PointerOnly,
    GeneratorOnly,
}

/// Oracle substitutions for ablation studies. Forcing a branch bypasses
/// the switcher entirely and implies the classifier oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMode {
    pub classifier_oracle: bool,
    pub switcher_oracle: bool,
    pub force_branch: ForceBranch,
}

impl AblationMode {
    pub fn plain() -> Self {
        AblationMode {
            classifier_oracle: false,
            switcher_oracle: false,
            force_branch: ForceBranch::None,
        }
    }

    fn classifier_oracle_effective(&self) -> bool {
        self.classifier_oracle || self.force_branch != ForceBranch::None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnseenReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub joint_goal_acc: f64,
    pub turn_acc: f64,
    pub per_slot_acc: IndexMap<String, f64>,
    pub switcher_acc: f64,
    pub classifier_acc: f64,
    pub unseen: Option<UnseenReport>,
    pub max_softmax_deviation: f64,
}

/// Fold per-turn predicted pairs into a running joint state and count
/// exact matches against the gold states. Used per dialogue.
fn joint_fold(
    turn_predictions: &[Vec<(String, String)>],
    gold_states: &[BTreeSet<(String, String)>],
) -> Result<(usize, usize), EvalError> {
    if turn_predictions.len() != gold_states.len() {
        return Err(EvalError::Misaligned {
            expected: gold_states.len(),
            got: turn_predictions.len(),
        });
    }
    let mut joint: IndexMap<String, String> = IndexMap::new();
    let mut correct = 0;
    for (pairs, gold) in turn_predictions.iter().zip(gold_states) {
        for (slot, value) in pairs {
            joint.insert(slot.clone(), value.clone());
        }
        let predicted: BTreeSet<(String, String)> =
            joint.iter().map(|(s, v)| (s.clone(), v.clone())).collect();
        if predicted == *gold {
            correct += 1;
        }
    }
    Ok((correct, gold_states.len()))
}

/// Joint goal accuracy over one dialogue's turn-level predictions.
pub fn joint_goal_accuracy(
    turn_predictions: &[Vec<(String, String)>],
    gold_states: &[BTreeSet<(String, String)>],
) -> Result<f64, EvalError> {
    let (correct, total) = joint_fold(turn_predictions, gold_states)?;
    if total == 0 {
        Ok(0.0)
    } else {
        Ok(correct as f64 / total as f64)
    }
}

/// One (turn, slot) outcome used by the unseen-value report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotEvent {
    pub predicted: Option<String>,
    pub gold: Option<String>,
}

/// Precision/recall/F1 over (turn, slot) events restricted to held-out
/// values; degenerate denominators yield 0.
pub fn unseen_value_report(held_out: &BTreeSet<String>, events: &[SlotEvent]) -> UnseenReport {
    let gold_hits = |e: &SlotEvent| e.gold.as_ref().is_some_and(|v| held_out.contains(v));
    let pred_hits = |e: &SlotEvent| e.predicted.as_ref().is_some_and(|v| held_out.contains(v));
    let matched = |e: &SlotEvent| gold_hits(e) && e.predicted == e.gold;

    let recall_den = events.iter().filter(|e| gold_hits(e)).count();
    let prec_den = events.iter().filter(|e| pred_hits(e)).count();
    let correct = events.iter().filter(|e| matched(e)).count();

    let recall = if recall_den == 0 {
        0.0
    } else {
        correct as f64 / recall_den as f64
    };
    let precision = if prec_den == 0 {
        0.0
    } else {
        correct as f64 / prec_den as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    UnseenReport {
        precision,
        recall,
        f1,
    }
}

/// Gold labels per (turn, slot) reconstructed independently of training:
/// relevance from the turn goals, switcher from the fuzzy span search.
struct OracleEntry {
    relevant: bool,
    switcher: Option<SwitcherLabel>,
    value: Option<String>,
}

fn oracle_for_dialogue(dialogue: &Dialogue, slots: &[&String]) -> Vec<IndexMap<String, OracleEntry>> {
    let goals = derive_turn_goals(dialogue, None);
    let turn_tokens: Vec<Vec<String>> = dialogue.turns.iter().map(|t| t.input_tokens()).collect();
    goals
        .iter()
        .enumerate()
        .map(|(t, goal)| {
            slots
                .iter()
                .map(|slot| {
                    let pair = goal.pairs.iter().find(|(s, _)| s == *slot);
                    let entry = match pair {
                        Some((_, value)) => {
                            let switcher = if find_span_in_history(&turn_tokens, t, value).is_some()
                            {
                                SwitcherLabel::Point
                            } else {
                                SwitcherLabel::Generate
                            };
                            OracleEntry {
                                relevant: true,
                                switcher: Some(switcher),
                                value: Some(value.clone()),
                            }
                        }
                        None => OracleEntry {
                            relevant: false,
                            switcher: None,
                            value: None,
                        },
                    };
                    ((*slot).clone(), entry)
                })
                .collect()
        })
        .collect()
}

/// Resolve one slot's final value under the given ablation mode.
fn decide(
    decision: &SlotDecision,
    values: &ValueSet,
    mode: &AblationMode,
    oracle: &OracleEntry,
) -> Option<String> {
    let candidate = match mode.force_branch {
        ForceBranch::PointerOnly => decision.v_p,
        ForceBranch::GeneratorOnly => decision.v_g,
        ForceBranch::None => {
            let use_pointer = if mode.switcher_oracle {
                match oracle.switcher {
                    Some(SwitcherLabel::Point) => true,
                    Some(SwitcherLabel::Generate) => false,
                    None => decision.switch_prob >= 0.5 && decision.span_valid,
                }
            } else {
                decision.switch_prob >= 0.5 && decision.span_valid
            };
            if use_pointer {
                decision.v_p
            } else {
                decision.v_g
            }
        }
    };
    let relevant = if mode.classifier_oracle_effective() {
        oracle.relevant
    } else {
        decision.class_prob >= 0.5
    };
    relevant.then(|| values.values[candidate].clone())
}

/// Full evaluation pass: joint/turn/per-slot accuracy, gate accuracies,
/// and (when `held_out` is given) the unseen-value block.
pub fn evaluate(
    params: &Params<f32>,
    config: &ModelConfig,
    table: &WordTable,
    value_sets: &IndexMap<String, ValueSet>,
    dialogues: &[&Dialogue],
    mode: &AblationMode,
    held_out: Option<&BTreeSet<String>>,
) -> Result<EvalReport, EvalError> {
    let slots: Vec<&String> = value_sets.keys().collect();
    let mut joint_correct = 0usize;
    let mut joint_total = 0usize;
    let mut turn_correct = 0usize;
    let mut slot_correct: IndexMap<String, usize> =
        slots.iter().map(|s| ((*s).clone(), 0usize)).collect();
    let mut switcher_hits = (0usize, 0usize);
    let mut classifier_hits = (0usize, 0usize);
    let mut events: Vec<SlotEvent> = Vec::new();
    let mut max_softmax_deviation = 0.0f64;

    for dialogue in dialogues {
        let oracle = oracle_for_dialogue(dialogue, &slots);
        let goals = derive_turn_goals(dialogue, None);
        let mut joint: IndexMap<String, String> = IndexMap::new();

        for (t, turn) in dialogue.turns.iter().enumerate() {
            let tokens = turn.input_tokens();
            let prediction = predict_turn(params, config, table, value_sets, &tokens)?;
            max_softmax_deviation = max_softmax_deviation.max(prediction.max_softmax_deviation);

            let mut turn_pairs: Vec<(String, String)> = Vec::new();
            for (slot, decision) in &prediction.slots {
                let entry = &oracle[t][slot];
                if let Some(value) = decide(decision, &value_sets[slot], mode, entry) {
                    turn_pairs.push((slot.clone(), value));
                }

                // Raw gate accuracies, independent of the ablation mode.
                let predicted_relevant = decision.class_prob >= 0.5;
                classifier_hits.1 += 1;
                if predicted_relevant == entry.relevant {
                    classifier_hits.0 += 1;
                }
                if let Some(label) = entry.switcher {
                    let predicted_point = decision.switch_prob >= 0.5;
                    switcher_hits.1 += 1;
                    if predicted_point == (label == SwitcherLabel::Point) {
                        switcher_hits.0 += 1;
                    }
                }

                if held_out.is_some() {
                    let gold_value = entry.value.clone();
                    let predicted_value = turn_pairs
                        .iter()
                        .rev()
                        .find(|(s, _)| s == slot)
                        .map(|(_, v)| v.clone());
                    if gold_value.is_some() || predicted_value.is_some() {
                        events.push(SlotEvent {
                            predicted: predicted_value,
                            gold: gold_value,
                        });
                    }
                }
            }

            let gold_turn = &goals[t].pairs;
            let turn_set: BTreeSet<(String, String)> = turn_pairs.iter().cloned().collect();
            if turn_set == *gold_turn {
                turn_correct += 1;
            }

            for (slot, value) in &turn_pairs {
                joint.insert(slot.clone(), value.clone());
            }
            let predicted: BTreeSet<(String, String)> =
                joint.iter().map(|(s, v)| (s.clone(), v.clone())).collect();
            if predicted == turn.belief_state {
                joint_correct += 1;
            }
            joint_total += 1;

            for slot in &slots {
                let gold_values: BTreeSet<&String> = turn
                    .belief_state
                    .iter()
                    .filter(|(s, _)| s == *slot)
                    .map(|(_, v)| v)
                    .collect();
                let correct = match joint.get(*slot) {
                    None => gold_values.is_empty(),
                    Some(v) => gold_values.len() == 1 && gold_values.contains(v),
                };
                if correct {
                    *slot_correct.get_mut(*slot).expect("slot key exists") += 1;
                }
            }
        }
    }

    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let per_slot_acc = slot_correct
        .into_iter()
        .map(|(slot, correct)| (slot, rate(correct, joint_total)))
        .collect();

    Ok(EvalReport {
        joint_goal_acc: rate(joint_correct, joint_total),
        turn_acc: rate(turn_correct, joint_total),
        per_slot_acc,
        switcher_acc: rate(switcher_hits.0, switcher_hits.1),
        classifier_acc: rate(classifier_hits.0, classifier_hits.1),
        unseen: held_out.map(|h| unseen_value_report(h, &events)),
        max_softmax_deviation,
    })
}

/// Lean joint accuracy without oracle bookkeeping, used for per-epoch
/// validation inside the training loop.
pub fn model_joint_accuracy(
    params: &Params<f32>,
    config: &ModelConfig,
    table: &WordTable,
    value_sets: &IndexMap<String, ValueSet>,
    dialogues: &[&Dialogue],
) -> Result<f64, ModelError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for dialogue in dialogues {
        let mut joint: IndexMap<String, String> = IndexMap::new();
        for turn in &dialogue.turns {
            let tokens = turn.input_tokens();
            let prediction = predict_turn(params, config, table, value_sets, &tokens)?;
            for (slot, decision) in &prediction.slots {
                if let Some(idx) = decision.chosen {
                    joint.insert(slot.clone(), value_sets[slot].values[idx].clone());
                }
            }
            let predicted: BTreeSet<(String, String)> =
                joint.iter().map(|(s, v)| (s.clone(), v.clone())).collect();
            if predicted == turn.belief_state {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Evaluate under an ablation mode (oracle labels are derived internally).
pub fn run_ablation(
    mode: &AblationMode,
    params: &Params<f32>,
    config: &ModelConfig,
    table: &WordTable,
    value_sets: &IndexMap<String, ValueSet>,
    dialogues: &[&Dialogue],
) -> Result<EvalReport, EvalError> {
    evaluate(params, config, table, value_sets, dialogues, mode, None)
}

/// Binary accuracies of the two gates against generated labels; the
/// switcher is scored only on relevant (positive) events.
pub fn module_accuracy(
    params: &Params<f32>,
    config: &ModelConfig,
    table: &WordTable,
    value_sets: &IndexMap<String, ValueSet>,
    dialogues: &[&Dialogue],
) -> Result<(f64, f64), EvalError> {
    let report = evaluate(
        params,
        config,
        table,
        value_sets,
        dialogues,
        &AblationMode::plain(),
        None,
    )?;
    Ok((report.switcher_acc, report.classifier_acc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotEdge {
    pub from: String,
    pub to: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotGraph {
    pub edges: Vec<SlotEdge>,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// One directed edge per slot, to its most cosine-similar other slot.
pub fn slot_similarity_graph(
    embeddings: &IndexMap<String, Vec<f32>>,
) -> Result<SlotGraph, EvalError> {
    if embeddings.len() < 2 {
        return Err(EvalError::TooFewSlots {
            found: embeddings.len(),
        });
    }
    let mut edges = Vec::with_capacity(embeddings.len());
    for (from, row) in embeddings {
        let mut best: Option<(&String, f64)> = None;
        for (to, other) in embeddings {
            if to == from {
                continue;
            }
            let sim = cosine(row, other);
            if best.map(|(_, w)| sim > w).unwrap_or(true) {
                best = Some((to, sim));
            }
        }
        let (to, weight) = best.expect("at least one other slot exists");
        edges.push(SlotEdge {
            from: from.clone(),
            to: to.clone(),
            weight,
        });
    }
    Ok(SlotGraph { edges })
}

/// The slot embedding table of a trained model, in parameter order.
pub fn slot_embeddings(params: &Params<f32>) -> IndexMap<String, Vec<f32>> {
    params
        .slot_names()
        .into_iter()
        .map(|slot| {
            let row = params.get(&Params::<f32>::slot_row_name(&slot)).data.clone();
            (slot, row)
        })
        .collect()
}

pub fn slot_graph_dot(graph: &SlotGraph) -> String {
    let mut out = String::from("digraph slot_similarity {\n");
    for edge in &graph.edges {
        out.push_str(&format!(
            "  \"{}\" -> \"{}\" [weight={:.6}, label=\"{:.6}\"];\n",
            edge.from, edge.to, edge.weight, edge.weight
        ));
    }
    out.push_str("}\n");
    out
}

pub fn slot_graph_json(graph: &SlotGraph) -> String {
    let mut text = serde_json::to_string_pretty(graph).expect("graph is serializable");
    text.push('\n');
    text
}

#[derive(Debug, Clone, Serialize)]
pub struct UnseenOutcome {
    pub held_out: Vec<String>,
    pub deleted_fraction: f64,
    pub joint_acc: f64,
    pub report: UnseenReport,
}

/// Hold out a sampled subset of one slot's values, drop every training
/// example that teaches them, retrain, and score the untouched test set.
#[allow(clippy::too_many_arguments)]
pub fn unseen_value_experiment(
    train_dialogues: &[Dialogue],
    test_dialogues: &[Dialogue],
    ontology: &Ontology,
    slot: &str,
    rate: f64,
    seed: u64,
    config: &TrainConfig,
    table: &WordTable,
) -> Result<UnseenOutcome, EvalError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(EvalError::InvalidArgument {
            message: format!("hold-out rate {rate} outside [0, 1)"),
        });
    }
    let values = ontology.values(slot).ok_or_else(|| EvalError::InvalidArgument {
        message: format!("unknown slot '{slot}'"),
    })?;

    // dontcare has no surface form, so holding it out says nothing about
    // pointing at unseen surface values.
    let mut candidates: Vec<&String> = values.iter().filter(|v| *v != DONTCARE).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ HOLD_OUT_SALT);
    candidates.shuffle(&mut rng);
    let k = (rate * candidates.len() as f64).round() as usize;
    let held_out: BTreeSet<String> = candidates.into_iter().take(k).cloned().collect();

    let (train_split, val_split) =
        training::split_dialogues(train_dialogues, config.validation_fraction, config.seed);
    let examples = training::build_examples(
        &train_split,
        ontology,
        config.negative_policy,
        config.first_occurrence_correction,
        config.seed,
    )?;
    let total = examples.len();
    let kept: Vec<_> = examples
        .into_iter()
        .filter(|ex| {
            !(ex.slot == slot && ex.value.as_ref().is_some_and(|v| held_out.contains(v)))
        })
        .collect();
    let deleted_fraction = if total == 0 {
        0.0
    } else {
        (total - kept.len()) as f64 / total as f64
    };

    let artifacts = training::train_prepared(config, &kept, &val_split, ontology, table)?;

    let value_sets = ValueSet::build_all(ontology, table)?;
    let test_refs: Vec<&Dialogue> = test_dialogues.iter().collect();
    let report = evaluate(
        &artifacts.params,
        &config.model,
        table,
        &value_sets,
        &test_refs,
        &AblationMode::plain(),
        Some(&held_out),
    )?;

    Ok(UnseenOutcome {
        held_out: held_out.into_iter().collect(),
        deleted_fraction,
        joint_acc: report.joint_goal_acc,
        report: report.unseen.expect("held_out was supplied"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotPoint {
    pub n_examples: usize,
    pub joint_acc: f64,
}

pub fn few_shot_curve_jsonl(points: &[FewShotPoint]) -> String {
    let mut out = String::new();
    for p in points {
        out.push_str(&serde_json::to_string(p).expect("point is serializable"));
        out.push('\n');
    }
    out
}

/// Remove one slot from an ontology.
fn ontology_without(ontology: &Ontology, slot: &str) -> Result<Ontology, EvalError> {
    let slots: IndexMap<String, Vec<String>> = ontology
        .slot_names()
        .filter(|s| *s != slot)
        .map(|s| (s.clone(), ontology.values(s).unwrap_or_default().to_vec()))
        .collect();
    if slots.is_empty() {
        return Err(EvalError::InvalidArgument {
            message: format!("holding out '{slot}' would leave no slots to pretrain on"),
        });
    }
    Ontology::from_slots(slots).map_err(|e| EvalError::InvalidArgument {
        message: e.to_string(),
    })
}

/// Strip a slot's pairs from every belief state so pretraining validation
/// is not penalized for a slot the model cannot see.
fn strip_slot(dialogues: &[&Dialogue], slot: &str) -> Vec<Dialogue> {
    dialogues
        .iter()
        .map(|d| {
            let mut d = (*d).clone();
            for turn in &mut d.turns {
                turn.belief_state.retain(|(s, _)| s != slot);
            }
            d
        })
        .collect()
}

/// Pretrain without the held-out slot, then fine-tune fresh copies on
/// growing example budgets, recording the best test joint accuracy seen
/// across the fine-tune epochs for each budget.
#[allow(clippy::too_many_arguments)]
pub fn few_shot_experiment(
    train_dialogues: &[Dialogue],
    test_dialogues: &[Dialogue],
    ontology: &Ontology,
    held_out_slot: &str,
    subset_sizes: &[usize],
    strategy: &FineTuneStrategy,
    config: &TrainConfig,
    table: &WordTable,
    fine_tune_epochs: usize,
) -> Result<Vec<FewShotPoint>, EvalError> {
    if ontology.values(held_out_slot).is_none() {
        return Err(EvalError::InvalidArgument {
            message: format!("unknown slot '{held_out_slot}'"),
        });
    }
    let reduced = ontology_without(ontology, held_out_slot)?;

    let (train_split, val_split) =
        training::split_dialogues(train_dialogues, config.validation_fraction, config.seed);
    let all_examples = training::build_examples(
        &train_split,
        ontology,
        config.negative_policy,
        config.first_occurrence_correction,
        config.seed,
    )?;
    let pretrain_examples: Vec<_> = all_examples
        .iter()
        .filter(|ex| ex.slot != held_out_slot)
        .cloned()
        .collect();
    let val_stripped = strip_slot(&val_split, held_out_slot);
    let val_refs: Vec<&Dialogue> = val_stripped.iter().collect();
    let pretrained =
        training::train_prepared(config, &pretrain_examples, &val_refs, &reduced, table)?;

    let mut slot_pool: Vec<_> = all_examples
        .iter()
        .filter(|ex| ex.slot == held_out_slot)
        .cloned()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ FEW_SHOT_SALT);
    slot_pool.shuffle(&mut rng);

    let full_value_sets = ValueSet::build_all(ontology, table)?;
    let test_refs: Vec<&Dialogue> = test_dialogues.iter().collect();

    let mut sizes: Vec<usize> = subset_sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();

    let mut curve = Vec::with_capacity(sizes.len());
    for n in sizes {
        if n > slot_pool.len() {
            return Err(TrainError::NotEnoughExamples {
                requested: n,
                available: slot_pool.len(),
            }
            .into());
        }
        let mut params = pretrained.params.clone();
        match strategy {
            FineTuneStrategy::InitFromSimilar(source) => {
                params.add_slot_from(held_out_slot, source).map_err(TrainError::Model)?;
            }
            _ => params.add_slot_random(
                held_out_slot,
                config.model.slot_dim,
                config.seed ^ FEW_SHOT_SALT,
            ),
        }
        // The row is set up once above; per-epoch calls must not re-copy
        // it, so the similar-init strategy degrades to plain here.
        let per_epoch = match strategy {
            FineTuneStrategy::AlternateFullData => FineTuneStrategy::AlternateFullData,
            _ => FineTuneStrategy::Plain,
        };

        let subset = &slot_pool[..n];
        let mut best = model_joint_accuracy(
            &params,
            &config.model,
            table,
            &full_value_sets,
            &test_refs,
        )?;
        if n > 0 {
            for epoch in 0..fine_tune_epochs {
                let mut tweaked = config.clone();
                tweaked.seed = config.seed.wrapping_add(epoch as u64);
                training::fine_tune(
                    &mut params,
                    &tweaked,
                    table,
                    &full_value_sets,
                    held_out_slot,
                    &per_epoch,
                    subset,
                    &all_examples,
                    1,
                    32,
                )?;
                let acc = model_joint_accuracy(
                    &params,
                    &config.model,
                    table,
                    &full_value_sets,
                    &test_refs,
                )?;
                best = best.max(acc);
            }
        }
        curve.push(FewShotPoint {
            n_examples: n,
            joint_acc: best,
        });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_config;

    fn pairs(list: &[(&str, &str)]) -> Vec<(String, String)> {
        list.iter().map(|(s, v)| (s.to_string(), v.to_string())).collect()
    }

    fn state(list: &[(&str, &str)]) -> BTreeSet<(String, String)> {
        list.iter().map(|(s, v)| (s.to_string(), v.to_string())).collect()
    }

    #[test]
    fn joint_accuracy_on_exact_matches_is_one() {
        let preds = vec![pairs(&[("food", "thai")]), pairs(&[("area", "north")])];
        let gold = vec![
            state(&[("food", "thai")]),
            state(&[("food", "thai"), ("area", "north")]),
        ];
        assert_eq!(joint_goal_accuracy(&preds, &gold).unwrap(), 1.0);
    }

    #[test]
    fn joint_accuracy_counts_turns_independently() {
        let preds = vec![pairs(&[("food", "thai")]), pairs(&[("area", "south")])];
        let gold = vec![
            state(&[("food", "thai")]),
            state(&[("food", "thai"), ("area", "north")]),
        ];
        assert_eq!(joint_goal_accuracy(&preds, &gold).unwrap(), 0.5);
    }

    #[test]
    fn early_error_propagates_through_the_fold() {
        // A wrong first-turn value is never corrected, so every joint
        // state afterwards is wrong too.
        let preds = vec![pairs(&[("food", "korean")]), pairs(&[]), pairs(&[])];
        let gold = vec![
            state(&[("food", "thai")]),
            state(&[("food", "thai")]),
            state(&[("food", "thai")]),
        ];
        assert_eq!(joint_goal_accuracy(&preds, &gold).unwrap(), 0.0);
    }

    #[test]
    fn later_values_overwrite_earlier_ones() {
        let preds = vec![pairs(&[("food", "thai")]), pairs(&[("food", "korean")])];
        let gold = vec![state(&[("food", "thai")]), state(&[("food", "korean")])];
        assert_eq!(joint_goal_accuracy(&preds, &gold).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_predictions_score_zero() {
        let preds = vec![pairs(&[("area", "west")])];
        let gold = vec![state(&[("food", "thai")])];
        assert_eq!(joint_goal_accuracy(&preds, &gold).unwrap(), 0.0);
    }

    #[test]
    fn misaligned_lengths_are_rejected() {
        let preds = vec![pairs(&[])];
        let gold = vec![state(&[]), state(&[])];
        assert!(matches!(
            joint_goal_accuracy(&preds, &gold),
            Err(EvalError::Misaligned { .. })
        ));
    }

    fn event(predicted: Option<&str>, gold: Option<&str>) -> SlotEvent {
        SlotEvent {
            predicted: predicted.map(|s| s.to_string()),
            gold: gold.map(|s| s.to_string()),
        }
    }

    #[test]
    fn unseen_report_perfect_predictions() {
        let held: BTreeSet<String> = ["thai".to_string()].into();
        let events = vec![event(Some("thai"), Some("thai")), event(Some("korean"), Some("korean"))];
        let r = unseen_value_report(&held, &events);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn unseen_report_degenerate_is_zero() {
        let held: BTreeSet<String> = ["thai".to_string()].into();
        let events = vec![event(None, Some("thai")), event(Some("korean"), Some("korean"))];
        let r = unseen_value_report(&held, &events);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn unseen_report_hand_count() {
        // 3 gold events, 2 predicted correctly, plus 1 spurious held-out
        // prediction elsewhere: P = R = F1 = 2/3.
        let held: BTreeSet<String> = ["a".to_string(), "b".to_string(), "c".to_string()].into();
        let events = vec![
            event(Some("a"), Some("a")),
            event(Some("b"), Some("b")),
            event(Some("x"), Some("c")),
            event(Some("a"), Some("y")),
        ];
        let r = unseen_value_report(&held, &events);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    fn emb(rows: &[(&str, Vec<f32>)]) -> IndexMap<String, Vec<f32>> {
        rows.iter().map(|(s, v)| (s.to_string(), v.clone())).collect()
    }

    #[test]
    fn two_slots_point_at_each_other() {
        let graph = slot_similarity_graph(&emb(&[
            ("a", vec![1.0, 0.0]),
            ("b", vec![0.5, 0.5]),
        ]))
        .unwrap();
        assert_eq!(graph.edges.len(), 2);
        assert_eq!(graph.edges[0].from, "a");
        assert_eq!(graph.edges[0].to, "b");
        assert_eq!(graph.edges[1].from, "b");
        assert_eq!(graph.edges[1].to, "a");
        assert!((graph.edges[0].weight - graph.edges[1].weight).abs() < 1e-12);
    }

    #[test]
    fn identical_and_orthogonal_rows_have_extreme_weights() {
        let graph = slot_similarity_graph(&emb(&[
            ("a", vec![1.0, 0.0]),
            ("b", vec![2.0, 0.0]),
            ("c", vec![0.0, 3.0]),
        ]))
        .unwrap();
        let by_from: IndexMap<&str, &SlotEdge> =
            graph.edges.iter().map(|e| (e.from.as_str(), e)).collect();
        assert_eq!(by_from["a"].to, "b");
        assert!((by_from["a"].weight - 1.0).abs() < 1e-12);
        assert_eq!(by_from["b"].to, "a");
        assert_eq!(by_from["c"].weight, 0.0);
    }

    #[test]
    fn graph_matches_brute_force_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rows: IndexMap<String, Vec<f32>> = (0..5)
            .map(|i| {
                let v: Vec<f32> = (0..8).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
                (format!("slot{i}"), v)
            })
            .collect();
        let graph = slot_similarity_graph(&rows).unwrap();
        for edge in &graph.edges {
            let from_row = &rows[&edge.from];
            let (mut best_to, mut best_w) = (None, f64::NEG_INFINITY);
            for (name, row) in &rows {
                if name == &edge.from {
                    continue;
                }
                let w = cosine(from_row, row);
                if w > best_w {
                    best_w = w;
                    best_to = Some(name.clone());
                }
            }
            assert_eq!(Some(edge.to.clone()), best_to);
            assert!((edge.weight - best_w).abs() < 1e-12);
        }
    }

    #[test]
    fn single_slot_graph_is_an_error() {
        let err = slot_similarity_graph(&emb(&[("a", vec![1.0])])).unwrap_err();
        assert!(matches!(err, EvalError::TooFewSlots { found: 1 }));
    }

    #[test]
    fn dot_export_lists_every_edge() {
        let graph = slot_similarity_graph(&emb(&[
            ("food", vec![1.0, 0.0]),
            ("area", vec![0.9, 0.1]),
        ]))
        .unwrap();
        let dot = slot_graph_dot(&graph);
        assert!(dot.starts_with("digraph slot_similarity {"));
        assert!(dot.contains("\"food\" -> \"area\""));
        assert!(dot.contains("\"area\" -> \"food\""));
        assert!(dot.ends_with("}\n"));
    }

    fn tiny_setup() -> (Vec<Dialogue>, Ontology, TrainConfig, WordTable) {
        let text = r#"[
          {"dialogue_idx": 1, "dialogue": [
            {"system_transcript": "", "transcript": "i want thai food",
             "belief_state": [{"slot": "food", "value": "thai"}]},
            {"system_transcript": "ok", "transcript": "any area is fine",
             "belief_state": [{"slot": "food", "value": "thai"}, {"slot": "area", "value": "dontcare"}]}
          ]}
        ]"#;
        let dialogues = crate::corpus::parse_corpus(text, std::path::Path::new("tiny")).unwrap();
        let mut slots = IndexMap::new();
        slots.insert("food".to_string(), vec!["thai".to_string(), "korean".to_string()]);
        slots.insert("area".to_string(), vec!["north".to_string(), "south".to_string()]);
        let ontology = Ontology::from_slots(slots).unwrap();
        let config = TrainConfig {
            dataset: "custom".to_string(),
            model: test_config(),
            epochs: 1,
            learning_rate: 1e-3,
            l2: 0.0,
            batch_schedule: vec![(1, 8)],
            seed: 5,
            loss_weights: [1.0; 5],
            negative_policy: crate::labelgen::NegativePolicy::AllUnrelated,
            first_occurrence_correction: false,
            validation_fraction: 0.1,
            early_stop_val_acc: None,
        };
        let table = WordTable::random(config.model.word_dim, 3);
        (dialogues, ontology, config, table)
    }

    #[test]
    fn all_oracles_off_matches_plain_evaluation() {
        let (dialogues, ontology, config, table) = tiny_setup();
        let slots: Vec<String> = ontology.slot_names().cloned().collect();
        let params: Params<f32> = Params::init(&config.model, &slots, 7).unwrap();
        let value_sets = ValueSet::build_all(&ontology, &table).unwrap();
        let refs: Vec<&Dialogue> = dialogues.iter().collect();

        let plain = evaluate(
            &params,
            &config.model,
            &table,
            &value_sets,
            &refs,
            &AblationMode::plain(),
            None,
        )
        .unwrap();
        let ablated = run_ablation(
            &AblationMode::plain(),
            &params,
            &config.model,
            &table,
            &value_sets,
            &refs,
        )
        .unwrap();
        assert_eq!(plain.joint_goal_acc, ablated.joint_goal_acc);
        assert_eq!(plain.turn_acc, ablated.turn_acc);
        assert_eq!(plain.switcher_acc, ablated.switcher_acc);
        assert_eq!(plain.classifier_acc, ablated.classifier_acc);
    }

    #[test]
    fn classifier_oracle_never_hurts_joint_accuracy() {
        let (dialogues, ontology, config, table) = tiny_setup();
        let slots: Vec<String> = ontology.slot_names().cloned().collect();
        let params: Params<f32> = Params::init(&config.model, &slots, 7).unwrap();
        let value_sets = ValueSet::build_all(&ontology, &table).unwrap();
        let refs: Vec<&Dialogue> = dialogues.iter().collect();

        let plain = run_ablation(
            &AblationMode::plain(),
            &params,
            &config.model,
            &table,
            &value_sets,
            &refs,
        )
        .unwrap();
        let oracle = run_ablation(
            &AblationMode {
                classifier_oracle: true,
                switcher_oracle: false,
                force_branch: ForceBranch::None,
            },
            &params,
            &config.model,
            &table,
            &value_sets,
            &refs,
        )
        .unwrap();
        assert!(oracle.joint_goal_acc >= plain.joint_goal_acc);
    }

    #[test]
    fn suppressed_classifier_is_perfect_on_all_negative_dialogues() {
        let (_, ontology, config, table) = tiny_setup();
        let text = r#"[
          {"dialogue_idx": 9, "dialogue": [
            {"system_transcript": "", "transcript": "hello there", "belief_state": []},
            {"system_transcript": "hi", "transcript": "just browsing", "belief_state": []}
          ]}
        ]"#;
        let dialogues = crate::corpus::parse_corpus(text, std::path::Path::new("neg")).unwrap();
        let slots: Vec<String> = ontology.slot_names().cloned().collect();
        let mut params: Params<f32> = Params::init(&config.model, &slots, 7).unwrap();
        params.map["classifier.out.b"].data[0] = -30.0;
        let value_sets = ValueSet::build_all(&ontology, &table).unwrap();
        let refs: Vec<&Dialogue> = dialogues.iter().collect();
        let (_, classifier_acc) =
            module_accuracy(&params, &config.model, &table, &value_sets, &refs).unwrap();
        assert_eq!(classifier_acc, 1.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (dialogues, ontology, config, table) = tiny_setup();
        let slots: Vec<String> = ontology.slot_names().cloned().collect();
        let params: Params<f32> = Params::init(&config.model, &slots, 7).unwrap();
        let value_sets = ValueSet::build_all(&ontology, &table).unwrap();
        let refs: Vec<&Dialogue> = dialogues.iter().collect();
        let a = evaluate(
            &params,
            &config.model,
            &table,
            &value_sets,
            &refs,
            &AblationMode::plain(),
            None,
        )
        .unwrap();
        let b = evaluate(
            &params,
            &config.model,
            &table,
            &value_sets,
            &refs,
            &AblationMode::plain(),
            None,
        )
        .unwrap();
        assert_eq!(a.joint_goal_acc, b.joint_goal_acc);
        assert_eq!(a.per_slot_acc, b.per_slot_acc);
    }

    #[test]
    fn few_shot_envelope_is_monotone() {
        // Recomputing the best-so-far envelope from raw curve points must
        // yield a non-decreasing sequence.
        let raw = [0.2, 0.1, 0.5, 0.4, 0.6];
        let mut envelope = Vec::new();
        let mut best = f64::NEG_INFINITY;
        for v in raw {
            best = best.max(v);
            envelope.push(best);
        }
        assert!(envelope.windows(2).all(|w| w[0] <= w[1]));
    }
}
