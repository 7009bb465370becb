//! Weak-supervision label generation.
//!
//! For every (turn, slot, value) goal pair this module searches the turn's
//! token sequence (and, failing that, earlier turns) for a fuzzy occurrence
//! of the value — Levenshtein distance below 3 — and derives span labels,
//! switcher labels (point when a span exists, generate otherwise), and
//! classifier labels with negative sampling over unrelated slots.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{Dialogue, Ontology, TurnGoal};

/// A fuzzy span match is accepted when the edit distance is strictly below
/// this bound.
pub const MATCH_DISTANCE: usize = 3;

#[derive(Debug)]
pub enum LabelError {
    UnknownValue {
        dialogue: i64,
        slot: String,
        value: String,
    },
    MisalignedGoals {
        dialogue: i64,
        turns: usize,
        goals: usize,
    },
}

impl fmt::Display for LabelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelError::UnknownValue {
                dialogue,
                slot,
                value,
            } => write!(
                f,
                "dialogue {dialogue}: value '{value}' of slot '{slot}' is not in the ontology"
            ),
            LabelError::MisalignedGoals {
                dialogue,
                turns,
                goals,
            } => write!(
                f,
                "dialogue {dialogue}: {goals} turn goals for {turns} turns"
            ),
        }
    }
}

impl std::error::Error for LabelError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitcherLabel {
    Point,
    Generate,
}

/// One (utterance, slot) training example with its weak labels.
///
/// When the span was found in an earlier turn, `turn_index` and `tokens`
/// refer to that earlier turn, so span indices always address `tokens`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub dialogue_id: i64,
    pub turn_index: usize,
    pub tokens: Vec<String>,
    pub slot: String,
    pub value: Option<String>,
    pub value_index: Option<usize>,
    pub span: Option<(usize, usize)>,
    pub switcher: Option<SwitcherLabel>,
    pub relevant: bool,
    pub is_negative: bool,
}

/// How negative (irrelevant-slot) examples are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePolicy {
    /// Every unrelated slot yields a negative example.
    AllUnrelated,
    /// Each unrelated slot yields a negative with this probability.
    Bernoulli(f64),
}

/// Unit-cost edit distance (insert / delete / substitute).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn normalize_value(value: &str) -> String {
    crate::corpus::tokenize(value).join(" ")
}

/// Fuzzy span search over contiguous token subsequences.
///
/// Candidates run up to one token longer than the value itself; a candidate
/// matches when the edit distance between its space-joined form and the
/// value is below [`MATCH_DISTANCE`]. The match starting furthest right
/// wins, and at that start the shortest matching candidate wins. Both ends
/// of the returned span are inclusive.
pub fn find_span(tokens: &[String], value: &str) -> Option<(usize, usize)> {
    let target = normalize_value(value);
    if target.is_empty() {
        return None;
    }
    let max_len = target.split(' ').count() + 1;
    let mut best: Option<(usize, usize)> = None;
    for start in 0..tokens.len() {
        for len in 1..=max_len.min(tokens.len() - start) {
            let joined = tokens[start..start + len].join(" ");
            if levenshtein(&joined, &target) < MATCH_DISTANCE {
                best = Some((start, start + len - 1));
                break; // shortest match at this start wins
            }
        }
    }
    best
}

/// Search the current turn first, then earlier turns from most recent
/// backwards; returns the matched turn's index alongside the span.
pub fn find_span_in_history(
    turn_tokens: &[Vec<String>],
    turn: usize,
    value: &str,
) -> Option<(usize, usize, usize)> {
    for t in (0..=turn).rev() {
        if let Some((s, e)) = find_span(&turn_tokens[t], value) {
            return Some((t, s, e));
        }
    }
    None
}

/// Build the training examples for one dialogue.
///
/// Positives carry span/switcher/value labels for each goal pair; negatives
/// are sampled from the turn's unrelated slots per `policy` and carry only
/// the irrelevant classifier label.
pub fn make_examples(
    dialogue: &Dialogue,
    goals: &[TurnGoal],
    ontology: &Ontology,
    policy: NegativePolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainingExample>, LabelError> {
    if goals.len() != dialogue.turns.len() {
        return Err(LabelError::MisalignedGoals {
            dialogue: dialogue.id,
            turns: dialogue.turns.len(),
            goals: goals.len(),
        });
    }
    let turn_tokens: Vec<Vec<String>> = dialogue.turns.iter().map(|t| t.input_tokens()).collect();
    let mut out = Vec::new();

    for (t, goal) in goals.iter().enumerate() {
        for (slot, value) in &goal.pairs {
            let value_index =
                ontology
                    .value_index(slot, value)
                    .ok_or_else(|| LabelError::UnknownValue {
                        dialogue: dialogue.id,
                        slot: slot.clone(),
                        value: value.clone(),
                    })?;
            let hit = find_span_in_history(&turn_tokens, t, value);
            let (turn_index, span, switcher) = match hit {
                Some((matched_turn, s, e)) => {
                    (matched_turn, Some((s, e)), SwitcherLabel::Point)
                }
                None => (t, None, SwitcherLabel::Generate),
            };
            out.push(TrainingExample {
                dialogue_id: dialogue.id,
                turn_index,
                tokens: turn_tokens[turn_index].clone(),
                slot: slot.clone(),
                value: Some(value.clone()),
                value_index: Some(value_index),
                span,
                switcher: Some(switcher),
                relevant: true,
                is_negative: false,
            });
        }

        for slot in ontology.slot_names() {
            if goal.pairs.iter().any(|(s, _)| s == slot) {
                continue;
            }
            let emit = match policy {
                NegativePolicy::AllUnrelated => true,
                NegativePolicy::Bernoulli(p) => rng.gen_bool(p),
            };
            if emit {
                out.push(TrainingExample {
                    dialogue_id: dialogue.id,
                    turn_index: t,
                    tokens: turn_tokens[t].clone(),
                    slot: slot.clone(),
                    value: None,
                    value_index: None,
                    span: None,
                    switcher: None,
                    relevant: false,
                    is_negative: true,
                });
            }
        }
    }
    Ok(out)
}

/// Fraction of positives whose value had no span (generate-labeled).
pub fn implicit_fraction(examples: &[TrainingExample]) -> f64 {
    let positives: Vec<&TrainingExample> = examples.iter().filter(|e| !e.is_negative).collect();
    if positives.is_empty() {
        return 0.0;
    }
    let implicit = positives
        .iter()
        .filter(|e| e.switcher == Some(SwitcherLabel::Generate))
        .count();
    implicit as f64 / positives.len() as f64
}

/// Render examples as line-delimited JSON, one object per example.
pub fn examples_to_jsonl(examples: &[TrainingExample]) -> String {
    let mut out = String::new();
    for e in examples {
        let record = json!({
            "dialogue_idx": e.dialogue_id,
            "turn_idx": e.turn_index,
            "slot": e.slot,
            "value_idx": e.value_index,
            "span": e.span.map(|(s, end)| vec![s, end]),
            "switcher": e.switcher.map(|s| match s {
                SwitcherLabel::Point => "point",
                SwitcherLabel::Generate => "generate",
            }),
            "classifier": u8::from(e.relevant),
        });
        out.push_str(&record.to_string());
        out.push('\n');
    }
    out
}
