//! Dialogue corpus and ontology ingestion.
//!
//! Parses WoZ-style JSON corpora, derives per-turn goals from cumulative
//! belief states, and builds the model's input token sequence (system
//! utterance, a separator, then the user utterance).

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde_json::{json, Value};

/// Separator token inserted between the system and user utterances.
pub const USR_SEPARATOR: &str = "<usr>";

/// Reserved value meaning "the user does not care"; appended to every
/// slot's value list so it is always expressible.
pub const DONTCARE: &str = "dontcare";

#[derive(Debug)]
pub enum CorpusError {
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    Schema {
        dialogue: String,
        message: String,
    },
    Ontology {
        message: String,
    },
}

impl fmt::Display for CorpusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusError::Io { path, source } => {
                write!(f, "cannot read {}: {source}", path.display())
            }
            CorpusError::Json { path, source } => {
                write!(f, "malformed JSON in {}: {source}", path.display())
            }
            CorpusError::Schema { dialogue, message } => {
                write!(f, "dialogue {dialogue}: {message}")
            }
            CorpusError::Ontology { message } => write!(f, "ontology: {message}"),
        }
    }
}

impl std::error::Error for CorpusError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CorpusError::Io { source, .. } => Some(source),
            CorpusError::Json { source, .. } => Some(source),
            _ => None,
        }
    }
}

type Result<T> = std::result::Result<T, CorpusError>;

/// One dialogue turn. `belief_state` is the cumulative gold state after
/// this turn, as a set of (slot, value) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub system_utterance: String,
    pub user_utterance: String,
    pub belief_state: BTreeSet<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: i64,
    pub turns: Vec<Turn>,
}

/// Slot-value pairs newly expressed at one turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnGoal {
    pub turn_index: usize,
    pub pairs: BTreeSet<(String, String)>,
}

/// Slot schema: each slot's admissible values, in file order, with
/// `dontcare` guaranteed present (appended when missing).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ontology {
    pub slots: IndexMap<String, Vec<String>>,
}

impl Ontology {
    pub fn from_slots(slots: IndexMap<String, Vec<String>>) -> Result<Self> {
        let mut out: IndexMap<String, Vec<String>> = IndexMap::new();
        for (slot, mut values) in slots {
            if values.is_empty() {
                return Err(CorpusError::Ontology {
                    message: format!("slot '{slot}' has an empty value list"),
                });
            }
            let mut seen = BTreeSet::new();
            for v in &values {
                if !seen.insert(v.clone()) {
                    return Err(CorpusError::Ontology {
                        message: format!("slot '{slot}' lists value '{v}' twice"),
                    });
                }
            }
            if !values.iter().any(|v| v == DONTCARE) {
                values.push(DONTCARE.to_string());
            }
            if out.insert(slot.clone(), values).is_some() {
                return Err(CorpusError::Ontology {
                    message: format!("slot '{slot}' declared twice"),
                });
            }
        }
        Ok(Ontology { slots: out })
    }

    pub fn slot_names(&self) -> impl Iterator<Item = &String> {
        self.slots.keys()
    }

    pub fn values(&self, slot: &str) -> Option<&[String]> {
        self.slots.get(slot).map(|v| v.as_slice())
    }

    pub fn value_index(&self, slot: &str, value: &str) -> Option<usize> {
        self.slots.get(slot)?.iter().position(|v| v == value)
    }
}

/// Lowercase, split on whitespace, and isolate the punctuation marks
/// `. , ? ! ' :` as their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    const PUNCT: [char; 6] = ['.', ',', '?', '!', '\'', ':'];
    let mut tokens = Vec::new();
    let mut buf = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !buf.is_empty() {
                tokens.push(std::mem::take(&mut buf));
            }
        } else if PUNCT.contains(&ch) {
            if !buf.is_empty() {
                tokens.push(std::mem::take(&mut buf));
            }
            tokens.push(ch.to_string());
        } else {
            for lc in ch.to_lowercase() {
                buf.push(lc);
            }
        }
    }
    if !buf.is_empty() {
        tokens.push(buf);
    }
    tokens
}

/// Model input sequence: system tokens, the separator, then user tokens.
pub fn concat_utterances(sys: &str, usr: &str) -> Vec<String> {
    let mut tokens = tokenize(sys);
    tokens.push(USR_SEPARATOR.to_string());
    tokens.extend(tokenize(usr));
    tokens
}

impl Turn {
    /// This turn's full input token sequence.
    pub fn input_tokens(&self) -> Vec<String> {
        concat_utterances(&self.system_utterance, &self.user_utterance)
    }
}

/// A matcher deciding whether a value's surface form occurs in a token
/// sequence; used by the optional first-occurrence correction.
pub type SpanMatcher<'a> = dyn Fn(&[String], &str) -> Option<(usize, usize)> + 'a;

/// Per-turn goals from cumulative belief states.
///
/// Turn 1's goal is its full state; a later turn's goal is the pairs absent
/// from every earlier state. When `first_occurrence` is given (training
/// splits of hand-annotated corpora only — never test data), a pair whose
/// value's surface form already matches at an earlier turn is moved to the
/// earliest such turn.
pub fn derive_turn_goals(d: &Dialogue, first_occurrence: Option<&SpanMatcher>) -> Vec<TurnGoal> {
    let mut goals: Vec<TurnGoal> = Vec::with_capacity(d.turns.len());
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    for (t, turn) in d.turns.iter().enumerate() {
        let pairs: BTreeSet<(String, String)> = turn
            .belief_state
            .difference(&seen)
            .cloned()
            .collect();
        seen.extend(turn.belief_state.iter().cloned());
        goals.push(TurnGoal {
            turn_index: t,
            pairs,
        });
    }

    if let Some(matcher) = first_occurrence {
        let token_cache: Vec<Vec<String>> = d.turns.iter().map(|t| t.input_tokens()).collect();
        for t in (1..goals.len()).rev() {
            let pairs: Vec<(String, String)> = goals[t].pairs.iter().cloned().collect();
            for pair in pairs {
                let first = (0..t).find(|&e| matcher(&token_cache[e], &pair.1).is_some());
                if let Some(earlier) = first {
                    goals[t].pairs.remove(&pair);
                    goals[earlier].pairs.insert(pair);
                }
            }
        }
    }
    goals
}

fn schema_err(dialogue: impl fmt::Display, message: impl Into<String>) -> CorpusError {
    CorpusError::Schema {
        dialogue: dialogue.to_string(),
        message: message.into(),
    }
}

fn get_str(obj: &Value, field: &str, dialogue: impl fmt::Display) -> Result<String> {
    obj.get(field)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| schema_err(dialogue, format!("missing or non-string field \"{field}\"")))
}

fn parse_dialogue(value: &Value, position: usize) -> Result<Dialogue> {
    let obj = value
        .as_object()
        .ok_or_else(|| schema_err(format!("#{position}"), "record is not an object"))?;
    let id = obj
        .get("dialogue_idx")
        .and_then(Value::as_i64)
        .ok_or_else(|| schema_err(format!("#{position}"), "missing integer \"dialogue_idx\""))?;
    let turns_raw = obj
        .get("dialogue")
        .and_then(Value::as_array)
        .ok_or_else(|| schema_err(id, "missing array field \"dialogue\""))?;
    if turns_raw.is_empty() {
        return Err(schema_err(id, "dialogue has no turns"));
    }
    let mut turns = Vec::with_capacity(turns_raw.len());
    for t in turns_raw {
        let system_utterance = get_str(t, "system_transcript", id)?;
        let user_utterance = get_str(t, "transcript", id)?;
        let bs_raw = t
            .get("belief_state")
            .and_then(Value::as_array)
            .ok_or_else(|| schema_err(id, "missing array field \"belief_state\""))?;
        let mut belief_state = BTreeSet::new();
        for pair in bs_raw {
            let slot = get_str(pair, "slot", id)?;
            let value = get_str(pair, "value", id)?;
            belief_state.insert((slot, value));
        }
        turns.push(Turn {
            system_utterance,
            user_utterance,
            belief_state,
        });
    }
    Ok(Dialogue { id, turns })
}

pub fn parse_corpus(text: &str, path: &Path) -> Result<Vec<Dialogue>> {
    let root: Value = serde_json::from_str(text).map_err(|source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let records = root
        .as_array()
        .ok_or_else(|| schema_err("<root>", "top level is not an array"))?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| parse_dialogue(r, i))
        .collect()
}

pub fn load_corpus(path: &Path) -> Result<Vec<Dialogue>> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(&text, path)
}

/// Render dialogues back into the corpus JSON schema (canonical form:
/// belief-state pairs in sorted order, pretty-printed).
pub fn serialize_corpus(dialogues: &[Dialogue]) -> String {
    let records: Vec<Value> = dialogues
        .iter()
        .map(|d| {
            json!({
                "dialogue_idx": d.id,
                "dialogue": d.turns.iter().map(|t| json!({
                    "system_transcript": t.system_utterance,
                    "transcript": t.user_utterance,
                    "belief_state": t.belief_state.iter().map(|(s, v)| json!({
                        "slot": s,
                        "value": v,
                    })).collect::<Vec<_>>(),
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    serde_json::to_string_pretty(&Value::Array(records)).expect("corpus JSON is serializable")
}

pub fn load_ontology(path: &Path) -> Result<Ontology> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let root: Value = serde_json::from_str(&text).map_err(|source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let slots_raw = root
        .get("slots")
        .and_then(Value::as_object)
        .ok_or_else(|| CorpusError::Ontology {
            message: "missing object field \"slots\"".to_string(),
        })?;
    let mut slots = IndexMap::new();
    for (name, values) in slots_raw {
        let list = values.as_array().ok_or_else(|| CorpusError::Ontology {
            message: format!("slot '{name}' is not an array of values"),
        })?;
        let mut parsed = Vec::with_capacity(list.len());
        for v in list {
            parsed.push(
                v.as_str()
                    .ok_or_else(|| CorpusError::Ontology {
                        message: format!("slot '{name}' has a non-string value"),
                    })?
                    .to_string(),
            );
        }
        slots.insert(name.clone(), parsed);
    }
    Ontology::from_slots(slots)
}

pub fn serialize_ontology(ontology: &Ontology) -> String {
    let slots: serde_json::Map<String, Value> = ontology
        .slots
        .iter()
        .map(|(k, v)| (k.clone(), json!(v)))
        .collect();
    serde_json::to_string_pretty(&json!({ "slots": slots })).expect("ontology is serializable")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs(entries: &[(&str, &str)]) -> BTreeSet<(String, String)> {
        entries
            .iter()
            .map(|(s, v)| (s.to_string(), v.to_string()))
            .collect()
    }

    fn turn(sys: &str, usr: &str, state: &[(&str, &str)]) -> Turn {
        Turn {
            system_utterance: sys.to_string(),
            user_utterance: usr.to_string(),
            belief_state: pairs(state),
        }
    }

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("Thai food."), vec!["thai", "food", "."]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("don't"), vec!["don", "'", "t"]);
        assert_eq!(tokenize("a:b,c"), vec!["a", ":", "b", ",", "c"]);
    }

    #[test]
    fn concat_inserts_separator() {
        assert_eq!(concat_utterances("", "hello"), vec![USR_SEPARATOR, "hello"]);
        assert_eq!(
            concat_utterances("what food ?", "thai food"),
            vec!["what", "food", "?", USR_SEPARATOR, "thai", "food"]
        );
        assert_eq!(concat_utterances("", ""), vec![USR_SEPARATOR]);
    }

    #[test]
    fn turn_goals_are_set_differences() {
        let d = Dialogue {
            id: 1,
            turns: vec![
                turn("", "thai please", &[("food", "thai")]),
                turn("ok", "north side", &[("food", "thai"), ("area", "north")]),
            ],
        };
        let goals = derive_turn_goals(&d, None);
        assert_eq!(goals[0].pairs, pairs(&[("food", "thai")]));
        assert_eq!(goals[1].pairs, pairs(&[("area", "north")]));
    }

    #[test]
    fn single_turn_goal_equals_state() {
        let d = Dialogue {
            id: 2,
            turns: vec![turn("", "cheap thai", &[("food", "thai"), ("price", "cheap")])],
        };
        let goals = derive_turn_goals(&d, None);
        assert_eq!(goals[0].pairs, d.turns[0].belief_state);
    }

    #[test]
    fn changed_value_appears_in_later_goal() {
        let d = Dialogue {
            id: 3,
            turns: vec![
                turn("", "thai", &[("food", "thai")]),
                turn("none found", "chinese then", &[("food", "chinese")]),
            ],
        };
        let goals = derive_turn_goals(&d, None);
        assert_eq!(goals[1].pairs, pairs(&[("food", "chinese")]));
    }

    #[test]
    fn first_occurrence_correction_moves_pairs_earlier() {
        // "north" is uttered at turn 0 but annotated at turn 1; with the
        // matcher enabled the pair moves to turn 0.
        let d = Dialogue {
            id: 4,
            turns: vec![
                turn("", "somewhere in the north", &[]),
                turn("which area ?", "i said north", &[("area", "north")]),
            ],
        };
        let matcher = |tokens: &[String], value: &str| -> Option<(usize, usize)> {
            tokens.iter().position(|t| t == value).map(|i| (i, i))
        };
        let goals = derive_turn_goals(&d, Some(&matcher));
        assert_eq!(goals[0].pairs, pairs(&[("area", "north")]));
        assert!(goals[1].pairs.is_empty());

        let untouched = derive_turn_goals(&d, None);
        assert!(untouched[0].pairs.is_empty());
        assert_eq!(untouched[1].pairs, pairs(&[("area", "north")]));
    }

    #[test]
    fn corpus_parses_and_round_trips() {
        let text = r#"[
            {"dialogue_idx": 7, "dialogue": [
                {"system_transcript": "", "transcript": "thai food",
                 "belief_state": [{"slot": "food", "value": "thai"}]},
                {"system_transcript": "where ?", "transcript": "north",
                 "belief_state": [{"slot": "food", "value": "thai"},
                                  {"slot": "area", "value": "north"}]}
            ]}
        ]"#;
        let dialogues = parse_corpus(text, Path::new("fixture.json")).unwrap();
        assert_eq!(dialogues.len(), 1);
        assert_eq!(dialogues[0].id, 7);
        assert_eq!(dialogues[0].turns.len(), 2);
        assert_eq!(dialogues[0].turns[1].system_utterance, "where ?");
        assert_eq!(
            dialogues[0].turns[0].belief_state,
            pairs(&[("food", "thai")])
        );

        // Serialization is a fixed point: serialize → parse → serialize
        // yields the same bytes.
        let s1 = serialize_corpus(&dialogues);
        let reparsed = parse_corpus(&s1, Path::new("fixture.json")).unwrap();
        assert_eq!(reparsed, dialogues);
        assert_eq!(serialize_corpus(&reparsed), s1);
    }

    #[test]
    fn empty_corpus_is_empty() {
        assert!(parse_corpus("[]", Path::new("x.json")).unwrap().is_empty());
    }

    #[test]
    fn missing_transcript_names_field_and_dialogue() {
        let text = r#"[{"dialogue_idx": 9, "dialogue": [
            {"system_transcript": "", "belief_state": []}
        ]}]"#;
        let err = parse_corpus(text, Path::new("x.json")).unwrap_err();
        match err {
            CorpusError::Schema { dialogue, message } => {
                assert_eq!(dialogue, "9");
                assert!(message.contains("transcript"), "message: {message}");
            }
            other => panic!("expected schema error, got {other}"),
        }
    }

    #[test]
    fn malformed_json_is_a_distinct_error() {
        let err = parse_corpus("[{", Path::new("x.json")).unwrap_err();
        assert!(matches!(err, CorpusError::Json { .. }));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_corpus(Path::new("/nonexistent/corpus.json")).unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn ontology_appends_dontcare_and_rejects_duplicates() {
        let mut slots = IndexMap::new();
        slots.insert("food".to_string(), vec!["thai".to_string()]);
        let ont = Ontology::from_slots(slots).unwrap();
        assert_eq!(ont.values("food").unwrap(), ["thai", DONTCARE]);
        assert_eq!(ont.value_index("food", DONTCARE), Some(1));

        let mut dup = IndexMap::new();
        dup.insert(
            "food".to_string(),
            vec!["thai".to_string(), "thai".to_string()],
        );
        assert!(matches!(
            Ontology::from_slots(dup),
            Err(CorpusError::Ontology { .. })
        ));
    }

    #[test]
    fn ontology_keeps_existing_dontcare_position() {
        let mut slots = IndexMap::new();
        slots.insert(
            "price".to_string(),
            vec![DONTCARE.to_string(), "cheap".to_string()],
        );
        let ont = Ontology::from_slots(slots).unwrap();
        assert_eq!(ont.values("price").unwrap(), [DONTCARE, "cheap"]);
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(text in "[a-zA-Z ,.?!':]{0,40}") {
            let once = tokenize(&text);
            let again = tokenize(&once.join(" "));
            prop_assert_eq!(once, again);
        }

        #[test]
        fn goals_reconstruct_cumulative_states(
            adds in proptest::collection::vec(
                proptest::collection::vec((0usize..4, 0usize..5), 0..3),
                1..6,
            )
        ) {
            // Build a monotone (purely additive) belief sequence.
            let slots = ["food", "area", "price", "name"];
            let mut state = BTreeSet::new();
            let mut turns = Vec::new();
            for turn_adds in &adds {
                for (s, v) in turn_adds {
                    state.insert((slots[*s].to_string(), format!("v{v}")));
                }
                turns.push(Turn {
                    system_utterance: String::new(),
                    user_utterance: "hello".to_string(),
                    belief_state: state.clone(),
                });
            }
            let d = Dialogue { id: 0, turns };
            let goals = derive_turn_goals(&d, None);
            let mut acc = BTreeSet::new();
            for (i, g) in goals.iter().enumerate() {
                acc.extend(g.pairs.iter().cloned());
                prop_assert_eq!(&acc, &d.turns[i].belief_state);
            }
        }
    }
}
