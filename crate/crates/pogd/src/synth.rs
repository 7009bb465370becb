//! Deterministic synthetic corpus generator.
//!
//! Produces small restaurant-domain dialogues whose vocabulary is built so
//! the weak-supervision matcher cannot misfire: every pair of distinct
//! ontology values, and every (template word, value) pair, is at edit
//! distance >= 3. Concrete values always appear verbatim in the utterance
//! (pointable); `dontcare` is only ever expressed indirectly and must be
//! generated from context.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dialogue, Ontology, Turn, DONTCARE};

const SYNTH_SALT: u64 = 0xc671_78f2_e372_532b;

/// Three slots with ten concrete single-token values each (`dontcare` is
/// appended by the ontology builder as the eleventh).
pub fn slot_inventory() -> IndexMap<String, Vec<String>> {
    let mut slots = IndexMap::new();
    slots.insert(
        "cuisine".to_string(),
        to_strings(&[
            "moroccan",
            "szechuan",
            "ethiopian",
            "lebanese",
            "vietnamese",
            "polish",
            "turkish",
            "mexican",
            "japanese",
            "korean",
        ]),
    );
    slots.insert(
        "district".to_string(),
        to_strings(&[
            "riverside",
            "hilltop",
            "downtown",
            "lakeshore",
            "midfield",
            "outskirts",
            "seafront",
            "gardens",
            "junction",
            "terrace",
        ]),
    );
    slots.insert(
        "pricing".to_string(),
        to_strings(&[
            "budget",
            "premium",
            "moderate",
            "luxury",
            "bargain",
            "standard",
            "economy",
            "upscale",
            "lavish",
            "frugal",
        ]),
    );
    slots
}

fn to_strings(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

/// Explicit templates mention the value verbatim; the implicit template
/// expresses indifference without any surface form of `dontcare`.
fn explicit_templates(slot: &str) -> &'static [&'static str] {
    match slot {
        "cuisine" => &[
            "i want {} style meals please",
            "find me a place serving {} dishes",
        ],
        "district" => &[
            "find me a spot in the {} part of town",
            "we will be around the {} area",
        ],
        "pricing" => &[
            "keep the cost at a {} level",
            "i am after {} dining",
        ],
        _ => unreachable!("unknown synthetic slot"),
    }
}

fn implicit_template(slot: &str) -> &'static str {
    match slot {
        "cuisine" => "any menu works for us",
        "district" => "anywhere in town suits us",
        "pricing" => "whatever it ends up costing is fine",
        _ => unreachable!("unknown synthetic slot"),
    }
}

const SYSTEM_LINES: [&str; 4] = ["", "ok noted", "got it", "and what else"];

pub struct SynthCorpus {
    pub dialogues: Vec<Dialogue>,
    pub ontology: Ontology,
}

/// Generate `n_dialogues` dialogues. Each informs 1-3 distinct slots, one
/// per turn; each informed pair is `dontcare` (implicit phrasing) with
/// probability `implicit_rate`, otherwise a uniformly drawn concrete value
/// mentioned verbatim.
pub fn generate(n_dialogues: usize, implicit_rate: f64, seed: u64) -> SynthCorpus {
    let inventory = slot_inventory();
    let ontology = Ontology::from_slots(inventory.clone())
        .expect("the built-in inventory is a valid ontology");
    let slot_names: Vec<&String> = inventory.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SYNTH_SALT);

    let mut dialogues = Vec::with_capacity(n_dialogues);
    for i in 0..n_dialogues {
        let n_slots = *[1usize, 2, 2, 3, 3]
            .choose(&mut rng)
            .expect("choice list is non-empty");
        let mut order = slot_names.clone();
        order.shuffle(&mut rng);
        order.truncate(n_slots);

        let mut state: BTreeSet<(String, String)> = BTreeSet::new();
        let mut turns = Vec::with_capacity(n_slots);
        for (t, slot) in order.iter().enumerate() {
            let implicit = rng.gen_bool(implicit_rate);
            let (value, user_utterance) = if implicit {
                (DONTCARE.to_string(), implicit_template(slot).to_string())
            } else {
                let value = inventory[*slot]
                    .choose(&mut rng)
                    .expect("every slot has values")
                    .clone();
                let template = explicit_templates(slot)
                    .choose(&mut rng)
                    .expect("every slot has templates");
                (value.clone(), template.replace("{}", &value))
            };
            state.insert(((*slot).clone(), value));
            let system_utterance = if t == 0 {
                String::new()
            } else {
                SYSTEM_LINES[1..]
                    .choose(&mut rng)
                    .expect("system lines exist")
                    .to_string()
            };
            turns.push(Turn {
                system_utterance,
                user_utterance,
                belief_state: state.clone(),
            });
        }
        dialogues.push(Dialogue {
            id: 1000 + i as i64,
            turns,
        });
    }
    SynthCorpus {
        dialogues,
        ontology,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{derive_turn_goals, parse_corpus, serialize_corpus};
    use crate::labelgen::{find_span, find_span_in_history, levenshtein};

    #[test]
    fn vocabulary_keeps_values_and_glue_separated() {
        // The fuzzy matcher fires at edit distance < 3, so label
        // correctness on this corpus requires that distinct values never
        // come close to each other or to any template token.
        let corpus = generate(50, 0.15, 99);
        let values: BTreeSet<String> = corpus
            .ontology
            .slots
            .values()
            .flatten()
            .cloned()
            .collect();
        let mut glue: BTreeSet<String> = BTreeSet::new();
        for d in &corpus.dialogues {
            for turn in &d.turns {
                for token in turn.input_tokens() {
                    if !values.contains(&token) {
                        glue.insert(token);
                    }
                }
            }
        }
        assert!(!glue.is_empty());
        for a in &values {
            for b in &values {
                if a != b {
                    assert!(
                        levenshtein(a, b) >= 3,
                        "values '{a}' and '{b}' are too close"
                    );
                }
            }
            for g in &glue {
                assert!(
                    levenshtein(a, g) >= 3,
                    "value '{a}' and template token '{g}' are too close"
                );
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(20, 0.15, 7);
        let b = generate(20, 0.15, 7);
        assert_eq!(a.dialogues, b.dialogues);
        let c = generate(20, 0.15, 8);
        assert_ne!(a.dialogues, c.dialogues);
    }

    #[test]
    fn implicit_rate_is_approximately_met() {
        let corpus = generate(300, 0.15, 3);
        let mut total = 0usize;
        let mut implicit = 0usize;
        for d in &corpus.dialogues {
            for goal in derive_turn_goals(d, None) {
                for (_, value) in &goal.pairs {
                    total += 1;
                    if value == DONTCARE {
                        implicit += 1;
                    }
                }
            }
        }
        let rate = implicit as f64 / total as f64;
        assert!(
            (rate - 0.15).abs() < 0.05,
            "implicit rate {rate} too far from 0.15 over {total} pairs"
        );
    }

    #[test]
    fn concrete_values_are_pointable_and_dontcare_is_not() {
        let corpus = generate(50, 0.15, 11);
        for d in &corpus.dialogues {
            let turn_tokens: Vec<Vec<String>> =
                d.turns.iter().map(|t| t.input_tokens()).collect();
            for goal in derive_turn_goals(d, None) {
                for (_, value) in &goal.pairs {
                    if value == DONTCARE {
                        assert!(
                            find_span_in_history(&turn_tokens, goal.turn_index, value).is_none(),
                            "dontcare must never be pointable"
                        );
                    } else {
                        let tokens = &turn_tokens[goal.turn_index];
                        let (s, e) = find_span(tokens, value)
                            .unwrap_or_else(|| panic!("'{value}' not found in {tokens:?}"));
                        assert_eq!(s, e, "values are single tokens");
                        assert_eq!(&tokens[s], value, "span must be verbatim");
                    }
                }
            }
        }
    }

    #[test]
    fn belief_states_accumulate_monotonically() {
        let corpus = generate(50, 0.15, 13);
        for d in &corpus.dialogues {
            for pair in d.turns.windows(2) {
                assert!(pair[0].belief_state.is_subset(&pair[1].belief_state));
            }
            assert!(!d.turns.is_empty());
            assert!(d.turns.len() <= 3);
        }
    }

    #[test]
    fn ontology_covers_the_corpus() {
        let corpus = generate(50, 0.15, 17);
        assert_eq!(corpus.ontology.slots.len(), 3);
        for values in corpus.ontology.slots.values() {
            assert_eq!(values.len(), 11, "ten concrete values plus dontcare");
        }
        for d in &corpus.dialogues {
            for turn in &d.turns {
                for (slot, value) in &turn.belief_state {
                    let known = corpus
                        .ontology
                        .values(slot)
                        .unwrap_or_else(|| panic!("unknown slot '{slot}'"));
                    assert!(known.contains(value), "value '{value}' missing from ontology");
                }
            }
        }
    }

    #[test]
    fn corpus_round_trips_through_json() {
        let corpus = generate(10, 0.15, 23);
        let text = serialize_corpus(&corpus.dialogues);
        let parsed = parse_corpus(&text, std::path::Path::new("synth")).unwrap();
        assert_eq!(parsed, corpus.dialogues);
    }
}
