//! The tracker model: two BiLSTM encoders, the Pointer / Generator /
//! Switcher / Classifier modules, output combination, and checkpointing.

pub mod attention;
pub mod checkpoint;
pub mod forward;
pub mod lstm;
pub mod verify;

use std::fmt;

use indexmap::IndexMap;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, GraphError, Var};
use crate::scalar::Scalar;

#[derive(Debug)]
pub enum ModelError {
    Config { message: String },
    Graph(GraphError),
    EmptyInput,
    UnknownSlot { slot: String },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config { message } => write!(f, "model config: {message}"),
            ModelError::Graph(e) => write!(f, "graph: {e}"),
            ModelError::EmptyInput => write!(f, "cannot encode an empty token sequence"),
            ModelError::UnknownSlot { slot } => write!(f, "unknown slot '{slot}'"),
        }
    }
}

impl std::error::Error for ModelError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ModelError::Graph(e) => Some(e),
            _ => None,
        }
    }
}

impl From<GraphError> for ModelError {
    fn from(e: GraphError) -> Self {
        ModelError::Graph(e)
    }
}

/// Architecture hyper-parameters. All modules share these; per-slot state
/// lives only in the slot embedding table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Word-embedding width (also the width of value embeddings).
    pub word_dim: usize,
    /// Slot-embedding width.
    pub slot_dim: usize,
    /// Hidden size of each LSTM direction; encodings are `2 * d_h` wide.
    pub d_h: usize,
    /// Hidden ReLU layers in each gate (1 or 2).
    pub gate_hidden_depth: usize,
    /// Map the generator context into word-embedding space through a
    /// two-layer ReLU MLP. Without it, `2 * d_h` must equal `word_dim`.
    pub use_mlp_g: bool,
    /// Share one encoder between the pointer and generator branches.
    pub share_encoder: bool,
    /// Dropout rate applied after each gate's hidden stack in train mode.
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.word_dim == 0 || self.slot_dim == 0 || self.d_h == 0 {
            return Err(ModelError::Config {
                message: "dimensions must be positive".to_string(),
            });
        }
        if !(1..=2).contains(&self.gate_hidden_depth) {
            return Err(ModelError::Config {
                message: format!(
                    "gate_hidden_depth must be 1 or 2, got {}",
                    self.gate_hidden_depth
                ),
            });
        }
        if !self.use_mlp_g && 2 * self.d_h != self.word_dim {
            return Err(ModelError::Config {
                message: format!(
                    "without the generator MLP, 2*d_h ({}) must equal word_dim ({})",
                    2 * self.d_h,
                    self.word_dim
                ),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config {
                message: format!("dropout {} outside [0, 1)", self.dropout),
            });
        }
        Ok(())
    }

    /// Encoder output width per token.
    pub fn enc_dim(&self) -> usize {
        2 * self.d_h
    }

    /// Width of the gates' input: generator context, pointer context, and
    /// the projected slot embedding.
    pub fn gate_input_dim(&self) -> usize {
        2 * self.enc_dim() + self.slot_dim
    }
}

pub const SLOT_TABLE_PREFIX: &str = "slot_table.";

/// All trainable tensors, keyed by hierarchical names. Insertion order is
/// fixed by construction, which makes initialization, checkpoints, and
/// optimizer traversal deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S: Scalar> {
    pub map: IndexMap<String, Array<S>>,
}

struct Init<'r, S: Scalar> {
    rng: &'r mut ChaCha8Rng,
    map: IndexMap<String, Array<S>>,
}

impl<S: Scalar> Init<'_, S> {
    fn uniform(&mut self, n: usize, bound: f64) -> Vec<S> {
        let dist = Uniform::new_inclusive(-bound, bound);
        (0..n)
            .map(|_| S::from_f64(dist.sample(self.rng)))
            .collect()
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) {
        let bound = 1.0 / (cols as f64).sqrt();
        let data = self.uniform(rows * cols, bound);
        self.map
            .insert(name.to_string(), Array::matrix(rows, cols, data));
    }

    fn zeros(&mut self, name: &str, n: usize) {
        self.map.insert(name.to_string(), Array::zeros(vec![n]));
    }

    fn vector(&mut self, name: &str, n: usize) {
        let bound = 1.0 / (n as f64).sqrt();
        let data = self.uniform(n, bound);
        self.map.insert(name.to_string(), Array::vector(data));
    }

    fn linear(&mut self, name: &str, out: usize, input: usize) {
        self.matrix(&format!("{name}.w"), out, input);
        self.zeros(&format!("{name}.b"), out);
    }

    fn attention(&mut self, name: &str, dim: usize) {
        self.linear(&format!("{name}.proj"), dim, dim);
        self.vector(&format!("{name}.v"), dim);
    }

    fn lstm(&mut self, name: &str, d_h: usize, input: usize) {
        for dir in ["fw", "bw"] {
            self.matrix(&format!("{name}.{dir}.w_ih"), 4 * d_h, input);
            self.matrix(&format!("{name}.{dir}.w_hh"), 4 * d_h, d_h);
            // Combined bias; the forget-gate block starts at 1 so early
            // training does not wash out the cell state.
            let mut b = vec![S::ZERO; 4 * d_h];
            for v in b.iter_mut().take(2 * d_h).skip(d_h) {
                *v = S::ONE;
            }
            self.map
                .insert(format!("{name}.{dir}.b"), Array::vector(b));
        }
    }

    fn gate(&mut self, name: &str, config: &ModelConfig) {
        self.linear(&format!("{name}.slot_proj"), config.slot_dim, config.slot_dim);
        self.linear(
            &format!("{name}.mlp.h0"),
            config.d_h,
            config.gate_input_dim(),
        );
        if config.gate_hidden_depth == 2 {
            self.linear(&format!("{name}.mlp.h1"), config.d_h, config.d_h);
        }
        self.linear(&format!("{name}.out"), 1, config.d_h);
    }
}

impl<S: Scalar> Params<S> {
    /// Initialize every tensor from `seed`, in a fixed order. Slot rows are
    /// created last (and draw Uniform(−0.1, 0.1)), so the non-slot inventory
    /// is independent of the ontology.
    pub fn init(config: &ModelConfig, slots: &[String], seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            map: IndexMap::new(),
        };
        let enc = config.enc_dim();

        init.lstm("pointer.lstm", config.d_h, config.word_dim);
        init.linear("pointer.slot_proj1", enc, config.slot_dim);
        init.linear("pointer.slot_proj2", enc, config.slot_dim);
        init.attention("pointer.attn1", enc);
        init.attention("pointer.attn2", enc);

        if !config.share_encoder {
            init.lstm("generator.lstm", config.d_h, config.word_dim);
        }
        init.linear("generator.slot_proj", enc, config.slot_dim);
        init.attention("generator.attn", enc);
        if config.use_mlp_g {
            init.linear("generator.mlp.h", 2 * config.word_dim, enc);
            init.linear("generator.mlp.out", config.word_dim, 2 * config.word_dim);
        }
        init.attention("generator.value_attn", config.word_dim);

        init.gate("switcher", config);
        init.gate("classifier", config);

        for slot in slots {
            let data = init.uniform(config.slot_dim, 0.1);
            init.map
                .insert(format!("{SLOT_TABLE_PREFIX}{slot}"), Array::vector(data));
        }
        Ok(Params { map: init.map })
    }

    pub fn get(&self, name: &str) -> &Array<S> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not present"))
    }

    pub fn slot_row_name(slot: &str) -> String {
        format!("{SLOT_TABLE_PREFIX}{slot}")
    }

    pub fn has_slot(&self, slot: &str) -> bool {
        self.map.contains_key(&Self::slot_row_name(slot))
    }

    pub fn slot_names(&self) -> Vec<String> {
        self.map
            .keys()
            .filter_map(|k| k.strip_prefix(SLOT_TABLE_PREFIX))
            .map(str::to_string)
            .collect()
    }

    /// Add a slot row initialized from a fresh seed (random strategy).
    pub fn add_slot_random(&mut self, slot: &str, slot_dim: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new_inclusive(-0.1, 0.1);
        let data = (0..slot_dim)
            .map(|_| S::from_f64(dist.sample(&mut rng)))
            .collect();
        self.map
            .insert(Self::slot_row_name(slot), Array::vector(data));
    }

    /// Add a slot row by copying another slot's current embedding.
    pub fn add_slot_from(&mut self, slot: &str, source: &str) -> Result<(), ModelError> {
        let row = self
            .map
            .get(&Self::slot_row_name(source))
            .ok_or_else(|| ModelError::UnknownSlot {
                slot: source.to_string(),
            })?
            .clone();
        self.map.insert(Self::slot_row_name(slot), row);
        Ok(())
    }

    pub fn to_f64(&self) -> Params<f64> {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.map_to_f64()))
                .collect(),
        }
    }

    /// Bind every parameter as a gradient-tracked leaf on `graph`.
    pub fn bind(&self, graph: &mut Graph<S>) -> IndexMap<String, Var> {
        self.map
            .iter()
            .map(|(name, value)| (name.clone(), graph.leaf(value.clone(), true)))
            .collect()
    }
}

#[cfg(test)]
pub(crate) fn test_config() -> ModelConfig {
    ModelConfig {
        word_dim: 6,
        slot_dim: 4,
        d_h: 3,
        gate_hidden_depth: 2,
        use_mlp_g: true,
        share_encoder: false,
        dropout: 0.3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slots(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn inventory_is_independent_of_slot_count_except_slot_rows() {
        let config = test_config();
        let a: Params<f32> = Params::init(&config, &slots(&["food", "area"]), 1).unwrap();
        let b: Params<f32> = Params::init(&config, &slots(&["food", "area", "price"]), 1).unwrap();
        let non_slot = |p: &Params<f32>| -> Vec<String> {
            p.map
                .keys()
                .filter(|k| !k.starts_with(SLOT_TABLE_PREFIX))
                .cloned()
                .collect()
        };
        assert_eq!(non_slot(&a), non_slot(&b));
        assert_eq!(a.slot_names(), vec!["food", "area"]);
        assert_eq!(b.slot_names(), vec!["food", "area", "price"]);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let config = test_config();
        let a: Params<f32> = Params::init(&config, &slots(&["food"]), 9).unwrap();
        let b: Params<f32> = Params::init(&config, &slots(&["food"]), 9).unwrap();
        assert_eq!(a, b);
        let c: Params<f32> = Params::init(&config, &slots(&["food"]), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_follow_config() {
        let config = test_config();
        let p: Params<f32> = Params::init(&config, &slots(&["food"]), 1).unwrap();
        assert_eq!(p.get("pointer.lstm.fw.w_ih").shape, vec![12, 6]);
        assert_eq!(p.get("pointer.lstm.fw.w_hh").shape, vec![12, 3]);
        assert_eq!(p.get("pointer.slot_proj1.w").shape, vec![6, 4]);
        assert_eq!(p.get("pointer.attn1.v").shape, vec![6]);
        assert_eq!(p.get("generator.mlp.h.w").shape, vec![12, 6]);
        assert_eq!(p.get("generator.mlp.out.w").shape, vec![6, 12]);
        assert_eq!(p.get("generator.value_attn.proj.w").shape, vec![6, 6]);
        assert_eq!(p.get("switcher.mlp.h0.w").shape, vec![3, 16]);
        assert_eq!(p.get("switcher.mlp.h1.w").shape, vec![3, 3]);
        assert_eq!(p.get("switcher.out.w").shape, vec![1, 3]);
        assert_eq!(p.get("slot_table.food").shape, vec![4]);
    }

    #[test]
    fn forget_gate_bias_starts_at_one() {
        let config = test_config();
        let p: Params<f32> = Params::init(&config, &slots(&["food"]), 1).unwrap();
        let b = p.get("pointer.lstm.fw.b");
        let d = config.d_h;
        assert!(b.data[..d].iter().all(|v| *v == 0.0));
        assert!(b.data[d..2 * d].iter().all(|v| *v == 1.0));
        assert!(b.data[2 * d..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shared_encoder_drops_generator_lstm() {
        let mut config = test_config();
        config.share_encoder = true;
        let p: Params<f32> = Params::init(&config, &slots(&["food"]), 1).unwrap();
        assert!(!p.map.keys().any(|k| k.starts_with("generator.lstm")));
        assert!(p.map.keys().any(|k| k.starts_with("pointer.lstm")));
    }

    #[test]
    fn mismatched_generator_width_is_rejected() {
        let mut config = test_config();
        config.use_mlp_g = false; // 2*d_h = 6 = word_dim would be fine…
        config.word_dim = 7; // …but 7 is not.
        assert!(matches!(
            Params::<f32>::init(&config, &slots(&["food"]), 1),
            Err(ModelError::Config { .. })
        ));
        config.word_dim = 6;
        assert!(Params::<f32>::init(&config, &slots(&["food"]), 1).is_ok());
    }

    #[test]
    fn add_slot_from_copies_row_exactly() {
        let config = test_config();
        let mut p: Params<f32> = Params::init(&config, &slots(&["food"]), 1).unwrap();
        p.add_slot_from("cuisine", "food").unwrap();
        assert_eq!(p.get("slot_table.cuisine"), p.get("slot_table.food"));
        assert!(matches!(
            p.add_slot_from("x", "nope"),
            Err(ModelError::UnknownSlot { .. })
        ));
    }
}
