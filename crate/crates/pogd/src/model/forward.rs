//! Forward passes of the four modules and their combination.
//!
//! Span selection and the pointer's value lookup are argmax decisions made
//! on the host; they carry values but no gradient. Everything differentiable
//! runs on the tape through [`ModelRun`].

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Graph, Var};
use crate::corpus::Ontology;
use crate::embeddings::{EmbeddingError, WordTable};
use crate::model::attention::{additive_attention, additive_logits, AttentionSite};
use crate::model::lstm::{encode, BiLstm, LstmDir};
use crate::model::{ModelConfig, ModelError, Params};
use crate::scalar::Scalar;

/// A slot's value list with precomputed unit-norm embeddings.
#[derive(Debug, Clone)]
pub struct ValueSet {
    pub values: Vec<String>,
    pub embeddings: Vec<Vec<f32>>,
}

impl ValueSet {
    pub fn build(ontology: &Ontology, slot: &str, table: &WordTable) -> Result<Self, EmbeddingError> {
        let values = ontology
            .values(slot)
            .unwrap_or_default()
            .to_vec();
        let embeddings = values
            .iter()
            .map(|v| table.value_embedding(v))
            .collect::<Result<_, _>>()?;
        Ok(ValueSet { values, embeddings })
    }

    /// Value sets for every slot in the ontology, in ontology order.
    pub fn build_all(
        ontology: &Ontology,
        table: &WordTable,
    ) -> Result<IndexMap<String, ValueSet>, EmbeddingError> {
        ontology
            .slot_names()
            .map(|s| Ok((s.clone(), ValueSet::build(ontology, s, table)?)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Pointer,
    Generator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    Switcher,
    Classifier,
}

impl GateKind {
    fn prefix(self) -> &'static str {
        match self {
            GateKind::Switcher => "switcher",
            GateKind::Classifier => "classifier",
        }
    }
}

/// Pointer branch outputs. `u_cut` and `value_logits` are host values: the
/// span lookup is an indexing operation and carries no gradient.
#[derive(Debug, Clone)]
pub struct PointerOutput {
    pub scores_p1: Var,
    pub scores_p2: Var,
    pub span: (usize, usize),
    pub span_valid: bool,
    pub u_cut: Option<Vec<f64>>,
    pub value_logits: Option<Vec<f64>>,
    pub v_p: usize,
    pub c_p: Var,
}

#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub scores_v: Var,
    pub v_g: usize,
    pub c_g: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GateOutput {
    pub logit: Var,
    pub prob: Var,
}

#[derive(Debug, Clone)]
pub struct SlotForward {
    pub pointer: PointerOutput,
    pub generator: GeneratorOutput,
    pub switcher: GateOutput,
    pub classifier: GateOutput,
}

/// One tape plus handles to every bound parameter.
pub struct ModelRun<'a, S: Scalar> {
    pub graph: Graph<S>,
    pub config: &'a ModelConfig,
    bound: IndexMap<String, Var>,
}

impl<'a, S: Scalar> ModelRun<'a, S> {
    pub fn new(params: &Params<S>, config: &'a ModelConfig, train: bool) -> Self {
        let mut graph = Graph::new(train);
        let bound = params.bind(&mut graph);
        ModelRun {
            graph,
            config,
            bound,
        }
    }

    pub fn bound(&self) -> &IndexMap<String, Var> {
        &self.bound
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .bound
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' is not bound"))
    }

    pub fn slot_embedding(&self, slot: &str) -> Result<Var, ModelError> {
        self.bound
            .get(&Params::<S>::slot_row_name(slot))
            .copied()
            .ok_or_else(|| ModelError::UnknownSlot {
                slot: slot.to_string(),
            })
    }

    fn linear(&mut self, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let w = self.var(&format!("{prefix}.w"));
        let b = self.var(&format!("{prefix}.b"));
        let wx = self.graph.matvec(w, x)?;
        self.graph.add(wx, b).map_err(ModelError::from)
    }

    fn attention_site(&self, prefix: &str) -> AttentionSite {
        AttentionSite {
            proj_w: self.var(&format!("{prefix}.proj.w")),
            proj_b: self.var(&format!("{prefix}.proj.b")),
            v: self.var(&format!("{prefix}.v")),
        }
    }

    fn bilstm(&self, prefix: &str) -> BiLstm {
        let dir = |d: &str| LstmDir {
            w_ih: self.var(&format!("{prefix}.{d}.w_ih")),
            w_hh: self.var(&format!("{prefix}.{d}.w_hh")),
            b: self.var(&format!("{prefix}.{d}.b")),
        };
        BiLstm {
            fw: dir("fw"),
            bw: dir("bw"),
        }
    }

    /// Embed host rows as untracked constants on the tape.
    pub fn input_rows(&mut self, rows: &[Vec<f32>]) -> Vec<Var> {
        rows.iter()
            .map(|r| {
                let data = r.iter().map(|v| S::from_f64(f64::from(*v))).collect();
                self.graph.constant(Array::vector(data))
            })
            .collect()
    }

    /// Run the branch's BiLSTM over the input rows.
    pub fn encode_input(&mut self, xs: &[Var], branch: Branch) -> Result<Vec<Var>, ModelError> {
        let prefix = match branch {
            Branch::Pointer => "pointer.lstm",
            Branch::Generator if self.config.share_encoder => "pointer.lstm",
            Branch::Generator => "generator.lstm",
        };
        let weights = self.bilstm(prefix);
        encode(&mut self.graph, weights, self.config.d_h, xs)
    }

    /// Pointer: two attention heads pick a start and an end token; the word
    /// embeddings across that span (inclusive) are summed, normalized, and
    /// matched against the value embeddings by dot product.
    pub fn pointer_forward(
        &mut self,
        h: &[Var],
        raw_rows: &[Vec<f32>],
        slot_emb: Var,
        values: &ValueSet,
    ) -> Result<PointerOutput, ModelError> {
        let q1 = self.linear("pointer.slot_proj1", slot_emb)?;
        let site1 = self.attention_site("pointer.attn1");
        let (scores_p1, c1) = additive_attention(&mut self.graph, site1, q1, h)?;
        let q2 = self.linear("pointer.slot_proj2", slot_emb)?;
        let site2 = self.attention_site("pointer.attn2");
        let (scores_p2, c2) = additive_attention(&mut self.graph, site2, q2, h)?;
        let c_p = self.graph.add(c1, c2)?;

        let p1 = self.graph.value(scores_p1).argmax();
        let p2 = self.graph.value(scores_p2).argmax();
        let mut span_valid = p1 <= p2;

        let u_cut = if span_valid {
            let dim = raw_rows[0].len();
            let mut sum = vec![0.0f64; dim];
            for row in &raw_rows[p1..=p2] {
                for (acc, v) in sum.iter_mut().zip(row.iter()) {
                    *acc += f64::from(*v);
                }
            }
            let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut sum {
                    *v /= norm;
                }
                Some(sum)
            } else {
                span_valid = false;
                None
            }
        } else {
            None
        };

        let value_logits = u_cut.as_ref().map(|u| {
            values
                .embeddings
                .iter()
                .map(|e| u.iter().zip(e.iter()).map(|(a, b)| a * f64::from(*b)).sum())
                .collect::<Vec<f64>>()
        });
        let v_p = value_logits
            .as_ref()
            .map(|l| {
                let mut best = 0;
                for (i, v) in l.iter().enumerate() {
                    if *v > l[best] {
                        best = i;
                    }
                }
                best
            })
            .unwrap_or(0);

        Ok(PointerOutput {
            scores_p1,
            scores_p2,
            span: (p1, p2),
            span_valid,
            u_cut,
            value_logits,
            v_p,
            c_p,
        })
    }

    /// Generator: attend over the generator encoding with the projected
    /// slot as query, optionally map the context into word-embedding space,
    /// then score every ontology value with a second additive attention.
    pub fn generator_forward(
        &mut self,
        h: &[Var],
        slot_emb: Var,
        values: &ValueSet,
    ) -> Result<GeneratorOutput, ModelError> {
        let q = self.linear("generator.slot_proj", slot_emb)?;
        let site = self.attention_site("generator.attn");
        let (_, c_g) = additive_attention(&mut self.graph, site, q, h)?;

        let query = if self.config.use_mlp_g {
            let hidden = self.linear("generator.mlp.h", c_g)?;
            let activated = self.graph.relu(hidden);
            self.linear("generator.mlp.out", activated)?
        } else {
            c_g
        };

        let value_rows = self.input_rows(&values.embeddings);
        let value_site = self.attention_site("generator.value_attn");
        let logits = additive_logits(&mut self.graph, value_site, query, &value_rows)?;
        let scores_v = self.graph.softmax(logits)?;
        let v_g = self.graph.value(scores_v).argmax();

        Ok(GeneratorOutput { scores_v, v_g, c_g })
    }

    /// A relevance or routing gate: both contexts plus the projected slot
    /// feed a small ReLU stack with dropout before the sigmoid output.
    /// `detach_inputs` blocks gradient flow into the contexts and the slot
    /// row, leaving only this gate's own parameters trainable.
    pub fn gate_forward(
        &mut self,
        kind: GateKind,
        c_g: Var,
        c_p: Var,
        slot_emb: Var,
        detach_inputs: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<GateOutput, ModelError> {
        let (c_g, c_p, slot_emb) = if detach_inputs {
            (
                self.graph.detach(c_g),
                self.graph.detach(c_p),
                self.graph.detach(slot_emb),
            )
        } else {
            (c_g, c_p, slot_emb)
        };
        let prefix = kind.prefix();
        let proj_s = self.linear(&format!("{prefix}.slot_proj"), slot_emb)?;
        let input = self.graph.concat(&[c_g, c_p, proj_s])?;
        let h0 = self.linear(&format!("{prefix}.mlp.h0"), input)?;
        let mut hidden = self.graph.relu(h0);
        if self.config.gate_hidden_depth == 2 {
            let h1 = self.linear(&format!("{prefix}.mlp.h1"), hidden)?;
            hidden = self.graph.relu(h1);
        }
        let dropped = self.graph.dropout(hidden, self.config.dropout, rng)?;
        let logit = self.linear(&format!("{prefix}.out"), dropped)?;
        let prob = self.graph.sigmoid(logit);
        Ok(GateOutput { logit, prob })
    }

    /// Full forward for one (utterance, slot) pair. On negative examples the
    /// classifier's inputs are detached so that irrelevance supervision
    /// trains only the classifier itself.
    #[allow(clippy::too_many_arguments)]
    pub fn slot_forward(
        &mut self,
        h_p: &[Var],
        h_g: &[Var],
        raw_rows: &[Vec<f32>],
        slot: &str,
        values: &ValueSet,
        negative: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<SlotForward, ModelError> {
        let slot_emb = self.slot_embedding(slot)?;
        let pointer = self.pointer_forward(h_p, raw_rows, slot_emb, values)?;
        let generator = self.generator_forward(h_g, slot_emb, values)?;
        let switcher = self.gate_forward(
            GateKind::Switcher,
            generator.c_g,
            pointer.c_p,
            slot_emb,
            false,
            rng,
        )?;
        let classifier = self.gate_forward(
            GateKind::Classifier,
            generator.c_g,
            pointer.c_p,
            slot_emb,
            negative,
            rng,
        )?;
        Ok(SlotForward {
            pointer,
            generator,
            switcher,
            classifier,
        })
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.graph.scalar_value(v).to_f64()
    }
}

/// Final output rule: the switcher picks the pointer's value only when its
/// probability clears the threshold AND the span is usable (otherwise the
/// generator's value is taken); the classifier then decides whether the
/// slot is expressed at all.
pub fn combine(
    v_p: usize,
    v_g: usize,
    switch_prob: f64,
    class_prob: f64,
    span_valid: bool,
    threshold: f64,
) -> Option<usize> {
    let use_pointer = switch_prob >= threshold && span_valid;
    let candidate = if use_pointer { v_p } else { v_g };
    if class_prob >= threshold {
        Some(candidate)
    } else {
        None
    }
}

/// Per-slot decision with the raw module outputs kept for diagnostics and
/// oracle-based evaluation modes.
#[derive(Debug, Clone)]
pub struct SlotDecision {
    pub v_p: usize,
    pub v_g: usize,
    pub switch_prob: f64,
    pub class_prob: f64,
    pub span_valid: bool,
    pub chosen: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TurnPrediction {
    pub slots: IndexMap<String, SlotDecision>,
    /// Worst softmax mass deviation observed while predicting this turn.
    pub max_softmax_deviation: f64,
}

pub const DECISION_THRESHOLD: f64 = 0.5;

/// Run the full model over every slot for one turn.
pub fn predict_turn(
    params: &Params<f32>,
    config: &ModelConfig,
    table: &WordTable,
    value_sets: &IndexMap<String, ValueSet>,
    tokens: &[String],
) -> Result<TurnPrediction, ModelError> {
    let raw_rows = table.embed_tokens(tokens);
    let mut run: ModelRun<f32> = ModelRun::new(params, config, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0); // dropout is identity in eval mode
    let inputs = run.input_rows(&raw_rows);
    let h_p = run.encode_input(&inputs, Branch::Pointer)?;
    let h_g = run.encode_input(&inputs, Branch::Generator)?;

    let mut slots = IndexMap::new();
    for (slot, values) in value_sets {
        let fwd = run.slot_forward(&h_p, &h_g, &raw_rows, slot, values, false, &mut rng)?;
        let switch_prob = run.scalar(fwd.switcher.prob);
        let class_prob = run.scalar(fwd.classifier.prob);
        let chosen = combine(
            fwd.pointer.v_p,
            fwd.generator.v_g,
            switch_prob,
            class_prob,
            fwd.pointer.span_valid,
            DECISION_THRESHOLD,
        );
        slots.insert(
            slot.clone(),
            SlotDecision {
                v_p: fwd.pointer.v_p,
                v_g: fwd.generator.v_g,
                switch_prob,
                class_prob,
                span_valid: fwd.pointer.span_valid,
                chosen,
            },
        );
    }
    Ok(TurnPrediction {
        slots,
        max_softmax_deviation: run.graph.max_softmax_deviation(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Ontology;
    use crate::model::test_config;
    use proptest::prelude::*;

    fn slot_list(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn tiny_values(n: usize, dim: usize) -> ValueSet {
        // Unit basis vectors: value j points along axis j.
        let values = (0..n).map(|i| format!("value{i}")).collect();
        let embeddings = (0..n)
            .map(|i| {
                let mut e = vec![0.0f32; dim];
                e[i % dim] = 1.0;
                e
            })
            .collect();
        ValueSet { values, embeddings }
    }

    /// Handcrafted encoder rows whose first coordinate increases with the
    /// token index, so attention heads with `v = ±k·e0` select the last or
    /// first position deterministically.
    fn ramp_rows(g: &mut Graph<f32>, n: usize, dim: usize) -> Vec<Var> {
        (0..n)
            .map(|t| {
                let mut data = vec![0.0f32; dim];
                data[0] = t as f32 / n as f32 - 0.5;
                g.constant(Array::vector(data))
            })
            .collect()
    }

    /// Zero every parameter, then rig the two pointer attention heads to
    /// pick fixed positions through the ramp rows: `sign > 0` favors later
    /// tokens, `sign < 0` earlier ones.
    fn rig_pointer_attention(params: &mut Params<f32>, sign1: f32, sign2: f32) {
        for (name, tensor) in params.map.iter_mut() {
            for v in &mut tensor.data {
                *v = 0.0;
            }
            if name == "pointer.attn1.proj.w" || name == "pointer.attn2.proj.w" {
                let d = tensor.shape[0];
                for i in 0..d {
                    tensor.data[i * d + i] = 1.0;
                }
            }
        }
        params.map["pointer.attn1.v"].data[0] = sign1 * 100.0;
        params.map["pointer.attn2.v"].data[0] = sign2 * 100.0;
    }

    #[test]
    fn rigged_one_hot_attention_points_at_gold_value() {
        let config = test_config();
        let mut params: Params<f32> = Params::init(&config, &slot_list(&["food"]), 1).unwrap();
        rig_pointer_attention(&mut params, 1.0, 1.0); // both heads pick the last token

        let mut run: ModelRun<f32> = ModelRun::new(&params, &config, false);
        let enc = config.enc_dim();
        let h = ramp_rows(&mut run.graph, 4, enc);
        // Token 3 carries the "thai" embedding e0; values are {thai: e0, chinese: e1}.
        let mut raw_rows = vec![vec![0.0f32; config.word_dim]; 4];
        raw_rows[3][0] = 1.0;
        let values = ValueSet {
            values: vec!["thai".to_string(), "chinese".to_string()],
            embeddings: vec![
                vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            ],
        };
        let slot_emb = run.slot_embedding("food").unwrap();
        let out = run.pointer_forward(&h, &raw_rows, slot_emb, &values).unwrap();

        assert_eq!(out.span, (3, 3));
        assert!(out.span_valid);
        // The winning softmax weight is effectively one-hot.
        assert!(run.graph.value(out.scores_p1).data[3] > 1.0 - 1e-6);
        assert_eq!(out.v_p, 0, "u_cut should match 'thai'");
    }

    #[test]
    fn inverted_span_disables_pointer() {
        let config = test_config();
        let mut params: Params<f32> = Params::init(&config, &slot_list(&["food"]), 1).unwrap();
        // Head 1 picks the last token, head 2 the first: start > end.
        rig_pointer_attention(&mut params, 1.0, -1.0);

        let mut run: ModelRun<f32> = ModelRun::new(&params, &config, false);
        let h = ramp_rows(&mut run.graph, 4, config.enc_dim());
        let raw_rows = vec![vec![1.0f32; config.word_dim]; 4];
        let values = tiny_values(2, config.word_dim);
        let slot_emb = run.slot_embedding("food").unwrap();
        let out = run.pointer_forward(&h, &raw_rows, slot_emb, &values).unwrap();

        assert_eq!(out.span, (3, 0));
        assert!(!out.span_valid);
        assert!(out.u_cut.is_none());
        assert!(out.value_logits.is_none());

        // The final combination must fall back to the generator's value.
        let chosen = combine(out.v_p, 1, 0.99, 0.99, out.span_valid, DECISION_THRESHOLD);
        assert_eq!(chosen, Some(1));
    }

    #[test]
    fn zero_word_rows_make_span_degenerate() {
        let config = test_config();
        let mut params: Params<f32> = Params::init(&config, &slot_list(&["food"]), 1).unwrap();
        rig_pointer_attention(&mut params, -1.0, 1.0); // valid ordering
        let mut run: ModelRun<f32> = ModelRun::new(&params, &config, false);
        let h = ramp_rows(&mut run.graph, 3, config.enc_dim());
        let raw_rows = vec![vec![0.0f32; config.word_dim]; 3];
        let values = tiny_values(2, config.word_dim);
        let slot_emb = run.slot_embedding("food").unwrap();
        let out = run.pointer_forward(&h, &raw_rows, slot_emb, &values).unwrap();
        assert!(!out.span_valid, "zero-sum span must be treated as invalid");
    }

    #[test]
    fn generator_scores_form_distribution_and_permute() {
        let config = test_config();
        let params: Params<f32> = Params::init(&config, &slot_list(&["food"]), 3).unwrap();
        let mut run: ModelRun<f32> = ModelRun::new(&params, &config, false);
        let h = ramp_rows(&mut run.graph, 5, config.enc_dim());
        let slot_emb = run.slot_embedding("food").unwrap();

        let values = tiny_values(4, config.word_dim);
        let out = run.generator_forward(&h, slot_emb, &values).unwrap();
        let p = run.graph.value(out.scores_v).data.clone();
        let mass: f32 = p.iter().sum();
        assert!((mass - 1.0).abs() < 1e-6);

        // Permuting the value rows permutes the scores identically.
        let permuted = ValueSet {
            values: vec![
                values.values[2].clone(),
                values.values[0].clone(),
                values.values[3].clone(),
                values.values[1].clone(),
            ],
            embeddings: vec![
                values.embeddings[2].clone(),
                values.embeddings[0].clone(),
                values.embeddings[3].clone(),
                values.embeddings[1].clone(),
            ],
        };
        let out_p = run.generator_forward(&h, slot_emb, &permuted).unwrap();
        let q = run.graph.value(out_p.scores_v).data.clone();
        for (orig, perm) in [(2usize, 0usize), (0, 1), (3, 2), (1, 3)] {
            assert!((p[orig] - q[perm]).abs() < 1e-6);
        }
        // The argmax follows the permutation, so the selected value string
        // is unchanged.
        assert_eq!(values.values[out.v_g], permuted.values[out_p.v_g]);
    }

    #[test]
    fn single_value_generator_is_certain() {
        let config = test_config();
        let params: Params<f32> = Params::init(&config, &slot_list(&["food"]), 3).unwrap();
        let mut run: ModelRun<f32> = ModelRun::new(&params, &config, false);
        let h = ramp_rows(&mut run.graph, 3, config.enc_dim());
        let slot_emb = run.slot_embedding("food").unwrap();
        let values = tiny_values(1, config.word_dim);
        let out = run.generator_forward(&h, slot_emb, &values).unwrap();
        assert_eq!(run.graph.value(out.scores_v).data, vec![1.0]);
        assert_eq!(out.v_g, 0);
    }

    #[test]
    fn zeroed_gate_outputs_one_half() {
        let config = test_config();
        let mut params: Params<f32> = Params::init(&config, &slot_list(&["food"]), 1).unwrap();
        for (name, tensor) in params.map.iter_mut() {
            if name.starts_with("switcher") {
                for v in &mut tensor.data {
                    *v = 0.0;
                }
            }
        }
        let mut run: ModelRun<f32> = ModelRun::new(&params, &config, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = config.enc_dim();
        let c_g = run.graph.constant(Array::vector(vec![0.3f32; enc]));
        let c_p = run.graph.constant(Array::vector(vec![-0.2f32; enc]));
        let slot_emb = run.slot_embedding("food").unwrap();
        let gate = run
            .gate_forward(GateKind::Switcher, c_g, c_p, slot_emb, false, &mut rng)
            .unwrap();
        assert_eq!(run.scalar(gate.prob), 0.5);
    }

    #[test]
    fn eval_gate_is_deterministic() {
        let config = test_config();
        let params: Params<f32> = Params::init(&config, &slot_list(&["food"]), 2).unwrap();
        let run_once = |seed: u64| -> f64 {
            let mut run: ModelRun<f32> = ModelRun::new(&params, &config, false);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let enc = config.enc_dim();
            let c_g = run.graph.constant(Array::vector(vec![0.5f32; enc]));
            let c_p = run.graph.constant(Array::vector(vec![0.1f32; enc]));
            let slot_emb = run.slot_embedding("food").unwrap();
            let gate = run
                .gate_forward(GateKind::Classifier, c_g, c_p, slot_emb, false, &mut rng)
                .unwrap();
            run.scalar(gate.prob)
        };
        // Different dropout RNGs cannot matter in eval mode.
        assert_eq!(run_once(1), run_once(999));
    }

    #[test]
    fn combine_follows_the_gating_rules() {
        // Pointer chosen when the switcher is confident and the span valid.
        assert_eq!(combine(0, 1, 0.9, 0.9, true, 0.5), Some(0));
        // Classifier below threshold suppresses any value.
        assert_eq!(combine(0, 1, 0.9, 0.1, true, 0.5), None);
        assert_eq!(combine(0, 1, 0.1, 0.1, false, 0.5), None);
        // Invalid span falls back to the generator despite the switcher.
        assert_eq!(combine(0, 1, 0.9, 0.9, false, 0.5), Some(1));
        // Threshold is inclusive.
        assert_eq!(combine(0, 1, 0.5, 0.5, true, 0.5), Some(0));
    }

    proptest! {
        #[test]
        fn combine_is_monotone_in_class_prob(
            v_p in 0usize..5,
            v_g in 0usize..5,
            switch_prob in 0.0f64..1.0,
            span_valid in proptest::bool::ANY,
            low in 0.0f64..0.5,
            high in 0.5f64..1.0,
        ) {
            let below = combine(v_p, v_g, switch_prob, low, span_valid, 0.5);
            let above = combine(v_p, v_g, switch_prob, high, span_valid, 0.5);
            prop_assert_eq!(below, None);
            prop_assert!(above.is_some());
            // Raising class_prob can only reveal the candidate, never
            // change which value it is.
            let above2 = combine(v_p, v_g, switch_prob, (high + 1.0) / 2.0, span_valid, 0.5);
            prop_assert_eq!(above, above2);
        }
    }

    #[test]
    fn predict_turn_with_suppressed_classifier_is_empty() {
        let config = test_config();
        let mut params: Params<f32> =
            Params::init(&config, &slot_list(&["food", "area", "price"]), 5).unwrap();
        params.map["classifier.out.b"].data[0] = -25.0;

        let table = WordTable::random(config.word_dim, 3);
        let mut slots = IndexMap::new();
        for s in ["food", "area", "price"] {
            slots.insert(s.to_string(), vec![format!("{s}_v0"), format!("{s}_v1")]);
        }
        let ontology = Ontology::from_slots(slots).unwrap();
        let value_sets = ValueSet::build_all(&ontology, &table).unwrap();
        let tokens: Vec<String> = ["i", "want", "food_v0"].iter().map(|s| s.to_string()).collect();
        let pred = predict_turn(&params, &config, &table, &value_sets, &tokens).unwrap();
        assert!(pred.slots.values().all(|d| d.chosen.is_none()));
        assert!(pred.max_softmax_deviation < 1e-6);
    }

    #[test]
    fn predict_turn_rigged_single_relevant_slot() {
        // Slot embeddings and the classifier are rigged so that exactly one
        // slot clears the relevance gate.
        let mut config = test_config();
        config.gate_hidden_depth = 1;
        let mut params: Params<f32> =
            Params::init(&config, &slot_list(&["food", "area", "price"]), 5).unwrap();

        for name in ["food", "area", "price"] {
            let row = &mut params.map[&format!("slot_table.{name}")];
            for v in &mut row.data {
                *v = 0.0;
            }
            row.data[0] = if name == "area" { 10.0 } else { -10.0 };
        }
        // classifier.slot_proj := identity so the slot row passes through.
        {
            let w = &mut params.map["classifier.slot_proj.w"];
            let d = w.shape[0];
            for v in &mut w.data {
                *v = 0.0;
            }
            for i in 0..d {
                w.data[i * d + i] = 1.0;
            }
        }
        // First hidden unit reads the first slot coordinate of the gate
        // input; the output neuron thresholds it.
        {
            let offset = 2 * config.enc_dim(); // c_g and c_p come first
            let h0 = &mut params.map["classifier.mlp.h0.w"];
            let cols = h0.shape[1];
            for v in &mut h0.data {
                *v = 0.0;
            }
            h0.data[offset] = 1.0;
            let _ = cols;
        }
        {
            let out = &mut params.map["classifier.out.w"];
            for v in &mut out.data {
                *v = 0.0;
            }
            out.data[0] = 1.0;
            params.map["classifier.out.b"].data[0] = -5.0;
        }

        let table = WordTable::random(config.word_dim, 3);
        let mut slots = IndexMap::new();
        for s in ["food", "area", "price"] {
            slots.insert(s.to_string(), vec![format!("{s}_v0"), format!("{s}_v1")]);
        }
        let ontology = Ontology::from_slots(slots).unwrap();
        let value_sets = ValueSet::build_all(&ontology, &table).unwrap();
        let tokens: Vec<String> = ["north", "part", "please"].iter().map(|s| s.to_string()).collect();
        let pred = predict_turn(&params, &config, &table, &value_sets, &tokens).unwrap();

        let informed: Vec<&String> = pred
            .slots
            .iter()
            .filter(|(_, d)| d.chosen.is_some())
            .map(|(s, _)| s)
            .collect();
        assert_eq!(informed, ["area"]);
    }
}
