//! Whole-model gradient verification.
//!
//! Builds a small but complete forward pass — both encoders, all four
//! attention sites, the generator MLP, both gates at depth 2, and the slot
//! embedding table — sums the five training losses over pointing and
//! generating examples for two slots, and compares every parameter's
//! analytic gradient against central finite differences in f64.
//!
//! Negative examples are deliberately absent: their loss detaches its
//! inputs, so it is not a differentiable function of the non-classifier
//! parameters, and finite differences would disagree with the (intended)
//! zero analytic gradient. The negatives-only contract is covered by the
//! bit-exact isolation tests instead.

use indexmap::IndexMap;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check_gradients, GradCheckReport};
use crate::autodiff::graph::Var;
use crate::embeddings::WordTable;
use crate::labelgen::{SwitcherLabel, TrainingExample};
use crate::model::forward::{ModelRun, ValueSet};
use crate::model::{ModelConfig, ModelError, Params};
use crate::training::{compute_losses, TrainError};

fn verify_config() -> ModelConfig {
    // Wide enough that no gate's ReLU stack goes completely dead on the
    // fixture (which would make parts of the check vacuous), small enough
    // that probing every tensor stays fast.
    ModelConfig {
        word_dim: 6,
        slot_dim: 4,
        d_h: 6,
        gate_hidden_depth: 2,
        use_mlp_g: true,
        share_encoder: false,
        dropout: 0.0,
    }
}

/// Initialized parameters jittered off their exact starting point.
///
/// Zero-initialized biases put ReLU pre-activations exactly at the kink,
/// where central differences straddle the corner and legitimately disagree
/// with the tape's zero subgradient. Checking at a generic nearby point
/// verifies the same derivative code without that artifact.
fn generic_params(config: &ModelConfig, slots: &[String], seed: u64) -> Result<Params<f64>, ModelError> {
    let mut params: Params<f64> = Params::init(config, slots, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let jitter = Uniform::new_inclusive(-0.05f64, 0.05);
    for tensor in params.map.values_mut() {
        for v in tensor.data.iter_mut() {
            *v += jitter.sample(&mut rng);
        }
    }
    Ok(params)
}

fn value_set(table: &WordTable, values: &[&str]) -> Result<ValueSet, ModelError> {
    let values: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    let embeddings = values
        .iter()
        .map(|v| table.value_embedding(v))
        .collect::<Result<_, _>>()
        .map_err(|e: crate::embeddings::EmbeddingError| ModelError::Config {
            message: e.to_string(),
        })?;
    Ok(ValueSet { values, embeddings })
}

fn fixture_examples() -> Vec<TrainingExample> {
    let tokens: Vec<String> = ["<usr>", "i", "would", "like", "thai", "food", "please"]
        .iter()
        .map(|t| t.to_string())
        .collect();
    vec![
        TrainingExample {
            dialogue_id: 1,
            turn_index: 0,
            tokens: tokens.clone(),
            slot: "food".to_string(),
            value: Some("thai".to_string()),
            value_index: Some(0),
            span: Some((4, 4)),
            switcher: Some(SwitcherLabel::Point),
            relevant: true,
            is_negative: false,
        },
        TrainingExample {
            dialogue_id: 1,
            turn_index: 0,
            tokens: tokens.clone(),
            slot: "food".to_string(),
            value: Some("dontcare".to_string()),
            value_index: Some(2),
            span: None,
            switcher: Some(SwitcherLabel::Generate),
            relevant: true,
            is_negative: false,
        },
        TrainingExample {
            dialogue_id: 1,
            turn_index: 0,
            tokens,
            slot: "area".to_string(),
            value: Some("dontcare".to_string()),
            value_index: Some(2),
            span: None,
            switcher: Some(SwitcherLabel::Generate),
            relevant: true,
            is_negative: false,
        },
    ]
}

/// The summed multi-task loss of the verification fixture under `params`.
fn fixture_total<'a>(
    params: &Params<f64>,
    config: &'a ModelConfig,
    table: &WordTable,
    value_sets: &IndexMap<String, ValueSet>,
    examples: &[TrainingExample],
) -> Result<(ModelRun<'a, f64>, Var), TrainError> {
    // Evaluation mode: the fixture must be a deterministic function of the
    // parameters for finite differences to be meaningful (dropout carries
    // no parameters of its own).
    let mut run: ModelRun<'a, f64> = ModelRun::new(params, config, false);
    let raw_rows = table.embed_tokens(&examples[0].tokens);
    let xs = run.input_rows(&raw_rows);
    let h_p = run.encode_input(&xs, crate::model::forward::Branch::Pointer)?;
    let h_g = run.encode_input(&xs, crate::model::forward::Branch::Generator)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut total: Option<Var> = None;
    for ex in examples {
        let values = &value_sets[&ex.slot];
        let fwd = run.slot_forward(
            &h_p,
            &h_g,
            &raw_rows,
            &ex.slot,
            values,
            ex.is_negative,
            &mut rng,
        )?;
        let losses = compute_losses(
            &mut run.graph,
            ex,
            &fwd,
            values.values.len(),
            &[1.0, 1.0, 1.0, 1.0, 1.0],
        )?;
        total = Some(match total {
            None => losses.total,
            Some(t) => run.graph.add(t, losses.total).map_err(ModelError::from)?,
        });
    }
    Ok((run, total.expect("fixture has examples")))
}

/// Check every parameter group of the full model against central finite
/// differences at f64, probing at most `samples_per_param` elements per
/// tensor. Passing means max relative error < 1e-5.
pub fn full_gradcheck(seed: u64, samples_per_param: usize) -> Result<GradCheckReport, TrainError> {
    let config = verify_config();
    let table = WordTable::random(config.word_dim, seed);
    let slots = ["food".to_string(), "area".to_string()];
    let params = generic_params(&config, &slots, seed).map_err(TrainError::Model)?;

    let mut value_sets = IndexMap::new();
    value_sets.insert(
        "food".to_string(),
        value_set(&table, &["thai", "korean", "dontcare"]).map_err(TrainError::Model)?,
    );
    value_sets.insert(
        "area".to_string(),
        value_set(&table, &["north", "south", "dontcare"]).map_err(TrainError::Model)?,
    );
    let examples = fixture_examples();

    // Analytic gradients from one backward pass.
    let (mut run, total) = fixture_total(&params, &config, &table, &value_sets, &examples)?;
    run.graph.backward(total).map_err(ModelError::from)?;
    let mut analytic: IndexMap<String, Vec<f64>> = IndexMap::new();
    for (name, var) in run.bound() {
        let grad = run
            .graph
            .grad(*var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; params.get(name).numel()]);
        analytic.insert(name.clone(), grad);
    }

    let report = check_gradients(&params.map, &analytic, samples_per_param, |work| {
        let perturbed = Params { map: work.clone() };
        let (run, total) = fixture_total(&perturbed, &config, &table, &value_sets, &examples)
            .expect("fixture evaluation cannot fail after the reference pass");
        run.graph.scalar_value(total)
    });
    Ok(report)
}
