//! Finite-difference gradient verification.
//!
//! The check perturbs individual parameter elements by ±ε, evaluates the
//! loss twice, and compares the central difference against the analytic
//! gradient from the tape. It runs in f64 so that the difference quotient
//! itself is trustworthy at ε = 1e-4.

use indexmap::IndexMap;

use crate::autodiff::array::Array;

pub const EPSILON: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;

/// Relative error with a floored denominator, so that comparisons between
/// two near-zero quantities do not blow up.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-2);
    (a - b).abs() / denom
}

/// One comparison between an analytic and a numeric partial derivative.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_relative_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }

    /// Entries that exceed the tolerance, worst first.
    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        let mut v: Vec<&GradCheckEntry> = self
            .entries
            .iter()
            .filter(|e| e.relative_error >= TOLERANCE)
            .collect();
        v.sort_by(|a, b| b.relative_error.total_cmp(&a.relative_error));
        v
    }
}

/// Check analytic gradients against central finite differences.
///
/// `loss` evaluates the scalar objective for the given parameters, and
/// `analytic` is the gradient produced by one backward pass at the unperturbed
/// parameters, keyed like `params`. At most `max_per_param` elements of each
/// tensor are probed (evenly strided) to keep large checks affordable.
pub fn check_gradients<F>(
    params: &IndexMap<String, Array<f64>>,
    analytic: &IndexMap<String, Vec<f64>>,
    max_per_param: usize,
    mut loss: F,
) -> GradCheckReport
where
    F: FnMut(&IndexMap<String, Array<f64>>) -> f64,
{
    let mut work = params.clone();
    let mut entries = Vec::new();
    let mut max_err = 0.0f64;

    for (name, tensor) in params {
        let grad = match analytic.get(name) {
            Some(g) => g,
            None => continue,
        };
        let n = tensor.numel();
        let stride = (n / max_per_param.max(1)).max(1);
        let mut idx = 0;
        while idx < n {
            let original = tensor.data[idx];

            work[name].data[idx] = original + EPSILON;
            let up = loss(&work);
            work[name].data[idx] = original - EPSILON;
            let down = loss(&work);
            work[name].data[idx] = original;

            let numeric = (up - down) / (2.0 * EPSILON);
            let err = relative_error(grad[idx], numeric);
            max_err = max_err.max(err);
            entries.push(GradCheckEntry {
                param: name.clone(),
                index: idx,
                analytic: grad[idx],
                numeric,
                relative_error: err,
            });
            idx += stride;
        }
    }

    GradCheckReport {
        checked: entries.len(),
        entries,
        max_relative_error: max_err,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::graph::{Graph, Var};

    #[test]
    fn relative_error_floors_denominator() {
        // Two tiny values compare through the 1e-2 floor, not through their
        // own magnitudes.
        assert!(relative_error(1e-9, 2e-9) < 1e-6);
        assert!(relative_error(1.0, 1.0) == 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let mut params: IndexMap<String, Array<f64>> = IndexMap::new();
        params.insert("x".to_string(), Array::vector(vec![1.5]));
        let mut wrong: IndexMap<String, Vec<f64>> = IndexMap::new();
        wrong.insert("x".to_string(), vec![1.0]); // true gradient of x^2 is 3.0
        let report = check_gradients(&params, &wrong, 8, |p| {
            let x = p["x"].data[0];
            x * x
        });
        assert!(!report.passed());
        assert_eq!(report.failures().len(), 1);
    }

    #[test]
    fn verifies_tape_gradients_through_a_small_network() {
        // loss = sum(tanh(W·x)) with softmax-weighted pooling mixed in, to
        // exercise several backward rules at once.
        let mut params: IndexMap<String, Array<f64>> = IndexMap::new();
        params.insert(
            "w".to_string(),
            Array::matrix(3, 2, vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.25]),
        );
        params.insert("x".to_string(), Array::vector(vec![0.7, -0.3]));

        let eval = |p: &IndexMap<String, Array<f64>>| -> (f64, Graph<f64>, Vec<(String, Var)>) {
            let mut g: Graph<f64> = Graph::new(false);
            let mut leaves = Vec::new();
            let w = g.leaf(p["w"].clone(), true);
            leaves.push(("w".to_string(), w));
            let x = g.leaf(p["x"].clone(), true);
            leaves.push(("x".to_string(), x));
            let h = g.matvec(w, x).unwrap();
            let t = g.tanh(h);
            let a = g.softmax(t).unwrap();
            let mix = g.mul(a, t).unwrap();
            let out = g.sum(mix);
            (g.scalar_value(out), g, leaves)
        };

        let (_, mut graph, leaves) = eval(&params);
        let out = Var(graph.len() - 1);
        graph.backward(out).unwrap();
        let mut analytic: IndexMap<String, Vec<f64>> = IndexMap::new();
        for (name, var) in &leaves {
            analytic.insert(name.clone(), graph.grad(*var).unwrap().to_vec());
        }

        let report = check_gradients(&params, &analytic, 16, |p| eval(p).0);
        assert!(
            report.passed(),
            "max relative error {}",
            report.max_relative_error
        );
        assert!(report.checked >= 8);
    }
}
