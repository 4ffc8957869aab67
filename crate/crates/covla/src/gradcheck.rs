//! Central-difference gradient oracle.
//!
//! Checks analytic gradients coordinate by coordinate against
//! (f(θ+ε) − f(θ−ε)) / 2ε. Finite differences are invalid where the
//! perturbation straddles a relu kink, so the objective reports the
//! values feeding every relu and coordinates near a kink are excluded
//! and reported rather than failed.

use crate::params::ParamSet;
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// One evaluation of the objective: the scalar value plus all relu
/// pre-activation values encountered while computing it.
pub struct ObjectiveProbe {
    pub value: f64,
    pub relu_inputs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct WorstCoordinate {
    pub at: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Maximum relative error over all checked coordinates.
    pub max_rel_error: f64,
    pub worst: Option<WorstCoordinate>,
    pub checked: usize,
    /// Coordinates excluded because the perturbation landed within
    /// 10ε of a relu kink (or crossed one).
    pub skipped: Vec<Coordinate>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn kink_adjacent(plus: &ObjectiveProbe, minus: &ObjectiveProbe, eps: f64) -> bool {
    let margin = 10.0 * eps;
    plus.relu_inputs
        .iter()
        .zip(&minus.relu_inputs)
        .any(|(&p, &m)| p.abs() <= margin || m.abs() <= margin || (p > 0.0) != (m > 0.0))
}

/// Compare `analytic` against central differences of `objective` at
/// `params`, perturbing one coordinate at a time.
pub fn grad_check(
    objective: impl Fn(&ParamSet) -> ObjectiveProbe,
    params: &ParamSet,
    analytic: &Gradients,
    eps: f64,
) -> GradCheckReport {
    assert!(eps > 0.0, "epsilon must be positive");
    let mut report = GradCheckReport::default();

    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let base = params.get(&name).expect("param vanished").clone();
        let grad = analytic
            .get(&name)
            .unwrap_or_else(|| panic!("no analytic gradient for {name}"));
        for index in 0..base.numel() {
            let perturbed = |delta: f64| -> ObjectiveProbe {
                let mut data = base.data().to_vec();
                data[index] += delta;
                let mut p = params.clone();
                p.set(&name, Tensor::new(base.shape().to_vec(), data).expect("shape"));
                objective(&p)
            };
            let plus = perturbed(eps);
            let minus = perturbed(-eps);
            if kink_adjacent(&plus, &minus, eps) {
                report.skipped.push(Coordinate {
                    param: name.clone(),
                    index,
                });
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * eps);
            let a = grad.data()[index];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(WorstCoordinate {
                    at: Coordinate {
                        param: name.clone(),
                        index,
                    },
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report
}
