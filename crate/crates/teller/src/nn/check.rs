//! Finite-difference gradient checking against the autodiff tape.
//!
//! Runs in `f64`: models convert their `f32` parameters to doubles, rebuild
//! the same loss graph, and compare analytic gradients with central
//! differences element by element.

use super::graph::{Graph, Var};
use super::mat::Mat;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[element]` of the worst-agreeing parameter entry.
    pub worst: String,
    pub params_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences for every element of every named parameter.
pub fn grad_check_named(
    params: &[(String, Mat<f64>)],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> GradCheckReport {
    let mats: Vec<Mat<f64>> = params.iter().map(|(_, m)| m.clone()).collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = mats.iter().map(|m| g.param(m.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss);
    let analytic: Vec<Mat<f64>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut work = mats;
    let mut max_rel_err = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0usize;
    for (pi, (name, _)) in params.iter().enumerate() {
        for e in 0..work[pi].len() {
            let orig = work[pi].data()[e];
            // five-point stencil: O(h⁴) truncation lets h stay large enough
            // that cancellation noise cannot swamp small gradients
            let h = 3e-4 * (1.0 + orig.abs());
            let mut probe = |delta: f64| {
                work[pi].data_mut()[e] = orig + delta;
                eval(&work, &build)
            };
            let p2 = probe(2.0 * h);
            let p1 = probe(h);
            let m1 = probe(-h);
            let m2 = probe(-2.0 * h);
            work[pi].data_mut()[e] = orig;

            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            let a = analytic[pi].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("{name}[{e}] analytic {a:.6e} numeric {numeric:.6e}");
            }
            checked += 1;
        }
    }
    GradCheckReport { max_rel_err, worst, params_checked: checked }
}

fn eval(mats: &[Mat<f64>], build: &impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = mats.iter().map(|m| g.param(m.clone())).collect();
    let loss = build(&mut g, &vars);
    g.scalar(loss)
}
