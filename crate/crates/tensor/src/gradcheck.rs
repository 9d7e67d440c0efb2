//! Finite-difference verification of reverse-mode gradients.
//!
//! Runs in `f64`. Each checked coordinate is perturbed by `±eps`; the central
//! difference is compared against the analytic gradient. One-sided
//! differences are compared with each other to detect kinks (e.g. a ReLU
//! input sitting at zero), which are reported and excluded from the maximum.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Below `|analytic| + |numeric| < floor` the error is measured as
    /// `|analytic - numeric| / floor`.
    pub floor: f64,
    /// One-sided slopes differing by more than `kink_tol * max(1, |slope|)`
    /// mark a non-differentiable point.
    pub kink_tol: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
            kink_tol: 1e-3,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

/// Location of a checked coordinate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coord {
    pub input: String,
    pub index: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coord>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
    /// Non-differentiable points, excluded from `max_rel_error`.
    pub kinks: Vec<Coord>,
    /// Coordinates whose gradient magnitude fell under the floor.
    pub below_floor: Vec<Coord>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > self.kinks.len() && self.max_rel_error < tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || (self.worst.is_none() && other.worst.is_some()) {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
            self.worst_values = other.worst_values;
        }
        self.checked += other.checked;
        self.kinks.extend(other.kinks);
        self.below_floor.extend(other.below_floor);
    }
}

fn evaluate<F>(f: &F, inputs: &[(String, Tensor<f64>)]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok((g.value(out).item()?, g.branch_pattern()))
}

/// Compares the reverse-mode gradient of a scalar function of named inputs
/// against central finite differences.
pub fn grad_check<F>(f: F, inputs: &[(&str, Tensor<f64>)], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if cfg.eps <= 0.0 || cfg.floor <= 0.0 {
        return Err(arg_err("grad_check", "eps and floor must be positive"));
    }
    let mut owned: Vec<(String, Tensor<f64>)> =
        inputs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = owned.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let f0 = g.value(out).item()?;
    let pattern = g.branch_pattern();
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    for k in 0..owned.len() {
        let n = owned[k].1.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_input {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.get(vars[k]).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for idx in coords {
            let orig = owned[k].1.data()[idx];
            owned[k].1.data_mut()[idx] = orig + cfg.eps;
            let (fp, pp) = evaluate(&f, &owned)?;
            owned[k].1.data_mut()[idx] = orig - cfg.eps;
            let (fm, pm) = evaluate(&f, &owned)?;
            owned[k].1.data_mut()[idx] = orig;

            let coord = Coord {
                input: owned[k].0.clone(),
                index: idx,
            };
            report.checked += 1;
            let forward = (fp - f0) / cfg.eps;
            let backward = (f0 - fm) / cfg.eps;
            let crossed = pp != pattern || pm != pattern;
            if crossed || (forward - backward).abs() > cfg.kink_tol * 1f64.max(forward.abs()).max(backward.abs()) {
                report.kinks.push(coord);
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = analytic[idx];
            let err = if a.abs() + numeric.abs() < cfg.floor {
                report.below_floor.push(coord.clone());
                (a - numeric).abs() / cfg.floor
            } else {
                (a - numeric).abs() / a.abs().max(numeric.abs())
            };
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(coord);
                report.worst_values = Some((a, numeric));
            }
        }
    }
    Ok(report)
}
