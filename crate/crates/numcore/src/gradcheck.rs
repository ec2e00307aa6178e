//! Central-difference gradient oracle.
//!
//! Relative error per coordinate is `|analytic − numeric| / (|numeric| + 1e-8)`.
//! A probe whose `x ± eps` evaluation changes the graph's branch signature
//! straddles a kink (ReLU sign flip, gate band edge) and is skipped.
//! A probe whose analytic and numeric slopes are both below the resolution
//! of a central difference on the loss, `RESOLUTION_ULPS · ε_mach · max(|f|, 1) / eps`,
//! carries no information at the tolerance and is counted as unresolved.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::rng::seeded_rng;
use crate::tensor::Tensor;

const DENOM_FLOOR: f64 = 1e-8;
const RESOLUTION_ULPS: f64 = 3e4;

/// Smallest slope a central difference with step `eps` resolves on a loss of size `f`.
pub fn fd_resolution(f: f64, eps: f64) -> f64 {
    RESOLUTION_ULPS * f64::EPSILON * f.abs().max(1.0) / eps
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Probes below the finite-difference resolution on both sides.
    pub unresolved: usize,
    /// Largest error per parameter (or `"x"` for plain input checks).
    pub per_group: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }

    fn probe(&mut self, group: &str, analytic: f64, numeric: f64, floor: f64) {
        if analytic.abs() < floor && numeric.abs() < floor {
            self.unresolved += 1;
        } else {
            self.record(group, rel_err(analytic, numeric));
        }
    }

    fn record(&mut self, group: &str, err: f64) {
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(err);
        match self.per_group.iter_mut().find(|(g, _)| g == group) {
            Some((_, e)) => *e = e.max(err),
            None => self.per_group.push((group.to_string(), err)),
        }
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + DENOM_FLOOR)
}

fn scalar_of(g: &Graph, loss: Var) -> Result<f64> {
    let t = g.value(loss);
    if t.len() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("loss shape {:?} is not scalar", t.shape()),
        ));
    }
    Ok(t.item())
}

/// Checks `f`'s gradient with respect to its input `x` at every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_pair(&f, &f, x, eps)
}

/// Compares the analytic gradient of `analytic` with central differences of
/// `numeric`. Used for straight-through paths, where the forward pass that
/// carries the gradient is not the function whose slope it stands in for.
pub fn grad_check_pair<A, N>(analytic: A, numeric: N, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    A: Fn(&mut Graph, Var) -> Result<Var>,
    N: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone())?;
    let loss = analytic(&mut g, xv)?;
    scalar_of(&g, loss)?;
    g.backward(loss)?;
    let grad = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let v = g.input(t)?;
        let l = numeric(&mut g, v)?;
        Ok((scalar_of(&g, l)?, g.branch_signature()))
    };
    let (f0, base_sig) = eval(x.clone())?;
    let floor = fd_resolution(f0, eps);

    let mut report = GradCheckReport::default();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (fp, sp) = eval(plus)?;
        let (fm, sm) = eval(minus)?;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let num = (fp - fm) / (2.0 * eps);
        report.probe("x", grad.data()[i], num, floor);
    }
    Ok(report)
}

/// Coordinate sampling for parameter checks.
#[derive(Debug, Clone, Copy)]
pub struct ParamProbe {
    pub eps: f64,
    /// Coordinates sampled per tensor; tensors at most this large are checked exhaustively.
    pub per_tensor: usize,
    pub seed: u64,
}

impl Default for ParamProbe {
    fn default() -> Self {
        ParamProbe {
            eps: 1e-5,
            per_tensor: 12,
            seed: 0,
        }
    }
}

/// Checks the gradient of `f` with respect to the named parameters (all of
/// them when `names` is empty). `f` must bind parameters via [`Graph::param`].
pub fn grad_check_params<F>(params: &ParamSet, names: &[&str], probe: ParamProbe, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let floor = fd_resolution(scalar_of(&g, loss)?, probe.eps);
    let base_sig = g.branch_signature();
    g.backward(loss)?;
    let grads = g.param_grads();

    let eval = |p: &ParamSet| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let l = f(&mut g, p)?;
        Ok((scalar_of(&g, l)?, g.branch_signature()))
    };

    let selected: Vec<String> = if names.is_empty() {
        params.names().map(str::to_string).collect()
    } else {
        names.iter().map(|s| s.to_string()).collect()
    };
    let mut rng = seeded_rng(probe.seed);
    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for name in &selected {
        let value = params.get(name)?.clone();
        let analytic = grads
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        let coords: Vec<usize> = if value.len() <= probe.per_tensor {
            (0..value.len()).collect()
        } else {
            let mut c = sample(&mut rng, value.len(), probe.per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let mut plus = value.clone();
            plus.data_mut()[i] += probe.eps;
            work.set(name, plus)?;
            let (fp, sp) = eval(&work)?;
            let mut minus = value.clone();
            minus.data_mut()[i] -= probe.eps;
            work.set(name, minus)?;
            let (fm, sm) = eval(&work)?;
            work.set(name, value.clone())?;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let num = (fp - fm) / (2.0 * probe.eps);
            report.probe(name, analytic.data()[i], num, floor);
        }
    }
    Ok(report)
}
