//! Single-shooting NMPC by projected gradient descent.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{objective, ControllerSpec, InputBounds, Problem};
use crate::error::{Error, Result};
use crate::profile::Profile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmpcParams {
    /// Gradient iterations per solve.
    pub max_iter: usize,
    /// Relative forward-difference step.
    pub fd_step: f64,
    /// Stop when the objective decrease falls below `tol * max(1, J)`.
    pub tol: f64,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
    /// Step shrink factor while backtracking.
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for NmpcParams {
    fn default() -> Self {
        Self {
            max_iter: 60,
            fd_step: 1e-6,
            tol: 1e-10,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
        }
    }
}

impl NmpcParams {
    pub fn check(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument(
                "NMPC iteration budget must be at least 1".into(),
            ));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::InvalidArgument(
                "NMPC finite-difference step must be positive".into(),
            ));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InvalidArgument(
                "NMPC backtracking factor must lie in (0, 1)".into(),
            ));
        }
        if !(self.tol >= 0.0 && self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::InvalidArgument(
                "invalid NMPC tolerance or Armijo constant".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmpcOutcome {
    pub u: Profile,
    pub objective: f64,
    pub iterations: usize,
    /// The iteration budget ran out before the stopping test was met.
    pub budget_exhausted: bool,
    /// Objective after each accepted iterate, starting with the initial one.
    pub history: Vec<f64>,
    pub elapsed: Duration,
}

fn forward_gradient(
    spec: &ControllerSpec,
    p: &Problem,
    bounds: &InputBounds,
    u: &Profile,
    f0: f64,
    h_rel: f64,
) -> Result<Vec<f64>> {
    let n_u = u.dim();
    let mut g = vec![0.0; u.values().len()];
    let mut trial = u.clone();
    for (i, gi) in g.iter_mut().enumerate() {
        let base = u.values()[i];
        let mut h = h_rel * base.abs().max(1.0);
        if base + h > bounds.max[i % n_u] {
            h = -h;
        }
        trial.values_mut()[i] = base + h;
        *gi = (objective(spec, p, &trial)? - f0) / h;
        trial.values_mut()[i] = base;
    }
    Ok(g)
}

fn project(values: &mut [f64], bounds: &InputBounds) {
    for chunk in values.chunks_mut(bounds.dim()) {
        bounds.clip(chunk);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes the controller objective over the stacked input profile,
/// starting from `warm_start` (or the held previous input).
///
/// Iterates are always box-feasible and the accepted objective sequence is
/// nonincreasing. Running out of iterations is reported in the outcome, not
/// as an error.
pub fn nmpc_solve(
    spec: &ControllerSpec,
    params: &NmpcParams,
    p: &Problem,
    warm_start: Option<&Profile>,
) -> Result<NmpcOutcome> {
    let start = Instant::now();
    params.check()?;
    let dims = p.model.dims();
    spec.check(dims.n_y, dims.n_u)?;
    if p.reference.len() != spec.tracked.len() {
        return Err(Error::dims(
            "NMPC reference",
            spec.tracked.len(),
            p.reference.len(),
        ));
    }
    if p.last_input.len() != dims.n_u {
        return Err(Error::dims("previous input", dims.n_u, p.last_input.len()));
    }
    let bounds = spec.bounds()?;
    let mut u = match warm_start {
        Some(w) if w.dim() == dims.n_u && w.horizon() == p.horizon => w.clone(),
        _ => Profile::constant(p.last_input, p.horizon),
    };
    project(u.values_mut(), &bounds);
    let mut f = objective(spec, p, &u)?;
    let mut g = forward_gradient(spec, p, &bounds, &u, f, params.fd_step)?;
    let mut history = vec![f];
    let g_inf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut t = if g_inf > 0.0 { 1.0 / g_inf } else { 1.0 };
    let mut iterations = 0;
    let mut converged = false;
    let mut trial = u.clone();

    while iterations < params.max_iter {
        iterations += 1;
        let mut accepted = None;
        for _ in 0..=params.max_backtracks {
            for ((tv, uv), gv) in trial.values_mut().iter_mut().zip(u.values()).zip(&g) {
                *tv = uv - t * gv;
            }
            project(trial.values_mut(), &bounds);
            let step: Vec<f64> = trial
                .values()
                .iter()
                .zip(u.values())
                .map(|(a, b)| a - b)
                .collect();
            if step.iter().all(|d| *d == 0.0) {
                break;
            }
            let f_new = objective(spec, p, &trial)?;
            if f_new <= f + params.armijo * dot(&g, &step) {
                accepted = Some((f_new, step));
                break;
            }
            t *= params.backtrack;
        }
        let Some((f_new, s)) = accepted else {
            converged = true;
            break;
        };
        let g_new = forward_gradient(spec, p, &bounds, &trial, f_new, params.fd_step)?;
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sty = dot(&s, &y);
        t = if sty > 0.0 {
            dot(&s, &s) / sty
        } else {
            t * 2.0
        };
        let decrease = f - f_new;
        std::mem::swap(&mut u, &mut trial);
        f = f_new;
        g = g_new;
        history.push(f);
        if decrease <= params.tol * f.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(NmpcOutcome {
        u,
        objective: f,
        iterations,
        budget_exhausted: !converged,
        history,
        elapsed: start.elapsed(),
    })
}
