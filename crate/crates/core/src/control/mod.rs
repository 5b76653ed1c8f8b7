//! Local controllers for controlled subsystems.

mod mpc;
mod nmpc;

pub use mpc::{lin_mpc_solve, LinearMpc};
pub use nmpc::{nmpc_solve, NmpcOutcome, NmpcParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{for_each_output_ahead, Dynamics, SubsystemState};
use crate::profile::Profile;

/// Per-channel actuator box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl InputBounds {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() {
            return Err(Error::dims("input bounds", min.len(), max.len()));
        }
        if min
            .iter()
            .zip(&max)
            .any(|(a, b)| a.is_nan() || b.is_nan() || a > b)
        {
            return Err(Error::InvalidArgument(
                "input bounds require u_min <= u_max".into(),
            ));
        }
        Ok(Self { min, max })
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            min: vec![f64::NEG_INFINITY; n],
            max: vec![f64::INFINITY; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn clip(&self, u: &mut [f64]) {
        for ((v, lo), hi) in u.iter_mut().zip(&self.min).zip(&self.max) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter()
            .zip(&self.min)
            .zip(&self.max)
            .all(|((v, lo), hi)| v >= lo && v <= hi)
    }
}

/// Componentwise clip of every step of `u` into `bounds`.
pub fn saturate(u: &Profile, bounds: &InputBounds) -> Result<Profile> {
    if u.dim() != bounds.dim() {
        return Err(Error::dims("saturation bounds", u.dim(), bounds.dim()));
    }
    let mut out = u.clone();
    for k in 0..out.horizon() {
        bounds.clip(out.step_mut(k));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerKind {
    Mpc,
    Nmpc(#[serde(default)] NmpcParams),
}

/// Configuration of a local controller.
///
/// The controller minimizes
/// `sum_{i=1..N} ||y(k+i) - ref||^2_Q + sum_{i=0..N-1} ||du(k+i)||^2_R`
/// where `du` are input moves relative to the previously applied input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSpec {
    #[serde(flatten)]
    pub kind: ControllerKind,
    /// Regulated-output indices the controller tracks.
    pub tracked: Vec<usize>,
    /// Tracking weights, one per tracked output.
    pub q: Vec<f64>,
    /// Move weights, one per input.
    pub r: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

impl ControllerSpec {
    pub fn bounds(&self) -> Result<InputBounds> {
        InputBounds::new(self.u_min.clone(), self.u_max.clone())
    }

    pub fn check(&self, n_y: usize, n_u: usize) -> Result<()> {
        if self.q.len() != self.tracked.len() {
            return Err(Error::dims(
                "controller tracking weights",
                self.tracked.len(),
                self.q.len(),
            ));
        }
        if self.r.len() != n_u {
            return Err(Error::dims("controller move weights", n_u, self.r.len()));
        }
        if self.u_min.len() != n_u {
            return Err(Error::dims(
                "controller input bounds",
                n_u,
                self.u_min.len(),
            ));
        }
        self.bounds()?;
        if let Some(&bad) = self.tracked.iter().find(|&&o| o >= n_y) {
            return Err(Error::InvalidArgument(format!(
                "tracked output {bad} out of range"
            )));
        }
        if self
            .q
            .iter()
            .chain(&self.r)
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::InvalidArgument(
                "controller weights must be nonnegative".into(),
            ));
        }
        if let ControllerKind::Nmpc(p) = &self.kind {
            p.check()?;
        }
        Ok(())
    }
}

/// Inputs shared by both local solvers.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub model: &'a Dynamics,
    pub x0: &'a SubsystemState,
    pub v_in: &'a Profile,
    pub disturbance: Option<&'a [f64]>,
    /// Target for each tracked output.
    pub reference: &'a [f64],
    /// Previously applied input (move penalty origin).
    pub last_input: &'a [f64],
    pub horizon: usize,
}

/// Controller objective for an input profile.
pub fn objective(spec: &ControllerSpec, p: &Problem, u: &Profile) -> Result<f64> {
    let mut total = 0.0;
    for_each_output_ahead(
        p.model,
        p.x0,
        u,
        p.v_in,
        p.disturbance,
        p.horizon,
        |_, yk| {
            for ((&o, &q), &r) in spec.tracked.iter().zip(&spec.q).zip(p.reference) {
                let e = yk[o] - r;
                total += q * e * e;
            }
        },
    )?;
    Ok(total + move_cost(spec, p, u))
}

fn move_cost(spec: &ControllerSpec, p: &Problem, u: &Profile) -> f64 {
    let mut total = 0.0;
    let mut prev = p.last_input;
    for k in 0..u.horizon() {
        let uk = u.step(k);
        for ((a, b), w) in uk.iter().zip(prev).zip(&spec.r) {
            let d = a - b;
            total += w * d * d;
        }
        prev = uk;
    }
    total
}
