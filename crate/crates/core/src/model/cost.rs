//! Local cost contributions `J_s`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::Profile;

/// One additive term of a local cost. Output/input indices refer to the
/// subsystem's regulated outputs and control inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostTerm {
    /// `sum_i ||y(k+i) - r_d||^2_Q + ||u(k+i)||^2_R` on the selected outputs.
    Tracking {
        outputs: Vec<usize>,
        q: Vec<f64>,
        /// Per-input weights; empty means zero.
        #[serde(default)]
        r: Vec<f64>,
    },
    /// `sum_i ||max(y(k+i) - y_bar, 0)||^2_Q` on the selected outputs.
    Constraint {
        outputs: Vec<usize>,
        q: Vec<f64>,
        upper: Vec<f64>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalCost {
    #[serde(default)]
    pub terms: Vec<CostTerm>,
}

impl LocalCost {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn tracking(outputs: Vec<usize>, q: Vec<f64>, r: Vec<f64>) -> Self {
        Self {
            terms: vec![CostTerm::Tracking { outputs, q, r }],
        }
    }

    pub fn constraint(outputs: Vec<usize>, q: Vec<f64>, upper: Vec<f64>) -> Self {
        Self {
            terms: vec![CostTerm::Constraint { outputs, q, upper }],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn check(&self, n_y: usize, n_u: usize) -> Result<()> {
        for t in &self.terms {
            let (outputs, q) = match t {
                CostTerm::Tracking { outputs, q, r } => {
                    if !r.is_empty() && r.len() != n_u {
                        return Err(Error::dims("tracking input weights", n_u, r.len()));
                    }
                    if r.iter().any(|w| *w < 0.0 || !w.is_finite()) {
                        return Err(Error::InvalidArgument(
                            "input weights must be nonnegative".into(),
                        ));
                    }
                    (outputs, q)
                }
                CostTerm::Constraint { outputs, q, upper } => {
                    if upper.len() != outputs.len() {
                        return Err(Error::dims(
                            "constraint upper bounds",
                            outputs.len(),
                            upper.len(),
                        ));
                    }
                    (outputs, q)
                }
            };
            if q.len() != outputs.len() {
                return Err(Error::dims("cost output weights", outputs.len(), q.len()));
            }
            if q.iter().any(|w| *w < 0.0 || !w.is_finite()) {
                return Err(Error::InvalidArgument(
                    "output weights must be nonnegative".into(),
                ));
            }
            if let Some(&bad) = outputs.iter().find(|&&o| o >= n_y) {
                return Err(Error::InvalidArgument(format!(
                    "cost output index {bad} out of range"
                )));
            }
        }
        Ok(())
    }

    /// Default upper bounds, one per regulated output (`+inf` where no
    /// constraint term applies).
    pub fn default_upper(&self, n_y: usize) -> Vec<f64> {
        let mut upper = vec![f64::INFINITY; n_y];
        for t in &self.terms {
            if let CostTerm::Constraint {
                outputs, upper: u, ..
            } = t
            {
                for (&o, &b) in outputs.iter().zip(u) {
                    upper[o] = b;
                }
            }
        }
        upper
    }

    /// Full-length weight vectors `(q_track, r_track, q_constraint)`.
    pub fn weights(&self, n_y: usize, n_u: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut qt = vec![0.0; n_y];
        let mut rt = vec![0.0; n_u];
        let mut qc = vec![0.0; n_y];
        for t in &self.terms {
            match t {
                CostTerm::Tracking { outputs, q, r } => {
                    for (&o, &w) in outputs.iter().zip(q) {
                        qt[o] += w;
                    }
                    for (a, &w) in rt.iter_mut().zip(r) {
                        *a += w;
                    }
                }
                CostTerm::Constraint { outputs, q, .. } => {
                    for (&o, &w) in outputs.iter().zip(q) {
                        qc[o] += w;
                    }
                }
            }
        }
        (qt, rt, qc)
    }

    /// Horizon cost on a predicted output/input profile. `desired` and
    /// `upper` are full-length (one entry per regulated output).
    pub fn evaluate(
        &self,
        y: &Profile,
        u: Option<&Profile>,
        desired: &[f64],
        upper: &[f64],
    ) -> Result<f64> {
        let n_u = u.map(|u| u.dim()).unwrap_or(0);
        let (qt, rt, qc) = self.weights(y.dim(), n_u);
        let mut total = 0.0;
        if self
            .terms
            .iter()
            .any(|t| matches!(t, CostTerm::Tracking { .. }))
        {
            total += tracking_cost(y, u, desired, &qt, &rt)?;
        }
        if self
            .terms
            .iter()
            .any(|t| matches!(t, CostTerm::Constraint { .. }))
        {
            total += constraint_cost(y, upper, &qc)?;
        }
        Ok(total)
    }

    /// Single-instant cost used for the closed-loop index.
    pub fn stage(&self, y: &[f64], u: &[f64], desired: &[f64], upper: &[f64]) -> Result<f64> {
        let y = Profile::new(y.to_vec(), y.len())?;
        let u = Profile::new(u.to_vec(), u.len())?;
        let u = if u.dim() == 0 { None } else { Some(&u) };
        self.evaluate(&y, u, desired, upper)
    }
}

/// `sum_i ||y(k+i) - r_d||^2_Q + ||u(k+i)||^2_R` with diagonal weights.
pub fn tracking_cost(
    y: &Profile,
    u: Option<&Profile>,
    desired: &[f64],
    q: &[f64],
    r: &[f64],
) -> Result<f64> {
    let n_y = y.dim();
    if desired.len() != n_y {
        return Err(Error::dims("desired set-point", n_y, desired.len()));
    }
    if q.len() != n_y {
        return Err(Error::dims("output weights", n_y, q.len()));
    }
    let mut total = 0.0;
    for k in 0..y.horizon() {
        for ((yi, ri), qi) in y.step(k).iter().zip(desired).zip(q) {
            if *qi != 0.0 {
                let e = yi - ri;
                total += qi * e * e;
            }
        }
    }
    if let Some(u) = u {
        if !r.is_empty() {
            if r.len() != u.dim() {
                return Err(Error::dims("input weights", u.dim(), r.len()));
            }
            if u.horizon() != y.horizon() {
                return Err(Error::dims("input horizon", y.horizon(), u.horizon()));
            }
            for k in 0..u.horizon() {
                for (ui, ri) in u.step(k).iter().zip(r) {
                    total += ri * ui * ui;
                }
            }
        }
    }
    Ok(total)
}

/// `sum_i ||max(y(k+i) - y_bar, 0)||^2_Q` with a diagonal weight.
pub fn constraint_cost(y: &Profile, upper: &[f64], q: &[f64]) -> Result<f64> {
    let n_y = y.dim();
    if upper.len() != n_y {
        return Err(Error::dims("upper bounds", n_y, upper.len()));
    }
    if q.len() != n_y {
        return Err(Error::dims("constraint weights", n_y, q.len()));
    }
    let mut total = 0.0;
    for k in 0..y.horizon() {
        for ((yi, bi), qi) in y.step(k).iter().zip(upper).zip(q) {
            if *qi != 0.0 {
                let e = (yi - bi).max(0.0);
                total += qi * e * e;
            }
        }
    }
    Ok(total)
}
