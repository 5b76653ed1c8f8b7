use nalgebra::{DMatrix, DVector};

use super::{Agent, AgentResponse, SolveTiming};
use crate::error::{Error, Result};
use crate::graph::SubsystemId;

/// Agent whose outgoing profile is affine in its incoming profile and
/// set-point: `v_out = M v_in + E r + b`, with cost
/// `q ||r - target||^2 + w ||v_out||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineAgent {
    pub id: SubsystemId,
    pub controlled: bool,
    pub m: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub b: DVector<f64>,
    pub target: Vec<f64>,
    pub q: f64,
    pub w: f64,
}

impl AffineAgent {
    pub fn uncontrolled(id: SubsystemId, m: DMatrix<f64>, b: DVector<f64>) -> Self {
        let n = b.len();
        Self {
            id,
            controlled: false,
            m,
            e: DMatrix::zeros(n, 0),
            b,
            target: Vec::new(),
            q: 0.0,
            w: 0.0,
        }
    }
}

impl Agent for AffineAgent {
    fn id(&self) -> SubsystemId {
        self.id
    }

    fn controlled(&self) -> bool {
        self.controlled
    }

    fn setpoint_dim(&self) -> usize {
        self.e.ncols()
    }

    fn respond(&self, r: Option<&[f64]>, v_in: &[f64]) -> Result<AgentResponse> {
        if v_in.len() != self.m.ncols() {
            return Err(Error::dims(
                "affine agent input",
                self.m.ncols(),
                v_in.len(),
            ));
        }
        let mut out = &self.m * DVector::from_column_slice(v_in) + &self.b;
        let mut cost = 0.0;
        match (self.controlled, r) {
            (true, Some(r)) => {
                if r.len() != self.e.ncols() {
                    return Err(Error::dims(
                        "affine agent set-point",
                        self.e.ncols(),
                        r.len(),
                    ));
                }
                out += &self.e * DVector::from_column_slice(r);
                cost += self.q
                    * r.iter()
                        .zip(&self.target)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
            }
            (true, None) => return Err(Error::MissingSetpoint(self.id.0)),
            (false, Some(_)) => return Err(Error::UnexpectedSetpoint(self.id.0)),
            (false, None) => {}
        }
        cost += self.w * out.norm_squared();
        Ok(AgentResponse {
            v_out: out.as_slice().to_vec(),
            cost,
            u: None,
            timing: SolveTiming::default(),
        })
    }
}
