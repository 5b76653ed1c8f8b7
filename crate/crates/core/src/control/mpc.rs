//! Condensed linear MPC.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{saturate, ControllerSpec, InputBounds, Problem};
use crate::error::{Error, Result};
use crate::model::{simulate_profile, Dynamics, SubsystemState};
use crate::profile::Profile;

/// Prediction matrices and the factored normal equations for one model,
/// horizon and weight set. Depends only on the model, so it is built once
/// and reused for every solve.
#[derive(Debug, Clone)]
pub struct LinearMpc {
    spec: ControllerSpec,
    bounds: InputBounds,
    horizon: usize,
    n_u: usize,
    /// Sensitivity of tracked outputs `y(k+1..k+N)` to the stacked inputs.
    gamma: DMatrix<f64>,
    /// `Gamma^T Q`
    gamma_t_q: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

/// Relative pivot size below which the normal equations count as singular.
const PIVOT_TOL: f64 = 1e-12;

impl LinearMpc {
    pub fn new(model: &Dynamics, spec: &ControllerSpec, horizon: usize) -> Result<Self> {
        if !model.is_linear() {
            return Err(Error::InvalidArgument(
                "linear MPC requires a linear model".into(),
            ));
        }
        if horizon == 0 {
            return Err(Error::InvalidArgument(
                "MPC horizon must be at least 1".into(),
            ));
        }
        let dims = model.dims();
        spec.check(dims.n_y, dims.n_u)?;
        let n_u = dims.n_u;
        if n_u == 0 {
            return Err(Error::InvalidArgument(
                "MPC needs at least one input".into(),
            ));
        }
        let n_t = spec.tracked.len();
        let p = model.affine().parts();
        let x0 = SubsystemState::new(p.x_op.clone());
        let v = Profile::constant(&p.v_op, horizon);
        let n_dec = horizon * n_u;
        let mut gamma = DMatrix::zeros(horizon * n_t, n_dec);
        for m in 0..horizon {
            for j in 0..n_u {
                let mut u = Profile::constant(&p.u_op, horizon);
                u.step_mut(m)[j] += 1.0;
                let y = simulate_profile(model, &x0, Some(&u), &v, None, horizon)?.outputs_ahead();
                for i in 0..horizon {
                    for (t, &o) in spec.tracked.iter().enumerate() {
                        gamma[(i * n_t + t, m * n_u + j)] = y.step(i)[o] - p.y_op[o];
                    }
                }
            }
        }
        let q_diag = DVector::from_iterator(
            horizon * n_t,
            (0..horizon).flat_map(|_| spec.q.iter().copied()),
        );
        let mut gamma_t_q = gamma.transpose();
        for (c, w) in q_diag.iter().enumerate() {
            gamma_t_q.column_mut(c).scale_mut(*w);
        }
        let mut h = &gamma_t_q * &gamma;
        // D^T R D for the move penalty, D the first-difference operator.
        for m in 0..horizon {
            for j in 0..n_u {
                let w = spec.r[j];
                let a = m * n_u + j;
                h[(a, a)] += w;
                if m + 1 < horizon {
                    // row m+1 of D also touches column m
                    let b = a + n_u;
                    h[(a, a)] += w;
                    h[(a, b)] -= w;
                    h[(b, a)] -= w;
                }
            }
        }
        let scale = h.diagonal().amax();
        let chol = Cholesky::new(h).ok_or(Error::IllPosedMpc)?;
        let l = chol.l_dirty();
        let min_pivot = (0..n_dec)
            .map(|i| l[(i, i)] * l[(i, i)])
            .fold(f64::INFINITY, f64::min);
        if !(scale > 0.0) || min_pivot < PIVOT_TOL * scale {
            return Err(Error::IllPosedMpc);
        }
        Ok(Self {
            spec: spec.clone(),
            bounds: spec.bounds()?,
            horizon,
            n_u,
            gamma,
            gamma_t_q,
            chol,
        })
    }

    pub fn spec(&self) -> &ControllerSpec {
        &self.spec
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Output sensitivity matrix (rows: step-major tracked outputs,
    /// columns: step-major inputs).
    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    /// Unconstrained optimum, clipped to the input box.
    pub fn solve(&self, p: &Problem) -> Result<Profile> {
        if p.horizon != self.horizon {
            return Err(Error::dims("MPC horizon", self.horizon, p.horizon));
        }
        if p.reference.len() != self.spec.tracked.len() {
            return Err(Error::dims(
                "MPC reference",
                self.spec.tracked.len(),
                p.reference.len(),
            ));
        }
        if p.last_input.len() != self.n_u {
            return Err(Error::dims("previous input", self.n_u, p.last_input.len()));
        }
        let base_u = Profile::constant(p.last_input, self.horizon);
        let y = simulate_profile(
            p.model,
            p.x0,
            Some(&base_u),
            p.v_in,
            p.disturbance,
            self.horizon,
        )?
        .outputs_ahead();
        let n_t = self.spec.tracked.len();
        let mut err = DVector::zeros(self.horizon * n_t);
        for i in 0..self.horizon {
            for (t, (&o, &r)) in self.spec.tracked.iter().zip(p.reference).enumerate() {
                err[i * n_t + t] = y.step(i)[o] - r;
            }
        }
        let rhs = -(&self.gamma_t_q * err);
        let delta = self.chol.solve(&rhs);
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::IllPosedMpc);
        }
        let mut values = base_u.into_values();
        for (v, d) in values.iter_mut().zip(delta.iter()) {
            *v += d;
        }
        saturate(&Profile::new(values, self.n_u)?, &self.bounds)
    }
}

/// One-shot linear MPC solve.
pub fn lin_mpc_solve(spec: &ControllerSpec, p: &Problem) -> Result<Profile> {
    LinearMpc::new(p.model, spec, p.horizon)?.solve(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{objective, ControllerKind};
    use crate::model::{LinearModel, LinearParts, ModelDims};
    use nalgebra::dmatrix;

    fn spec(q: Vec<f64>, r: Vec<f64>, tracked: Vec<usize>, n_u: usize) -> ControllerSpec {
        ControllerSpec {
            kind: ControllerKind::Mpc,
            tracked,
            q,
            r,
            u_min: vec![f64::NEG_INFINITY; n_u],
            u_max: vec![f64::INFINITY; n_u],
        }
    }

    fn integrator() -> Dynamics {
        let dims = ModelDims {
            n_x: 1,
            n_u: 1,
            n_v: 0,
            n_d: 0,
            n_y: 1,
            n_w: 0,
        };
        let mut p = LinearParts::zeros(dims, 1.0);
        p.a = dmatrix![1.0];
        p.b_u = dmatrix![1.0];
        p.c_y = dmatrix![1.0];
        Dynamics::Linear(LinearModel::new(p).unwrap())
    }

    #[test]
    fn deadbeat_integrator() {
        let m = integrator();
        let s = spec(vec![1.0], vec![0.0], vec![0], 1);
        let x0 = SubsystemState::new(vec![2.0]);
        let p = Problem {
            model: &m,
            x0: &x0,
            v_in: &Profile::empty(),
            disturbance: None,
            reference: &[5.0],
            last_input: &[0.0],
            horizon: 1,
        };
        let u = lin_mpc_solve(&s, &p).unwrap();
        assert!((u.values()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn equilibrium_needs_no_move() {
        let m = integrator();
        let s = spec(vec![1.0], vec![0.1], vec![0], 1);
        let x0 = SubsystemState::new(vec![1.0]);
        let p = Problem {
            model: &m,
            x0: &x0,
            v_in: &Profile::empty(),
            disturbance: None,
            reference: &[1.0],
            last_input: &[0.0],
            horizon: 5,
        };
        let u = lin_mpc_solve(&s, &p).unwrap();
        assert!(u.values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn unreachable_output_without_regularization_is_ill_posed() {
        let dims = ModelDims {
            n_x: 1,
            n_u: 2,
            n_v: 0,
            n_d: 0,
            n_y: 1,
            n_w: 0,
        };
        let mut p = LinearParts::zeros(dims, 1.0);
        p.a = dmatrix![0.5];
        p.b_u = dmatrix![1.0, 0.0];
        p.c_y = dmatrix![1.0];
        let m = Dynamics::Linear(LinearModel::new(p).unwrap());
        let err = LinearMpc::new(&m, &spec(vec![1.0], vec![0.0, 0.0], vec![0], 2), 3).unwrap_err();
        assert!(matches!(err, Error::IllPosedMpc));
        assert!(err.to_string().contains("ill-posed MPC"));
    }

    #[test]
    fn never_worse_than_holding_input() {
        let dims = ModelDims {
            n_x: 2,
            n_u: 1,
            n_v: 1,
            n_d: 0,
            n_y: 1,
            n_w: 0,
        };
        let mut p = LinearParts::zeros(dims, 1.0);
        p.a = dmatrix![0.8, 0.1; -0.2, 0.7];
        p.b_u = dmatrix![0.5; 1.0];
        p.b_v = dmatrix![0.3; 0.0];
        p.c_y = dmatrix![1.0, 0.5];
        let m = Dynamics::Linear(LinearModel::new(p).unwrap());
        let s = spec(vec![2.0], vec![0.3], vec![0], 1);
        let x0 = SubsystemState::new(vec![0.4, -1.0]);
        let v = Profile::new((0..6).map(|k| 0.1 * k as f64).collect(), 1).unwrap();
        let p = Problem {
            model: &m,
            x0: &x0,
            v_in: &v,
            disturbance: None,
            reference: &[1.0],
            last_input: &[0.2],
            horizon: 6,
        };
        let u = lin_mpc_solve(&s, &p).unwrap();
        let hold = Profile::constant(&[0.2], 6);
        assert!(objective(&s, &p, &u).unwrap() <= objective(&s, &p, &hold).unwrap());
    }
}
