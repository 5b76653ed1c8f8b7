//! Discrete-time subsystem dynamics.
//!
//! All models are written in deviation form around an operating point:
//!
//! ```text
//! dx+ = A dx + B_u du + B_v dv + B_d dd + sum_j e_x,j phi_j
//! y   = y_op + C_y dx + D_yu du + D_yv dv + sum_j e_y,j phi_j
//! w   = w_op + C_w dx + D_wu du + D_wv dv + sum_j e_w,j phi_j
//! ```
//!
//! where `dx = x - x_op` (likewise for `u`, `v`, `d`), `w` is the outgoing
//! coupling vector and `phi_j` are named nonlinear terms that vanish at the
//! operating point.

mod compose;
pub mod cost;

pub use compose::{compose, CompositeSpec};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::Profile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_v: usize,
    pub n_d: usize,
    pub n_y: usize,
    pub n_w: usize,
}

/// Matrices and operating point of an affine model, before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParts {
    pub a: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub b_v: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub c_y: DMatrix<f64>,
    pub d_yu: DMatrix<f64>,
    pub d_yv: DMatrix<f64>,
    pub c_w: DMatrix<f64>,
    pub d_wu: DMatrix<f64>,
    pub d_wv: DMatrix<f64>,
    pub x_op: Vec<f64>,
    pub u_op: Vec<f64>,
    pub v_op: Vec<f64>,
    pub d_op: Vec<f64>,
    pub y_op: Vec<f64>,
    pub w_op: Vec<f64>,
    pub ts: f64,
}

impl LinearParts {
    /// All-zero matrices and operating point for the given dimensions.
    pub fn zeros(dims: ModelDims, ts: f64) -> Self {
        let ModelDims {
            n_x,
            n_u,
            n_v,
            n_d,
            n_y,
            n_w,
        } = dims;
        Self {
            a: DMatrix::zeros(n_x, n_x),
            b_u: DMatrix::zeros(n_x, n_u),
            b_v: DMatrix::zeros(n_x, n_v),
            b_d: DMatrix::zeros(n_x, n_d),
            c_y: DMatrix::zeros(n_y, n_x),
            d_yu: DMatrix::zeros(n_y, n_u),
            d_yv: DMatrix::zeros(n_y, n_v),
            c_w: DMatrix::zeros(n_w, n_x),
            d_wu: DMatrix::zeros(n_w, n_u),
            d_wv: DMatrix::zeros(n_w, n_v),
            x_op: vec![0.0; n_x],
            u_op: vec![0.0; n_u],
            v_op: vec![0.0; n_v],
            d_op: vec![0.0; n_d],
            y_op: vec![0.0; n_y],
            w_op: vec![0.0; n_w],
            ts,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n_x: self.x_op.len(),
            n_u: self.u_op.len(),
            n_v: self.v_op.len(),
            n_d: self.d_op.len(),
            n_y: self.y_op.len(),
            n_w: self.w_op.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    parts: LinearParts,
    spectral_radius: f64,
}

fn check_shape(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows {
        return Err(Error::dims(format!("{name} rows"), rows, m.nrows()));
    }
    if m.ncols() != cols {
        return Err(Error::dims(format!("{name} columns"), cols, m.ncols()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(())
}

pub(crate) fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

impl LinearModel {
    pub fn new(parts: LinearParts) -> Result<Self> {
        let ModelDims {
            n_x,
            n_u,
            n_v,
            n_d,
            n_y,
            n_w,
        } = parts.dims();
        if !(parts.ts > 0.0 && parts.ts.is_finite()) {
            return Err(Error::InvalidArgument(
                "sampling period must be positive".into(),
            ));
        }
        check_shape("A", &parts.a, n_x, n_x)?;
        check_shape("B_u", &parts.b_u, n_x, n_u)?;
        check_shape("B_v", &parts.b_v, n_x, n_v)?;
        check_shape("B_d", &parts.b_d, n_x, n_d)?;
        check_shape("C_y", &parts.c_y, n_y, n_x)?;
        check_shape("D_yu", &parts.d_yu, n_y, n_u)?;
        check_shape("D_yv", &parts.d_yv, n_y, n_v)?;
        check_shape("C_w", &parts.c_w, n_w, n_x)?;
        check_shape("D_wu", &parts.d_wu, n_w, n_u)?;
        check_shape("D_wv", &parts.d_wv, n_w, n_v)?;
        let ops = [
            &parts.x_op,
            &parts.u_op,
            &parts.v_op,
            &parts.d_op,
            &parts.y_op,
            &parts.w_op,
        ];
        if ops.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("operating point".into()));
        }
        let spectral_radius = spectral_radius(&parts.a);
        Ok(Self {
            parts,
            spectral_radius,
        })
    }

    pub fn parts(&self) -> &LinearParts {
        &self.parts
    }

    pub fn dims(&self) -> ModelDims {
        self.parts.dims()
    }

    pub fn ts(&self) -> f64 {
        self.parts.ts
    }

    /// Spectral radius of `A`, computed at construction.
    pub fn spectral_radius(&self) -> f64 {
        self.spectral_radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    /// `c * sign(a) * sqrt(|a * b|)`: valve/turbine flow law with `a` the
    /// pressure drop and `b` the inlet pressure.
    SqrtFlow,
    /// `c * a * b`
    Bilinear,
}

impl TermKind {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "sqrt_flow" => Some(TermKind::SqrtFlow),
            "bilinear" => Some(TermKind::Bilinear),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TermKind::SqrtFlow => "sqrt_flow",
            TermKind::Bilinear => "bilinear",
        }
    }

    fn eval(self, coeff: f64, a: f64, b: f64) -> f64 {
        match self {
            TermKind::SqrtFlow => coeff * a.signum() * (a * b).abs().sqrt(),
            TermKind::Bilinear => coeff * a * b,
        }
    }
}

/// Scalar argument `op + sum(x) + sum(u) + sum(v) + sum(d)` where each sum
/// runs over sparse `(index, weight)` pairs applied to deviation variables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AffineArg {
    pub op: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub x: Vec<(usize, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub u: Vec<(usize, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub v: Vec<(usize, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub d: Vec<(usize, f64)>,
}

impl AffineArg {
    fn eval(&self, dx: &[f64], du: &[f64], dv: &[f64], dd: &[f64]) -> f64 {
        let mut s = self.op;
        for &(i, w) in &self.x {
            s += w * dx[i];
        }
        for &(i, w) in &self.u {
            s += w * du[i];
        }
        for &(i, w) in &self.v {
            s += w * dv[i];
        }
        for &(i, w) in &self.d {
            s += w * dd[i];
        }
        s
    }

    fn check(&self, dims: &ModelDims) -> Result<()> {
        let ok = self.x.iter().all(|&(i, _)| i < dims.n_x)
            && self.u.iter().all(|&(i, _)| i < dims.n_u)
            && self.v.iter().all(|&(i, _)| i < dims.n_v)
            && self.d.iter().all(|&(i, _)| i < dims.n_d);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "nonlinear term argument index out of range".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearTerm {
    pub kind: TermKind,
    pub coeff: f64,
    pub args: [AffineArg; 2],
    pub gain_x: Vec<f64>,
    pub gain_y: Vec<f64>,
    pub gain_w: Vec<f64>,
}

impl NonlinearTerm {
    /// Value relative to the operating point, so the term vanishes there.
    fn eval(&self, dx: &[f64], du: &[f64], dv: &[f64], dd: &[f64]) -> f64 {
        let a = self.args[0].eval(dx, du, dv, dd);
        let b = self.args[1].eval(dx, du, dv, dd);
        self.kind.eval(self.coeff, a, b)
            - self.kind.eval(self.coeff, self.args[0].op, self.args[1].op)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearModel {
    affine: LinearModel,
    terms: Vec<NonlinearTerm>,
}

impl NonlinearModel {
    pub fn new(affine: LinearModel, terms: Vec<NonlinearTerm>) -> Result<Self> {
        let dims = affine.dims();
        for t in &terms {
            for a in &t.args {
                a.check(&dims)?;
            }
            if t.gain_x.len() != dims.n_x {
                return Err(Error::dims(
                    "nonlinear term gain_x",
                    dims.n_x,
                    t.gain_x.len(),
                ));
            }
            if t.gain_y.len() != dims.n_y {
                return Err(Error::dims(
                    "nonlinear term gain_y",
                    dims.n_y,
                    t.gain_y.len(),
                ));
            }
            if t.gain_w.len() != dims.n_w {
                return Err(Error::dims(
                    "nonlinear term gain_w",
                    dims.n_w,
                    t.gain_w.len(),
                ));
            }
            if !t.coeff.is_finite() {
                return Err(Error::NonFinite("nonlinear term coefficient".into()));
            }
        }
        Ok(Self { affine, terms })
    }

    pub fn affine(&self) -> &LinearModel {
        &self.affine
    }

    pub fn terms(&self) -> &[NonlinearTerm] {
        &self.terms
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    Linear(LinearModel),
    Nonlinear(NonlinearModel),
}

/// Measured state of a subsystem at the current plant time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsystemState {
    pub x: Vec<f64>,
}

impl SubsystemState {
    pub fn new(x: Vec<f64>) -> Self {
        Self { x }
    }
}

/// Result of iterating a model over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `y(k) .. y(k+N-1)`
    pub y: Profile,
    /// `w(k) .. w(k+N-1)`: outgoing coupling profile in per-step layout.
    pub w: Profile,
    /// `x(k) .. x(k+N)`
    pub x: Profile,
    /// `y(k+N)`, evaluated with the last input and coupling held.
    pub y_terminal: Vec<f64>,
}

impl Trajectory {
    /// `y(k+1) .. y(k+N)`
    pub fn outputs_ahead(&self) -> Profile {
        let n = self.y.horizon();
        let dim = self.y.dim();
        let mut values = Vec::with_capacity(n * dim);
        if n > 1 {
            values.extend_from_slice(&self.y.values()[dim..]);
        }
        values.extend_from_slice(&self.y_terminal);
        Profile::new(values, dim).expect("consistent dims")
    }
}

/// `acc += m * x` for a column-major matrix.
#[inline]
pub(crate) fn gemv_acc(acc: &mut [f64], m: &DMatrix<f64>, x: &[f64]) {
    let rows = m.nrows();
    let data = m.as_slice();
    for (j, &xj) in x.iter().enumerate() {
        if xj != 0.0 {
            let col = &data[j * rows..(j + 1) * rows];
            for (a, &c) in acc.iter_mut().zip(col) {
                *a += c * xj;
            }
        }
    }
}

impl Dynamics {
    pub fn affine(&self) -> &LinearModel {
        match self {
            Dynamics::Linear(m) => m,
            Dynamics::Nonlinear(m) => &m.affine,
        }
    }

    pub fn terms(&self) -> &[NonlinearTerm] {
        match self {
            Dynamics::Linear(_) => &[],
            Dynamics::Nonlinear(m) => &m.terms,
        }
    }

    pub fn is_linear(&self) -> bool {
        self.terms().is_empty()
    }

    pub fn dims(&self) -> ModelDims {
        self.affine().dims()
    }

    pub fn ts(&self) -> f64 {
        self.affine().ts()
    }

    /// Nonlinear term values at a deviation point.
    #[inline]
    pub(crate) fn eval_terms(
        &self,
        dx: &[f64],
        du: &[f64],
        dv: &[f64],
        dd: &[f64],
        phi: &mut [f64],
    ) {
        for (p, t) in phi.iter_mut().zip(self.terms()) {
            *p = t.eval(dx, du, dv, dd);
        }
    }

    /// Next deviation state.
    #[inline]
    pub(crate) fn next_dev(
        &self,
        dx: &[f64],
        du: &[f64],
        dv: &[f64],
        dd: &[f64],
        phi: &[f64],
        next: &mut [f64],
    ) {
        let p = &self.affine().parts;
        next.iter_mut().for_each(|v| *v = 0.0);
        gemv_acc(next, &p.a, dx);
        gemv_acc(next, &p.b_u, du);
        gemv_acc(next, &p.b_v, dv);
        gemv_acc(next, &p.b_d, dd);
        for (t, &ph) in self.terms().iter().zip(phi) {
            if ph != 0.0 {
                for (n, g) in next.iter_mut().zip(&t.gain_x) {
                    *n += g * ph;
                }
            }
        }
    }

    /// Regulated-output deviation.
    #[inline]
    pub(crate) fn output_dev(
        &self,
        dx: &[f64],
        du: &[f64],
        dv: &[f64],
        phi: &[f64],
        y: &mut [f64],
    ) {
        let p = &self.affine().parts;
        y.iter_mut().for_each(|v| *v = 0.0);
        gemv_acc(y, &p.c_y, dx);
        gemv_acc(y, &p.d_yu, du);
        gemv_acc(y, &p.d_yv, dv);
        for (t, &ph) in self.terms().iter().zip(phi) {
            if ph != 0.0 {
                for (o, g) in y.iter_mut().zip(&t.gain_y) {
                    *o += g * ph;
                }
            }
        }
    }

    /// Outgoing-coupling deviation.
    #[inline]
    pub(crate) fn coupling_dev(
        &self,
        dx: &[f64],
        du: &[f64],
        dv: &[f64],
        phi: &[f64],
        w: &mut [f64],
    ) {
        let p = &self.affine().parts;
        w.iter_mut().for_each(|v| *v = 0.0);
        gemv_acc(w, &p.c_w, dx);
        gemv_acc(w, &p.d_wu, du);
        gemv_acc(w, &p.d_wv, dv);
        for (t, &ph) in self.terms().iter().zip(phi) {
            if ph != 0.0 {
                for (o, g) in w.iter_mut().zip(&t.gain_w) {
                    *o += g * ph;
                }
            }
        }
    }

    /// One plant step from absolute quantities: returns `(x_next, y, w)`.
    pub fn step(
        &self,
        x: &[f64],
        u: &[f64],
        v: &[f64],
        d: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let dims = self.dims();
        check_len("state", dims.n_x, x.len())?;
        check_len("input", dims.n_u, u.len())?;
        check_len("coupling input", dims.n_v, v.len())?;
        check_len("disturbance", dims.n_d, d.len())?;
        let p = &self.affine().parts;
        let dx = sub(x, &p.x_op);
        let du = sub(u, &p.u_op);
        let dv = sub(v, &p.v_op);
        let dd = sub(d, &p.d_op);
        let mut phi = vec![0.0; self.terms().len()];
        self.eval_terms(&dx, &du, &dv, &dd, &mut phi);
        let mut next = vec![0.0; dims.n_x];
        let mut y = vec![0.0; dims.n_y];
        let mut w = vec![0.0; dims.n_w];
        self.next_dev(&dx, &du, &dv, &dd, &phi, &mut next);
        self.output_dev(&dx, &du, &dv, &phi, &mut y);
        self.coupling_dev(&dx, &du, &dv, &phi, &mut w);
        add_in_place(&mut next, &p.x_op);
        add_in_place(&mut y, &p.y_op);
        add_in_place(&mut w, &p.w_op);
        if next.iter().chain(&y).chain(&w).any(|v| !v.is_finite()) {
            return Err(Error::NumericalBlowUp { step: 0 });
        }
        Ok((next, y, w))
    }

    /// Coupling outputs only (used to resolve the interconnection at one
    /// plant instant).
    pub fn couplings(&self, x: &[f64], u: &[f64], v: &[f64], d: &[f64]) -> Vec<f64> {
        let p = &self.affine().parts;
        let dx = sub(x, &p.x_op);
        let du = sub(u, &p.u_op);
        let dv = sub(v, &p.v_op);
        let dd = sub(d, &p.d_op);
        let mut phi = vec![0.0; self.terms().len()];
        self.eval_terms(&dx, &du, &dv, &dd, &mut phi);
        let mut w = vec![0.0; p.w_op.len()];
        self.coupling_dev(&dx, &du, &dv, &phi, &mut w);
        add_in_place(&mut w, &p.w_op);
        w
    }
}

fn check_len(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        Err(Error::dims(what, expected, actual))
    } else {
        Ok(())
    }
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn add_in_place(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Iterates the model `horizon` steps from `x0`.
///
/// `u` defaults to the operating-point input when absent, `disturbance` to
/// the operating-point disturbance; the disturbance is held constant over the
/// horizon.
pub fn simulate_profile(
    model: &Dynamics,
    x0: &SubsystemState,
    u: Option<&Profile>,
    v_in: &Profile,
    disturbance: Option<&[f64]>,
    horizon: usize,
) -> Result<Trajectory> {
    let dims = model.dims();
    let p = &model.affine().parts;
    check_len("initial state", dims.n_x, x0.x.len())?;
    if x0.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state".into()));
    }
    if let Some(u) = u {
        check_len("input profile dimension", dims.n_u, u.dim())?;
        if dims.n_u > 0 {
            check_len("input profile horizon", horizon, u.horizon())?;
        }
    }
    check_len("coupling profile dimension", dims.n_v, v_in.dim())?;
    if dims.n_v > 0 {
        check_len("coupling profile horizon", horizon, v_in.horizon())?;
    }
    let dd = match disturbance {
        Some(d) => {
            check_len("disturbance", dims.n_d, d.len())?;
            sub(d, &p.d_op)
        }
        None => vec![0.0; dims.n_d],
    };

    let mut dx = sub(&x0.x, &p.x_op);
    let mut du = vec![0.0; dims.n_u];
    let mut dv = vec![0.0; dims.n_v];
    let mut phi = vec![0.0; model.terms().len()];
    let mut next = vec![0.0; dims.n_x];
    let mut ys = Vec::with_capacity(horizon * dims.n_y);
    let mut ws = Vec::with_capacity(horizon * dims.n_w);
    let mut xs = Vec::with_capacity((horizon + 1) * dims.n_x);
    let mut y = vec![0.0; dims.n_y];
    let mut w = vec![0.0; dims.n_w];
    xs.extend_from_slice(&x0.x);

    for k in 0..horizon {
        if let Some(u) = u {
            for (d, (a, o)) in du.iter_mut().zip(u.step(k).iter().zip(&p.u_op)) {
                *d = a - o;
            }
        }
        if dims.n_v > 0 {
            for (d, (a, o)) in dv.iter_mut().zip(v_in.step(k).iter().zip(&p.v_op)) {
                *d = a - o;
            }
        }
        model.eval_terms(&dx, &du, &dv, &dd, &mut phi);
        model.output_dev(&dx, &du, &dv, &phi, &mut y);
        model.coupling_dev(&dx, &du, &dv, &phi, &mut w);
        model.next_dev(&dx, &du, &dv, &dd, &phi, &mut next);
        if y.iter().chain(&w).chain(&next).any(|v| !v.is_finite()) {
            return Err(Error::NumericalBlowUp { step: k });
        }
        ys.extend(y.iter().zip(&p.y_op).map(|(a, b)| a + b));
        ws.extend(w.iter().zip(&p.w_op).map(|(a, b)| a + b));
        std::mem::swap(&mut dx, &mut next);
        xs.extend(dx.iter().zip(&p.x_op).map(|(a, b)| a + b));
    }
    // y(k+N) with the last input/coupling held.
    model.eval_terms(&dx, &du, &dv, &dd, &mut phi);
    model.output_dev(&dx, &du, &dv, &phi, &mut y);
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalBlowUp { step: horizon });
    }
    let y_terminal = y.iter().zip(&p.y_op).map(|(a, b)| a + b).collect();

    Ok(Trajectory {
        y: Profile::new(ys, dims.n_y)?,
        w: Profile::new(ws, dims.n_w)?,
        x: Profile::new(xs, dims.n_x)?,
        y_terminal,
    })
}

/// Visits the absolute outputs `y(k+1) .. y(k+N)` of a rollout without
/// building the full trajectory (no coupling outputs or state history).
/// Matches `simulate_profile(..).outputs_ahead()`.
pub fn for_each_output_ahead(
    model: &Dynamics,
    x0: &SubsystemState,
    u: &Profile,
    v_in: &Profile,
    disturbance: Option<&[f64]>,
    horizon: usize,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    let dims = model.dims();
    let p = &model.affine().parts;
    check_len("initial state", dims.n_x, x0.x.len())?;
    check_len("input profile dimension", dims.n_u, u.dim())?;
    if dims.n_u > 0 {
        check_len("input profile horizon", horizon, u.horizon())?;
    }
    check_len("coupling profile dimension", dims.n_v, v_in.dim())?;
    if dims.n_v > 0 {
        check_len("coupling profile horizon", horizon, v_in.horizon())?;
    }
    let dd = match disturbance {
        Some(d) => {
            check_len("disturbance", dims.n_d, d.len())?;
            sub(d, &p.d_op)
        }
        None => vec![0.0; dims.n_d],
    };
    let mut dx = sub(&x0.x, &p.x_op);
    let mut du = vec![0.0; dims.n_u];
    let mut dv = vec![0.0; dims.n_v];
    let mut phi = vec![0.0; model.terms().len()];
    let mut next = vec![0.0; dims.n_x];
    let mut y = vec![0.0; dims.n_y];
    for k in 0..=horizon {
        let j = k.min(horizon.saturating_sub(1));
        for (d, (a, o)) in du.iter_mut().zip(u.step(j).iter().zip(&p.u_op)) {
            *d = a - o;
        }
        if dims.n_v > 0 {
            for (d, (a, o)) in dv.iter_mut().zip(v_in.step(j).iter().zip(&p.v_op)) {
                *d = a - o;
            }
        }
        model.eval_terms(&dx, &du, &dv, &dd, &mut phi);
        if k > 0 {
            model.output_dev(&dx, &du, &dv, &phi, &mut y);
            for (a, b) in y.iter_mut().zip(&p.y_op) {
                *a += b;
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalBlowUp { step: k });
            }
            visit(k - 1, &y);
        }
        if k < horizon {
            model.next_dev(&dx, &du, &dv, &dd, &phi, &mut next);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalBlowUp { step: k });
            }
            std::mem::swap(&mut dx, &mut next);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn dims(n_x: usize, n_u: usize, n_v: usize, n_y: usize, n_w: usize) -> ModelDims {
        ModelDims {
            n_x,
            n_u,
            n_v,
            n_d: 0,
            n_y,
            n_w,
        }
    }

    #[test]
    fn one_step_delay() {
        let mut p = LinearParts::zeros(dims(1, 0, 1, 1, 1), 5.0);
        p.b_v = dmatrix![1.0];
        p.c_w = dmatrix![1.0];
        let m = Dynamics::Linear(LinearModel::new(p).unwrap());
        let v = Profile::constant(&[2.5], 4);
        let t = simulate_profile(&m, &SubsystemState::new(vec![0.0]), None, &v, None, 4).unwrap();
        assert_eq!(t.w.values(), &[0.0, 2.5, 2.5, 2.5]);
    }

    #[test]
    fn identity_dynamics_hold_output() {
        let mut p = LinearParts::zeros(dims(2, 0, 0, 1, 0), 5.0);
        p.a = DMatrix::identity(2, 2);
        p.c_y = dmatrix![1.0, 2.0];
        let m = Dynamics::Linear(LinearModel::new(p).unwrap());
        let t = simulate_profile(
            &m,
            &SubsystemState::new(vec![1.0, -1.0]),
            None,
            &Profile::empty(),
            None,
            3,
        )
        .unwrap();
        assert_eq!(t.y.values(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn blow_up_is_reported() {
        let mut p = LinearParts::zeros(dims(1, 0, 0, 1, 0), 5.0);
        p.a = dmatrix![1e200];
        p.c_y = dmatrix![1.0];
        let m = Dynamics::Linear(LinearModel::new(p).unwrap());
        let err = simulate_profile(
            &m,
            &SubsystemState::new(vec![1e200]),
            None,
            &Profile::empty(),
            None,
            5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NumericalBlowUp { .. }));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut p = LinearParts::zeros(dims(2, 0, 0, 1, 0), 5.0);
        p.a = DMatrix::zeros(3, 3);
        assert!(LinearModel::new(p).is_err());
    }

    #[test]
    fn spectral_radius_reported() {
        let mut p = LinearParts::zeros(dims(2, 0, 0, 0, 0), 5.0);
        p.a = dmatrix![0.0, -0.5; 0.5, 0.0];
        let m = LinearModel::new(p).unwrap();
        assert!((m.spectral_radius() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sqrt_flow_vanishes_at_op() {
        let t = NonlinearTerm {
            kind: TermKind::SqrtFlow,
            coeff: 0.5,
            args: [
                AffineArg {
                    op: 4.0,
                    u: vec![(0, 1.0)],
                    ..Default::default()
                },
                AffineArg {
                    op: 9.0,
                    ..Default::default()
                },
            ],
            gain_x: vec![],
            gain_y: vec![],
            gain_w: vec![],
        };
        assert_eq!(t.eval(&[], &[0.0], &[], &[]), 0.0);
        // (4+5)*9 = 81 -> 0.5*9 - 0.5*6
        assert!((t.eval(&[], &[5.0], &[], &[]) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn lean_rollout_matches_trajectory() {
        let sys = crate::closedloop::build_coldbox_2ss().unwrap();
        let s = &sys.subsystems()[1];
        let p = s.dynamics.affine().parts();
        let x0 = SubsystemState::new(
            p.x_op
                .iter()
                .enumerate()
                .map(|(i, x)| x + 0.01 * i as f64)
                .collect(),
        );
        let u = Profile::new((0..6).map(|k| 5.0 + 0.3 * k as f64).collect(), 1).unwrap();
        let v: Vec<f64> = (0..6)
            .flat_map(|k| p.v_op.iter().map(move |v| v * (1.0 + 0.01 * k as f64)))
            .collect();
        let v = Profile::new(v, p.v_op.len()).unwrap();
        let full = simulate_profile(&s.dynamics, &x0, Some(&u), &v, Some(&p.d_op), 6)
            .unwrap()
            .outputs_ahead();
        let mut lean = Vec::new();
        for_each_output_ahead(&s.dynamics, &x0, &u, &v, Some(&p.d_op), 6, |_, y| {
            lean.extend_from_slice(y)
        })
        .unwrap();
        assert_eq!(full.values(), &lean[..]);
    }
}
