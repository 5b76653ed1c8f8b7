//! The simulated plant: true interconnection of subsystem models.

use crate::error::{Error, Result};
use crate::graph::{build_routing, RoutingMatrix, SubsystemId, Topology};
use crate::system::System;

/// Measurements produced by one plant step.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantStep {
    pub x_next: Vec<Vec<f64>>,
    /// Regulated outputs at the current instant, per subsystem.
    pub y: Vec<Vec<f64>>,
    /// Actual coupling inputs at the current instant, per subsystem.
    pub v: Vec<Vec<f64>>,
}

/// Routing of instantaneous coupling values (horizon one).
#[derive(Debug, Clone)]
pub struct Interconnection {
    routing: RoutingMatrix,
}

impl Interconnection {
    pub fn new(system: &System) -> Result<Self> {
        let t = system.topology();
        let one = Topology::new(
            t.n_s(),
            t.controlled().map(|s| s.0),
            t.edges().iter().copied(),
            1,
        );
        Ok(Self {
            routing: build_routing(&one)?,
        })
    }

    /// Coupling inputs consistent with the given states, inputs and
    /// disturbances. Feedthrough chains are followed by repeated passes; a
    /// chain that does not settle is an algebraic loop.
    pub fn resolve(
        &self,
        system: &System,
        x: &[Vec<f64>],
        u: &[Vec<f64>],
        d: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        let subs = system.subsystems();
        let mut v: Vec<Vec<f64>> = subs
            .iter()
            .map(|s| s.dynamics.affine().parts().v_op.clone())
            .collect();
        for _ in 0..=subs.len() {
            let mut w = Vec::with_capacity(self.routing.out_len());
            for (i, s) in subs.iter().enumerate() {
                w.extend(s.dynamics.couplings(&x[i], &u[i], &v[i], &d[i]));
            }
            let stacked = self.routing.apply(&w)?;
            let next: Vec<Vec<f64>> = subs
                .iter()
                .map(|s| stacked[self.routing.in_range(s.id)].to_vec())
                .collect();
            if next.iter().flatten().any(|a| !a.is_finite()) {
                return Err(Error::NonFinite("plant couplings".into()));
            }
            if next == v {
                return Ok(v);
            }
            v = next;
        }
        Err(Error::AlgebraicLoop)
    }

    /// Advances every subsystem one sampling period with the actual
    /// couplings.
    pub fn step(
        &self,
        system: &System,
        x: &[Vec<f64>],
        u: &[Vec<f64>],
        d: &[Vec<f64>],
    ) -> Result<PlantStep> {
        let v = self.resolve(system, x, u, d)?;
        let mut x_next = Vec::with_capacity(x.len());
        let mut y = Vec::with_capacity(x.len());
        for (i, s) in system.subsystems().iter().enumerate() {
            let (xn, yi, _) = s
                .dynamics
                .step(&x[i], &u[i], &v[i], &d[i])
                .map_err(|e| e.in_subsystem(s.id.0))?;
            x_next.push(xn);
            y.push(yi);
        }
        Ok(PlantStep { x_next, y, v })
    }
}

/// One step from the plant's own operating point data.
pub fn step_plant(
    system: &System,
    x: &[Vec<f64>],
    u: &[Vec<f64>],
    d: &[Vec<f64>],
) -> Result<PlantStep> {
    let n = system.subsystems().len();
    for (what, v) in [("states", x), ("inputs", u), ("disturbances", d)] {
        if v.len() != n {
            return Err(Error::dims(format!("plant {what}"), n, v.len()));
        }
    }
    for (i, s) in system.subsystems().iter().enumerate() {
        if let Some(spec) = &s.controller {
            let b = spec.bounds()?;
            if !b.contains(&u[i]) {
                return Err(Error::InvalidArgument(format!(
                    "input of subsystem {} outside its box",
                    s.id.0
                )));
            }
        }
    }
    Interconnection::new(system)?.step(system, x, u, d)
}

/// Operating-point states, inputs and disturbances of every subsystem.
pub fn operating_point(system: &System) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let parts = system
        .subsystems()
        .iter()
        .map(|s| s.dynamics.affine().parts());
    let mut x = Vec::new();
    let mut u = Vec::new();
    let mut d = Vec::new();
    for p in parts {
        x.push(p.x_op.clone());
        u.push(p.u_op.clone());
        d.push(p.d_op.clone());
    }
    (x, u, d)
}

/// Subsystem index holding the named input / output / disturbance.
pub(crate) fn find_signal(system: &System, kind: SignalKind, name: &str) -> Option<(usize, usize)> {
    system.subsystems().iter().enumerate().find_map(|(i, s)| {
        let list = match kind {
            SignalKind::Input => &s.inputs,
            SignalKind::Disturbance => &s.disturbances,
        };
        list.iter().position(|n| n == name).map(|j| (i, j))
    })
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum SignalKind {
    Input,
    Disturbance,
}

pub(crate) fn id_of(i: usize) -> SubsystemId {
    SubsystemId(i + 1)
}
