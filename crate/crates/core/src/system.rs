//! Subsystems with their local controllers, and the decomposed system.

use std::time::Instant;

use crate::control::{nmpc_solve, ControllerKind, ControllerSpec, LinearMpc, NmpcParams, Problem};
use crate::coordinator::{Agent, AgentResponse, SolveTiming};
use crate::error::{Error, Result};
use crate::graph::{build_routing, CouplingEdge, RoutingMatrix, SubsystemId, Topology};
use crate::model::cost::LocalCost;
use crate::model::{simulate_profile, Dynamics, SubsystemState};
use crate::profile::{blocks_to_steps, steps_to_blocks, Profile};

/// Everything needed to build a [`Subsystem`].
#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemDef {
    pub id: usize,
    pub name: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub disturbances: Vec<String>,
    /// Plant subsystems whose stacked state this subsystem models (itself
    /// when empty).
    pub members: Vec<usize>,
    pub dynamics: Dynamics,
    pub cost: LocalCost,
    pub controller: Option<ControllerSpec>,
    /// Output indices whose reference is the coordinator's set-point.
    pub setpoint: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Subsystem {
    pub id: SubsystemId,
    pub name: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub disturbances: Vec<String>,
    pub members: Vec<SubsystemId>,
    pub dynamics: Dynamics,
    pub cost: LocalCost,
    pub controller: Option<ControllerSpec>,
    pub setpoint: Vec<usize>,
    mpc: Option<LinearMpc>,
}

/// Local information a subsystem holds during one sampling period.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalContext {
    pub state: SubsystemState,
    pub disturbance: Vec<f64>,
    /// Desired value per regulated output (`r_d`).
    pub desired: Vec<f64>,
    /// Upper bound per regulated output (`+inf` when unconstrained).
    pub upper: Vec<f64>,
    /// Previously applied input.
    pub last_input: Vec<f64>,
    /// Shifted input plan of the previous period.
    pub warm_start: Option<Profile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    /// `y(k+1) .. y(k+N)`
    pub y: Profile,
    /// `w(k) .. w(k+N-1)` in per-step layout.
    pub w: Profile,
    pub u: Option<Profile>,
    pub cost: f64,
    pub timing: SolveTiming,
}

impl Subsystem {
    pub fn is_controlled(&self) -> bool {
        self.controller.is_some()
    }

    /// Nominal context: operating-point state, input and disturbance,
    /// desired outputs at the operating point.
    pub fn nominal_context(&self) -> LocalContext {
        let p = self.dynamics.affine().parts();
        LocalContext {
            state: SubsystemState::new(p.x_op.clone()),
            disturbance: p.d_op.clone(),
            desired: p.y_op.clone(),
            upper: self.cost.default_upper(p.y_op.len()),
            last_input: p.u_op.clone(),
            warm_start: None,
        }
    }

    /// Controller reference: desired values of the tracked outputs with the
    /// set-point outputs replaced by `r_s`.
    fn reference(&self, spec: &ControllerSpec, desired: &[f64], r_s: &[f64]) -> Vec<f64> {
        spec.tracked
            .iter()
            .map(|&o| match self.setpoint.iter().position(|&s| s == o) {
                Some(i) => r_s[i],
                None => desired[o],
            })
            .collect()
    }

    fn check_context(&self, ctx: &LocalContext) -> Result<()> {
        let d = self.dynamics.dims();
        let check = |what: &str, expected: usize, actual: usize| {
            if expected != actual {
                Err(Error::dims(what, expected, actual))
            } else {
                Ok(())
            }
        };
        check("state", d.n_x, ctx.state.x.len())?;
        check("disturbance", d.n_d, ctx.disturbance.len())?;
        check("desired outputs", d.n_y, ctx.desired.len())?;
        check("upper bounds", d.n_y, ctx.upper.len())?;
        check("previous input", d.n_u, ctx.last_input.len())
    }

    /// Local processing for one presumed incoming profile: plan inputs (for
    /// a controlled subsystem), predict, and report `v_out` and `J_s`.
    pub fn respond(
        &self,
        ctx: &LocalContext,
        r_s: Option<&[f64]>,
        v_in: &Profile,
        horizon: usize,
    ) -> Result<LocalOutcome> {
        self.check_context(ctx)?;
        let mut timing = SolveTiming::default();
        let u = match (&self.controller, r_s) {
            (None, Some(_)) => return Err(Error::UnexpectedSetpoint(self.id.0)),
            (Some(_), None) => return Err(Error::MissingSetpoint(self.id.0)),
            (None, None) => None,
            (Some(spec), Some(r_s)) => {
                if r_s.len() != self.setpoint.len() {
                    return Err(Error::dims("set-point", self.setpoint.len(), r_s.len()));
                }
                let reference = self.reference(spec, &ctx.desired, r_s);
                let problem = Problem {
                    model: &self.dynamics,
                    x0: &ctx.state,
                    v_in,
                    disturbance: Some(&ctx.disturbance),
                    reference: &reference,
                    last_input: &ctx.last_input,
                    horizon,
                };
                match &spec.kind {
                    ControllerKind::Mpc => {
                        let start = Instant::now();
                        let u = match &self.mpc {
                            Some(m) if m.horizon() == horizon => m.solve(&problem)?,
                            _ => LinearMpc::new(&self.dynamics, spec, horizon)?.solve(&problem)?,
                        };
                        timing.mpc = start.elapsed();
                        Some(u)
                    }
                    ControllerKind::Nmpc(params) => {
                        let out = nmpc_solve(spec, params, &problem, ctx.warm_start.as_ref())?;
                        timing.nmpc = out.elapsed;
                        timing.nmpc_calls = 1;
                        timing.budget_exhausted = usize::from(out.budget_exhausted);
                        Some(out.u)
                    }
                }
            }
        };
        let traj = simulate_profile(
            &self.dynamics,
            &ctx.state,
            u.as_ref(),
            v_in,
            Some(&ctx.disturbance),
            horizon,
        )?;
        let y = traj.outputs_ahead();
        let cost = self
            .cost
            .evaluate(&y, u.as_ref(), &ctx.desired, &ctx.upper)?;
        Ok(LocalOutcome {
            y,
            w: traj.w,
            u,
            cost,
            timing,
        })
    }
}

/// A subsystem bound to its context and its place in the routing.
pub struct LocalAgent<'a> {
    pub subsystem: &'a Subsystem,
    pub context: &'a LocalContext,
    in_dims: &'a [usize],
    out_dims: &'a [usize],
    horizon: usize,
}

impl Agent for LocalAgent<'_> {
    fn id(&self) -> SubsystemId {
        self.subsystem.id
    }

    fn controlled(&self) -> bool {
        self.subsystem.is_controlled()
    }

    fn setpoint_dim(&self) -> usize {
        self.subsystem.setpoint.len()
    }

    fn respond(&self, r: Option<&[f64]>, v_in: &[f64]) -> Result<AgentResponse> {
        let v = blocks_to_steps(v_in, self.in_dims, self.horizon)?;
        let out = self.subsystem.respond(self.context, r, &v, self.horizon)?;
        Ok(AgentResponse {
            v_out: steps_to_blocks(&out.w, self.out_dims)?,
            cost: out.cost,
            u: out.u,
            timing: out.timing,
        })
    }
}

/// Coupling edge with its signal names.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDef {
    pub from: usize,
    pub to: usize,
    pub signals: Vec<String>,
}

/// A decomposed system: subsystems, topology and routing.
#[derive(Debug, Clone)]
pub struct System {
    pub name: String,
    topology: Topology,
    routing: RoutingMatrix,
    subsystems: Vec<Subsystem>,
    /// Signal names per edge, aligned with `topology.edges()`.
    edge_signals: Vec<Vec<String>>,
    ts: f64,
}

fn offset_of(edges: &[CouplingEdge], hit: impl Fn(&CouplingEdge) -> bool) -> usize {
    edges.iter().take_while(|e| !hit(e)).map(|e| e.dim).sum()
}

fn names_match(what: &str, names: &[String], n: usize) -> Result<()> {
    if names.len() != n {
        return Err(Error::dims(format!("{what} names"), n, names.len()));
    }
    Ok(())
}

impl System {
    pub fn new(
        name: impl Into<String>,
        horizon: usize,
        defs: Vec<SubsystemDef>,
        edges: Vec<EdgeDef>,
    ) -> Result<Self> {
        let mut defs = defs;
        defs.sort_by_key(|d| d.id);
        let n_s = defs.len();
        for (i, d) in defs.iter().enumerate() {
            if d.id != i + 1 {
                return Err(Error::InvalidTopology(format!(
                    "subsystem ids must be 1..={n_s} without gaps or repeats"
                )));
            }
        }
        let controlled: Vec<usize> = defs
            .iter()
            .filter(|d| d.controller.is_some())
            .map(|d| d.id)
            .collect();
        let topology = Topology::new(
            n_s,
            controlled,
            edges
                .iter()
                .map(|e| CouplingEdge::new(e.from, e.to, e.signals.len())),
            horizon,
        );
        let report = topology.validate();
        if !report.is_ok() {
            return Err(Error::InvalidTopology(report.to_string()));
        }
        let routing = build_routing(&topology)?;
        let edge_signals: Vec<Vec<String>> = topology
            .edges()
            .iter()
            .map(|e| {
                edges
                    .iter()
                    .find(|d| d.from == e.source.0 && d.to == e.dest.0)
                    .map(|d| d.signals.clone())
                    .unwrap_or_default()
            })
            .collect();

        let ts = defs.first().map(|d| d.dynamics.ts()).unwrap_or(1.0);
        let mut subsystems = Vec::with_capacity(n_s);
        for d in defs {
            let id = SubsystemId(d.id);
            let wrap = |e: Error| e.in_subsystem(d.id);
            let dims = d.dynamics.dims();
            if (d.dynamics.ts() - ts).abs() > 1e-12 {
                return Err(wrap(Error::InvalidArgument(
                    "sampling periods differ".into(),
                )));
            }
            if dims.n_v != topology.in_dim(id)? {
                return Err(wrap(Error::dims(
                    "coupling inputs vs. incoming edges",
                    topology.in_dim(id)?,
                    dims.n_v,
                )));
            }
            if dims.n_w != topology.out_dim(id)? {
                return Err(wrap(Error::dims(
                    "coupling outputs vs. outgoing edges",
                    topology.out_dim(id)?,
                    dims.n_w,
                )));
            }
            names_match("input", &d.inputs, dims.n_u).map_err(wrap)?;
            names_match("output", &d.outputs, dims.n_y).map_err(wrap)?;
            names_match("disturbance", &d.disturbances, dims.n_d).map_err(wrap)?;
            d.cost.check(dims.n_y, dims.n_u).map_err(wrap)?;
            let mut mpc = None;
            match &d.controller {
                None => {
                    if dims.n_u > 0 || !d.setpoint.is_empty() {
                        return Err(wrap(Error::InvalidArgument(
                            "an uncontrolled subsystem cannot have inputs or set-points".into(),
                        )));
                    }
                }
                Some(spec) => {
                    spec.check(dims.n_y, dims.n_u).map_err(wrap)?;
                    if let Some(&o) = d.setpoint.iter().find(|o| !spec.tracked.contains(o)) {
                        return Err(wrap(Error::InvalidArgument(format!(
                            "set-point output {o} is not tracked by the controller"
                        ))));
                    }
                    if spec.kind == ControllerKind::Mpc {
                        if !d.dynamics.is_linear() {
                            return Err(Error::NotLinear(d.id));
                        }
                        mpc = Some(LinearMpc::new(&d.dynamics, spec, horizon).map_err(wrap)?);
                    }
                }
            }
            let members = if d.members.is_empty() {
                vec![id]
            } else {
                d.members.iter().map(|&m| SubsystemId(m)).collect()
            };
            subsystems.push(Subsystem {
                id,
                name: d.name,
                inputs: d.inputs,
                outputs: d.outputs,
                disturbances: d.disturbances,
                members,
                dynamics: d.dynamics,
                cost: d.cost,
                controller: d.controller,
                setpoint: d.setpoint,
                mpc,
            });
        }
        for (e, signals) in topology.edges().iter().zip(&edge_signals) {
            let src = &subsystems[e.source.index()];
            let dst = &subsystems[e.dest.index()];
            let w_op = &src.dynamics.affine().parts().w_op;
            let v_op = &dst.dynamics.affine().parts().v_op;
            let w_off = offset_of(&topology.stack_out(e.source)?, |o| o.dest == e.dest);
            let v_off = offset_of(&topology.stack_in(e.dest)?, |o| o.source == e.source);
            for (i, name) in signals.iter().enumerate() {
                let (a, b) = (w_op[w_off + i], v_op[v_off + i]);
                if (a - b).abs() > 1e-9 * (1.0 + a.abs()) {
                    return Err(Error::InvalidArgument(format!(
                        "operating points disagree on signal {name} of edge {}->{}: {a} vs {b}",
                        e.source.0, e.dest.0
                    )));
                }
            }
        }
        Ok(Self {
            name: name.into(),
            topology,
            routing,
            subsystems,
            edge_signals,
            ts,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn routing(&self) -> &RoutingMatrix {
        &self.routing
    }

    pub fn subsystems(&self) -> &[Subsystem] {
        &self.subsystems
    }

    pub fn subsystem(&self, id: SubsystemId) -> Result<&Subsystem> {
        self.subsystems
            .get(id.index())
            .ok_or(Error::UnknownSubsystem(id.0))
    }

    pub fn edge_signals(&self) -> &[Vec<String>] {
        &self.edge_signals
    }

    /// `(source, signal)` for every entry of `v_s`, in stack order.
    pub fn in_signals(&self, s: SubsystemId) -> Result<Vec<(SubsystemId, String)>> {
        let mut out = Vec::new();
        for e in self.topology.stack_in(s)? {
            out.extend(self.signals_of(&e).iter().map(|n| (e.source, n.clone())));
        }
        Ok(out)
    }

    /// `(destination, signal)` for every entry of `w_s`, in stack order.
    pub fn out_signals(&self, s: SubsystemId) -> Result<Vec<(SubsystemId, String)>> {
        let mut out = Vec::new();
        for e in self.topology.stack_out(s)? {
            out.extend(self.signals_of(&e).iter().map(|n| (e.dest, n.clone())));
        }
        Ok(out)
    }

    fn signals_of(&self, e: &CouplingEdge) -> &[String] {
        let i = self
            .topology
            .edges()
            .iter()
            .position(|x| x == e)
            .expect("edge of this topology");
        &self.edge_signals[i]
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn horizon(&self) -> usize {
        self.topology.horizon()
    }

    /// Replaces the solver parameters of every NMPC controller.
    pub fn set_nmpc_params(&mut self, params: &NmpcParams) -> Result<()> {
        params.check()?;
        for s in &mut self.subsystems {
            if let Some(ControllerSpec {
                kind: ControllerKind::Nmpc(p),
                ..
            }) = &mut s.controller
            {
                *p = params.clone();
            }
        }
        Ok(())
    }

    pub fn setpoint_dim(&self) -> usize {
        self.subsystems
            .iter()
            .filter(|s| s.is_controlled())
            .map(|s| s.setpoint.len())
            .sum()
    }

    /// Agents bound to `contexts` (one per subsystem, id order).
    pub fn agents<'a>(&'a self, contexts: &'a [LocalContext]) -> Result<Vec<LocalAgent<'a>>> {
        if contexts.len() != self.subsystems.len() {
            return Err(Error::dims(
                "local contexts",
                self.subsystems.len(),
                contexts.len(),
            ));
        }
        Ok(self
            .subsystems
            .iter()
            .zip(contexts)
            .map(|(s, c)| LocalAgent {
                subsystem: s,
                context: c,
                in_dims: self.routing.in_edge_dims(s.id),
                out_dims: self.routing.out_edge_dims(s.id),
                horizon: self.horizon(),
            })
            .collect())
    }

    /// Stacked `r_d` for the set-point outputs of the controlled subsystems.
    pub fn desired_setpoint(&self, contexts: &[LocalContext]) -> Vec<f64> {
        self.subsystems
            .iter()
            .zip(contexts)
            .filter(|(s, _)| s.is_controlled())
            .flat_map(|(s, c)| s.setpoint.iter().map(move |&o| c.desired[o]))
            .collect()
    }

    /// In-stack holding every subsystem's operating-point coupling input
    /// over the whole horizon.
    pub fn nominal_couplings(&self) -> Result<Vec<f64>> {
        let n = self.horizon();
        let mut out = Vec::with_capacity(self.routing.in_len());
        for s in &self.subsystems {
            let v_op = &s.dynamics.affine().parts().v_op;
            out.extend(steps_to_blocks(
                &Profile::constant(v_op, n),
                self.routing.in_edge_dims(s.id),
            )?);
        }
        Ok(out)
    }

    /// In-stack built from one coupling value per incoming signal, held over
    /// the horizon. `values` lists each subsystem's `v_in` in id order.
    pub fn held_couplings(&self, values: &[Vec<f64>]) -> Result<Vec<f64>> {
        let n = self.horizon();
        let mut out = Vec::with_capacity(self.routing.in_len());
        for (s, v) in self.subsystems.iter().zip(values) {
            out.extend(steps_to_blocks(
                &Profile::constant(v, n),
                self.routing.in_edge_dims(s.id),
            )?);
        }
        Ok(out)
    }

    /// Every edge block of an in-stack shifted one step ahead, last step held.
    pub fn shift_couplings(&self, v_in: &[f64]) -> Result<Vec<f64>> {
        if v_in.len() != self.routing.in_len() {
            return Err(Error::dims(
                "stacked incoming profile",
                self.routing.in_len(),
                v_in.len(),
            ));
        }
        let n = self.horizon();
        let mut out = Vec::with_capacity(v_in.len());
        let mut pos = 0;
        for s in &self.subsystems {
            for &d in self.routing.in_edge_dims(s.id) {
                let block = &v_in[pos..pos + d * n];
                if n > 1 {
                    out.extend_from_slice(&block[d..]);
                }
                out.extend_from_slice(&block[(n - 1) * d..]);
                pos += d * n;
            }
        }
        Ok(out)
    }

    /// First-step values of each subsystem's incoming block, id order.
    pub fn first_step_couplings(&self, v_in: &[f64]) -> Result<Vec<Vec<f64>>> {
        let n = self.horizon();
        self.subsystems
            .iter()
            .map(|s| {
                let range = self.routing.in_range(s.id);
                let p = blocks_to_steps(&v_in[range], self.routing.in_edge_dims(s.id), n)?;
                Ok(p.step(0).to_vec())
            })
            .collect()
    }
}
