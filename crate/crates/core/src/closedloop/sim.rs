//! Hierarchical and decentralized receding-horizon runs.

use std::borrow::Cow;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use log::{debug, info};

use super::plant::{find_signal, id_of, operating_point, Interconnection, SignalKind};
use super::scenario::Scenario;
use super::trace::{stage_costs, ClosedLoopTrace, TraceRow};
use crate::coordinator::{
    estimate_map_gain, filter_gains, fixed_point_solve, optimize_setpoint, synthesize_filter,
    Agent, Evaluation, FilterMode, FixedPointResult, SetpointBounds, SolveTiming, TrustRegionState,
};
use crate::error::{Error, Result};
use crate::profile::{rms_diff, Profile};
use crate::system::{LocalContext, System};

/// How the signals of a control strategy map onto the plant.
#[derive(Debug, Clone)]
struct Binding {
    /// Plant subsystems whose states make up each strategy state.
    members: Vec<Vec<usize>>,
    inputs: Vec<Vec<(usize, usize)>>,
    disturbances: Vec<Vec<(usize, usize)>>,
    /// Plant coupling input feeding each strategy coupling input.
    couplings: Vec<Vec<(usize, usize)>>,
}

impl Binding {
    fn new(plant: &System, strategy: &System) -> Result<Self> {
        let n_p = plant.subsystems().len();
        let mut b = Binding {
            members: Vec::new(),
            inputs: Vec::new(),
            disturbances: Vec::new(),
            couplings: Vec::new(),
        };
        for s in strategy.subsystems() {
            let members: Vec<usize> = s.members.iter().map(|m| m.index()).collect();
            if members.iter().any(|&m| m >= n_p) {
                return Err(Error::Config(format!(
                    "{}: member outside the plant",
                    s.name
                )));
            }
            let n_x: usize = members
                .iter()
                .map(|&m| plant.subsystems()[m].dynamics.dims().n_x)
                .sum();
            if n_x != s.dynamics.dims().n_x {
                return Err(Error::dims(
                    format!("state of {} vs. its plant members", s.name),
                    n_x,
                    s.dynamics.dims().n_x,
                ));
            }
            let lookup = |kind, name: &String| {
                find_signal(plant, kind, name).ok_or_else(|| {
                    Error::Config(format!("{}: plant has no signal `{name}`", s.name))
                })
            };
            b.inputs.push(
                s.inputs
                    .iter()
                    .map(|n| lookup(SignalKind::Input, n))
                    .collect::<Result<_>>()?,
            );
            b.disturbances.push(
                s.disturbances
                    .iter()
                    .map(|n| lookup(SignalKind::Disturbance, n))
                    .collect::<Result<_>>()?,
            );
            let mut couplings = Vec::new();
            for (src, name) in strategy.in_signals(s.id)? {
                let sources: Vec<usize> = strategy
                    .subsystem(src)?
                    .members
                    .iter()
                    .map(|m| m.index())
                    .collect();
                let mut hit = None;
                'search: for &p in &members {
                    for (j, (from, n)) in plant.in_signals(id_of(p))?.iter().enumerate() {
                        if *n == name && sources.contains(&from.index()) {
                            hit = Some((p, j));
                            break 'search;
                        }
                    }
                }
                couplings.push(hit.ok_or_else(|| {
                    Error::Config(format!(
                        "{}: no plant coupling `{name}` from subsystem {}",
                        s.name, src.0
                    ))
                })?);
            }
            b.couplings.push(couplings);
            b.members.push(members);
        }
        Ok(b)
    }

    fn gather(pairs: &[(usize, usize)], values: &[Vec<f64>]) -> Vec<f64> {
        pairs.iter().map(|&(i, j)| values[i][j]).collect()
    }
}

/// Closed-loop state shared by both strategies.
struct Loop<'a> {
    plant: &'a System,
    strategy: &'a System,
    scenario: &'a Scenario,
    binding: Binding,
    net: Interconnection,
    x: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    /// Last applied plan per strategy subsystem.
    plans: Vec<Option<Profile>>,
    trace: ClosedLoopTrace,
}

/// What a strategy decided in one period.
struct Decision {
    inputs: Vec<Option<Profile>>,
    v_presumed: Vec<f64>,
    r_d: Vec<f64>,
    r_opt: Vec<f64>,
    j_c: f64,
    sigma_used: usize,
    evaluations: usize,
    converged: bool,
    alpha: f64,
    timing: SolveTiming,
}

impl<'a> Loop<'a> {
    fn new(
        plant: &'a System,
        strategy: &'a System,
        scenario: &'a Scenario,
        label: &str,
    ) -> Result<Self> {
        scenario.check()?;
        if (plant.ts() - strategy.ts()).abs() > 1e-12 {
            return Err(Error::Config(
                "plant and strategy sampling periods differ".into(),
            ));
        }
        let binding = Binding::new(plant, strategy)?;
        let (x, u, _) = operating_point(plant);
        let trace = ClosedLoopTrace::new(plant, strategy, scenario, label)?;
        Ok(Self {
            plant,
            strategy,
            scenario,
            binding,
            net: Interconnection::new(plant)?,
            x,
            u,
            plans: vec![None; strategy.subsystems().len()],
            trace,
        })
    }

    fn disturbances(&self, k: usize) -> Vec<Vec<f64>> {
        self.plant
            .subsystems()
            .iter()
            .map(|s| {
                let d_op = &s.dynamics.affine().parts().d_op;
                s.disturbances
                    .iter()
                    .zip(d_op)
                    .map(|(n, op)| self.scenario.disturbance_at(n, k).unwrap_or(*op))
                    .collect()
            })
            .collect()
    }

    /// Local contexts of the strategy subsystems at step `k`, plus the
    /// measured coupling inputs of each (held inputs, current states).
    fn contexts(&self, k: usize, d: &[Vec<f64>]) -> Result<(Vec<LocalContext>, Vec<Vec<f64>>)> {
        let v_plant = self.net.resolve(self.plant, &self.x, &self.u, d)?;
        let mut ctxs = Vec::new();
        let mut measured = Vec::new();
        for (i, s) in self.strategy.subsystems().iter().enumerate() {
            let p = s.dynamics.affine().parts();
            let state = self.binding.members[i]
                .iter()
                .flat_map(|&m| self.x[m].iter().copied())
                .collect();
            let desired = s
                .outputs
                .iter()
                .zip(&p.y_op)
                .map(|(n, op)| self.scenario.desired_at(n, k).unwrap_or(*op))
                .collect();
            let default_upper = s.cost.default_upper(s.outputs.len());
            let upper = s
                .outputs
                .iter()
                .zip(default_upper)
                .map(|(n, b)| self.scenario.upper_at(n, k).unwrap_or(b))
                .collect();
            ctxs.push(LocalContext {
                state: crate::model::SubsystemState::new(state),
                disturbance: Binding::gather(&self.binding.disturbances[i], d),
                desired,
                upper,
                last_input: Binding::gather(&self.binding.inputs[i], &self.u),
                warm_start: self.plans[i].as_ref().map(Profile::shifted),
            });
            measured.push(Binding::gather(&self.binding.couplings[i], &v_plant));
        }
        Ok((ctxs, measured))
    }

    /// Applies the first moves, advances the plant and records the row.
    fn apply(&mut self, k: usize, d: &[Vec<f64>], dec: Decision, started: Instant) -> Result<()> {
        for (i, plan) in dec.inputs.iter().enumerate() {
            if let Some(plan) = plan {
                for (j, &(p, q)) in self.binding.inputs[i].iter().enumerate() {
                    self.u[p][q] = plan.step(0)[j];
                }
            }
        }
        for (i, s) in self.plant.subsystems().iter().enumerate() {
            if let Some(spec) = &s.controller {
                spec.bounds()?.clip(&mut self.u[i]);
            }
        }
        let cycle = started.elapsed();
        self.plans = dec.inputs;
        let step = self.net.step(self.plant, &self.x, &self.u, d)?;
        let presumed_actual: Vec<f64> = self
            .binding
            .couplings
            .iter()
            .flat_map(|c| Binding::gather(c, &step.v))
            .collect();
        let costs = stage_costs(self.plant, self.scenario, k, &step.y, &self.u)?;
        let ms = |t: Duration| t.as_secs_f64() * 1e3;
        self.trace.rows.push(TraceRow {
            step: k,
            time_s: k as f64 * self.plant.ts(),
            u: self.u.concat(),
            y: step.y.concat(),
            v: step.v.concat(),
            presumption_error: rms_diff(&dec.v_presumed, &presumed_actual),
            v_presumed: dec.v_presumed,
            r_d: dec.r_d,
            r_opt: dec.r_opt,
            j_c: dec.j_c,
            stage_costs: costs,
            sigma_used: dec.sigma_used,
            evaluations: dec.evaluations,
            converged: dec.converged,
            alpha: dec.alpha,
            nmpc_budget_hits: dec.timing.budget_exhausted,
            nmpc_calls: dec.timing.nmpc_calls,
            walltime_ms_mpc: ms(dec.timing.mpc),
            walltime_ms_nmpc: ms(dec.timing.nmpc),
            walltime_ms_cycle: ms(cycle),
        });
        self.x = step.x_next;
        Ok(())
    }

    fn run(
        mut self,
        mut decide: impl FnMut(&Self, usize, &[LocalContext], &[Vec<f64>]) -> Result<Decision>,
    ) -> ClosedLoopTrace {
        for k in 0..self.scenario.steps {
            let started = Instant::now();
            let d = self.disturbances(k);
            let result = self
                .contexts(k, &d)
                .and_then(|(ctxs, measured)| decide(&self, k, &ctxs, &measured))
                .and_then(|dec| self.apply(k, &d, dec, started));
            if let Err(e) = result {
                info!("run stopped at step {k}: {e}");
                self.trace.failure = Some(format!("step {k}: {e}"));
                break;
            }
        }
        self.trace
    }
}

/// The strategy with the scenario's NMPC parameters applied.
fn tuned<'a>(strategy: &'a System, scenario: &Scenario) -> Result<Cow<'a, System>> {
    Ok(match &scenario.nmpc {
        None => Cow::Borrowed(strategy),
        Some(p) => {
            let mut s = strategy.clone();
            s.set_nmpc_params(p)?;
            Cow::Owned(s)
        }
    })
}

fn filter_vector(
    mode: &FilterMode,
    agents: &[&dyn Agent],
    strategy: &System,
    r: &[f64],
    v: &[f64],
    config: &crate::coordinator::CoordinatorConfig,
) -> Result<(Vec<f64>, f64)> {
    let n = strategy.routing().in_len();
    Ok(match mode {
        FilterMode::Identity => (vec![1.0; n], 1.0),
        FilterMode::Uniform { alpha } => (vec![*alpha; n], *alpha),
        FilterMode::PerChannel { gains } => {
            let g = filter_gains(strategy.routing(), gains)?;
            let mean = if gains.is_empty() {
                1.0
            } else {
                gains.iter().sum::<f64>() / gains.len() as f64
            };
            (g, mean)
        }
        FilterMode::Synthesized { kappa, power_iters } => {
            let rho = estimate_map_gain(
                agents,
                strategy.routing(),
                r,
                v,
                *power_iters,
                config.gain_probe,
                config.seed,
            )?;
            let alpha = synthesize_filter(rho, *kappa)?;
            (vec![alpha; n], alpha)
        }
    })
}

/// Hierarchical control: each period the coordinator optimizes the
/// auxiliary set-point, the controlled subsystems apply their plans at the
/// reconciled couplings, and the plant advances with its true couplings.
///
/// A solver failure ends the run; the partial trace carries the message.
pub fn run_hierarchical(
    plant: &System,
    strategy: &System,
    scenario: &Scenario,
) -> Result<ClosedLoopTrace> {
    let strategy = tuned(strategy, scenario)?;
    let lp = Loop::new(plant, &strategy, scenario, "hierarchical")?;
    let config = scenario.coordinator.clone();
    let mut tr: Option<TrustRegionState> = None;
    let mut v_prev: Option<Vec<f64>> = None;
    Ok(lp.run(|lp, k, ctxs, measured| {
        let sys = lp.strategy;
        let agents = sys.agents(ctxs)?;
        let dyn_agents: Vec<&dyn Agent> = agents.iter().map(|a| a as &dyn Agent).collect();
        let r_d = sys.desired_setpoint(ctxs);
        let bounds = SetpointBounds::around(&r_d, scenario.setpoint_range);
        let state = match tr.as_mut() {
            Some(s) => {
                bounds.clip(&mut s.center);
                s
            }
            None => tr.insert(TrustRegionState::new(r_d.clone(), &bounds, &config)?),
        };
        let v0 = match &v_prev {
            Some(v) => sys.shift_couplings(v)?,
            None => sys.held_couplings(measured)?,
        };
        let (gains, alpha) = filter_vector(
            &config.filter,
            &dyn_agents,
            sys,
            &state.center,
            &v0,
            &config,
        )?;
        let spent = Mutex::new(SolveTiming::default());
        let outcome = optimize_setpoint(state, &bounds, &config, |r| {
            let res = fixed_point_solve(&dyn_agents, sys.routing(), r, &v0, &gains, &config)?;
            *spent.lock().expect("timing lock") += res.timing;
            Ok(Evaluation {
                cost: res.j_c,
                trusted: res.converged && res.j_c.is_finite(),
                payload: res,
            })
        })?;
        let best: FixedPointResult = outcome.best.payload;
        debug!(
            "step {k}: r_opt {:?} J_c {:.6e} sigma {} alpha {alpha:.3}",
            outcome.r_opt, best.j_c, best.iterations
        );
        let v_presumed = sys.first_step_couplings(&best.v_in)?.concat();
        v_prev = Some(best.v_in.clone());
        Ok(Decision {
            inputs: best.responses.iter().map(|r| r.u.clone()).collect(),
            v_presumed,
            r_d,
            r_opt: outcome.r_opt,
            j_c: best.j_c,
            sigma_used: best.iterations,
            evaluations: outcome.evaluations,
            converged: best.converged,
            alpha,
            timing: spent.into_inner().expect("timing lock"),
        })
    }))
}

/// Decentralized baseline: every controlled subsystem plans against its
/// coupling inputs frozen at their last measured values, tracking `r_d`.
pub fn run_decentralized(
    plant: &System,
    strategy: &System,
    scenario: &Scenario,
) -> Result<ClosedLoopTrace> {
    let strategy = tuned(strategy, scenario)?;
    let lp = Loop::new(plant, &strategy, scenario, "decentralized")?;
    Ok(lp.run(|lp, _k, ctxs, measured| {
        let sys = lp.strategy;
        let n = sys.horizon();
        let r_d = sys.desired_setpoint(ctxs);
        let mut inputs = Vec::new();
        let mut timing = SolveTiming::default();
        let mut j_c = 0.0;
        for ((s, ctx), v) in sys.subsystems().iter().zip(ctxs).zip(measured) {
            let r_s: Option<Vec<f64>> = s
                .controller
                .as_ref()
                .map(|_| s.setpoint.iter().map(|&o| ctx.desired[o]).collect());
            let v_in = Profile::constant(v, n);
            let out = s
                .respond(ctx, r_s.as_deref(), &v_in, n)
                .map_err(|e| e.in_subsystem(s.id.0))?;
            timing += out.timing;
            j_c += out.cost;
            inputs.push(out.u);
        }
        Ok(Decision {
            inputs,
            v_presumed: measured.concat(),
            r_opt: r_d.clone(),
            r_d,
            j_c,
            sigma_used: 0,
            evaluations: 0,
            converged: true,
            alpha: 0.0,
            timing,
        })
    }))
}
