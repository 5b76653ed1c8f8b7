//! Fixed-point reconciliation of coupling profiles for a frozen set-point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Agent, AgentResponse, CoordinatorConfig, SolveTiming};
use crate::error::{Error, Result};
use crate::graph::RoutingMatrix;
use crate::profile::{rms, rms_diff};

/// `(I - Pi) prev + Pi hat` for a diagonal `Pi` given by `gains`.
pub fn filter_step(prev: &[f64], hat: &[f64], gains: &[f64]) -> Result<Vec<f64>> {
    if prev.len() != hat.len() {
        return Err(Error::dims("filter step", prev.len(), hat.len()));
    }
    if gains.len() != prev.len() {
        return Err(Error::dims("filter gains", prev.len(), gains.len()));
    }
    Ok(prev
        .iter()
        .zip(hat)
        .zip(gains)
        .map(|((p, h), a)| (1.0 - a) * p + a * h)
        .collect())
}

/// Expands one gain per coupling edge (canonical order) to one gain per
/// scalar of the in-stack.
pub fn filter_gains(routing: &RoutingMatrix, per_edge: &[f64]) -> Result<Vec<f64>> {
    let n = routing.horizon();
    let mut dims = Vec::new();
    for s in 1..=routing.n_s() {
        dims.extend_from_slice(routing.in_edge_dims(crate::graph::SubsystemId(s)));
    }
    if dims.len() != per_edge.len() {
        return Err(Error::dims(
            "per-channel filter gains",
            dims.len(),
            per_edge.len(),
        ));
    }
    let mut out = Vec::with_capacity(routing.in_len());
    for (d, a) in dims.iter().zip(per_edge) {
        out.extend(std::iter::repeat_n(*a, d * n));
    }
    Ok(out)
}

/// `alpha = min(1, kappa / (1 + rho))`.
pub fn synthesize_filter(rho: f64, kappa: f64) -> Result<f64> {
    if !rho.is_finite() || rho < 0.0 {
        return Err(Error::NonFinite(format!(
            "estimated coupling-map gain {rho}"
        )));
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidArgument("kappa must be positive".into()));
    }
    Ok((kappa / (1.0 + rho)).min(1.0))
}

fn split_setpoint<'r>(agents: &[&dyn Agent], r: &'r [f64]) -> Result<Vec<Option<&'r [f64]>>> {
    let total: usize = agents
        .iter()
        .filter(|a| a.controlled())
        .map(|a| a.setpoint_dim())
        .sum();
    if total != r.len() {
        return Err(Error::dims("set-point vector", total, r.len()));
    }
    let mut pos = 0;
    Ok(agents
        .iter()
        .map(|a| {
            if a.controlled() {
                let d = a.setpoint_dim();
                pos += d;
                Some(&r[pos - d..pos])
            } else {
                None
            }
        })
        .collect())
}

fn check_agents(agents: &[&dyn Agent], routing: &RoutingMatrix) -> Result<()> {
    if agents.len() != routing.n_s() {
        return Err(Error::dims("agents", routing.n_s(), agents.len()));
    }
    for (i, a) in agents.iter().enumerate() {
        if a.id().index() != i {
            return Err(Error::InvalidArgument(
                "agents must be ordered by subsystem id".into(),
            ));
        }
    }
    Ok(())
}

/// One exchange: every agent answers its slice of `v_in`; the outgoing
/// profiles are routed back into in-stack order. Agents are queried
/// concurrently; results are assembled in id order.
pub fn round_trip(
    agents: &[&dyn Agent],
    routing: &RoutingMatrix,
    r: &[f64],
    v_in: &[f64],
) -> Result<(Vec<f64>, Vec<AgentResponse>)> {
    check_agents(agents, routing)?;
    let parts = split_setpoint(agents, r)?;
    round(agents, routing, &parts, v_in)
}

fn round(
    agents: &[&dyn Agent],
    routing: &RoutingMatrix,
    parts: &[Option<&[f64]>],
    v_in: &[f64],
) -> Result<(Vec<f64>, Vec<AgentResponse>)> {
    if v_in.len() != routing.in_len() {
        return Err(Error::dims(
            "stacked incoming profile",
            routing.in_len(),
            v_in.len(),
        ));
    }
    let responses = agents
        .par_iter()
        .zip(parts.par_iter())
        .map(|(a, r)| {
            let range = routing.in_range(a.id());
            a.respond(*r, &v_in[range])
                .map_err(|e| e.in_subsystem(a.id().0))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut v_out = Vec::with_capacity(routing.out_len());
    for (a, resp) in agents.iter().zip(&responses) {
        let expected = routing.out_range(a.id()).len();
        if resp.v_out.len() != expected {
            return Err(Error::dims(
                format!("outgoing profile of {}", a.id()),
                expected,
                resp.v_out.len(),
            ));
        }
        v_out.extend_from_slice(&resp.v_out);
    }
    Ok((routing.apply(&v_out)?, responses))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub sigma: usize,
    pub eps: f64,
    pub costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    /// The reconciled incoming profile `v^in,(inf)`.
    pub v_in: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `eps` after every iteration.
    pub residuals: Vec<f64>,
    /// Central cost at the final iterate.
    pub j_c: f64,
    /// Local costs at the final iterate, in id order.
    pub costs: Vec<f64>,
    /// Scaled norm of `v_in - G_in g_out(r, v_in)` at the final iterate.
    pub coherence: f64,
    /// Responses of the final evaluation round.
    pub responses: Vec<AgentResponse>,
    pub timing: SolveTiming,
    pub log: Vec<RoundLog>,
}

/// Iterates `v <- (I - Pi) v + Pi G_in g_out(r, v)` from `v0` until the
/// scaled change drops to `eps_max` or `sigma_max` rounds are spent, then
/// evaluates the local costs with one more round.
///
/// Non-convergence is reported through `converged`, not as an error.
pub fn fixed_point_solve(
    agents: &[&dyn Agent],
    routing: &RoutingMatrix,
    r: &[f64],
    v0: &[f64],
    gains: &[f64],
    config: &CoordinatorConfig,
) -> Result<FixedPointResult> {
    check_agents(agents, routing)?;
    let parts = split_setpoint(agents, r)?;
    if v0.len() != routing.in_len() {
        return Err(Error::dims(
            "initial coupling guess",
            routing.in_len(),
            v0.len(),
        ));
    }
    let mut v = v0.to_vec();
    let mut residuals = Vec::new();
    let mut log = Vec::new();
    let mut timing = SolveTiming::default();
    let mut converged = false;
    for sigma in 1..=config.sigma_max {
        let (hat, responses) = round(agents, routing, &parts, &v)?;
        for resp in &responses {
            timing += resp.timing;
        }
        let next = filter_step(&v, &hat, gains)?;
        let eps = rms_diff(&next, &v);
        residuals.push(eps);
        log.push(RoundLog {
            sigma,
            eps,
            costs: responses.iter().map(|r| r.cost).collect(),
        });
        v = next;
        if eps <= config.eps_max {
            converged = true;
            break;
        }
        if !eps.is_finite() {
            break;
        }
    }
    let (hat, responses) = round(agents, routing, &parts, &v)?;
    for resp in &responses {
        timing += resp.timing;
    }
    let costs: Vec<f64> = responses.iter().map(|r| r.cost).collect();
    Ok(FixedPointResult {
        coherence: rms_diff(&v, &hat),
        j_c: costs.iter().sum(),
        costs,
        iterations: residuals.len(),
        residuals,
        converged,
        v_in: v,
        responses,
        timing,
        log,
    })
}

/// Power-iteration estimate of the gain of `v -> G_in g_out(r, v)` around
/// `v`, from finite differences along a seeded random start direction.
pub fn estimate_map_gain(
    agents: &[&dyn Agent],
    routing: &RoutingMatrix,
    r: &[f64],
    v: &[f64],
    iterations: usize,
    probe: f64,
    seed: u64,
) -> Result<f64> {
    check_agents(agents, routing)?;
    let parts = split_setpoint(agents, r)?;
    let n = v.len();
    if n == 0 {
        return Ok(0.0);
    }
    let (base, _) = round(agents, routing, &parts, v)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h = probe * rms(v).max(1.0);
    let mut gain = 0.0;
    for _ in 0..iterations {
        let norm = rms(&d);
        if norm == 0.0 {
            return Ok(0.0);
        }
        d.iter_mut().for_each(|x| *x /= norm);
        let probe_point: Vec<f64> = v.iter().zip(&d).map(|(a, b)| a + h * b).collect();
        let (out, _) = round(agents, routing, &parts, &probe_point)?;
        d = out.iter().zip(&base).map(|(a, b)| (a - b) / h).collect();
        gain = rms(&d);
        if !gain.is_finite() {
            return Err(Error::NonFinite("coupling-map gain estimate".into()));
        }
    }
    Ok(gain)
}
