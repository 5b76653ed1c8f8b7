//! Upper coordination layer.
//!
//! The coordinator only sees subsystems through [`Agent::respond`]: it sends
//! a set-point and an incoming coupling profile and gets back the outgoing
//! profile and the local cost.

mod affine;
mod fixed_point;
mod trust_region;

pub use affine::AffineAgent;
pub use fixed_point::{
    estimate_map_gain, filter_gains, filter_step, fixed_point_solve, round_trip, synthesize_filter,
    FixedPointResult, RoundLog,
};
pub use trust_region::{
    build_grid, optimize_setpoint, quadratic_fit, trust_region_step, CloudPoint, Evaluation,
    PeriodOutcome, QuadKind, QuadModel, SetpointBounds, TrustRegionState,
};

use std::ops::AddAssign;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SubsystemId;
use crate::profile::Profile;

/// Solver time spent inside one or more `respond` calls.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolveTiming {
    pub mpc: Duration,
    pub nmpc: Duration,
    pub nmpc_calls: usize,
    pub budget_exhausted: usize,
}

impl AddAssign for SolveTiming {
    fn add_assign(&mut self, rhs: Self) {
        self.mpc += rhs.mpc;
        self.nmpc += rhs.nmpc;
        self.nmpc_calls += rhs.nmpc_calls;
        self.budget_exhausted += rhs.budget_exhausted;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentResponse {
    /// Outgoing coupling profile in edge-block stacking.
    pub v_out: Vec<f64>,
    /// Local cost `J_s`.
    pub cost: f64,
    /// Planned input profile of a controlled subsystem.
    pub u: Option<Profile>,
    pub timing: SolveTiming,
}

/// The local processing contract seen by the coordinator.
pub trait Agent: Sync {
    fn id(&self) -> SubsystemId;
    fn controlled(&self) -> bool;
    /// Length of `r_s` (zero for uncontrolled subsystems).
    fn setpoint_dim(&self) -> usize;
    /// `(r_s, v_s^in) -> (v_s^out, J_s)`.
    fn respond(&self, r: Option<&[f64]>, v_in: &[f64]) -> Result<AgentResponse>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FilterMode {
    /// `Pi = I`
    Identity,
    /// `Pi = alpha I`
    Uniform { alpha: f64 },
    /// One gain per coupling edge, in canonical edge order.
    PerChannel { gains: Vec<f64> },
    /// `Pi = alpha I` with `alpha = min(1, kappa / (1 + rho))`, `rho` the
    /// estimated gain of the coupling map, re-estimated every period.
    Synthesized {
        #[serde(default = "default_kappa")]
        kappa: f64,
        #[serde(default = "default_power_iters")]
        power_iters: usize,
    },
}

fn default_kappa() -> f64 {
    1.9
}

fn default_power_iters() -> usize {
    8
}

impl Default for FilterMode {
    fn default() -> Self {
        FilterMode::Synthesized {
            kappa: default_kappa(),
            power_iters: default_power_iters(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoordinatorConfig {
    /// Stop when the scaled change of `v_in` is at most this.
    pub eps_max: f64,
    pub sigma_max: usize,
    pub filter: FilterMode,
    /// Grid points per set-point dimension.
    pub grid_size: usize,
    /// Initial trust-region radius per dimension; empty means a tenth of
    /// the set-point bound width.
    pub initial_radius: Vec<f64>,
    /// Radius limits as fractions of the bound width.
    pub min_radius_frac: f64,
    pub max_radius_frac: f64,
    pub expand: f64,
    pub contract: f64,
    /// Relative perturbation used when estimating the coupling-map gain.
    pub gain_probe: f64,
    /// Seed of the gain-estimation start vector.
    pub seed: u64,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            eps_max: 1e-6,
            sigma_max: 200,
            filter: FilterMode::default(),
            grid_size: 3,
            initial_radius: Vec::new(),
            min_radius_frac: 1e-4,
            max_radius_frac: 0.5,
            expand: 1.6,
            contract: 0.5,
            gain_probe: 1e-4,
            seed: 7,
        }
    }
}

impl CoordinatorConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.eps_max > 0.0) {
            return bad("eps_max must be positive");
        }
        if self.sigma_max == 0 {
            return bad("sigma_max must be at least 1");
        }
        if self.grid_size == 0 {
            return bad("grid_size must be at least 1");
        }
        if !(self.expand > 1.0) || !(self.contract > 0.0 && self.contract < 1.0) {
            return bad("trust-region factors need expand > 1 and contract in (0, 1)");
        }
        if !(self.min_radius_frac > 0.0 && self.min_radius_frac <= self.max_radius_frac) {
            return bad("trust-region radius limits are inconsistent");
        }
        if self.initial_radius.iter().any(|r| !(*r > 0.0)) {
            return bad("initial radius must be positive");
        }
        match &self.filter {
            FilterMode::Identity => {}
            FilterMode::Uniform { alpha } => {
                if !(*alpha > 0.0 && *alpha <= 1.0) {
                    return bad("filter gain must lie in (0, 1]");
                }
            }
            FilterMode::PerChannel { gains } => {
                if gains.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
                    return bad("filter gains must lie in (0, 1]");
                }
            }
            FilterMode::Synthesized { kappa, power_iters } => {
                if !(*kappa > 0.0) || *power_iters == 0 {
                    return bad(
                        "filter synthesis needs kappa > 0 and at least one power iteration",
                    );
                }
            }
        }
        Ok(())
    }
}
