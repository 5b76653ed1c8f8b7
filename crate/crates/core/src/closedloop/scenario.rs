use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::NmpcParams;
use crate::coordinator::CoordinatorConfig;
use crate::error::{Error, Result};

/// Piecewise-constant signal: `points` are `(step, value)` pairs sorted by
/// step, the first at step 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub signal: String,
    pub points: Vec<(usize, f64)>,
}

impl Schedule {
    pub fn constant(signal: impl Into<String>, value: f64) -> Self {
        Self {
            signal: signal.into(),
            points: vec![(0, value)],
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        self.points
            .iter()
            .take_while(|(k, _)| *k <= step)
            .last()
            .map(|p| p.1)
            .unwrap_or(self.points[0].1)
    }

    fn check(&self, what: &str) -> Result<()> {
        let bad = |m: String| {
            Err(Error::Config(format!(
                "{what} schedule `{}`: {m}",
                self.signal
            )))
        };
        match self.points.first() {
            None => return bad("no points".into()),
            Some((k, _)) if *k != 0 => return bad("must start at step 0".into()),
            _ => {}
        }
        if self.points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("steps must be strictly increasing".into());
        }
        if self.points.iter().any(|p| !p.1.is_finite()) {
            return bad("values must be finite".into());
        }
        Ok(())
    }
}

fn default_range() -> f64 {
    0.2
}

/// A closed-loop run description. Signals are referred to by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Number of sampling periods `N_sim`.
    pub steps: usize,
    /// First step counted in the post-transient violation integral.
    #[serde(default)]
    pub post_transient_start: usize,
    /// Set-point search box: `r_d +- setpoint_range * |r_d|`.
    #[serde(default = "default_range")]
    pub setpoint_range: f64,
    #[serde(default)]
    pub coordinator: CoordinatorConfig,
    /// NMPC solver parameters replacing those of the strategy's controllers.
    #[serde(default)]
    pub nmpc: Option<NmpcParams>,
    /// Desired values `r_d(t)` of regulated outputs.
    #[serde(default)]
    pub desired: Vec<Schedule>,
    /// Upper bounds of constrained outputs.
    #[serde(default)]
    pub upper: Vec<Schedule>,
    #[serde(default)]
    pub disturbance: Vec<Schedule>,
    /// Output whose bound excess is integrated; defaults to the first
    /// `upper` schedule.
    #[serde(default)]
    pub violation_output: Option<String>,
    /// Optional system files (relative to the scenario file); the built-in
    /// cold box is used when absent.
    #[serde(default)]
    pub plant: Option<PathBuf>,
    #[serde(default)]
    pub system_2ss: Option<PathBuf>,
    #[serde(default)]
    pub system_4ss: Option<PathBuf>,
}

impl Scenario {
    pub fn check(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("scenario needs at least one step".into()));
        }
        if !(self.setpoint_range >= 0.0 && self.setpoint_range.is_finite()) {
            return Err(Error::Config("setpoint_range must be nonnegative".into()));
        }
        for s in &self.desired {
            s.check("desired")?;
        }
        for s in &self.disturbance {
            s.check("disturbance")?;
        }
        for s in &self.upper {
            s.check("upper")?;
            if s.points.iter().any(|p| p.1 <= 0.0) {
                return Err(Error::Config(format!(
                    "upper bound `{}` must be positive",
                    s.signal
                )));
            }
        }
        if let Some(p) = &self.nmpc {
            p.check().map_err(|e| Error::Config(format!("nmpc: {e}")))?;
        }
        self.coordinator
            .check()
            .map_err(|e| Error::Config(format!("coordinator: {e}")))
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let s: Scenario =
            toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        s.check()
            .map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        Ok(s)
    }

    /// Loads a scenario; system paths inside it become relative to its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut s = Self::parse(&text, &path.display().to_string())?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut s.plant, &mut s.system_2ss, &mut s.system_4ss]
            .into_iter()
            .flatten()
        {
            *p = dir.join(&*p);
        }
        Ok(s)
    }

    fn lookup<'a>(list: &'a [Schedule], signal: &str) -> Option<&'a Schedule> {
        list.iter().find(|s| s.signal == signal)
    }

    pub fn desired_at(&self, signal: &str, step: usize) -> Option<f64> {
        Self::lookup(&self.desired, signal).map(|s| s.at(step))
    }

    pub fn upper_at(&self, signal: &str, step: usize) -> Option<f64> {
        Self::lookup(&self.upper, signal).map(|s| s.at(step))
    }

    pub fn disturbance_at(&self, signal: &str, step: usize) -> Option<f64> {
        Self::lookup(&self.disturbance, signal).map(|s| s.at(step))
    }

    pub fn violation_signal(&self) -> Option<&str> {
        self.violation_output
            .as_deref()
            .or_else(|| self.upper.first().map(|s| s.signal.as_str()))
    }
}
