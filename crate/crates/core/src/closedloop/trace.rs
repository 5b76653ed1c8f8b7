//! Closed-loop traces, performance metrics and their file formats.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scenario::Scenario;
use crate::error::{Error, Result};
use crate::system::System;

/// One sampling period of a closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub time_s: f64,
    /// Applied plant inputs.
    pub u: Vec<f64>,
    /// Plant outputs at this step.
    pub y: Vec<f64>,
    /// Actual plant coupling inputs at this step.
    pub v: Vec<f64>,
    /// First step of the coupling inputs the strategy planned with.
    pub v_presumed: Vec<f64>,
    pub r_d: Vec<f64>,
    pub r_opt: Vec<f64>,
    /// Predicted central cost of the applied plan.
    pub j_c: f64,
    /// Realized cost per plant subsystem.
    pub stage_costs: Vec<f64>,
    pub sigma_used: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub alpha: f64,
    /// Scaled norm of presumed minus actual coupling inputs.
    pub presumption_error: f64,
    pub nmpc_budget_hits: usize,
    /// NMPC solves during the cycle.
    pub nmpc_calls: usize,
    pub walltime_ms_mpc: f64,
    pub walltime_ms_nmpc: f64,
    pub walltime_ms_cycle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopTrace {
    pub scenario: String,
    pub strategy: String,
    pub ts: f64,
    pub u_names: Vec<String>,
    pub y_names: Vec<String>,
    pub v_names: Vec<String>,
    pub v_presumed_names: Vec<String>,
    pub r_names: Vec<String>,
    pub subsystem_names: Vec<String>,
    pub rows: Vec<TraceRow>,
    /// Set when a solver failure ended the run early.
    pub failure: Option<String>,
}

fn coupling_names(system: &System) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for s in system.subsystems() {
        for (src, name) in system.in_signals(s.id)? {
            out.push(format!("{}<-{}.{name}", s.id.0, src.0));
        }
    }
    Ok(out)
}

impl ClosedLoopTrace {
    pub(crate) fn new(
        plant: &System,
        strategy: &System,
        scenario: &Scenario,
        label: &str,
    ) -> Result<Self> {
        let subs = plant.subsystems();
        Ok(Self {
            scenario: scenario.name.clone(),
            strategy: format!("{label}-{}", strategy.name),
            ts: plant.ts(),
            u_names: subs.iter().flat_map(|s| s.inputs.iter().cloned()).collect(),
            y_names: subs
                .iter()
                .flat_map(|s| s.outputs.iter().cloned())
                .collect(),
            v_names: coupling_names(plant)?,
            v_presumed_names: coupling_names(strategy)?,
            r_names: strategy
                .subsystems()
                .iter()
                .filter(|s| s.is_controlled())
                .flat_map(|s| {
                    s.setpoint
                        .iter()
                        .map(move |&o| format!("{}.{}", s.id.0, s.outputs[o]))
                })
                .collect(),
            subsystem_names: subs.iter().map(|s| s.name.clone()).collect(),
            rows: Vec::new(),
            failure: None,
        })
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["step".to_string(), "time_s".to_string()];
        let prefixed = |p: &str, names: &[String]| {
            names.iter().map(|n| format!("{p}:{n}")).collect::<Vec<_>>()
        };
        h.extend(prefixed("u", &self.u_names));
        h.extend(prefixed("y", &self.y_names));
        h.extend(prefixed("v", &self.v_names));
        h.extend(prefixed("v_presumed", &self.v_presumed_names));
        h.extend(prefixed("r_d", &self.r_names));
        h.extend(prefixed("r_opt", &self.r_names));
        h.push("J_c".into());
        h.push("J_stage".into());
        h.extend(prefixed("J_stage", &self.subsystem_names));
        for c in [
            "sigma_used",
            "evaluations",
            "converged",
            "alpha",
            "presumption_error",
            "nmpc_budget_hits",
            "nmpc_calls",
            "walltime_ms_mpc",
            "walltime_ms_nmpc",
            "walltime_ms_cycle",
        ] {
            h.push(c.into());
        }
        h
    }

    fn record(row: &TraceRow) -> Vec<String> {
        let f = |v: &f64| format!("{v}");
        let mut r = vec![row.step.to_string(), f(&row.time_s)];
        for list in [
            &row.u,
            &row.y,
            &row.v,
            &row.v_presumed,
            &row.r_d,
            &row.r_opt,
        ] {
            r.extend(list.iter().map(f));
        }
        r.push(f(&row.j_c));
        r.push(f(&row.stage_costs.iter().sum()));
        r.extend(row.stage_costs.iter().map(f));
        r.push(row.sigma_used.to_string());
        r.push(row.evaluations.to_string());
        r.push(u8::from(row.converged).to_string());
        r.push(f(&row.alpha));
        r.push(f(&row.presumption_error));
        r.push(row.nmpc_budget_hits.to_string());
        r.push(row.nmpc_calls.to_string());
        r.push(f(&row.walltime_ms_mpc));
        r.push(f(&row.walltime_ms_nmpc));
        r.push(f(&row.walltime_ms_cycle));
        r
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for row in &self.rows {
            w.write_record(Self::record(row))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

/// True for columns holding wall-clock measurements.
pub fn is_walltime_column(name: &str) -> bool {
    name.starts_with("walltime_ms")
}

/// A trace read back from CSV as named numeric columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTrace {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTrace {
    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let values = rec
                .iter()
                .map(|s| {
                    s.parse::<f64>().map_err(|_| {
                        Error::Config(format!("trace row {}: `{s}` is not a number", i + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(values);
        }
        Ok(Self { header, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::read(f)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// The trace without wall-time columns, for determinism checks.
    pub fn without_walltimes(&self) -> CsvTrace {
        let keep: Vec<usize> = (0..self.header.len())
            .filter(|&i| !is_walltime_column(&self.header[i]))
            .collect();
        CsvTrace {
            header: keep.iter().map(|&i| self.header[i].clone()).collect(),
            rows: self
                .rows
                .iter()
                .map(|r| keep.iter().map(|&i| r[i]).collect())
                .collect(),
        }
    }
}

/// Realized cost of each plant subsystem at one step (squared weighted
/// tracking error plus squared weighted bound excess).
pub fn stage_costs(
    plant: &System,
    scenario: &Scenario,
    step: usize,
    y: &[Vec<f64>],
    u: &[Vec<f64>],
) -> Result<Vec<f64>> {
    plant
        .subsystems()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = s.dynamics.affine().parts();
            let desired: Vec<f64> = s
                .outputs
                .iter()
                .zip(&p.y_op)
                .map(|(n, op)| scenario.desired_at(n, step).unwrap_or(*op))
                .collect();
            let upper: Vec<f64> = s
                .outputs
                .iter()
                .zip(s.cost.default_upper(s.outputs.len()))
                .map(|(n, b)| scenario.upper_at(n, step).unwrap_or(b))
                .collect();
            s.cost.stage(&y[i], &u[i], &desired, &upper)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsystemCost {
    pub name: String,
    pub j_cl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub scenario: String,
    pub strategy: String,
    pub steps: usize,
    /// Time-averaged realized central cost.
    pub j_c_cl: f64,
    pub per_subsystem: Vec<SubsystemCost>,
    pub violation_signal: Option<String>,
    /// `sum max(y - bound, 0) * Ts` from the post-transient step on.
    pub violation_integral: f64,
    /// Same sum over the whole run.
    pub violation_integral_total: f64,
    pub nmpc_ms_median: f64,
    pub nmpc_ms_max: f64,
    /// Median NMPC time per solve over the run.
    pub nmpc_ms_per_call: f64,
    pub nmpc_calls_median: f64,
    pub cycle_ms_median: f64,
    pub cycle_ms_max: f64,
    pub max_presumption_error: f64,
    pub failure: Option<String>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn max_of(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, f64::max)
}

/// Performance metrics of a trace, recomputed from its recorded outputs
/// and inputs with the plant's cost specifications.
pub fn closed_loop_cost(
    trace: &ClosedLoopTrace,
    plant: &System,
    scenario: &Scenario,
) -> Result<PerformanceReport> {
    if trace.rows.is_empty() {
        return Err(Error::InvalidArgument("empty trace".into()));
    }
    let subs = plant.subsystems();
    let split = |flat: &[f64], dims: &dyn Fn(usize) -> usize| -> Vec<Vec<f64>> {
        let mut pos = 0;
        (0..subs.len())
            .map(|i| {
                let n = dims(i);
                pos += n;
                flat[pos - n..pos].to_vec()
            })
            .collect()
    };
    let mut totals = vec![0.0; subs.len()];
    for row in &trace.rows {
        let y = split(&row.y, &|i| subs[i].outputs.len());
        let u = split(&row.u, &|i| subs[i].inputs.len());
        for (t, c) in totals
            .iter_mut()
            .zip(stage_costs(plant, scenario, row.step, &y, &u)?)
        {
            *t += c;
        }
    }
    let n = trace.rows.len() as f64;
    let per_subsystem: Vec<SubsystemCost> = subs
        .iter()
        .zip(&totals)
        .map(|(s, t)| SubsystemCost {
            name: s.name.clone(),
            j_cl: t / n,
        })
        .collect();
    let signal = scenario.violation_signal().map(str::to_string);
    let (mut post, mut total) = (0.0, 0.0);
    if let Some(name) = &signal {
        let col = trace
            .y_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                Error::Config(format!("violation output `{name}` is not a plant output"))
            })?;
        for row in &trace.rows {
            let bound = scenario.upper_at(name, row.step).unwrap_or(f64::INFINITY);
            let excess = (row.y[col] - bound).max(0.0) * trace.ts;
            total += excess;
            if row.step >= scenario.post_transient_start {
                post += excess;
            }
        }
    }
    let nmpc: Vec<f64> = trace.rows.iter().map(|r| r.walltime_ms_nmpc).collect();
    let cycle: Vec<f64> = trace.rows.iter().map(|r| r.walltime_ms_cycle).collect();
    Ok(PerformanceReport {
        scenario: trace.scenario.clone(),
        strategy: trace.strategy.clone(),
        steps: trace.rows.len(),
        j_c_cl: totals.iter().sum::<f64>() / n,
        per_subsystem,
        violation_signal: signal,
        violation_integral: post,
        violation_integral_total: total,
        nmpc_ms_median: median(&nmpc),
        nmpc_ms_max: max_of(nmpc.iter().copied()),
        nmpc_ms_per_call: median(
            &trace
                .rows
                .iter()
                .filter(|r| r.nmpc_calls > 0)
                .map(|r| r.walltime_ms_nmpc / r.nmpc_calls as f64)
                .collect::<Vec<_>>(),
        ),
        nmpc_calls_median: median(
            &trace
                .rows
                .iter()
                .map(|r| r.nmpc_calls as f64)
                .collect::<Vec<_>>(),
        ),
        cycle_ms_median: median(&cycle),
        cycle_ms_max: max_of(cycle.iter().copied()),
        max_presumption_error: max_of(trace.rows.iter().map(|r| r.presumption_error)),
        failure: trace.failure.clone(),
    })
}

/// Side-by-side metrics of two runs of the same scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario: String,
    pub a: PerformanceReport,
    pub b: PerformanceReport,
    /// Largest absolute difference between the traces outside wall-time
    /// columns (`None` when their columns differ).
    pub max_trace_delta: Option<f64>,
}

impl Comparison {
    pub fn new(
        a: PerformanceReport,
        b: PerformanceReport,
        ta: &CsvTrace,
        tb: &CsvTrace,
    ) -> Result<Self> {
        if a.scenario != b.scenario {
            return Err(Error::ScenarioMismatch(a.scenario, b.scenario));
        }
        let (ca, cb) = (ta.without_walltimes(), tb.without_walltimes());
        let max_trace_delta =
            (ca.header == cb.header && ca.rows.len() == cb.rows.len()).then(|| {
                ca.rows
                    .iter()
                    .zip(&cb.rows)
                    .flat_map(|(x, y)| {
                        x.iter()
                            .zip(y)
                            .map(|(p, q)| if p == q { 0.0 } else { (p - q).abs() })
                    })
                    .fold(0.0, f64::max)
            });
        Ok(Self {
            scenario: a.scenario.clone(),
            a,
            b,
            max_trace_delta,
        })
    }

    /// `(metric, a, b, b - a)` rows.
    pub fn rows(&self) -> Vec<(&'static str, f64, f64, f64)> {
        let m = |name, x: f64, y: f64| (name, x, y, if x == y { 0.0 } else { y - x });
        vec![
            m("j_c_cl", self.a.j_c_cl, self.b.j_c_cl),
            m(
                "violation_integral",
                self.a.violation_integral,
                self.b.violation_integral,
            ),
            m(
                "violation_integral_total",
                self.a.violation_integral_total,
                self.b.violation_integral_total,
            ),
            m(
                "nmpc_ms_median",
                self.a.nmpc_ms_median,
                self.b.nmpc_ms_median,
            ),
            m("nmpc_ms_max", self.a.nmpc_ms_max, self.b.nmpc_ms_max),
            m(
                "nmpc_ms_per_call",
                self.a.nmpc_ms_per_call,
                self.b.nmpc_ms_per_call,
            ),
            m(
                "nmpc_calls_median",
                self.a.nmpc_calls_median,
                self.b.nmpc_calls_median,
            ),
            m(
                "cycle_ms_median",
                self.a.cycle_ms_median,
                self.b.cycle_ms_median,
            ),
            m("cycle_ms_max", self.a.cycle_ms_max, self.b.cycle_ms_max),
        ]
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", &self.a.strategy, &self.b.strategy, "delta"])?;
        for (name, a, b, d) in self.rows() {
            w.write_record([
                name.to_string(),
                a.to_string(),
                b.to_string(),
                d.to_string(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let wa = self.a.strategy.len().max(14);
        let wb = self.b.strategy.len().max(14);
        let mut s = format!(
            "scenario: {}\n{:<26} {:>wa$} {:>wb$} {:>14}\n",
            self.scenario, "metric", self.a.strategy, self.b.strategy, "delta"
        );
        for (name, a, b, d) in self.rows() {
            s.push_str(&format!("{name:<26} {a:>wa$.6e} {b:>wb$.6e} {d:>14.6e}\n"));
        }
        if let Some(d) = self.max_trace_delta {
            s.push_str(&format!("max trace delta (excluding wall-times): {d:e}\n"));
        }
        s
    }
}
