//! TOML system descriptions.
//!
//! A system file lists coupling edges and subsystems. A subsystem either
//! carries its own affine (optionally nonlinear) model, or is a composite of
//! subsystems of a `base` system file, in which case its signals are matched
//! to the members' signals by name. Matrices are row-major arrays of rows;
//! omitted matrices are zero.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::control::ControllerSpec;
use crate::error::{Error, Result};
use crate::graph::SubsystemId;
use crate::model::cost::LocalCost;
use crate::model::{
    compose, CompositeSpec, Dynamics, LinearModel, LinearParts, ModelDims, NonlinearModel,
    NonlinearTerm,
};
use crate::system::{EdgeDef, SubsystemDef, System};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    pub name: String,
    pub ts: f64,
    pub horizon: usize,
    /// System file providing the members of composite subsystems.
    #[serde(default)]
    pub base: Option<String>,
    #[serde(default, rename = "edge")]
    pub edges: Vec<EdgeFile>,
    #[serde(rename = "subsystem")]
    pub subsystems: Vec<SubsystemFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeFile {
    pub from: usize,
    pub to: usize,
    pub signals: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemFile {
    pub id: usize,
    pub name: String,
    #[serde(default)]
    pub states: Vec<String>,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default)]
    pub disturbances: Vec<String>,
    #[serde(default)]
    pub model: Option<ModelFile>,
    #[serde(default)]
    pub composite: Option<CompositeFile>,
    #[serde(default)]
    pub cost: LocalCost,
    #[serde(default)]
    pub controller: Option<ControllerSpec>,
    #[serde(default)]
    pub setpoint: Vec<usize>,
}

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(default)]
    pub x_op: Vec<f64>,
    #[serde(default)]
    pub u_op: Vec<f64>,
    #[serde(default)]
    pub v_op: Vec<f64>,
    #[serde(default)]
    pub d_op: Vec<f64>,
    #[serde(default)]
    pub y_op: Vec<f64>,
    #[serde(default)]
    pub w_op: Vec<f64>,
    pub a: Option<Rows>,
    pub b_u: Option<Rows>,
    pub b_v: Option<Rows>,
    pub b_d: Option<Rows>,
    pub c_y: Option<Rows>,
    pub d_yu: Option<Rows>,
    pub d_yv: Option<Rows>,
    pub c_w: Option<Rows>,
    pub d_wu: Option<Rows>,
    pub d_wv: Option<Rows>,
    #[serde(default, rename = "term")]
    pub terms: Vec<NonlinearTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeFile {
    /// Subsystem ids in the base system.
    pub members: Vec<usize>,
    /// Regulated outputs to expose, by name; empty means all, in member order.
    #[serde(default)]
    pub outputs: Vec<String>,
}

fn cfg(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn matrix(field: &str, rows: &Option<Rows>, n_rows: usize, n_cols: usize) -> Result<DMatrix<f64>> {
    let Some(rows) = rows else {
        return Ok(DMatrix::zeros(n_rows, n_cols));
    };
    if rows.len() != n_rows {
        return Err(cfg(format!(
            "{field}: expected {n_rows} rows, got {}",
            rows.len()
        )));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != n_cols {
            return Err(cfg(format!(
                "{field}: row {i} has {} entries, expected {n_cols}",
                r.len()
            )));
        }
    }
    Ok(DMatrix::from_fn(n_rows, n_cols, |i, j| rows[i][j]))
}

fn op_vector(field: &str, v: &[f64], n: usize) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Ok(vec![0.0; n]);
    }
    if v.len() != n {
        return Err(cfg(format!(
            "{field}: expected {n} entries, got {}",
            v.len()
        )));
    }
    Ok(v.to_vec())
}

impl ModelFile {
    fn build(&self, dims: ModelDims, ts: f64) -> Result<Dynamics> {
        let ModelDims {
            n_x,
            n_u,
            n_v,
            n_d,
            n_y,
            n_w,
        } = dims;
        let parts = LinearParts {
            a: matrix("a", &self.a, n_x, n_x)?,
            b_u: matrix("b_u", &self.b_u, n_x, n_u)?,
            b_v: matrix("b_v", &self.b_v, n_x, n_v)?,
            b_d: matrix("b_d", &self.b_d, n_x, n_d)?,
            c_y: matrix("c_y", &self.c_y, n_y, n_x)?,
            d_yu: matrix("d_yu", &self.d_yu, n_y, n_u)?,
            d_yv: matrix("d_yv", &self.d_yv, n_y, n_v)?,
            c_w: matrix("c_w", &self.c_w, n_w, n_x)?,
            d_wu: matrix("d_wu", &self.d_wu, n_w, n_u)?,
            d_wv: matrix("d_wv", &self.d_wv, n_w, n_v)?,
            x_op: op_vector("x_op", &self.x_op, n_x)?,
            u_op: op_vector("u_op", &self.u_op, n_u)?,
            v_op: op_vector("v_op", &self.v_op, n_v)?,
            d_op: op_vector("d_op", &self.d_op, n_d)?,
            y_op: op_vector("y_op", &self.y_op, n_y)?,
            w_op: op_vector("w_op", &self.w_op, n_w)?,
            ts,
        };
        let linear = LinearModel::new(parts)?;
        if self.terms.is_empty() {
            Ok(Dynamics::Linear(linear))
        } else {
            Ok(Dynamics::Nonlinear(NonlinearModel::new(
                linear,
                self.terms.clone(),
            )?))
        }
    }
}

/// Parses a system file. `origin` names the source in diagnostics;
/// `load_base` fetches the text of the `base` file when composites are used.
pub fn parse_system(
    text: &str,
    origin: &str,
    load_base: &dyn Fn(&str) -> Result<(String, String)>,
) -> Result<System> {
    let file: SystemFile = toml::from_str(text).map_err(|e| cfg(format!("{origin}: {e}")))?;
    build_system(&file, load_base).map_err(|e| match e {
        Error::Config(m) => cfg(format!("{origin}: {m}")),
        other => other,
    })
}

/// Loads a system file from disk; a `base` path is resolved relative to it.
pub fn load_system(path: &Path) -> Result<System> {
    let text =
        std::fs::read_to_string(path).map_err(|e| cfg(format!("{}: {e}", path.display())))?;
    let dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    parse_system(&text, &path.display().to_string(), &|base| {
        let p = dir.join(base);
        let text = std::fs::read_to_string(&p).map_err(|e| cfg(format!("{}: {e}", p.display())))?;
        Ok((text, p.display().to_string()))
    })
}

fn in_dim(edges: &[EdgeFile], id: usize) -> usize {
    edges
        .iter()
        .filter(|e| e.to == id)
        .map(|e| e.signals.len())
        .sum()
}

fn out_dim(edges: &[EdgeFile], id: usize) -> usize {
    edges
        .iter()
        .filter(|e| e.from == id)
        .map(|e| e.signals.len())
        .sum()
}

/// `(source, signal)` per entry of `v_id`, ordered by source.
fn in_signals(edges: &[EdgeFile], id: usize) -> Vec<(usize, &str)> {
    let mut es: Vec<&EdgeFile> = edges.iter().filter(|e| e.to == id).collect();
    es.sort_by_key(|e| e.from);
    es.iter()
        .flat_map(|e| e.signals.iter().map(move |n| (e.from, n.as_str())))
        .collect()
}

/// `(destination, signal)` per entry of `w_id`, ordered by destination.
fn out_signals(edges: &[EdgeFile], id: usize) -> Vec<(usize, &str)> {
    let mut es: Vec<&EdgeFile> = edges.iter().filter(|e| e.from == id).collect();
    es.sort_by_key(|e| e.to);
    es.iter()
        .flat_map(|e| e.signals.iter().map(move |n| (e.to, n.as_str())))
        .collect()
}

fn build_system(
    file: &SystemFile,
    load_base: &dyn Fn(&str) -> Result<(String, String)>,
) -> Result<System> {
    let needs_base = file.subsystems.iter().any(|s| s.composite.is_some());
    let base = match (&file.base, needs_base) {
        (Some(b), true) => {
            let (text, origin) = load_base(b)?;
            Some(parse_system(&text, &origin, load_base)?)
        }
        (None, true) => return Err(cfg("composite subsystems need a `base` system file")),
        _ => None,
    };
    // Members of each subsystem of this file, in base ids.
    let members: BTreeMap<usize, Vec<usize>> = file
        .subsystems
        .iter()
        .map(|s| {
            (
                s.id,
                s.composite
                    .as_ref()
                    .map(|c| c.members.clone())
                    .unwrap_or_default(),
            )
        })
        .collect();

    let mut defs = Vec::with_capacity(file.subsystems.len());
    for s in &file.subsystems {
        let ctx = |e: Error| match e {
            Error::Config(m) => cfg(format!("subsystem {}: {m}", s.id)),
            other => other.in_subsystem(s.id),
        };
        let def = match (&s.model, &s.composite) {
            (Some(model), None) => {
                if !s.states.is_empty() && s.states.len() != model.x_op.len() {
                    return Err(ctx(cfg("`states` and `x_op` lengths differ")));
                }
                let dims = ModelDims {
                    n_x: model.x_op.len(),
                    n_u: s.inputs.len(),
                    n_v: in_dim(&file.edges, s.id),
                    n_d: s.disturbances.len(),
                    n_y: s.outputs.len(),
                    n_w: out_dim(&file.edges, s.id),
                };
                SubsystemDef {
                    id: s.id,
                    name: s.name.clone(),
                    inputs: s.inputs.clone(),
                    outputs: s.outputs.clone(),
                    disturbances: s.disturbances.clone(),
                    members: Vec::new(),
                    dynamics: model.build(dims, file.ts).map_err(ctx)?,
                    cost: s.cost.clone(),
                    controller: s.controller.clone(),
                    setpoint: s.setpoint.clone(),
                }
            }
            (None, Some(c)) => {
                let base = base.as_ref().expect("base loaded for composites");
                composite_def(s, c, file, &members, base).map_err(ctx)?
            }
            _ => {
                return Err(ctx(cfg(
                    "exactly one of `model` and `composite` is required",
                )))
            }
        };
        defs.push(def);
    }
    let edges = file
        .edges
        .iter()
        .map(|e| EdgeDef {
            from: e.from,
            to: e.to,
            signals: e.signals.clone(),
        })
        .collect();
    let system = System::new(file.name.clone(), file.horizon, defs, edges)?;
    if (system.ts() - file.ts).abs() > 1e-12 {
        return Err(cfg(
            "`ts` differs from the sampling period of the base models",
        ));
    }
    Ok(system)
}

fn composite_def(
    s: &SubsystemFile,
    c: &CompositeFile,
    file: &SystemFile,
    members: &BTreeMap<usize, Vec<usize>>,
    base: &System,
) -> Result<SubsystemDef> {
    if c.members.is_empty() {
        return Err(cfg("composite has no members"));
    }
    if !(s.inputs.is_empty()
        && s.outputs.is_empty()
        && s.disturbances.is_empty()
        && s.states.is_empty())
    {
        return Err(cfg("signal names of a composite come from its members"));
    }
    let mut subs = Vec::with_capacity(c.members.len());
    for &m in &c.members {
        subs.push(
            base.subsystem(SubsystemId(m))
                .map_err(|_| cfg(format!("unknown base member {m}")))?,
        );
    }
    let mut spec = CompositeSpec {
        members: c.members.iter().map(|&m| SubsystemId(m)).collect(),
        ..Default::default()
    };
    let mut inputs = Vec::new();
    let mut disturbances = Vec::new();
    let mut all_outputs = Vec::new();
    for sub in &subs {
        for (j, n) in sub.inputs.iter().enumerate() {
            spec.inputs_u.push((sub.id, j));
            inputs.push(n.clone());
        }
        for (j, n) in sub.disturbances.iter().enumerate() {
            spec.inputs_d.push((sub.id, j));
            disturbances.push(n.clone());
        }
        for (j, n) in sub.outputs.iter().enumerate() {
            all_outputs.push((sub.id, j, n.clone()));
        }
    }
    let outputs: Vec<String> = if c.outputs.is_empty() {
        all_outputs.iter().map(|o| o.2.clone()).collect()
    } else {
        c.outputs.clone()
    };
    for name in &outputs {
        let (id, j, _) = all_outputs
            .iter()
            .find(|o| &o.2 == name)
            .ok_or_else(|| cfg(format!("no member has output `{name}`")))?;
        spec.outputs_y.push((*id, *j));
    }
    let members_of = |id: usize| -> Result<&Vec<usize>> {
        members.get(&id).filter(|m| !m.is_empty()).ok_or_else(|| {
            cfg(format!(
                "subsystem {id} must also be a composite of base subsystems"
            ))
        })
    };
    for (src, name) in in_signals(&file.edges, s.id) {
        let sources = members_of(src)?;
        let mut consumers = Vec::new();
        for sub in &subs {
            for (j, (from, n)) in base.in_signals(sub.id)?.iter().enumerate() {
                if n == name && sources.contains(&from.0) {
                    consumers.push((sub.id, j));
                }
            }
        }
        if consumers.is_empty() {
            return Err(cfg(format!(
                "incoming signal `{name}` from {src} feeds no member"
            )));
        }
        spec.inputs_v.push(consumers);
    }
    for (dst, name) in out_signals(&file.edges, s.id) {
        let dests = members_of(dst)?;
        let mut found = None;
        'outer: for sub in &subs {
            for (j, (to, n)) in base.out_signals(sub.id)?.iter().enumerate() {
                if n == name && dests.contains(&to.0) {
                    found = Some((sub.id, j));
                    break 'outer;
                }
            }
        }
        spec.outputs_w.push(found.ok_or_else(|| {
            cfg(format!(
                "outgoing signal `{name}` to {dst} has no member source"
            ))
        })?);
    }
    let models: Vec<(SubsystemId, &Dynamics)> = subs.iter().map(|m| (m.id, &m.dynamics)).collect();
    let dynamics = compose(&models, base.topology(), &spec)?;
    Ok(SubsystemDef {
        id: s.id,
        name: s.name.clone(),
        inputs,
        outputs,
        disturbances,
        members: c.members.clone(),
        dynamics,
        cost: s.cost.clone(),
        controller: s.controller.clone(),
        setpoint: s.setpoint.clone(),
    })
}
