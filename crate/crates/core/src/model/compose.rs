//! Exact composition of interconnected subsystem models into one model.
//!
//! Internal coupling signals are eliminated by substitution. Feedthrough
//! chains between members must be acyclic, and nonlinear term arguments may
//! not depend on another term's output.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::{
    AffineArg, Dynamics, LinearModel, LinearParts, ModelDims, NonlinearModel, NonlinearTerm,
};
use crate::error::{Error, Result};
use crate::graph::{SubsystemId, Topology};

/// Describes how the composite's external signals map onto member signals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompositeSpec {
    pub members: Vec<SubsystemId>,
    /// Composite coupling-input entries; each feeds one or more member
    /// coupling-input entries `(member, index)`.
    pub inputs_v: Vec<Vec<(SubsystemId, usize)>>,
    /// Composite coupling outputs, each copied from a member coupling output.
    pub outputs_w: Vec<(SubsystemId, usize)>,
    /// Composite regulated outputs.
    pub outputs_y: Vec<(SubsystemId, usize)>,
    /// Composite control inputs; must cover every member input exactly once.
    pub inputs_u: Vec<(SubsystemId, usize)>,
    /// Composite disturbances; must cover every member disturbance once.
    pub inputs_d: Vec<(SubsystemId, usize)>,
}

const EPS: f64 = 1e-14;

fn err(msg: impl Into<String>) -> Error {
    Error::Composition(msg.into())
}

struct Member<'a> {
    id: SubsystemId,
    model: &'a Dynamics,
    dims: ModelDims,
    x_off: usize,
    v_off: usize,
    phi_off: usize,
}

/// Selector placing an `n`-block at `off` in a space of size `total`.
fn selector(n: usize, off: usize, total: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(n, total);
    for i in 0..n {
        s[(i, off + i)] = 1.0;
    }
    s
}

fn map_selector(map: &[(SubsystemId, usize)], id: SubsystemId, n: usize) -> Result<DMatrix<f64>> {
    let mut s = DMatrix::zeros(n, map.len());
    let mut covered = vec![0usize; n];
    for (c, &(m, i)) in map.iter().enumerate() {
        if m == id {
            if i >= n {
                return Err(err(format!("index {i} out of range for {m}")));
            }
            s[(i, c)] = 1.0;
            covered[i] += 1;
        }
    }
    if covered.iter().any(|&c| c != 1) {
        return Err(err(format!(
            "every input of {id} must be mapped exactly once"
        )));
    }
    Ok(s)
}

fn sparse_row(row: &DMatrix<f64>) -> Vec<(usize, f64)> {
    row.iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > EPS)
        .map(|(i, &v)| (i, v))
        .collect()
}

fn dense_row(entries: &[(usize, f64)], n: usize) -> DMatrix<f64> {
    let mut r = DMatrix::zeros(1, n);
    for &(i, w) in entries {
        r[(0, i)] += w;
    }
    r
}

pub fn compose(
    models: &[(SubsystemId, &Dynamics)],
    topology: &Topology,
    spec: &CompositeSpec,
) -> Result<Dynamics> {
    let lookup: BTreeMap<SubsystemId, &Dynamics> = models.iter().copied().collect();
    let mut members = Vec::new();
    let (mut nx, mut nv, mut nphi) = (0, 0, 0);
    let mut ts = None;
    for &id in &spec.members {
        let model = *lookup
            .get(&id)
            .ok_or_else(|| err(format!("no model for {id}")))?;
        let dims = model.dims();
        match ts {
            None => ts = Some(model.ts()),
            Some(t) if (t - model.ts()).abs() > 1e-12 => {
                return Err(err("members have different sampling periods"))
            }
            _ => {}
        }
        if topology.in_dim(id)? != dims.n_v || topology.out_dim(id)? != dims.n_w {
            return Err(err(format!(
                "coupling dimensions of {id} disagree with the topology"
            )));
        }
        members.push(Member {
            id,
            model,
            dims,
            x_off: nx,
            v_off: nv,
            phi_off: nphi,
        });
        nx += dims.n_x;
        nv += dims.n_v;
        nphi += model.terms().len();
    }
    let ts = ts.ok_or_else(|| err("no members"))?;
    let nu = spec.inputs_u.len();
    let nd = spec.inputs_d.len();
    let nve = spec.inputs_v.len();
    let index_of = |id: SubsystemId| members.iter().position(|m| m.id == id);

    let sx: Vec<_> = members
        .iter()
        .map(|m| selector(m.dims.n_x, m.x_off, nx))
        .collect();
    let sv: Vec<_> = members
        .iter()
        .map(|m| selector(m.dims.n_v, m.v_off, nv))
        .collect();
    let su: Vec<_> = members
        .iter()
        .map(|m| map_selector(&spec.inputs_u, m.id, m.dims.n_u))
        .collect::<Result<_>>()?;
    let sd: Vec<_> = members
        .iter()
        .map(|m| map_selector(&spec.inputs_d, m.id, m.dims.n_d))
        .collect::<Result<_>>()?;

    // Member coupling inputs as affine functions of the composite signals:
    // dv = Lx dX + Lu dU + Ld dD + Lv dVext + Lphi Phi + P dv
    let mut lx = DMatrix::zeros(nv, nx);
    let mut lu = DMatrix::zeros(nv, nu);
    let ld = DMatrix::zeros(nv, nd);
    let mut lv = DMatrix::zeros(nv, nve);
    let mut lphi = DMatrix::zeros(nv, nphi);
    let mut p = DMatrix::zeros(nv, nv);
    let mut covered = vec![false; nv];
    let mut v_op_ext = vec![f64::NAN; nve];

    for (c, consumers) in spec.inputs_v.iter().enumerate() {
        for &(id, idx) in consumers {
            let mi = index_of(id).ok_or_else(|| err(format!("{id} is not a member")))?;
            let m = &members[mi];
            if idx >= m.dims.n_v {
                return Err(err(format!("coupling index {idx} out of range for {id}")));
            }
            let row = m.v_off + idx;
            if covered[row] {
                return Err(err(format!("coupling input {idx} of {id} mapped twice")));
            }
            covered[row] = true;
            lv[(row, c)] = 1.0;
            let op = m.model.affine().parts().v_op[idx];
            if v_op_ext[c].is_nan() {
                v_op_ext[c] = op;
            } else if (v_op_ext[c] - op).abs() > 1e-12 {
                return Err(err(
                    "consumers of one composite input disagree on its operating value",
                ));
            }
        }
    }

    for (mi, m) in members.iter().enumerate() {
        let mut offset = 0;
        for e in topology.stack_in(m.id)? {
            if let Some(mj) = index_of(e.source) {
                let src = &members[mj];
                let out_edges = topology.stack_out(src.id)?;
                let mut w_off = 0;
                for oe in &out_edges {
                    if oe.dest == m.id {
                        break;
                    }
                    w_off += oe.dim;
                }
                let sp = src.model.affine().parts();
                let dp = m.model.affine().parts();
                for comp in 0..e.dim {
                    let row = m.v_off + offset + comp;
                    let q = w_off + comp;
                    if covered[row] {
                        return Err(err(format!(
                            "internal coupling input of {} also mapped externally",
                            m.id
                        )));
                    }
                    covered[row] = true;
                    if (sp.w_op[q] - dp.v_op[offset + comp]).abs() > 1e-9 * (1.0 + sp.w_op[q].abs())
                    {
                        return Err(err(format!(
                            "operating point mismatch on edge {}->{} component {comp}",
                            e.source.0, e.dest.0
                        )));
                    }
                    let cw = sp.c_w.row(q) * &sx[mj];
                    lx.row_mut(row).copy_from(&cw);
                    let cu = sp.d_wu.row(q) * &su[mj];
                    lu.row_mut(row).copy_from(&cu);
                    let cv = sp.d_wv.row(q) * &sv[mj];
                    p.row_mut(row).copy_from(&cv);
                    for (t, term) in src.model.terms().iter().enumerate() {
                        lphi[(row, src.phi_off + t)] = term.gain_w[q];
                    }
                }
            }
            offset += e.dim;
        }
        let _ = mi;
    }
    if let Some(pos) = covered.iter().position(|c| !c) {
        return Err(err(format!("member coupling input {pos} has no source")));
    }

    // P must be nilpotent (no algebraic loop between members).
    let mut power = p.clone();
    for _ in 0..nv {
        if power.amax() < EPS {
            break;
        }
        power = &power * &p;
    }
    if power.amax() >= EPS {
        return Err(Error::AlgebraicLoop);
    }
    let i_minus_p = DMatrix::identity(nv, nv) - &p;
    let inv = i_minus_p.try_inverse().ok_or(Error::AlgebraicLoop)?;
    let mx = &inv * &lx;
    let mu = &inv * &lu;
    let md = &inv * &ld;
    let mv = &inv * &lv;
    let mphi = &inv * &lphi;

    let mut bv_big = DMatrix::zeros(nx, nv);
    let mut a = DMatrix::zeros(nx, nx);
    let mut b_u = DMatrix::zeros(nx, nu);
    let mut b_d = DMatrix::zeros(nx, nd);
    let mut ex = DMatrix::zeros(nx, nphi);
    for (mi, m) in members.iter().enumerate() {
        let pp = m.model.affine().parts();
        let sxt = sx[mi].transpose();
        bv_big += &sxt * &pp.b_v * &sv[mi];
        a += &sxt * &pp.a * &sx[mi];
        b_u += &sxt * &pp.b_u * &su[mi];
        b_d += &sxt * &pp.b_d * &sd[mi];
        for (t, term) in m.model.terms().iter().enumerate() {
            for (r, g) in term.gain_x.iter().enumerate() {
                ex[(m.x_off + r, m.phi_off + t)] += g;
            }
        }
    }
    a += &bv_big * &mx;
    b_u += &bv_big * &mu;
    b_d += &bv_big * &md;
    let b_v = &bv_big * &mv;
    ex += &bv_big * &mphi;

    // Output maps for a selection of member rows.
    struct OutMaps {
        c: DMatrix<f64>,
        du: DMatrix<f64>,
        dv: DMatrix<f64>,
        e: DMatrix<f64>,
        op: Vec<f64>,
    }
    let output_maps = |sel: &[(SubsystemId, usize)], use_y: bool| -> Result<OutMaps> {
        let n = sel.len();
        let mut out = OutMaps {
            c: DMatrix::zeros(n, nx),
            du: DMatrix::zeros(n, nu),
            dv: DMatrix::zeros(n, nve),
            e: DMatrix::zeros(n, nphi),
            op: Vec::with_capacity(n),
        };
        for (r, &(id, idx)) in sel.iter().enumerate() {
            let mi = index_of(id).ok_or_else(|| err(format!("{id} is not a member")))?;
            let m = &members[mi];
            let pp = m.model.affine().parts();
            let (c_row, du_row, dv_row, op) = if use_y {
                if idx >= m.dims.n_y {
                    return Err(err(format!("output index {idx} out of range for {id}")));
                }
                (
                    pp.c_y.row(idx),
                    pp.d_yu.row(idx),
                    pp.d_yv.row(idx),
                    pp.y_op[idx],
                )
            } else {
                if idx >= m.dims.n_w {
                    return Err(err(format!(
                        "coupling output index {idx} out of range for {id}"
                    )));
                }
                (
                    pp.c_w.row(idx),
                    pp.d_wu.row(idx),
                    pp.d_wv.row(idx),
                    pp.w_op[idx],
                )
            };
            let dv_sel = dv_row * &sv[mi];
            out.c
                .row_mut(r)
                .copy_from(&(c_row * &sx[mi] + &dv_sel * &mx));
            out.du
                .row_mut(r)
                .copy_from(&(du_row * &su[mi] + &dv_sel * &mu));
            out.dv.row_mut(r).copy_from(&(&dv_sel * &mv));
            let mut erow = &dv_sel * &mphi;
            for (t, term) in m.model.terms().iter().enumerate() {
                let g = if use_y {
                    term.gain_y[idx]
                } else {
                    term.gain_w[idx]
                };
                erow[(0, m.phi_off + t)] += g;
            }
            out.e.row_mut(r).copy_from(&erow);
            out.op.push(op);
        }
        Ok(out)
    };
    let ym = output_maps(&spec.outputs_y, true)?;
    let wm = output_maps(&spec.outputs_w, false)?;

    // Terms with arguments re-expressed in composite coordinates.
    let mut terms = Vec::with_capacity(nphi);
    for (mi, m) in members.iter().enumerate() {
        for term in m.model.terms() {
            let mut args: [AffineArg; 2] = Default::default();
            for (k, arg) in term.args.iter().enumerate() {
                let ax = dense_row(&arg.x, m.dims.n_x) * &sx[mi];
                let au = dense_row(&arg.u, m.dims.n_u) * &su[mi];
                let ad = dense_row(&arg.d, m.dims.n_d) * &sd[mi];
                let av = dense_row(&arg.v, m.dims.n_v) * &sv[mi];
                let aphi = &av * &mphi;
                if aphi.amax() > EPS {
                    return Err(err("nonlinear argument depends on another nonlinear term"));
                }
                args[k] = AffineArg {
                    op: arg.op,
                    x: sparse_row(&(ax + &av * &mx)),
                    u: sparse_row(&(au + &av * &mu)),
                    v: sparse_row(&(&av * &mv)),
                    d: sparse_row(&(ad + &av * &md)),
                };
            }
            terms.push((term.kind, term.coeff, args));
        }
    }

    let gather =
        |sel: &[(SubsystemId, usize)], f: &dyn Fn(&LinearParts) -> &Vec<f64>| -> Vec<f64> {
            sel.iter()
                .map(|&(id, i)| f(members[index_of(id).unwrap()].model.affine().parts())[i])
                .collect()
        };
    let mut x_op = Vec::with_capacity(nx);
    for m in &members {
        x_op.extend_from_slice(&m.model.affine().parts().x_op);
    }

    let parts = LinearParts {
        a,
        b_u,
        b_v,
        b_d,
        c_y: ym.c,
        d_yu: ym.du,
        d_yv: ym.dv,
        c_w: wm.c,
        d_wu: wm.du,
        d_wv: wm.dv,
        x_op,
        u_op: gather(&spec.inputs_u, &|p| &p.u_op),
        v_op: v_op_ext,
        d_op: gather(&spec.inputs_d, &|p| &p.d_op),
        y_op: ym.op,
        w_op: wm.op,
        ts,
    };
    let affine = LinearModel::new(parts)?;
    if terms.is_empty() {
        return Ok(Dynamics::Linear(affine));
    }
    let terms = terms
        .into_iter()
        .enumerate()
        .map(|(t, (kind, coeff, args))| NonlinearTerm {
            kind,
            coeff,
            args,
            gain_x: ex.column(t).iter().copied().collect(),
            gain_y: ym.e.column(t).iter().copied().collect(),
            gain_w: wm.e.column(t).iter().copied().collect(),
        })
        .collect();
    Ok(Dynamics::Nonlinear(NonlinearModel::new(affine, terms)?))
}
