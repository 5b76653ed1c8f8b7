//! Derivative-free trust-region search over the auxiliary set-point.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::CoordinatorConfig;
use crate::error::{Error, Result};

/// Box of admissible set-points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SetpointBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::dims("set-point bounds", lo.len(), hi.len()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidArgument(
                "set-point bounds require lo <= hi".into(),
            ));
        }
        Ok(Self { lo, hi })
    }

    /// `r_d +- frac * |r_d|` per entry.
    pub fn around(r_d: &[f64], frac: f64) -> Self {
        Self {
            lo: r_d.iter().map(|r| r - frac * r.abs()).collect(),
            hi: r_d.iter().map(|r| r + frac * r.abs()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn clip(&self, r: &mut [f64]) {
        for ((v, lo), hi) in r.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudPoint {
    pub r: Vec<f64>,
    pub cost: f64,
    /// Produced by a converged fixed point.
    pub trusted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustRegionState {
    pub center: Vec<f64>,
    pub radius: Vec<f64>,
    pub min_radius: Vec<f64>,
    pub max_radius: Vec<f64>,
    /// Evaluations of the most recent period.
    pub cloud: Vec<CloudPoint>,
}

impl TrustRegionState {
    /// Initial state centred at `center`, radii from the config (or a
    /// tenth of the bound width when unset).
    pub fn new(
        center: Vec<f64>,
        bounds: &SetpointBounds,
        config: &CoordinatorConfig,
    ) -> Result<Self> {
        let n = center.len();
        if n != bounds.dim() {
            return Err(Error::dims("trust-region center", bounds.dim(), n));
        }
        if !config.initial_radius.is_empty() && config.initial_radius.len() != n {
            return Err(Error::dims(
                "initial radius",
                n,
                config.initial_radius.len(),
            ));
        }
        let width = |i: usize| {
            let w = bounds.width(i);
            if w > 0.0 {
                w
            } else {
                1.0
            }
        };
        let min_radius: Vec<f64> = (0..n).map(|i| config.min_radius_frac * width(i)).collect();
        let max_radius: Vec<f64> = (0..n).map(|i| config.max_radius_frac * width(i)).collect();
        let radius = (0..n)
            .map(|i| {
                let r = config
                    .initial_radius
                    .get(i)
                    .copied()
                    .unwrap_or(0.1 * width(i));
                r.clamp(min_radius[i], max_radius[i])
            })
            .collect();
        let mut center = center;
        bounds.clip(&mut center);
        Ok(Self {
            center,
            radius,
            min_radius,
            max_radius,
            cloud: Vec::new(),
        })
    }

    fn scale_radius(&mut self, factor: f64) {
        for ((r, lo), hi) in self
            .radius
            .iter_mut()
            .zip(&self.min_radius)
            .zip(&self.max_radius)
        {
            *r = (*r * factor).clamp(*lo, *hi);
        }
    }
}

/// Axis-aligned grid of `grid_size` points per dimension spanning
/// `center +- radius`, clipped to the bounds. The center is always part of
/// the grid; duplicates created by clipping are removed. Points are listed
/// with the first coordinate varying slowest.
pub fn build_grid(
    center: &[f64],
    radius: &[f64],
    grid_size: usize,
    bounds: &SetpointBounds,
) -> Result<Vec<Vec<f64>>> {
    let n = center.len();
    if n == 0 {
        return Err(Error::InvalidArgument("set-point dimension is zero".into()));
    }
    if radius.len() != n || bounds.dim() != n {
        return Err(Error::dims(
            "grid geometry",
            n,
            radius.len().min(bounds.dim()),
        ));
    }
    if grid_size == 0 {
        return Err(Error::InvalidArgument(
            "grid_size must be at least 1".into(),
        ));
    }
    let mut axes = Vec::with_capacity(n);
    for i in 0..n {
        let c = center[i].clamp(bounds.lo[i], bounds.hi[i]);
        let mut vals = vec![c];
        if grid_size > 1 {
            for j in 0..grid_size {
                let t = -1.0 + 2.0 * j as f64 / (grid_size - 1) as f64;
                vals.push((c + t * radius[i]).clamp(bounds.lo[i], bounds.hi[i]));
            }
        }
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        axes.push(vals);
    }
    let mut grid = vec![Vec::with_capacity(n)];
    for axis in &axes {
        grid = grid
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadKind {
    Full,
    Diagonal,
    Linear,
    Constant,
}

impl QuadKind {
    fn coefficients(self, n: usize) -> usize {
        match self {
            QuadKind::Full => 1 + n + n * (n + 1) / 2,
            QuadKind::Diagonal => 1 + 2 * n,
            QuadKind::Linear => 1 + n,
            QuadKind::Constant => 1,
        }
    }

    fn lower(self) -> Option<Self> {
        match self {
            QuadKind::Full => Some(QuadKind::Diagonal),
            QuadKind::Diagonal => Some(QuadKind::Linear),
            QuadKind::Linear => Some(QuadKind::Constant),
            QuadKind::Constant => None,
        }
    }
}

/// `J(r) = c + g^T r + 1/2 r^T H r`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadModel {
    pub c: f64,
    pub g: DVector<f64>,
    pub h: DMatrix<f64>,
    pub kind: QuadKind,
    /// Root-mean-square fit error over the fitted points.
    pub residual: f64,
    /// A richer model was requested but its design matrix was singular.
    pub reduced: bool,
}

impl QuadModel {
    pub fn value(&self, r: &[f64]) -> f64 {
        let r = DVector::from_column_slice(r);
        self.c + self.g.dot(&r) + 0.5 * r.dot(&(&self.h * &r))
    }

    /// Minimizer over the box `[lo, hi]`; `None` when the model is not
    /// strictly convex (a flat model returns `fallback`).
    pub fn minimize_box(&self, lo: &[f64], hi: &[f64], fallback: &[f64]) -> Option<Vec<f64>> {
        let n = self.g.len();
        let tiny = 1e-12 * (1.0 + self.c.abs());
        let flat = self.g.amax() <= tiny && self.h.amax() <= tiny;
        if flat {
            return Some(fallback.to_vec());
        }
        Cholesky::new(self.h.clone())?;
        // Coordinate descent on the box-constrained convex quadratic; exact
        // per axis, and a single sweep when H is diagonal.
        let mut x: Vec<f64> = fallback
            .iter()
            .zip(lo)
            .zip(hi)
            .map(|((v, l), h)| v.clamp(*l, *h))
            .collect();
        for _ in 0..10_000 {
            let mut change = 0.0f64;
            for i in 0..n {
                let mut grad = self.g[i];
                for j in 0..n {
                    if j != i {
                        grad += self.h[(i, j)] * x[j];
                    }
                }
                let xi = (-grad / self.h[(i, i)]).clamp(lo[i], hi[i]);
                change = change.max((xi - x[i]).abs());
                x[i] = xi;
            }
            if change <= 1e-15 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
                break;
            }
        }
        Some(x)
    }
}

fn features(kind: QuadKind, z: &[f64]) -> Vec<f64> {
    let n = z.len();
    let mut f = Vec::with_capacity(kind.coefficients(n));
    f.push(1.0);
    if kind == QuadKind::Constant {
        return f;
    }
    f.extend_from_slice(z);
    match kind {
        QuadKind::Full => {
            for i in 0..n {
                for j in i..n {
                    f.push(if i == j {
                        0.5 * z[i] * z[i]
                    } else {
                        z[i] * z[j]
                    });
                }
            }
        }
        QuadKind::Diagonal => f.extend(z.iter().map(|v| 0.5 * v * v)),
        _ => {}
    }
    f
}

/// Least-squares quadratic surrogate of the trusted cloud points.
///
/// Fits in coordinates centred on the cloud mean and scaled by its spread,
/// then maps back. Falls back to a diagonal, linear or constant model when
/// there are too few points or the design is rank deficient.
pub fn quadratic_fit(cloud: &[CloudPoint]) -> Result<QuadModel> {
    let pts: Vec<&CloudPoint> = cloud
        .iter()
        .filter(|p| p.trusted && p.cost.is_finite())
        .collect();
    if pts.is_empty() {
        return Err(Error::InvalidArgument("no trusted points to fit".into()));
    }
    let n = pts[0].r.len();
    if pts.iter().any(|p| p.r.len() != n) {
        return Err(Error::InvalidArgument(
            "cloud points differ in dimension".into(),
        ));
    }
    let m = pts.len();
    let mean: Vec<f64> = (0..n)
        .map(|i| pts.iter().map(|p| p.r[i]).sum::<f64>() / m as f64)
        .collect();
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let s = pts
                .iter()
                .map(|p| (p.r[i] - mean[i]).abs())
                .fold(0.0, f64::max);
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = pts
        .iter()
        .map(|p| (0..n).map(|i| (p.r[i] - mean[i]) / scale[i]).collect())
        .collect();
    let y = DVector::from_iterator(m, pts.iter().map(|p| p.cost));

    let mut kind = [
        QuadKind::Full,
        QuadKind::Diagonal,
        QuadKind::Linear,
        QuadKind::Constant,
    ]
    .into_iter()
    .find(|k| k.coefficients(n) <= m)
    .unwrap_or(QuadKind::Constant);
    let requested = kind;
    let coef = loop {
        let p = kind.coefficients(n);
        let x = DMatrix::from_fn(m, p, |r, c| features(kind, &z[r])[c]);
        let svd = x.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if smin > 1e-10 * smax {
            break svd
                .solve(&y, 0.0)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        match kind.lower() {
            Some(k) => kind = k,
            None => break DVector::from_element(1, y.mean()),
        }
    };

    // Coefficients in scaled coordinates.
    let c_z = coef[0];
    let mut g_z = DVector::zeros(n);
    let mut h_z = DMatrix::zeros(n, n);
    if kind != QuadKind::Constant {
        for i in 0..n {
            g_z[i] = coef[1 + i];
        }
        let mut k = 1 + n;
        match kind {
            QuadKind::Full => {
                for i in 0..n {
                    for j in i..n {
                        h_z[(i, j)] = coef[k];
                        h_z[(j, i)] = coef[k];
                        k += 1;
                    }
                }
            }
            QuadKind::Diagonal => {
                for i in 0..n {
                    h_z[(i, i)] = coef[k + i];
                }
            }
            _ => {}
        }
    }
    // z = S^-1 (r - mean)
    let s_inv = DVector::from_iterator(n, scale.iter().map(|s| 1.0 / s));
    let h = DMatrix::from_fn(n, n, |i, j| h_z[(i, j)] * s_inv[i] * s_inv[j]);
    let mean_v = DVector::from_column_slice(&mean);
    let g_scaled = g_z.component_mul(&s_inv);
    let g = &g_scaled - &h * &mean_v;
    let c = c_z - g_scaled.dot(&mean_v) + 0.5 * mean_v.dot(&(&h * &mean_v));

    let mut model = QuadModel {
        c,
        g,
        h,
        kind,
        residual: 0.0,
        reduced: kind != requested,
    };
    let sq: f64 = pts
        .iter()
        .map(|p| (model.value(&p.r) - p.cost).powi(2))
        .sum();
    model.residual = (sq / m as f64).sqrt();
    Ok(model)
}

/// Candidate set-point: the surrogate's minimizer over the trust region
/// (intersected with the bounds), or the best trusted cloud point when the
/// surrogate is not convex.
pub fn trust_region_step(
    state: &TrustRegionState,
    model: &QuadModel,
    bounds: &SetpointBounds,
) -> Vec<f64> {
    let n = state.center.len();
    let lo: Vec<f64> = (0..n)
        .map(|i| (state.center[i] - state.radius[i]).max(bounds.lo[i]))
        .collect();
    let hi: Vec<f64> = (0..n)
        .map(|i| (state.center[i] + state.radius[i]).min(bounds.hi[i]))
        .collect();
    if let Some(x) = model.minimize_box(&lo, &hi, &state.center) {
        return x;
    }
    best_point(&state.cloud, &state.center)
        .map(|i| state.cloud[i].r.clone())
        .unwrap_or_else(|| state.center.clone())
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the lowest-cost trusted point; ties go to the point closest to
/// `center`, then to the earlier point.
fn best_point(cloud: &[CloudPoint], center: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in cloud.iter().enumerate() {
        if !p.trusted || !p.cost.is_finite() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let q = &cloud[b];
                if p.cost < q.cost
                    || (p.cost == q.cost && dist2(&p.r, center) < dist2(&q.r, center))
                {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Result of evaluating the central cost at one set-point.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub cost: f64,
    pub trusted: bool,
    pub payload: T,
}

#[derive(Debug, Clone)]
pub struct PeriodOutcome<T> {
    pub r_opt: Vec<f64>,
    /// Evaluation at `r_opt`.
    pub best: Evaluation<T>,
    /// Number of set-points evaluated this period.
    pub evaluations: usize,
    pub model: Option<QuadModel>,
    /// No trusted evaluation was available; `r_opt` is the previous center.
    pub fallback: bool,
}

/// One sampling period of the set-point search: evaluate the grid, fit the
/// surrogate, evaluate its minimizer, adapt the radius and move the center
/// to the best point seen.
///
/// Grid points are evaluated concurrently; the result does not depend on
/// the evaluation order.
pub fn optimize_setpoint<T, F>(
    state: &mut TrustRegionState,
    bounds: &SetpointBounds,
    config: &CoordinatorConfig,
    evaluate: F,
) -> Result<PeriodOutcome<T>>
where
    T: Send,
    F: Fn(&[f64]) -> Result<Evaluation<T>> + Sync,
{
    let grid = build_grid(&state.center, &state.radius, config.grid_size, bounds)?;
    let mut evals: Vec<Evaluation<T>> = grid
        .par_iter()
        .map(|r| evaluate(r))
        .collect::<Result<_>>()?;
    let mut points: Vec<Vec<f64>> = grid;
    state.cloud = points
        .iter()
        .zip(&evals)
        .map(|(r, e)| CloudPoint {
            r: r.clone(),
            cost: e.cost,
            trusted: e.trusted,
        })
        .collect();
    let center_idx = points
        .iter()
        .position(|p| dist2(p, &state.center) == 0.0)
        .unwrap_or(0);
    let center_cost = if evals[center_idx].trusted {
        evals[center_idx].cost
    } else {
        f64::INFINITY
    };

    let trusted = state.cloud.iter().filter(|p| p.trusted).count();
    let mut model = None;
    if trusted == 0 {
        warn!(
            "no converged evaluation this period; keeping set-point {:?}",
            state.center
        );
        let best = evals.swap_remove(center_idx);
        return Ok(PeriodOutcome {
            r_opt: state.center.clone(),
            best,
            evaluations: points.len(),
            model: None,
            fallback: true,
        });
    }
    if points.len() > 1 {
        let fit = quadratic_fit(&state.cloud)?;
        let candidate = trust_region_step(state, &fit, bounds);
        let known = points.iter().position(|p| dist2(p, &candidate) <= 1e-24);
        let cand_idx = match known {
            Some(i) => i,
            None => {
                let e = evaluate(&candidate)?;
                state.cloud.push(CloudPoint {
                    r: candidate.clone(),
                    cost: e.cost,
                    trusted: e.trusted,
                });
                points.push(candidate);
                evals.push(e);
                points.len() - 1
            }
        };
        let improved = evals[cand_idx].trusted && evals[cand_idx].cost < center_cost;
        state.scale_radius(if improved {
            config.expand
        } else {
            config.contract
        });
        model = Some(fit);
    }
    let best_idx = best_point(&state.cloud, &state.center).unwrap_or(center_idx);
    state.center = points[best_idx].clone();
    let evaluations = points.len();
    let best = evals.swap_remove(best_idx);
    Ok(PeriodOutcome {
        r_opt: state.center.clone(),
        best,
        evaluations,
        model,
        fallback: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds1(lo: f64, hi: f64) -> SetpointBounds {
        SetpointBounds::new(vec![lo], vec![hi]).unwrap()
    }

    #[test]
    fn grid_examples() {
        let g = build_grid(&[0.0], &[1.0], 3, &bounds1(-5.0, 5.0)).unwrap();
        assert_eq!(g, vec![vec![-1.0], vec![0.0], vec![1.0]]);
        let b2 = SetpointBounds::new(vec![-5.0, -5.0], vec![5.0, 5.0]).unwrap();
        assert_eq!(
            build_grid(&[0.0, 0.0], &[1.0, 1.0], 3, &b2).unwrap().len(),
            9
        );
        let g = build_grid(&[0.9], &[0.5], 3, &bounds1(-5.0, 1.0)).unwrap();
        assert_eq!(g.last().unwrap()[0], 1.0);
        assert!(build_grid(&[], &[], 3, &SetpointBounds::new(vec![], vec![]).unwrap()).is_err());
        assert_eq!(
            build_grid(&[0.2], &[1.0], 1, &bounds1(-5.0, 5.0)).unwrap(),
            vec![vec![0.2]]
        );
        // even sizes still contain the center
        let g = build_grid(&[0.0], &[1.0], 2, &bounds1(-5.0, 5.0)).unwrap();
        assert_eq!(g, vec![vec![-1.0], vec![0.0], vec![1.0]]);
    }

    fn cloud_from(f: impl Fn(&[f64]) -> f64, pts: &[Vec<f64>]) -> Vec<CloudPoint> {
        pts.iter()
            .map(|r| CloudPoint {
                r: r.clone(),
                cost: f(r),
                trusted: true,
            })
            .collect()
    }

    #[test]
    fn recovers_one_dimensional_quadratic() {
        let pts: Vec<Vec<f64>> = [-1.0, 0.0, 0.5, 2.0].iter().map(|v| vec![*v]).collect();
        let m = quadratic_fit(&cloud_from(|r| 3.0 + 2.0 * r[0] + r[0] * r[0], &pts)).unwrap();
        assert!((m.c - 3.0).abs() < 1e-8);
        assert!((m.g[0] - 2.0).abs() < 1e-8);
        assert!((m.h[(0, 0)] - 2.0).abs() < 1e-8);
        assert_eq!(m.kind, QuadKind::Full);
    }

    #[test]
    fn constant_cloud_is_flat() {
        let pts: Vec<Vec<f64>> = [-1.0, 0.0, 1.0].iter().map(|v| vec![*v]).collect();
        let m = quadratic_fit(&cloud_from(|_| 4.0, &pts)).unwrap();
        assert!(m.g.amax() < 1e-12 && m.h.amax() < 1e-12);
        assert_eq!(m.minimize_box(&[-1.0], &[1.0], &[0.3]), Some(vec![0.3]));
    }

    #[test]
    fn interpolates_minimal_cloud() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.2],
            vec![-0.3, 1.0],
            vec![0.7, -0.8],
            vec![-1.1, -0.4],
            vec![0.4, 0.9],
        ];
        let m = quadratic_fit(&cloud_from(|r| (r[0] * 3.1).sin() + r[1].exp(), &pts)).unwrap();
        assert_eq!(m.kind, QuadKind::Full);
        assert!(m.residual < 1e-9, "{}", m.residual);
    }

    #[test]
    fn untrusted_points_ignored() {
        let mut cloud = cloud_from(|r| r[0] * r[0], &[vec![-1.0], vec![0.0], vec![1.0]]);
        cloud.push(CloudPoint {
            r: vec![0.5],
            cost: 1e9,
            trusted: false,
        });
        let m = quadratic_fit(&cloud).unwrap();
        assert!((m.h[(0, 0)] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn step_vertex_and_concave_fallback() {
        let b = bounds1(-10.0, 10.0);
        let mut st = TrustRegionState {
            center: vec![0.0],
            radius: vec![2.0],
            min_radius: vec![1e-6],
            max_radius: vec![10.0],
            cloud: Vec::new(),
        };
        let convex = QuadModel {
            c: 0.0,
            g: DVector::from_element(1, -1.0),
            h: DMatrix::from_element(1, 1, 2.0),
            kind: QuadKind::Full,
            residual: 0.0,
            reduced: false,
        };
        assert!((trust_region_step(&st, &convex, &b)[0] - 0.5).abs() < 1e-15);

        st.cloud = cloud_from(
            |r| -r[0] * r[0] + 0.1 * r[0],
            &[vec![-2.0], vec![0.0], vec![2.0]],
        );
        let concave = quadratic_fit(&st.cloud).unwrap();
        assert_eq!(trust_region_step(&st, &concave, &b), vec![-2.0]);
    }

    #[test]
    fn radius_expands_exactly_on_improvement() {
        let b = bounds1(-10.0, 10.0);
        let cfg = CoordinatorConfig::default();
        let mut st = TrustRegionState::new(vec![0.0], &b, &cfg).unwrap();
        let r0 = st.radius[0];
        let out = optimize_setpoint(&mut st, &b, &cfg, |r| {
            Ok(Evaluation {
                cost: (r[0] - 5.0).powi(2),
                trusted: true,
                payload: (),
            })
        })
        .unwrap();
        assert_eq!(st.radius[0], r0 * cfg.expand);
        assert_eq!(out.r_opt, vec![r0]);
    }

    #[test]
    fn grid_size_one_returns_center() {
        let b = bounds1(-10.0, 10.0);
        let cfg = CoordinatorConfig {
            grid_size: 1,
            ..Default::default()
        };
        let mut st = TrustRegionState::new(vec![1.5], &b, &cfg).unwrap();
        let out = optimize_setpoint(&mut st, &b, &cfg, |r| {
            Ok(Evaluation {
                cost: r[0] * r[0],
                trusted: true,
                payload: (),
            })
        })
        .unwrap();
        assert_eq!(out.r_opt, vec![1.5]);
        assert_eq!(out.evaluations, 1);
    }

    #[test]
    fn untrusted_period_keeps_previous_setpoint() {
        let b = bounds1(-10.0, 10.0);
        let cfg = CoordinatorConfig::default();
        let mut st = TrustRegionState::new(vec![2.0], &b, &cfg).unwrap();
        let out = optimize_setpoint(&mut st, &b, &cfg, |r| {
            Ok(Evaluation {
                cost: r[0],
                trusted: false,
                payload: (),
            })
        })
        .unwrap();
        assert!(out.fallback);
        assert_eq!(out.r_opt, vec![2.0]);
    }
}
