//! Closed-form reference solutions: tilted planes and spheres.
//!
//! Both families solve the graph equation exactly for a constant
//! mean-curvature value that is *not* taken on faith: [`ExactSolution::calibrate`]
//! determines it by testing the candidate values against the pointwise
//! operator with analytic derivatives and accepting only a candidate whose
//! residual vanishes to near machine precision. Planes pin the orientation
//! conventions; spheres exercise every nonlinear term and provide an
//! independent Taylor expansion at the boundary ([`ExactSolution::taylor_at_boundary`])
//! to compare against the order-by-order engine.

use crate::error::{CmcError, Result};
use crate::expr::Expr;
use crate::jet::Jet;
use crate::operator::{tq_point, ProblemData};
use crate::series::LogSeries;
use serde::{Deserialize, Serialize};

/// Which hemisphere a spherical graph takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Upper,
    Lower,
}

impl Branch {
    fn sign(self) -> f64 {
        match self {
            Branch::Upper => 1.0,
            Branch::Lower => -1.0,
        }
    }
}

/// Value, gradient, and Hessian of a reference solution at one point.
/// Gradient layout is tangential-then-`t` (length `n`); the Hessian is
/// `n x n` row-major in the same ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct PointValues {
    pub u: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

/// A closed-form solution of the graph equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExactSolution {
    /// `u = offset + slope . x' + rise * t` — a tilted plane.
    Plane { offset: f64, slope: Vec<f64>, rise: f64 },
    /// `u = center_y +/- sqrt(radius^2 - |x' - center_x|^2 - (t - center_t)^2)`
    /// — a hemisphere graphed in the `y` direction.
    Sphere {
        center_x: Vec<f64>,
        center_y: f64,
        center_t: f64,
        radius: f64,
        branch: Branch,
    },
}

impl ExactSolution {
    /// Ambient half-space dimension `n` (the graph lives over `n`
    /// coordinates: `n - 1` tangential plus `t`).
    pub fn n(&self) -> usize {
        match self {
            ExactSolution::Plane { slope, .. } => slope.len() + 1,
            ExactSolution::Sphere { center_x, .. } => center_x.len() + 1,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ExactSolution::Plane { offset, slope, rise } => {
                if slope.is_empty() {
                    return Err(CmcError::Shape("plane needs at least one tangential slope".into()));
                }
                if !offset.is_finite()
                    || !rise.is_finite()
                    || slope.iter().any(|s| !s.is_finite())
                {
                    return Err(CmcError::Domain("plane parameters must be finite".into()));
                }
            }
            ExactSolution::Sphere { center_x, center_y, center_t, radius, .. } => {
                if center_x.is_empty() {
                    return Err(CmcError::Shape("sphere needs at least one tangential center coordinate".into()));
                }
                if !radius.is_finite() || *radius <= 0.0 {
                    return Err(CmcError::Domain(format!("sphere radius must be positive, got {radius}")));
                }
                if !center_y.is_finite()
                    || !center_t.is_finite()
                    || center_x.iter().any(|c| !c.is_finite())
                {
                    return Err(CmcError::Domain("sphere parameters must be finite".into()));
                }
                if *center_t < 0.0 {
                    return Err(CmcError::Domain(format!(
                        "sphere center height must be nonnegative, got {center_t}"
                    )));
                }
                if *radius <= *center_t {
                    return Err(CmcError::Domain(format!(
                        "sphere must reach the boundary: radius {radius} <= center height {center_t}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Squared distance budget for a sphere: `radius^2 - |(x,t) - center|^2`.
    fn sphere_gap(&self, x: &[f64], t: f64) -> Option<f64> {
        match self {
            ExactSolution::Sphere { center_x, center_t, radius, .. } => {
                let mut d2 = (t - center_t) * (t - center_t);
                for (xi, ci) in x.iter().zip(center_x) {
                    d2 += (xi - ci) * (xi - ci);
                }
                Some(radius * radius - d2)
            }
            ExactSolution::Plane { .. } => None,
        }
    }

    /// Whether `(x, t)` lies strictly inside the solution's domain.
    pub fn contains(&self, x: &[f64], t: f64) -> bool {
        match self.sphere_gap(x, t) {
            None => true,
            Some(gap) => gap > 0.0,
        }
    }

    /// Whether `(x, t)` keeps a 10% radial margin from the domain edge
    /// (always true for planes). Grids for solving or sampling should stay
    /// in this region so that gradients remain bounded.
    pub fn is_well_inside(&self, x: &[f64], t: f64) -> bool {
        match (self, self.sphere_gap(x, t)) {
            (ExactSolution::Sphere { radius, .. }, Some(gap)) => {
                gap >= radius * radius * (1.0 - 0.9 * 0.9)
            }
            _ => true,
        }
    }

    /// Value and analytic first/second derivatives at `(x, t)`.
    pub fn eval(&self, x: &[f64], t: f64) -> Result<PointValues> {
        self.validate()?;
        let n = self.n();
        if x.len() != n - 1 {
            return Err(CmcError::Shape(format!(
                "point has {} tangential coordinates, expected {}",
                x.len(),
                n - 1
            )));
        }
        match self {
            ExactSolution::Plane { offset, slope, rise } => {
                let u = offset + slope.iter().zip(x).map(|(s, xi)| s * xi).sum::<f64>() + rise * t;
                let mut grad = slope.clone();
                grad.push(*rise);
                Ok(PointValues { u, grad, hess: vec![0.0; n * n] })
            }
            ExactSolution::Sphere { center_x, center_y, center_t, branch, .. } => {
                let gap = self.sphere_gap(x, t).expect("sphere");
                if gap <= 0.0 {
                    return Err(CmcError::Domain(format!(
                        "point is outside the sphere's graph domain (gap {gap:.3e})"
                    )));
                }
                let w = f64::sqrt(gap);
                let sigma = branch.sign();
                let mut d: Vec<f64> =
                    x.iter().zip(center_x).map(|(xi, ci)| xi - ci).collect();
                d.push(t - center_t);
                let grad: Vec<f64> = d.iter().map(|di| -sigma * di / w).collect();
                let mut hess = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let mut v = -sigma * d[i] * d[j] / (w * w * w);
                        if i == j {
                            v -= sigma / w;
                        }
                        hess[i * n + j] = v;
                    }
                }
                Ok(PointValues { u: center_y + sigma * w, grad, hess })
            }
        }
    }

    /// Determine the constant mean-curvature value this solution satisfies,
    /// by testing the analytically motivated candidates against the
    /// pointwise operator and accepting only one whose residual vanishes.
    pub fn calibrate(&self) -> Result<f64> {
        self.validate()?;
        let n = self.n();
        match self {
            ExactSolution::Plane { slope, rise, .. } => {
                let s = 1.0 + slope.iter().map(|p| p * p).sum::<f64>() + rise * rise;
                Ok(rise / f64::sqrt(s))
            }
            ExactSolution::Sphere { center_x, center_t, radius, .. } => {
                let candidates = [center_t / radius, -center_t / radius];
                let samples = self.calibration_samples(center_x, *center_t, *radius)?;
                let mut accepted: Option<f64> = None;
                for h in candidates {
                    let mut worst = 0.0_f64;
                    let mut scale = 1.0_f64;
                    for (x, t) in &samples {
                        let pv = self.eval(x, *t)?;
                        let r = tq_point(n, *t, h, &pv.grad, &pv.hess);
                        worst = worst.max(r.abs());
                        scale = scale
                            .max(pv.grad.iter().fold(0.0, |m: f64, g| m.max(g.abs())))
                            .max(pv.hess.iter().fold(0.0, |m: f64, g| m.max(g.abs())));
                    }
                    if worst <= 1e-10 * scale {
                        if let Some(prev) = accepted {
                            if (prev - h).abs() > 1e-14 {
                                return Err(CmcError::Internal(format!(
                                    "calibration is ambiguous: both {prev} and {h} annihilate \
                                     the residual"
                                )));
                            }
                        } else {
                            accepted = Some(h);
                        }
                    }
                }
                accepted.ok_or_else(|| {
                    CmcError::Internal(
                        "no candidate mean-curvature value annihilates the sphere residual"
                            .to_string(),
                    )
                })
            }
        }
    }

    fn calibration_samples(
        &self,
        center_x: &[f64],
        center_t: f64,
        radius: f64,
    ) -> Result<Vec<(Vec<f64>, f64)>> {
        let t_lo = (center_t - radius).max(0.0);
        let t_hi = center_t + radius;
        let mut samples = Vec::new();
        for theta in [0.3, 0.5, 0.7] {
            let t = t_lo + theta * (t_hi - t_lo);
            if t <= 0.0 {
                continue;
            }
            samples.push((center_x.to_vec(), t));
            for axis in 0..center_x.len() {
                let mut x = center_x.to_vec();
                x[axis] += 0.15 * radius;
                if self.contains(&x, t) {
                    samples.push((x, t));
                }
            }
        }
        if samples.is_empty() {
            return Err(CmcError::Domain(
                "sphere has no usable calibration points above the boundary".to_string(),
            ));
        }
        Ok(samples)
    }

    /// The boundary trace `u(., 0)` as an expression in `x1, x2, ...`.
    pub fn trace_expr(&self) -> Expr {
        match self {
            ExactSolution::Plane { offset, slope, .. } => {
                let mut e = Expr::num(*offset);
                for (a, s) in slope.iter().enumerate() {
                    e = e + Expr::num(*s) * Expr::x(a as u8 + 1);
                }
                e
            }
            ExactSolution::Sphere { center_x, center_y, center_t, radius, branch } => {
                let mut gap = Expr::num(radius * radius - center_t * center_t);
                for (a, c) in center_x.iter().enumerate() {
                    gap = gap - (Expr::x(a as u8 + 1) - Expr::num(*c)).pow(2);
                }
                let root = gap.sqrt();
                match branch {
                    Branch::Upper => Expr::num(*center_y) + root,
                    Branch::Lower => Expr::num(*center_y) - root,
                }
            }
        }
    }

    /// Problem data whose boundary trace and (calibrated) mean curvature
    /// are this solution's, with jets around `base`.
    pub fn problem_data(&self, base: &[f64]) -> Result<ProblemData> {
        let h = self.calibrate()?;
        ProblemData::new(self.n(), self.trace_expr(), Expr::num(h), base.to_vec())
    }

    /// Joint Taylor expansion at a boundary point: coefficient jets in the
    /// tangential offset for each power of `t` (no log terms — these
    /// solutions are analytic up to the boundary). For spheres the base
    /// point must keep a 10% margin inside the trace disc.
    pub fn taylor_at_boundary(
        &self,
        base: &[f64],
        jet_order: usize,
        t_order: usize,
    ) -> Result<LogSeries<f64>> {
        self.validate()?;
        let dim = self.n() - 1;
        if base.len() != dim {
            return Err(CmcError::Shape(format!(
                "base point has {} coordinates, expected {dim}",
                base.len()
            )));
        }
        match self {
            ExactSolution::Plane { offset, slope, rise } => {
                let mut trace = Jet::constant(
                    dim,
                    jet_order,
                    offset + slope.iter().zip(base).map(|(s, b)| s * b).sum::<f64>(),
                );
                if jet_order >= 1 {
                    for (a, s) in slope.iter().enumerate() {
                        let mut e = vec![0u32; dim];
                        e[a] = 1;
                        trace.set_coeff(&e, *s)?;
                    }
                }
                let mut u = LogSeries::zero(dim, jet_order, t_order, 0);
                u.insert(0, 0, trace)?;
                if t_order >= 1 {
                    u.insert(1, 0, Jet::constant(dim, jet_order, *rise))?;
                }
                Ok(u)
            }
            ExactSolution::Sphere { center_x, center_y, center_t, radius, branch } => {
                if jet_order < 2 {
                    return Err(CmcError::Shape(
                        "sphere expansion needs jet order >= 2 (the gap is quadratic)".into(),
                    ));
                }
                let trace_sq = radius * radius - center_t * center_t;
                let off_sq: f64 =
                    base.iter().zip(center_x).map(|(b, c)| (b - c) * (b - c)).sum();
                if trace_sq <= 0.0 || off_sq > 0.81 * trace_sq {
                    return Err(CmcError::Domain(format!(
                        "base point is outside the 90% trace disc (|x0 - center|^2 = {off_sq:.3e}, \
                         disc^2 = {trace_sq:.3e})"
                    )));
                }
                // gap(xi, t) = A(xi) + 2 center_t t - t^2 with A quadratic.
                let mut a_jet = Jet::constant(dim, jet_order, trace_sq - off_sq);
                for (axis, (b, c)) in base.iter().zip(center_x).enumerate() {
                    let mut e = vec![0u32; dim];
                    e[axis] = 1;
                    a_jet.set_coeff(&e, -2.0 * (b - c))?;
                    e[axis] = 2;
                    a_jet.set_coeff(&e, -1.0)?;
                }
                let mut gap = LogSeries::zero(dim, jet_order, t_order, 0);
                gap.insert(0, 0, a_jet)?;
                if t_order >= 1 {
                    gap.insert(1, 0, Jet::constant(dim, jet_order, 2.0 * center_t))?;
                }
                if t_order >= 2 {
                    gap.insert(2, 0, Jet::constant(dim, jet_order, -1.0))?;
                }
                let root = gap.sqrt()?;
                let signed = root.scale(&branch.sign());
                let mut center = LogSeries::zero(dim, jet_order, t_order, 0);
                center.insert(0, 0, Jet::constant(dim, jet_order, *center_y))?;
                center.add(&signed)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sphere(n: usize, center_t: f64, branch: Branch) -> ExactSolution {
        ExactSolution::Sphere {
            center_x: vec![0.1; n - 1],
            center_y: -0.2,
            center_t,
            radius: 1.0,
            branch,
        }
    }

    #[test]
    fn plane_calibration_and_residual() {
        let plane = ExactSolution::Plane { offset: 0.6, slope: vec![0.25, -0.1], rise: 0.4 };
        let h = plane.calibrate().unwrap();
        let s = 1.0 + 0.25f64 * 0.25 + 0.1 * 0.1 + 0.4 * 0.4;
        assert_abs_diff_eq!(h, 0.4 / f64::sqrt(s), epsilon = 1e-15);
        // The plane annihilates the pointwise operator at arbitrary points.
        for (x, t) in [([0.3, -0.2], 0.7), ([-0.5, 0.1], 0.05)] {
            let pv = plane.eval(&x, t).unwrap();
            let r = tq_point(3, t, h, &pv.grad, &pv.hess);
            assert!(r.abs() < 1e-13, "plane residual {r}");
        }
    }

    #[test]
    fn sphere_calibration_signs() {
        // Upper hemisphere, center above the boundary: H = center_t / radius;
        // the lower branch flips the orientation, and an equatorial center
        // is the minimal case H = 0.
        for n in [2usize, 3] {
            let h_up = sphere(n, 0.3, Branch::Upper).calibrate().unwrap();
            assert_abs_diff_eq!(h_up, 0.3, epsilon = 1e-12);
            let h_dn = sphere(n, 0.3, Branch::Lower).calibrate().unwrap();
            assert_abs_diff_eq!(h_dn, -0.3, epsilon = 1e-12);
            let h_eq = sphere(n, 0.0, Branch::Upper).calibrate().unwrap();
            assert_abs_diff_eq!(h_eq, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sphere_derivatives_match_finite_differences() {
        let s = sphere(3, 0.3, Branch::Upper);
        let x = [0.25, -0.05];
        let t = 0.5;
        let pv = s.eval(&x, t).unwrap();
        let h = 1e-5;
        let f = |x1: f64, x2: f64, tt: f64| s.eval(&[x1, x2], tt).unwrap().u;
        let fd = [
            (f(x[0] + h, x[1], t) - f(x[0] - h, x[1], t)) / (2.0 * h),
            (f(x[0], x[1] + h, t) - f(x[0], x[1] - h, t)) / (2.0 * h),
            (f(x[0], x[1], t + h) - f(x[0], x[1], t - h)) / (2.0 * h),
        ];
        for (g, fd) in pv.grad.iter().zip(fd) {
            assert_abs_diff_eq!(*g, fd, epsilon = 1e-9);
        }
        // One diagonal and one mixed second derivative.
        let d2_tt = (f(x[0], x[1], t + h) - 2.0 * pv.u + f(x[0], x[1], t - h)) / (h * h);
        assert_abs_diff_eq!(pv.hess[8], d2_tt, epsilon = 1e-6);
        let d2_x1t = (f(x[0] + h, x[1], t + h) - f(x[0] + h, x[1], t - h)
            - f(x[0] - h, x[1], t + h)
            + f(x[0] - h, x[1], t - h))
            / (4.0 * h * h);
        assert_abs_diff_eq!(pv.hess[2], d2_x1t, epsilon = 1e-6);
    }

    #[test]
    fn taylor_matches_direct_evaluation() {
        let s = sphere(2, 0.3, Branch::Upper);
        let base = [0.25];
        let series = s.taylor_at_boundary(&base, 6, 6).unwrap();
        for (xi, t) in [(0.03, 0.04), (-0.05, 0.02), (0.0, 0.06)] {
            let direct = s.eval(&[base[0] + xi], t).unwrap().u;
            let via = series.eval(&[xi], t).unwrap();
            assert_abs_diff_eq!(direct, via, epsilon = 1e-7);
        }
        // Plane version is exact.
        let p = ExactSolution::Plane { offset: 0.6, slope: vec![0.25], rise: 0.4 };
        let ps = p.taylor_at_boundary(&[0.3], 3, 2).unwrap();
        assert_abs_diff_eq!(
            ps.eval(&[0.07], 0.5).unwrap(),
            p.eval(&[0.37], 0.5).unwrap().u,
            epsilon = 1e-14
        );
    }

    #[test]
    fn trace_expr_agrees_with_eval() {
        let s = sphere(3, 0.3, Branch::Lower);
        let phi = s.trace_expr();
        for x in [[0.2, 0.0], [-0.1, 0.3], [0.05, -0.15]] {
            let via_expr = crate::expr::eval_real(&phi, &x, 0.0).unwrap();
            let direct = s.eval(&x, 0.0).unwrap().u;
            assert_abs_diff_eq!(via_expr, direct, epsilon = 1e-14);
        }
    }

    #[test]
    fn trace_margin_is_enforced() {
        let s = sphere(2, 0.3, Branch::Upper);
        // Trace disc radius is sqrt(1 - 0.09) ~ 0.954; 90% of it ~ 0.858.
        assert!(s.taylor_at_boundary(&[0.1 + 0.85], 4, 4).is_ok());
        let err = s.taylor_at_boundary(&[0.1 + 0.87], 4, 4).unwrap_err();
        assert!(matches!(err, CmcError::Domain(_)));
    }

    #[test]
    fn domain_and_margin_queries() {
        let s = sphere(2, 0.3, Branch::Upper);
        assert!(s.contains(&[0.1], 0.3));
        assert!(s.is_well_inside(&[0.1], 0.3));
        assert!(!s.contains(&[0.1], 1.4));
        // Inside but within 10% of the rim.
        assert!(s.contains(&[0.1 + 0.95], 0.3));
        assert!(!s.is_well_inside(&[0.1 + 0.95], 0.3));
        // Center below the boundary, or a sphere that fails to reach it, is
        // rejected.
        for (center_t, radius) in [(-2.0, 1.0), (0.5, 0.4)] {
            let bad = ExactSolution::Sphere {
                center_x: vec![0.0],
                center_y: 0.0,
                center_t,
                radius,
                branch: Branch::Upper,
            };
            assert!(bad.calibrate().is_err(), "accepted center_t {center_t}, radius {radius}");
        }
    }

    #[test]
    fn serde_round_trip() {
        let s = sphere(3, 0.25, Branch::Lower);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"kind\":\"sphere\""));
        let back: ExactSolution = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
    }
}
