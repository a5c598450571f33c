//! The mean-curvature graph operator over the upper half-space, in three
//! views sharing one set of formulas:
//!
//! - **series view** ([`tq_series`]): acts on [`LogSeries`] with jet
//!   coefficients; the basis of the expansion engine,
//! - **point view** ([`tq_point`], [`tq_point_derivs`]): acts on raw
//!   derivative values; the basis of grid residuals and Newton Jacobians,
//! - **grid view** ([`tq_grid`], [`normal_ode_residual`]): finite-difference
//!   samplings of the point view over a [`GridField`].
//!
//! Everything works with the *totalized* operator `t * Q(u)`: the quasilinear
//! second-order part multiplied by `t` plus the first-order terms
//! `-n (u_t - H sqrt(1 + |Du|^2))`, so no negative powers of `t` ever appear
//! and the `t -> 0` boundary behavior is visible directly in the series
//! coefficients.

use crate::coeff::Coeff;
use crate::error::{CmcError, Result};
use crate::expr::{eval_in, eval_jet, eval_real, Expr, Var};
use crate::grid::{d1, d2, d_mixed, GridField};
use crate::jet::Jet;
use crate::series::LogSeries;

/// Problem statement: dimension, boundary trace, mean-curvature field, and
/// the tangential base point the expansion is computed around.
#[derive(Debug, Clone)]
pub struct ProblemData {
    n: usize,
    phi: Expr,
    h: Expr,
    base_point: Vec<f64>,
}

impl ProblemData {
    /// Validated constructor. Requires `n >= 2`, a base point with `n - 1`
    /// coordinates, a `t`-independent boundary trace, and `|H| < 1` at the
    /// base point.
    pub fn new(n: usize, phi: Expr, h: Expr, base_point: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(CmcError::Domain(format!(
                "the half-space dimension n must be at least 2, got {n}"
            )));
        }
        if base_point.len() != n - 1 {
            return Err(CmcError::Shape(format!(
                "base point has {} coordinates, expected n - 1 = {}",
                base_point.len(),
                n - 1
            )));
        }
        if depends_on_t(&phi) {
            return Err(CmcError::Domain(
                "the boundary trace must not depend on t".to_string(),
            ));
        }
        // Evaluate both fields once to surface range errors early.
        eval_real(&phi, &base_point, 0.0)?;
        let h0 = eval_real(&h, &base_point, 0.0)?;
        if h0.abs() >= 1.0 {
            return Err(CmcError::Domain(format!(
                "|H| must be < 1 everywhere; H = {h0} at the base point"
            )));
        }
        Ok(ProblemData { n, phi, h, base_point })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of tangential variables, `n - 1`.
    pub fn dim(&self) -> usize {
        self.n - 1
    }

    pub fn phi(&self) -> &Expr {
        &self.phi
    }

    pub fn h(&self) -> &Expr {
        &self.h
    }

    pub fn base_point(&self) -> &[f64] {
        &self.base_point
    }

    /// Tangential jet of the boundary trace at the base point.
    pub fn phi_jet(&self, order: usize) -> Result<Jet<f64>> {
        eval_jet(&self.phi, order, &self.base_point, 0.0)
    }

    /// The mean-curvature field as a series around `(base_point, t = 0)`,
    /// at the requested budgets. Fails unless `|H| < 1` at the base point.
    pub fn h_series(
        &self,
        jet_order: usize,
        t_order: usize,
        log_cap: usize,
    ) -> Result<LogSeries<f64>> {
        let dim = self.dim();
        let base = &self.base_point;
        let series = eval_in(&self.h, &|v| match v {
            Var::T => LogSeries::monomial(t_order, log_cap, 1, 0, Jet::constant(dim, jet_order, 1.0)),
            Var::X(k) => {
                let idx = (k - 1) as usize;
                if idx >= dim {
                    return Err(CmcError::Domain(format!(
                        "variable x{k} out of range for n = {}",
                        self.n
                    )));
                }
                LogSeries::monomial(
                    t_order,
                    log_cap,
                    0,
                    0,
                    Jet::variable(dim, jet_order, idx, base[idx]),
                )
            }
        })?;
        let h0 = *series.coeff(0, 0).constant_term();
        if h0.abs() >= 1.0 {
            return Err(CmcError::Domain(format!(
                "|H| must be < 1 everywhere; H = {h0} at the base point"
            )));
        }
        Ok(series)
    }

    /// Pointwise mean-curvature value with the standing `|H| < 1` check.
    pub fn h_at(&self, x: &[f64], t: f64) -> Result<f64> {
        let v = eval_real(&self.h, x, t)?;
        if v.abs() >= 1.0 {
            return Err(CmcError::Domain(format!(
                "|H| must be < 1 everywhere; H = {v} at x = {x:?}, t = {t}"
            )));
        }
        Ok(v)
    }
}

fn depends_on_t(e: &Expr) -> bool {
    match e {
        Expr::Num(_) => false,
        Expr::Var(Var::T) => true,
        Expr::Var(_) => false,
        Expr::Neg(inner) => depends_on_t(inner),
        Expr::Bin(_, a, b) => depends_on_t(a) || depends_on_t(b),
        Expr::Pow(base, _) => depends_on_t(base),
        Expr::Func(_, arg) => depends_on_t(arg),
    }
}

// ---------------------------------------------------------------------------
// Series view
// ---------------------------------------------------------------------------

/// Apply `t * Q` to a series ansatz `u`, with the mean-curvature field `h`
/// supplied as a series at the *same* `(dim, jet_order, t_order)` budgets.
///
/// Budget accounting: two tangential derivatives and one `t`-integration are
/// consumed, so the result lives at `(jet_order - 2, t_order - 1)`. Requires
/// `jet_order >= 2` and `t_order >= 2`.
pub fn tq_series<C: Coeff>(
    u: &LogSeries<C>,
    h: &LogSeries<C>,
    n: usize,
) -> Result<LogSeries<C>> {
    let dim = u.dim();
    if dim != n - 1 {
        return Err(CmcError::Shape(format!(
            "ansatz has {dim} tangential variables but n = {n} needs {}",
            n - 1
        )));
    }
    if h.dim() != dim || h.jet_order() != u.jet_order() || h.t_order() != u.t_order() {
        return Err(CmcError::Shape(
            "mean-curvature series must be supplied at the ansatz budgets".to_string(),
        ));
    }
    let mu = u.jet_order();
    let ku = u.t_order();
    if mu < 2 || ku < 2 {
        return Err(CmcError::Shape(format!(
            "t*Q needs jet budget >= 2 and t budget >= 2, got ({mu}, {ku})"
        )));
    }

    // First derivatives.
    let du: Vec<LogSeries<C>> = (0..dim).map(|a| u.diff_x(a)).collect(); // (mu-1, ku)
    let ut = u.dt()?; // (mu, ku-1)

    // Second derivatives.
    let mut dxx: Vec<Vec<Option<LogSeries<C>>>> = vec![vec![None; dim]; dim]; // (mu-2, ku)
    for a in 0..dim {
        for b in a..dim {
            let second = du[a].diff_x(b);
            if a != b {
                dxx[b][a] = Some(second.clone());
            }
            dxx[a][b] = Some(second);
        }
    }
    let dxt: Vec<LogSeries<C>> = du
        .iter()
        .map(|d| d.dt())
        .collect::<Result<_>>()?; // (mu-1, ku-1)
    let utt = ut.dt()?; // (mu, ku-2)

    // Gradient-square S = 1 + |Du|^2 at budgets (mu-1, ku-1).
    let one = LogSeries::monomial(ku - 1, u.log_cap(), 0, 0, Jet::constant(dim, mu - 1, C::one()))?;
    let mut s = one;
    for d in &du {
        let d_cut = d.truncate_t(ku - 1);
        s = s.add(&d_cut.mul(&d_cut)?)?;
    }
    let ut_sq = ut.mul(&ut)?; // (mu, ku-1)
    s = s.add(&ut_sq.truncate_jets(mu - 1))?;

    let w = s.sqrt()?; // sqrt(S), (mu-1, ku-1)
    let r = s.recip()?; // 1/S, (mu-1, ku-1)

    // t * Laplacian, assembled at (mu-2, ku-2) then shifted up by t.
    let mut lap = utt.truncate_jets(mu - 2); // (mu-2, ku-2)
    for a in 0..dim {
        let uxx = dxx[a][a].as_ref().expect("filled above");
        lap = lap.add(&uxx.truncate_t(ku - 2))?;
    }
    let t_lap = lap.mul_t(); // (mu-2, ku-1)

    // Second-order correction numerator
    // B = sum_{i,j} u_i u_j u_ij over all of (tangential, t) indices,
    // assembled at (mu-2, ku-2).
    let mut big_b = LogSeries::zero(dim, mu - 2, ku - 2, u.log_cap());
    // tangential-tangential pairs
    for a in 0..dim {
        for b in 0..dim {
            let pair = du[a]
                .truncate_t(ku - 2)
                .mul(&du[b].truncate_t(ku - 2))?
                .truncate_jets(mu - 2);
            let uxx = dxx[a][b].as_ref().expect("filled above");
            big_b = big_b.add(&pair.mul(&uxx.truncate_t(ku - 2).truncate_jets(mu - 2))?)?;
        }
    }
    // tangential-t cross pairs (twice, by symmetry)
    let ut_low = ut.truncate_jets(mu - 1).truncate_t(ku - 2); // (mu-1, ku-2)
    for a in 0..dim {
        let pair = du[a].truncate_t(ku - 2).mul(&ut_low)?.truncate_jets(mu - 2);
        let cross = pair.mul(&dxt[a].truncate_t(ku - 2).truncate_jets(mu - 2))?;
        big_b = big_b.add(&cross.scale(&C::from_i64(2)))?;
    }
    // t-t pair
    let tt = ut_sq
        .truncate_jets(mu - 2)
        .truncate_t(ku - 2)
        .mul(&utt.truncate_jets(mu - 2))?;
    big_b = big_b.add(&tt)?;
    let t_b_over_s = big_b
        .mul(&r.truncate_jets(mu - 2).truncate_t(ku - 2))?
        .mul_t(); // (mu-2, ku-1)

    // First-order terms: -n (u_t - H sqrt(S)) at (mu-2, ku-1).
    let hw = h
        .truncate_jets(mu - 1)
        .truncate_t(ku - 1)
        .mul(&w)?
        .truncate_jets(mu - 2); // (mu-2, ku-1)
    let low = ut.truncate_jets(mu - 2).sub(&hw)?.scale(&C::from_i64(n as i64));

    t_lap.sub(&t_b_over_s)?.sub(&low)
}

/// Convenience wrapper: build the mean-curvature series from the problem
/// data at the ansatz budgets and apply [`tq_series`].
pub fn tq_series_from_data(data: &ProblemData, u: &LogSeries<f64>) -> Result<LogSeries<f64>> {
    let h = data.h_series(u.jet_order(), u.t_order(), u.log_cap())?;
    tq_series(u, &h, data.n())
}

// ---------------------------------------------------------------------------
// Point view
// ---------------------------------------------------------------------------

/// Gradient-square `S = 1 + |Du|^2` and the coefficient matrix
/// `A_ij = delta_ij - p_i p_j / S` of the quasilinear part, from raw
/// first-derivative values (`grad` has the `n - 1` tangential entries first,
/// the `t`-derivative last).
pub fn graph_coefficients(grad: &[f64]) -> (f64, Vec<f64>) {
    let n = grad.len();
    let s = 1.0 + grad.iter().map(|g| g * g).sum::<f64>();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = ((i == j) as i32 as f64) - grad[i] * grad[j] / s;
        }
    }
    (s, a)
}

/// Evaluate `t * Q` from raw derivative values at one point. `hess` is the
/// full `n x n` second-derivative matrix, row-major, same index order as
/// `grad`.
pub fn tq_point(n: usize, t: f64, h_val: f64, grad: &[f64], hess: &[f64]) -> f64 {
    debug_assert_eq!(grad.len(), n);
    debug_assert_eq!(hess.len(), n * n);
    let (s, a) = graph_coefficients(grad);
    let principal: f64 = a.iter().zip(hess).map(|(ai, mi)| ai * mi).sum();
    t * principal - n as f64 * (grad[n - 1] - h_val * f64::sqrt(s))
}

/// Value and first derivatives of [`tq_point`] with respect to every `grad`
/// and `hess` entry (the ingredients of the Newton Jacobian).
pub struct TqDerivs {
    pub value: f64,
    /// d(tQ)/d(grad[k])
    pub d_grad: Vec<f64>,
    /// d(tQ)/d(hess[i*n+j])
    pub d_hess: Vec<f64>,
}

pub fn tq_point_derivs(n: usize, t: f64, h_val: f64, grad: &[f64], hess: &[f64]) -> TqDerivs {
    let (s, a) = graph_coefficients(grad);
    let principal: f64 = a.iter().zip(hess).map(|(ai, mi)| ai * mi).sum();
    let sqrt_s = f64::sqrt(s);
    let value = t * principal - n as f64 * (grad[n - 1] - h_val * sqrt_s);

    let d_hess: Vec<f64> = a.iter().map(|ai| t * ai).collect();

    let mut d_grad = vec![0.0; n];
    for k in 0..n {
        let mut dp = 0.0;
        for i in 0..n {
            for j in 0..n {
                // dA_ij/dp_k = -(delta_ik p_j + delta_jk p_i)/S + 2 p_i p_j p_k / S^2
                let mut da = 2.0 * grad[i] * grad[j] * grad[k] / (s * s);
                if i == k {
                    da -= grad[j] / s;
                }
                if j == k {
                    da -= grad[i] / s;
                }
                dp += da * hess[i * n + j];
            }
        }
        let mut g = t * dp + n as f64 * h_val * grad[k] / sqrt_s;
        if k == n - 1 {
            g -= n as f64;
        }
        d_grad[k] = g;
    }
    TqDerivs { value, d_grad, d_hess }
}

// ---------------------------------------------------------------------------
// Grid view
// ---------------------------------------------------------------------------

fn node_derivatives(
    u: &GridField,
    idx: &[usize],
    grad: &mut [f64],
    hess: &mut [f64],
) -> Result<()> {
    let n = u.n();
    for a in 0..n {
        grad[a] = d1(u, idx, a);
    }
    for a in 0..n {
        hess[a * n + a] = d2(u, idx, a)?;
        for b in (a + 1)..n {
            let m = d_mixed(u, idx, a, b);
            hess[a * n + b] = m;
            hess[b * n + a] = m;
        }
    }
    Ok(())
}

/// Sample `t * Q(u)` on every node of a grid via second-order finite
/// differences (one-sided on the boundary ring). Diagnostic view: the
/// solver's Newton residual uses its own interior-only assembly.
pub fn tq_grid(u: &GridField, data: &ProblemData) -> Result<GridField> {
    check_grid(u, data)?;
    let n = u.n();
    let mut out = GridField::zeros(u.axes().to_vec())?;
    let mut coords = vec![0.0f64; n];
    let mut grad = vec![0.0f64; n];
    let mut hess = vec![0.0f64; n * n];
    let mut idx = vec![0usize; n];
    for flat in 0..u.len() {
        u.unflat(flat, &mut idx);
        u.coords(&idx, &mut coords);
        node_derivatives(u, &idx, &mut grad, &mut hess)?;
        let h_val = data.h_at(&coords[..n - 1], coords[n - 1])?;
        out.values_mut()[flat] = tq_point(n, coords[n - 1], h_val, &grad, &hess);
    }
    Ok(out)
}

fn check_grid(u: &GridField, data: &ProblemData) -> Result<()> {
    if u.n() != data.n() {
        return Err(CmcError::Shape(format!(
            "grid has {} axes but n = {}",
            u.n(),
            data.n()
        )));
    }
    if u.delta() <= 0.0 {
        return Err(CmcError::Domain(format!(
            "the grid must stay in t > 0; bottom edge is {}",
            u.delta()
        )));
    }
    Ok(())
}

/// Defect of the second-order ODE in `t` that the vertical deviation
/// `v = u - c1 t` satisfies along each tangential column:
/// `v_tt - (n/t) v_t - F(x, t, u, Du, D^2u)`, with `F` assembled by direct
/// algebraic rearrangement of `t * Q(u) = 0`.
///
/// `c1` holds one value per tangential column, indexed like
/// [`GridField::tangential_flat`] (computed from the expansion engine).
///
/// By construction the defect equals `t*Q(u) / (t * A_nn)` pointwise, which
/// makes the rearrangement independently checkable.
pub fn normal_ode_residual(
    u: &GridField,
    data: &ProblemData,
    c1: &[f64],
) -> Result<GridField> {
    check_grid(u, data)?;
    if c1.len() != u.tangential_len() {
        return Err(CmcError::Shape(format!(
            "c1 has {} entries but the grid has {} tangential columns",
            c1.len(),
            u.tangential_len()
        )));
    }
    let n = u.n();
    let nf = n as f64;
    let mut out = GridField::zeros(u.axes().to_vec())?;
    let mut coords = vec![0.0f64; n];
    let mut grad = vec![0.0f64; n];
    let mut hess = vec![0.0f64; n * n];
    let mut idx = vec![0usize; n];
    for flat in 0..u.len() {
        u.unflat(flat, &mut idx);
        u.coords(&idx, &mut coords);
        node_derivatives(u, &idx, &mut grad, &mut hess)?;
        let t = coords[n - 1];
        let h_val = data.h_at(&coords[..n - 1], t)?;
        let (s, a) = graph_coefficients(&grad);
        let a_nn = a[(n - 1) * n + (n - 1)];
        // Everything of the principal part except A_nn u_tt.
        let mut rest = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == n - 1 && j == n - 1 {
                    continue;
                }
                rest += a[i * n + j] * hess[i * n + j];
            }
        }
        let c1_col = c1[u.tangential_flat(&idx)];
        let v_t = grad[n - 1] - c1_col;
        let v_tt = hess[(n - 1) * n + (n - 1)];
        let forcing =
            ((nf / t) * (v_t + c1_col - h_val * f64::sqrt(s)) - rest) / a_nn - (nf / t) * v_t;
        out.values_mut()[flat] = v_tt - (nf / t) * v_t - forcing;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;
    use approx::assert_abs_diff_eq;

    /// Minimal independent t-series arithmetic on fixed-length arrays,
    /// used as an oracle for the series assembly (plain convolutions, no
    /// shared code with LogSeries).
    mod tiny {
        pub fn mul<const L: usize>(a: &[f64; L], b: &[f64; L]) -> [f64; L] {
            let mut out = [0.0; L];
            for i in 0..L {
                for j in 0..(L - i) {
                    out[i + j] += a[i] * b[j];
                }
            }
            out
        }
        pub fn add<const L: usize>(a: &[f64; L], b: &[f64; L]) -> [f64; L] {
            let mut out = [0.0; L];
            for i in 0..L {
                out[i] = a[i] + b[i];
            }
            out
        }
        pub fn scale<const L: usize>(a: &[f64; L], k: f64) -> [f64; L] {
            let mut out = *a;
            for v in &mut out {
                *v *= k;
            }
            out
        }
        pub fn recip<const L: usize>(a: &[f64; L]) -> [f64; L] {
            let mut out = [0.0; L];
            out[0] = 1.0 / a[0];
            for k in 1..L {
                let mut acc = 0.0;
                for j in 1..=k {
                    acc += a[j] * out[k - j];
                }
                out[k] = -acc / a[0];
            }
            out
        }
        pub fn sqrt<const L: usize>(a: &[f64; L]) -> [f64; L] {
            let mut out = [0.0; L];
            out[0] = a[0].sqrt();
            for k in 1..L {
                let mut acc = 0.0;
                for j in 1..k {
                    acc += out[j] * out[k - j];
                }
                out[k] = (a[k] - acc) / (2.0 * out[0]);
            }
            out
        }
    }

    fn constant_series(dim: usize, mu: usize, ku: usize, v: f64) -> LogSeries<f64> {
        LogSeries::monomial(ku, 0, 0, 0, Jet::constant(dim, mu, v)).unwrap()
    }

    #[test]
    fn tilted_plane_annihilates_tq() {
        // u = a + p . x' + c t with H = c / sqrt(1 + |p|^2 + c^2) satisfies
        // t*Q(u) = 0 identically; the series view must see that exactly.
        for n in [2usize, 3] {
            let dim = n - 1;
            let (mu, ku) = (6usize, 5usize);
            let a = 0.7;
            let p: Vec<f64> = (0..dim).map(|k| 0.3 - 0.5 * k as f64).collect();
            let c = 0.4;
            let h_val = c / f64::sqrt(1.0 + p.iter().map(|q| q * q).sum::<f64>() + c * c);

            let base: Vec<f64> = (0..dim).map(|k| 0.1 * (k as f64 + 1.0)).collect();
            let mut c0 = Jet::constant(dim, mu, a);
            for (k, &pk) in p.iter().enumerate() {
                c0 = c0
                    .add(&Jet::variable(dim, mu, k, base[k]).scale(&pk))
                    .unwrap();
            }
            let mut u = LogSeries::zero(dim, mu, ku, 1);
            u.insert(0, 0, c0).unwrap();
            u.insert(1, 0, Jet::constant(dim, mu, c)).unwrap();

            let h = constant_series(dim, mu, ku, h_val).with_log_cap(1);
            let res = tq_series(&u, &h, n).unwrap();
            assert!(
                res.sup_norm() < 1e-12,
                "n = {n}: residual norm {}",
                res.sup_norm()
            );
            assert_eq!(res.jet_order(), mu - 2);
            assert_eq!(res.t_order(), ku - 1);
        }
    }

    #[test]
    fn pure_t_profile_matches_independent_series_oracle() {
        // u = c0 + c1 t + c2 t^2 + c3 t^3 with no tangential dependence and
        // constant H: compare every coefficient of t*Q against a hand-rolled
        // scalar Taylor computation.
        const L: usize = 3; // t-slots 0..2 of the result
        let n = 2usize;
        let (c0, c1, c2, c3) = (0.8, 0.45, -0.3, 0.12);
        let h_val = 0.35;

        let mut u = LogSeries::zero(1, 4, L, 0);
        u.insert(0, 0, Jet::constant(1, 4, c0)).unwrap();
        u.insert(1, 0, Jet::constant(1, 4, c1)).unwrap();
        u.insert(2, 0, Jet::constant(1, 4, c2)).unwrap();
        u.insert(3, 0, Jet::constant(1, 4, c3)).unwrap();
        let h = constant_series(1, 4, L, h_val);
        let res = tq_series(&u, &h, n).unwrap();

        // Oracle with plain arrays: u_t, u_tt, S = 1 + u_t^2,
        // tQ = t u_tt - t u_t^2 u_tt / S - n (u_t - H sqrt(S)).
        let ut: [f64; L] = [c1, 2.0 * c2, 3.0 * c3];
        let utt: [f64; L] = [2.0 * c2, 6.0 * c3, 0.0];
        let ut2 = tiny::mul(&ut, &ut);
        let mut s = ut2;
        s[0] += 1.0;
        let term2 = tiny::mul(&tiny::mul(&ut2, &utt), &tiny::recip(&s));
        let sqrt_s = tiny::sqrt(&s);
        // t * (...) shifts slots up by one.
        let shift = |a: &[f64; L]| {
            let mut out = [0.0; L];
            for i in 0..L - 1 {
                out[i + 1] = a[i];
            }
            out
        };
        let low = tiny::scale(&tiny::add(&ut, &tiny::scale(&sqrt_s, -h_val)), -(n as f64));
        let expect = tiny::add(&tiny::add(&shift(&utt), &tiny::scale(&shift(&term2), -1.0)), &low);

        for (i, want) in expect.iter().enumerate() {
            let got = *res.coeff(i, 0).constant_term();
            assert_abs_diff_eq!(got, *want, epsilon = 1e-12);
        }
    }

    #[test]
    fn plane_grid_has_zero_residual() {
        // FD stencils are exact on affine functions, so the grid view of a
        // tilted plane vanishes to machine precision.
        let n = 2;
        let (a, p, c) = (0.6, 0.25, 0.4);
        let h_val = c / f64::sqrt(1.0 + p * p + c * c);
        let data = ProblemData::new(
            n,
            parse_expr("0.6 + 0.25*x1").unwrap(),
            Expr::num(h_val),
            vec![0.0],
        )
        .unwrap();
        let axes = vec![
            crate::grid::Axis::new(-0.5, 0.5, 11).unwrap(),
            crate::grid::Axis::new(0.05, 0.8, 13).unwrap(),
        ];
        let u = GridField::from_fn(axes, |co| Ok(a + p * co[0] + c * co[1])).unwrap();
        let res = tq_grid(&u, &data).unwrap();
        assert!(res.sup_norm() < 1e-12, "plane residual {}", res.sup_norm());
    }

    #[test]
    fn point_derivatives_match_finite_differences() {
        let n = 3;
        let t = 0.37;
        let h_val = 0.42;
        let grad = [0.3, -0.7, 0.5];
        let hess = [0.9, 0.2, -0.4, 0.2, -1.1, 0.6, -0.4, 0.6, 0.8];
        let derivs = tq_point_derivs(n, t, h_val, &grad, &hess);
        assert_abs_diff_eq!(derivs.value, tq_point(n, t, h_val, &grad, &hess), epsilon = 1e-15);
        let eps = 1e-6;
        for k in 0..n {
            let mut gp = grad;
            gp[k] += eps;
            let mut gm = grad;
            gm[k] -= eps;
            let fd = (tq_point(n, t, h_val, &gp, &hess) - tq_point(n, t, h_val, &gm, &hess))
                / (2.0 * eps);
            assert_abs_diff_eq!(derivs.d_grad[k], fd, epsilon = 1e-7);
        }
        for e in 0..n * n {
            let mut hp = hess;
            hp[e] += eps;
            let mut hm = hess;
            hm[e] -= eps;
            let fd = (tq_point(n, t, h_val, &grad, &hp) - tq_point(n, t, h_val, &grad, &hm))
                / (2.0 * eps);
            assert_abs_diff_eq!(derivs.d_hess[e], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn normal_ode_defect_equals_scaled_residual() {
        // The rearranged second-order ODE defect must equal
        // t*Q / (t * A_nn) node for node, for any c1 column values.
        let data = ProblemData::new(
            2,
            parse_expr("0.2*sin(x1)").unwrap(),
            parse_expr("0.3 + 0.05*x1").unwrap(),
            vec![0.0],
        )
        .unwrap();
        let axes = vec![
            crate::grid::Axis::new(-0.4, 0.4, 9).unwrap(),
            crate::grid::Axis::new(0.1, 0.7, 11).unwrap(),
        ];
        let u = GridField::from_fn(axes, |co| {
            Ok(0.2 * co[0].sin() + 0.4 * co[1] - 0.1 * co[1] * co[1] + 0.05 * co[0] * co[1])
        })
        .unwrap();
        let c1: Vec<f64> = (0..u.tangential_len()).map(|i| 0.4 + 0.01 * i as f64).collect();
        let defect = normal_ode_residual(&u, &data, &c1).unwrap();
        let tq = tq_grid(&u, &data).unwrap();

        let n = 2;
        let mut idx = vec![0usize; n];
        let mut coords = vec![0.0f64; n];
        let mut grad = vec![0.0f64; n];
        let mut hess = vec![0.0f64; n * n];
        for flat in 0..u.len() {
            u.unflat(flat, &mut idx);
            u.coords(&idx, &mut coords);
            node_derivatives(&u, &idx, &mut grad, &mut hess).unwrap();
            let (_, a) = graph_coefficients(&grad);
            let a_nn = a[(n - 1) * n + (n - 1)];
            let t = coords[n - 1];
            let want = tq.values()[flat] / (t * a_nn);
            assert_abs_diff_eq!(defect.values()[flat], want, epsilon = 1e-10);
        }
    }

    #[test]
    fn problem_data_validation() {
        // phi depending on t is rejected.
        assert!(ProblemData::new(
            2,
            parse_expr("x1 + t").unwrap(),
            Expr::num(0.3),
            vec![0.0]
        )
        .is_err());
        // |H| >= 1 at the base point is rejected.
        assert!(ProblemData::new(2, Expr::num(0.0), Expr::num(1.0), vec![0.0]).is_err());
        // n = 1 has no tangential directions.
        assert!(ProblemData::new(1, Expr::num(0.0), Expr::num(0.3), vec![]).is_err());
        // Base point length must be n - 1.
        assert!(ProblemData::new(3, Expr::num(0.0), Expr::num(0.3), vec![0.0]).is_err());
        // h_at enforces |H| < 1 pointwise.
        let data = ProblemData::new(
            2,
            Expr::num(0.0),
            parse_expr("0.5 + x1^2").unwrap(),
            vec![0.0],
        )
        .unwrap();
        assert!(data.h_at(&[0.1], 0.0).is_ok());
        assert!(data.h_at(&[0.8], 0.0).is_err());
    }

    #[test]
    fn budget_bookkeeping_is_enforced() {
        let u = constant_series(1, 1, 5, 1.0);
        let h = constant_series(1, 1, 5, 0.3);
        assert!(matches!(tq_series(&u, &h, 2), Err(CmcError::Shape(_))));
        let u = constant_series(1, 4, 1, 1.0);
        let h = constant_series(1, 4, 1, 0.3);
        assert!(matches!(tq_series(&u, &h, 2), Err(CmcError::Shape(_))));
        // Budget mismatch between u and h.
        let u = constant_series(1, 4, 5, 1.0);
        let h = constant_series(1, 4, 4, 0.3);
        assert!(matches!(tq_series(&u, &h, 2), Err(CmcError::Shape(_))));
    }
}
