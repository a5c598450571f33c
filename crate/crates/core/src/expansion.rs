//! Order-by-order construction of the boundary expansion of a solution.
//!
//! For a graph `u` with boundary trace `phi` and mean-curvature field `H`
//! (with `|H| < 1`), the expansion near `t = 0` has the form
//!
//! ```text
//! u ~ phi + c_1 t + c_2 t^2 + ... + c_n t^n
//!       + sum_{i >= n+1} sum_{j <= (i-1)/n} c_{i,j} t^i (log t)^j
//! ```
//!
//! with jet-valued coefficients. The engine discovers each coefficient by
//! *probing*: for every unknown slot it applies the full nonlinear operator
//! [`tq_series`] to the ansatz with the unknown set to `0`, `1`, and `2`
//! times a unit jet, checks that the response of the matched residual slot is
//! affine (it provably is, and the probe asserts it), and solves the
//! resulting jet-linear equation. No hand-derived recursion formulas enter
//! the solver itself — closed forms are used only as independent
//! cross-checks in tests.
//!
//! At order `i = n + 1` the diagonal pivot vanishes (resonance): `t^{n+1}` is
//! annihilated by the linearized operator, so its coefficient is genuinely
//! global data that local boundary information cannot determine. The engine
//! instead solves for the `t^{n+1} log t` coefficient through its coupling
//! onto the `t^n` residual slot, records the resonant (vanishing) pivot, and
//! leaves the `t^{n+1}` coefficient at zero unless the caller supplies one.
//!
//! Every step runs generically over the coefficient field: `f64` for
//! production, exact rationals for certifying identities (the probe checks
//! then demand exact zeros instead of tolerances).

use crate::coeff::Coeff;
use crate::error::{CmcError, Result};
use crate::expr::{eval_in, Expr, Var};
use crate::jet::Jet;
use crate::operator::{tq_series, ProblemData};
use crate::series::LogSeries;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;

/// Float tolerances used by the engine's internal consistency checks,
/// relative to the working coefficient scale.
const AFFINE_TOL: f64 = 1e-10;
const PIVOT_TOL: f64 = 1e-10;
const ANNIHILATION_TOL: f64 = 1e-9;
const C1_TOL: f64 = 1e-14;
const C1_MAX_ITERS: usize = 20_000;

/// Provenance of a stored coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoeffSource {
    /// Determined by the local recursion.
    Solved,
    /// The resonant `t^{n+1}` slot, defaulted to zero (local data cannot
    /// determine it).
    DefaultZero,
    /// Supplied by the caller.
    Supplied,
    /// Estimated from a numerical solution by least squares.
    Fitted,
}

/// Default log-power budget for a table of order `k`: provably sufficient
/// for every product the operator forms, with one slot of headroom.
pub fn default_log_cap(n: usize, k: usize) -> usize {
    k.div_ceil(n) + 1
}

/// The computed expansion: coefficient jets indexed by `(i, j)` for
/// `t^i (log t)^j`, plus per-slot provenance and pivot diagnostics.
///
/// Jet orders decrease with the level: a coefficient solved at level `i`
/// is trustworthy to jet order `m - i`, where `m` is the input budget
/// (each level consumes one tangential order through the first-derivative
/// couplings, and the `t^0` trace is the full input).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionTable<C: Coeff = f64> {
    n: usize,
    k: usize,
    jet_budget: usize,
    base_point: Vec<f64>,
    coeffs: BTreeMap<(usize, usize), Jet<C>>,
    sources: BTreeMap<(usize, usize), CoeffSource>,
    /// Constant term of the probed linear response for each solved slot
    /// (stored as a float view even in exact mode; diagnostics only).
    pivots: BTreeMap<(usize, usize), f64>,
    /// Lowest surviving `(i, j)` slot of `t*Q` applied to the assembled
    /// series, verified at solve time; `None` when everything through
    /// `t^{k+1}` is annihilated (exactly polynomial solutions), and also
    /// `None` after edits that invalidate the check (truncation, slot
    /// replacement).
    residual_order: Option<(usize, usize)>,
}

impl<C: Coeff> ExpansionTable<C> {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Highest populated power of `t`.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Jet order of the boundary-trace input.
    pub fn jet_budget(&self) -> usize {
        self.jet_budget
    }

    pub fn base_point(&self) -> &[f64] {
        &self.base_point
    }

    /// Coefficient jet of `t^i (log t)^j`, if stored.
    pub fn coeff(&self, i: usize, j: usize) -> Option<&Jet<C>> {
        self.coeffs.get(&(i, j))
    }

    pub fn source(&self, i: usize, j: usize) -> Option<CoeffSource> {
        self.sources.get(&(i, j)).copied()
    }

    pub fn pivot(&self, i: usize, j: usize) -> Option<f64> {
        self.pivots.get(&(i, j)).copied()
    }

    /// Verified lowest surviving residual slot (see the field docs).
    pub fn residual_order(&self) -> Option<(usize, usize)> {
        self.residual_order
    }

    /// Iterate stored coefficients in `(i, j)` order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, &Jet<C>)> {
        self.coeffs.iter().map(|(&(i, j), jet)| (i, j, jet))
    }

    /// Log-power budget matching this table's order.
    pub fn log_cap(&self) -> usize {
        default_log_cap(self.n, self.k)
    }

    /// Smallest jet order among stored coefficients (the shared budget a
    /// series assembled from this table can honestly claim).
    pub fn min_jet_order(&self) -> usize {
        self.coeffs.values().map(Jet::order).min().unwrap_or(0)
    }

    /// Largest coefficient magnitude (used for relative tolerances).
    pub fn scale(&self) -> f64 {
        self.coeffs.values().map(Jet::sup_norm).fold(1.0, f64::max)
    }

    /// Assemble the expansion as a single series at the shared honest jet
    /// order, with `t_order = k`.
    pub fn build_series(&self) -> Result<LogSeries<C>> {
        let mu = self.min_jet_order();
        let dim = self.n - 1;
        let mut s = LogSeries::zero(dim, mu, self.k, self.log_cap());
        for (&(i, j), jet) in &self.coeffs {
            s.insert(i, j, jet.resized(mu))?;
        }
        Ok(s)
    }

    /// Copy with every term above `t^k_max` dropped.
    pub fn truncated(&self, k_max: usize) -> Self {
        let mut out = self.clone();
        out.k = k_max.min(self.k);
        out.coeffs.retain(|&(i, _), _| i <= k_max);
        out.sources.retain(|&(i, _), _| i <= k_max);
        out.residual_order = None;
        out
    }

    /// Copy with one slot's coefficient replaced by zero (used to expose
    /// the basis a global coefficient multiplies).
    pub fn with_slot_zeroed(&self, i: usize, j: usize) -> Self {
        let mut out = self.clone();
        if let Some(jet) = out.coeffs.get_mut(&(i, j)) {
            *jet = Jet::zero(jet.dim(), jet.order());
        }
        out.residual_order = None;
        out
    }

    /// Install the caller's coefficient for the resonant `t^{n+1}` slot.
    /// Only legal before the table has been extended past `n + 1`, because
    /// every higher coefficient depends on it.
    pub fn with_c_global(&self, jet: &Jet<C>, source: CoeffSource) -> Result<Self> {
        if self.k != self.n + 1 {
            return Err(CmcError::Shape(format!(
                "the t^{} coefficient must be set before extending the table (k = {})",
                self.n + 1,
                self.k
            )));
        }
        if jet.dim() != self.n - 1 {
            return Err(CmcError::Shape(format!(
                "global coefficient has dim {}, expected {}",
                jet.dim(),
                self.n - 1
            )));
        }
        let slot = (self.n + 1, 0);
        let order = self
            .coeffs
            .get(&(self.n + 1, 1))
            .map(Jet::order)
            .unwrap_or_else(|| self.min_jet_order());
        let mut out = self.clone();
        out.coeffs.insert(slot, jet.resized(order));
        out.sources.insert(slot, source);
        out.residual_order = None;
        Ok(out)
    }
}

impl ExpansionTable<f64> {
    /// Evaluate the expansion at tangential point `x` (absolute coordinates)
    /// and height `t > 0`, using every stored coefficient at its full order.
    pub fn eval(&self, x: &[f64], t: f64) -> Result<f64> {
        if x.len() != self.n - 1 {
            return Err(CmcError::Shape(format!(
                "point has {} tangential coordinates, expected {}",
                x.len(),
                self.n - 1
            )));
        }
        if t <= 0.0 {
            return Err(CmcError::Domain(format!("evaluation requires t > 0, got {t}")));
        }
        let offset: Vec<f64> = x.iter().zip(&self.base_point).map(|(a, b)| a - b).collect();
        let log_t = t.ln();
        let mut total = 0.0;
        for (&(i, j), jet) in &self.coeffs {
            total += jet.eval(&offset)? * t.powi(i as i32) * log_t.powi(j as i32);
        }
        Ok(total)
    }
}

// ---------------------------------------------------------------------------
// Engine core (generic over the coefficient field)
// ---------------------------------------------------------------------------

/// Provider of the mean-curvature field as a series at requested budgets
/// `(jet_order, t_order, log_cap)`.
type HFn<'a, C> = dyn Fn(usize, usize, usize) -> Result<LogSeries<C>> + 'a;

struct Core<'a, C: Coeff> {
    n: usize,
    dim: usize,
    /// Jet order of the boundary-trace input.
    m: usize,
    log_cap: usize,
    h_fn: &'a HFn<'a, C>,
}

impl<'a, C: Coeff> Core<'a, C> {
    fn tq_of(&self, u: &LogSeries<C>) -> Result<LogSeries<C>> {
        let h = (self.h_fn)(u.jet_order(), u.t_order(), u.log_cap())?;
        tq_series(u, &h, self.n)
    }

    /// Assemble the current table contents (resized to a shared jet order)
    /// plus an optional extra term, as a series ansatz.
    fn ansatz(
        &self,
        coeffs: &BTreeMap<(usize, usize), Jet<C>>,
        mu: usize,
        t_order: usize,
        extra: Option<(usize, usize, &Jet<C>)>,
    ) -> Result<LogSeries<C>> {
        let mut u = LogSeries::zero(self.dim, mu, t_order, self.log_cap);
        for (&(i, j), jet) in coeffs {
            if i <= t_order {
                u.insert(i, j, jet.resized(mu))?;
            }
        }
        if let Some((i, j, jet)) = extra {
            u.insert(i, j, jet.resized(mu))?;
        }
        Ok(u)
    }

    /// Linear response of residual slot `(ei, ej)` to the unknown at
    /// `(iu, ju)`: returns `(K0, K1)` with
    /// `slot(c) = K0 + K1 * c` and *verifies* the affineness by a third
    /// probe (exact equality in an exact field, `1e-10` relative otherwise).
    fn slot_response(
        &self,
        coeffs: &BTreeMap<(usize, usize), Jet<C>>,
        r0: &LogSeries<C>,
        mu: usize,
        t_order: usize,
        unknown: (usize, usize),
        slot: (usize, usize),
    ) -> Result<(Jet<C>, Jet<C>)> {
        let k0 = r0.coeff(slot.0, slot.1);
        let one = Jet::constant(self.dim, mu, C::one());
        let two = Jet::constant(self.dim, mu, C::from_i64(2));
        let r1 = self.tq_of(&self.ansatz(coeffs, mu, t_order, Some((unknown.0, unknown.1, &one)))?)?;
        let r2 = self.tq_of(&self.ansatz(coeffs, mu, t_order, Some((unknown.0, unknown.1, &two)))?)?;
        let k1 = r1.coeff(slot.0, slot.1).sub(&k0)?;
        let k2 = r2.coeff(slot.0, slot.1).sub(&k0)?;
        let curvature = k2.sub(&k1.scale(&C::from_i64(2)))?;
        if C::EXACT {
            if !curvature.is_zero() {
                return Err(CmcError::Internal(format!(
                    "residual slot t^{} (log t)^{} is not affine in the t^{} (log t)^{} \
                     coefficient (exact probe)",
                    slot.0, slot.1, unknown.0, unknown.1
                )));
            }
        } else {
            let scale = 1.0_f64.max(k0.sup_norm()).max(k1.sup_norm());
            if curvature.sup_norm() > AFFINE_TOL * scale {
                return Err(CmcError::Internal(format!(
                    "residual slot t^{} (log t)^{} responds nonlinearly to the t^{} (log t)^{} \
                     coefficient (deviation {:.3e}, scale {:.3e})",
                    slot.0,
                    slot.1,
                    unknown.0,
                    unknown.1,
                    curvature.sup_norm(),
                    scale
                )));
            }
        }
        Ok((k0, k1))
    }

    /// Residual-annihilation check: after level `i` is solved, every slot
    /// `(i-1, j)` of the recomputed residual must vanish.
    fn check_annihilation(
        &self,
        coeffs: &BTreeMap<(usize, usize), Jet<C>>,
        mu: usize,
        i: usize,
        table_scale: f64,
    ) -> Result<()> {
        let r = self.tq_of(&self.ansatz(coeffs, mu, i, None)?)?;
        for j in 0..=self.log_cap {
            let slot = r.coeff(i - 1, j);
            let bad = if C::EXACT {
                !slot.is_zero()
            } else {
                slot.sup_norm() > ANNIHILATION_TOL * table_scale.max(1.0)
            };
            if bad {
                return Err(CmcError::Internal(format!(
                    "residual slot t^{} (log t)^{j} did not vanish after solving level {i} \
                     (norm {:.3e})",
                    i - 1,
                    slot.sup_norm()
                )));
            }
        }
        Ok(())
    }
}

fn table_scale<C: Coeff>(coeffs: &BTreeMap<(usize, usize), Jet<C>>) -> f64 {
    coeffs.values().map(Jet::sup_norm).fold(1.0, f64::max)
}

/// The first-order coefficient by damped fixed-point iteration driven by the
/// full operator: `c <- c + R(c)/n` where `R(c)` is the `t^0` residual slot
/// of the ansatz `phi + c t`. Converges at rate `|H|^2 < 1`. Float-only
/// (exact fields use [`c1_closed_form`], since the iteration never
/// terminates in exact arithmetic).
fn c1_iterate(core: &Core<'_, f64>, phi: &Jet<f64>) -> Result<Jet<f64>> {
    let mu = core.m + 1;
    // Zero-padding phi is harmless here: the padded top order only affects
    // orders of c1 beyond the honest budget m - 1.
    let phi_pad = phi.resized(mu);
    let mut coeffs = BTreeMap::new();
    coeffs.insert((0usize, 0usize), phi_pad);
    let scale = 1.0_f64.max(phi.sup_norm());
    let inv_n = 1.0 / core.n as f64;
    let mut c = Jet::zero(core.dim, mu - 2);
    for _ in 0..C1_MAX_ITERS {
        let u = core.ansatz(&coeffs, mu, 2, Some((1, 0, &c)))?;
        let residual = core.tq_of(&u)?.coeff(0, 0);
        if residual.sup_norm() <= C1_TOL * scale.max(c.sup_norm()) {
            return Ok(c);
        }
        c = c.add(&residual.scale(&inv_n))?;
    }
    Err(CmcError::Domain(
        "first-order coefficient iteration stalled; the mean curvature is too close to 1 \
         in magnitude at the base point"
            .to_string(),
    ))
}

/// Closed-form first-order coefficient
/// `c_1 = H_0 sqrt((1 + |D phi|^2) / (1 - H_0^2))`, used by the exact mode
/// and as an independent cross-check of the fixed-point route.
pub fn c1_closed_form<C: Coeff>(phi: &Jet<C>, h0: &Jet<C>) -> Result<Jet<C>> {
    if phi.order() < 1 {
        return Err(CmcError::Shape("phi must carry at least one jet order".to_string()));
    }
    let target = phi.order() - 1;
    let h = h0.resized(target);
    let mut grad_sq = Jet::constant(phi.dim(), target, C::one());
    for a in 0..phi.dim() {
        let d = phi.diff(a).resized(target);
        grad_sq = grad_sq.add(&d.mul(&d)?)?;
    }
    let one = Jet::constant(phi.dim(), target, C::one());
    let denom = one.sub(&h.mul(&h)?)?;
    h.mul(&grad_sq.mul(&denom.recip()?)?.sqrt()?).map_err(|e| match e {
        CmcError::Singular(msg) => CmcError::Singular(format!(
            "first-order coefficient square root failed: {msg}"
        )),
        other => other,
    })
}

/// Closed form of the second expansion coefficient, used as an independent
/// cross-check of the probe solver (never inside it). `h0` and `h1` are the
/// `t^0` and `t^1` jets of the mean-curvature field. Consumes two tangential
/// orders of `phi`; `h0` must be honest to at least `phi.order() - 1` and
/// `h1` to `phi.order() - 2` (padding them higher fabricates zeros).
pub fn c2_closed_form<C: Coeff>(
    phi: &Jet<C>,
    h0: &Jet<C>,
    h1: &Jet<C>,
    n: usize,
) -> Result<Jet<C>> {
    if n < 2 {
        return Err(CmcError::Shape(format!("the second coefficient needs n >= 2, got {n}")));
    }
    if phi.order() < 2 {
        return Err(CmcError::Shape(
            "phi must carry at least two jet orders".to_string(),
        ));
    }
    let target = phi.order() - 2;
    let dim = phi.dim();
    // The first coefficient is honest one order above the target, so its
    // derivatives land exactly at the target order.
    let c1_full = c1_closed_form(phi, h0)?;
    let c1 = c1_full.resized(target);
    let h0 = h0.resized(target);
    let h1 = h1.resized(target);
    let one = Jet::constant(dim, target, C::one());

    // First and second tangential derivatives of the trace.
    let grads: Vec<Jet<C>> = (0..dim).map(|a| phi.diff(a).resized(target)).collect();
    let mut laplacian = Jet::zero(dim, target);
    let mut grad_sq = Jet::zero(dim, target);
    let mut steepest = Jet::zero(dim, target); // sum phi_a phi_b phi_ab
    let mut grad_dot_dc1 = Jet::zero(dim, target);
    for a in 0..dim {
        laplacian = laplacian.add(&phi.diff(a).diff(a).resized(target))?;
        grad_sq = grad_sq.add(&grads[a].mul(&grads[a])?)?;
        grad_dot_dc1 = grad_dot_dc1.add(&grads[a].mul(&c1_full.diff(a))?)?;
        for b in 0..dim {
            let second = phi.diff(a).diff(b).resized(target);
            steepest = steepest.add(&grads[a].mul(&grads[b])?.mul(&second)?)?;
        }
    }
    let s0 = one.add(&grad_sq)?;
    // The tilted metric normalizer: W = 1 + |D phi|^2 + c1^2. The full
    // speed sqrt(W) (not sqrt(1 + |D phi|^2)) is what multiplies the
    // t-slope of the curvature field, because the graph already leaves the
    // boundary at slope c1.
    let w = s0.add(&c1.mul(&c1)?)?;
    let w_inv = w.recip()?;
    let w_sqrt = w.sqrt()?;

    let nm2 = Jet::constant(dim, target, C::from_i64(n as i64 - 2));
    let nf = Jet::constant(dim, target, C::from_i64(n as i64));
    let bracket = laplacian
        .sub(&steepest.mul(&w_inv)?)?
        .add(&nm2.mul(&h0)?.mul(&grad_dot_dc1)?.mul(&w_sqrt.recip()?)?)?
        .add(&nf.mul(&h1)?.mul(&w_sqrt)?)?;
    let denom = Jet::constant(dim, target, C::from_i64(2 * (n as i64 - 1)))
        .mul(&one.sub(&h0.mul(&h0)?)?)?;
    bracket.mul(&denom.recip()?)
}

/// Shared implementation of the local solve (levels `1 ..= n+1`).
fn solve_local_core<C: Coeff>(
    n: usize,
    phi: &Jet<C>,
    h_fn: &HFn<'_, C>,
    base_point: Vec<f64>,
    c1: Jet<C>,
) -> Result<ExpansionTable<C>> {
    let dim = n - 1;
    let m = phi.order();
    if m < n + 3 {
        return Err(CmcError::Shape(format!(
            "local solve needs jet order >= n + 3 = {}, got {m}",
            n + 3
        )));
    }
    let k = n + 1;
    let core = Core { n, dim, m, log_cap: default_log_cap(n, k), h_fn };

    let mut coeffs: BTreeMap<(usize, usize), Jet<C>> = BTreeMap::new();
    let mut sources = BTreeMap::new();
    let mut pivots = BTreeMap::new();
    coeffs.insert((0, 0), phi.clone());
    sources.insert((0, 0), CoeffSource::Solved);
    coeffs.insert((1, 0), c1);
    sources.insert((1, 0), CoeffSource::Solved);

    for i in 2..=k {
        solve_level(&core, &mut coeffs, &mut sources, &mut pivots, i)?;
    }

    let mut table = ExpansionTable {
        n,
        k,
        jet_budget: m,
        base_point,
        coeffs,
        sources,
        pivots,
        residual_order: None,
    };
    table.residual_order = floor_scan(&table, h_fn)?;
    Ok(table)
}

/// Shared residual-floor computation: apply `t*Q` to the table's series,
/// padded so orders through `t^{k+1}` can be trusted, and find the first
/// slot that survives at the working tolerance.
fn floor_scan<C: Coeff>(
    table: &ExpansionTable<C>,
    h_fn: &HFn<'_, C>,
) -> Result<Option<(usize, usize)>> {
    let series = table.build_series()?.assert_polynomial_through(table.k + 2);
    let h = h_fn(series.jet_order(), series.t_order(), series.log_cap())?;
    let residual = tq_series(&series, &h, table.n)?;
    let scale = table.scale();
    for i in 0..=table.k + 1 {
        for j in 0..=series.log_cap() {
            if residual.coeff(i, j).sup_norm() > ANNIHILATION_TOL * scale {
                return Ok(Some((i, j)));
            }
        }
    }
    Ok(None)
}

/// Solve every unknown of level `i` (all legal log powers), verifying the
/// affine structure, pivot non-degeneracy, and residual annihilation.
fn solve_level<C: Coeff>(
    core: &Core<'_, C>,
    coeffs: &mut BTreeMap<(usize, usize), Jet<C>>,
    sources: &mut BTreeMap<(usize, usize), CoeffSource>,
    pivots: &mut BTreeMap<(usize, usize), f64>,
    i: usize,
) -> Result<()> {
    let n = core.n;
    let mu = (core.m + 2).checked_sub(i).filter(|&mu| mu >= 4).ok_or_else(|| {
        CmcError::Shape(format!(
            "jet budget {} cannot support level {i} (needs m >= {})",
            core.m,
            i + 2
        ))
    })?;
    let scale = table_scale(coeffs);

    if i == n + 1 {
        // Resonance level. First the two structural facts, read from the
        // residual of the ansatz solved so far:
        let r0 = core.tq_of(&core.ansatz(coeffs, mu, i, None)?)?;
        // (a) the t^n log t residual slot vanishes on its own;
        let auto = r0.coeff(n, 1);
        let auto_bad = if C::EXACT {
            !auto.is_zero()
        } else {
            auto.sup_norm() > ANNIHILATION_TOL * scale
        };
        if auto_bad {
            return Err(CmcError::Internal(format!(
                "the t^{n} log t residual slot should vanish automatically; got norm {:.3e}",
                auto.sup_norm()
            )));
        }
        // (b) the diagonal pivot of the t^{n+1} slot vanishes (resonance):
        // probing t^{n+1} must not move the t^n residual at all.
        let (_, k1_diag) =
            core.slot_response(coeffs, &r0, mu, i, (n + 1, 0), (n, 0))?;
        let diag_bad = if C::EXACT {
            !k1_diag.is_zero()
        } else {
            k1_diag.sup_norm() > ANNIHILATION_TOL * scale
        };
        if diag_bad {
            return Err(CmcError::Internal(format!(
                "expected a resonant (vanishing) pivot for the t^{} slot, got response norm {:.3e}",
                n + 1,
                k1_diag.sup_norm()
            )));
        }
        pivots.insert((n + 1, 0), k1_diag.constant_term().to_f64());

        // The log coefficient is determined through its coupling onto the
        // t^n residual slot.
        let (k0, k1) = core.slot_response(coeffs, &r0, mu, i, (n + 1, 1), (n, 0))?;
        check_pivot::<C>(&k1, scale, (n + 1, 1), (n, 0))?;
        let c = k0.neg().mul(&k1.recip()?)?;
        pivots.insert((n + 1, 1), k1.constant_term().to_f64());
        coeffs.insert((n + 1, 1), c);
        sources.insert((n + 1, 1), CoeffSource::Solved);

        // The resonant slot itself stays at zero unless supplied later.
        let zero = Jet::zero(core.dim, mu - 2);
        coeffs.insert((n + 1, 0), zero);
        sources.insert((n + 1, 0), CoeffSource::DefaultZero);
    } else {
        let max_j = if i <= n { 0 } else { (i - 1) / n };
        for j in (0..=max_j).rev() {
            // Higher log powers feed the lower ones' residual slots, so the
            // residual is recomputed after every solve.
            let r0 = core.tq_of(&core.ansatz(coeffs, mu, i, None)?)?;
            let (k0, k1) = core.slot_response(coeffs, &r0, mu, i, (i, j), (i - 1, j))?;
            check_pivot::<C>(&k1, scale, (i, j), (i - 1, j))?;
            let c = k0.neg().mul(&k1.recip()?)?;
            pivots.insert((i, j), k1.constant_term().to_f64());
            coeffs.insert((i, j), c);
            sources.insert((i, j), CoeffSource::Solved);
        }
    }

    core.check_annihilation(coeffs, mu, i, table_scale(coeffs))
}

fn check_pivot<C: Coeff>(
    k1: &Jet<C>,
    scale: f64,
    unknown: (usize, usize),
    slot: (usize, usize),
) -> Result<()> {
    let degenerate = if C::EXACT {
        k1.constant_term().is_zero()
    } else {
        k1.constant_term().to_f64().abs() < PIVOT_TOL * scale.max(1.0)
    };
    if degenerate {
        return Err(CmcError::Internal(format!(
            "unexpected resonance: the pivot of the t^{} (log t)^{} coefficient on residual \
             slot t^{} (log t)^{} is {:.3e}",
            unknown.0,
            unknown.1,
            slot.0,
            slot.1,
            k1.constant_term().to_f64()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Public solve entry points
// ---------------------------------------------------------------------------

fn h_fn_from_data<'a>(data: &'a ProblemData) -> impl Fn(usize, usize, usize) -> Result<LogSeries<f64>> + 'a {
    move |jet_order, t_order, log_cap| data.h_series(jet_order, t_order, log_cap)
}

fn h_fn_from_expr<'a>(
    h: &'a Expr,
    base: &'a [f64],
) -> impl Fn(usize, usize, usize) -> Result<LogSeries<f64>> + 'a {
    move |jet_order, t_order, log_cap| {
        let dim = base.len();
        let series = eval_in(h, &|v| match v {
            Var::T => {
                LogSeries::monomial(t_order, log_cap, 1, 0, Jet::constant(dim, jet_order, 1.0))
            }
            Var::X(kk) => {
                let idx = (kk - 1) as usize;
                if idx >= dim {
                    return Err(CmcError::Domain(format!(
                        "variable x{kk} out of range: {dim} tangential variable(s)"
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
                "|H| must be < 1 at the base point, got {h0}"
            )));
        }
        Ok(series)
    }
}

/// Local solve from problem data: determines `c_1 ..= c_n`, the log
/// coefficient `c_{n+1,1}`, and records the resonance, with jets around the
/// data's base point at input budget `jet_order`.
pub fn solve_local(data: &ProblemData, jet_order: usize) -> Result<ExpansionTable<f64>> {
    let phi = data.phi_jet(jet_order)?;
    let h_fn = h_fn_from_data(data);
    let core = Core {
        n: data.n(),
        dim: data.dim(),
        m: jet_order,
        log_cap: default_log_cap(data.n(), data.n() + 1),
        h_fn: &h_fn,
    };
    let c1 = c1_iterate(&core, &phi)?;
    solve_local_core(data.n(), &phi, &h_fn, data.base_point().to_vec(), c1)
}

/// Local solve from a raw boundary-trace jet (no expression behind it) and a
/// mean-curvature expression evaluated around `base`.
pub fn solve_local_jets(
    n: usize,
    phi: &Jet<f64>,
    h: &Expr,
    base: &[f64],
) -> Result<ExpansionTable<f64>> {
    if phi.dim() != n - 1 || base.len() != n - 1 {
        return Err(CmcError::Shape(format!(
            "boundary jet has dim {}, base point {} coordinates; n = {n} needs {}",
            phi.dim(),
            base.len(),
            n - 1
        )));
    }
    let h_fn = h_fn_from_expr(h, base);
    let core = Core {
        n,
        dim: n - 1,
        m: phi.order(),
        log_cap: default_log_cap(n, n + 1),
        h_fn: &h_fn,
    };
    let c1 = c1_iterate(&core, phi)?;
    solve_local_core(n, phi, &h_fn, base.to_vec(), c1)
}

/// Exact-rational local solve with a constant mean curvature. The first
/// coefficient comes from the closed form (the fixed-point iteration never
/// terminates in exact arithmetic); everything else runs through the same
/// generic probe machinery with exact zero checks.
pub fn solve_local_exact(
    n: usize,
    phi: &Jet<BigRational>,
    h0: &BigRational,
) -> Result<ExpansionTable<BigRational>> {
    if phi.dim() != n - 1 {
        return Err(CmcError::Shape(format!(
            "boundary jet has dim {}, n = {n} needs {}",
            phi.dim(),
            n - 1
        )));
    }
    if h0.to_f64().abs() >= 1.0 {
        return Err(CmcError::Domain("|H| must be < 1".to_string()));
    }
    let dim = n - 1;
    let h_owned = h0.clone();
    let h_fn = move |jet_order: usize, t_order: usize, log_cap: usize| {
        LogSeries::monomial(t_order, log_cap, 0, 0, Jet::constant(dim, jet_order, h_owned.clone()))
    };
    let h0_jet = Jet::constant(dim, phi.order(), h0.clone());
    let c1 = c1_closed_form(phi, &h0_jet)?;
    solve_local_core(n, phi, &h_fn, vec![0.0; dim], c1)
}

/// Extend a table to order `k`, solving every level above `n + 1`. The
/// resonant `t^{n+1}` coefficient must already be what the caller wants
/// (default zero, or installed via [`ExpansionTable::with_c_global`]),
/// because all higher coefficients depend on it.
pub fn solve_global(
    table: &ExpansionTable<f64>,
    data: &ProblemData,
    k: usize,
) -> Result<ExpansionTable<f64>> {
    if k <= table.k {
        return Err(CmcError::Shape(format!(
            "target order {k} does not extend the table (k = {})",
            table.k
        )));
    }
    if table.jet_budget < k + 2 {
        return Err(CmcError::Shape(format!(
            "extending to order {k} needs jet budget >= {}, table has {}",
            k + 2,
            table.jet_budget
        )));
    }
    let h_fn = h_fn_from_data(data);
    let core = Core {
        n: table.n,
        dim: table.n - 1,
        m: table.jet_budget,
        log_cap: default_log_cap(table.n, k),
        h_fn: &h_fn,
    };
    let mut out = table.clone();
    out.k = k;
    for i in (table.k + 1)..=k {
        solve_level(&core, &mut out.coeffs, &mut out.sources, &mut out.pivots, i)?;
    }
    out.residual_order = floor_scan(&out, &h_fn)?;
    Ok(out)
}

/// Lowest `(i, j)` slot of `t*Q(table series)` that does not vanish, checked
/// through `t^{k+1}`; `None` when everything through that order is
/// annihilated (e.g. for an exactly polynomial solution). Recomputes from
/// scratch — use [`ExpansionTable::residual_order`] for the value verified
/// at solve time.
pub fn residual_floor(
    table: &ExpansionTable<f64>,
    data: &ProblemData,
) -> Result<Option<(usize, usize)>> {
    let h_fn = h_fn_from_data(data);
    floor_scan(table, &h_fn)
}

// ---------------------------------------------------------------------------
// Log-coefficient vanishing checks (n = 2)
// ---------------------------------------------------------------------------

/// Result of the floating-point log-coefficient survey at `n = 2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct C31Report {
    pub trials: usize,
    /// Whether the supplied mean-curvature field is constant (semantic
    /// check); only then is the vanishing asserted.
    pub constant_h: bool,
    /// Whether the zero claim was enforced (n = 2 and constant H).
    pub zero_asserted: bool,
    /// Largest |c_{3,1}| coefficient across trials.
    pub max_abs: f64,
    /// The same, relative to each trial's coefficient scale.
    pub max_abs_normalized: f64,
    pub per_trial_max: Vec<f64>,
}

fn h_is_constant(h: &Expr) -> Result<bool> {
    let h_fn = h_fn_from_expr(h, &[0.0]);
    let series = h_fn(4, 3, 0)?;
    for (i, _, jet) in series.terms() {
        if i > 0 {
            return Ok(false);
        }
        let mut nonconst = jet.clone();
        nonconst.set_coeff(&[0], 0.0)?;
        if !nonconst.is_zero() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// One survey trial: a random degree-`m` boundary jet solved against `h`,
/// returning `(|c_{3,1}|, |c_{3,1}| / table scale)`.
fn c31_trial(rng: &mut ChaCha8Rng, m: usize, h: &Expr) -> Result<(f64, f64)> {
    let jet_len = Jet::<f64>::zero(1, m).coeffs().len();
    let coeffs: Vec<f64> = (0..jet_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let phi = Jet::from_coeffs(1, m, coeffs)?;
    let table = solve_local_jets(2, &phi, h, &[0.0])?;
    let c31 = table
        .coeff(3, 1)
        .ok_or_else(|| CmcError::Internal("missing t^3 log t slot".to_string()))?;
    let a = c31.sup_norm();
    Ok((a, a / table.scale()))
}

fn c31_report(
    trials: usize,
    constant_h: bool,
    per_trial_max: Vec<f64>,
    max_abs: f64,
    max_norm: f64,
) -> Result<C31Report> {
    let zero_asserted = constant_h;
    if zero_asserted && max_norm > 1e-9 {
        return Err(CmcError::Internal(format!(
            "the t^3 log t coefficient should vanish for constant mean curvature at n = 2; \
             largest normalized magnitude {max_norm:.3e}"
        )));
    }
    Ok(C31Report {
        trials,
        constant_h,
        zero_asserted,
        max_abs,
        max_abs_normalized: max_norm,
        per_trial_max,
    })
}

/// Sample random boundary jets at `n = 2` and measure the `t^3 log t`
/// coefficient. For constant mean curvature it must vanish (that is the
/// planar no-log phenomenon); for nonconstant fields the magnitude is
/// reported without any assertion.
pub fn verify_c31(trials: usize, h: &Expr, seed: u64) -> Result<C31Report> {
    let m = 8;
    let constant_h = h_is_constant(h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_trial_max = Vec::with_capacity(trials);
    let mut max_abs = 0.0_f64;
    let mut max_norm = 0.0_f64;
    for _ in 0..trials {
        let (a, norm) = c31_trial(&mut rng, m, h)?;
        per_trial_max.push(a);
        max_abs = max_abs.max(a);
        max_norm = max_norm.max(norm);
    }
    c31_report(trials, constant_h, per_trial_max, max_abs, max_norm)
}

/// Like [`verify_c31`], but each trial also draws a fresh random constant
/// mean curvature in `(-0.9, 0.9)`, so the vanishing is certified across
/// the admissible constant range rather than at one value.
pub fn verify_c31_random_h(trials: usize, seed: u64) -> Result<C31Report> {
    let m = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_trial_max = Vec::with_capacity(trials);
    let mut max_abs = 0.0_f64;
    let mut max_norm = 0.0_f64;
    for _ in 0..trials {
        let h = Expr::num(rng.gen_range(-0.9..0.9));
        let (a, norm) = c31_trial(&mut rng, m, &h)?;
        per_trial_max.push(a);
        max_abs = max_abs.max(a);
        max_norm = max_norm.max(norm);
    }
    c31_report(trials, true, per_trial_max, max_abs, max_norm)
}

/// Result of the exact-rational log-coefficient check at `n = 2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct C31ExactReport {
    pub trials: usize,
    /// True when every exact trial produced an identically zero coefficient.
    pub all_zero: bool,
    /// Trials that could not run exactly (square roots left the rationals)
    /// and fell back to floating point.
    pub fallback_count: usize,
    /// Per-trial outcome: exact zero (or float-small for fallback trials).
    pub per_trial_zero: Vec<bool>,
}

fn random_rational(rng: &mut ChaCha8Rng) -> BigRational {
    let num = rng.gen_range(-20i64..=20);
    let den = rng.gen_range(1i64..=9);
    BigRational::new(num.into(), den.into())
}

/// Exact-rational version of [`verify_c31`] for constant `H`: random
/// boundary jets whose linear coefficient is drawn from the rational
/// parametrization of right triangles (so `1 + phi'(0)^2` is a perfect
/// square and every square root stays rational), then an exact solve and an
/// exact zero test of the `t^3 log t` coefficient. Trials whose square roots
/// leave the rationals fall back to floating point and are counted.
pub fn verify_c31_exact(trials: usize, h0: &BigRational, seed: u64) -> Result<C31ExactReport> {
    let n = 2;
    let m = 6;
    if h0.to_f64().abs() >= 1.0 {
        return Err(CmcError::Domain("|H| must be < 1".to_string()));
    }
    let one = <BigRational as Coeff>::one();
    let h_sq_complement = one.clone() - h0.clone() * h0.clone();
    let h_exact = Coeff::sqrt(&h_sq_complement).is_ok();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jet_len = Jet::<BigRational>::zero(1, m).coeffs().len();
    let mut per_trial_zero = Vec::with_capacity(trials);
    let mut fallback_count = 0usize;
    let mut all_zero = true;
    for _ in 0..trials {
        let mut coeffs: Vec<BigRational> =
            (0..jet_len).map(|_| random_rational(&mut rng)).collect();
        // Rational points on the unit circle: phi'(0) = (a^2 - b^2) / (2ab)
        // makes 1 + phi'(0)^2 = ((a^2 + b^2) / (2ab))^2.
        let a = rng.gen_range(2i64..=5);
        let b = rng.gen_range(1i64..a);
        let sign = if rng.gen_bool(0.5) { 1 } else { -1 };
        coeffs[1] = BigRational::new((sign * (a * a - b * b)).into(), (2 * a * b).into());

        if h_exact {
            let phi = Jet::from_coeffs(1, m, coeffs)?;
            let table = solve_local_exact(n, &phi, h0)?;
            let c31 = table
                .coeff(3, 1)
                .ok_or_else(|| CmcError::Internal("missing t^3 log t slot".to_string()))?;
            let zero = c31.is_zero();
            all_zero &= zero;
            per_trial_zero.push(zero);
        } else {
            // 1 - H^2 is not a perfect square: exact square roots are
            // impossible, run the trial in floating point instead.
            fallback_count += 1;
            let float_coeffs: Vec<f64> = coeffs.iter().map(Coeff::to_f64).collect();
            let phi = Jet::from_coeffs(1, m, float_coeffs)?;
            let table = solve_local_jets(n, &phi, &Expr::num(h0.to_f64()), &[0.0])?;
            let c31 = table
                .coeff(3, 1)
                .ok_or_else(|| CmcError::Internal("missing t^3 log t slot".to_string()))?;
            let zero = c31.sup_norm() <= 1e-9 * table.scale();
            all_zero &= zero;
            per_trial_zero.push(zero);
        }
    }
    Ok(C31ExactReport { trials, all_zero, fallback_count, per_trial_zero })
}

// ---------------------------------------------------------------------------
// Serialization (float tables)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoeffRepr {
    i: usize,
    j: usize,
    source: CoeffSource,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pivot: Option<f64>,
    jet: Jet<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableRepr {
    n: usize,
    k: usize,
    jet_budget: usize,
    base_point: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    residual_order: Option<(usize, usize)>,
    coeffs: Vec<CoeffRepr>,
}

impl Serialize for ExpansionTable<f64> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let coeffs = self
            .coeffs
            .iter()
            .map(|(&(i, j), jet)| CoeffRepr {
                i,
                j,
                source: self.sources.get(&(i, j)).copied().unwrap_or(CoeffSource::Solved),
                pivot: self.pivots.get(&(i, j)).copied(),
                jet: jet.clone(),
            })
            .collect();
        TableRepr {
            n: self.n,
            k: self.k,
            jet_budget: self.jet_budget,
            base_point: self.base_point.clone(),
            residual_order: self.residual_order,
            coeffs,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ExpansionTable<f64> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = TableRepr::deserialize(deserializer)?;
        if repr.n < 2 {
            return Err(D::Error::custom("expansion table needs n >= 2"));
        }
        let mut coeffs = BTreeMap::new();
        let mut sources = BTreeMap::new();
        let mut pivots = BTreeMap::new();
        for c in repr.coeffs {
            if c.jet.dim() != repr.n - 1 {
                return Err(D::Error::custom(format!(
                    "coefficient ({}, {}) has dim {}, expected {}",
                    c.i,
                    c.j,
                    c.jet.dim(),
                    repr.n - 1
                )));
            }
            coeffs.insert((c.i, c.j), c.jet);
            sources.insert((c.i, c.j), c.source);
            if let Some(p) = c.pivot {
                pivots.insert((c.i, c.j), p);
            }
        }
        Ok(ExpansionTable {
            n: repr.n,
            k: repr.k,
            jet_budget: repr.jet_budget,
            base_point: repr.base_point,
            coeffs,
            sources,
            pivots,
            residual_order: repr.residual_order,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;
    use approx::assert_abs_diff_eq;

    fn plane_data(n: usize) -> (ProblemData, f64) {
        // u = 0.6 + 0.25 x1 (+ 0.1 x2) + 0.4 t is an exact solution for the
        // matching constant H.
        let (phi_src, grad_sq) = if n == 2 {
            ("0.6 + 0.25*x1", 0.25f64 * 0.25)
        } else {
            ("0.6 + 0.25*x1 - 0.1*x2", 0.25f64 * 0.25 + 0.1 * 0.1)
        };
        let c = 0.4;
        let h = c / f64::sqrt(1.0 + grad_sq + c * c);
        let data = ProblemData::new(
            n,
            parse_expr(phi_src).unwrap(),
            Expr::num(h),
            vec![0.05; n - 1],
        )
        .unwrap();
        (data, c)
    }

    #[test]
    fn plane_expansion_is_exact() {
        for n in [2usize, 3] {
            let (data, c) = plane_data(n);
            let table = solve_local(&data, n + 5).unwrap();
            // c_1 equals the plane slope as a full jet (constant).
            let c1 = table.coeff(1, 0).unwrap();
            assert_abs_diff_eq!(*c1.constant_term(), c, epsilon = 1e-12);
            let mut c1_rest = c1.clone();
            c1_rest.set_coeff(&vec![0u32; n - 1], 0.0).unwrap();
            assert!(c1_rest.sup_norm() < 1e-12);
            // Higher coefficients vanish.
            for i in 2..=n {
                assert!(table.coeff(i, 0).unwrap().sup_norm() < 1e-11, "c_{i} nonzero");
            }
            assert!(table.coeff(n + 1, 1).unwrap().sup_norm() < 1e-11);
            assert_eq!(table.source(n + 1, 0), Some(CoeffSource::DefaultZero));
            // The plane solves the equation exactly: no residual floor.
            assert_eq!(residual_floor(&table, &data).unwrap(), None);
            assert_eq!(table.residual_order(), None);
        }
    }

    #[test]
    fn c2_closed_form_matches_the_probe() {
        // Nonconstant mean curvature with a t-linear part, so every term of
        // the closed form (including the H1 contribution) is exercised.
        for n in [2usize, 3, 4] {
            let dim = n - 1;
            let phi_src = match n {
                2 => "0.3*sin(x1) + 0.1*x1^2",
                3 => "0.3*sin(x1) + 0.2*x1*x2",
                _ => "0.3*sin(x1) + 0.2*x1*x2 - 0.15*x3^2",
            };
            let data = ProblemData::new(
                n,
                parse_expr(phi_src).unwrap(),
                parse_expr("0.25 + 0.2*t + 0.1*x1").unwrap(),
                vec![0.1; dim],
            )
            .unwrap();
            let m = n + 4;
            let table = solve_local(&data, m).unwrap();
            let probed = table.coeff(2, 0).unwrap();

            let phi = data.phi_jet(m).unwrap();
            let h = data.h_series(m, 1, 0).unwrap();
            let oracle = c2_closed_form(&phi, &h.coeff(0, 0), &h.coeff(1, 0), n).unwrap();
            let ord = probed.order().min(oracle.order());
            let diff = probed.resized(ord).sub(&oracle.resized(ord)).unwrap().sup_norm();
            let scale = oracle.sup_norm().max(1.0);
            assert!(diff <= 1e-10 * scale, "n = {n}: formula deviates by {diff:.3e}");
        }
    }

    #[test]
    fn c1_routes_agree() {
        // The operator-driven fixed point and the closed form must produce
        // the same first-order jet.
        let data = ProblemData::new(
            2,
            parse_expr("0.3*sin(x1) + 0.1*x1^2").unwrap(),
            parse_expr("0.5 + 0.2*x1").unwrap(),
            vec![0.2],
        )
        .unwrap();
        let m = 9;
        let table = solve_local(&data, m).unwrap();
        let c1_engine = table.coeff(1, 0).unwrap();

        let phi = data.phi_jet(m).unwrap();
        let h0 = data.h_series(m - 1, 2, 0).unwrap().coeff(0, 0);
        let c1_formula = c1_closed_form(&phi, &h0).unwrap();
        let diff = c1_engine.sub(&c1_formula).unwrap().sup_norm();
        assert!(diff < 1e-12, "routes differ by {diff}");
    }

    #[test]
    fn probed_pivots_match_the_linearized_structure() {
        // For constant H the probe-discovered pivots obey
        //   diagonal:   -i (n + 1 - i) (1 - H^2)
        //   resonant:   0 at i = n + 1
        //   log slot:   (n + 1) (1 - H^2) coupling onto the t^n slot.
        for n in [2usize, 3] {
            let h = 0.4;
            let phi_src = if n == 2 { "0.3*sin(x1)" } else { "0.3*sin(x1) + 0.2*x2" };
            let data = ProblemData::new(
                n,
                parse_expr(phi_src).unwrap(),
                Expr::num(h),
                vec![0.1; n - 1],
            )
            .unwrap();
            let table = solve_local(&data, n + 6).unwrap();
            let f = 1.0 - h * h;
            for i in 2..=n {
                let want = -((i * (n + 1 - i)) as f64) * f;
                assert_abs_diff_eq!(table.pivot(i, 0).unwrap(), want, epsilon = 1e-8);
            }
            assert_abs_diff_eq!(table.pivot(n + 1, 0).unwrap(), 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(
                table.pivot(n + 1, 1).unwrap(),
                (n + 1) as f64 * f,
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn global_extension_annihilates_residuals() {
        let data = ProblemData::new(
            2,
            parse_expr("0.2*cos(x1)").unwrap(),
            Expr::num(0.3),
            vec![0.0],
        )
        .unwrap();
        let k = 5;
        let local = solve_local(&data, 2 * k + 2).unwrap();
        assert_eq!(local.residual_order(), Some((3, 0)));
        let table = solve_global(&local, &data, k).unwrap();
        // Levels beyond n + 1 picked up log slots: (5, 2) exists for n = 2.
        assert!(table.coeff(5, 2).is_some());
        assert_eq!(residual_floor(&table, &data).unwrap(), Some((k, 0)));
        assert_eq!(table.residual_order(), Some((k, 0)));
        // A supplied global coefficient changes the higher levels but is
        // preserved verbatim.
        let g = Jet::constant(1, 4, 0.7);
        let with_g = local.with_c_global(&g, CoeffSource::Supplied).unwrap();
        let table_g = solve_global(&with_g, &data, k).unwrap();
        assert_abs_diff_eq!(
            *table_g.coeff(3, 0).unwrap().constant_term(),
            0.7,
            epsilon = 1e-14
        );
        assert_eq!(table_g.source(3, 0), Some(CoeffSource::Supplied));
        let d43 = table_g
            .coeff(4, 0)
            .unwrap()
            .sub(table.coeff(4, 0).unwrap())
            .unwrap()
            .sup_norm();
        assert!(d43 > 1e-3, "higher levels should respond to the global coefficient");
        assert_eq!(residual_floor(&table_g, &data).unwrap(), Some((k, 0)));
    }

    #[test]
    fn c31_vanishes_for_constant_h() {
        let report = verify_c31(20, &Expr::num(0.6), 12345).unwrap();
        assert!(report.constant_h);
        assert!(report.zero_asserted);
        assert!(report.max_abs_normalized <= 1e-9, "max {}", report.max_abs_normalized);
    }

    #[test]
    fn c31_vanishes_across_random_constant_h() {
        let report = verify_c31_random_h(10, 777).unwrap();
        assert!(report.zero_asserted);
        assert!(report.max_abs_normalized <= 1e-9, "max {}", report.max_abs_normalized);
    }

    #[test]
    fn c31_survey_reports_nonconstant_h_without_asserting() {
        let h = parse_expr("0.3 + 0.1*t").unwrap();
        let report = verify_c31(5, &h, 99).unwrap();
        assert!(!report.constant_h);
        assert!(!report.zero_asserted);
        // A t-dependent field genuinely produces a log term.
        assert!(report.max_abs > 1e-6, "expected a nonzero log coefficient");
    }

    #[test]
    fn c31_exact_is_identically_zero() {
        let h = BigRational::new(3.into(), 5.into());
        let report = verify_c31_exact(6, &h, 2024).unwrap();
        assert_eq!(report.fallback_count, 0);
        assert!(report.all_zero);
    }

    #[test]
    fn c31_exact_falls_back_when_sqrt_leaves_the_rationals() {
        // 1 - (1/3)^2 = 8/9 is not a perfect square.
        let h = BigRational::new(1.into(), 3.into());
        let report = verify_c31_exact(3, &h, 7).unwrap();
        assert_eq!(report.fallback_count, 3);
        assert!(report.all_zero, "float fallback should still see a vanishing coefficient");
    }

    #[test]
    fn base_point_coherence() {
        // Reading the c_1 jet at a tangential offset approximates solving at
        // the shifted base point, up to the jet truncation error.
        let data0 = ProblemData::new(
            2,
            parse_expr("0.3*sin(x1)").unwrap(),
            Expr::num(0.5),
            vec![0.0],
        )
        .unwrap();
        let shift = 0.1;
        let data1 = ProblemData::new(
            2,
            parse_expr("0.3*sin(x1)").unwrap(),
            Expr::num(0.5),
            vec![shift],
        )
        .unwrap();
        let t0 = solve_local(&data0, 10).unwrap();
        let t1 = solve_local(&data1, 10).unwrap();
        let via_offset = t0.coeff(1, 0).unwrap().eval(&[shift]).unwrap();
        let direct = *t1.coeff(1, 0).unwrap().constant_term();
        assert_abs_diff_eq!(via_offset, direct, epsilon = 1e-9);
    }

    #[test]
    fn engine_matches_sphere_taylor() {
        // The recursion, fed only the sphere's boundary trace and calibrated
        // mean curvature, must reproduce the sphere's own Taylor expansion:
        // local levels directly, and -- once the true t^{n+1} coefficient is
        // supplied -- every global level as well. The log coefficient must
        // vanish (the sphere is analytic up to the boundary).
        for n in [2usize, 3] {
            let sphere = crate::exact::ExactSolution::Sphere {
                center_x: vec![0.1; n - 1],
                center_y: -0.2,
                center_t: 0.3,
                radius: 1.0,
                branch: crate::exact::Branch::Upper,
            };
            let base = vec![0.25; n - 1];
            let k = n + 3;
            let m = n + 7;
            let data = sphere.problem_data(&base).unwrap();
            let taylor = sphere.taylor_at_boundary(&base, m, k).unwrap();
            let local = solve_local(&data, m).unwrap();

            let compare = |table: &ExpansionTable<f64>, i: usize| {
                let engine = table.coeff(i, 0).unwrap();
                let truth = taylor.coeff(i, 0).resized(engine.order());
                let diff = engine.sub(&truth).unwrap().sup_norm();
                assert!(diff < 1e-8, "n={n} i={i}: engine vs sphere differ by {diff:.3e}");
            };
            for i in 0..=n {
                compare(&local, i);
            }
            assert!(local.coeff(n + 1, 1).unwrap().sup_norm() < 1e-8);

            // Supply the sphere's true t^{n+1} jet and extend.
            let c_true = taylor.coeff(n + 1, 0).resized(m - n - 1);
            let table = solve_global(
                &local.with_c_global(&c_true, CoeffSource::Supplied).unwrap(),
                &data,
                k,
            )
            .unwrap();
            for i in 0..=k {
                compare(&table, i);
            }
            // Every log slot beyond the resonance stays at zero as well.
            for (i, j, jet) in table.entries() {
                if j > 0 {
                    assert!(
                        jet.sup_norm() < 1e-8,
                        "n={n}: unexpected log term at ({i}, {j})"
                    );
                }
            }
        }
    }

    #[test]
    fn serde_round_trip() {
        let data = ProblemData::new(
            2,
            parse_expr("0.2*cos(x1)").unwrap(),
            Expr::num(0.3),
            vec![0.0],
        )
        .unwrap();
        let table = solve_local(&data, 7).unwrap();
        let json = serde_json::to_string(&table).unwrap();
        let back: ExpansionTable<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(table, back);
        assert_eq!(back.source(3, 0), Some(CoeffSource::DefaultZero));
        assert_eq!(back.pivot(3, 1), table.pivot(3, 1));
    }

    #[test]
    fn eval_sums_the_stored_terms()  {
        let data = plane_data(2).0;
        let table = solve_local(&data, 7).unwrap();
        // For the plane the evaluation equals phi(x) + c1 t exactly.
        let (x, t) = (0.12, 0.3);
        let want = 0.6 + 0.25 * x + 0.4 * t;
        assert_abs_diff_eq!(table.eval(&[x], t).unwrap(), want, epsilon = 1e-10);
    }

    #[test]
    fn budget_preconditions_are_enforced() {
        let data = plane_data(2).0;
        // Local: m >= n + 3.
        assert!(solve_local(&data, 4).is_err());
        // Global: m >= k + 2.
        let local = solve_local(&data, 6).unwrap();
        assert!(solve_global(&local, &data, 5).is_err());
        // with_c_global after extension is rejected.
        let local = solve_local(&data, 9).unwrap();
        let ext = solve_global(&local, &data, 5).unwrap();
        let g = Jet::constant(1, 3, 0.1);
        assert!(ext.with_c_global(&g, CoeffSource::Supplied).is_err());
    }
}
