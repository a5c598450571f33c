//! Cross-checks that compute the same quantity along two independent routes
//! and report the agreement: probe-solved coefficients against their closed
//! forms, verified residual floors, odd-coefficient vanishing for zero mean
//! curvature, the series engine against exact sphere Taylor data, and the
//! analytic Jacobian against differenced residuals. Every report serializes
//! to JSON and carries a `pass` verdict, so callers can assert on it or
//! present it.

use crate::error::{CmcError, Result};
use crate::exact::{Branch, ExactSolution};
use crate::expansion::{
    c1_closed_form, c2_closed_form, solve_global, solve_local, solve_local_jets, CoeffSource,
};
use crate::expr::{parse_expr, Expr};
use crate::grid::{Axis, GridField};
use crate::jet::Jet;
use crate::operator::ProblemData;
use crate::solver::{
    add_to_interior, for_each_interior, interior_len, jacobian_vector_product, residual_vector,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

// ---------------------------------------------------------------------------
// Random polynomial inputs
// ---------------------------------------------------------------------------

/// Exponent multi-indices with total degree at most `deg` over `dim`
/// variables, in a fixed deterministic order.
fn monomials(dim: usize, deg: u32) -> Vec<Vec<u32>> {
    fn rec(dim: usize, deg: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if dim == 0 {
            out.push(prefix.clone());
            return;
        }
        for p in 0..=deg {
            prefix.push(p);
            rec(dim - 1, deg - p, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(dim, deg, &mut Vec::new(), &mut out);
    out
}

fn push_term(s: &mut String, coeff: f64, alpha: &[u32], t_pow: u32) {
    if coeff == 0.0 {
        return;
    }
    let _ = write!(s, "{}{}", if coeff < 0.0 { " - " } else { " + " }, coeff.abs());
    for (i, &p) in alpha.iter().enumerate() {
        for _ in 0..p {
            let _ = write!(s, "*x{}", i + 1);
        }
    }
    for _ in 0..t_pow {
        s.push_str("*t");
    }
}

/// Random boundary polynomial of total degree at most 5 with dyadic
/// coefficients in `[-1, 1]`.
fn random_boundary_poly(rng: &mut ChaCha8Rng, dim: usize) -> String {
    let mut s = String::from("0");
    for alpha in monomials(dim, 5) {
        if rng.gen_range(0.0..1.0) > 0.4 {
            continue;
        }
        let k: i32 = rng.gen_range(-64..=64);
        push_term(&mut s, k as f64 / 64.0, &alpha, 0);
    }
    s
}

/// Random mean-curvature polynomial (quadratic in `x`, linear in `t`) whose
/// coefficient magnitudes sum to at most 0.8, bounding `|H|` by 0.8 on the
/// unit box.
fn random_curvature_poly(rng: &mut ChaCha8Rng, dim: usize) -> String {
    let mut terms: Vec<(Vec<u32>, u32, f64)> = Vec::new();
    for alpha in monomials(dim, 2) {
        terms.push((alpha, 0, rng.gen_range(-1.0..1.0)));
    }
    for alpha in monomials(dim, 1) {
        terms.push((alpha, 1, rng.gen_range(-1.0..1.0)));
    }
    let total: f64 = terms.iter().map(|(_, _, c)| c.abs()).sum();
    let budget = 0.8 * rng.gen_range(0.4..1.0);
    let scale = if total > 0.0 { budget / total } else { 0.0 };
    let mut s = String::from("0");
    for (alpha, tp, c) in &terms {
        push_term(&mut s, c * scale, alpha, *tp);
    }
    s
}

fn expansion_trial_data(rng: &mut ChaCha8Rng, n: usize) -> Result<ProblemData> {
    let dim = n - 1;
    let phi = parse_expr(&random_boundary_poly(rng, dim))?;
    let h = parse_expr(&random_curvature_poly(rng, dim))?;
    let base: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.2..0.2)).collect();
    ProblemData::new(n, phi, h, base)
}

fn normalized_dev(probe: Option<&Jet<f64>>, truth: &Jet<f64>) -> Result<f64> {
    let probe =
        probe.ok_or_else(|| CmcError::Internal("missing coefficient slot".to_string()))?;
    let ord = probe.order().min(truth.order());
    let diff = probe.resized(ord).sub(&truth.resized(ord))?.sup_norm();
    Ok(diff / truth.sup_norm().max(1.0))
}

// ---------------------------------------------------------------------------
// Coefficient formulas and residual floors on random inputs
// ---------------------------------------------------------------------------

/// One random-input comparison of probe-solved against closed-form
/// coefficients, plus the solve-time residual floor of the same table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoeffTrial {
    pub n: usize,
    /// `sup |probe c1 - closed form| / max(1, sup |closed form|)`.
    pub c1_dev: f64,
    pub c2_dev: f64,
    /// Verified lowest surviving slot of `t*Q` applied to the table.
    pub residual_floor: Option<(usize, usize)>,
}

/// Random-trial agreement between the probe recursion and the first- and
/// second-order closed forms, with the residual floor of every table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionTrialsReport {
    pub trials: usize,
    pub seed: u64,
    pub coeff_tolerance: f64,
    pub max_c1_dev: f64,
    pub max_c2_dev: f64,
    /// Whether every trial's residual floor sits at `t^{n+1}`.
    pub floors_at_resonance: bool,
    pub coeff_pass: bool,
    pub per_trial: Vec<CoeffTrial>,
}

/// Solve random polynomial boundary problems (degree <= 5 traces, |H| <= 0.8
/// with tangential and t dependence, n cycling through {2, 3, 4}) and compare
/// the probe-solved `c1`/`c2` against their closed forms; record each
/// table's verified residual floor.
pub fn verify_expansion_trials(trials: usize, seed: u64) -> Result<ExpansionTrialsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_trial = Vec::with_capacity(trials);
    let mut max_c1_dev = 0.0f64;
    let mut max_c2_dev = 0.0f64;
    let mut floors_at_resonance = true;
    for trial in 0..trials {
        let n = [2usize, 3, 4][trial % 3];
        let data = expansion_trial_data(&mut rng, n)?;
        let m = (n + 3).max(6);
        let table = solve_local(&data, m)?;

        let phi = data.phi_jet(m)?;
        let h = data.h_series(m, 1, 0)?;
        let c1_truth = c1_closed_form(&phi, &h.coeff(0, 0))?;
        let c2_truth = c2_closed_form(&phi, &h.coeff(0, 0), &h.coeff(1, 0), n)?;
        let c1_dev = normalized_dev(table.coeff(1, 0), &c1_truth)?;
        let c2_dev = normalized_dev(table.coeff(2, 0), &c2_truth)?;
        let residual_floor = table.residual_order();
        floors_at_resonance &= matches!(residual_floor, Some((i, _)) if i == n + 1);
        max_c1_dev = max_c1_dev.max(c1_dev);
        max_c2_dev = max_c2_dev.max(c2_dev);
        per_trial.push(CoeffTrial { n, c1_dev, c2_dev, residual_floor });
    }
    let coeff_tolerance = 1e-10;
    Ok(ExpansionTrialsReport {
        trials,
        seed,
        coeff_tolerance,
        max_c1_dev,
        max_c2_dev,
        floors_at_resonance,
        coeff_pass: max_c1_dev <= coeff_tolerance && max_c2_dev <= coeff_tolerance,
        per_trial,
    })
}

// ---------------------------------------------------------------------------
// Odd-coefficient vanishing for zero mean curvature
// ---------------------------------------------------------------------------

/// Vanishing verdict for one dimension's odd slots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParityCase {
    pub n: usize,
    /// `(i, j)` slots that must vanish when H = 0.
    pub slots: Vec<(usize, usize)>,
    /// Largest sup norm across trials, relative to the table scale.
    pub max_dev: f64,
}

/// For H = 0 the expansion is even in `t` below the resonant order: the
/// linear coefficient always vanishes, and so do the first odd slot at
/// `n = 3` and the resonant log slot at `n = 2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParityReport {
    pub trials_per_n: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub cases: Vec<ParityCase>,
    pub pass: bool,
}

/// Random boundary jets solved against H = 0; asserts nothing, reports the
/// largest normalized magnitude found in each slot that parity forces to
/// zero.
pub fn verify_parity(trials_per_n: usize, seed: u64) -> Result<ParityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tolerance = 1e-12;
    let mut cases = Vec::new();
    let mut pass = true;
    for (n, slots) in [(2usize, vec![(1, 0), (3, 1)]), (3, vec![(1, 0), (3, 0)])] {
        let dim = n - 1;
        let m = n + 4;
        let mut max_dev = 0.0f64;
        for _ in 0..trials_per_n {
            let jet_len = Jet::<f64>::zero(dim, m).coeffs().len();
            let coeffs: Vec<f64> = (0..jet_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let phi = Jet::from_coeffs(dim, m, coeffs)?;
            let table = solve_local_jets(n, &phi, &Expr::num(0.0), &vec![0.0; dim])?;
            for &(i, j) in &slots {
                let dev = table.coeff(i, j).map(Jet::sup_norm).unwrap_or(0.0) / table.scale();
                max_dev = max_dev.max(dev);
            }
        }
        pass &= max_dev <= tolerance;
        cases.push(ParityCase { n, slots, max_dev });
    }
    Ok(ParityReport { trials_per_n, seed, tolerance, cases, pass })
}

// ---------------------------------------------------------------------------
// Engine against exact sphere Taylor data
// ---------------------------------------------------------------------------

/// One sphere configuration for the oracle comparison. Tangential center and
/// base point are isotropic (`[value; n-1]`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SphereCase {
    pub n: usize,
    pub center_offset: f64,
    pub center_y: f64,
    pub center_t: f64,
    pub radius: f64,
    pub base_offset: f64,
    pub branch: Branch,
}

/// The fixed deterministic case list: five parameter sets, both branches,
/// n in {2, 3}.
pub fn oracle_cases() -> Vec<SphereCase> {
    let params = [
        (0.1, -0.2, 0.3, 1.0, 0.25),
        (-0.2, 0.1, 0.0, 1.0, 0.0),
        (0.0, -0.4, 0.45, 1.2, -0.3),
        (0.15, 0.3, 0.2, 0.8, 0.1),
        (-0.1, 0.0, 0.5, 1.5, 0.2),
    ];
    let mut out = Vec::new();
    for n in [2usize, 3] {
        for branch in [Branch::Upper, Branch::Lower] {
            for &(center_offset, center_y, center_t, radius, base_offset) in &params {
                out.push(SphereCase {
                    n,
                    center_offset,
                    center_y,
                    center_t,
                    radius,
                    base_offset,
                    branch,
                });
            }
        }
    }
    out
}

/// Agreement of one sphere case between engine and Taylor oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleCaseResult {
    pub case: SphereCase,
    /// Largest normalized coefficient deviation across orders `0..=n+3`.
    pub max_coeff_dev: f64,
    /// Largest log-slot magnitude relative to the table scale (spheres are
    /// analytic at the boundary, so every log slot must vanish).
    pub max_log_dev: f64,
}

/// Engine-versus-oracle verdict over a case list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub tolerance: f64,
    pub max_coeff_dev: f64,
    pub max_log_dev: f64,
    pub pass: bool,
    pub cases: Vec<OracleCaseResult>,
}

/// Solve each sphere's boundary problem order by order, supply the true
/// `t^{n+1}` jet from the sphere's own Taylor expansion, extend through
/// `t^{n+3}`, and compare every coefficient.
pub fn verify_oracle_cases(cases: &[SphereCase]) -> Result<OracleReport> {
    let tolerance = 1e-8;
    let mut results = Vec::with_capacity(cases.len());
    let mut worst_coeff = 0.0f64;
    let mut worst_log = 0.0f64;
    for case in cases {
        let n = case.n;
        let dim = n - 1;
        let sphere = ExactSolution::Sphere {
            center_x: vec![case.center_offset; dim],
            center_y: case.center_y,
            center_t: case.center_t,
            radius: case.radius,
            branch: case.branch,
        };
        let base = vec![case.base_offset; dim];
        let k = n + 3;
        let m = n + 5;
        let data = sphere.problem_data(&base)?;
        let taylor = sphere.taylor_at_boundary(&base, m, k)?;
        let local = solve_local(&data, m)?;
        let c_true = taylor.coeff(n + 1, 0).resized(m - n - 1);
        let table =
            solve_global(&local.with_c_global(&c_true, CoeffSource::Supplied)?, &data, k)?;

        let mut max_coeff_dev = 0.0f64;
        for i in 0..=k {
            let truth = taylor.coeff(i, 0);
            max_coeff_dev = max_coeff_dev.max(normalized_dev(table.coeff(i, 0), &truth)?);
        }
        let mut max_log_dev = 0.0f64;
        for (_, j, jet) in table.entries() {
            if j > 0 {
                max_log_dev = max_log_dev.max(jet.sup_norm() / table.scale());
            }
        }
        worst_coeff = worst_coeff.max(max_coeff_dev);
        worst_log = worst_log.max(max_log_dev);
        results.push(OracleCaseResult { case: case.clone(), max_coeff_dev, max_log_dev });
    }
    Ok(OracleReport {
        tolerance,
        max_coeff_dev: worst_coeff,
        max_log_dev: worst_log,
        pass: worst_coeff <= tolerance && worst_log <= tolerance,
        cases: results,
    })
}

/// [`verify_oracle_cases`] over the full fixed list.
pub fn verify_oracle() -> Result<OracleReport> {
    verify_oracle_cases(&oracle_cases())
}

// ---------------------------------------------------------------------------
// Analytic Jacobian against differenced residuals
// ---------------------------------------------------------------------------

/// Agreement between analytic Jacobian-vector products and central
/// differences of the residual at random iterates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JacobianReport {
    pub trials: usize,
    pub seed: u64,
    pub nodes_per_axis: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub max_dev: f64,
    pub pass: bool,
    pub per_trial_dev: Vec<f64>,
}

/// Random smooth iterates (trigonometric sums with affine parts) and random
/// smooth-plus-noise directions on a 33x33 grid; the analytic product must
/// match `(F(u + eps v) - F(u - eps v)) / (2 eps)` to the reported relative
/// tolerance.
pub fn verify_jacobian(trials: usize, seed: u64) -> Result<JacobianReport> {
    let nodes_per_axis = 33usize;
    let axes = vec![
        Axis::new(-0.4, 0.4, nodes_per_axis)?,
        Axis::new(0.05, 0.75, nodes_per_axis)?,
    ];
    let data = ProblemData::new(2, Expr::num(0.0), parse_expr("0.3")?, vec![0.0])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-6;
    let tolerance = 1e-6;
    let mut per_trial_dev = Vec::with_capacity(trials);
    let mut max_dev = 0.0f64;
    for _ in 0..trials {
        let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.15..0.15)).collect();
        let u = GridField::from_fn(axes.clone(), |c| {
            Ok(a[0]
                + a[1] * c[0]
                + a[2] * c[1]
                + a[3] * (2.0 * c[0]).sin() * (1.5 * c[1]).cos()
                + a[4] * (3.0 * c[0]).cos() * c[1]
                + a[5] * (2.5 * c[0]).sin() / (1.0 + c[1] * c[1]))
        })?;
        let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let smooth = GridField::from_fn(axes.clone(), |c| {
            Ok(b[0] * (3.0 * c[0]).sin() * (2.0 * c[1]).cos()
                + b[1] * c[0] * c[1]
                + b[2] * (1.7 * c[0] + 0.3).cos()
                + b[3] * c[1])
        })?;
        let len = interior_len(&u)?;
        let mut v = vec![0.0f64; len];
        for_each_interior(&u, |i, flat| {
            v[i] = smooth.values()[flat];
        })?;
        for vi in v.iter_mut() {
            *vi += 0.05 * rng.gen_range(-1.0..1.0);
        }

        let analytic = jacobian_vector_product(&data, &u, &v)?;
        let mut up = u.clone();
        add_to_interior(&mut up, &v, eps)?;
        let mut dn = u.clone();
        add_to_interior(&mut dn, &v, -eps)?;
        let fp = residual_vector(&data, &up)?;
        let fm = residual_vector(&data, &dn)?;
        let scale = analytic.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
        let mut worst = 0.0f64;
        for i in 0..len {
            let fd = (fp[i] - fm[i]) / (2.0 * eps);
            worst = worst.max((analytic[i] - fd).abs());
        }
        let dev = worst / scale;
        per_trial_dev.push(dev);
        max_dev = max_dev.max(dev);
    }
    Ok(JacobianReport {
        trials,
        seed,
        nodes_per_axis,
        eps,
        tolerance,
        max_dev,
        pass: max_dev <= tolerance,
        per_trial_dev,
    })
}
