//! Damped Newton solver for the Dirichlet problem on a box grid.
//!
//! The discrete residual is the pointwise operator evaluated with centered
//! second-order stencils at every interior node; boundary nodes carry fixed
//! Dirichlet data. The Jacobian is assembled *analytically* from the
//! operator's derivatives with respect to the gradient and Hessian entries
//! combined with the stencil weights — no differencing of the residual — and
//! each Newton step is globalized by a backtracking line search on the sup
//! norm. Planar problems factor a banded LU; three-dimensional problems use
//! ILU(0)-preconditioned BiCGStab.

use crate::error::{CmcError, IterRecord, NonConvergence, Result};
use crate::expansion::ExpansionTable;
use crate::grid::{Axis, BoundarySpec, GridField};
use crate::linalg::{bicgstab, Banded, Csr, Ilu0};
use crate::operator::{tq_point_derivs, ProblemData};

/// Options for the Newton iteration.
#[derive(Debug, Clone)]
pub struct NewtonOptions {
    /// Hard cap on Newton iterations.
    pub max_iters: usize,
    /// Sup-norm residual target.
    pub tol: f64,
    /// Line-search backtracking factor in (0, 1).
    pub shrink: f64,
    /// Smallest step the line search may take before giving up.
    pub min_step: f64,
    /// Sufficient-decrease slope: accept when
    /// `|F_new| <= (1 - armijo * step) * |F|`.
    pub armijo: f64,
    /// Relative tolerance for the inner iterative linear solver (3-D only).
    pub linear_tol: f64,
    /// Iteration cap for the inner iterative linear solver (3-D only).
    pub linear_max_iters: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            max_iters: 25,
            tol: 1e-10,
            shrink: 0.5,
            min_step: 1e-6,
            armijo: 1e-4,
            linear_tol: 1e-12,
            linear_max_iters: 500,
        }
    }
}

/// How to seed the Newton iteration.
#[derive(Debug, Clone)]
pub enum InitialIterate {
    /// Linear interpolation in `t` between the bottom and top boundary faces.
    BoundaryBlend,
    /// Evaluate an expansion table at every node.
    FromTable(ExpansionTable<f64>),
    /// A caller-provided field on the same axes.
    Given(GridField),
}

/// A converged solve: the field and the per-iteration convergence log.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub field: GridField,
    pub history: Vec<IterRecord>,
}

/// Interior-node indexing: strides follow the grid's own flat order
/// (first tangential axis fastest, `t` slowest) restricted to interior.
struct Interior {
    counts: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl Interior {
    fn new(axes: &[Axis]) -> Result<Self> {
        let counts: Vec<usize> = axes.iter().map(|a| a.count).collect();
        if counts.iter().any(|&c| c < 3) {
            return Err(CmcError::Shape(
                "every axis needs at least 3 nodes for an interior".to_string(),
            ));
        }
        let mut strides = vec![0usize; counts.len()];
        let mut acc = 1usize;
        for (d, &c) in counts.iter().enumerate() {
            strides[d] = acc;
            acc *= c - 2;
        }
        Ok(Interior { counts, strides, len: acc })
    }

    fn index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(&i, &s)| (i - 1) * s).sum()
    }

    fn is_interior(&self, idx: &[usize]) -> bool {
        idx.iter().zip(&self.counts).all(|(&i, &c)| i >= 1 && i <= c - 2)
    }
}

/// Stencil contribution of one residual row: neighbor offsets (in grid
/// index space) paired with Jacobian weights.
fn jacobian_row(
    n: usize,
    spacings: &[f64],
    d_grad: &[f64],
    d_hess: &[f64],
    mut emit: impl FnMut(&[isize], f64),
) {
    let mut offset = vec![0isize; n];
    // First derivatives: centered two-point.
    for a in 0..n {
        let w = d_grad[a] / (2.0 * spacings[a]);
        offset[a] = 1;
        emit(&offset, w);
        offset[a] = -1;
        emit(&offset, -w);
        offset[a] = 0;
    }
    // Second derivatives: diagonal three-point.
    for a in 0..n {
        let w = d_hess[a * n + a] / (spacings[a] * spacings[a]);
        offset[a] = 1;
        emit(&offset, w);
        offset[a] = -1;
        emit(&offset, w);
        offset[a] = 0;
        emit(&offset, -2.0 * w);
    }
    // Mixed derivatives: four-point cross, both symmetric entries.
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let w = d_hess[a * n + b] / (4.0 * spacings[a] * spacings[b]);
            for (sa, sb) in [(1isize, 1isize), (1, -1), (-1, 1), (-1, -1)] {
                offset[a] = sa;
                offset[b] = sb;
                emit(&offset, (sa * sb) as f64 * w);
            }
            offset[a] = 0;
            offset[b] = 0;
        }
    }
}

/// Discrete residual over the interior, and optionally the Jacobian as
/// triplets in interior-equation indexing.
fn assemble(
    data: &ProblemData,
    u: &GridField,
    want_jacobian: bool,
) -> Result<(Vec<f64>, Option<Vec<(usize, usize, f64)>>)> {
    let n = u.n();
    if n != data.n() {
        return Err(CmcError::Shape(format!(
            "grid dimension {n} does not match the problem's n = {}",
            data.n()
        )));
    }
    let interior = Interior::new(u.axes())?;
    let spacings: Vec<f64> = u.axes().iter().map(Axis::spacing).collect();
    let mut residual = vec![0.0; interior.len];
    let mut triplets = want_jacobian.then(Vec::new);

    let mut coords = vec![0.0f64; n];
    let mut grad = vec![0.0f64; n];
    let mut hess = vec![0.0f64; n * n];
    let mut err: Option<CmcError> = None;
    u.for_each_node(|_, idx| {
        if err.is_some() || !interior.is_interior(idx) {
            return;
        }
        u.coords(idx, &mut coords);
        let t = coords[n - 1];
        let h_val = match data.h_at(&coords[..n - 1], t) {
            Ok(v) => v,
            Err(e) => {
                err = Some(e);
                return;
            }
        };
        let mut nb = idx.to_vec();
        for a in 0..n {
            nb[a] += 1;
            let up = u.get(&nb);
            nb[a] -= 2;
            let dn = u.get(&nb);
            nb[a] += 1;
            let c = u.get(idx);
            grad[a] = (up - dn) / (2.0 * spacings[a]);
            hess[a * n + a] = (up - 2.0 * c + dn) / (spacings[a] * spacings[a]);
        }
        for a in 0..n {
            for b in (a + 1)..n {
                nb[a] += 1;
                nb[b] += 1;
                let pp = u.get(&nb);
                nb[b] -= 2;
                let pm = u.get(&nb);
                nb[a] -= 2;
                let mm = u.get(&nb);
                nb[b] += 2;
                let mp = u.get(&nb);
                nb[a] += 1;
                nb[b] -= 1;
                let v = (pp - pm - mp + mm) / (4.0 * spacings[a] * spacings[b]);
                hess[a * n + b] = v;
                hess[b * n + a] = v;
            }
        }
        let eq = interior.index(idx);
        let derivs = tq_point_derivs(n, t, h_val, &grad, &hess);
        residual[eq] = derivs.value;
        if let Some(trip) = triplets.as_mut() {
            jacobian_row(n, &spacings, &derivs.d_grad, &derivs.d_hess, |offset, w| {
                if w == 0.0 {
                    return;
                }
                let mut nbi = idx.to_vec();
                for (d, &o) in offset.iter().enumerate() {
                    nbi[d] = (nbi[d] as isize + o) as usize;
                }
                if interior.is_interior(&nbi) {
                    trip.push((eq, interior.index(&nbi), w));
                }
            });
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok((residual, triplets))
}

/// Discrete residual at the interior nodes of `u` (boundary rows excluded).
pub fn residual_vector(data: &ProblemData, u: &GridField) -> Result<Vec<f64>> {
    Ok(assemble(data, u, false)?.0)
}

/// Product of the analytically assembled Jacobian at `u` with an
/// interior-indexed direction `v`.
pub fn jacobian_vector_product(
    data: &ProblemData,
    u: &GridField,
    v: &[f64],
) -> Result<Vec<f64>> {
    let interior = Interior::new(u.axes())?;
    if v.len() != interior.len {
        return Err(CmcError::Shape(format!(
            "direction has length {}, expected {} interior nodes",
            v.len(),
            interior.len
        )));
    }
    let (_, triplets) = assemble(data, u, true)?;
    let mut out = vec![0.0; interior.len];
    for (i, j, w) in triplets.expect("jacobian requested") {
        out[i] += w * v[j];
    }
    Ok(out)
}

/// Add an interior-indexed increment to the interior nodes of a field.
/// Visit every interior node as `(interior_index, grid_flat_index)`, where
/// `interior_index` is the position in the vectors consumed and produced by
/// [`residual_vector`] and [`jacobian_vector_product`].
pub fn for_each_interior(u: &GridField, mut f: impl FnMut(usize, usize)) -> Result<()> {
    let interior = Interior::new(u.axes())?;
    u.for_each_node(|flat, idx| {
        if interior.is_interior(idx) {
            f(interior.index(idx), flat);
        }
    });
    Ok(())
}

/// Interior-vector length for a grid (the residual/Jacobian dimension).
pub fn interior_len(u: &GridField) -> Result<usize> {
    Ok(Interior::new(u.axes())?.len)
}

/// Add `step * values` (interior ordering) to the field's interior nodes.
pub fn add_to_interior(u: &mut GridField, values: &[f64], step: f64) -> Result<()> {
    let interior = Interior::new(u.axes())?;
    if values.len() != interior.len {
        return Err(CmcError::Shape(format!(
            "interior vector has length {}, grid needs {}",
            values.len(),
            interior.len
        )));
    }
    add_interior(u, &interior, values, step);
    Ok(())
}

fn add_interior(u: &mut GridField, interior: &Interior, delta: &[f64], step: f64) {
    let axes = u.axes().to_vec();
    let probe = GridField::zeros(axes).expect("axes already validated");
    let mut updates = Vec::with_capacity(delta.len());
    probe.for_each_node(|flat, idx| {
        if interior.is_interior(idx) {
            updates.push((flat, interior.index(idx)));
        }
    });
    for (flat, eq) in updates {
        u.values_mut()[flat] += step * delta[eq];
    }
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn solve_linear(
    n: usize,
    axes: &[Axis],
    interior: &Interior,
    triplets: Vec<(usize, usize, f64)>,
    rhs: &[f64],
    opts: &NewtonOptions,
) -> Result<Vec<f64>> {
    if n == 2 {
        // Equations are ordered x-fastest, so neighbors in t sit one
        // interior row away; the mixed stencil adds one more column.
        let half_band = axes[0].count - 1;
        let mut mat = Banded::zeros(interior.len, half_band, half_band);
        for (i, j, w) in triplets {
            mat.add_to(i, j, w)?;
        }
        let lu = mat.factor()?;
        let mut x = rhs.to_vec();
        lu.solve(&mut x)?;
        Ok(x)
    } else {
        let mat = Csr::from_triplets(interior.len, triplets)?;
        let ilu = Ilu0::factor(&mat)?;
        let (x, _) = bicgstab(&mat, rhs, &ilu, opts.linear_tol, opts.linear_max_iters)?;
        Ok(x)
    }
}

/// Dirichlet data on every face of the box grid `axes`, evaluated from an
/// expansion table. Bottom and lateral faces carry the truncation error of
/// the table at their heights; the top face (largest `t`) is farthest from
/// the expansion's anchor and is the least accurate — convergence reports
/// should state this and measure on the lower part of the domain.
pub fn boundary_from_expansion(
    table: &ExpansionTable<f64>,
    axes: &[Axis],
) -> Result<BoundarySpec> {
    let n = table.n();
    if axes.len() != n {
        return Err(CmcError::Shape(format!(
            "grid has {} axes but the table has n = {n}",
            axes.len()
        )));
    }
    if table.k() < 1 {
        return Err(CmcError::Shape(
            "boundary data needs a table solved at least through the linear term".to_string(),
        ));
    }
    if axes[n - 1].min <= 0.0 {
        return Err(CmcError::Domain(format!(
            "the grid must sit strictly above the boundary: t_min = {}",
            axes[n - 1].min
        )));
    }
    BoundarySpec::from_fn(axes, |coords| table.eval(&coords[..n - 1], coords[n - 1]))
}

/// Solve the Dirichlet problem on the grid described by `boundary`.
pub fn solve(
    data: &ProblemData,
    boundary: &BoundarySpec,
    init: &InitialIterate,
    opts: &NewtonOptions,
) -> Result<SolveOutcome> {
    let axes = boundary.axes().to_vec();
    let n = axes.len();
    if n != data.n() {
        return Err(CmcError::Shape(format!(
            "boundary grid has {n} axes but the problem has n = {}",
            data.n()
        )));
    }
    if n != 2 && n != 3 {
        return Err(CmcError::Domain(format!(
            "the grid solver supports n = 2 and n = 3, got n = {n}"
        )));
    }
    let t_axis = &axes[n - 1];
    if t_axis.min <= 0.0 {
        return Err(CmcError::Domain(format!(
            "the grid must sit strictly above the boundary: t_min = {}",
            t_axis.min
        )));
    }
    let interior = Interior::new(&axes)?;

    let mut u = match init {
        InitialIterate::Given(field) => {
            if field.axes() != axes.as_slice() {
                return Err(CmcError::Shape(
                    "initial field was built on a different grid".to_string(),
                ));
            }
            field.clone()
        }
        InitialIterate::FromTable(table) => GridField::from_fn(axes.clone(), |coords| {
            table.eval(&coords[..n - 1], coords[n - 1])
        })?,
        InitialIterate::BoundaryBlend => {
            let mut f = GridField::zeros(axes.clone())?;
            boundary.apply_to(&mut f)?;
            blend_interior(&mut f);
            f
        }
    };
    boundary.apply_to(&mut u)?;

    let mut history = Vec::new();
    let (mut f_vec, _) = assemble(data, &u, false)?;
    let mut res = sup(&f_vec);
    history.push(IterRecord { iter: 0, residual: res, step: 0.0 });

    for iter in 1..=opts.max_iters {
        if res <= opts.tol {
            return Ok(SolveOutcome { field: u, history });
        }
        let (_, triplets) = assemble(data, &u, true)?;
        let rhs: Vec<f64> = f_vec.iter().map(|v| -v).collect();
        let delta = solve_linear(n, &axes, &interior, triplets.expect("requested"), &rhs, opts)?;

        let mut step = 1.0;
        loop {
            let mut trial = u.clone();
            add_interior(&mut trial, &interior, &delta, step);
            match assemble(data, &trial, false) {
                Ok((f_trial, _)) => {
                    let res_trial = sup(&f_trial);
                    if res_trial <= (1.0 - opts.armijo * step) * res {
                        u = trial;
                        f_vec = f_trial;
                        res = res_trial;
                        history.push(IterRecord { iter, residual: res, step });
                        break;
                    }
                }
                // A trial step may leave the operator's domain (e.g. |H|
                // reaching 1 on a wild iterate); treat it as a rejected step.
                Err(CmcError::Domain(_)) => {}
                Err(e) => return Err(e),
            }
            step *= opts.shrink;
            if step < opts.min_step {
                return Err(CmcError::NonConvergence(Box::new(NonConvergence {
                    message: format!(
                        "line search stalled at Newton iteration {iter} \
                         (residual {res:.3e}, step floor {:.1e})",
                        opts.min_step
                    ),
                    history,
                    last_iterate: u.values().to_vec(),
                })));
            }
        }
    }
    if res <= opts.tol {
        return Ok(SolveOutcome { field: u, history });
    }
    Err(CmcError::NonConvergence(Box::new(NonConvergence {
        message: format!(
            "Newton did not reach residual {:.1e} in {} iterations (final residual {res:.3e})",
            opts.tol, opts.max_iters
        ),
        history,
        last_iterate: u.values().to_vec(),
    })))
}

/// Fill the interior by interpolating linearly in `t` between the bottom
/// and top faces (which must already hold boundary data).
fn blend_interior(f: &mut GridField) {
    let n = f.n();
    let t_axis = f.t_axis().clone();
    let last = t_axis.count - 1;
    let span = t_axis.max - t_axis.min;
    let probe = f.clone();
    let mut updates = Vec::new();
    probe.for_each_node(|flat, idx| {
        let it = idx[n - 1];
        if it == 0 || it == last {
            return;
        }
        let mut bottom = idx.to_vec();
        bottom[n - 1] = 0;
        let mut top = idx.to_vec();
        top[n - 1] = last;
        let theta = (t_axis.coord(it) - t_axis.min) / span;
        let v = (1.0 - theta) * probe.get(&bottom) + theta * probe.get(&top);
        updates.push((flat, v));
    });
    for (flat, v) in updates {
        f.values_mut()[flat] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{Branch, ExactSolution};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_axes(n: usize, x_lo: f64, x_hi: f64, t_lo: f64, t_hi: f64, count: usize) -> Vec<Axis> {
        let mut axes = vec![Axis::new(x_lo, x_hi, count).unwrap(); n - 1];
        axes.push(Axis::new(t_lo, t_hi, count).unwrap());
        axes
    }

    fn exact_boundary(sol: &ExactSolution, axes: &[Axis]) -> BoundarySpec {
        let n = axes.len();
        BoundarySpec::from_fn(axes, |coords| {
            Ok(sol.eval(&coords[..n - 1], coords[n - 1]).unwrap().u)
        })
        .unwrap()
    }

    fn sphere(n: usize) -> ExactSolution {
        ExactSolution::Sphere {
            center_x: vec![0.0; n - 1],
            center_y: -0.3,
            center_t: 0.3,
            radius: 1.0,
            branch: Branch::Upper,
        }
    }

    #[test]
    fn plane_needs_no_newton_steps() {
        let plane = ExactSolution::Plane { offset: 0.6, slope: vec![0.25], rise: 0.4 };
        let data = plane.problem_data(&[0.0]).unwrap();
        let axes = grid_axes(2, -0.5, 0.5, 0.1, 0.9, 17);
        let boundary = exact_boundary(&plane, &axes);
        let out =
            solve(&data, &boundary, &InitialIterate::BoundaryBlend, &NewtonOptions::default())
                .unwrap();
        // The blend of planar boundary data is the plane itself, and the
        // centered stencils are exact on affine functions.
        assert!(out.history.len() <= 2, "history: {:?}", out.history);
        let truth = GridField::from_fn(axes, |c| Ok(plane.eval(&c[..1], c[1]).unwrap().u)).unwrap();
        assert!(out.field.sub(&truth).unwrap().sup_norm() < 1e-11);
    }

    #[test]
    fn sphere_converges_at_second_order() {
        let sol = sphere(2);
        let data = sol.problem_data(&[0.0]).unwrap();
        let mut errors = Vec::new();
        for count in [17usize, 33] {
            let axes = grid_axes(2, -0.4, 0.4, 0.05, 0.75, count);
            // The whole grid keeps the graph condition comfortable.
            let boundary = exact_boundary(&sol, &axes);
            let out = solve(
                &data,
                &boundary,
                &InitialIterate::BoundaryBlend,
                &NewtonOptions::default(),
            )
            .unwrap();
            assert!(
                out.history.len() <= 9,
                "too many iterations: {}",
                out.history.len()
            );
            let truth = GridField::from_fn(axes, |c| Ok(sol.eval(&c[..1], c[1]).unwrap().u))
                .unwrap();
            errors.push(out.field.sub(&truth).unwrap().sup_norm());
        }
        assert!(errors[1] < 2e-3, "fine-grid error {}", errors[1]);
        let order = (errors[0] / errors[1]).log2();
        assert!(order > 1.7, "observed order {order} (errors {errors:?})");
    }

    #[test]
    fn sphere_3d_via_iterative_solver() {
        let sol = sphere(3);
        let data = sol.problem_data(&[0.0, 0.0]).unwrap();
        let axes = grid_axes(3, -0.3, 0.3, 0.1, 0.6, 11);
        let boundary = exact_boundary(&sol, &axes);
        let out =
            solve(&data, &boundary, &InitialIterate::BoundaryBlend, &NewtonOptions::default())
                .unwrap();
        let truth =
            GridField::from_fn(axes, |c| Ok(sol.eval(&c[..2], c[2]).unwrap().u)).unwrap();
        let err = out.field.sub(&truth).unwrap().sup_norm();
        assert!(err < 5e-3, "error {err}");
    }

    #[test]
    fn assembled_jacobian_matches_directional_difference() {
        let sol = sphere(2);
        let data = sol.problem_data(&[0.0]).unwrap();
        let axes = grid_axes(2, -0.4, 0.4, 0.05, 0.75, 33);
        // A smooth but non-solution iterate.
        let u = GridField::from_fn(axes.clone(), |c| {
            Ok(sol.eval(&c[..1], c[1]).unwrap().u + 0.05 * (3.0 * c[0]).sin() * c[1])
        })
        .unwrap();
        let interior = Interior::new(&axes).unwrap();
        // A smooth direction (bounded discrete derivatives) plus mild noise:
        // rough directions make the difference quotient itself ill-
        // conditioned without exercising any additional Jacobian entries.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let smooth = GridField::from_fn(axes.clone(), |c| {
            Ok((3.0 * c[0]).sin() * (2.0 * c[1]).cos())
        })
        .unwrap();
        let mut v = vec![0.0f64; interior.len];
        smooth.for_each_node(|flat, idx| {
            if interior.is_interior(idx) {
                v[interior.index(idx)] =
                    smooth.values()[flat] + 0.05 * rng.gen_range(-1.0..1.0);
            }
        });

        let analytic = jacobian_vector_product(&data, &u, &v).unwrap();
        let eps = 1e-6;
        let mut up = u.clone();
        add_interior(&mut up, &interior, &v, eps);
        let mut dn = u.clone();
        add_interior(&mut dn, &interior, &v, -eps);
        let fp = residual_vector(&data, &up).unwrap();
        let fm = residual_vector(&data, &dn).unwrap();
        let scale = analytic.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        let mut worst = 0.0f64;
        for i in 0..interior.len {
            let fd = (fp[i] - fm[i]) / (2.0 * eps);
            worst = worst.max((analytic[i] - fd).abs());
        }
        assert!(worst < 1e-6 * scale, "largest deviation {worst:.3e} at scale {scale:.3e}");
    }

    #[test]
    fn expansion_table_seeds_the_iteration() {
        let sol = sphere(2);
        let data = sol.problem_data(&[0.0]).unwrap();
        let table = crate::expansion::solve_local(&data, 7).unwrap();
        let axes = grid_axes(2, -0.2, 0.2, 0.05, 0.3, 17);
        let boundary = exact_boundary(&sol, &axes);
        let out = solve(
            &data,
            &boundary,
            &InitialIterate::FromTable(table),
            &NewtonOptions::default(),
        )
        .unwrap();
        let truth =
            GridField::from_fn(axes, |c| Ok(sol.eval(&c[..1], c[1]).unwrap().u)).unwrap();
        assert!(out.field.sub(&truth).unwrap().sup_norm() < 1e-3);
    }

    #[test]
    fn expansion_boundary_data_matches_the_table() {
        // A plane table reproduces the plane on every face.
        let plane = ExactSolution::Plane { offset: 0.6, slope: vec![0.25], rise: 0.4 };
        let pdata = plane.problem_data(&[0.0]).unwrap();
        let ptable = crate::expansion::solve_local(&pdata, 7).unwrap();
        let axes = grid_axes(2, -0.5, 0.5, 0.1, 0.9, 9);
        let spec = boundary_from_expansion(&ptable, &axes).unwrap();
        let mut f = GridField::zeros(axes.clone()).unwrap();
        spec.apply_to(&mut f).unwrap();
        let probe = f.clone();
        let mut c = vec![0.0f64; 2];
        probe.for_each_node(|flat, idx| {
            if probe.is_boundary(idx) {
                probe.coords(idx, &mut c);
                let truth = plane.eval(&c[..1], c[1]).unwrap().u;
                assert!((f.values()[flat] - truth).abs() < 1e-12);
            }
        });

        // A k = 1 sphere table yields phi + c1 * delta on the bottom face,
        // which approximates the sphere to O(delta^2).
        let sol = sphere(2);
        let data = sol.problem_data(&[0.0]).unwrap();
        let table = crate::expansion::solve_local(&data, 7).unwrap().truncated(1);
        let delta = 0.05;
        let axes = grid_axes(2, -0.2, 0.2, delta, 0.3, 9);
        let spec = boundary_from_expansion(&table, &axes).unwrap();
        let mut g = GridField::zeros(axes.clone()).unwrap();
        spec.apply_to(&mut g).unwrap();
        let phi = table.coeff(0, 0).unwrap();
        let c1 = table.coeff(1, 0).unwrap();
        let probe = g.clone();
        probe.for_each_node(|flat, idx| {
            if idx[1] != 0 {
                return;
            }
            probe.coords(idx, &mut c);
            let off = [c[0] - table.base_point()[0]];
            let expect = phi.eval(&off).unwrap() + delta * c1.eval(&off).unwrap();
            assert!((g.values()[flat] - expect).abs() < 1e-12);
            let exact = sol.eval(&c[..1], delta).unwrap().u;
            assert!(
                (g.values()[flat] - exact).abs() < 3.0 * delta * delta,
                "linear data strays {} from the sphere at delta {delta}",
                (g.values()[flat] - exact).abs()
            );
        });

        // Rejections: truncations below the linear term, and grids that
        // touch t = 0.
        assert!(boundary_from_expansion(&table.truncated(0), &axes).is_err());
        assert!(
            boundary_from_expansion(&table, &grid_axes(2, -0.2, 0.2, 0.0, 0.3, 9)).is_err()
        );
    }

    #[test]
    fn nonconvergence_carries_history_and_iterate() {
        let sol = sphere(2);
        let data = sol.problem_data(&[0.0]).unwrap();
        let axes = grid_axes(2, -0.4, 0.4, 0.05, 0.75, 17);
        let boundary = exact_boundary(&sol, &axes);
        let opts = NewtonOptions { max_iters: 1, ..NewtonOptions::default() };
        let err = solve(&data, &boundary, &InitialIterate::BoundaryBlend, &opts).unwrap_err();
        match err {
            CmcError::NonConvergence(nc) => {
                assert!(!nc.history.is_empty());
                assert_eq!(nc.last_iterate.len(), 17 * 17);
                assert_eq!(err_len_check(&nc.history), nc.history.len());
            }
            other => panic!("expected a non-convergence report, got {other:?}"),
        }
    }

    fn err_len_check(h: &[IterRecord]) -> usize {
        // Residuals decrease monotonically under the accepted steps.
        for w in h.windows(2) {
            assert!(w[1].residual <= w[0].residual);
        }
        h.len()
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let sol = sphere(2);
        let data = sol.problem_data(&[0.0]).unwrap();
        let axes = grid_axes(2, -0.4, 0.4, 0.05, 0.75, 9);
        let boundary = exact_boundary(&sol, &axes);
        let other = GridField::zeros(grid_axes(2, -0.4, 0.4, 0.05, 0.75, 11)).unwrap();
        assert!(solve(
            &data,
            &boundary,
            &InitialIterate::Given(other),
            &NewtonOptions::default()
        )
        .is_err());
        // Grids touching t = 0 are rejected.
        let bad_axes = grid_axes(2, -0.4, 0.4, 0.0, 0.75, 9);
        let bad = BoundarySpec::from_fn(&bad_axes, |c| Ok(c[0])).unwrap();
        assert!(solve(&data, &bad, &InitialIterate::BoundaryBlend, &NewtonOptions::default())
            .is_err());
    }
}
