//! Decay measurement: compare a solved grid field against an expansion
//! truncation, extract per-height sup norms, fit the decay exponent (with a
//! logarithmic-factor hypothesis test), and estimate the free `t^{n+1}`
//! coefficient from the data.

use crate::error::{CmcError, Result};
use crate::expansion::ExpansionTable;
use crate::grid::GridField;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Sup norm of a quantity over the tangential window, at one grid height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayLevel {
    pub t: f64,
    pub sup: f64,
}

/// How many of the coarsest (largest `t`) and finest (smallest `t`) levels
/// to exclude from fits: the coarse end is polluted by the next expansion
/// order, the fine end by discretization error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitWindow {
    pub drop_fine: usize,
    pub drop_coarse: usize,
}

impl Default for FitWindow {
    fn default() -> Self {
        FitWindow { drop_fine: 2, drop_coarse: 2 }
    }
}

/// Least-squares decay fit of `log(sup)` against `log t`, with and without
/// a fixed `log(1/t)` factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    /// Slope of the plain power-law model `sup ~ t^p`.
    pub exponent: f64,
    /// Standard error of the plain slope.
    pub stderr: f64,
    /// Slope of the augmented model `sup ~ t^p log(1/t)`.
    pub exponent_with_log: f64,
    pub stderr_with_log: f64,
    /// Whether the augmented model reduced the residual sum of squares by at
    /// least 25%.
    pub log_factor: bool,
    pub rss_plain: f64,
    pub rss_log: f64,
    pub levels_used: usize,
    /// Heights actually fitted, `[t_min, t_max]`.
    pub t_window: [f64; 2],
    /// Zero-norm levels inside the window, excluded from the fit.
    pub dropped_zero_levels: usize,
}

impl ExponentFit {
    /// The slope of whichever model the data selected.
    pub fn selected_exponent(&self) -> f64 {
        if self.log_factor {
            self.exponent_with_log
        } else {
            self.exponent
        }
    }

    /// Standard error of the selected model's slope.
    pub fn selected_stderr(&self) -> f64 {
        if self.log_factor {
            self.stderr_with_log
        } else {
            self.stderr
        }
    }

    /// Residual sum of squares of the selected model.
    pub fn selected_rss(&self) -> f64 {
        if self.log_factor {
            self.rss_log
        } else {
            self.rss_plain
        }
    }
}

fn line_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let m = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / m;
    let ym = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum();
    let dof = (xs.len().max(3) - 2) as f64;
    let stderr = (rss / dof / sxx).sqrt();
    (slope, stderr, rss)
}

/// Fit the decay exponent of per-height sup norms. All heights in the
/// window must satisfy `0 < t < 1` (the log-factor model needs
/// `log(1/t) > 0`). Zero-norm levels are dropped (and counted in the
/// result); at least five positive levels must remain.
pub fn fit_exponent(levels: &[DecayLevel], window: FitWindow) -> Result<ExponentFit> {
    if levels.len() <= window.drop_fine + window.drop_coarse {
        return Err(CmcError::Shape(format!(
            "{} levels is too few for a fit dropping {} + {}",
            levels.len(),
            window.drop_fine,
            window.drop_coarse
        )));
    }
    let mut sorted: Vec<DecayLevel> = levels.to_vec();
    sorted.sort_by(|a, b| a.t.total_cmp(&b.t));
    let windowed = &sorted[window.drop_fine..sorted.len() - window.drop_coarse];
    let mut dropped_zero_levels = 0usize;
    let mut used: Vec<DecayLevel> = Vec::with_capacity(windowed.len());
    for level in windowed {
        if !(level.t > 0.0 && level.t < 1.0) {
            return Err(CmcError::Domain(format!(
                "decay fits need heights in (0, 1); got t = {}",
                level.t
            )));
        }
        if level.sup <= 0.0 {
            dropped_zero_levels += 1;
            continue;
        }
        used.push(*level);
    }
    if used.len() < 5 {
        return Err(CmcError::Shape(format!(
            "{} usable levels (after dropping {} with zero norm) is too few; \
             the fit needs at least 5",
            used.len(),
            dropped_zero_levels
        )));
    }
    let mut xs = Vec::with_capacity(used.len());
    let mut ys = Vec::with_capacity(used.len());
    let mut ys_log = Vec::with_capacity(used.len());
    for level in &used {
        xs.push(level.t.ln());
        ys.push(level.sup.ln());
        // Divide out the hypothesized log factor: log(1/t) = -log t > 0.
        ys_log.push(level.sup.ln() - (-level.t.ln()).ln());
    }
    let (exponent, stderr, rss_plain) = line_fit(&xs, &ys);
    let (exponent_with_log, stderr_with_log, rss_log) = line_fit(&xs, &ys_log);
    Ok(ExponentFit {
        exponent,
        stderr,
        exponent_with_log,
        stderr_with_log,
        log_factor: rss_log <= 0.75 * rss_plain,
        rss_plain,
        rss_log,
        levels_used: used.len(),
        t_window: [used[0].t, used[used.len() - 1].t],
        dropped_zero_levels,
    })
}

fn window_columns(
    u: &GridField,
    base: &[f64],
    half_width: &[f64],
) -> Result<(Vec<bool>, usize)> {
    let n = u.n();
    if half_width.len() != n - 1 || base.len() != n - 1 {
        return Err(CmcError::Shape(format!(
            "window and base need {} tangential entries",
            n - 1
        )));
    }
    // Mark tangential columns inside the box window, and locate the column
    // nearest the base point.
    let t_count = u.t_axis().count;
    let mut inside = vec![false; u.len() / t_count];
    let mut best = (f64::INFINITY, 0usize);
    let mut coords = vec![0.0f64; n];
    u.for_each_node(|_, idx| {
        if idx[n - 1] != 0 {
            return;
        }
        u.coords(idx, &mut coords);
        let col = u.tangential_flat(idx);
        let mut dist = 0.0f64;
        let mut ok = true;
        for a in 0..n - 1 {
            let d = (coords[a] - base[a]).abs();
            dist = dist.max(d);
            if d > half_width[a] + 1e-12 {
                ok = false;
            }
        }
        inside[col] = ok;
        if dist < best.0 {
            best = (dist, col);
        }
    });
    if !inside.iter().any(|&b| b) {
        return Err(CmcError::Domain(
            "the tangential window contains no grid columns".to_string(),
        ));
    }
    Ok((inside, best.1))
}

/// Reject windows that reach the lateral grid boundary: sup norms there mix
/// the measured decay with boundary-condition error.
fn assert_strictly_interior(u: &GridField, inside: &[bool]) -> Result<()> {
    let n = u.n();
    let mut violation = false;
    u.for_each_node(|_, idx| {
        if idx[n - 1] != 0 || !inside[u.tangential_flat(idx)] {
            return;
        }
        for a in 0..n - 1 {
            if idx[a] == 0 || idx[a] == u.axes()[a].count - 1 {
                violation = true;
            }
        }
    });
    if violation {
        return Err(CmcError::Domain(
            "the tangential window touches the lateral grid boundary; shrink it"
                .to_string(),
        ));
    }
    Ok(())
}

/// Per-height sup norm of `u - (expansion truncated to t^k_trunc)` over the
/// tangential box window `|x_a - base_a| <= half_width[a]`. The window must
/// stay strictly inside the lateral grid boundary.
pub fn remainder_levels(
    u: &GridField,
    table: &ExpansionTable<f64>,
    k_trunc: usize,
    half_width: &[f64],
) -> Result<Vec<DecayLevel>> {
    let n = u.n();
    if n != table.n() {
        return Err(CmcError::Shape(format!(
            "grid has n = {n} but the table has n = {}",
            table.n()
        )));
    }
    let reference = table.truncated(k_trunc);
    let (inside, _) = window_columns(u, table.base_point(), half_width)?;
    assert_strictly_interior(u, &inside)?;
    let t_axis = u.t_axis().clone();
    let mut sups = vec![0.0f64; t_axis.count];
    let mut coords = vec![0.0f64; n];
    let mut err = None;
    u.for_each_node(|flat, idx| {
        if err.is_some() || !inside[u.tangential_flat(idx)] {
            return;
        }
        u.coords(idx, &mut coords);
        match reference.eval(&coords[..n - 1], coords[n - 1]) {
            Ok(v) => {
                let d = (u.values()[flat] - v).abs();
                let it = idx[n - 1];
                sups[it] = sups[it].max(d);
            }
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(sups
        .into_iter()
        .enumerate()
        .map(|(it, sup)| DecayLevel { t: t_axis.coord(it), sup })
        .collect())
}

/// Gradient magnitude of `v = u - phi - c_1 t` along the grid column nearest
/// the table's base point, one value per interior height (centered stencils
/// need both neighbors).
pub fn gradient_levels(u: &GridField, table: &ExpansionTable<f64>) -> Result<Vec<DecayLevel>> {
    let n = u.n();
    if n != table.n() {
        return Err(CmcError::Shape(format!(
            "grid has n = {n} but the table has n = {}",
            table.n()
        )));
    }
    let linear = table.truncated(1);
    let mut v = u.clone();
    {
        let mut coords = vec![0.0f64; n];
        let mut err = None;
        u.for_each_node(|flat, idx| {
            if err.is_some() {
                return;
            }
            u.coords(idx, &mut coords);
            match linear.eval(&coords[..n - 1], coords[n - 1]) {
                Ok(w) => v.values_mut()[flat] -= w,
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    let (_, base_col) = window_columns(u, table.base_point(), &vec![f64::INFINITY; n - 1])?;
    // Reconstruct the multi-index of the base column at each height.
    let t_axis = u.t_axis().clone();
    let mut out = Vec::new();
    let mut base_idx: Option<Vec<usize>> = None;
    u.for_each_node(|_, idx| {
        if idx[n - 1] == 0 && u.tangential_flat(idx) == base_col && base_idx.is_none() {
            base_idx = Some(idx.to_vec());
        }
    });
    let base_idx = base_idx.expect("base column exists");
    if base_idx[..n - 1]
        .iter()
        .zip(u.axes())
        .any(|(&i, ax)| i == 0 || i == ax.count - 1)
    {
        return Err(CmcError::Domain(
            "the base column sits on the grid edge; gradients need interior neighbors"
                .to_string(),
        ));
    }
    for it in 1..t_axis.count - 1 {
        let mut idx = base_idx.clone();
        idx[n - 1] = it;
        let mut sq = 0.0f64;
        for a in 0..n {
            let h = u.axes()[a].spacing();
            let mut nb = idx.clone();
            nb[a] += 1;
            let up = v.get(&nb);
            nb[a] -= 2;
            let dn = v.get(&nb);
            sq += ((up - dn) / (2.0 * h)).powi(2);
        }
        out.push(DecayLevel { t: t_axis.coord(it), sup: sq.sqrt() });
    }
    Ok(out)
}

/// Least-squares estimate of the free `t^{n+1}` coefficient from grid data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalFit {
    /// Estimate at the column nearest the table's base point.
    pub value: f64,
    /// Estimate for every tangential column (grid column order).
    pub per_column: Vec<f64>,
    /// Remainder norm at the base column after subtracting the fitted term,
    /// relative to before.
    pub rel_residual: f64,
}

/// Fit `u - (table with its t^{n+1} slot zeroed)` against `t^{n+1}`
/// per tangential column, over the windowed heights.
pub fn fit_global_coefficient(
    u: &GridField,
    table: &ExpansionTable<f64>,
    window: FitWindow,
) -> Result<GlobalFit> {
    let n = u.n();
    if n != table.n() {
        return Err(CmcError::Shape(format!(
            "grid has n = {n} but the table has n = {}",
            table.n()
        )));
    }
    let reference = table.with_slot_zeroed(n + 1, 0);
    let t_axis = u.t_axis().clone();
    if t_axis.count <= window.drop_fine + window.drop_coarse + 2 {
        return Err(CmcError::Shape(format!(
            "{} heights is too few for a fit dropping {} + {}",
            t_axis.count, window.drop_fine, window.drop_coarse
        )));
    }
    let lo = window.drop_fine;
    let hi = t_axis.count - window.drop_coarse;
    let p = (n + 1) as i32;

    let t_count = t_axis.count;
    let cols = u.len() / t_count;
    let mut num = vec![0.0f64; cols];
    let mut den = vec![0.0f64; cols];
    let mut diffs: Vec<Vec<f64>> = vec![Vec::new(); cols];
    let mut coords = vec![0.0f64; n];
    let mut err = None;
    u.for_each_node(|flat, idx| {
        if err.is_some() {
            return;
        }
        let it = idx[n - 1];
        if it < lo || it >= hi {
            return;
        }
        u.coords(idx, &mut coords);
        let col = u.tangential_flat(idx);
        match reference.eval(&coords[..n - 1], coords[n - 1]) {
            Ok(v) => {
                let d = u.values()[flat] - v;
                let basis = coords[n - 1].powi(p);
                num[col] += d * basis;
                den[col] += basis * basis;
                diffs[col].push(d);
            }
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let per_column: Vec<f64> = num.iter().zip(&den).map(|(a, b)| a / b).collect();
    let (_, base_col) = window_columns(u, table.base_point(), &vec![f64::INFINITY; n - 1])?;
    let value = per_column[base_col];

    // Fit quality at the base column.
    let mut before = 0.0f64;
    let mut after = 0.0f64;
    let mut k = 0usize;
    for it in lo..hi {
        let t = t_axis.coord(it);
        let d = diffs[base_col][k];
        k += 1;
        before += d * d;
        let r = d - value * t.powi(p);
        after += r * r;
    }
    let rel_residual = if before > 0.0 { (after / before).sqrt() } else { 0.0 };
    Ok(GlobalFit { value, per_column, rel_residual })
}

/// Full decay summary (what the analysis driver serializes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    /// Truncation order the remainder was measured against.
    pub k_trunc: usize,
    pub half_width: Vec<f64>,
    /// How many fine/coarse levels the fit dropped.
    pub window: FitWindow,
    /// Per-height norms, sorted by t.
    pub levels: Vec<DecayLevel>,
    /// Slope of the selected model (log-augmented when `log_flag`).
    pub fitted_exponent: f64,
    /// Standard error of the selected slope.
    pub stderr: f64,
    pub log_flag: bool,
    /// Heights actually fitted, `[t_min, t_max]`.
    pub fit_window: [f64; 2],
    /// Residual sum of squares of the selected model.
    pub model_residual: f64,
    /// Both candidate models in full.
    pub fit: ExponentFit,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gradient_levels: Option<Vec<DecayLevel>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gradient_fit: Option<ExponentFit>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub global_fit: Option<GlobalFit>,
}

impl DecayReport {
    /// Assemble a report from measured levels and their fit; optional parts
    /// start empty.
    pub fn new(
        k_trunc: usize,
        half_width: Vec<f64>,
        window: FitWindow,
        mut levels: Vec<DecayLevel>,
        fit: ExponentFit,
    ) -> Self {
        levels.sort_by(|a, b| a.t.total_cmp(&b.t));
        DecayReport {
            k_trunc,
            half_width,
            window,
            fitted_exponent: fit.selected_exponent(),
            stderr: fit.selected_stderr(),
            log_flag: fit.log_factor,
            fit_window: fit.t_window,
            model_residual: fit.selected_rss(),
            levels,
            fit,
            gradient_levels: None,
            gradient_fit: None,
            global_fit: None,
        }
    }
}

/// Render a log-log scatter of decay levels with the fitted line, as a
/// self-contained SVG document.
pub fn decay_svg(levels: &[DecayLevel], fit: &ExponentFit, title: &str) -> String {
    let (w, h) = (640.0f64, 440.0f64);
    let margin = 60.0f64;
    let pts: Vec<(f64, f64)> = levels
        .iter()
        .filter(|l| l.t > 0.0 && l.sup > 0.0)
        .map(|l| (l.t.ln(), l.sup.ln()))
        .collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x0.is_finite() && y0.is_finite()) || x1 - x0 < 1e-12 {
        x0 = -1.0;
        x1 = 1.0;
        y0 = -1.0;
        y1 = 1.0;
    }
    let pad_y = 0.05 * (y1 - y0).max(1e-12);
    y0 -= pad_y;
    y1 += pad_y;
    let sx = |x: f64| margin + (x - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"14\">{}</text>",
        margin, title
    );
    // Axes.
    let _ = writeln!(
        s,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        margin,
        h - margin,
        w - margin,
        h - margin
    );
    let _ = writeln!(
        s,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        margin,
        margin,
        margin,
        h - margin
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\">log t</text>",
        w / 2.0 - 20.0,
        h - margin / 3.0
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" \
         transform=\"rotate(-90 14 {})\">log sup</text>",
        h / 2.0,
        h / 2.0
    );
    // Fitted line (plain model) through the mean point.
    if pts.len() >= 2 {
        let xm = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let ym = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let ya = ym + fit.exponent * (x0 - xm);
        let yb = ym + fit.exponent * (x1 - xm);
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#c33\" \
             stroke-width=\"1.5\"/>",
            sx(x0),
            sy(ya),
            sx(x1),
            sy(yb)
        );
    }
    for &(x, y) in &pts {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#236\"/>",
            sx(x),
            sy(y)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"44\" font-family=\"monospace\" font-size=\"12\">slope {:.4} \
         (stderr {:.1e}){}</text>",
        margin,
        fit.exponent,
        fit.stderr,
        if fit.log_factor { ", log factor detected" } else { "" }
    );
    let _ = writeln!(s, "</svg>");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{Branch, ExactSolution};
    use crate::expansion::solve_local;
    use crate::grid::{Axis, GridField};
    use approx::assert_abs_diff_eq;

    fn synth_levels(f: impl Fn(f64) -> f64) -> Vec<DecayLevel> {
        (1..40)
            .map(|i| {
                let t = 0.01 * i as f64;
                DecayLevel { t, sup: f(t) }
            })
            .collect()
    }

    #[test]
    fn recovers_a_pure_power_law() {
        let fit = fit_exponent(&synth_levels(|t| 2.0 * t.powf(3.5)), FitWindow::default())
            .unwrap();
        assert_abs_diff_eq!(fit.exponent, 3.5, epsilon = 1e-10);
        assert!(fit.stderr < 1e-10);
        assert!(!fit.log_factor);
        assert_eq!(fit.levels_used, 39 - 4);
        assert_eq!(fit.dropped_zero_levels, 0);
        assert_abs_diff_eq!(fit.t_window[0], 0.03, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.t_window[1], 0.37, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.selected_exponent(), 3.5, epsilon = 1e-10);
    }

    #[test]
    fn constant_levels_fit_exponent_zero() {
        let fit = fit_exponent(&synth_levels(|_| 0.7), FitWindow::default()).unwrap();
        assert_abs_diff_eq!(fit.exponent, 0.0, epsilon = 1e-12);
        assert!(!fit.log_factor);
    }

    #[test]
    fn scaling_the_norms_leaves_the_exponent_unchanged() {
        let levels = synth_levels(|t| t.powf(2.2) * (1.0 + 0.1 * (40.0 * t).sin()));
        let scaled: Vec<DecayLevel> = levels
            .iter()
            .map(|l| DecayLevel { t: l.t, sup: 73.5 * l.sup })
            .collect();
        let a = fit_exponent(&levels, FitWindow::default()).unwrap();
        let b = fit_exponent(&scaled, FitWindow::default()).unwrap();
        assert_abs_diff_eq!(a.exponent, b.exponent, epsilon = 1e-12);
        assert_abs_diff_eq!(a.exponent_with_log, b.exponent_with_log, epsilon = 1e-12);
    }

    #[test]
    fn zero_levels_are_dropped_and_counted() {
        let mut levels = synth_levels(|t| t * t);
        levels[10].sup = 0.0;
        levels[11].sup = 0.0;
        let fit = fit_exponent(&levels, FitWindow::default()).unwrap();
        assert_eq!(fit.dropped_zero_levels, 2);
        assert_eq!(fit.levels_used, 39 - 4 - 2);
        assert_abs_diff_eq!(fit.exponent, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn fewer_than_five_usable_levels_is_an_error() {
        let few: Vec<DecayLevel> = (1..=6)
            .map(|i| DecayLevel { t: 0.1 * i as f64, sup: if i <= 4 { 0.0 } else { 1.0 } })
            .collect();
        let err = fit_exponent(&few, FitWindow { drop_fine: 0, drop_coarse: 0 })
            .unwrap_err()
            .to_string();
        assert!(err.contains("at least 5"), "unexpected error: {err}");
    }

    #[test]
    fn detects_a_log_factor() {
        let fit = fit_exponent(
            &synth_levels(|t| t.powi(3) * (1.0 / t).ln()),
            FitWindow::default(),
        )
        .unwrap();
        assert!(fit.log_factor);
        assert_abs_diff_eq!(fit.exponent_with_log, 3.0, epsilon = 1e-10);
        // The plain slope is biased away from 3 by the log factor.
        assert!((fit.exponent - 3.0).abs() > 0.05);
        assert_abs_diff_eq!(fit.selected_exponent(), 3.0, epsilon = 1e-10);
    }

    #[test]
    fn rejects_heights_at_or_above_one() {
        let levels: Vec<DecayLevel> =
            (1..20).map(|i| DecayLevel { t: 0.1 * i as f64, sup: 1.0 }).collect();
        assert!(fit_exponent(&levels, FitWindow::default()).is_err());
    }

    fn plane_table() -> (ExpansionTable<f64>, crate::operator::ProblemData) {
        let plane = ExactSolution::Plane { offset: 0.6, slope: vec![0.25], rise: 0.4 };
        let data = plane.problem_data(&[0.0]).unwrap();
        (solve_local(&data, 7).unwrap(), data)
    }

    #[test]
    fn remainder_and_global_fit_recover_a_planted_term() {
        // u = (plane expansion) + 2 t^3: the remainder against the k=2
        // truncation is exactly 2 t^3, and the one-parameter fit recovers 2.
        let (table, _) = plane_table();
        let axes = vec![
            Axis::new(-0.3, 0.3, 21).unwrap(),
            Axis::new(0.05, 0.55, 41).unwrap(),
        ];
        let u = GridField::from_fn(axes, |c| {
            Ok(table.eval(&c[..1], c[1]).unwrap() + 2.0 * c[1].powi(3))
        })
        .unwrap();
        let levels = remainder_levels(&u, &table, 2, &[0.15]).unwrap();
        let fit = fit_exponent(&levels, FitWindow::default()).unwrap();
        assert_abs_diff_eq!(fit.exponent, 3.0, epsilon = 1e-6);
        assert!(!fit.log_factor);

        let gf = fit_global_coefficient(&u, &table, FitWindow::default()).unwrap();
        assert_abs_diff_eq!(gf.value, 2.0, epsilon = 1e-9);
        assert!(gf.rel_residual < 1e-9);
        assert_eq!(gf.per_column.len(), 21);
        for v in &gf.per_column {
            assert_abs_diff_eq!(*v, 2.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn windows_touching_the_lateral_boundary_are_rejected() {
        let (table, _) = plane_table();
        let axes = vec![
            Axis::new(-0.3, 0.3, 21).unwrap(),
            Axis::new(0.05, 0.55, 41).unwrap(),
        ];
        let u = GridField::from_fn(axes, |c| table.eval(&c[..1], c[1])).unwrap();
        let err = remainder_levels(&u, &table, 2, &[0.31]).unwrap_err().to_string();
        assert!(err.contains("lateral"), "unexpected error: {err}");
    }

    #[test]
    fn subtracting_the_fitted_term_raises_the_exponent() {
        // u = (plane expansion) + 2 t^3 + 0.5 t^4. Fit the t^3 coefficient
        // on the finest heights (where the t^4 tail is negligible), subtract
        // it, and the remainder exponent measured on coarser heights climbs
        // from ~3 to ~4.
        let (table, _) = plane_table();
        let axes = vec![
            Axis::new(-0.3, 0.3, 21).unwrap(),
            Axis::new(0.002, 0.322, 161).unwrap(),
        ];
        let u = GridField::from_fn(axes, |c| {
            Ok(table.eval(&c[..1], c[1]).unwrap()
                + 2.0 * c[1].powi(3)
                + 0.5 * c[1].powi(4))
        })
        .unwrap();
        let coarse = FitWindow { drop_fine: 49, drop_coarse: 0 };
        let before = fit_exponent(&remainder_levels(&u, &table, 2, &[0.15]).unwrap(), coarse)
            .unwrap();

        let gf = fit_global_coefficient(
            &u,
            &table,
            FitWindow { drop_fine: 0, drop_coarse: 156 },
        )
        .unwrap();
        assert_abs_diff_eq!(gf.value, 2.0, epsilon = 1e-2);
        let mut u2 = u.clone();
        let n = u.n();
        let mut coords = vec![0.0f64; n];
        u.for_each_node(|flat, idx| {
            u.coords(idx, &mut coords);
            let col = u.tangential_flat(idx);
            u2.values_mut()[flat] -= gf.per_column[col] * coords[n - 1].powi(3);
        });
        let after = fit_exponent(&remainder_levels(&u2, &table, 2, &[0.15]).unwrap(), coarse)
            .unwrap();
        assert!(
            after.selected_exponent() >= before.selected_exponent() + 0.8,
            "before {:.3}, after {:.3}",
            before.selected_exponent(),
            after.selected_exponent()
        );
    }

    #[test]
    fn gradient_levels_measure_the_linear_remainder() {
        // u = phi + c1 t + t^2 => v = t^2, |Dv| = 2t at every column.
        let (table, _) = plane_table();
        let axes = vec![
            Axis::new(-0.3, 0.3, 11).unwrap(),
            Axis::new(0.1, 0.6, 26).unwrap(),
        ];
        let u = GridField::from_fn(axes, |c| {
            Ok(table.truncated(1).eval(&c[..1], c[1]).unwrap() + c[1] * c[1])
        })
        .unwrap();
        let levels = gradient_levels(&u, &table).unwrap();
        assert_eq!(levels.len(), 24);
        for l in &levels {
            assert_abs_diff_eq!(l.sup, 2.0 * l.t, epsilon = 1e-9);
        }
        let fit = fit_exponent(&levels, FitWindow::default()).unwrap();
        assert_abs_diff_eq!(fit.exponent, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn real_remainder_from_a_sphere_solve_decays_at_the_resonant_order() {
        // End-to-end at desk scale: solve the Dirichlet problem for a
        // sphere, subtract the k = n truncation of the local expansion, and
        // check that the measured decay exponent is n + 1.
        let sol = ExactSolution::Sphere {
            center_x: vec![0.0],
            center_y: -0.3,
            center_t: 0.3,
            radius: 1.0,
            branch: Branch::Upper,
        };
        let data = sol.problem_data(&[0.0]).unwrap();
        let table = solve_local(&data, 8).unwrap();
        let axes = vec![
            Axis::new(-0.15, 0.15, 33).unwrap(),
            Axis::new(0.004, 0.324, 81).unwrap(),
        ];
        // Use the exact solution as the "solved" field: the solver tests
        // already establish grid convergence, and the exact field isolates
        // the decay measurement from discretization error. The fit window
        // keeps only small heights, where the t^4 tail of the remainder
        // does not yet bias the slope.
        let u = GridField::from_fn(axes, |c| Ok(sol.eval(&c[..1], c[1]).unwrap().u)).unwrap();
        let window = FitWindow { drop_fine: 0, drop_coarse: 66 };
        let levels = remainder_levels(&u, &table, 2, &[0.08]).unwrap();
        // A lower truncation has a pointwise larger remainder.
        let coarser = remainder_levels(&u, &table, 1, &[0.08]).unwrap();
        for (a, b) in coarser.iter().zip(&levels) {
            assert!(a.sup + 1e-11 >= b.sup, "k=1 level {} < k=2 level {}", a.sup, b.sup);
        }
        let fit = fit_exponent(&levels, window).unwrap();
        assert!(
            (fit.selected_exponent() - 3.0).abs() < 0.1,
            "exponent {:.4} (log factor: {})",
            fit.selected_exponent(),
            fit.log_factor
        );
        // And the fitted global coefficient matches the sphere's true t^3
        // jet constant term.
        let taylor = sol.taylor_at_boundary(&[0.0], 4, 3).unwrap();
        let truth = *taylor.coeff(3, 0).constant_term();
        let gf = fit_global_coefficient(&u, &table, window).unwrap();
        assert!(
            (gf.value - truth).abs() < 0.05 * truth.abs().max(1.0),
            "fitted {} vs true {}",
            gf.value,
            truth
        );
    }

    #[test]
    fn svg_is_well_formed() {
        let levels = synth_levels(|t| t.powi(3));
        let fit = fit_exponent(&levels, FitWindow::default()).unwrap();
        let svg = decay_svg(&levels, &fit, "decay");
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), levels.len());
    }
}
