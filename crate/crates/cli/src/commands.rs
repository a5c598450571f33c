//! The five subcommands. Each takes a validated [`Config`] plus an output
//! directory, writes its artifacts through the deterministic serializers in
//! `cmclab_core::io` / the CSV writer, and prints a short human summary.

use crate::config::{CGlobalMode, Config};
use cmclab_core::analyzer::{
    decay_svg, fit_exponent, fit_global_coefficient, gradient_levels, remainder_levels,
    DecayReport,
};
use cmclab_core::error::IterRecord;
use cmclab_core::exact::ExactSolution;
use cmclab_core::expansion::{residual_floor, verify_c31_exact, verify_c31_random_h};
use cmclab_core::expr::eval_jet;
use cmclab_core::io;
use cmclab_core::solver::{boundary_from_expansion, solve, InitialIterate};
use cmclab_core::verify::{verify_jacobian, verify_oracle, verify_parity};
use cmclab_core::{
    eval_real, solve_global, solve_local, CmcError, CoeffSource, ExpansionTable, GridField, Jet,
    ProblemData, Result,
};
use num_rational::BigRational;
use serde::Serialize;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

const TOP_FACE_NOTE: &str = "note: top-face boundary data comes from the truncated expansion \
and is approximate; judge accuracy on the lower half of the domain";

/// Assemble the PDE data from the config.
pub fn build_data(cfg: &Config) -> Result<ProblemData> {
    ProblemData::new(cfg.n, cfg.phi_expr()?, cfg.h_expr()?, cfg.base())
}

/// Continue a local table to order `k` with the given resonant coefficient.
fn continue_with(
    local: &ExpansionTable<f64>,
    data: &ProblemData,
    k: usize,
    jet: &Jet<f64>,
    source: CoeffSource,
) -> Result<ExpansionTable<f64>> {
    let with = local.with_c_global(jet, source)?;
    if k == data.n() + 1 {
        Ok(with)
    } else {
        solve_global(&with, data, k)
    }
}

/// Build the expansion table the config describes (everything except the
/// `fit` mode, which needs a numerical solve and lives in `cmd_analyze`).
pub fn expand_from_config(cfg: &Config, data: &ProblemData) -> Result<ExpansionTable<f64>> {
    let n = cfg.n;
    let m = cfg.jet_order;
    let k = cfg.expansion_order;
    let local = solve_local(data, m)?;
    match &cfg.c_global {
        CGlobalMode::Fit => Err(CmcError::Config(
            "c_global = \"fit\" needs a numerical solve; run the analyze command".to_string(),
        )),
        CGlobalMode::Zero => {
            if k < n + 1 {
                Ok(local.truncated(k))
            } else if k == n + 1 {
                Ok(local)
            } else {
                solve_global(&local, data, k)
            }
        }
        CGlobalMode::Expr(src) => {
            if k < n + 1 {
                return Err(CmcError::Config(format!(
                    "a c_global expression needs expansion_order >= {} (the resonant order), got {k}",
                    n + 1
                )));
            }
            let expr = cmclab_core::parse_expr(src)?;
            let jet = eval_jet(&expr, m - (n + 1), &cfg.base(), 0.0)?;
            continue_with(&local, data, k, &jet, CoeffSource::Supplied)
        }
    }
}

fn print_residual_and_resonance(table: &ExpansionTable<f64>, data: &ProblemData) -> Result<()> {
    let floor = match table.residual_order() {
        Some(f) => Some(f),
        None => residual_floor(table, data)?,
    };
    match floor {
        Some((i, j)) => {
            println!("residual order: t*Q(u_k) first survives at t^{i} (log t)^{j} [verified]")
        }
        None => println!(
            "residual order: t*Q(u_k) is annihilated through the full budget \
             (exactly polynomial solution)"
        ),
    }
    let n = table.n();
    match table.source(n + 1, 0) {
        Some(CoeffSource::DefaultZero) => println!(
            "resonance notice: the t^{} coefficient is free (local boundary data cannot \
             determine it); it was set to zero — use c_global to supply or fit it",
            n + 1
        ),
        Some(CoeffSource::Supplied) => {
            println!("resonance notice: the t^{} coefficient was supplied via c_global", n + 1)
        }
        Some(CoeffSource::Fitted) => println!(
            "resonance notice: the t^{} coefficient was fitted from a numerical solution",
            n + 1
        ),
        Some(CoeffSource::Solved) => println!(
            "resonance notice: the t^{} coefficient was solved by the recursion \
             (unexpected at the resonant order)",
            n + 1
        ),
        None => println!(
            "resonance notice: the table stops below the resonant order t^{}",
            n + 1
        ),
    }
    if let Some(log_slot) = table.coeff(n + 1, 1) {
        println!(
            "log term at t^{} log t: coefficient sup-norm {:.3e}",
            n + 1,
            log_slot.sup_norm()
        );
    }
    Ok(())
}

/// `expand`: compute the boundary expansion, write it as JSON, and report
/// the verified residual order plus the resonant-slot provenance.
pub fn cmd_expand(cfg: &Config, out: &Path) -> Result<()> {
    let data = build_data(cfg)?;
    let table = expand_from_config(cfg, &data)?;
    fs::create_dir_all(out)?;
    let path = out.join("expansion.json");
    io::write_json(&path, &table)?;
    print_residual_and_resonance(&table, &data)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct SolveMeta {
    iterations: usize,
    final_residual: f64,
    delta: f64,
    note: String,
}

fn write_jsonl(path: &Path, records: &[IterRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        writeln!(w, "{}", io::to_json_line(r)?)?;
    }
    Ok(())
}

fn write_solution(out: &Path, field: &GridField, history: &[IterRecord], delta: f64) -> Result<()> {
    write_jsonl(&out.join("convergence.jsonl"), history)?;
    let mut w = BufWriter::new(fs::File::create(out.join("solution.csv"))?);
    field.write_csv(&mut w)?;
    let meta = SolveMeta {
        iterations: history.len(),
        final_residual: history.last().map(|r| r.residual).unwrap_or(0.0),
        delta,
        note: TOP_FACE_NOTE.to_string(),
    };
    io::write_json(out.join("solve_meta.json"), &meta)?;
    Ok(())
}

fn run_solve(cfg: &Config, out: &Path, table: &ExpansionTable<f64>) -> Result<GridField> {
    let data = build_data(cfg)?;
    let boundary = boundary_from_expansion(table, &cfg.axes()?)?;
    let init = InitialIterate::FromTable(table.clone());
    match solve(&data, &boundary, &init, &cfg.newton_options()) {
        Ok(outcome) => {
            write_solution(out, &outcome.field, &outcome.history, cfg.domain.delta)?;
            println!(
                "newton converged in {} iterations; final residual {:.3e}",
                outcome.history.len(),
                outcome.history.last().map(|r| r.residual).unwrap_or(0.0)
            );
            println!("{TOP_FACE_NOTE}");
            Ok(outcome.field)
        }
        Err(CmcError::NonConvergence(nc)) => {
            // Leave the convergence log behind for post-mortems, then fail.
            write_jsonl(&out.join("convergence.jsonl"), &nc.history)?;
            Err(CmcError::NonConvergence(nc))
        }
        Err(e) => Err(e),
    }
}

/// `solve`: Dirichlet solve on the configured grid with boundary data taken
/// from the expansion; writes `solution.csv`, `convergence.jsonl`, and
/// `solve_meta.json`.
pub fn cmd_solve(cfg: &Config, out: &Path) -> Result<()> {
    let table = expand_from_config(cfg, &build_data(cfg)?)?;
    fs::create_dir_all(out)?;
    run_solve(cfg, out, &table)?;
    Ok(())
}

fn read_grid(path: &Path) -> Result<GridField> {
    let file = fs::File::open(path)
        .map_err(|e| CmcError::Config(format!("cannot read {}: {e}", path.display())))?;
    GridField::read_csv(BufReader::new(file))
}

fn approx(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn check_metadata(cfg: &Config, u: &GridField, table: &ExpansionTable<f64>) -> Result<()> {
    let mut problems = Vec::new();
    if u.n() != cfg.n {
        problems.push(format!("solution grid has n = {} but the config says {}", u.n(), cfg.n));
    }
    if table.n() != cfg.n {
        problems.push(format!("expansion has n = {} but the config says {}", table.n(), cfg.n));
    }
    if u.n() == cfg.n {
        if !approx(u.delta(), cfg.domain.delta) {
            problems.push(format!(
                "solution delta {} differs from the config's {}",
                u.delta(),
                cfg.domain.delta
            ));
        }
        if !approx(u.t_axis().max, cfg.domain.t_max) {
            problems.push(format!(
                "solution t_max {} differs from the config's {}",
                u.t_axis().max,
                cfg.domain.t_max
            ));
        }
        if !approx(u.axes()[0].max, cfg.domain.x_extent) {
            problems.push(format!(
                "solution x-extent {} differs from the config's {}",
                u.axes()[0].max,
                cfg.domain.x_extent
            ));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CmcError::Config(format!("metadata mismatch: {}", problems.join("; "))))
    }
}

/// Re-select the fit model with the config's log-detection threshold (the
/// library default is 0.75; both models are always carried in the report).
fn apply_log_threshold(report: &mut DecayReport, ratio: f64) {
    report.fit.log_factor = report.fit.rss_log <= ratio * report.fit.rss_plain;
    report.log_flag = report.fit.log_factor;
    report.fitted_exponent = report.fit.selected_exponent();
    report.stderr = report.fit.selected_stderr();
    report.model_residual = report.fit.selected_rss();
}

fn analyze_against(
    cfg: &Config,
    u: &GridField,
    table: &ExpansionTable<f64>,
) -> Result<DecayReport> {
    check_metadata(cfg, u, table)?;
    let k_trunc = cfg.expansion_order.min(table.k());
    let half_width = cfg.half_widths();
    let window = cfg.fit_window();
    let levels = remainder_levels(u, table, k_trunc, &half_width)?;
    let fit = fit_exponent(&levels, window)?;
    let mut report = DecayReport::new(k_trunc, half_width, window, levels, fit);
    apply_log_threshold(&mut report, cfg.fit.thresholds.log_rss_ratio);

    let glevels = gradient_levels(u, table)?;
    match fit_exponent(&glevels, window) {
        Ok(gfit) => report.gradient_fit = Some(gfit),
        Err(e) => println!("notice: gradient exponent not fitted ({e})"),
    }
    report.gradient_levels = Some(glevels);

    if table.k() >= cfg.n + 1 {
        match fit_global_coefficient(u, table, window) {
            Ok(gf) => report.global_fit = Some(gf),
            Err(e) => println!("notice: global coefficient not fitted ({e})"),
        }
    }
    Ok(report)
}

fn write_report(out: &Path, report: &DecayReport, plot: bool) -> Result<()> {
    io::write_json(out.join("decay.json"), report)?;
    if plot {
        let svg = decay_svg(&report.levels, &report.fit, "remainder decay");
        fs::write(out.join("decay.svg"), svg)?;
    }
    println!(
        "fitted exponent {:.4} (stderr {:.1e}, log factor: {})",
        report.fitted_exponent, report.stderr, report.log_flag
    );
    if let Some(gf) = &report.global_fit {
        println!(
            "global coefficient estimate {:.6e} (relative residual {:.2e})",
            gf.value, gf.rel_residual
        );
    }
    println!("wrote {}", out.join("decay.json").display());
    Ok(())
}

/// The `c_global = "fit"` workflow: expand with the resonant slot zero,
/// solve, fit the free coefficient from the solution, re-expand with it,
/// and analyze the solution against the refitted table.
fn analyze_fit_chain(cfg: &Config, out: &Path, plot: bool) -> Result<()> {
    let n = cfg.n;
    if cfg.expansion_order < n + 1 {
        return Err(CmcError::Config(format!(
            "c_global = \"fit\" needs expansion_order >= {} (the resonant order), got {}",
            n + 1,
            cfg.expansion_order
        )));
    }
    let data = build_data(cfg)?;
    let mut zero_cfg = cfg.clone();
    zero_cfg.c_global = CGlobalMode::Zero;
    let table0 = expand_from_config(&zero_cfg, &data)?;
    io::write_json(out.join("expansion.json"), &table0)?;

    let u = run_solve(cfg, out, &table0)?;
    let gf = fit_global_coefficient(&u, &table0, cfg.fit_window())?;
    println!(
        "fitted resonant coefficient {:.6e} (relative residual {:.2e})",
        gf.value, gf.rel_residual
    );

    let local = solve_local(&data, cfg.jet_order)?;
    let jet = Jet::constant(n - 1, cfg.jet_order - (n + 1), gf.value);
    let refit = continue_with(&local, &data, cfg.expansion_order, &jet, CoeffSource::Fitted)?;
    io::write_json(out.join("expansion_fitted.json"), &refit)?;
    println!("wrote {}", out.join("expansion_fitted.json").display());

    let mut report = analyze_against(cfg, &u, &refit)?;
    report.global_fit = Some(gf);
    write_report(out, &report, plot)
}

/// `analyze`: measure remainder decay of a solution against an expansion.
/// With `c_global = "fit"` the whole solve/fit/re-expand loop runs here.
pub fn cmd_analyze(
    cfg: &Config,
    out: &Path,
    solution: Option<PathBuf>,
    expansion: Option<PathBuf>,
    plot: bool,
) -> Result<()> {
    fs::create_dir_all(out)?;
    if cfg.c_global == CGlobalMode::Fit {
        return analyze_fit_chain(cfg, out, plot);
    }
    let sol_path = solution.unwrap_or_else(|| out.join("solution.csv"));
    let exp_path = expansion.unwrap_or_else(|| out.join("expansion.json"));
    let u = read_grid(&sol_path)?;
    let table: ExpansionTable<f64> = io::read_json(&exp_path)?;
    let report = analyze_against(cfg, &u, &table)?;
    write_report(out, &report, plot)
}

#[derive(Serialize)]
struct C31Suite {
    seed: u64,
    float_trials: usize,
    exact_trials: usize,
    normalized_tolerance: f64,
    float: cmclab_core::expansion::C31Report,
    exact: cmclab_core::expansion::C31ExactReport,
    pass: bool,
}

/// `verify`: run one named invariant suite, write its JSON verdict, and
/// fail (exit code 1) when the suite does not pass.
pub fn cmd_verify(cfg: &Config, suite: &str, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let seed = cfg.seed;
    let (path, pass) = match suite {
        "c31" => {
            let float = verify_c31_random_h(100, seed)?;
            let h = BigRational::new(3.into(), 5.into());
            let exact = verify_c31_exact(25, &h, seed)?;
            let tol = 1e-9;
            let pass = float.zero_asserted && float.max_abs_normalized <= tol && exact.all_zero;
            let report = C31Suite {
                seed,
                float_trials: float.trials,
                exact_trials: exact.trials,
                normalized_tolerance: tol,
                float,
                exact,
                pass,
            };
            let path = out.join("verify_c31.json");
            io::write_json(&path, &report)?;
            (path, pass)
        }
        "parity" => {
            let report = verify_parity(25, seed)?;
            let path = out.join("verify_parity.json");
            io::write_json(&path, &report)?;
            (path, report.pass)
        }
        "oracle" => {
            let report = verify_oracle()?;
            let path = out.join("verify_oracle.json");
            io::write_json(&path, &report)?;
            (path, report.pass)
        }
        "jacobian" => {
            let report = verify_jacobian(10, seed)?;
            let path = out.join("verify_jacobian.json");
            io::write_json(&path, &report)?;
            (path, report.pass)
        }
        other => {
            return Err(CmcError::Config(format!(
                "unknown verify suite '{other}'; expected one of c31, parity, oracle, jacobian"
            )))
        }
    };
    println!("suite {suite}: {}", if pass { "PASS" } else { "FAIL" });
    println!("wrote {}", path.display());
    if pass {
        Ok(())
    } else {
        Err(CmcError::Domain(format!(
            "verify suite '{suite}' failed; see {}",
            path.display()
        )))
    }
}

#[derive(Serialize)]
struct ExactMeta {
    kind: String,
    n: usize,
    /// Calibrated mean curvature of the solution (sign per the library's
    /// orientation convention).
    h: f64,
    /// Boundary trace as an expression in x1..x_{n-1}.
    trace: String,
}

/// `exact`: sample a closed-form solution onto the configured grid and emit
/// the field, its boundary trace, and calibration metadata.
pub fn cmd_exact(cfg: &Config, out: &Path) -> Result<()> {
    let Some(sol) = &cfg.exact else {
        return Err(CmcError::Config(
            "the exact command needs an `exact` block in the config".to_string(),
        ));
    };
    let h = sol.calibrate()?;
    let n = cfg.n;
    let axes = cfg.axes()?;
    let field = GridField::from_fn(axes.clone(), |c| Ok(sol.eval(&c[..n - 1], c[n - 1])?.u))
        .map_err(|e| {
            CmcError::Config(format!(
                "the grid extends outside the exact solution's domain ({e}); \
                 shrink x_extent or t_max"
            ))
        })?;
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(fs::File::create(out.join("exact.csv"))?);
    field.write_csv(&mut w)?;
    drop(w);

    let trace = sol.trace_expr();
    let mut tw = BufWriter::new(fs::File::create(out.join("exact_trace.csv"))?);
    let header: Vec<String> = (1..n).map(|a| format!("x{a}")).collect();
    writeln!(tw, "{},phi", header.join(","))?;
    let dim = n - 1;
    let counts: Vec<usize> = axes[..dim].iter().map(|a| a.count).collect();
    let mut idx = vec![0usize; dim];
    'rows: loop {
        let x: Vec<f64> = idx.iter().enumerate().map(|(a, &i)| axes[a].coord(i)).collect();
        let value = eval_real(&trace, &x, 0.0).map_err(|e| {
            CmcError::Config(format!(
                "the tangential box leaves the boundary trace's domain at x = {x:?} ({e}); \
                 shrink x_extent"
            ))
        })?;
        let mut row = String::new();
        for c in &x {
            row.push_str(&format!("{c:.16e},"));
        }
        writeln!(tw, "{row}{value:.16e}")?;
        let mut axis = 0;
        loop {
            if axis == dim {
                break 'rows;
            }
            idx[axis] += 1;
            if idx[axis] < counts[axis] {
                break;
            }
            idx[axis] = 0;
            axis += 1;
        }
    }
    drop(tw);

    let meta = ExactMeta {
        kind: match sol {
            ExactSolution::Plane { .. } => "plane".to_string(),
            ExactSolution::Sphere { .. } => "sphere".to_string(),
        },
        n,
        h,
        trace: trace.to_string(),
    };
    io::write_json(out.join("exact_meta.json"), &meta)?;
    println!("mean curvature H = {h:.16e}");
    println!("boundary trace: {trace}");
    println!("wrote {}, {}, {}",
        out.join("exact.csv").display(),
        out.join("exact_trace.csv").display(),
        out.join("exact_meta.json").display()
    );
    Ok(())
}
