//! JSON run configuration: schema, defaults, and validation.
//!
//! Validation is strict and front-loaded: unknown keys are rejected by the
//! schema, every expression must parse, and the mean-curvature field is
//! sampled on a lattice over the configured domain to confirm `|H| < 1`
//! before any command runs.

use cmclab_core::expr::eval_real;
use cmclab_core::solver::NewtonOptions;
use cmclab_core::{parse_expr, Axis, CmcError, ExactSolution, Expr, FitWindow, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How the free coefficient at the resonant order `t^{n+1}` is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum CGlobalMode {
    /// Leave it zero (the local default).
    Zero,
    /// Estimate it from a numerical solve (analyze chains the whole loop).
    Fit,
    /// Evaluate this expression of `x` at the base point.
    Expr(String),
}

impl Default for CGlobalMode {
    fn default() -> Self {
        CGlobalMode::Zero
    }
}

impl From<String> for CGlobalMode {
    fn from(s: String) -> Self {
        match s.as_str() {
            "zero" => CGlobalMode::Zero,
            "fit" => CGlobalMode::Fit,
            _ => CGlobalMode::Expr(s),
        }
    }
}

impl From<CGlobalMode> for String {
    fn from(m: CGlobalMode) -> String {
        match m {
            CGlobalMode::Zero => "zero".to_string(),
            CGlobalMode::Fit => "fit".to_string(),
            CGlobalMode::Expr(s) => s,
        }
    }
}

/// Continuous domain: tangential box `[-x_extent, x_extent]^{n-1}` and
/// heights `[delta, t_max]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub x_extent: f64,
    pub t_max: f64,
    pub delta: f64,
}

/// Grid resolution: the same node count on every axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nodes: usize,
}

/// Damped-Newton controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub damping_factor: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig { tol: 1e-10, max_iter: 25, damping_factor: 0.5 }
    }
}

/// Which decay levels the exponent fit uses.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub drop_fine: usize,
    pub drop_coarse: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { drop_fine: 2, drop_coarse: 2 }
    }
}

/// Model-selection thresholds for the exponent fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    /// Flag a log factor when the log-augmented model reduces the residual
    /// sum of squares to at most this fraction of the plain model's.
    pub log_rss_ratio: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig { log_rss_ratio: 0.75 }
    }
}

/// Decay-fit controls.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub window: WindowConfig,
    pub thresholds: ThresholdConfig,
    /// Tangential half-width of the remainder window around the base point
    /// (default: half the domain extent, keeping it strictly interior).
    pub half_width: Option<f64>,
}

/// One run's full configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Ambient graph dimension (the PDE lives on n variables: x', t).
    pub n: usize,
    /// Boundary trace expression in x1..x_{n-1}.
    pub phi: String,
    /// Mean-curvature expression in x1..x_{n-1} and t; must satisfy |H| < 1.
    #[serde(rename = "H")]
    pub h: String,
    /// Expansion base point (default: the origin).
    #[serde(default)]
    pub base_point: Option<Vec<f64>>,
    /// Tangential jet order carried through the recursion.
    pub jet_order: usize,
    /// Highest power of t in the emitted expansion.
    pub expansion_order: usize,
    #[serde(default)]
    pub c_global: CGlobalMode,
    pub domain: DomainConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub newton: NewtonConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub seed: u64,
    /// Exact reference solution (only the `exact` subcommand reads it).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<ExactSolution>,
}

impl Config {
    /// Read and parse a config file. I/O and syntax problems are reported
    /// as configuration errors (exit code 2), not runtime failures.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CmcError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CmcError::Config(format!("{}: {e}", path.display())))
    }

    pub fn base(&self) -> Vec<f64> {
        self.base_point.clone().unwrap_or_else(|| vec![0.0; self.n - 1])
    }

    pub fn phi_expr(&self) -> Result<Expr> {
        parse_expr(&self.phi)
            .map_err(|e| CmcError::Config(format!("phi does not parse: {e}")))
    }

    pub fn h_expr(&self) -> Result<Expr> {
        parse_expr(&self.h).map_err(|e| CmcError::Config(format!("H does not parse: {e}")))
    }

    /// The discrete grid: n-1 tangential axes plus the height axis.
    pub fn axes(&self) -> Result<Vec<Axis>> {
        let mut axes = Vec::with_capacity(self.n);
        for _ in 0..self.n - 1 {
            axes.push(Axis::new(-self.domain.x_extent, self.domain.x_extent, self.grid.nodes)?);
        }
        axes.push(Axis::new(self.domain.delta, self.domain.t_max, self.grid.nodes)?);
        Ok(axes)
    }

    pub fn newton_options(&self) -> NewtonOptions {
        NewtonOptions {
            max_iters: self.newton.max_iter,
            tol: self.newton.tol,
            shrink: self.newton.damping_factor,
            ..NewtonOptions::default()
        }
    }

    pub fn fit_window(&self) -> FitWindow {
        FitWindow {
            drop_fine: self.fit.window.drop_fine,
            drop_coarse: self.fit.window.drop_coarse,
        }
    }

    /// Per-axis tangential half-widths for remainder windows.
    pub fn half_widths(&self) -> Vec<f64> {
        let hw = self.fit.half_width.unwrap_or(0.5 * self.domain.x_extent);
        vec![hw; self.n - 1]
    }

    /// Structural and semantic validation; see the module docs.
    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if n < 2 {
            return Err(CmcError::Config(format!("n must be at least 2, got {n}")));
        }
        let dim = n - 1;
        if let Some(base) = &self.base_point {
            if base.len() != dim {
                return Err(CmcError::Config(format!(
                    "base_point has {} coordinates but n = {n} needs {dim}",
                    base.len()
                )));
            }
            for b in base {
                if !b.is_finite() || b.abs() > self.domain.x_extent {
                    return Err(CmcError::Config(format!(
                        "base_point coordinate {b} lies outside [-{0}, {0}]",
                        self.domain.x_extent
                    )));
                }
            }
        }
        let need = (n + 3).max(self.expansion_order + 2);
        if self.jet_order < need {
            return Err(CmcError::Config(format!(
                "jet_order {} is too small: need max(n+3, expansion_order+2) = {need}",
                self.jet_order
            )));
        }
        let d = &self.domain;
        if !(d.x_extent.is_finite() && d.x_extent > 0.0) {
            return Err(CmcError::Config(format!("x_extent must be positive, got {}", d.x_extent)));
        }
        if !(d.delta > 0.0 && d.delta < d.t_max) {
            return Err(CmcError::Config(format!(
                "need 0 < delta < t_max, got delta = {}, t_max = {}",
                d.delta, d.t_max
            )));
        }
        if d.t_max >= 1.0 {
            return Err(CmcError::Config(format!(
                "t_max must stay below 1 (the boundary expansion's height range), got {}",
                d.t_max
            )));
        }
        if self.grid.nodes < 5 {
            return Err(CmcError::Config(format!(
                "grid.nodes must be at least 5, got {}",
                self.grid.nodes
            )));
        }
        let nw = &self.newton;
        if !(nw.tol > 0.0) || nw.max_iter == 0 || !(nw.damping_factor > 0.0 && nw.damping_factor < 1.0) {
            return Err(CmcError::Config(format!(
                "newton needs tol > 0, max_iter >= 1, damping_factor in (0, 1); got {nw:?}"
            )));
        }
        let ratio = self.fit.thresholds.log_rss_ratio;
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(CmcError::Config(format!(
                "fit.thresholds.log_rss_ratio must lie in (0, 1], got {ratio}"
            )));
        }
        if let Some(hw) = self.fit.half_width {
            if !(hw > 0.0 && hw < d.x_extent) {
                return Err(CmcError::Config(format!(
                    "fit.half_width must lie in (0, x_extent), got {hw}"
                )));
            }
        }
        if let CGlobalMode::Expr(src) = &self.c_global {
            parse_expr(src)
                .map_err(|e| CmcError::Config(format!("c_global does not parse: {e}")))?;
        }
        if let Some(exact) = &self.exact {
            if exact.n() != n {
                return Err(CmcError::Config(format!(
                    "exact solution has n = {} but the config says {n}",
                    exact.n()
                )));
            }
        }
        self.check_fields_on_lattice()
    }

    /// Sample phi (finiteness) and H (|H| < 1) on a 9-per-axis lattice over
    /// the configured domain, heights 0..t_max.
    fn check_fields_on_lattice(&self) -> Result<()> {
        let phi = self.phi_expr()?;
        let h = self.h_expr()?;
        let dim = self.n - 1;
        const SAMPLES: usize = 9;
        let mut idx = vec![0usize; dim];
        loop {
            let x: Vec<f64> = idx
                .iter()
                .map(|&i| {
                    self.domain.x_extent * (2.0 * i as f64 / (SAMPLES - 1) as f64 - 1.0)
                })
                .collect();
            let p = eval_real(&phi, &x, 0.0)
                .map_err(|e| CmcError::Config(format!("phi fails at x = {x:?}: {e}")))?;
            if !p.is_finite() {
                return Err(CmcError::Config(format!("phi is not finite at x = {x:?}")));
            }
            for it in 0..SAMPLES {
                let t = self.domain.t_max * it as f64 / (SAMPLES - 1) as f64;
                let v = eval_real(&h, &x, t)
                    .map_err(|e| CmcError::Config(format!("H fails at x = {x:?}, t = {t}: {e}")))?;
                if !v.is_finite() || v.abs() >= 1.0 {
                    return Err(CmcError::Config(format!(
                        "mean curvature must satisfy |H| < 1; H = {v} at x = {x:?}, t = {t}"
                    )));
                }
            }
            // odometer over the tangential lattice
            let mut axis = 0;
            loop {
                if axis == dim {
                    return Ok(());
                }
                idx[axis] += 1;
                if idx[axis] < SAMPLES {
                    break;
                }
                idx[axis] = 0;
                axis += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(n: usize) -> Config {
        Config {
            n,
            phi: "0.2*sin(x1)".to_string(),
            h: "0.3".to_string(),
            base_point: None,
            jet_order: 7,
            expansion_order: 4,
            c_global: CGlobalMode::Zero,
            domain: DomainConfig { x_extent: 0.4, t_max: 0.45, delta: 0.05 },
            grid: GridConfig { nodes: 33 },
            newton: NewtonConfig::default(),
            fit: FitConfig::default(),
            seed: 7,
            exact: None,
        }
    }

    #[test]
    fn a_sane_config_validates() {
        minimal(2).validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<Config>(
            r#"{"n":2,"phi":"0","H":"0","jet_order":6,"expansion_order":3,
                "domain":{"x_extent":0.4,"t_max":0.45,"delta":0.05},
                "grid":{"nodes":9},"bogus":1}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn supercritical_curvature_is_rejected() {
        let mut cfg = minimal(2);
        cfg.h = "1.5".to_string();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("|H| < 1"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn curvature_reaching_one_inside_the_domain_is_caught() {
        let mut cfg = minimal(2);
        cfg.h = "0.5 + 2*t".to_string();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn jet_budget_must_cover_the_expansion_order() {
        let mut cfg = minimal(2);
        cfg.jet_order = 5;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("jet_order"), "{err}");
    }

    #[test]
    fn c_global_strings_classify() {
        assert_eq!(CGlobalMode::from("zero".to_string()), CGlobalMode::Zero);
        assert_eq!(CGlobalMode::from("fit".to_string()), CGlobalMode::Fit);
        assert_eq!(
            CGlobalMode::from("0.1*x1".to_string()),
            CGlobalMode::Expr("0.1*x1".to_string())
        );
    }

    #[test]
    fn three_dimensional_configs_validate_too() {
        let mut cfg = minimal(3);
        cfg.phi = "0.2*sin(x1) + 0.1*x2".to_string();
        cfg.jet_order = 7;
        cfg.validate().unwrap();
        assert_eq!(cfg.axes().unwrap().len(), 3);
        assert_eq!(cfg.half_widths(), vec![0.2, 0.2]);
    }
}
