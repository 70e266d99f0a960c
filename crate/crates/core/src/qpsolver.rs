//! Bitrate-neutral mapping from macroblock importance to integer ΔQP.
//!
//! Each macroblock's bits are modelled as doubling for every 3 QP removed, so
//! a ΔQP of `d` costs `2^(-d/3)` relative to the flat encode. Importance maps
//! linearly onto ΔQP with a fixed span and an offset chosen so that the
//! average multiplier over the grid is exactly one:
//!
//! ```text
//! dq(v; c) = clamp(c + span * (0.5 - v / 255), -clamp, +clamp)
//! mean_MB 2^(-dq(v_MB; c) / 3) = 1
//! ```
//!
//! The left-hand side is continuous and non-increasing in `c`, so the offset is
//! found by bisection. Saturated cells are clamped inside the equation.

use crate::error::{Error, Result};
use crate::gridmap::{round_half_away, MacroblockGrid};
use crate::{DQP_MAX, DQP_MIN};

pub type DeltaQpGrid = MacroblockGrid<i8>;

/// How the solved real-valued ΔQP map becomes integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rounding {
    /// Each cell independently, half away from zero.
    #[default]
    Nearest,
    /// Raster-order floor/ceil choice that carries the accumulated rate error
    /// forward, so the rounded grid stays bitrate-neutral even when many
    /// cells share the same fractional part (e.g. three-level maps).
    CarryRate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// ΔQP distance between importance 0 and importance 255 before clamping.
    pub span: f64,
    /// Symmetric ΔQP limit.
    pub clamp: f64,
    /// Accepted |ratio - 1| at convergence.
    pub tolerance: f64,
    pub search_lo: f64,
    pub search_hi: f64,
    pub max_iterations: usize,
    pub rounding: Rounding,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { span: 20.0, clamp: 10.0, tolerance: 1e-6, search_lo: -40.0, search_hi: 40.0, max_iterations: 200, rounding: Rounding::Nearest }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.span > 0.0 && self.span.is_finite()) {
            return Err(Error::InvalidConfig(format!("span must be positive, got {}", self.span)));
        }
        if !(self.clamp > 0.0 && self.clamp <= f64::from(DQP_MAX)) {
            return Err(Error::InvalidConfig(format!("clamp must be in (0, 10], got {}", self.clamp)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if !(self.search_lo < self.search_hi) {
            return Err(Error::InvalidConfig("empty offset search interval".into()));
        }
        Ok(())
    }

    /// Real-valued ΔQP of a cell with importance `v` under offset `c`.
    pub fn offset_for(&self, v: f64, c: f64) -> f64 {
        (c + self.span * (0.5 - v / 255.0)).clamp(-self.clamp, self.clamp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    /// Solved offset in QP units.
    pub offset: f64,
    /// Estimated bitrate ratio of the real-valued ΔQP map.
    pub real_ratio: f64,
    /// Estimated bitrate ratio after rounding to integers.
    pub rounded_ratio: f64,
    pub iterations: usize,
}

/// Bit multiplier for a macroblock coded `dqp` QP away from the base.
#[inline]
pub fn rate_weight(dqp: f64) -> f64 {
    (-dqp / 3.0).exp2()
}

/// Mean rate multiplier of an importance grid under offset `c`.
pub fn mean_rate(importance: &[f64], cfg: &SolverConfig, c: f64) -> f64 {
    importance.iter().map(|&v| rate_weight(cfg.offset_for(v, c))).sum::<f64>() / importance.len() as f64
}

pub fn estimate_ratio(grid: &DeltaQpGrid) -> f64 {
    grid.cells().iter().map(|&d| rate_weight(f64::from(d))).sum::<f64>() / grid.len() as f64
}

/// Solves for the neutral offset and returns the rounded ΔQP grid.
pub fn solve_dqp(importance: &MacroblockGrid<f64>, cfg: &SolverConfig) -> Result<(DeltaQpGrid, SolveReport)> {
    cfg.validate()?;
    let values = importance.cells();
    if values.is_empty() {
        return Err(Error::Empty("importance grid".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("importance grid".into()));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(Error::Domain(format!("importance {v} outside [0, 255]")));
    }

    let residual = |c: f64| mean_rate(values, cfg, c) - 1.0;
    let (mut lo, mut hi) = (cfg.search_lo, cfg.search_hi);
    let (r_lo, r_hi) = (residual(lo), residual(hi));
    if r_lo < 0.0 || r_hi > 0.0 {
        return Err(Error::NoBracket { lo, hi });
    }

    let mut iterations = 0;
    let mut offset = 0.5 * (lo + hi);
    let mut r = residual(offset);
    while r.abs() > cfg.tolerance && iterations < cfg.max_iterations {
        iterations += 1;
        if r > 0.0 {
            lo = offset;
        } else {
            hi = offset;
        }
        let mid = 0.5 * (lo + hi);
        if mid == offset {
            break;
        }
        offset = mid;
        r = residual(offset);
    }

    let to_i8 = |d: f64| d.clamp(f64::from(DQP_MIN), f64::from(DQP_MAX)) as i8;
    let dqp = match cfg.rounding {
        Rounding::Nearest => importance.map(|&v| to_i8(round_half_away(cfg.offset_for(v, offset)))),
        Rounding::CarryRate => {
            let (mut target, mut spent) = (0.0, 0.0);
            importance.map(|&v| {
                let d = cfg.offset_for(v, offset);
                target += rate_weight(d);
                let nearest = round_half_away(d);
                let other = if nearest == d.floor() { d.ceil() } else { d.floor() };
                let miss = |q: f64| (spent + rate_weight(q) - target).abs();
                let pick = if miss(other) < miss(nearest) { other } else { nearest };
                spent += rate_weight(pick);
                to_i8(pick)
            })
        }
    };
    let report = SolveReport { offset, real_ratio: r + 1.0, rounded_ratio: estimate_ratio(&dqp), iterations };
    Ok((dqp, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_weight_values() {
        assert_eq!(rate_weight(0.0), 1.0);
        assert_eq!(rate_weight(-3.0), 2.0);
        assert_eq!(rate_weight(6.0), 0.25);
    }

    #[test]
    fn uniform_grid_solves_to_zero() {
        let cfg = SolverConfig::default();
        for v in [0.0, 37.0, 128.0, 200.5, 255.0] {
            let grid = MacroblockGrid::filled(29, 50, v).unwrap();
            let (dqp, report) = solve_dqp(&grid, &cfg).unwrap();
            assert!(dqp.cells().iter().all(|&d| d == 0), "v={v}");
            assert_eq!(report.rounded_ratio, 1.0);
            assert!((report.offset - 20.0 * (v / 255.0 - 0.5)).abs() < 1e-5);
            assert!((report.real_ratio - 1.0).abs() <= cfg.tolerance);
        }
    }

    #[test]
    fn estimate_ratio_constants() {
        assert_eq!(estimate_ratio(&MacroblockGrid::filled(3, 3, 0).unwrap()), 1.0);
        assert_eq!(estimate_ratio(&MacroblockGrid::filled(3, 3, -3).unwrap()), 2.0);
        let two_level = MacroblockGrid::new(1, 2, vec![10, -3]).unwrap();
        let expected = 0.5 * (-10.0f64 / 3.0).exp2() + 0.5 * 2.0;
        assert!((estimate_ratio(&two_level) - expected).abs() < 1e-15);
        assert!((expected - 1.0496).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = SolverConfig::default();
        let nan = MacroblockGrid::new(1, 2, vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(solve_dqp(&nan, &cfg), Err(Error::NonFinite(_))));
        let wide = SolverConfig { span: 200.0, ..cfg };
        let half = MacroblockGrid::new(1, 2, vec![0.0, 255.0]).unwrap();
        assert!(matches!(solve_dqp(&half, &wide), Err(Error::NoBracket { .. })));
        let bad = SolverConfig { clamp: 11.0, ..cfg };
        assert!(matches!(solve_dqp(&half, &bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn offsets_monotone_in_importance() {
        let cfg = SolverConfig::default();
        for c in [-12.0, -1.5, 0.0, 3.3, 9.0] {
            let mut prev = f64::INFINITY;
            for v in 0..=255 {
                let d = cfg.offset_for(f64::from(v), c);
                assert!(d <= prev);
                prev = d;
            }
        }
    }

    #[test]
    fn carry_rate_fixes_correlated_rounding() {
        // Three levels whose real ΔQPs all sit near .5: per-cell rounding
        // drifts in one direction, carrying does not.
        let cells: Vec<f64> = (0..300).map(|i| [0.0, 127.0, 255.0][i % 3]).collect();
        let grid = MacroblockGrid::new(15, 20, cells).unwrap();
        let near = solve_dqp(&grid, &SolverConfig::default()).unwrap();
        let cfg = SolverConfig { rounding: Rounding::CarryRate, ..SolverConfig::default() };
        let (dqp, report) = solve_dqp(&grid, &cfg).unwrap();
        assert_eq!(report.offset, near.1.offset);
        assert!((report.rounded_ratio - 1.0).abs() <= (near.1.rounded_ratio - 1.0).abs());
        assert!((report.rounded_ratio - 1.0).abs() < 0.01);
        for (&d, &v) in dqp.cells().iter().zip(grid.cells()) {
            let real = cfg.offset_for(v, report.offset);
            assert!(f64::from(d) == real.floor() || f64::from(d) == real.ceil());
        }
    }
}
