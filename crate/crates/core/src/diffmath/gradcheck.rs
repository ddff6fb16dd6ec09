//! Central-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::array::Array;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is (numerically) zero are compared absolutely.
    pub denom_floor: f64,
    /// Check at most this many coordinates per parameter (chosen at random);
    /// `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            denom_floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| !(p.max_rel_error < self.tolerance))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic[p]` against central differences of `f` around
/// `params[p]` for every parameter `p`.
pub fn finite_diff_check<F>(
    mut f: F,
    names: &[String],
    params: &[Array],
    analytic: &[Array],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Array]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let len = params[p].len();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < len => {
                let mut c = sample(&mut rng, len, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let mut check = ParamCheck {
            name: names.get(p).cloned().unwrap_or_else(|| format!("param{p}")),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + cfg.step;
            let up = f(&work)?;
            work[p].data_mut()[i] = orig - cfg.step;
            let down = f(&work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[p].data()[i];
            let err = relative_error(a, numeric, cfg.denom_floor);
            if err > check.max_rel_error || err.is_nan() {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        checks.push(check);
    }
    let max_rel_error = checks
        .iter()
        .map(|c| c.max_rel_error)
        .fold(0.0, |m: f64, e| if e.is_nan() { f64::NAN } else { m.max(e) });
    Ok(GradCheckReport {
        passed: max_rel_error < cfg.tolerance,
        max_rel_error,
        tolerance: cfg.tolerance,
        params: checks,
    })
}
