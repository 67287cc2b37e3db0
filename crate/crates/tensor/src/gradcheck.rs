//! Central finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{GradStore, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error per checked entry.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so vanishing gradients are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many entries per parameter (sampled with `seed`); `None` checks all.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error >= self.tolerance).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `loss` around `params`.
///
/// `loss` must be deterministic in its argument.
pub fn grad_check(
    params: &ParamStore,
    analytic: &GradStore,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        tolerance: cfg.tolerance,
        params: Vec::new(),
    };
    let names: Vec<String> = params.names().to_vec();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.len());
        let indices: Vec<usize> = match cfg.max_entries_per_param {
            Some(limit) if limit < n => {
                let mut v = sample(&mut rng, n, limit).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let grad = analytic.get(&name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut check = ParamCheck {
            name: name.clone(),
            checked: indices.len(),
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for idx in indices {
            let original = work.get(&name).expect("name from store").data()[idx];
            work.get_mut(&name).expect("name from store").data_mut()[idx] = original + cfg.step;
            let plus = loss(&work)?;
            work.get_mut(&name).expect("name from store").data_mut()[idx] = original - cfg.step;
            let minus = loss(&work)?;
            work.get_mut(&name).expect("name from store").data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(grad[idx], numeric, cfg.abs_floor);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = idx;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
