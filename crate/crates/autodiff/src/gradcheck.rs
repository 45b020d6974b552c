//! Central finite-difference checks of analytic gradients.
//!
//! The checker only ever evaluates the loss; it never looks at how the
//! analytic gradient was produced.

use crate::{ParamId, ParamStore, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Perturbation size.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, abs_floor)`.
    pub abs_floor: f64,
    /// Check at most this many entries per tensor (evenly strided).
    pub max_per_tensor: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, tol: 1e-4, abs_floor: 1e-5, max_per_tensor: usize::MAX }
    }
}

/// One loss evaluation: value plus the kink signature of the pass.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub loss: f64,
    pub signature: u64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries whose `±h` evaluations straddled a ReLU or max-pool switch.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    /// `(tensor label, entry, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }

    fn record(&mut self, label: &str, idx: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            if err >= self.max_rel_err {
                self.worst = Some((label.to_string(), idx, analytic, numeric));
            }
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            self.worst = other.worst.or(self.worst.take());
        }
    }
}

fn strided(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let step = len as f64 / max as f64;
        (0..max).map(|i| (i as f64 * step) as usize).collect()
    }
}

/// Checks `analytic` against central differences of `f` around `x`.
pub fn check_vector<F>(label: &str, x: &[f64], analytic: &[f64], mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<Probe>,
{
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut report = GradCheckReport::default();
    let mut xp = x.to_vec();
    for i in strided(x.len(), opts.max_per_tensor) {
        xp[i] = x[i] + opts.h;
        let plus = f(&xp)?;
        xp[i] = x[i] - opts.h;
        let minus = f(&xp)?;
        xp[i] = x[i];
        if plus.signature != minus.signature {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * opts.h);
        report.record(label, i, analytic[i], numeric, opts.abs_floor);
    }
    Ok(report)
}

/// Checks every parameter tensor of `store`. `f` evaluates the loss at a
/// perturbed copy of the store.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    analytic: &[Vec<f64>],
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<Probe>,
{
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for id in store.ids() {
        let base = store.get(id).data().to_vec();
        let label = store.name(id).to_string();
        let sub = check_vector(
            &label,
            &base,
            &analytic[id.0],
            |xs| {
                work.get_mut(id).data_mut().copy_from_slice(xs);
                f(&work)
            },
            opts,
        )?;
        work.get_mut(id).data_mut().copy_from_slice(&base);
        report.merge(sub);
    }
    Ok(report)
}

/// Convenience: parameter id lookup that panics with the missing name.
pub fn param_id(store: &ParamStore<f64>, name: &str) -> ParamId {
    store.id(name).unwrap_or_else(|| panic!("no parameter named {name}"))
}
