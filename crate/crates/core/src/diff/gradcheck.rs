use std::io::Write;
use std::path::Path;

use super::params::{backward, evaluate, ParamVars, ParamVector};
use super::tape::{Tape, Var};
use crate::error::{invalid, Error, Result};

/// Worst-case agreement between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub max_rel_err: f64,
    pub argmax_slot: String,
    pub fd_step: f64,
    /// Per-slot maximum relative error, in slot order.
    pub per_slot: Vec<(String, f64)>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with the `max(|a|, |b|, 1e-8)` guarded denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let den = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / den
}

/// Compares [`backward`] against central differences on every element of
/// every slot.
pub fn grad_check<F>(op: &str, loss_fn: F, params: &ParamVector, fd_step: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    if !(fd_step > 0.0) {
        return Err(invalid(format!("fd_step must be positive, got {fd_step}")));
    }
    let (_, analytic) = backward(&loss_fn, params)?;
    let mut probe = params.clone();
    let mut per_slot = Vec::with_capacity(params.slots().len());
    let (mut worst, mut worst_slot) = (0.0f64, String::new());
    for slot in params.slots() {
        let mut slot_err = 0.0f64;
        for k in 0..slot.len {
            let i = slot.offset + k;
            let x0 = probe.data()[i];
            probe.data_mut()[i] = x0 + fd_step;
            let fp = evaluate(&loss_fn, &probe)?;
            probe.data_mut()[i] = x0 - fd_step;
            let fm = evaluate(&loss_fn, &probe)?;
            probe.data_mut()[i] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Diverged(format!("{op}: non-finite loss while probing `{}`[{k}]", slot.name)));
            }
            let numeric = (fp - fm) / (2.0 * fd_step);
            slot_err = slot_err.max(relative_error(analytic.data()[i], numeric));
        }
        if worst_slot.is_empty() || slot_err > worst {
            worst = slot_err;
            worst_slot = slot.name.clone();
        }
        per_slot.push((slot.name.clone(), slot_err));
    }
    Ok(GradReport { op: op.to_string(), max_rel_err: worst, argmax_slot: worst_slot, fd_step, per_slot })
}

/// Appends one `op,slot,err,step` row per slot, writing the header when the
/// file is new.
pub fn append_csv(path: &Path, reports: &[GradReport]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "op,slot,err,step")?;
    }
    for r in reports {
        for (slot, err) in &r.per_slot {
            writeln!(f, "{},{},{:e},{:e}", r.op, slot, err, r.fd_step)?;
        }
    }
    Ok(())
}
