use super::graph::{Graph, NodeId};
use super::params::ParamSet;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Reverse-mode and central-difference values at the worst entry.
    pub worst_analytic: f64,
    pub worst_fd: f64,
    pub entries_checked: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries_per_param: None,
        }
    }
}

fn scalar_value(g: &Graph, root: NodeId) -> Result<f64> {
    let v = g.value(root);
    if v.len() != 1 {
        return Err(Error::dim("gradient check objective must be scalar"));
    }
    let x = v.data()[0];
    if !x.is_finite() {
        return Err(Error::NonFinite("gradient check objective".into()));
    }
    Ok(x)
}

/// Max over all checked entries of
/// `|analytic − fd| / max(|analytic|, |fd|, 1e-8)`.
///
/// `f` must build a deterministic scalar objective from the parameters it is
/// handed.
pub fn grad_check<F>(params: &ParamSet, opts: GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<(Graph, NodeId)>,
{
    if !(1e-6..=1e-4).contains(&opts.step) {
        return Err(Error::Config(format!(
            "finite-difference step {} outside [1e-6, 1e-4]",
            opts.step
        )));
    }
    let (graph, root) = f(params)?;
    scalar_value(&graph, root)?;
    let grads = graph.backward(root)?;
    let mut analytic = params.clone();
    analytic.zero_grads();
    analytic.accumulate(&grads);

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_fd: 0.0,
        entries_checked: 0,
    };
    let h = opts.step;
    for id in params.ids() {
        let n = params.get(id).value.len();
        let stride = match opts.max_entries_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let orig = params.get(id).value.data()[idx];
            work.get_mut(id).value.data_mut()[idx] = orig + h;
            let (gp, rp) = f(&work)?;
            let fp = scalar_value(&gp, rp)?;
            work.get_mut(id).value.data_mut()[idx] = orig - h;
            let (gm, rm) = f(&work)?;
            let fm = scalar_value(&gm, rm)?;
            work.get_mut(id).value.data_mut()[idx] = orig;

            let fd = (fp - fm) / (2.0 * h);
            let an = analytic.get(id).grad.data()[idx];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            report.entries_checked += 1;
            if report.entries_checked == 1 || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = params.get(id).name.clone();
                report.worst_index = idx;
                report.worst_analytic = an;
                report.worst_fd = fd;
            }
        }
    }
    Ok(report)
}
