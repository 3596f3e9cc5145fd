//! Central finite-difference gradient checking.
//!
//! The check only ever evaluates the forward loss; it shares no code with
//! the reverse pass it audits.

use crate::nn::ParamStore;
use crate::tape::Gradients;

pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely; f64 round-off in a central
/// difference of an O(1) loss is around 1e-11.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `loss` for every
/// scalar of every parameter whose name passes `filter`. `stride` > 1 checks
/// every n-th coordinate only.
pub fn check(
    params: &ParamStore,
    analytic: &Gradients,
    filter: impl Fn(&str) -> bool,
    stride: usize,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradCheck {
    let mut probe = params.clone();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let names: Vec<String> = params.names().filter(|n| filter(n)).cloned().collect();
    for name in names {
        let base = params.get(&name).clone();
        let g = analytic.get_or_zeros(&name, &base);
        for i in (0..base.len()).step_by(stride.max(1)) {
            let orig = base.data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + FD_STEP;
            let up = loss(&probe);
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - FD_STEP;
            let down = loss(&probe);
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(g.data()[i], numeric);
            out.checked += 1;
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst = Some((name.clone(), i, g.data()[i], numeric));
            }
        }
    }
    out
}
