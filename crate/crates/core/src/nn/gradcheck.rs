use super::params::{Gradients, ParamId, ParamSet};

/// Largest disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `analytic` against `(f(p + h) - f(p - h)) / 2h` for every
/// trainable scalar.
pub fn check_gradients(
    params: &ParamSet<f64>,
    analytic: &Gradients<f64>,
    h: f64,
    floor: f64,
    mut f: impl FnMut(&ParamSet<f64>) -> f64,
) -> GradCheck {
    let mut work = params.clone();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<ParamId> = params.trainable().collect();
    for id in ids {
        let n = params.value(id).len();
        for j in 0..n {
            let orig = params.value(id).data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + h;
            let up = f(&work);
            work.get_mut(id).value.data_mut()[j] = orig - h;
            let down = f(&work);
            work.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[j]);
            let rel = rel_err(a, numeric, floor);
            out.max_abs_err = out.max_abs_err.max((a - numeric).abs());
            if rel > out.max_rel_err || out.worst.is_none() {
                out.max_rel_err = rel;
                out.worst = Some((params.get(id).name.clone(), j));
            }
            out.checked += 1;
        }
    }
    out
}
