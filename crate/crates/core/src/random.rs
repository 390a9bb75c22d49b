//! Uniform random construction baseline.
//!
//! Tours are built one at a time (a single active vehicle). At every step the
//! next action is drawn uniformly from the feasible entries of the mask, which
//! includes the depot while the premature-return budget lasts; once nothing
//! else is feasible the depot is the only choice.

use rand::Rng;

use crate::env::{CostBreakdown, EnvConfig, EnvError, Solution, State, Variant};
use crate::instance::Instance;
use crate::rng::Stream;

/// One random solution and its cost.
pub fn random_rollout(
    inst: &Instance,
    variant: &Variant,
    m_pre: usize,
    rng: &mut Stream,
) -> Result<(Solution, CostBreakdown), EnvError> {
    let mut state = State::reset(inst, *variant, EnvConfig::new(1, m_pre))?;
    let mut choices = Vec::with_capacity(inst.n_customers() + 1);
    while !state.is_finished() {
        let mask = state.feasible_mask()?;
        choices.clear();
        choices.extend(
            mask.row(0)
                .iter()
                .enumerate()
                .filter(|(_, &f)| f)
                .map(|(i, _)| i),
        );
        let k = state.active_set()[0].expect("single slot is always filled before finishing");
        let i = choices[rng.random_range(0..choices.len())];
        state.step(k, i)?;
    }
    Ok((state.solution(), state.accrued_cost()))
}

/// Best of `n` random solutions by total cost. Ties keep the earliest draw.
pub fn random_best_of(
    inst: &Instance,
    variant: &Variant,
    m_pre: usize,
    n: usize,
    rng: &mut Stream,
) -> Result<(Solution, CostBreakdown), EnvError> {
    let mut best: Option<(Solution, CostBreakdown)> = None;
    for _ in 0..n.max(1) {
        let cand = random_rollout(inst, variant, m_pre, rng)?;
        if best.as_ref().map_or(true, |b| cand.1.total < b.1.total) {
            best = Some(cand);
        }
    }
    Ok(best.expect("at least one rollout"))
}
