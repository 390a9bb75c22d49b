//! Routing environment: construction state, feasibility masks, transitions,
//! objective and an independent solution validator.

mod solution;
mod state;

pub use solution::{
    cost, load_solution, save_solution, validate, CostBreakdown, Solution, SolutionError, Tour,
    TourMetrics, ValidationReport, Violation, ViolationKind,
};
pub use state::{EnvConfig, Mask, State, StepEvents, VehicleState};

use thiserror::Error;

use crate::instance::Instance;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("no feasible action while {unvisited} customers remain unvisited")]
    InfeasibleState { unvisited: usize },
    #[error("action (vehicle {vehicle}, node {node}) is not feasible")]
    InfeasibleAction { vehicle: usize, node: usize },
    #[error("construction already finished")]
    Finished,
    #[error("flat action index {index} out of range 0..{len}")]
    ActionOutOfRange { index: usize, len: usize },
    #[error("action slot {slot} holds no active vehicle")]
    EmptySlot { slot: usize },
    #[error("solution is infeasible under hard time windows: {0}")]
    InfeasibleSolution(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantKind {
    /// No time windows; capacity only.
    Cvrp,
    /// Hard windows, vehicles wait for `a_i` at no cost.
    Tw1,
    /// Soft upper bound, vehicles wait for `a_i`.
    Tw2,
    /// Soft upper and lower bounds, service starts on arrival.
    Tw3,
}

impl VariantKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Cvrp => "cvrp",
            VariantKind::Tw1 => "tw1",
            VariantKind::Tw2 => "tw2",
            VariantKind::Tw3 => "tw3",
        }
    }

    pub fn has_time(self) -> bool {
        self != VariantKind::Cvrp
    }

    /// Whether vehicles arriving early idle until the window opens.
    pub fn waits(self) -> bool {
        matches!(self, VariantKind::Tw1 | VariantKind::Tw2)
    }
}

impl std::str::FromStr for VariantKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "cvrp" => Ok(VariantKind::Cvrp),
            "tw1" => Ok(VariantKind::Tw1),
            "tw2" => Ok(VariantKind::Tw2),
            "tw3" => Ok(VariantKind::Tw3),
            _ => Err(format!("unknown variant `{s}` (expected cvrp|tw1|tw2|tw3)")),
        }
    }
}

/// Penalty shape `λ` applied to window deviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Penalty {
    Linear,
    Quadratic,
}

impl Penalty {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Penalty::Linear => x,
            Penalty::Quadratic => x * x,
        }
    }
}

/// Problem variant with its objective weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub kind: VariantKind,
    /// Weight of early deviations.
    pub alpha: f64,
    /// Weight of late deviations; `None` makes the upper bound hard.
    pub beta: Option<f64>,
    pub penalty: Penalty,
    /// Count idle time spent waiting for windows in the objective. On by
    /// default for TW1 only; TW2 vehicles wait for free.
    pub include_wait: bool,
}

impl Variant {
    pub fn new(
        kind: VariantKind,
        alpha: f64,
        beta: Option<f64>,
        penalty: Penalty,
    ) -> Result<Self, EnvError> {
        if !(alpha >= 0.0) || beta.is_some_and(|b| !(b >= 0.0) || !b.is_finite()) {
            return Err(EnvError::Config(
                "penalty weights must be finite and non-negative".into(),
            ));
        }
        match (kind, beta) {
            (VariantKind::Tw1, Some(_)) => {
                return Err(EnvError::Config(
                    "TW1 has a hard upper bound (beta = infinity)".into(),
                ))
            }
            (VariantKind::Tw2 | VariantKind::Tw3, None) => {
                return Err(EnvError::Config(
                    "soft-window variants need a finite beta".into(),
                ))
            }
            _ => {}
        }
        Ok(Self {
            kind,
            alpha,
            beta,
            penalty,
            include_wait: kind == VariantKind::Tw1,
        })
    }

    /// Default weights: TW1 (α=1, β=∞), TW2 (α=0, β=0.5), TW3 (α=0.1, β=0.5),
    /// linear penalties.
    pub fn standard(kind: VariantKind) -> Self {
        let (alpha, beta) = match kind {
            VariantKind::Cvrp => (0.0, None),
            VariantKind::Tw1 => (1.0, None),
            VariantKind::Tw2 => (0.0, Some(0.5)),
            VariantKind::Tw3 => (0.1, Some(0.5)),
        };
        Self::new(kind, alpha, beta, Penalty::Linear).expect("standard weights are valid")
    }

    pub fn with_wait_cost(mut self, include_wait: bool) -> Self {
        self.include_wait = include_wait && self.kind.has_time();
        self
    }

    /// Default premature-return budget: 3 without windows, 6 with.
    pub fn default_premature_budget(&self) -> usize {
        if self.kind.has_time() {
            6
        } else {
            3
        }
    }
}

/// Travel time from `i` to `j`: distance, plus the service duration of `i`
/// when windows are modelled.
pub fn transit_cost(inst: &Instance, variant: &Variant, i: usize, j: usize) -> f64 {
    let d = inst.dist(i, j);
    if variant.kind.has_time() {
        d + inst.node(i).service
    } else {
        d
    }
}

/// Decodes a flat action index into `(vehicle, node)`. Rows are laid out
/// slot-major: index `m` addresses slot `m / n_nodes` and node `m % n_nodes`.
pub fn phi(
    active_set: &[Option<usize>],
    m: usize,
    n_nodes: usize,
) -> Result<(usize, usize), EnvError> {
    let len = active_set.len() * n_nodes;
    if m >= len || n_nodes == 0 {
        return Err(EnvError::ActionOutOfRange { index: m, len });
    }
    let slot = m / n_nodes;
    let vehicle = active_set[slot].ok_or(EnvError::EmptySlot { slot })?;
    Ok((vehicle, m % n_nodes))
}

/// Inverse of [`phi`] on the slot level.
pub fn flat_index(slot: usize, node: usize, n_nodes: usize) -> usize {
    slot * n_nodes + node
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{Node, ProblemKind};

    fn line_instance() -> Instance {
        let depot = Node {
            id: 0,
            x: 0.0,
            y: 0.0,
            demand: 0.0,
            tw_start: 0.0,
            tw_end: 1000.0,
            service: 0.0,
        };
        let c = Node {
            id: 1,
            x: 3.0,
            y: 4.0,
            demand: 1.0,
            tw_start: 0.0,
            tw_end: 1000.0,
            service: 10.0,
        };
        Instance::new(vec![depot, c], 10.0, ProblemKind::Cvrptw, 0).unwrap()
    }

    #[test]
    fn transit_includes_departure_service() {
        let inst = line_instance();
        let tw = Variant::standard(VariantKind::Tw1);
        assert_eq!(transit_cost(&inst, &tw, 0, 1), 5.0);
        assert_eq!(transit_cost(&inst, &tw, 1, 0), 15.0);
        let cvrp = Variant::standard(VariantKind::Cvrp);
        assert_eq!(transit_cost(&inst, &cvrp, 0, 1), 5.0);
        assert_eq!(transit_cost(&inst, &cvrp, 1, 0), 5.0);
    }

    #[test]
    fn variant_defaults_and_checks() {
        let tw1 = Variant::standard(VariantKind::Tw1);
        assert_eq!((tw1.alpha, tw1.beta), (1.0, None));
        assert_eq!(Variant::standard(VariantKind::Tw2).beta, Some(0.5));
        assert_eq!(Variant::standard(VariantKind::Tw3).alpha, 0.1);
        assert!(Variant::new(VariantKind::Tw1, 1.0, Some(1.0), Penalty::Linear).is_err());
        assert!(Variant::new(VariantKind::Tw2, -1.0, Some(1.0), Penalty::Linear).is_err());
        assert_eq!(tw1.default_premature_budget(), 6);
        assert_eq!(
            Variant::standard(VariantKind::Cvrp).default_premature_budget(),
            3
        );
        assert_eq!(Penalty::Quadratic.apply(3.0), 9.0);
    }

    #[test]
    fn phi_decodes_slot_major() {
        let active = [Some(4), Some(7), None];
        assert_eq!(phi(&active, 0, 21).unwrap(), (4, 0));
        assert_eq!(phi(&active, 25, 21).unwrap(), (7, 4));
        assert_eq!(phi(&active, 45, 21), Err(EnvError::EmptySlot { slot: 2 }));
        assert!(matches!(
            phi(&active, 63, 21),
            Err(EnvError::ActionOutOfRange { .. })
        ));
    }

    #[test]
    fn phi_is_a_bijection() {
        for n_nodes in 1..=64 {
            for m_con in 1..=4 {
                let active: Vec<Option<usize>> = (0..m_con).map(Some).collect();
                let mut seen = std::collections::HashSet::new();
                for m in 0..m_con * n_nodes {
                    let (k, i) = phi(&active, m, n_nodes).unwrap();
                    assert_eq!(flat_index(k, i, n_nodes), m);
                    assert!(seen.insert((k, i)));
                }
            }
        }
    }
}
