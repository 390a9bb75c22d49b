use std::fmt::{self, Write as _};

use thiserror::Error;

use super::{transit_cost, EnvError, Variant, VariantKind};
use crate::instance::Instance;

/// Customers served by one vehicle, depot endpoints implicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tour {
    pub vehicle: usize,
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Solution {
    pub tours: Vec<Tour>,
}

impl Solution {
    pub fn from_sequences(seqs: Vec<Vec<usize>>) -> Self {
        Self {
            tours: seqs
                .into_iter()
                .enumerate()
                .map(|(vehicle, nodes)| Tour { vehicle, nodes })
                .collect(),
        }
    }

    /// Number of vehicles used.
    pub fn k(&self) -> usize {
        self.tours.iter().filter(|t| !t.nodes.is_empty()).count()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TourMetrics {
    pub vehicle: usize,
    pub customers: usize,
    pub distance: f64,
    /// Served demand in raw units.
    pub load: f64,
    /// Time from leaving the depot at `a_0` until returning.
    pub duration: f64,
    pub wait: f64,
    pub early_pen: f64,
    pub late_pen: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostBreakdown {
    pub distance: f64,
    pub duration: f64,
    pub wait: f64,
    /// Sum of raw early deviations.
    pub early: f64,
    /// Sum of raw late deviations.
    pub late: f64,
    /// Weighted early penalty `α Σ λ(δ_a)`.
    pub early_pen: f64,
    /// Weighted late penalty `β Σ λ(δ_b)`.
    pub late_pen: f64,
    pub total: f64,
    pub tours: Vec<TourMetrics>,
}

struct Visit {
    node: usize,
    arrival: f64,
    start: f64,
}

struct Simulated {
    visits: Vec<Visit>,
    metrics: TourMetrics,
    early: f64,
    late: f64,
}

fn simulate(inst: &Instance, variant: &Variant, tour: &Tour) -> Simulated {
    let has_time = variant.kind.has_time();
    let a0 = inst.horizon().0;
    let (mut t, mut pos) = (a0, 0usize);
    let mut m = TourMetrics {
        vehicle: tour.vehicle,
        customers: tour.nodes.len(),
        ..TourMetrics::default()
    };
    let (mut early, mut late, mut arcs) = (0.0, 0.0, 0.0);
    let mut visits = Vec::with_capacity(tour.nodes.len());
    for &i in &tour.nodes {
        let node = inst.node(i);
        let arc = transit_cost(inst, variant, pos, i);
        m.distance += inst.dist(pos, i);
        arcs += arc;
        m.load += node.demand;
        if has_time {
            let arrival = t + arc;
            let start = if variant.kind.waits() {
                arrival.max(node.tw_start)
            } else {
                arrival
            };
            let e = (node.tw_start - start).max(0.0);
            let l = (arrival - node.tw_end).max(0.0);
            m.wait += start - arrival;
            m.early_pen += variant.penalty.apply(e);
            m.late_pen += variant.penalty.apply(l);
            early += e;
            late += l;
            visits.push(Visit {
                node: i,
                arrival,
                start,
            });
            t = start;
        } else {
            visits.push(Visit {
                node: i,
                arrival: 0.0,
                start: 0.0,
            });
        }
        pos = i;
    }
    if !tour.nodes.is_empty() {
        let arc = transit_cost(inst, variant, pos, 0);
        m.distance += inst.dist(pos, 0);
        arcs += arc;
        if has_time {
            t += arc;
        }
    }
    m.duration = if has_time { t - a0 } else { m.distance };
    m.early_pen *= variant.alpha;
    m.late_pen *= variant.beta.unwrap_or(0.0);
    let wait = if variant.include_wait { m.wait } else { 0.0 };
    m.cost = arcs + wait + m.early_pen + m.late_pen;
    Simulated {
        visits,
        metrics: m,
        early,
        late,
    }
}

/// Evaluates the objective of a solution by simulating every tour from
/// `a_0`: arc costs (distance plus departure service time when windows are
/// modelled), waiting time when the variant counts it, and weighted window
/// deviations.
pub fn cost(
    inst: &Instance,
    solution: &Solution,
    variant: &Variant,
) -> Result<CostBreakdown, EnvError> {
    let n = inst.n_customers();
    let mut out = CostBreakdown::default();
    for (ti, tour) in solution.tours.iter().enumerate() {
        if let Some(&bad) = tour.nodes.iter().find(|&&i| i == 0 || i > n) {
            return Err(EnvError::InfeasibleSolution(format!(
                "tour {ti} visits invalid node {bad}"
            )));
        }
        let sim = simulate(inst, variant, tour);
        if variant.kind == VariantKind::Tw1 && sim.late > 0.0 {
            return Err(EnvError::InfeasibleSolution(format!(
                "tour {ti} arrives late under hard windows"
            )));
        }
        let m = sim.metrics;
        out.distance += m.distance;
        out.duration += m.duration;
        out.wait += m.wait;
        out.early += sim.early;
        out.late += sim.late;
        out.early_pen += m.early_pen;
        out.late_pen += m.late_pen;
        out.total += m.cost;
        out.tours.push(m);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// Node id outside `1..=N`.
    InvalidNode,
    EmptyTour,
    /// A customer is served more than once.
    Duplicate,
    /// A customer is never served.
    Missing,
    Capacity,
    /// Arrival after `b_i` under hard windows.
    LateArrival,
    /// The vehicle cannot get back to the depot by `b_0`.
    Horizon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Offending tour, if the violation is tied to one.
    pub tour: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tour {
            Some(t) => write!(f, "tour {t}: {:?}: {}", self.kind, self.detail),
            None => write!(f, "{:?}: {}", self.kind, self.detail),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

/// Checks that tours serve every customer exactly once, respect capacity,
/// return by the horizon and (for hard windows) never arrive late.
///
/// The horizon rule matches the environment mask: service at the last
/// customer must start early enough to drive back by `b_0`.
pub fn validate(inst: &Instance, solution: &Solution, variant: &Variant) -> ValidationReport {
    let n = inst.n_customers();
    let mut seen = vec![0usize; n + 1];
    let mut report = ValidationReport::default();
    let mut push =
        |kind, tour, detail: String| report.violations.push(Violation { kind, tour, detail });
    let b0 = inst.horizon().1;
    for (ti, tour) in solution.tours.iter().enumerate() {
        if tour.nodes.is_empty() {
            push(
                ViolationKind::EmptyTour,
                Some(ti),
                "tour serves no customer".into(),
            );
            continue;
        }
        if let Some(&bad) = tour.nodes.iter().find(|&&i| i == 0 || i > n) {
            push(
                ViolationKind::InvalidNode,
                Some(ti),
                format!("node {bad} is not a customer"),
            );
            continue;
        }
        for &i in &tour.nodes {
            seen[i] += 1;
        }
        let sim = simulate(inst, variant, tour);
        if sim.metrics.load > inst.capacity() * (1.0 + 1e-9) {
            push(
                ViolationKind::Capacity,
                Some(ti),
                format!(
                    "load {} exceeds capacity {}",
                    sim.metrics.load,
                    inst.capacity()
                ),
            );
        }
        if !variant.kind.has_time() {
            continue;
        }
        for v in &sim.visits {
            let node = inst.node(v.node);
            if variant.beta.is_none() && v.arrival > node.tw_end {
                push(
                    ViolationKind::LateArrival,
                    Some(ti),
                    format!(
                        "customer {} reached at {} after due {}",
                        v.node, v.arrival, node.tw_end
                    ),
                );
            }
            if v.start + inst.dist(v.node, 0) > b0 {
                push(
                    ViolationKind::Horizon,
                    Some(ti),
                    format!(
                        "customer {} served at {} cannot return by {b0}",
                        v.node, v.start
                    ),
                );
            }
        }
    }
    for (i, &c) in seen.iter().enumerate().skip(1) {
        match c {
            0 => push(
                ViolationKind::Missing,
                None,
                format!("customer {i} not served"),
            ),
            1 => {}
            c => push(
                ViolationKind::Duplicate,
                None,
                format!("customer {i} served {c} times"),
            ),
        }
    }
    report
}

#[derive(Debug, Error, PartialEq)]
pub enum SolutionError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Writes the `SOLFILE v1` format.
pub fn save_solution(solution: &Solution, cost: f64) -> String {
    let mut out = String::from("SOLFILE v1\n");
    let _ = writeln!(out, "COST {cost:?}");
    let _ = writeln!(out, "K {}", solution.k());
    for t in solution.tours.iter().filter(|t| !t.nodes.is_empty()) {
        let _ = write!(out, "TOUR {}:", t.vehicle);
        for i in &t.nodes {
            let _ = write!(out, " {i}");
        }
        out.push('\n');
    }
    out
}

/// Reads a `SOLFILE v1` document, returning the tours and the recorded cost.
pub fn load_solution(text: &str) -> Result<(Solution, f64), SolutionError> {
    let err = |line: usize, msg: String| SolutionError::Parse { line, msg };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, "SOLFILE v1")) => {}
        Some((ln, l)) => return Err(err(ln, format!("unsupported header `{l}`"))),
        None => return Err(err(0, "empty solution file".into())),
    }
    let mut field = |key: &str| -> Result<(usize, String), SolutionError> {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| err(0, format!("missing `{key}` line")))?;
        let v = l
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| err(ln, format!("expected `{key}` line")))?;
        Ok((ln, v.trim().to_string()))
    };
    let (ln, c) = field("COST")?;
    let cost: f64 = c
        .parse()
        .map_err(|_| err(ln, format!("cannot parse cost `{c}`")))?;
    let (ln, k) = field("K")?;
    let k: usize = k
        .parse()
        .map_err(|_| err(ln, format!("cannot parse K `{k}`")))?;
    let mut tours = Vec::with_capacity(k);
    for (ln, l) in lines {
        let rest = l
            .strip_prefix("TOUR ")
            .ok_or_else(|| err(ln, "expected `TOUR` line".into()))?;
        let (veh, nodes) = rest
            .split_once(':')
            .ok_or_else(|| err(ln, "missing `:`".into()))?;
        let vehicle = veh
            .trim()
            .parse()
            .map_err(|_| err(ln, format!("bad vehicle `{veh}`")))?;
        let nodes = nodes
            .split_whitespace()
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| err(ln, format!("bad node `{s}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        tours.push(Tour { vehicle, nodes });
    }
    if tours.len() != k {
        return Err(err(0, format!("K says {k} tours, found {}", tours.len())));
    }
    Ok((Solution { tours }, cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{Node, ProblemKind};

    fn inst(b1: f64) -> Instance {
        Instance::new(
            vec![
                Node {
                    id: 0,
                    x: 0.0,
                    y: 0.0,
                    demand: 0.0,
                    tw_start: 0.0,
                    tw_end: 1000.0,
                    service: 0.0,
                },
                Node {
                    id: 1,
                    x: 3.0,
                    y: 4.0,
                    demand: 6.0,
                    tw_start: 0.0,
                    tw_end: b1,
                    service: 10.0,
                },
                Node {
                    id: 2,
                    x: 0.0,
                    y: 4.0,
                    demand: 6.0,
                    tw_start: 0.0,
                    tw_end: 1000.0,
                    service: 10.0,
                },
            ],
            10.0,
            ProblemKind::Cvrptw,
            0,
        )
        .unwrap()
    }

    #[test]
    fn single_tour_cost() {
        let i = inst(1000.0);
        let sol = Solution::from_sequences(vec![vec![1]]);
        let c = cost(&i, &sol, &Variant::standard(VariantKind::Tw1)).unwrap();
        assert_eq!(c.total, 20.0);
        assert_eq!(c.distance, 10.0);
        assert_eq!(sol.k(), 1);
    }

    #[test]
    fn soft_late_penalty() {
        let i = inst(3.0);
        let sol = Solution::from_sequences(vec![vec![1]]);
        let c = cost(&i, &sol, &Variant::standard(VariantKind::Tw2)).unwrap();
        assert_eq!(c.total, 21.0);
        assert_eq!(c.late, 2.0);
        assert!(matches!(
            cost(&i, &sol, &Variant::standard(VariantKind::Tw1)),
            Err(EnvError::InfeasibleSolution(_))
        ));
    }

    #[test]
    fn empty_solution_costs_nothing() {
        let i = Instance::new(vec![*inst(1.0).depot()], 1.0, ProblemKind::Cvrptw, 0).unwrap();
        let c = cost(
            &i,
            &Solution::default(),
            &Variant::standard(VariantKind::Tw3),
        )
        .unwrap();
        assert_eq!(c.total, 0.0);
    }

    #[test]
    fn validator_flags_violations() {
        let i = inst(1000.0);
        let v = Variant::standard(VariantKind::Tw1);
        let ok = Solution::from_sequences(vec![vec![1], vec![2]]);
        assert!(validate(&i, &ok, &v).is_valid());
        let dup = Solution::from_sequences(vec![vec![1, 2], vec![2]]);
        let r = validate(&i, &dup, &v);
        assert_eq!(r.count(ViolationKind::Duplicate), 1);
        // 12 / 10 = 1.2 of capacity
        assert_eq!(r.count(ViolationKind::Capacity), 1);
        let missing = Solution::from_sequences(vec![vec![1]]);
        assert_eq!(validate(&i, &missing, &v).count(ViolationKind::Missing), 1);
        let bad = Solution::from_sequences(vec![vec![1, 7], vec![2]]);
        assert_eq!(validate(&i, &bad, &v).count(ViolationKind::InvalidNode), 1);
        let late = inst(3.0);
        let r = validate(&late, &ok, &v);
        assert_eq!(r.count(ViolationKind::LateArrival), 1);
        assert_eq!(r.violations[0].tour, Some(0));
        assert!(validate(&late, &ok, &Variant::standard(VariantKind::Tw2)).is_valid());
    }

    #[test]
    fn solution_file_round_trip() {
        let sol = Solution {
            tours: vec![
                Tour {
                    vehicle: 0,
                    nodes: vec![3, 1],
                },
                Tour {
                    vehicle: 2,
                    nodes: vec![2],
                },
            ],
        };
        let text = save_solution(&sol, 12.5);
        assert_eq!(text, "SOLFILE v1\nCOST 12.5\nK 2\nTOUR 0: 3 1\nTOUR 2: 2\n");
        assert_eq!(load_solution(&text).unwrap(), (sol, 12.5));
        assert!(load_solution("SOLFILE v1\nCOST 1\nK 2\nTOUR 0: 1\n").is_err());
        assert!(load_solution("SOLFILE v2\n").is_err());
    }
}
