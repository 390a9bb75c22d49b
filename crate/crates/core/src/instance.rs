//! Problem instances: data model, samplers and the `VRPFILE v1` text format.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng;

/// Upper time-window bound used for CVRP nodes, where windows are disabled.
pub const OPEN_WINDOW_END: f64 = (1u64 << 30) as f64;

#[derive(Debug, Error, PartialEq)]
pub enum InstanceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported file version `{0}`")]
    Version(String),
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("no default capacity for {0} customers; pass one explicitly")]
    NoCapacity(usize),
    #[error("expected {expected} customers, found {found}")]
    WrongSize { expected: usize, found: usize },
}

/// Which problem family an instance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProblemKind {
    Cvrp,
    Cvrptw,
}

impl ProblemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::Cvrp => "CVRP",
            ProblemKind::Cvrptw => "CVRPTW",
        }
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "CVRP" => Ok(ProblemKind::Cvrp),
            "CVRPTW" => Ok(ProblemKind::Cvrptw),
            other => Err(format!("unknown problem kind `{other}`")),
        }
    }
}

/// A depot or customer. All quantities are in raw (unnormalized) units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub demand: f64,
    pub tw_start: f64,
    pub tw_end: f64,
    pub service: f64,
}

/// An immutable routing problem. Node 0 is the depot; its window is the
/// planning horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    nodes: Vec<Node>,
    capacity: f64,
    kind: ProblemKind,
    seed: u64,
}

impl Instance {
    /// Builds an instance after checking the structural invariants. Node ids
    /// are reassigned to their positions.
    pub fn new(
        mut nodes: Vec<Node>,
        capacity: f64,
        kind: ProblemKind,
        seed: u64,
    ) -> Result<Self, InstanceError> {
        let invalid = |m: String| Err(InstanceError::Invalid(m));
        if nodes.is_empty() {
            return invalid("missing depot".into());
        }
        if !(capacity.is_finite() && capacity > 0.0) {
            return invalid(format!("capacity must be positive, got {capacity}"));
        }
        for (i, n) in nodes.iter_mut().enumerate() {
            n.id = i;
            let finite = [n.x, n.y, n.demand, n.tw_start, n.tw_end, n.service]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return invalid(format!("node {i} has a non-finite field"));
            }
            if n.tw_start > n.tw_end {
                return invalid(format!("node {i}: window start after end"));
            }
            if n.service < 0.0 {
                return invalid(format!("node {i}: negative service time"));
            }
            if i == 0 {
                if n.demand != 0.0 || n.service != 0.0 {
                    return invalid("depot must have zero demand and service".into());
                }
            } else if !(n.demand > 0.0) {
                return invalid(format!("customer {i}: demand must be positive"));
            } else if n.demand > capacity {
                return invalid(format!("customer {i}: demand exceeds capacity"));
            }
        }
        Ok(Self {
            nodes,
            capacity,
            kind,
            seed,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn depot(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn customers(&self) -> &[Node] {
        &self.nodes[1..]
    }

    /// Number of customers `N` (the depot is not counted).
    pub fn n_customers(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Planning horizon `[a_0, b_0]`.
    pub fn horizon(&self) -> (f64, f64) {
        (self.nodes[0].tw_start, self.nodes[0].tw_end)
    }

    /// Euclidean distance between two nodes.
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.nodes[i], &self.nodes[j]);
        (a.x - b.x).hypot(a.y - b.y)
    }

    /// Demand as a fraction of vehicle capacity.
    pub fn norm_demand(&self, i: usize) -> f64 {
        self.nodes[i].demand / self.capacity
    }

    pub fn total_demand(&self) -> f64 {
        self.customers().iter().map(|n| n.demand).sum()
    }

    /// A copy with every due date shifted by its service time (`b_i - h_i`),
    /// for data sets whose due dates bound service completion.
    pub fn with_due_dates_as_completion(&self) -> Result<Self, InstanceError> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| Node {
                tw_end: n.tw_end - n.service,
                ..*n
            })
            .collect();
        Instance::new(nodes, self.capacity, self.kind, self.seed)
    }
}

/// Parameters of the CVRP-TW sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    /// Depot due date `b_0`; the horizon starts at 0.
    pub horizon: f64,
    /// Service duration of every customer.
    pub service: f64,
    /// Overrides the size-based capacity table.
    pub capacity: Option<f64>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            horizon: 1000.0,
            service: 10.0,
            capacity: None,
        }
    }
}

/// Default CVRP-TW capacity per problem size.
pub fn cvrptw_capacity(n: usize) -> Option<f64> {
    match n {
        20 => Some(500.0),
        50 => Some(750.0),
        100 => Some(1000.0),
        _ => None,
    }
}

/// Default CVRP capacity per problem size.
pub fn cvrp_capacity(n: usize) -> Option<f64> {
    match n {
        20 => Some(30.0),
        50 => Some(40.0),
        _ => None,
    }
}

fn normal(rng: &mut rng::Stream) -> f64 {
    StandardNormal.sample(rng)
}

/// Samples a CVRP-TW instance modelled on the random, long-horizon Solomon
/// class: uniform locations in `[0,100]^2`, clamped folded-normal demands and
/// windows that are always reachable from the depot.
pub fn generate_cvrptw(n: usize, seed: u64, params: &GenParams) -> Result<Instance, InstanceError> {
    if n == 0 {
        return Err(InstanceError::Invalid("need at least one customer".into()));
    }
    let capacity = params
        .capacity
        .or_else(|| cvrptw_capacity(n))
        .ok_or(InstanceError::NoCapacity(n))?;
    let b0 = params.horizon;
    let mut rng = rng::stream(seed);
    let mut nodes = Vec::with_capacity(n + 1);
    let (dx, dy) = (rng.random_range(0.0..=100.0), rng.random_range(0.0..=100.0));
    nodes.push(Node {
        id: 0,
        x: dx,
        y: dy,
        demand: 0.0,
        tw_start: 0.0,
        tw_end: b0,
        service: 0.0,
    });
    for id in 1..=n {
        let x: f64 = rng.random_range(0.0..=100.0);
        let y: f64 = rng.random_range(0.0..=100.0);
        let demand = (15.0 + 10.0 * normal(&mut rng))
            .abs()
            .floor()
            .clamp(1.0, 42.0);
        let reach = (x - dx).hypot(y - dy).ceil() + 1.0;
        let (lo, hi) = (reach, b0 - reach);
        if lo > hi {
            return Err(InstanceError::Invalid(format!(
                "horizon {b0} too short for customer {id}"
            )));
        }
        let tw_start = rng.random_range(lo..=hi);
        let eps = normal(&mut rng).abs().max(0.01);
        let tw_end = (tw_start + 300.0 * eps).floor().min(hi);
        nodes.push(Node {
            id,
            x,
            y,
            demand,
            tw_start,
            tw_end,
            service: params.service,
        });
    }
    Instance::new(nodes, capacity, ProblemKind::Cvrptw, seed)
}

/// Samples a CVRP instance: uniform locations in the unit square and integer
/// demands in `1..=9`. Windows are disabled.
pub fn generate_cvrp(n: usize, seed: u64) -> Result<Instance, InstanceError> {
    let capacity = cvrp_capacity(n).ok_or(InstanceError::NoCapacity(n))?;
    generate_cvrp_with_capacity(n, seed, capacity)
}

pub fn generate_cvrp_with_capacity(
    n: usize,
    seed: u64,
    capacity: f64,
) -> Result<Instance, InstanceError> {
    let mut rng = rng::stream(seed);
    let open = |id, x, y, demand| Node {
        id,
        x,
        y,
        demand,
        tw_start: 0.0,
        tw_end: OPEN_WINDOW_END,
        service: 0.0,
    };
    let mut nodes = Vec::with_capacity(n + 1);
    nodes.push(open(
        0,
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
        0.0,
    ));
    for id in 1..=n {
        let x = rng.random_range(0.0..1.0);
        let y = rng.random_range(0.0..1.0);
        let q = rng.random_range(1..=9u32) as f64;
        nodes.push(open(id, x, y, q));
    }
    Instance::new(nodes, capacity, ProblemKind::Cvrp, seed)
}

/// Which half of a 100-customer instance to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Half {
    First,
    Second,
}

/// Splits a 100-customer instance into a 50-customer one: the depot plus
/// customers 1-50 or 51-100, renumbered from 1.
pub fn split_instance(inst: &Instance, half: Half) -> Result<Instance, InstanceError> {
    if inst.n_customers() != 100 {
        return Err(InstanceError::WrongSize {
            expected: 100,
            found: inst.n_customers(),
        });
    }
    let range = match half {
        Half::First => 1..=50,
        Half::Second => 51..=100,
    };
    let mut nodes = vec![*inst.depot()];
    nodes.extend(range.map(|i| *inst.node(i)));
    Instance::new(nodes, inst.capacity(), inst.kind(), inst.seed())
}

/// Serializes to the `VRPFILE v1` format. Reals use Rust's shortest
/// round-trip representation so `load_instance(save_instance(x)) == x`.
pub fn save_instance(inst: &Instance) -> String {
    let mut out = String::new();
    out.push_str("VRPFILE v1\n");
    let _ = writeln!(out, "N {}", inst.n_customers());
    let _ = writeln!(out, "Q {:?}", inst.capacity());
    let _ = writeln!(out, "VARIANT {}", inst.kind().as_str());
    let _ = writeln!(out, "SEED {}", inst.seed());
    for n in inst.nodes() {
        let _ = writeln!(
            out,
            "NODE {} {:?} {:?} {:?} {:?} {:?} {:?}",
            n.id, n.x, n.y, n.demand, n.tw_start, n.tw_end, n.service
        );
    }
    out
}

/// Reads the `VRPFILE v1` format written by [`save_instance`].
pub fn load_instance(text: &str) -> Result<Instance, InstanceError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut next = |what: &str| {
        lines
            .by_ref()
            .find(|(_, l)| !l.is_empty())
            .ok_or_else(|| InstanceError::Parse {
                line: 0,
                msg: format!("unexpected end of input, expected {what}"),
            })
    };
    let (_, header) = next("header")?;
    match header.strip_prefix("VRPFILE ") {
        Some("v1") => {}
        Some(v) => return Err(InstanceError::Version(v.to_string())),
        None => {
            return Err(InstanceError::Parse {
                line: 1,
                msg: "missing `VRPFILE` header".into(),
            })
        }
    }
    let n: usize = keyed(next("N")?, "N")?;
    let capacity: f64 = keyed(next("Q")?, "Q")?;
    let kind = {
        let (line, l) = next("VARIANT")?;
        let v = value_of(line, l, "VARIANT")?;
        v.parse::<ProblemKind>()
            .map_err(|msg| InstanceError::Parse { line, msg })?
    };
    let seed: u64 = keyed(next("SEED")?, "SEED")?;
    let mut nodes = Vec::with_capacity(n + 1);
    for expect in 0..=n {
        let (line, l) = next("NODE")?;
        let rest = value_of(line, l, "NODE")?;
        let f: Vec<&str> = rest.split_whitespace().collect();
        if f.len() != 7 {
            return Err(InstanceError::Parse {
                line,
                msg: format!("expected 7 node fields, found {}", f.len()),
            });
        }
        let id: usize = cell(line, f[0])?;
        if id != expect {
            return Err(InstanceError::Parse {
                line,
                msg: format!("expected node {expect}, found {id}"),
            });
        }
        nodes.push(Node {
            id,
            x: cell(line, f[1])?,
            y: cell(line, f[2])?,
            demand: cell(line, f[3])?,
            tw_start: cell(line, f[4])?,
            tw_end: cell(line, f[5])?,
            service: cell(line, f[6])?,
        });
    }
    if let Some((line, _)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(InstanceError::Parse {
            line,
            msg: "trailing content after last node".into(),
        });
    }
    Instance::new(nodes, capacity, kind, seed)
}

fn value_of<'a>(line: usize, l: &'a str, key: &str) -> Result<&'a str, InstanceError> {
    l.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .map(str::trim)
        .ok_or_else(|| InstanceError::Parse {
            line,
            msg: format!("expected `{key}` line"),
        })
}

fn keyed<T: std::str::FromStr>((line, l): (usize, &str), key: &str) -> Result<T, InstanceError> {
    cell(line, value_of(line, l, key)?)
}

pub(crate) fn cell<T: std::str::FromStr>(line: usize, s: &str) -> Result<T, InstanceError> {
    s.parse().map_err(|_| InstanceError::Parse {
        line,
        msg: format!("cannot parse `{s}`"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_tw_instance_shape() {
        let inst = generate_cvrptw(20, 3, &GenParams::default()).unwrap();
        assert_eq!(inst.capacity(), 500.0);
        assert_eq!(inst.horizon(), (0.0, 1000.0));
        assert!(inst.customers().iter().all(|c| c.service == 10.0));
        assert_eq!(
            generate_cvrptw(50, 3, &GenParams::default())
                .unwrap()
                .capacity(),
            750.0
        );
    }

    #[test]
    fn missing_capacity_is_rejected() {
        assert_eq!(
            generate_cvrptw(13, 0, &GenParams::default()),
            Err(InstanceError::NoCapacity(13))
        );
        let p = GenParams {
            capacity: Some(200.0),
            ..GenParams::default()
        };
        assert_eq!(generate_cvrptw(13, 0, &p).unwrap().capacity(), 200.0);
        assert!(generate_cvrp(7, 0).is_err());
    }

    #[test]
    fn cvrp_capacities_and_demands() {
        let a = generate_cvrp(20, 9).unwrap();
        assert_eq!(a.capacity(), 30.0);
        assert_eq!(generate_cvrp(50, 9).unwrap().capacity(), 40.0);
        for c in a.customers() {
            assert!((1.0..=9.0).contains(&c.demand) && c.demand.fract() == 0.0);
            assert!(a.norm_demand(c.id) <= 9.0 / 30.0);
            assert_eq!(
                (c.tw_start, c.tw_end, c.service),
                (0.0, OPEN_WINDOW_END, 0.0)
            );
            assert!((0.0..1.0).contains(&c.x) && (0.0..1.0).contains(&c.y));
        }
    }

    #[test]
    fn customer_on_depot_gets_unit_reach() {
        // ĥ = ceil(0) + 1 = 1, so the window start lies in [1, 999].
        let nodes = vec![
            Node {
                id: 0,
                x: 5.0,
                y: 5.0,
                demand: 0.0,
                tw_start: 0.0,
                tw_end: 1000.0,
                service: 0.0,
            },
            Node {
                id: 1,
                x: 5.0,
                y: 5.0,
                demand: 3.0,
                tw_start: 1.0,
                tw_end: 999.0,
                service: 10.0,
            },
        ];
        let inst = Instance::new(nodes, 10.0, ProblemKind::Cvrptw, 0).unwrap();
        let reach = inst.dist(0, 1).ceil() + 1.0;
        assert_eq!(reach, 1.0);
        for seed in 0..200 {
            let g = generate_cvrptw(20, seed, &GenParams::default()).unwrap();
            for c in g.customers() {
                let r = g.dist(0, c.id).ceil() + 1.0;
                assert!(c.tw_start >= r && c.tw_end <= 1000.0 - r, "seed {seed}");
                assert!(c.tw_start >= 1.0 && c.tw_start <= 999.0);
            }
        }
    }

    #[test]
    fn invalid_instances_rejected() {
        let depot = Node {
            id: 0,
            x: 0.0,
            y: 0.0,
            demand: 0.0,
            tw_start: 0.0,
            tw_end: 10.0,
            service: 0.0,
        };
        let c = Node {
            id: 1,
            x: 1.0,
            y: 0.0,
            demand: 2.0,
            tw_start: 5.0,
            tw_end: 4.0,
            service: 0.0,
        };
        assert!(Instance::new(vec![depot, c], 5.0, ProblemKind::Cvrptw, 0).is_err());
        let c = Node {
            tw_start: 0.0,
            demand: 6.0,
            ..c
        };
        assert!(Instance::new(vec![depot, c], 5.0, ProblemKind::Cvrptw, 0).is_err());
        let c = Node { demand: 0.0, ..c };
        assert!(Instance::new(vec![depot, c], 5.0, ProblemKind::Cvrptw, 0).is_err());
        assert!(Instance::new(vec![], 5.0, ProblemKind::Cvrptw, 0).is_err());
    }

    #[test]
    fn split_halves_partition_customers() {
        let p = GenParams::default();
        let full = generate_cvrptw(100, 5, &p).unwrap();
        let first = split_instance(&full, Half::First).unwrap();
        let second = split_instance(&full, Half::Second).unwrap();
        assert_eq!(first.n_customers(), 50);
        assert_eq!(first.depot(), full.depot());
        let same = |a: &Node, b: &Node| {
            (a.x, a.y, a.demand, a.tw_start, a.tw_end) == (b.x, b.y, b.demand, b.tw_start, b.tw_end)
        };
        assert!(same(first.node(1), full.node(1)));
        assert!(same(second.node(1), full.node(51)));
        let mut union: Vec<_> = first
            .customers()
            .iter()
            .chain(second.customers())
            .map(|c| (c.x, c.y))
            .collect();
        let mut orig: Vec<_> = full.customers().iter().map(|c| (c.x, c.y)).collect();
        union.sort_by(|a, b| a.partial_cmp(b).unwrap());
        orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(union, orig);
        let small = generate_cvrptw(20, 5, &p).unwrap();
        assert!(matches!(
            split_instance(&small, Half::First),
            Err(InstanceError::WrongSize { .. })
        ));
    }

    #[test]
    fn save_is_deterministic_and_loads_back() {
        let inst = generate_cvrptw(20, 11, &GenParams::default()).unwrap();
        let text = save_instance(&inst);
        assert_eq!(text, save_instance(&inst));
        assert!(text.starts_with("VRPFILE v1\nN 20\nQ 500.0\nVARIANT CVRPTW\n"));
        assert_eq!(load_instance(&text).unwrap(), inst);
    }

    #[test]
    fn truncated_or_wrong_version_fails() {
        let text = save_instance(&generate_cvrp(20, 1).unwrap());
        let cut = &text[..text.len() - 40];
        assert!(load_instance(cut).is_err());
        let v2 = text.replacen("v1", "v2", 1);
        assert_eq!(load_instance(&v2), Err(InstanceError::Version("v2".into())));
        let bad = text.replacen("Q 30.0", "Q thirty", 1);
        assert!(matches!(
            load_instance(&bad),
            Err(InstanceError::Parse { line: 3, .. })
        ));
    }
}
