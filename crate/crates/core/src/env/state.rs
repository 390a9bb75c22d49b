use super::solution::{CostBreakdown, Solution, Tour};
use super::{transit_cost, EnvError, Variant};
use crate::instance::Instance;

/// Relative slack on capacity comparisons.
const CAP_EPS: f64 = 1e-9;

/// Fleet and action-space configuration of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvConfig {
    /// Number of concurrently active vehicles.
    pub m_con: usize,
    /// Budget of premature depot returns per episode.
    pub m_pre: usize,
    /// Fleet size `K`; defaults to the number of customers.
    pub fleet: Option<usize>,
}

impl EnvConfig {
    pub fn new(m_con: usize, m_pre: usize) -> Self {
        Self {
            m_con,
            m_pre,
            fleet: None,
        }
    }

    /// `m_con` with the variant's default premature-return budget.
    pub fn for_variant(variant: &Variant, m_con: usize) -> Self {
        Self::new(m_con, variant.default_premature_budget())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub index: usize,
    /// Last served node (0 while at the depot).
    pub position: usize,
    /// Service start at `position`, or the depot return time once done.
    pub time: f64,
    /// Used capacity as a fraction of `Q`.
    pub load: f64,
    /// Used capacity in raw demand units.
    pub used: f64,
    pub active: bool,
    /// Set once the vehicle has been activated.
    pub started: bool,
    /// Set once the vehicle has returned to the depot for good.
    pub done: bool,
    pub tour_len: usize,
}

/// Boolean feasibility matrix over `active slot x node`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    slots: usize,
    n_nodes: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(slots: usize, n_nodes: usize) -> Self {
        Self {
            slots,
            n_nodes,
            data: vec![false; slots * n_nodes],
        }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn get(&self, slot: usize, node: usize) -> bool {
        self.data[slot * self.n_nodes + node]
    }

    pub fn set(&mut self, slot: usize, node: usize, v: bool) {
        self.data[slot * self.n_nodes + node] = v;
    }

    pub fn row(&self, slot: usize) -> &[bool] {
        &self.data[slot * self.n_nodes..(slot + 1) * self.n_nodes]
    }

    /// Flat, slot-major view matching [`super::phi`].
    pub fn as_flat(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// What happened during one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEvents {
    pub vehicle: usize,
    pub node: usize,
    /// Arrival time at `node` (depot return time for node 0).
    pub arrival: f64,
    pub service_start: f64,
    pub wait: f64,
    /// Early deviation `max(a_i - T, 0)`; only non-zero when service starts on arrival.
    pub early: f64,
    /// Late deviation `max(T - b_i, 0)`.
    pub late: f64,
    /// The depot was chosen while customers were still feasible.
    pub premature: bool,
    pub activated: Option<usize>,
    pub finished: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Accrued {
    distance: f64,
    arcs: f64,
    wait: f64,
    duration: f64,
    early_pen: f64,
    late_pen: f64,
    early: f64,
    late: f64,
    late_events: usize,
}

/// Mutable construction state of one episode.
#[derive(Debug, Clone)]
pub struct State<'a> {
    inst: &'a Instance,
    variant: Variant,
    config: EnvConfig,
    vehicles: Vec<VehicleState>,
    /// `K x L` tour plan, row-major, zero padded.
    plan: Vec<usize>,
    max_len: usize,
    active: Vec<Option<usize>>,
    visited: Vec<bool>,
    unvisited: usize,
    premature_budget: usize,
    step: usize,
    next_vehicle: usize,
    finished: bool,
    acc: Accrued,
}

impl<'a> State<'a> {
    pub fn reset(
        inst: &'a Instance,
        variant: Variant,
        config: EnvConfig,
    ) -> Result<Self, EnvError> {
        if config.m_con < 1 {
            return Err(EnvError::Config("m_con must be at least 1".into()));
        }
        let n = inst.n_customers();
        let fleet = config.fleet.unwrap_or(n).max(1);
        if config.m_con > fleet {
            return Err(EnvError::Config(format!(
                "m_con {} exceeds fleet size {fleet}",
                config.m_con
            )));
        }
        let a0 = inst.horizon().0;
        let vehicles = (0..fleet)
            .map(|index| VehicleState {
                index,
                position: 0,
                time: a0,
                load: 0.0,
                used: 0.0,
                active: false,
                started: false,
                done: false,
                tour_len: 0,
            })
            .collect();
        let max_len = n.max(1);
        let mut state = Self {
            inst,
            variant,
            config,
            vehicles,
            plan: vec![0; fleet * max_len],
            max_len,
            active: Vec::with_capacity(config.m_con),
            visited: vec![false; n + 1],
            unvisited: n,
            premature_budget: config.m_pre,
            step: 0,
            next_vehicle: 0,
            finished: n == 0,
            acc: Accrued::default(),
        };
        if !state.finished {
            for _ in 0..config.m_con {
                let slot = state.activate_next();
                state.active.push(slot);
            }
        }
        Ok(state)
    }

    fn activate_next(&mut self) -> Option<usize> {
        let k = self.next_vehicle;
        if k >= self.vehicles.len() {
            return None;
        }
        self.next_vehicle += 1;
        let v = &mut self.vehicles[k];
        v.active = true;
        v.started = true;
        Some(k)
    }

    pub fn instance(&self) -> &'a Instance {
        self.inst
    }

    pub fn variant(&self) -> &Variant {
        &self.variant
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn vehicles(&self) -> &[VehicleState] {
        &self.vehicles
    }

    pub fn vehicle(&self, k: usize) -> &VehicleState {
        &self.vehicles[k]
    }

    pub fn fleet_size(&self) -> usize {
        self.vehicles.len()
    }

    /// Maximum tour length `L`.
    pub fn max_tour_len(&self) -> usize {
        self.max_len
    }

    /// Active slots, in activation order; `None` pads exhausted slots.
    pub fn active_set(&self) -> &[Option<usize>] {
        &self.active
    }

    pub fn active_vehicles(&self) -> impl Iterator<Item = usize> + '_ {
        self.active.iter().flatten().copied()
    }

    pub fn tour(&self, k: usize) -> &[usize] {
        let row = &self.plan[k * self.max_len..(k + 1) * self.max_len];
        &row[..self.vehicles[k].tour_len]
    }

    /// Row `k` of the zero-padded tour plan.
    pub fn tour_plan_row(&self, k: usize) -> &[usize] {
        &self.plan[k * self.max_len..(k + 1) * self.max_len]
    }

    pub fn is_visited(&self, i: usize) -> bool {
        self.visited[i]
    }

    pub fn visited(&self) -> &[bool] {
        &self.visited
    }

    pub fn unvisited(&self) -> usize {
        self.unvisited
    }

    pub fn premature_budget(&self) -> usize {
        self.premature_budget
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Number of late arrivals recorded so far.
    pub fn late_events(&self) -> usize {
        self.acc.late_events
    }

    /// `T_ik`: when vehicle `k` would reach node `i` from its position.
    pub fn arrival_time(&self, k: usize, i: usize) -> f64 {
        let v = &self.vehicles[k];
        v.time + transit_cost(self.inst, &self.variant, v.position, i)
    }

    fn service_start(&self, arrival: f64, i: usize) -> f64 {
        if self.variant.kind.waits() {
            arrival.max(self.inst.node(i).tw_start)
        } else {
            arrival
        }
    }

    /// Whether customer `i` may be appended to the tour of vehicle `k`.
    pub fn customer_feasible(&self, k: usize, i: usize) -> bool {
        let v = &self.vehicles[k];
        if !v.active || i == 0 || self.visited[i] {
            return false;
        }
        let node = self.inst.node(i);
        if v.used + node.demand > self.inst.capacity() * (1.0 + CAP_EPS) {
            return false;
        }
        if !self.variant.kind.has_time() {
            return true;
        }
        let arrival = self.arrival_time(k, i);
        if self.variant.beta.is_none() && arrival > node.tw_end {
            return false;
        }
        let start = self.service_start(arrival, i);
        start + self.inst.dist(i, 0) <= self.inst.horizon().1
    }

    fn any_customer_feasible(&self, k: usize) -> bool {
        (1..self.visited.len()).any(|i| self.customer_feasible(k, i))
    }

    fn depot_feasible(&self, k: usize) -> bool {
        let v = &self.vehicles[k];
        v.active && v.tour_len > 0 && (self.premature_budget > 0 || !self.any_customer_feasible(k))
    }

    /// Feasibility of every `(active slot, node)` pair.
    pub fn feasible_mask(&self) -> Result<Mask, EnvError> {
        if self.finished {
            return Err(EnvError::Finished);
        }
        let n_nodes = self.visited.len();
        let mut mask = Mask::new(self.active.len(), n_nodes);
        for (slot, k) in self.active.iter().enumerate() {
            let Some(k) = *k else { continue };
            let mut any = false;
            for i in 1..n_nodes {
                let f = self.customer_feasible(k, i);
                mask.set(slot, i, f);
                any |= f;
            }
            let depot = self.vehicles[k].tour_len > 0 && (self.premature_budget > 0 || !any);
            mask.set(slot, 0, depot);
        }
        if mask.count() == 0 {
            return Err(EnvError::InfeasibleState {
                unvisited: self.unvisited,
            });
        }
        Ok(mask)
    }

    fn is_feasible(&self, k: usize, i: usize) -> bool {
        if k >= self.vehicles.len() || i >= self.visited.len() {
            return false;
        }
        if i == 0 {
            self.depot_feasible(k)
        } else {
            self.customer_feasible(k, i)
        }
    }

    /// Applies action `(k, i)`. Selecting node 0 returns vehicle `k` to the
    /// depot and activates the next unused vehicle.
    pub fn step(&mut self, k: usize, i: usize) -> Result<StepEvents, EnvError> {
        if self.finished {
            return Err(EnvError::Finished);
        }
        if !self.is_feasible(k, i) {
            return Err(EnvError::InfeasibleAction {
                vehicle: k,
                node: i,
            });
        }
        self.step += 1;
        if i == 0 {
            let premature = self.any_customer_feasible(k);
            if premature {
                self.premature_budget -= 1;
            }
            let arrival = self.return_to_depot(k);
            let slot = self
                .active
                .iter()
                .position(|&s| s == Some(k))
                .expect("active vehicle has a slot");
            self.active.remove(slot);
            let activated = self.activate_next();
            self.active.push(activated);
            return Ok(StepEvents {
                vehicle: k,
                node: 0,
                arrival,
                service_start: arrival,
                wait: 0.0,
                early: 0.0,
                late: 0.0,
                premature,
                activated,
                finished: false,
            });
        }

        let node = *self.inst.node(i);
        let from = self.vehicles[k].position;
        let arrival = self.arrival_time(k, i);
        let start = self.service_start(arrival, i);
        let has_time = self.variant.kind.has_time();
        let wait = start - arrival;
        let early = if has_time {
            (node.tw_start - start).max(0.0)
        } else {
            0.0
        };
        let late = if has_time {
            (arrival - node.tw_end).max(0.0)
        } else {
            0.0
        };

        self.acc.distance += self.inst.dist(from, i);
        self.acc.arcs += transit_cost(self.inst, &self.variant, from, i);
        self.acc.wait += wait;
        self.acc.early += early;
        self.acc.late += late;
        self.acc.early_pen += self.variant.penalty.apply(early);
        self.acc.late_pen += self.variant.penalty.apply(late);
        if late > 0.0 {
            self.acc.late_events += 1;
        }

        let cap = self.inst.capacity();
        let v = &mut self.vehicles[k];
        self.plan[k * self.max_len + v.tour_len] = i;
        v.tour_len += 1;
        v.position = i;
        v.time = if has_time { start } else { v.time };
        v.used += node.demand;
        v.load = v.used / cap;
        self.visited[i] = true;
        self.unvisited -= 1;

        let finished = self.unvisited == 0;
        if finished {
            let active: Vec<usize> = self.active_vehicles().collect();
            for k in active {
                if self.vehicles[k].tour_len > 0 {
                    self.return_to_depot(k);
                } else {
                    self.vehicles[k].active = false;
                }
            }
            self.active.iter_mut().for_each(|s| *s = None);
            self.finished = true;
        }
        Ok(StepEvents {
            vehicle: k,
            node: i,
            arrival,
            service_start: start,
            wait,
            early,
            late,
            premature: false,
            activated: None,
            finished,
        })
    }

    fn return_to_depot(&mut self, k: usize) -> f64 {
        let from = self.vehicles[k].position;
        let arc = transit_cost(self.inst, &self.variant, from, 0);
        let back = if self.variant.kind.has_time() {
            self.vehicles[k].time + arc
        } else {
            self.vehicles[k].time
        };
        self.acc.distance += self.inst.dist(from, 0);
        self.acc.arcs += arc;
        self.acc.duration += back - self.inst.horizon().0;
        let v = &mut self.vehicles[k];
        v.position = 0;
        v.time = back;
        v.active = false;
        v.done = true;
        back
    }

    /// Tours of every vehicle that served at least one customer.
    pub fn solution(&self) -> Solution {
        let tours = (0..self.vehicles.len())
            .filter(|&k| self.vehicles[k].tour_len > 0)
            .map(|k| Tour {
                vehicle: k,
                nodes: self.tour(k).to_vec(),
            })
            .collect();
        Solution { tours }
    }

    /// Objective accumulated transition by transition. Only complete once the
    /// episode has finished.
    pub fn accrued_cost(&self) -> CostBreakdown {
        let a = &self.acc;
        let alpha = self.variant.alpha;
        let beta = self.variant.beta.unwrap_or(0.0);
        let early_pen = alpha * a.early_pen;
        let late_pen = beta * a.late_pen;
        let duration = if self.variant.kind.has_time() {
            a.duration
        } else {
            a.distance
        };
        let wait = if self.variant.include_wait {
            a.wait
        } else {
            0.0
        };
        CostBreakdown {
            distance: a.distance,
            duration,
            wait: a.wait,
            early: a.early,
            late: a.late,
            early_pen,
            late_pen,
            total: a.arcs + wait + early_pen + late_pen,
            tours: Vec::new(),
        }
    }
}
