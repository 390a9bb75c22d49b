use crate::env::State;
use crate::instance::{Instance, ProblemKind};
use crate::nn::{Real, Tensor};

/// Coordinate scale: 100 for window instances (Solomon grid), 1 for the
/// unit-square CVRP.
pub fn coord_scale(inst: &Instance) -> f64 {
    match inst.kind() {
        ProblemKind::Cvrptw => 100.0,
        ProblemKind::Cvrp => 1.0,
    }
}

/// Time scale `b_0`; 1 when the horizon is open.
pub fn time_scale(inst: &Instance) -> f64 {
    match inst.kind() {
        ProblemKind::Cvrptw => inst.horizon().1.max(1.0),
        ProblemKind::Cvrp => 1.0,
    }
}

/// Per-node encoder inputs: `(x, y, q/Q)` plus `(a, b)` scaled by `b_0`
/// when `time_windows` is set.
pub fn node_features<T: Real>(inst: &Instance, time_windows: bool) -> Tensor<T> {
    let s = coord_scale(inst);
    let ts = time_scale(inst);
    let w = if time_windows { 5 } else { 3 };
    let mut data = Vec::with_capacity(inst.nodes().len() * w);
    for (i, n) in inst.nodes().iter().enumerate() {
        data.push(T::of(n.x / s));
        data.push(T::of(n.y / s));
        data.push(T::of(inst.norm_demand(i)));
        if time_windows {
            data.push(T::of(n.tw_start / ts));
            data.push(T::of(n.tw_end.min(ts) / ts));
        }
    }
    Tensor::from_vec(inst.nodes().len(), w, data)
}

/// `[k/K, d(pos, depot)/s, x/s, y/s, time/b_0]` for vehicle `k`.
pub fn vehicle_features(state: &State<'_>, k: usize) -> [f64; 5] {
    let inst = state.instance();
    let v = state.vehicle(k);
    let s = coord_scale(inst);
    let node = inst.node(v.position);
    let time = if inst.kind() == ProblemKind::Cvrptw {
        v.time / time_scale(inst)
    } else {
        0.0
    };
    [
        k as f64 / state.fleet_size() as f64,
        inst.dist(v.position, 0) / s,
        node.x / s,
        node.y / s,
        time,
    ]
}

pub fn vehicle_feature_matrix<T: Real>(state: &State<'_>, ks: &[usize]) -> Tensor<T> {
    let data = ks
        .iter()
        .flat_map(|&k| vehicle_features(state, k))
        .map(T::of)
        .collect();
    Tensor::from_vec(ks.len(), 5, data)
}
