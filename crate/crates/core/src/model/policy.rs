use std::collections::HashMap;

use rand::Rng;

use crate::env::{phi, CostBreakdown, EnvConfig, Solution, State, Variant};
use crate::instance::Instance;
use crate::nn::{
    AttnConfig, BnMode, Graph, Linear, Mha, Mlp, ParamId, ParamSet, Real, SaBlock, Tensor, Var,
};

use super::config::{ModelConfig, PolicyKind};
use super::features::{node_features, time_scale, vehicle_feature_matrix};
use super::ModelError;

/// Parameter layout of a policy; the values live in a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub cfg: ModelConfig,
    w_in: Linear,
    blocks: Vec<SaBlock>,
    g_v: Option<Mlp>,
    g_s: Option<Mlp>,
    ga: Option<[ParamId; 3]>,
    w_ctx: ParamId,
    w_mem: ParamId,
    dec: Mha,
    w_logit: ParamId,
}

impl Policy {
    pub fn new<T: Real, R: Rng + ?Sized>(
        cfg: ModelConfig,
        rng: &mut R,
    ) -> Result<(Self, ParamSet<T>), ModelError> {
        cfg.validate()?;
        let mut p = ParamSet::new();
        let d = cfg.d_node;
        let w_in = Linear::new(&mut p, "enc.in", cfg.node_features(), d, true, rng);
        let blocks = (0..cfg.enc_layers)
            .map(|l| SaBlock::new(&mut p, &format!("enc.{l}"), d, cfg.heads, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let (g_v, g_s, ga) = if cfg.policy == PolicyKind::Jampr {
            let mut vd = vec![5];
            vd.extend(std::iter::repeat(cfg.veh_hidden).take(cfg.veh_layers));
            let mut sd = vec![d];
            sd.extend(std::iter::repeat(cfg.tour_hidden).take(cfg.tour_layers));
            let dv = cfg.d_vehicle();
            let ga = [
                p.uniform("act.w1", cfg.d_m, d, d, rng),
                p.uniform("act.w2", cfg.d_m, dv, dv, rng),
                p.uniform("act.w3", cfg.d_m, d + 1, d + 1, rng),
            ];
            (
                Some(Mlp::new(&mut p, "veh", &vd, rng)),
                Some(Mlp::new(&mut p, "tour", &sd, rng)),
                Some(ga),
            )
        } else {
            (None, None, None)
        };
        let (h, dc, da) = (cfg.dec_hidden, cfg.d_context(), cfg.d_action());
        let w_ctx = p.uniform("dec.ctx", h, dc, dc, rng);
        let w_mem = p.uniform("dec.mem", h, da, da, rng);
        let dec = Mha::new(&mut p, "dec.mha", AttnConfig::new(h, cfg.dec_heads), rng)?;
        let w_logit = p.uniform("dec.logit", h, da, da, rng);
        let policy = Self {
            cfg,
            w_in,
            blocks,
            g_v,
            g_s,
            ga,
            w_ctx,
            w_mem,
            dec,
            w_logit,
        };
        Ok((policy, p))
    }

    /// Node embeddings of equally sized instances, stacked by rows
    /// (`B (N+1) x d_node`). Batch-norm statistics span the whole stack.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        insts: &[&Instance],
        mode: BnMode,
    ) -> Result<Var, ModelError> {
        let first = insts
            .first()
            .ok_or_else(|| ModelError::Config("empty instance batch".into()))?;
        let n = first.nodes().len();
        if insts.iter().any(|i| i.nodes().len() != n) {
            return Err(ModelError::Config(
                "instances in a batch must have equal size".into(),
            ));
        }
        let parts: Vec<Var> = insts
            .iter()
            .map(|i| g.constant(node_features(i, self.cfg.time_windows)))
            .collect();
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)
        };
        let mut z = self.w_in.forward(g, x);
        for blk in &self.blocks {
            z = blk.forward(g, z, n, mode)?;
        }
        Ok(z)
    }

    fn check_env(&self, variant: &Variant, env: &EnvConfig) -> Result<(), ModelError> {
        self.cfg.check_variant(variant)?;
        if self.cfg.policy.is_am() && env.m_con != 1 {
            return Err(ModelError::Config(
                "AM policies construct one tour at a time (m_con = 1)".into(),
            ));
        }
        Ok(())
    }

    /// Starts decoding an instance from its node embeddings (`N+1` rows).
    pub fn decoder<'s, 'a, T: Real>(
        &'s self,
        g: &mut Graph<'_, T>,
        node: Var,
        state: &State<'a>,
    ) -> Result<LaneDecoder<'s>, ModelError> {
        self.check_env(state.variant(), state.config())?;
        let n_nodes = state.instance().nodes().len();
        if g.shape(node) != (n_nodes, self.cfg.d_node) {
            return Err(ModelError::Config(
                "node embeddings do not match the instance".into(),
            ));
        }
        let graph = g.mean_rows(node);
        let depot = g.slice_rows(node, 0, 1);
        let mut dec = LaneDecoder {
            policy: self,
            node,
            graph,
            depot,
            gs: None,
            node_w1: None,
            static_block: None,
            veh: Vec::new(),
            tour_sum: Vec::new(),
            blocks: HashMap::new(),
            n_nodes,
        };
        match self.cfg.policy {
            PolicyKind::Jampr => {
                let gs = self.g_s.as_ref().unwrap().forward(g, node);
                let w1 = g.param(self.ga.unwrap()[0]);
                dec.gs = Some(gs);
                dec.node_w1 = Some(g.linear(node, w1));
                dec.veh = self.initial_vehicles(g, state);
                dec.tour_sum = vec![None; state.fleet_size()];
            }
            _ => {
                dec.static_block = Some(self.project_block(g, node));
            }
        }
        Ok(dec)
    }

    fn initial_vehicles<T: Real>(&self, g: &mut Graph<'_, T>, state: &State<'_>) -> Vec<Var> {
        let k = state.fleet_size();
        let ks: Vec<usize> = (0..k).collect();
        let feats = g.constant(vehicle_feature_matrix(state, &ks));
        let gv = self.g_v.as_ref().unwrap().forward(g, feats);
        let zeros = g.constant(Tensor::zeros(k, self.cfg.tour_hidden));
        let all = g.concat_cols(&[gv, zeros]);
        (0..k).map(|i| g.slice_rows(all, i, 1)).collect()
    }

    /// `g_a` for every node against one vehicle row:
    /// `W1 w_node + W2 w_veh + W3 [w_veh * w_node ; w_veh . w_node]`.
    fn action_block<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        node: Var,
        node_w1: Var,
        veh: Var,
    ) -> Var {
        let [_, w2, w3] = self.ga.unwrap();
        let (w2, w3) = (g.param(w2), g.param(w3));
        let had = g.mul_row(node, veh);
        let dot = g.sum_cols(had);
        let cat = g.concat_cols(&[had, dot]);
        let p3 = g.linear(cat, w3);
        let p2 = g.linear(veh, w2);
        let s = g.add(node_w1, p3);
        g.add_row(s, p2)
    }

    fn project_block<T: Real>(&self, g: &mut Graph<'_, T>, m: Var) -> Block {
        let w_mem = g.param(self.w_mem);
        let mp = g.linear(m, w_mem);
        let (k, v) = self
            .dec
            .project_kv(g, mp)
            .expect("decoder width checked at construction");
        let w_logit = g.param(self.w_logit);
        let l = g.linear(m, w_logit);
        Block { m, k, v, l }
    }

    /// Vehicle embedding recomputed from the state.
    fn vehicle_embedding<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        gs: Var,
        state: &State<'_>,
        k: usize,
    ) -> Var {
        let feats = g.constant(vehicle_feature_matrix(state, &[k]));
        let gv = self.g_v.as_ref().unwrap().forward(g, feats);
        let tour = state.tour(k);
        let agg = if tour.is_empty() {
            g.constant(Tensor::zeros(1, self.cfg.tour_hidden))
        } else {
            let rows = g.gather(gs, tour);
            let s = g.sum_rows(rows);
            g.scale(s, T::one() / T::of(state.max_tour_len() as f64))
        };
        g.concat_cols(&[gv, agg])
    }

    /// Recomputes vehicle embeddings, context and action rows from scratch.
    pub fn full_view<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        node: Var,
        state: &State<'_>,
    ) -> Result<StepView<T>, ModelError> {
        let mut dec = self.decoder(g, node, state)?;
        if self.cfg.policy == PolicyKind::Jampr {
            let gs = dec.gs.unwrap();
            dec.veh = (0..state.fleet_size())
                .map(|k| self.vehicle_embedding(g, gs, state, k))
                .collect();
        }
        Ok(dec.view(g, state))
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    m: Var,
    k: Var,
    v: Var,
    l: Var,
}

/// How the decoder picks actions.
pub enum Selector<'r, R: Rng + ?Sized> {
    /// Arg-max, lowest flat index on ties.
    Greedy,
    /// Categorical draw.
    Sample(&'r mut R),
    /// Replays given flat action indices.
    Forced(&'r [usize]),
}

/// Outcome of decoding one instance on a graph.
#[derive(Debug, Clone)]
pub struct LaneRollout {
    pub solution: Solution,
    pub cost: CostBreakdown,
    /// Sum of the chosen actions' log-probabilities, as a `1 x 1` node.
    pub log_prob: Var,
    pub actions: Vec<usize>,
}

/// Decoder inputs at one step, as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct StepView<T> {
    /// `K x d_vehicle` (empty for AM policies).
    pub vehicles: Tensor<T>,
    pub fleet: Tensor<T>,
    pub active: Tensor<T>,
    pub context: Tensor<T>,
    /// Action rows, slot-major.
    pub actions: Tensor<T>,
}

/// Per-instance decoding cache. Node-level terms are computed once; a
/// vehicle's embedding and its action rows are refreshed only after that
/// vehicle moves.
pub struct LaneDecoder<'s> {
    policy: &'s Policy,
    node: Var,
    graph: Var,
    depot: Var,
    gs: Option<Var>,
    node_w1: Option<Var>,
    static_block: Option<Block>,
    veh: Vec<Var>,
    tour_sum: Vec<Option<Var>>,
    blocks: HashMap<usize, Block>,
    n_nodes: usize,
}

impl<'s> LaneDecoder<'s> {
    fn block<T: Real>(&mut self, g: &mut Graph<'_, T>, slot: Option<usize>) -> Block {
        if let Some(b) = self.static_block {
            return b;
        }
        let key = slot.unwrap_or(usize::MAX);
        if let Some(b) = self.blocks.get(&key) {
            return *b;
        }
        let p = self.policy;
        let node_w1 = self.node_w1.unwrap();
        let m = match slot {
            Some(k) => p.action_block(g, self.node, node_w1, self.veh[k]),
            // g_a has no biases, so an empty slot's rows reduce to W1 w_node.
            None => node_w1,
        };
        let b = p.project_block(g, m);
        self.blocks.insert(key, b);
        b
    }

    fn context<T: Real>(&mut self, g: &mut Graph<'_, T>, state: &State<'_>) -> Var {
        let p = self.policy;
        match p.cfg.policy {
            PolicyKind::Jampr => {
                let kf = T::of(self.veh.len() as f64);
                let fs = g.sum_list(&self.veh);
                let fleet = g.scale(fs, T::one() / kf);
                let act: Vec<Var> = state.active_vehicles().map(|k| self.veh[k]).collect();
                let act_mean = if act.is_empty() {
                    g.constant(Tensor::zeros(1, p.cfg.d_vehicle()))
                } else {
                    let s = g.sum_list(&act);
                    g.scale(s, T::one() / T::of(act.len() as f64))
                };
                let lasts: Vec<usize> = (0..state.fleet_size())
                    .map(|k| state.tour(k).last().copied().unwrap_or(0))
                    .collect();
                let lr = g.gather(self.node, &lasts);
                let last = g.mean_rows(lr);
                g.concat_cols(&[self.graph, fleet, act_mean, self.depot, last])
            }
            PolicyKind::Am | PolicyKind::AmTw => {
                let k = state.active_set().first().copied().flatten();
                let (pos, load, time) = match k {
                    Some(k) => {
                        let v = state.vehicle(k);
                        (v.position, v.load, v.time)
                    }
                    None => (0, 0.0, state.instance().horizon().0),
                };
                let last = g.slice_rows(self.node, pos, 1);
                let mut extra = vec![T::of(1.0 - load)];
                if p.cfg.policy == PolicyKind::AmTw {
                    extra.push(T::of(time / time_scale(state.instance())));
                }
                let qf = g.constant(Tensor::row_vector(extra[..1].to_vec()));
                if extra.len() == 2 {
                    let t = g.constant(Tensor::row_vector(extra[1..].to_vec()));
                    g.concat_cols(&[self.graph, qf, last, t])
                } else {
                    g.concat_cols(&[self.graph, qf, last])
                }
            }
        }
    }

    fn blocks_for<T: Real>(&mut self, g: &mut Graph<'_, T>, state: &State<'_>) -> Vec<Block> {
        let slots: Vec<Option<usize>> = state.active_set().to_vec();
        slots.into_iter().map(|s| self.block(g, s)).collect()
    }

    fn stack<T: Real>(g: &mut Graph<'_, T>, vs: Vec<Var>) -> Var {
        if vs.len() == 1 {
            vs[0]
        } else {
            g.concat_rows(&vs)
        }
    }

    /// Current decoder inputs as tensors.
    pub fn view<T: Real>(&mut self, g: &mut Graph<'_, T>, state: &State<'_>) -> StepView<T> {
        let ctx = self.context(g, state);
        let blocks = self.blocks_for(g, state);
        let m = Self::stack(g, blocks.iter().map(|b| b.m).collect());
        let (vehicles, fleet, active) = if self.veh.is_empty() {
            (
                Tensor::zeros(0, 0),
                Tensor::zeros(0, 0),
                Tensor::zeros(0, 0),
            )
        } else {
            let d = self.policy.cfg.d_vehicle();
            let c = ctx;
            let dn = self.policy.cfg.d_node;
            let all = g.concat_rows(&self.veh);
            let f = g.slice_cols(c, dn, d);
            let a = g.slice_cols(c, dn + d, d);
            (g.value(all).clone(), g.value(f).clone(), g.value(a).clone())
        };
        StepView {
            vehicles,
            fleet,
            active,
            context: g.value(ctx).clone(),
            actions: g.value(m).clone(),
        }
    }

    /// Log-probabilities over the flat action space (`1 x m_con (N+1)`),
    /// `-inf` on infeasible entries.
    pub fn log_probs<T: Real>(
        &mut self,
        g: &mut Graph<'_, T>,
        state: &State<'_>,
        mask: &[bool],
    ) -> Result<Var, ModelError> {
        let p = self.policy;
        let ctx = self.context(g, state);
        let blocks = self.blocks_for(g, state);
        let k = Self::stack(g, blocks.iter().map(|b| b.k).collect());
        let v = Self::stack(g, blocks.iter().map(|b| b.v).collect());
        let l = Self::stack(g, blocks.iter().map(|b| b.l).collect());
        let rows = g.shape(k).0;
        assert_eq!(rows, mask.len());
        let w_ctx = g.param(p.w_ctx);
        let q = g.linear(ctx, w_ctx);
        let glimpse = p
            .dec
            .forward_projected(g, q, k, v, 1, rows, Some(mask.to_vec()))?;
        let logits = g.matmul_t(glimpse, false, l, true);
        let logits = g.scale(logits, T::one() / T::of(p.cfg.dec_hidden as f64).sqrt());
        let t = g.tanh(logits);
        let t = g.scale(t, T::of(p.cfg.clip as f64));
        Ok(g.log_softmax(t, Some(mask)))
    }

    /// Refreshes the cached embedding of vehicle `k` after it moved to `node`.
    fn update_vehicle<T: Real>(
        &mut self,
        g: &mut Graph<'_, T>,
        state: &State<'_>,
        k: usize,
        node: usize,
    ) {
        let p = self.policy;
        let gs = self.gs.unwrap();
        if node != 0 {
            let row = g.slice_rows(gs, node, 1);
            self.tour_sum[k] = Some(match self.tour_sum[k] {
                Some(s) => g.add(s, row),
                None => row,
            });
        }
        let feats = g.constant(vehicle_feature_matrix(state, &[k]));
        let gv = p.g_v.as_ref().unwrap().forward(g, feats);
        let agg = match self.tour_sum[k] {
            Some(s) => g.scale(s, T::one() / T::of(state.max_tour_len() as f64)),
            None => g.constant(Tensor::zeros(1, p.cfg.tour_hidden)),
        };
        self.veh[k] = g.concat_cols(&[gv, agg]);
        self.blocks.remove(&k);
    }

    /// Decodes until every customer is served.
    pub fn rollout<T: Real, R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<'_, T>,
        state: &mut State<'_>,
        mut select: Selector<'_, R>,
        mut on_step: Option<&mut dyn FnMut(&mut Graph<'_, T>, &mut Self, &State<'_>)>,
    ) -> Result<LaneRollout, ModelError> {
        let mut picks = Vec::new();
        let mut actions = Vec::new();
        while !state.is_finished() {
            if let Some(f) = on_step.as_mut() {
                f(g, self, state);
            }
            let mask = state.feasible_mask()?;
            let flat = mask.as_flat();
            let logp = self.log_probs(g, state, flat)?;
            let lp = g.value(logp).data();
            let a = match &mut select {
                Selector::Greedy => argmax(lp, flat),
                Selector::Sample(rng) => sample(lp, flat, *rng),
                Selector::Forced(seq) => {
                    let a = *seq.get(actions.len()).ok_or_else(|| {
                        ModelError::Config("forced action sequence too short".into())
                    })?;
                    if !flat.get(a).copied().unwrap_or(false) {
                        return Err(ModelError::Config(format!(
                            "forced action {a} is infeasible"
                        )));
                    }
                    a
                }
            };
            picks.push(g.pick(logp, a));
            actions.push(a);
            let (k, i) = phi(state.active_set(), a, self.n_nodes)?;
            let ev = state.step(k, i)?;
            if !ev.finished && self.policy.cfg.policy == PolicyKind::Jampr {
                self.update_vehicle(g, state, k, i);
            }
        }
        let log_prob = if picks.is_empty() {
            g.constant(Tensor::zeros(1, 1))
        } else {
            g.sum_list(&picks)
        };
        Ok(LaneRollout {
            solution: state.solution(),
            cost: state.accrued_cost(),
            log_prob,
            actions,
        })
    }
}

fn argmax<T: Real>(lp: &[T], mask: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (j, &ok) in mask.iter().enumerate() {
        if ok && best.map_or(true, |b| lp[j] > lp[b]) {
            best = Some(j);
        }
    }
    best.expect("at least one feasible action")
}

fn sample<T: Real, R: Rng + ?Sized>(lp: &[T], mask: &[bool], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for (j, &ok) in mask.iter().enumerate() {
        if !ok {
            continue;
        }
        acc += lp[j].f64().exp();
        last = Some(j);
        if u < acc {
            return j;
        }
    }
    last.expect("at least one feasible action")
}
