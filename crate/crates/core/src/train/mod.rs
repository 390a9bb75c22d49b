//! REINFORCE with a greedy rollout baseline.

mod adam;
mod baseline;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::env::{EnvConfig, State, Variant};
use crate::instance::{
    generate_cvrp, generate_cvrp_with_capacity, generate_cvrptw, GenParams, Instance, InstanceError,
};
use crate::model::{decode_config, greedy_with, parse_meta, Model, ModelError, Selector};
use crate::nn::{
    BnMode, Checkpoint, CheckpointError, Gradients, Graph, ParamSet, StatUpdate, Tensor,
};
use crate::rng::{derive_path, stream};

pub use adam::{lr_schedule, Adam};
pub use baseline::{paired_ttest, significant_improvement, BaselineConfig, BaselineState, TTest};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("non-finite {what} in epoch {epoch}, batch {batch}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<crate::env::EnvError> for TrainError {
    fn from(e: crate::env::EnvError) -> Self {
        TrainError::Model(e.into())
    }
}

/// Draws a training instance from a seed.
pub trait InstanceSampler: Sync {
    fn sample(&self, seed: u64) -> Result<Instance, InstanceError>;
}

impl<F> InstanceSampler for F
where
    F: Fn(u64) -> Result<Instance, InstanceError> + Sync,
{
    fn sample(&self, seed: u64) -> Result<Instance, InstanceError> {
        self(seed)
    }
}

/// Fresh random instances of one size.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomInstances {
    pub n: usize,
    pub time_windows: bool,
    /// Window sampler settings; `capacity` also overrides the CVRP table.
    pub params: GenParams,
}

impl InstanceSampler for RandomInstances {
    fn sample(&self, seed: u64) -> Result<Instance, InstanceError> {
        match (self.time_windows, self.params.capacity) {
            (true, _) => generate_cvrptw(self.n, seed, &self.params),
            (false, Some(q)) => generate_cvrp_with_capacity(self.n, seed, q),
            (false, None) => generate_cvrp(self.n, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub instances_per_epoch: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Learning-rate decay factor.
    pub gamma: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub baseline: BaselineConfig,
    pub seed: u64,
    pub variant: Variant,
    pub m_con: usize,
}

impl TrainConfig {
    /// Full protocol: 50 epochs of 1,024,000 instances, batch 512 for
    /// `N <= 20` and 128 above.
    pub fn paper(variant: Variant, n: usize, m_con: usize) -> Self {
        Self {
            epochs: 50,
            instances_per_epoch: 1_024_000,
            batch_size: if n <= 20 { 512 } else { 128 },
            lr0: 1e-4,
            gamma: 0.001,
            grad_clip: Some(1.0),
            baseline: BaselineConfig::default(),
            seed: 0,
            variant,
            m_con,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 || self.instances_per_epoch == 0 || self.m_con == 0 {
            return bad("epochs, instances per epoch and m_con must be positive");
        }
        if self.batch_size < 2 || self.batch_size > self.instances_per_epoch {
            return bad("batch size must be in 2..=instances_per_epoch");
        }
        if !(self.lr0 > 0.0) || !(self.gamma >= 0.0) || self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("learning rate and clip must be positive, decay non-negative");
        }
        let b = &self.baseline;
        if b.eval_set_size < 2
            || !(0.0..1.0).contains(&b.warmup_beta)
            || !(b.ttest_alpha > 0.0 && b.ttest_alpha < 1.0)
        {
            return bad("baseline needs >= 2 eval instances, beta in [0,1), alpha in (0,1)");
        }
        Ok(())
    }

    /// Batch sizes of one epoch. A remainder of at least 2 instances forms
    /// a final smaller batch; a single leftover instance is dropped.
    pub fn batches(&self) -> Vec<usize> {
        let full = self.instances_per_epoch / self.batch_size;
        let rest = self.instances_per_epoch % self.batch_size;
        let mut out = vec![self.batch_size; full];
        if rest >= 2 {
            out.push(rest);
        }
        out
    }
}

/// Result of one policy-gradient step, before clipping.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// `mean((c - b) log p)`.
    pub loss: f64,
    pub grads: Gradients<f32>,
    pub costs: Vec<f64>,
    pub baselines: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub stat_updates: Vec<StatUpdate<f32>>,
}

struct Lane<'p> {
    graph: Graph<'p, f32>,
    node: crate::nn::Var,
    log_prob: crate::nn::Var,
    cost: f64,
}

/// Samples one rollout per instance and differentiates
/// `mean((c - b) log p)`. `baseline` maps sampled costs to baseline values.
/// The encoder runs over the whole batch in train mode.
pub fn reinforce_step(
    model: &Model,
    insts: &[Instance],
    variant: &Variant,
    env: &EnvConfig,
    sample_seeds: &[u64],
    baseline: impl FnOnce(&[f64]) -> Vec<f64>,
) -> Result<StepOutcome, TrainError> {
    assert_eq!(insts.len(), sample_seeds.len());
    let b = insts.len();
    let env = decode_config(&model.policy, variant, env)?;
    let mut g = Graph::new(&model.params);
    let refs: Vec<&Instance> = insts.iter().collect();
    let z = model.policy.encode(&mut g, &refs, BnMode::Train)?;
    let zt = g.value(z).clone();
    let (rows, d) = (insts[0].nodes().len(), zt.cols());

    let lanes = (0..b)
        .into_par_iter()
        .map(|i| -> Result<Lane<'_>, TrainError> {
            let mut lg = Graph::new(&model.params);
            let block = zt.data()[i * rows * d..(i + 1) * rows * d].to_vec();
            let node = lg.input(Tensor::from_vec(rows, d, block));
            let mut state = State::reset(&insts[i], *variant, env)?;
            let mut dec = model.policy.decoder(&mut lg, node, &state)?;
            let mut rng = stream(sample_seeds[i]);
            let r = dec.rollout(&mut lg, &mut state, Selector::Sample(&mut rng), None)?;
            Ok(Lane {
                graph: lg,
                node,
                log_prob: r.log_prob,
                cost: r.cost.total,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let costs: Vec<f64> = lanes.iter().map(|l| l.cost).collect();
    let log_probs: Vec<f64> = lanes
        .iter()
        .map(|l| l.graph.scalar(l.log_prob) as f64)
        .collect();
    let baselines = baseline(&costs);
    assert_eq!(baselines.len(), b);
    let adv: Vec<f64> = costs.iter().zip(&baselines).map(|(c, b)| c - b).collect();
    let loss = adv.iter().zip(&log_probs).map(|(a, l)| a * l).sum::<f64>() / b as f64;

    let back: Vec<_> = lanes
        .par_iter()
        .zip(&adv)
        .map(|(l, a)| {
            let seed = Tensor::filled(1, 1, (*a / b as f64) as f32);
            l.graph.backward_seeded(&[(l.log_prob, seed)])
        })
        .collect();
    let mut grads = Gradients::for_params(&model.params);
    let mut node_grad = Vec::with_capacity(b * rows * d);
    for (l, bw) in lanes.iter().zip(&back) {
        grads.merge(&bw.params);
        match bw.input_grad(l.node) {
            Some(t) => node_grad.extend_from_slice(t.data()),
            None => node_grad.extend(std::iter::repeat(0.0).take(rows * d)),
        }
    }
    let enc = g.backward_seeded(&[(z, Tensor::from_vec(b * rows, d, node_grad))]);
    grads.merge(&enc.params);
    Ok(StepOutcome {
        loss,
        grads,
        costs,
        baselines,
        log_probs,
        stat_updates: g.take_stat_updates(),
    })
}

/// Greedy costs of `params` on each instance, in order.
pub fn greedy_costs(
    model: &Model,
    params: &ParamSet<f32>,
    insts: &[Instance],
    variant: &Variant,
    env: &EnvConfig,
) -> Result<Vec<f64>, TrainError> {
    insts
        .par_iter()
        .map(|inst| {
            Ok(greedy_with(&model.policy, params, inst, variant, env)?
                .cost
                .total)
        })
        .collect()
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_cost: f64,
    pub val_cost: f64,
    pub lr: f64,
    pub seconds: f64,
    pub baseline_replaced: bool,
    pub p_value: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_cost,val_cost,lr,seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.epoch, self.train_cost, self.val_cost, self.lr, self.seconds
        )
    }
}

/// Model, optimizer and baseline of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub baseline: BaselineState,
}

impl Trainer {
    /// The frozen baseline starts as a copy of the initial parameters.
    pub fn new(cfg: TrainConfig, model: Model) -> Result<Self, TrainError> {
        cfg.validate()?;
        if model.meta.variant != cfg.variant.kind || model.meta.m_con != cfg.m_con {
            return Err(TrainError::Config(
                "model meta disagrees with the training variant or m_con".into(),
            ));
        }
        model.cfg().check_variant(&cfg.variant)?;
        Ok(Self {
            adam: Adam::new(&model.params),
            baseline: BaselineState::new(model.params.clone()),
            cfg,
            model,
        })
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.baseline.epoch
    }

    /// Learning rate of the next epoch.
    pub fn lr(&self) -> f64 {
        lr_schedule(self.cfg.lr0, self.cfg.gamma, self.epoch())
    }

    fn env(&self) -> EnvConfig {
        EnvConfig::for_variant(&self.cfg.variant, self.cfg.m_con)
    }

    pub fn run_epoch(&mut self, sampler: &dyn InstanceSampler) -> Result<EpochMetrics, TrainError> {
        let t0 = Instant::now();
        let e = self.epoch() + 1;
        let lr = self.lr();
        let (seed, variant, env) = (self.cfg.seed, self.cfg.variant, self.env());
        let warm = self.baseline.in_warmup(&self.cfg.baseline);
        let mut cost_sum = 0.0;
        let mut count = 0usize;
        for (bi, &size) in self.cfg.batches().iter().enumerate() {
            let path =
                |tag: u64, l: usize| derive_path(seed, &[tag, e as u64, bi as u64, l as u64]);
            let insts = (0..size)
                .map(|l| sampler.sample(path(0, l)))
                .collect::<Result<Vec<_>, _>>()?;
            let seeds: Vec<u64> = (0..size).map(|l| path(1, l)).collect();
            let frozen = if warm {
                None
            } else {
                Some(greedy_costs(
                    &self.model,
                    &self.baseline.frozen,
                    &insts,
                    &variant,
                    &env,
                )?)
            };
            let beta = self.cfg.baseline.warmup_beta;
            let base = &mut self.baseline;
            let mut out =
                reinforce_step(
                    &self.model,
                    &insts,
                    &variant,
                    &env,
                    &seeds,
                    |c| match frozen {
                        Some(f) => f,
                        None => {
                            let mean = c.iter().sum::<f64>() / c.len() as f64;
                            vec![base.warmup_value(beta, mean); c.len()]
                        }
                    },
                )?;
            let nonfinite = |what| TrainError::NonFinite {
                what,
                epoch: e,
                batch: bi,
            };
            if !out.loss.is_finite() {
                return Err(nonfinite("loss"));
            }
            if !out.grads.is_finite() {
                return Err(nonfinite("gradient"));
            }
            if let Some(c) = self.cfg.grad_clip {
                out.grads.clip_norm(c as f32);
            }
            self.adam.step(&mut self.model.params, &out.grads, lr);
            self.model.params.apply_stat_updates(&out.stat_updates);
            cost_sum += out.costs.iter().sum::<f64>();
            count += size;
        }

        let val = (0..self.cfg.baseline.eval_set_size)
            .map(|j| sampler.sample(derive_path(seed, &[2, e as u64, j as u64])))
            .collect::<Result<Vec<_>, _>>()?;
        let cand = greedy_costs(&self.model, &self.model.params, &val, &variant, &env)?;
        let frozen = greedy_costs(&self.model, &self.baseline.frozen, &val, &variant, &env)?;
        let test = paired_ttest(&cand, &frozen)
            .ok_or_else(|| TrainError::Config("validation set too small".into()))?;
        let replaced = significant_improvement(&test, self.cfg.baseline.ttest_alpha);
        if replaced {
            self.baseline.frozen = self.model.params.clone();
        }
        self.baseline.epoch = e;
        Ok(EpochMetrics {
            epoch: e,
            train_cost: cost_sum / count as f64,
            val_cost: cand.iter().sum::<f64>() / cand.len() as f64,
            lr,
            seconds: t0.elapsed().as_secs_f64(),
            baseline_replaced: replaced,
            p_value: test.p_value,
        })
    }

    /// Parameters, Adam moments and frozen baseline. Counters and the
    /// warm-up average go into the header line.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut extra = self.adam.to_records(&self.model.params);
        extra.extend(self.baseline.frozen.to_records("baseline/param/"));
        let mut ck = self.model.to_checkpoint(extra);
        let ema = self
            .baseline
            .ema
            .map_or("none".to_string(), |x| format!("{x:e}"));
        ck.meta = format!(
            "{} epoch={} adam_t={} ema={ema}",
            ck.meta,
            self.epoch(),
            self.adam.t
        );
        ck
    }

    pub fn from_checkpoint(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self, TrainError> {
        let model = Model::from_checkpoint(ck)?;
        let mut t = Self::new(cfg, model)?;
        let meta = parse_meta(&ck.meta);
        let num = |k: &str| -> Result<u64, TrainError> {
            meta.get(k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CheckpointError::Mismatch(format!("header lacks `{k}`")).into())
        };
        t.baseline.epoch = num("epoch")? as usize;
        let adam_t = num("adam_t")?;
        t.adam.load_records(&t.model.params, &ck.records, adam_t)?;
        t.baseline
            .frozen
            .load_records(&ck.records, "baseline/param/")?;
        t.baseline.ema = match meta.get("ema").map(String::as_str) {
            Some("none") | None => None,
            Some(s) => Some(
                s.parse()
                    .map_err(|_| CheckpointError::Mismatch("bad `ema`".into()))?,
            ),
        };
        Ok(t)
    }

    /// Runs the remaining epochs. With an output directory, writes
    /// `epoch-NNN.ckpt`, `best.ckpt` (the frozen baseline) and
    /// `metrics.csv` after every epoch; rows beyond the resumed epoch are
    /// dropped from an existing log.
    pub fn train(
        &mut self,
        sampler: &dyn InstanceSampler,
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>, TrainError> {
        let mut rows = Vec::new();
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
            rows = existing_rows(&dir.join("metrics.csv"), self.epoch())?;
            write_metrics(&dir.join("metrics.csv"), &rows)?;
        }
        let mut out = Vec::new();
        while self.epoch() < self.cfg.epochs {
            let m = self.run_epoch(sampler)?;
            if let Some(dir) = out_dir {
                self.to_checkpoint().save(&checkpoint_path(dir, m.epoch))?;
                if m.baseline_replaced || !dir.join("best.ckpt").exists() {
                    let mut best = self.model.clone();
                    best.params = self.baseline.frozen.clone();
                    best.save(&dir.join("best.ckpt"))?;
                }
                rows.push(m.csv_row());
                write_metrics(&dir.join("metrics.csv"), &rows)?;
            }
            on_epoch(&m);
            out.push(m);
        }
        Ok(out)
    }
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:03}.ckpt"))
}

fn existing_rows(path: &Path, upto: usize) -> Result<Vec<String>, TrainError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e <= upto)
        })
        .map(str::to_string)
        .collect())
}

fn write_metrics(path: &Path, rows: &[String]) -> Result<(), TrainError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    Ok(())
}
