use std::path::Path;

use rayon::prelude::*;

use crate::env::{CostBreakdown, EnvConfig, Solution, State, Variant, VariantKind};
use crate::instance::Instance;
use crate::nn::{BnMode, Checkpoint, CheckpointError, Graph, ParamSet, Record, Tensor};
use crate::rng::{derive_seed, stream, Stream};

use super::config::{parse_meta, ModelConfig};
use super::policy::{Policy, Selector};
use super::ModelError;

/// A finished construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub solution: Solution,
    pub cost: CostBreakdown,
    pub log_prob: f64,
    pub actions: Vec<usize>,
}

/// Lowest-cost rollout; the earliest wins ties.
pub fn best_rollout(rollouts: &[Rollout]) -> Option<&Rollout> {
    rollouts.iter().reduce(|best, r| {
        if r.cost.total < best.cost.total {
            r
        } else {
            best
        }
    })
}

/// The environment config a policy decodes with: AM policies always build
/// one tour at a time.
pub fn decode_config(
    policy: &Policy,
    variant: &Variant,
    env: &EnvConfig,
) -> Result<EnvConfig, ModelError> {
    policy.cfg.check_variant(variant)?;
    let mut env = *env;
    if policy.cfg.policy.is_am() {
        env.m_con = 1;
    }
    Ok(env)
}

fn decode_with(
    policy: &Policy,
    params: &ParamSet<f32>,
    inst: &Instance,
    variant: &Variant,
    env: &EnvConfig,
    node: &Tensor<f32>,
    select: Selector<'_, Stream>,
) -> Result<Rollout, ModelError> {
    let mut state = State::reset(inst, *variant, *env)?;
    let mut g = Graph::new(params);
    let node = g.constant(node.clone());
    let mut dec = policy.decoder(&mut g, node, &state)?;
    let r = dec.rollout(&mut g, &mut state, select, None)?;
    Ok(Rollout {
        log_prob: g.scalar(r.log_prob) as f64,
        solution: r.solution,
        cost: r.cost,
        actions: r.actions,
    })
}

/// Greedy construction with an arbitrary parameter set of `policy`.
pub fn greedy_with(
    policy: &Policy,
    params: &ParamSet<f32>,
    inst: &Instance,
    variant: &Variant,
    env: &EnvConfig,
) -> Result<Rollout, ModelError> {
    let env = decode_config(policy, variant, env)?;
    let mut g = Graph::new(params);
    let z = policy.encode(&mut g, &[inst], BnMode::Eval)?;
    let node = g.value(z).clone();
    decode_with(policy, params, inst, variant, &env, &node, Selector::Greedy)
}

/// What a checkpoint was trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelMeta {
    pub variant: VariantKind,
    pub m_con: usize,
}

/// A policy with its parameters, ready for inference.
#[derive(Debug, Clone)]
pub struct Model {
    pub policy: Policy,
    pub params: ParamSet<f32>,
    pub meta: ModelMeta,
}

impl Model {
    pub fn new(cfg: ModelConfig, meta: ModelMeta, seed: u64) -> Result<Self, ModelError> {
        cfg.check_variant(&Variant::standard(meta.variant))?;
        let (policy, params) = Policy::new(cfg, &mut stream(seed))?;
        Ok(Self {
            policy,
            params,
            meta,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.policy.cfg
    }

    /// Node embeddings in evaluation mode.
    pub fn encode(&self, inst: &Instance) -> Result<Tensor<f32>, ModelError> {
        let mut g = Graph::new(&self.params);
        let z = self.policy.encode(&mut g, &[inst], BnMode::Eval)?;
        Ok(g.value(z).clone())
    }

    fn env_config(&self, variant: &Variant, env: &EnvConfig) -> Result<EnvConfig, ModelError> {
        decode_config(&self.policy, variant, env)
    }

    fn decode(
        &self,
        inst: &Instance,
        variant: &Variant,
        env: &EnvConfig,
        node: &Tensor<f32>,
        select: Selector<'_, Stream>,
    ) -> Result<Rollout, ModelError> {
        decode_with(&self.policy, &self.params, inst, variant, env, node, select)
    }

    /// Greedy construction. AM policies always decode with `m_con = 1`.
    pub fn greedy(
        &self,
        inst: &Instance,
        variant: &Variant,
        env: &EnvConfig,
    ) -> Result<Rollout, ModelError> {
        let env = self.env_config(variant, env)?;
        let node = self.encode(inst)?;
        self.decode(inst, variant, &env, &node, Selector::Greedy)
    }

    /// `n` sampled constructions in parallel. Sample `j` draws from
    /// `derive_seed(seed, j)`, so the output does not depend on the thread
    /// count.
    pub fn sample(
        &self,
        inst: &Instance,
        variant: &Variant,
        env: &EnvConfig,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Rollout>, ModelError> {
        let env = self.env_config(variant, env)?;
        let node = self.encode(inst)?;
        (0..n)
            .into_par_iter()
            .map(|j| {
                let mut rng = stream(derive_seed(seed, j as u64));
                self.decode(inst, variant, &env, &node, Selector::Sample(&mut rng))
            })
            .collect()
    }

    /// Replays flat action indices and returns their log-probability.
    pub fn replay(
        &self,
        inst: &Instance,
        variant: &Variant,
        env: &EnvConfig,
        actions: &[usize],
    ) -> Result<Rollout, ModelError> {
        let env = self.env_config(variant, env)?;
        let node = self.encode(inst)?;
        self.decode(inst, variant, &env, &node, Selector::Forced(actions))
    }

    pub fn meta_line(&self) -> String {
        format!(
            "{} variant={} m_con={}",
            self.policy.cfg.to_meta(),
            self.meta.variant.as_str(),
            self.meta.m_con
        )
    }

    /// Parameters under `param/`, plus any extra records.
    pub fn to_checkpoint(&self, extra: Vec<Record>) -> Checkpoint {
        let mut records = self.params.to_records("param/");
        records.extend(extra);
        Checkpoint {
            meta: self.meta_line(),
            records,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(self.to_checkpoint(Vec::new()).save(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let meta = parse_meta(&ck.meta);
        let cfg = ModelConfig::from_meta(&meta)?;
        let variant: VariantKind = meta
            .get("variant")
            .ok_or_else(|| CheckpointError::Mismatch("meta lacks `variant`".into()))?
            .parse()
            .map_err(CheckpointError::Mismatch)?;
        let m_con = meta
            .get("m_con")
            .and_then(|s| s.parse().ok())
            .filter(|&m: &usize| m >= 1)
            .ok_or_else(|| CheckpointError::Mismatch("meta lacks a valid `m_con`".into()))?;
        let mut model = Self::new(cfg, ModelMeta { variant, m_con }, 0)?;
        model.params.load_records(&ck.records, "param/")?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Rejects use on a different variant than the one trained for.
    pub fn check_variant(&self, variant: VariantKind) -> Result<(), ModelError> {
        if variant != self.meta.variant {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint trained for {}, asked to solve {}",
                self.meta.variant.as_str(),
                variant.as_str()
            ))
            .into());
        }
        Ok(())
    }
}
