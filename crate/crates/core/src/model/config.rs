use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::env::{Variant, VariantKind};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    /// Joint vehicle x node action space with the fleet-aware context.
    Jampr,
    /// Sequential single-tour construction, context `[graph; Q_f; last]`.
    Am,
    /// [`PolicyKind::Am`] with the current time appended to the context.
    AmTw,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Jampr => "jampr",
            PolicyKind::Am => "am",
            PolicyKind::AmTw => "am-tw",
        }
    }

    pub fn is_am(self) -> bool {
        self != PolicyKind::Jampr
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "jampr" => Ok(PolicyKind::Jampr),
            "am" => Ok(PolicyKind::Am),
            "am-tw" | "amtw" | "am+tw" => Ok(PolicyKind::AmTw),
            _ => Err(format!("unknown policy `{s}` (expected jampr|am|am-tw)")),
        }
    }
}

/// Layer sizes of a policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub policy: PolicyKind,
    /// Whether nodes carry time-window features (5 inputs instead of 3).
    pub time_windows: bool,
    pub d_node: usize,
    pub heads: usize,
    pub enc_layers: usize,
    /// Width of the vehicle encoder `g_v`.
    pub veh_hidden: usize,
    pub veh_layers: usize,
    /// Width of the tour encoder `g_s`.
    pub tour_hidden: usize,
    pub tour_layers: usize,
    pub d_m: usize,
    pub dec_hidden: usize,
    pub dec_heads: usize,
    pub clip: u32,
}

impl ModelConfig {
    /// Full-size model: 3 SA blocks of width 128 with 8 heads, 64-wide
    /// vehicle (3 layers with windows, 1 without) and tour (2 layers)
    /// encoders, decoder width 256.
    pub fn paper(policy: PolicyKind, time_windows: bool) -> Self {
        Self {
            policy,
            time_windows,
            d_node: 128,
            heads: 8,
            enc_layers: 3,
            veh_hidden: 64,
            veh_layers: if time_windows { 3 } else { 1 },
            tour_hidden: 64,
            tour_layers: 2,
            d_m: 128,
            dec_hidden: 256,
            dec_heads: 8,
            clip: 10,
        }
    }

    /// Scaled-down model with node width `d`: encoders `d/2` wide, `d_M = d`,
    /// decoder `2d`.
    pub fn small(policy: PolicyKind, time_windows: bool, d: usize, heads: usize) -> Self {
        Self {
            d_node: d,
            heads,
            veh_hidden: d / 2,
            tour_hidden: d / 2,
            d_m: d,
            dec_hidden: 2 * d,
            dec_heads: heads,
            ..Self::paper(policy, time_windows)
        }
    }

    pub fn for_variant(policy: PolicyKind, variant: &Variant) -> Self {
        Self::paper(policy, variant.kind.has_time())
    }

    pub fn node_features(&self) -> usize {
        if self.time_windows {
            5
        } else {
            3
        }
    }

    pub fn d_vehicle(&self) -> usize {
        self.veh_hidden + self.tour_hidden
    }

    /// Width of the decoder context.
    pub fn d_context(&self) -> usize {
        match self.policy {
            PolicyKind::Jampr => 3 * self.d_node + 2 * self.d_vehicle(),
            PolicyKind::Am => 2 * self.d_node + 1,
            PolicyKind::AmTw => 2 * self.d_node + 2,
        }
    }

    /// Width of the rows attended by the decoder.
    pub fn d_action(&self) -> usize {
        match self.policy {
            PolicyKind::Jampr => self.d_m,
            _ => self.d_node,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_node == 0 || self.heads == 0 || self.d_node % self.heads != 0 {
            return bad(format!(
                "{} heads must divide d_node {}",
                self.heads, self.d_node
            ));
        }
        if self.dec_heads == 0 || self.dec_hidden % self.dec_heads != 0 {
            return bad(format!(
                "{} decoder heads must divide {}",
                self.dec_heads, self.dec_hidden
            ));
        }
        if self.policy == PolicyKind::Jampr {
            if self.d_vehicle() != self.d_node {
                return bad("the action encoder needs d_vehicle = d_node".into());
            }
            if self.veh_layers == 0 || self.tour_layers == 0 || self.d_m == 0 {
                return bad("vehicle, tour and action widths must be positive".into());
            }
        }
        if self.clip == 0 {
            return bad("logit clip must be positive".into());
        }
        Ok(())
    }

    /// Checks a policy/variant pairing: AM serves plain CVRP, AM+TW the
    /// window variants, JAMPR both.
    pub fn check_variant(&self, variant: &Variant) -> Result<(), ModelError> {
        let time = variant.kind.has_time();
        if time != self.time_windows {
            return Err(ModelError::Config(format!(
                "model built {} time-window features cannot solve {}",
                if self.time_windows { "with" } else { "without" },
                variant.kind.as_str()
            )));
        }
        match (self.policy, variant.kind) {
            (PolicyKind::Am, k) if k != VariantKind::Cvrp => Err(ModelError::Config(
                "plain AM has no time context; use am-tw for window variants".into(),
            )),
            (PolicyKind::AmTw, VariantKind::Cvrp) => {
                Err(ModelError::Config("am-tw needs a window variant".into()))
            }
            _ => Ok(()),
        }
    }

    /// `key=value` pairs, space separated, for checkpoint headers.
    pub fn to_meta(&self) -> String {
        format!(
            "policy={} tw={} d_node={} heads={} enc_layers={} veh_hidden={} veh_layers={} tour_hidden={} tour_layers={} d_m={} dec_hidden={} dec_heads={} clip={}",
            self.policy,
            self.time_windows as u8,
            self.d_node,
            self.heads,
            self.enc_layers,
            self.veh_hidden,
            self.veh_layers,
            self.tour_hidden,
            self.tour_layers,
            self.d_m,
            self.dec_hidden,
            self.dec_heads,
            self.clip
        )
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self, ModelError> {
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| ModelError::Config(format!("checkpoint meta lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize, ModelError> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::Config(format!("bad `{k}` in checkpoint meta")))
        };
        let cfg = Self {
            policy: get("policy")?.parse().map_err(ModelError::Config)?,
            time_windows: num("tw")? != 0,
            d_node: num("d_node")?,
            heads: num("heads")?,
            enc_layers: num("enc_layers")?,
            veh_hidden: num("veh_hidden")?,
            veh_layers: num("veh_layers")?,
            tour_hidden: num("tour_hidden")?,
            tour_layers: num("tour_layers")?,
            d_m: num("d_m")?,
            dec_hidden: num("dec_hidden")?,
            dec_heads: num("dec_heads")?,
            clip: num("clip")? as u32,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `k=v k=v ...` into a map.
pub fn parse_meta(line: &str) -> BTreeMap<String, String> {
    line.split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
