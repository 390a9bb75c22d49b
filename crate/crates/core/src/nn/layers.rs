use rand::Rng;
use thiserror::Error;

use super::params::{ParamId, ParamSet, StatUpdate};
use super::tape::{AttnLayout, Graph, Var};
use super::tensor::Real;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NnError {
    #[error("attention over an empty sequence")]
    EmptySequence,
    #[error("every attention entry is masked")]
    AllMasked,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("train-mode batch norm needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics and record running-stat updates.
    Train,
    /// Normalise with running statistics.
    Eval,
}

/// `y = x W^T (+ b)`, weight stored `d_out x d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        p: &mut ParamSet<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = p.uniform(&format!("{name}.w"), d_out, d_in, d_in, rng);
        let b = bias.then(|| p.uniform(&format!("{name}.b"), 1, d_out, d_in, rng));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.linear(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Feed-forward stack with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [d_in, h_1, .., d_out]`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        p: &mut ParamSet<T>,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(p, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Var {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.relu(x);
            }
            x = l.forward(g, x);
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub d_key: usize,
    pub d_value: usize,
    pub heads: usize,
}

impl AttnConfig {
    /// `d_out = d_in`, `d_key = d_value = d_in / heads`.
    pub fn new(d_in: usize, heads: usize) -> Self {
        Self {
            d_in,
            d_out: d_in,
            d_key: d_in / heads,
            d_value: d_in / heads,
            heads,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.heads == 0 || self.d_in % self.heads != 0 {
            return Err(NnError::Shape(format!(
                "{} heads do not divide d_in {}",
                self.heads, self.d_in
            )));
        }
        if self.d_key == 0 || self.d_value == 0 || self.d_out == 0 {
            return Err(NnError::Shape("attention widths must be positive".into()));
        }
        Ok(())
    }

    /// Width `d_in / H` of one input slice.
    pub fn slice(&self) -> usize {
        self.d_in / self.heads
    }
}

/// Multi-head attention where head `h` reads the contiguous input slice `h`
/// and the head outputs are mixed by `W^head_h` and summed.
///
/// Per-head matrices are stacked by rows: `wq`, `wk` are `H*d_key x d_in/H`,
/// `wv` is `H*d_value x d_in/H`, and `wo` is `d_out x H*d_value` so that its
/// column block `h` is `W^head_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mha {
    pub cfg: AttnConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl Mha {
    pub fn new<T: Real, R: Rng + ?Sized>(
        p: &mut ParamSet<T>,
        name: &str,
        cfg: AttnConfig,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        cfg.validate()?;
        let (h, s) = (cfg.heads, cfg.slice());
        Ok(Self {
            cfg,
            wq: p.uniform(&format!("{name}.wq"), h * cfg.d_key, s, s, rng),
            wk: p.uniform(&format!("{name}.wk"), h * cfg.d_key, s, s, rng),
            wv: p.uniform(&format!("{name}.wv"), h * cfg.d_value, s, s, rng),
            wo: p.uniform(
                &format!("{name}.wo"),
                cfg.d_out,
                h * cfg.d_value,
                h * cfg.d_value,
                rng,
            ),
        })
    }

    /// Keys and values projected once, for reuse across queries.
    pub fn project_kv<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        zs: Var,
    ) -> Result<(Var, Var), NnError> {
        self.check_width(g, zs)?;
        let (wk, wv) = (g.param(self.wk), g.param(self.wv));
        let k = g.grouped_linear(zs, wk, self.cfg.heads);
        let v = g.grouped_linear(zs, wv, self.cfg.heads);
        Ok((k, v))
    }

    fn check_width<T: Real>(&self, g: &Graph<'_, T>, x: Var) -> Result<(), NnError> {
        if g.shape(x).1 != self.cfg.d_in {
            return Err(NnError::Shape(format!(
                "expected width {}, got {}",
                self.cfg.d_in,
                g.shape(x).1
            )));
        }
        Ok(())
    }

    /// Attention of the queries `z` over `zs`. Rows are split into blocks:
    /// query block `b` (of `q_block` rows) attends to key block `b`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        z: Var,
        zs: Var,
        q_block: usize,
        k_block: usize,
        mask: Option<Vec<bool>>,
    ) -> Result<Var, NnError> {
        let (k, v) = self.project_kv(g, zs)?;
        self.forward_projected(g, z, k, v, q_block, k_block, mask)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward_projected<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        z: Var,
        k: Var,
        v: Var,
        q_block: usize,
        k_block: usize,
        mask: Option<Vec<bool>>,
    ) -> Result<Var, NnError> {
        self.check_width(g, z)?;
        if k_block == 0 || g.shape(k).0 == 0 {
            return Err(NnError::EmptySequence);
        }
        if let Some(m) = &mask {
            if m.len() != g.shape(k).0 {
                return Err(NnError::Shape("mask length differs from key count".into()));
            }
            if m.chunks(k_block).any(|c| !c.iter().any(|&b| b)) {
                return Err(NnError::AllMasked);
            }
        }
        if g.shape(z).0 % q_block != 0
            || g.shape(k).0 % k_block != 0
            || g.shape(z).0 / q_block != g.shape(k).0 / k_block
        {
            return Err(NnError::Shape("query and key blocks do not pair up".into()));
        }
        let wq = g.param(self.wq);
        let q = g.grouped_linear(z, wq, self.cfg.heads);
        let layout = AttnLayout {
            heads: self.cfg.heads,
            q_block,
            k_block,
            mask,
        };
        let heads = g.attention(q, k, v, layout);
        let wo = g.param(self.wo);
        Ok(g.linear(heads, wo))
    }
}

/// Single-head attention `sum_j attn_j W^value Z_j` with weights stored
/// `d_key x d_in` (query, key) and `d_out x d_in` (value).
pub fn sha<T: Real>(
    g: &mut Graph<'_, T>,
    z: Var,
    zs: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<Var, NnError> {
    if g.shape(zs).0 == 0 {
        return Err(NnError::EmptySequence);
    }
    let q = g.linear(z, wq);
    let k = g.linear(zs, wk);
    let v = g.linear(zs, wv);
    let n = g.shape(zs).0;
    let rows = g.shape(z).0;
    let layout = AttnLayout {
        heads: 1,
        q_block: rows,
        k_block: n,
        mask: None,
    };
    Ok(g.attention(q, k, v, layout))
}

/// Attention weights `softmax(z^T Wq^T Wk Z_j / sqrt(d_key))` over the
/// unmasked `Z_j`, as a `1 x |Z|` row.
pub fn attn_weights<T: Real>(
    g: &mut Graph<'_, T>,
    z: Var,
    zs: Var,
    wq: Var,
    wk: Var,
    mask: Option<&[bool]>,
) -> Result<Var, NnError> {
    let n = g.shape(zs).0;
    if n == 0 {
        return Err(NnError::EmptySequence);
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(NnError::Shape(
                "mask length differs from sequence length".into(),
            ));
        }
        if !m.iter().any(|&b| b) {
            return Err(NnError::AllMasked);
        }
    }
    let d_key = g.shape(wq).0;
    let q = g.linear(z, wq);
    let k = g.linear(zs, wk);
    let s = g.matmul_t(q, false, k, true);
    let s = g.scale(s, T::one() / T::of(d_key as f64).sqrt());
    Ok(g.softmax(s, mask))
}

/// Per-feature batch normalisation with learnable affine `W`, `b` and
/// running statistics (momentum 0.1) for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub w: ParamId,
    pub b: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(p: &mut ParamSet<T>, name: &str, d: usize) -> Self {
        Self {
            w: p.constant(&format!("{name}.w"), 1, d, 1.0),
            b: p.constant(&format!("{name}.b"), 1, d, 0.0),
            running_mean: p.buffer(&format!("{name}.running_mean"), 1, d, 0.0),
            running_var: p.buffer(&format!("{name}.running_var"), 1, d, 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Statistics are taken over all rows, i.e. over batch and sequence.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        mode: BnMode,
    ) -> Result<Var, NnError> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let eps = T::of(self.eps);
        match mode {
            BnMode::Train => {
                let n = g.shape(x).0;
                if n < 2 {
                    return Err(NnError::BatchTooSmall(n));
                }
                let (mean, var) = g.column_stats(x);
                let unbias = T::of(n as f64 / (n as f64 - 1.0));
                let momentum = T::of(self.momentum);
                g.push_stat_update(StatUpdate {
                    buffer: self.running_mean,
                    batch: mean,
                    momentum,
                });
                g.push_stat_update(StatUpdate {
                    buffer: self.running_var,
                    batch: var.iter().map(|&v| v * unbias).collect(),
                    momentum,
                });
                Ok(g.batch_norm(x, w, b, eps, None))
            }
            BnMode::Eval => {
                let params = g.params();
                let (m, v) = (
                    params.value(self.running_mean).data(),
                    params.value(self.running_var).data(),
                );
                Ok(g.batch_norm(x, w, b, eps, Some((m, v))))
            }
        }
    }
}

/// `BN(FF_res(BN(MHA_res(z_i, Z))))` with `FF(z) = max(0, W z + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaBlock {
    pub mha: Mha,
    pub bn1: BatchNorm,
    pub ff: Linear,
    pub bn2: BatchNorm,
}

impl SaBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        p: &mut ParamSet<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Ok(Self {
            mha: Mha::new(p, &format!("{name}.mha"), AttnConfig::new(d, heads), rng)?,
            bn1: BatchNorm::new(p, &format!("{name}.bn1"), d),
            ff: Linear::new(p, &format!("{name}.ff"), d, d, true, rng),
            bn2: BatchNorm::new(p, &format!("{name}.bn2"), d),
        })
    }

    /// `z` stacks several sequences of `seq_len` rows; attention stays
    /// within a sequence while batch norm spans all rows.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        z: Var,
        seq_len: usize,
        mode: BnMode,
    ) -> Result<Var, NnError> {
        let a = self.mha.forward(g, z, z, seq_len, seq_len, None)?;
        let h = g.add(z, a);
        let h = self.bn1.forward(g, h, mode)?;
        let f = self.ff.forward(g, h);
        let f = g.relu(f);
        let h2 = g.add(h, f);
        self.bn2.forward(g, h2, mode)
    }
}
