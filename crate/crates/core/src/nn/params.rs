use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named parameter matrix. Non-trainable buffers (batch-norm running
/// statistics) use the same type and never receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> ParamArray<T> {
    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn assert_finite(&self) {
        assert!(
            self.value.is_finite(),
            "parameter `{}` holds a non-finite value",
            self.name
        );
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    arrays: Vec<ParamArray<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            arrays: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn push(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter `{name}`"
        );
        let id = ParamId(self.arrays.len());
        self.arrays.push(ParamArray {
            name: name.to_string(),
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Trainable matrix drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        self.push(name, Tensor::from_vec(rows, cols, data), true)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.push(name, Tensor::filled(rows, cols, T::of(v)), true)
    }

    pub fn buffer(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.push(name, Tensor::filled(rows, cols, T::of(v)), false)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamArray<T> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamArray<T> {
        &mut self.arrays[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.arrays[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamArray<T>)> {
        self.arrays.iter().enumerate().map(|(i, a)| (ParamId(i), a))
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(|(_, a)| a.trainable).map(|(id, _)| id)
    }

    /// Number of trainable scalars.
    pub fn n_scalars(&self) -> usize {
        self.arrays
            .iter()
            .filter(|a| a.trainable)
            .map(|a| a.value.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            arrays: self
                .arrays
                .iter()
                .map(|a| ParamArray {
                    name: a.name.clone(),
                    value: a.value.cast(),
                    trainable: a.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Applies running-statistic updates recorded by train-mode batch norms.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>]) {
        for u in updates {
            let a = &mut self.arrays[u.buffer.0];
            assert!(!a.trainable, "stat update targets trainable `{}`", a.name);
            let m = u.momentum;
            for (r, &s) in a.value.data_mut().iter_mut().zip(&u.batch) {
                *r = (T::one() - m) * *r + m * s;
            }
        }
    }

    pub fn to_records(&self, prefix: &str) -> Vec<Record> {
        self.arrays
            .iter()
            .map(|a| Record {
                name: format!("{prefix}{}", a.name),
                dims: vec![a.value.rows(), a.value.cols()],
                values: a.value.data().iter().map(|x| x.f64() as f32).collect(),
            })
            .collect()
    }

    /// Overwrites every array from records named `prefix + name`.
    pub fn load_records(
        &mut self,
        records: &[Record],
        prefix: &str,
    ) -> Result<(), CheckpointError> {
        let index: HashMap<&str, &Record> = records.iter().map(|r| (r.name.as_str(), r)).collect();
        for a in &mut self.arrays {
            let key = format!("{prefix}{}", a.name);
            let r = index
                .get(key.as_str())
                .ok_or_else(|| CheckpointError::Missing(key.clone()))?;
            if r.dims != [a.value.rows(), a.value.cols()] {
                return Err(CheckpointError::Shape {
                    name: key,
                    expected: vec![a.value.rows(), a.value.cols()],
                    found: r.dims.clone(),
                });
            }
            for (dst, &src) in a.value.data_mut().iter_mut().zip(&r.values) {
                *dst = T::of(src as f64);
            }
        }
        Ok(())
    }
}

/// Pending exponential update of a running-statistics buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate<T> {
    pub buffer: ParamId,
    pub batch: Vec<T>,
    pub momentum: T,
}

/// Gradient arrays aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn new(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    pub fn for_params(params: &ParamSet<T>) -> Self {
        Self::new(params.len())
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients<T>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.grads
            .iter_mut()
            .flatten()
            .for_each(|g| g.scale_assign(s));
    }

    pub fn norm(&self) -> T {
        let sq: f64 = self
            .grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|x| x.f64() * x.f64())
            .sum();
        T::of(sq.sqrt())
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_norm(&mut self, max_norm: T) -> T {
        let norm = self.norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (expected `CKPT v1` header)")]
    Header,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint record `{0}` is missing")]
    Missing(String),
    #[error("record `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One named array in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl Record {
    pub fn scalar(name: &str, v: f32) -> Self {
        Self {
            name: name.to_string(),
            dims: vec![1],
            values: vec![v],
        }
    }
}

/// `CKPT v1\n<meta>\n` followed by records of
/// `u32 name_len, name, u32 ndims, u32 dims.., f32 values..`, all little endian.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn scalar(&self, name: &str) -> Option<f32> {
        self.record(name).and_then(|r| r.values.first().copied())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        assert!(
            !self.meta.contains('\n'),
            "checkpoint meta must be one line"
        );
        let mut out = format!("CKPT v1\n{}\n", self.meta).into_bytes();
        for r in &self.records {
            out.extend((r.name.len() as u32).to_le_bytes());
            out.extend(r.name.as_bytes());
            out.extend((r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                out.extend((d as u32).to_le_bytes());
            }
            for v in &r.values {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let header = b"CKPT v1\n";
        if !bytes.starts_with(header) {
            return Err(CheckpointError::Header);
        }
        let rest = &bytes[header.len()..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(CheckpointError::Truncated)?;
        let meta = String::from_utf8_lossy(&rest[..nl]).into_owned();
        let mut cur = &rest[nl + 1..];
        let mut take = |n: usize| -> Result<&[u8], CheckpointError> {
            if cur.len() < n {
                return Err(CheckpointError::Truncated);
            }
            let (a, b) = cur.split_at(n);
            cur = b;
            Ok(a)
        };
        let mut records = Vec::new();
        loop {
            let len_bytes = match take(4) {
                Ok(b) => b,
                Err(_) => break,
            };
            let name_len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
            let name = String::from_utf8_lossy(take(name_len)?).into_owned();
            let ndims = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut dims = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                dims.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            let count: usize = dims.iter().product();
            let raw = take(4 * count)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(Record { name, dims, values });
        }
        if !cur.is_empty() {
            return Err(CheckpointError::Truncated);
        }
        Ok(Self { meta, records })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
