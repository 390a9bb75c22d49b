use crate::nn::{CheckpointError, Gradients, ParamSet, Record, Tensor};

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    m: Vec<Option<Tensor<f32>>>,
    v: Vec<Option<Tensor<f32>>>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let zeros = |id| {
            params.get(id).trainable.then(|| {
                let (r, c) = params.value(id).shape();
                Tensor::zeros(r, c)
            })
        };
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: ids.iter().map(|&id| zeros(id)).collect(),
            v: ids.iter().map(|&id| zeros(id)).collect(),
        }
    }

    /// One update of every trainable array; missing gradients count as zero.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &Gradients<f32>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = params.trainable().collect();
        for id in ids {
            let i = id.index();
            let (m, v) = (self.m[i].as_mut().unwrap(), self.v[i].as_mut().unwrap());
            let g = grads.get(id);
            let w = params.get_mut(id).value.data_mut();
            for j in 0..w.len() {
                let gj = g.map_or(0.0, |g| g.data()[j] as f64);
                let mj = b1 * m.data()[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v.data()[j] as f64 + (1.0 - b2) * gj * gj;
                m.data_mut()[j] = mj as f32;
                v.data_mut()[j] = vj as f32;
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                w[j] = (w[j] as f64 - update) as f32;
            }
        }
    }

    /// Moments as `adam.m/<name>` and `adam.v/<name>` records.
    pub fn to_records(&self, params: &ParamSet<f32>) -> Vec<Record> {
        let mut out = Vec::new();
        for (prefix, moments) in [("adam.m/", &self.m), ("adam.v/", &self.v)] {
            for (id, a) in params.iter() {
                if let Some(t) = &moments[id.index()] {
                    out.push(Record {
                        name: format!("{prefix}{}", a.name),
                        dims: vec![t.rows(), t.cols()],
                        values: t.data().to_vec(),
                    });
                }
            }
        }
        out
    }

    pub fn load_records(
        &mut self,
        params: &ParamSet<f32>,
        records: &[Record],
        t: u64,
    ) -> Result<(), CheckpointError> {
        for (prefix, moments) in [("adam.m/", &mut self.m), ("adam.v/", &mut self.v)] {
            for (id, a) in params.iter() {
                let Some(dst) = moments[id.index()].as_mut() else {
                    continue;
                };
                let key = format!("{prefix}{}", a.name);
                let r = records
                    .iter()
                    .find(|r| r.name == key)
                    .ok_or_else(|| CheckpointError::Missing(key.clone()))?;
                if r.dims != [dst.rows(), dst.cols()] {
                    return Err(CheckpointError::Shape {
                        name: key,
                        expected: vec![dst.rows(), dst.cols()],
                        found: r.dims.clone(),
                    });
                }
                dst.data_mut().copy_from_slice(&r.values);
            }
        }
        self.t = t;
        Ok(())
    }
}

/// `η_t = η_{t-1} / (1 + γ t)` with `η_0 = lr0`.
pub fn lr_schedule(lr0: f64, gamma: f64, t: usize) -> f64 {
    (1..=t).fold(lr0, |lr, s| lr / (1.0 + gamma * s as f64))
}
