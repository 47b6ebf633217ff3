use crate::nn::{ParamGrads, ParamStore, Tensor};

/// Adam moments for every tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f64, hp: AdamParams) {
        self.t += 1;
        let b1 = hp.beta1 as f32;
        let b2 = hp.beta2 as f32;
        let c1 = (1.0 - hp.beta1.powi(self.t as i32)) as f32;
        let c2 = (1.0 - hp.beta2.powi(self.t as i32)) as f32;
        let lr = lr as f32;
        let eps = hp.eps as f32;
        for (i, grad) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let g = grad.as_ref().map_or(0.0, |g| g.data()[k]);
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|t| t.data())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for t in grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}
