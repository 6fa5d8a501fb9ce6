//! Parameters, layers and optimisation state shared by every trainable model.

use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Named parameter matrices. Frozen entries never receive gradients.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>, trainable: bool) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: usize) -> &Mat<T> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Mat<T> {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Mat<T>] {
        &self.values
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.trainable[id]
    }

    pub fn set_trainable(&mut self, id: usize, on: bool) {
        self.trainable[id] = on;
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Replaces all values with `other`'s, which must have identical layout.
    pub fn load_values(&mut self, values: Vec<Mat<T>>) {
        assert_eq!(values.len(), self.values.len(), "parameter count mismatch");
        for (dst, src) in self.values.iter().zip(&values) {
            assert_eq!(dst.shape(), src.shape(), "parameter shape mismatch");
        }
        self.values = values;
    }
}

/// Weight initialisation for new layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `1/sqrt(fan_in)`.
    FanIn,
    /// Normal with the given std.
    Normal(f64),
    Zeros,
}

/// Affine map `x W + b` with `W: in x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::FanIn => Mat::randn(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng),
            Init::Normal(std) => Mat::randn(fan_in, fan_out, std, rng),
            Init::Zeros => Mat::zeros(fan_in, fan_out),
        };
        let w = store.add(format!("{name}.w"), w, true);
        let b = bias.then(|| store.add(format!("{name}.b"), Mat::zeros(1, fan_out), true));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + if self.b.is_some() { self.fan_out } else { 0 }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Mat<T>>,
    pub v: Vec<Mat<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = || store.values().iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with learning rate `lr`. Decay applies to weight
    /// matrices (`*.w`) only.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Mat<T>>], lr: f64) {
        self.step += 1;
        let b1 = T::c(self.beta1);
        let b2 = T::c(self.beta2);
        let c1 = T::c(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::c(1.0 - self.beta2.powi(self.step as i32));
        let eps = T::c(self.eps);
        let lr_t = T::c(lr);
        let decay = T::c(1.0 - lr * self.weight_decay);
        for id in 0..store.len() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = &grads[id] else { continue };
            let decays = store.name(id).ends_with(".w");
            let p = store.value_mut(id);
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (T::one() - b1) * gi;
                v.data[i] = b2 * v.data[i] + (T::one() - b2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                if decays {
                    p.data[i] *= decay;
                }
                p.data[i] -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<T: Scalar>(grads: &[Option<Mat<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.sq_norm().f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Mat<T>>], max_norm: f64) -> f64 {
    let n = grad_norm(grads);
    if n > max_norm && n.is_finite() {
        let s = T::c(max_norm / n);
        for g in grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
    n
}

/// Exponential moving average of parameter values.
#[derive(Clone, Debug)]
pub struct Ema<T> {
    pub decay: f64,
    pub shadow: Vec<Mat<T>>,
}

impl<T: Scalar> Ema<T> {
    pub fn new(store: &ParamStore<T>, decay: f64) -> Self {
        assert!(decay > 0.0 && decay < 1.0, "EMA decay must lie in (0, 1)");
        Self {
            decay,
            shadow: store.values().to_vec(),
        }
    }

    /// `shadow = decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, store: &ParamStore<T>) {
        let d = T::c(self.decay);
        let e = T::c(1.0 - self.decay);
        for (s, p) in self.shadow.iter_mut().zip(store.values()) {
            for (a, &b) in s.data.iter_mut().zip(&p.data) {
                *a = d * *a + e * b;
            }
        }
    }

    /// L2 distance between shadow and live parameters.
    pub fn distance(&self, store: &ParamStore<T>) -> f64 {
        self.shadow
            .iter()
            .zip(store.values())
            .map(|(s, p)| s.zip_map(p, |a, b| a - b).sq_norm().f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Linear warm-up from 0 to `peak` over `warmup` steps, then cosine decay
/// to 0 at `total`.
pub fn warmup_cosine_lr(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lr_schedule_endpoints() {
        assert_eq!(warmup_cosine_lr(0, 1e-4, 4000, 600_000), 0.0);
        assert!((warmup_cosine_lr(4000, 1e-4, 4000, 600_000) - 1e-4).abs() < 1e-18);
        assert!((warmup_cosine_lr(2000, 1e-4, 4000, 600_000) - 5e-5).abs() < 1e-18);
        assert!(warmup_cosine_lr(600_000, 1e-4, 4000, 600_000).abs() < 1e-18);
    }

    #[test]
    fn ema_single_step_definition() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p.w", Mat::filled(1, 2, 1.0), true);
        let mut ema = Ema::new(&store, 0.99);
        store.value_mut(id).data = vec![3.0, -1.0];
        ema.update(&store);
        assert!((ema.shadow[id].data[0] - (0.99 * 1.0 + 0.01 * 3.0)).abs() < 1e-15);
        assert!((ema.shadow[id].data[1] - (0.99 * 1.0 + -0.01)).abs() < 1e-15);
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 3, 1, true, Init::FanIn, &mut rng);
        let x = Mat::randn(16, 3, 1.0, &mut rng);
        let y = Mat::from_fn(16, 1, |r, _| x.at(r, 0) - 2.0 * x.at(r, 2) + 0.5);
        let mut opt = AdamW::new(&store, 0.0);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..500 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let p = lin.forward(&mut g, &store, xv);
            let l = g.weighted_sq_err(p, &y, &[1.0 / 16.0; 16]);
            last = g.scalar(l);
            first.get_or_insert(last);
            let grads = g.backward(l);
            let mut acc = vec![None; store.len()];
            grads.accumulate_into(&mut acc);
            opt.update(&mut store, &acc, 0.05);
        }
        assert!(last < first.unwrap() * 1e-3, "{last}");
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a.w", Mat::filled(2, 2, 1.0), false);
        let mut g = Graph::new();
        let x = g.constant(Mat::filled(1, 2, 1.0));
        let w = g.param(&store, a);
        let y = g.matmul(x, w);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.param(a).is_none());
    }
}
