//! Named parameter storage, initialization, and the AdamW optimizer.
//!
//! Models own a [`ParamStore`]; every training step binds the store onto a
//! fresh [`Tape`] (copying current values in as leaves), runs the forward
//! pass, backprops, and hands the per-name gradients to [`AdamW::step`].

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Grads, Tape, Var};
use crate::scalar::{c, Scalar};

/// Ordered collection of named tensors.
///
/// Insertion order is preserved so checkpoints and parameter walks are
/// deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<ArrayD<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
        }
    }

    /// Registers a tensor under a unique name.
    pub fn insert(&mut self, name: &str, value: ArrayD<T>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name: {name}"
        );
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<T> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"));
        &self.values[idx]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<T> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"));
        &mut self.values[idx]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Parameter names in insertion order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar elements across all tensors.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Iterates `(name, tensor)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names
            .iter()
            .map(move |n| (n.as_str(), &self.values[self.index[n]]))
    }

    /// Copies every parameter onto `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let mut vars = HashMap::with_capacity(self.names.len());
        for (name, value) in self.iter() {
            vars.insert(name.to_string(), tape.leaf(value.clone()));
        }
        BoundParams { vars }
    }

    /// Copies every parameter onto `tape` as a constant (frozen weights;
    /// gradients will not flow into them and backward skips their subgraph).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundParams {
        let mut vars = HashMap::with_capacity(self.names.len());
        for (name, value) in self.iter() {
            vars.insert(name.to_string(), tape.constant(value.clone()));
        }
        BoundParams { vars }
    }
}

/// Map from parameter names to tape variables for one forward pass.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter not bound: {name}"))
    }

    /// Collects gradients per parameter name after a backward pass.
    pub fn grads<T: Scalar>(&self, grads: &Grads<T>) -> HashMap<String, ArrayD<T>> {
        let mut out = HashMap::with_capacity(self.vars.len());
        for (name, &var) in &self.vars {
            if let Some(g) = grads.get(var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

/// Gaussian init with the given standard deviation.
pub fn init_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    let mut a = ArrayD::<T>::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = T::std_normal(rng) * c::<T>(std);
    }
    a
}

/// Kaiming-style init: std = sqrt(2 / fan_in).
pub fn init_kaiming<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    init_normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

/// Variance-preserving init: std = sqrt(1 / fan_in). Used for deep stacks
/// whose activations are near-identity (snake, residual paths), where a
/// gain of 2 per layer would compound into overflow.
pub fn init_lecun<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    init_normal(rng, shape, (1.0 / fan_in as f64).sqrt())
}

/// All-zero init (biases, output projections that should start inert).
pub fn init_zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// Per-step statistics reported by the optimizer.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Scale factor applied to gradients (1.0 when no clipping happened).
    pub clip_scale: f64,
}

/// AdamW with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: HashMap<String, ArrayD<T>>,
    v: HashMap<String, ArrayD<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Number of completed optimizer steps.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Computes the global L2 norm across all gradient tensors.
    pub fn global_grad_norm(grads: &HashMap<String, ArrayD<T>>) -> f64 {
        let mut acc = 0.0f64;
        for g in grads.values() {
            for &x in g.iter() {
                let x = x.to_f64c();
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    /// Applies one AdamW update. When `clip_norm` is set and the global
    /// gradient norm exceeds it, all gradients are scaled down so the global
    /// norm equals `clip_norm` exactly.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &HashMap<String, ArrayD<T>>,
        clip_norm: Option<f64>,
    ) -> StepStats {
        let grad_norm = Self::global_grad_norm(grads);
        let clip_scale = match clip_norm {
            Some(max) if grad_norm > max && grad_norm > 0.0 => max / grad_norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (c::<T>(self.beta1), c::<T>(self.beta2));
        let one_m_b1 = c::<T>(1.0 - self.beta1);
        let one_m_b2 = c::<T>(1.0 - self.beta2);
        let scale = c::<T>(clip_scale);
        let lr = c::<T>(self.lr);
        let eps = c::<T>(self.eps);
        let wd = c::<T>(self.weight_decay * self.lr);
        let inv_bc1 = c::<T>(1.0 / bc1);
        let inv_bc2 = c::<T>(1.0 / bc2);

        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let p = params.get_mut(name);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = b1 * *m + one_m_b1 * g;
                    *v = b2 * *v + one_m_b2 * g * g;
                    let m_hat = *m * inv_bc1;
                    let v_hat = *v * inv_bc2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps) - wd * *p;
                });
        }
        StepStats {
            grad_norm,
            clip_scale,
        }
    }

    /// Optimizer state tensors for checkpointing: `("adam.m.<name>", m)` and
    /// `("adam.v.<name>", v)` pairs plus the step counter.
    pub fn state_tensors(&self) -> Vec<(String, ArrayD<T>)> {
        let mut out = Vec::new();
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        for name in names {
            out.push((format!("adam.m.{name}"), self.m[name].clone()));
            out.push((format!("adam.v.{name}"), self.v[name].clone()));
        }
        out
    }

    /// Restores optimizer state written by [`AdamW::state_tensors`].
    pub fn load_state(&mut self, step: u64, tensors: &HashMap<String, ArrayD<T>>) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (key, value) in tensors {
            if let Some(name) = key.strip_prefix("adam.m.") {
                self.m.insert(name.to_string(), value.clone());
            } else if let Some(name) = key.strip_prefix("adam.v.") {
                self.v.insert(name.to_string(), value.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr1;

    #[test]
    fn clipping_rescales_to_the_requested_global_norm() {
        let mut params = ParamStore::<f64>::new();
        params.insert("w", arr1(&[0.0, 0.0]).into_dyn());
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), arr1(&[30.0, 40.0]).into_dyn());
        let mut opt = AdamW::new(0.1, 0.0);
        let stats = opt.step(&mut params, &grads, Some(5.0));
        assert_relative_eq!(stats.grad_norm, 50.0, epsilon = 1e-12);
        assert_relative_eq!(stats.clip_scale, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr_against_gradient_sign() {
        // With bias correction, the very first Adam step is lr * sign(g).
        let mut params = ParamStore::<f64>::new();
        params.insert("w", arr1(&[1.0, -1.0]).into_dyn());
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), arr1(&[0.5, -2.0]).into_dyn());
        let mut opt = AdamW::new(0.01, 0.0);
        opt.step(&mut params, &grads, None);
        let w = params.get("w");
        assert_relative_eq!(w[[0]], 1.0 - 0.01, epsilon = 1e-6);
        assert_relative_eq!(w[[1]], -1.0 + 0.01, epsilon = 1e-6);
    }

    #[test]
    fn state_round_trip_preserves_moments() {
        let mut params = ParamStore::<f64>::new();
        params.insert("w", arr1(&[1.0]).into_dyn());
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), arr1(&[0.3]).into_dyn());
        let mut opt = AdamW::new(0.01, 0.0);
        opt.step(&mut params, &grads, None);

        let state: HashMap<String, ArrayD<f64>> = opt.state_tensors().into_iter().collect();
        let mut opt2 = AdamW::new(0.01, 0.0);
        opt2.load_state(opt.steps_taken(), &state);

        let mut pa = params.clone();
        let mut pb = params.clone();
        opt.step(&mut pa, &grads, None);
        opt2.step(&mut pb, &grads, None);
        assert_eq!(pa.get("w"), pb.get("w"));
    }

    #[test]
    fn bind_frozen_blocks_gradients() {
        let mut params = ParamStore::<f64>::new();
        params.insert("w", arr1(&[2.0, 3.0]).into_dyn());
        let mut tape = Tape::<f64>::new();
        let bound = params.bind_frozen(&mut tape);
        let w = bound.var("w");
        let y = tape.square(w);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert!(grads.get(w).is_none());
    }
}
