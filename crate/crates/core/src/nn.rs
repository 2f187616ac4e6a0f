//! Parameter storage, common network blocks, and the AdamW optimizer.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. A forward pass
//! opens a [`Session`], which owns the tape and lazily binds parameters as
//! leaves, so gradients can be routed back to the store after `backward`.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Graph, Var};

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.values[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Xavier-uniform weight matrix.
    pub fn register_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha12Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-limit..limit));
        self.register(&format!("{prefix}.w"), w.into_dyn());
        self.register(&format!("{prefix}.b"), Array1::zeros(fan_out).into_dyn());
    }

    pub fn register_layernorm(&mut self, prefix: &str, dim: usize) {
        self.register(&format!("{prefix}.gamma"), Array1::ones(dim).into_dyn());
        self.register(&format!("{prefix}.beta"), Array1::zeros(dim).into_dyn());
    }

    /// Single-head attention: query/key/value/output projections.
    pub fn register_attention(&mut self, prefix: &str, dim: usize, rng: &mut ChaCha12Rng) {
        self.register_linear(&format!("{prefix}.wq"), dim, dim, rng);
        self.register_linear(&format!("{prefix}.wk"), dim, dim, rng);
        self.register_linear(&format!("{prefix}.wv"), dim, dim, rng);
        self.register_linear(&format!("{prefix}.wo"), dim, dim, rng);
    }

    pub fn register_embedding(&mut self, name: &str, count: usize, dim: usize, rng: &mut ChaCha12Rng) {
        let e = Array2::from_shape_fn((count, dim), |_| rng.gen_range(-0.02..0.02));
        self.register(name, e.into_dyn());
    }
}

/// One forward pass: a tape plus the parameter leaves bound so far.
pub struct Session<'p> {
    pub g: Graph,
    store: &'p ParamStore,
    bound: HashMap<String, Var>,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: HashMap::new(),
        }
    }

    /// Bind a parameter as a tape leaf (cached per session).
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = self.g.leaf(self.store.get(name).clone());
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Run backward from a scalar loss and collect gradients per bound
    /// parameter name. Parameters that did not influence the loss are absent.
    pub fn param_grads(&self, loss: Var) -> HashMap<String, ArrayD<f64>> {
        let grads = self.g.backward(loss);
        let mut out = HashMap::new();
        for (name, var) in &self.bound {
            if let Some(g) = &grads[var.0] {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    pub fn linear(&mut self, prefix: &str, x: Var) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let xw = self.g.matmul(x, w);
        self.g.add_bias(xw, b)
    }

    pub fn layernorm(&mut self, prefix: &str, x: Var) -> Var {
        let gamma = self.p(&format!("{prefix}.gamma"));
        let beta = self.p(&format!("{prefix}.beta"));
        self.g.layernorm_rows(x, gamma, beta, 1e-6)
    }

    /// Two-layer MLP with ReLU in between.
    pub fn mlp(&mut self, prefix: &str, x: Var) -> Var {
        let h = self.linear(&format!("{prefix}.fc1"), x);
        let h = self.g.relu(h);
        self.linear(&format!("{prefix}.fc2"), h)
    }

    /// Single-head scaled dot-product attention with a per-(query, key)
    /// validity mask. Query rows with no valid key yield an all-zero output
    /// row (including after the output projection).
    pub fn attention(&mut self, prefix: &str, q: Var, kv: Var, mask: &Array2<bool>) -> Var {
        let dim = self.g.value2(q).ncols();
        let qp = self.linear(&format!("{prefix}.wq"), q);
        let kp = self.linear(&format!("{prefix}.wk"), kv);
        let vp = self.linear(&format!("{prefix}.wv"), kv);
        let kt = self.g.transpose2(kp);
        let logits = self.g.matmul(qp, kt);
        let logits = self.g.scale(logits, 1.0 / (dim as f64).sqrt());
        let probs = self.g.masked_softmax_rows(logits, mask);
        let mixed = self.g.matmul(probs, vp);
        let out = self.linear(&format!("{prefix}.wo"), mixed);
        // Rows with no valid keys must contribute exactly zero to the
        // residual stream, so the output-projection bias is struck out there.
        let row_valid = Array1::from_iter(
            mask.outer_iter()
                .map(|r| if r.iter().any(|&b| b) { 1.0 } else { 0.0 }),
        );
        if row_valid.iter().all(|&f| f == 1.0) {
            out
        } else {
            self.g.scale_rows_const(out, &row_valid)
        }
    }

    /// Pre-norm residual cross-attention block. Skipped entirely (bitwise
    /// identity) when the mask has no valid entry.
    pub fn attn_block(&mut self, prefix: &str, x: Var, kv: Var, mask: &Array2<bool>) -> Var {
        if !mask.iter().any(|&b| b) {
            return x;
        }
        let xn = self.layernorm(&format!("{prefix}.ln"), x);
        // normalize the kv stream as well; raw features can carry meter
        // scale magnitudes that would otherwise dominate the residual
        let kvn = self.layernorm(&format!("{prefix}.kvln"), kv);
        let a = self.attention(prefix, xn, kvn, mask);
        self.g.add(x, a)
    }

    /// Pre-norm residual self-attention applied independently inside each
    /// group of row indices of `x`.
    pub fn grouped_self_attn(&mut self, prefix: &str, x: Var, groups: &[Vec<usize>]) -> Var {
        let n = self.g.value2(x).nrows();
        let xn = self.layernorm(&format!("{prefix}.ln"), x);
        let mut parts = Vec::with_capacity(groups.len());
        let mut order = Vec::with_capacity(n);
        for group in groups {
            let sub = self.g.select_rows(xn, group);
            let mask = Array2::from_elem((group.len(), group.len()), true);
            let a = self.attention(prefix, sub, sub, &mask);
            parts.push(a);
            order.extend_from_slice(group);
        }
        debug_assert_eq!(order.len(), n);
        let cat = self.g.concat_rows(&parts);
        // Undo the grouping permutation.
        let mut inverse = vec![0usize; n];
        for (pos, &row) in order.iter().enumerate() {
            inverse[row] = pos;
        }
        let restored = self.g.select_rows(cat, &inverse);
        self.g.add(x, restored)
    }

    /// Pre-norm residual feed-forward block.
    pub fn ffn_block(&mut self, prefix: &str, x: Var) -> Var {
        let xn = self.layernorm(&format!("{prefix}.ln"), x);
        let h = self.mlp(prefix, xn);
        self.g.add(x, h)
    }
}

/// Register the parameter set of one pre-norm residual block family.
pub fn register_attn_block(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut ChaCha12Rng) {
    store.register_attention(prefix, dim, rng);
    store.register_layernorm(&format!("{prefix}.ln"), dim);
    store.register_layernorm(&format!("{prefix}.kvln"), dim);
}

pub fn register_ffn_block(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut ChaCha12Rng) {
    store.register_linear(&format!("{prefix}.fc1"), dim, hidden, rng);
    store.register_linear(&format!("{prefix}.fc2"), hidden, dim, rng);
    store.register_layernorm(&format!("{prefix}.ln"), dim);
}

/// AdamW with decoupled weight decay and cosine-annealed learning rate.
pub struct AdamW {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Total steps for the cosine schedule.
    pub total_steps: usize,
    step: usize,
    m: HashMap<String, ArrayD<f64>>,
    v: HashMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(base_lr: f64, weight_decay: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        let t = (self.step as f64 / self.total_steps.max(1) as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Apply one update. Only parameters present in `grads` are touched, so
    /// a perception-stage run leaves planning parameters untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<String, ArrayD<f64>>) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as f64;
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort(); // deterministic update order
        for name in names {
            let g = &grads[name];
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *m = m.mapv(|x| x * self.beta1) + g.mapv(|x| x * (1.0 - self.beta1));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *v = v.mapv(|x| x * self.beta2) + g.mapv(|x| x * x * (1.0 - self.beta2));
            let mhat = m.mapv(|x| x / (1.0 - self.beta1.powf(t)));
            let vhat = v.mapv(|x| x / (1.0 - self.beta2.powf(t)));
            let p = store.get_mut(name);
            let update =
                &mhat / &vhat.mapv(|x| x.sqrt() + self.eps) + p.mapv(|x| x * self.weight_decay);
            *p -= &update.mapv(|x| x * lr);
        }
    }
}

/// Zero-filled dynamic array helper.
pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}
