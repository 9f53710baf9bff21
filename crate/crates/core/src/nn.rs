//! Parameter store, layers and the AdamW optimizer.
//!
//! Parameters live in named slots; each forward pass materializes a leaf
//! tensor per slot (cached per step so repeated access shares one leaf, and
//! gradients from every use accumulate in one place).

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Arr, Tensor};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in [-a, a].
    Uniform(f64),
    /// Xavier/Glorot uniform from fan-in/fan-out.
    Xavier { fan_in: usize, fan_out: usize },
}

pub struct Slot {
    pub value: Arr,
    pub m: Arr,
    pub v: Arr,
}

pub struct ParamStore {
    slots: RefCell<BTreeMap<String, Rc<RefCell<Slot>>>>,
    active: RefCell<BTreeMap<String, Tensor>>,
    rng: RefCell<ChaCha8Rng>,
    dropout_rng: RefCell<ChaCha8Rng>,
    pub train_mode: std::cell::Cell<bool>,
    pub dropout_p: std::cell::Cell<f64>,
}

impl ParamStore {
    pub fn new(seed: u64) -> ParamStore {
        ParamStore {
            slots: RefCell::new(BTreeMap::new()),
            active: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed ^ 0xA11CE)),
            dropout_rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed ^ 0xD120)),
            train_mode: std::cell::Cell::new(true),
            dropout_p: std::cell::Cell::new(0.0),
        }
    }

    /// Reseeds per-step stochasticity so resumed runs replay identically.
    pub fn reseed_step(&self, seed: u64, step: u64) {
        *self.dropout_rng.borrow_mut() =
            ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E3779B97F4A7C15));
    }

    fn init_arr(&self, shape: &[usize], init: Init) -> Arr {
        let mut rng = self.rng.borrow_mut();
        match init {
            Init::Zeros => Arr::zeros(IxDyn(shape)),
            Init::Ones => Arr::from_elem(IxDyn(shape), 1.0),
            Init::Uniform(a) => Arr::from_shape_fn(IxDyn(shape), |_| (rng.random::<f64>() * 2.0 - 1.0) * a),
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Arr::from_shape_fn(IxDyn(shape), |_| (rng.random::<f64>() * 2.0 - 1.0) * a)
            }
        }
    }

    /// Fetches (creating on first use) the named parameter as a graph leaf.
    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Tensor {
        if let Some(t) = self.active.borrow().get(name) {
            debug_assert_eq!(t.shape(), shape, "shape clash for param {name}");
            return t.clone();
        }
        let slot = {
            let mut slots = self.slots.borrow_mut();
            slots
                .entry(name.to_string())
                .or_insert_with(|| {
                    let value = self.init_arr(shape, init);
                    Rc::new(RefCell::new(Slot {
                        m: Arr::zeros(value.raw_dim()),
                        v: Arr::zeros(value.raw_dim()),
                        value,
                    }))
                })
                .clone()
        };
        let t = Tensor::leaf(slot.borrow().value.clone(), true);
        self.active.borrow_mut().insert(name.to_string(), t.clone());
        t
    }

    /// Ends a step: returns (name, grad) for every touched parameter and
    /// clears the per-step leaf cache.
    pub fn collect_grads(&self) -> Vec<(String, Arr)> {
        let mut out = Vec::new();
        for (name, tensor) in self.active.borrow_mut().iter() {
            if let Some(g) = tensor.take_grad() {
                out.push((name.clone(), g));
            }
        }
        self.active.borrow_mut().clear();
        out
    }

    /// Drops per-step leaves without collecting gradients (inference).
    pub fn clear_step(&self) {
        self.active.borrow_mut().clear();
    }

    pub fn with_slot<R>(&self, name: &str, f: impl FnOnce(&mut Slot) -> R) -> Option<R> {
        let slot = self.slots.borrow().get(name).cloned()?;
        let mut s = slot.borrow_mut();
        Some(f(&mut s))
    }

    pub fn names(&self) -> Vec<String> {
        self.slots.borrow().keys().cloned().collect()
    }

    pub fn n_params(&self) -> usize {
        self.slots.borrow().values().map(|s| s.borrow().value.len()).sum()
    }

    /// Deterministic dropout mask (train mode only).
    pub fn dropout(&self, x: &Tensor) -> Tensor {
        let p = self.dropout_p.get();
        if !self.train_mode.get() || p <= 0.0 {
            return x.clone();
        }
        let mut rng = self.dropout_rng.borrow_mut();
        let keep = 1.0 - p;
        let mask = Arr::from_shape_fn(IxDyn(x.shape()), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        x.mul(&Tensor::constant(mask))
    }

    /// Serializes slots (value, m, v) sorted by name.
    pub fn export(&self) -> Vec<(String, Arr, Arr, Arr)> {
        self.slots
            .borrow()
            .iter()
            .map(|(k, s)| {
                let s = s.borrow();
                (k.clone(), s.value.clone(), s.m.clone(), s.v.clone())
            })
            .collect()
    }

    pub fn import(&self, entries: Vec<(String, Arr, Arr, Arr)>) {
        let mut slots = self.slots.borrow_mut();
        slots.clear();
        for (name, value, m, v) in entries {
            slots.insert(name, Rc::new(RefCell::new(Slot { value, m, v })));
        }
        self.active.borrow_mut().clear();
    }
}

/// AdamW with decoupled weight decay and global-norm gradient clipping.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub step: u64,
}

impl AdamW {
    pub fn new(weight_decay: f64, grad_clip: f64) -> AdamW {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, grad_clip, step: 0 }
    }

    /// Applies one update. `frozen` prefixes are skipped entirely.
    pub fn apply(
        &mut self,
        store: &ParamStore,
        grads: &[(String, Arr)],
        lr: f64,
        frozen_prefixes: &[String],
    ) {
        self.step += 1;
        let mut norm2 = 0.0;
        for (_, g) in grads {
            norm2 += g.iter().map(|x| x * x).sum::<f64>();
        }
        let norm = norm2.sqrt();
        let scale = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            if frozen_prefixes.iter().any(|p| name.starts_with(p.as_str())) {
                continue;
            }
            store.with_slot(name, |slot| {
                let g = g * scale;
                slot.m.zip_mut_with(&g, |m, &gv| *m = self.beta1 * *m + (1.0 - self.beta1) * gv);
                slot.v
                    .zip_mut_with(&g, |v, &gv| *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv);
                // decoupled weight decay only on matrices/filters
                let decay = if slot.value.ndim() >= 2 { self.weight_decay } else { 0.0 };
                let (m, v) = (&slot.m, &slot.v);
                let mut upd = m.clone();
                upd.zip_mut_with(v, |mu, &vv| {
                    *mu = (*mu / bc1) / ((vv / bc2).sqrt() + self.eps);
                });
                slot.value.zip_mut_with(&upd, |w, &u| {
                    *w -= lr * (u + decay * *w);
                });
            });
        }
    }
}

/// Step-decay learning rate: `base * decay^(epoch / every)`.
pub fn lr_at_epoch(base: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    base * decay.powi((epoch / every) as i32)
}

pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub zero_init: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Linear {
        Linear { name: name.into(), in_dim, out_dim, zero_init: false }
    }

    pub fn zeroed(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Linear {
        Linear { name: name.into(), in_dim, out_dim, zero_init: true }
    }

    /// x: (..., in_dim) -> (..., out_dim).
    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let winit = if self.zero_init {
            Init::Zeros
        } else {
            Init::Xavier { fan_in: self.in_dim, fan_out: self.out_dim }
        };
        let w = ps.param(&format!("{}.w", self.name), &[self.in_dim, self.out_dim], winit);
        let b = ps.param(&format!("{}.b", self.name), &[self.out_dim], Init::Zeros);
        let sh = x.shape().to_vec();
        let lead: usize = sh[..sh.len() - 1].iter().product();
        let x2 = x.reshape(&[lead, self.in_dim]);
        let y = x2.matmul(&w).add(&b);
        let mut out_sh = sh;
        *out_sh.last_mut().unwrap() = self.out_dim;
        y.reshape(&out_sh)
    }
}

pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> LayerNorm {
        LayerNorm { name: name.into(), dim }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let gamma = ps.param(&format!("{}.g", self.name), &[self.dim], Init::Ones);
        let beta = ps.param(&format!("{}.b", self.name), &[self.dim], Init::Zeros);
        let ax = x.shape().len() - 1;
        let mu = x.mean_axis(ax, true);
        let xc = x.sub(&mu);
        let var = xc.square().mean_axis(ax, true);
        let xn = xc.div(&var.add_s(1e-5).sqrt());
        xn.mul(&gamma).add(&beta)
    }
}

/// Two-layer MLP with ReLU.
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Mlp {
        Mlp {
            l1: Linear::new(format!("{name}.l1"), in_dim, hidden),
            l2: Linear::new(format!("{name}.l2"), hidden, out_dim),
        }
    }

    /// Same as `new` but the output layer starts at zero.
    pub fn zero_out(name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Mlp {
        Mlp {
            l1: Linear::new(format!("{name}.l1"), in_dim, hidden),
            l2: Linear::zeroed(format!("{name}.l2"), hidden, out_dim),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        self.l2.forward(ps, &self.l1.forward(ps, x).relu())
    }
}

/// Standard multi-head attention. Mask entries are added to logits
/// (use 0 / -1e9).
pub struct Mha {
    pub name: String,
    pub d_model: usize,
    pub n_heads: usize,
}

impl Mha {
    pub fn new(name: impl Into<String>, d_model: usize, n_heads: usize) -> Mha {
        let name = name.into();
        assert_eq!(d_model % n_heads, 0, "d_model must divide by heads");
        Mha { name, d_model, n_heads }
    }

    /// q: (n, D), k/v: (m, D), mask: optional (n, m) additive logits.
    pub fn forward(
        &self,
        ps: &ParamStore,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        mask: Option<&Tensor>,
    ) -> Tensor {
        let d = self.d_model;
        let dh = d / self.n_heads;
        let wq = Linear::new(format!("{}.wq", self.name), d, d);
        let wk = Linear::new(format!("{}.wk", self.name), d, d);
        let wv = Linear::new(format!("{}.wv", self.name), d, d);
        let wo = Linear::new(format!("{}.wo", self.name), d, d);
        let qp = wq.forward(ps, q);
        let kp = wk.forward(ps, k);
        let vp = wv.forward(ps, v);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = qp.slice_ax(1, h * dh, dh);
            let kh = kp.slice_ax(1, h * dh, dh);
            let vh = vp.slice_ax(1, h * dh, dh);
            let mut logits = qh.matmul(&kh.transpose2()).mul_s(scale);
            if let Some(m) = mask {
                logits = logits.add(m);
            }
            let attn = logits.softmax(1);
            heads.push(attn.matmul(&vh));
        }
        let cat = crate::tensor::concat(1, &heads);
        wo.forward(ps, &cat)
    }
}

/// Pre-norm transformer block: x + MHA(LN(x)) then x + FFN(LN(x)).
pub struct TransformerBlock {
    pub mha: Mha,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl TransformerBlock {
    pub fn new(name: &str, d_model: usize, n_heads: usize, ffn_mult: usize) -> TransformerBlock {
        TransformerBlock {
            mha: Mha::new(format!("{name}.mha"), d_model, n_heads),
            ln1: LayerNorm::new(format!("{name}.ln1"), d_model),
            ln2: LayerNorm::new(format!("{name}.ln2"), d_model),
            ffn: Mlp::new(&format!("{name}.ffn"), d_model, d_model * ffn_mult, d_model),
        }
    }

    /// Self-attention over x with optional additive mask.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor, mask: Option<&Tensor>) -> Tensor {
        let n = self.ln1.forward(ps, x);
        let x = x.add(&ps.dropout(&self.mha.forward(ps, &n, &n, &n, mask)));
        let n2 = self.ln2.forward(ps, &x);
        x.add(&ps.dropout(&self.ffn.forward(ps, &n2)))
    }

    /// Cross-attention block: queries x attend to memory.
    pub fn forward_cross(
        &self,
        ps: &ParamStore,
        x: &Tensor,
        memory: &Tensor,
        mask: Option<&Tensor>,
    ) -> Tensor {
        let n = self.ln1.forward(ps, x);
        let x = x.add(&ps.dropout(&self.mha.forward(ps, &n, memory, memory, mask)));
        let n2 = self.ln2.forward(ps, &x);
        x.add(&ps.dropout(&self.ffn.forward(ps, &n2)))
    }
}
