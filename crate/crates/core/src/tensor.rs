//! Reverse-mode automatic differentiation over dynamic-rank f64 arrays.
//!
//! Every op builds a node holding its parents and a backward closure.
//! `Tensor::backward` walks the graph in reverse creation order and
//! accumulates gradients into each node's grad cell. Node ids increase
//! monotonically at creation, so sorting by id gives a valid reverse
//! topological order.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use ndarray::prelude::*;
use ndarray::{concatenate, Slice};

pub type Arr = ArrayD<f64>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let i = c.get();
        c.set(i + 1);
        i
    })
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph construction disabled (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

struct Inner {
    id: u64,
    data: Arr,
    grad: RefCell<Option<Arr>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<Box<dyn Fn(&Arr)>>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(shape={:?}, grad={})", self.shape(), self.inner.requires_grad)
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Sums `grad` down to `shape` (inverse of broadcasting).
fn reduce_to(grad: &Arr, shape: &[usize]) -> Arr {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for i in 0..shape.len() {
        if shape[i] == 1 && g.shape()[i] != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

fn bcast(a: &Arr, shape: &[usize]) -> Arr {
    if a.shape() == shape {
        a.clone()
    } else {
        a.broadcast(IxDyn(shape)).expect("broadcast failed").to_owned()
    }
}

impl Tensor {
    fn build(data: Arr, parents: Vec<Tensor>, backward: Box<dyn Fn(&Arr)>) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        if track {
            Tensor {
                inner: Rc::new(Inner {
                    id: next_id(),
                    data,
                    grad: RefCell::new(None),
                    requires_grad: true,
                    parents,
                    backward: Some(backward),
                }),
            }
        } else {
            Tensor::constant(data)
        }
    }

    pub(crate) fn build_node(data: Arr, parents: Vec<Tensor>, backward: Box<dyn Fn(&Arr)>) -> Tensor {
        Tensor::build(data, parents, backward)
    }

    pub(crate) fn accum_grad(&self, g: &Arr) {
        self.accum(g);
    }

    pub fn leaf(data: Arr, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                data,
                grad: RefCell::new(None),
                requires_grad: requires_grad && grad_enabled(),
                parents: vec![],
                backward: None,
            }),
        }
    }

    pub fn constant(data: Arr) -> Tensor {
        Tensor::leaf(data, false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(Arr::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(Arr::zeros(IxDyn(shape)))
    }

    pub fn data(&self) -> &Arr {
        &self.inner.data
    }

    pub fn shape(&self) -> &[usize] {
        self.inner.data.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.inner.data.len(), 1);
        *self.inner.data.iter().next().expect("empty tensor")
    }

    /// Returns a view of the same data detached from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.inner.data.clone())
    }

    pub fn grad(&self) -> Option<Arr> {
        self.inner.grad.borrow().clone()
    }

    pub fn take_grad(&self) -> Option<Arr> {
        self.inner.grad.borrow_mut().take()
    }

    fn accum(&self, g: &Arr) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += g,
            None => *slot = Some(g.clone()),
        }
    }

    /// Backpropagates from this scalar.
    pub fn backward(&self) {
        assert_eq!(self.inner.data.len(), 1, "backward() requires a scalar output");
        // Collect reachable nodes, newest first.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<Tensor> = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.inner.requires_grad || !seen.insert(t.inner.id) {
                continue;
            }
            for p in &t.inner.parents {
                stack.push(p.clone());
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));
        self.accum(&Arr::from_elem(self.inner.data.raw_dim(), 1.0));
        for node in &order {
            if let Some(bw) = &node.inner.backward {
                let g = node.inner.grad.borrow().clone();
                if let Some(g) = g {
                    bw(&g);
                }
            }
        }
    }

    // ---- elementwise binary ops (broadcasting) ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        let sh = broadcast_shape(self.shape(), other.shape());
        let data = bcast(self.data(), &sh) + bcast(other.data(), &sh);
        let (a, b) = (self.clone(), other.clone());
        Tensor::build(data, vec![self.clone(), other.clone()], Box::new(move |g| {
            a.accum(&reduce_to(g, a.shape()));
            b.accum(&reduce_to(g, b.shape()));
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let sh = broadcast_shape(self.shape(), other.shape());
        let data = bcast(self.data(), &sh) - bcast(other.data(), &sh);
        let (a, b) = (self.clone(), other.clone());
        Tensor::build(data, vec![self.clone(), other.clone()], Box::new(move |g| {
            a.accum(&reduce_to(g, a.shape()));
            b.accum(&reduce_to(&-g.clone(), b.shape()));
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let sh = broadcast_shape(self.shape(), other.shape());
        let da = bcast(self.data(), &sh);
        let db = bcast(other.data(), &sh);
        let data = &da * &db;
        let (a, b) = (self.clone(), other.clone());
        Tensor::build(data, vec![self.clone(), other.clone()], Box::new(move |g| {
            let sh = broadcast_shape(a.shape(), b.shape());
            a.accum(&reduce_to(&(g * &bcast(b.data(), &sh)), a.shape()));
            b.accum(&reduce_to(&(g * &bcast(a.data(), &sh)), b.shape()));
        }))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let sh = broadcast_shape(self.shape(), other.shape());
        let da = bcast(self.data(), &sh);
        let db = bcast(other.data(), &sh);
        let data = &da / &db;
        let (a, b) = (self.clone(), other.clone());
        Tensor::build(data, vec![self.clone(), other.clone()], Box::new(move |g| {
            let sh = broadcast_shape(a.shape(), b.shape());
            let da = bcast(a.data(), &sh);
            let db = bcast(b.data(), &sh);
            a.accum(&reduce_to(&(g / &db), a.shape()));
            b.accum(&reduce_to(&(-(g * &da) / (&db * &db)), b.shape()));
        }))
    }

    // ---- scalar ops ----

    pub fn add_s(&self, v: f64) -> Tensor {
        let data = self.data() + v;
        let a = self.clone();
        Tensor::build(data, vec![self.clone()], Box::new(move |g| a.accum(g)))
    }

    pub fn mul_s(&self, v: f64) -> Tensor {
        let data = self.data() * v;
        let a = self.clone();
        Tensor::build(data, vec![self.clone()], Box::new(move |g| a.accum(&(g * v))))
    }

    pub fn neg(&self) -> Tensor {
        self.mul_s(-1.0)
    }

    // ---- elementwise unary ops ----

    fn unary(&self, data: Arr, dfdx: Arr) -> Tensor {
        let a = self.clone();
        Tensor::build(data, vec![self.clone()], Box::new(move |g| {
            a.accum(&(g * &dfdx));
        }))
    }

    pub fn exp(&self) -> Tensor {
        let out = self.data().mapv(f64::exp);
        self.unary(out.clone(), out)
    }

    pub fn ln(&self) -> Tensor {
        let out = self.data().mapv(f64::ln);
        self.unary(out, self.data().mapv(|x| 1.0 / x))
    }

    pub fn sqrt(&self) -> Tensor {
        let out = self.data().mapv(f64::sqrt);
        let d = out.mapv(|y| 0.5 / y);
        self.unary(out, d)
    }

    pub fn square(&self) -> Tensor {
        let out = self.data().mapv(|x| x * x);
        self.unary(out, self.data().mapv(|x| 2.0 * x))
    }

    pub fn tanh(&self) -> Tensor {
        let out = self.data().mapv(f64::tanh);
        let d = out.mapv(|y| 1.0 - y * y);
        self.unary(out, d)
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.data().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let d = out.mapv(|y| y * (1.0 - y));
        self.unary(out, d)
    }

    pub fn relu(&self) -> Tensor {
        let out = self.data().mapv(|x| x.max(0.0));
        let d = self.data().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.unary(out, d)
    }

    /// softplus(x) = ln(1+e^x), computed stably.
    pub fn softplus(&self) -> Tensor {
        let out = self.data().mapv(|x| {
            if x > 30.0 {
                x
            } else if x < -30.0 {
                x.exp()
            } else {
                (1.0 + x.exp()).ln()
            }
        });
        let d = self.data().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(out, d)
    }

    pub fn abs(&self) -> Tensor {
        let out = self.data().mapv(f64::abs);
        let d = self.data().mapv(|x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        self.unary(out, d)
    }

    pub fn sin(&self) -> Tensor {
        self.unary(self.data().mapv(f64::sin), self.data().mapv(f64::cos))
    }

    pub fn cos(&self) -> Tensor {
        self.unary(self.data().mapv(f64::cos), self.data().mapv(|x| -x.sin()))
    }

    /// Clamp with pass-through gradient strictly inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let out = self.data().mapv(|x| x.clamp(lo, hi));
        let d = self.data().mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
        self.unary(out, d)
    }

    // ---- matmul ----

    fn as2(&self) -> Array2<f64> {
        self.inner
            .data
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("matmul requires 2-D tensors")
    }

    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let a = self.as2();
        let b = rhs.as2();
        let out = a.dot(&b).into_dyn();
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::build(out, vec![self.clone(), rhs.clone()], Box::new(move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            let a = pa.as2();
            let b = pb.as2();
            pa.accum(&g2.dot(&b.t()).into_dyn());
            pb.accum(&a.t().dot(&g2).into_dyn());
        }))
    }

    // ---- reductions ----

    pub fn sum(&self) -> Tensor {
        let out = Arr::from_elem(IxDyn(&[]), self.data().sum());
        let a = self.clone();
        let shape: Vec<usize> = self.shape().to_vec();
        Tensor::build(out, vec![self.clone()], Box::new(move |g| {
            let v = *g.iter().next().unwrap();
            a.accum(&Arr::from_elem(IxDyn(&shape), v));
        }))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.data().len() as f64;
        self.sum().mul_s(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdims: bool) -> Tensor {
        let mut out = self.data().sum_axis(Axis(axis));
        if keepdims {
            out = out.insert_axis(Axis(axis));
        }
        let a = self.clone();
        let shape: Vec<usize> = self.shape().to_vec();
        Tensor::build(out, vec![self.clone()], Box::new(move |g| {
            let mut g = g.clone();
            if g.ndim() < shape.len() {
                g = g.insert_axis(Axis(axis));
            }
            a.accum(&bcast(&g, &shape));
        }))
    }

    pub fn mean_axis(&self, axis: usize, keepdims: bool) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keepdims).mul_s(1.0 / n)
    }

    /// Max over `axis` (keepdims). Gradient routes to the first argmax.
    pub fn max_axis(&self, axis: usize) -> Tensor {
        let shape = self.shape().to_vec();
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let mut out = Arr::from_elem(IxDyn(&out_shape), f64::NEG_INFINITY);
        let mut argmax: Vec<usize> = vec![0; out.len()];
        {
            let data = self.data();
            let mut flat_idx = 0usize;
            for (out_idx, slot) in out.indexed_iter_mut() {
                let mut best = f64::NEG_INFINITY;
                let mut best_k = 0;
                for k in 0..shape[axis] {
                    let mut idx = out_idx.slice().to_vec();
                    idx[axis] = k;
                    let v = data[IxDyn(&idx)];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                *slot = best;
                argmax[flat_idx] = best_k;
                flat_idx += 1;
            }
        }
        let a = self.clone();
        let out_shape2 = out_shape.clone();
        Tensor::build(out, vec![self.clone()], Box::new(move |g| {
            let mut grad = Arr::zeros(IxDyn(&shape));
            let gv = g.to_shape(IxDyn(&out_shape2)).unwrap();
            let mut flat_idx = 0usize;
            for (out_idx, gval) in gv.indexed_iter() {
                let mut idx = out_idx.slice().to_vec();
                idx[axis] = argmax[flat_idx];
                grad[IxDyn(&idx)] += *gval;
                flat_idx += 1;
            }
            a.accum(&grad);
        }))
    }

    // ---- shape ops ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data().len(), "reshape size mismatch");
        let data =
            Arr::from_shape_vec(IxDyn(shape), self.data().iter().cloned().collect()).unwrap();
        let a = self.clone();
        let orig: Vec<usize> = self.shape().to_vec();
        Tensor::build(data, vec![self.clone()], Box::new(move |g| {
            let back =
                Arr::from_shape_vec(IxDyn(&orig), g.iter().cloned().collect()).unwrap();
            a.accum(&back);
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let data = self
            .data()
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inv = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        let a = self.clone();
        Tensor::build(data, vec![self.clone()], Box::new(move |g| {
            let back = g
                .clone()
                .permuted_axes(IxDyn(&inv))
                .as_standard_layout()
                .to_owned();
            a.accum(&back);
        }))
    }

    pub fn transpose2(&self) -> Tensor {
        self.permute(&[1, 0])
    }

    pub fn slice_ax(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let data = self
            .data()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let a = self.clone();
        let shape: Vec<usize> = self.shape().to_vec();
        Tensor::build(data, vec![self.clone()], Box::new(move |g| {
            let mut grad = Arr::zeros(IxDyn(&shape));
            grad.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            a.accum(&grad);
        }))
    }

    /// Gathers rows along axis 0. Backward scatter-adds.
    pub fn index_select(&self, indices: &[usize]) -> Tensor {
        let data = self.data().select(Axis(0), indices);
        let a = self.clone();
        let idx: Vec<usize> = indices.to_vec();
        let shape: Vec<usize> = self.shape().to_vec();
        Tensor::build(data, vec![self.clone()], Box::new(move |g| {
            let mut grad = Arr::zeros(IxDyn(&shape));
            for (row, &src) in idx.iter().enumerate() {
                let grow = g.index_axis(Axis(0), row);
                let mut dst = grad.index_axis_mut(Axis(0), src);
                dst += &grow;
            }
            a.accum(&grad);
        }))
    }

    // ---- composed ops ----

    /// Numerically stable softmax along `axis` (max subtracted as a constant).
    pub fn softmax(&self, axis: usize) -> Tensor {
        let mx = self
            .data()
            .map_axis(Axis(axis), |lane| lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
            .insert_axis(Axis(axis));
        let m = Tensor::constant(mx);
        let e = self.sub(&m).exp();
        let s = e.sum_axis(axis, true);
        e.div(&s)
    }

    /// log(sum(exp(x))) along `axis`, keepdims.
    pub fn logsumexp(&self, axis: usize) -> Tensor {
        let mx = self
            .data()
            .map_axis(Axis(axis), |lane| lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
            .insert_axis(Axis(axis));
        let m = Tensor::constant(mx);
        self.sub(&m).exp().sum_axis(axis, true).ln().add(&m)
    }
}

pub fn concat(axis: usize, parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|t| t.data().view()).collect();
    let data = concatenate(Axis(axis), &views).expect("concat shape mismatch");
    let lens: Vec<usize> = parts.iter().map(|t| t.shape()[axis]).collect();
    let owned: Vec<Tensor> = parts.to_vec();
    Tensor::build(data, parts.to_vec(), Box::new(move |g| {
        let mut off = 0usize;
        for (t, &len) in owned.iter().zip(&lens) {
            let gpart = g
                .slice_axis(Axis(axis), Slice::from(off..off + len))
                .to_owned();
            t.accum(&gpart);
            off += len;
        }
    }))
}

/// Stacks tensors of identical shape along a new leading axis.
pub fn stack0(parts: &[Tensor]) -> Tensor {
    let expanded: Vec<Tensor> = parts
        .iter()
        .map(|t| {
            let mut sh = vec![1usize];
            sh.extend_from_slice(t.shape());
            t.reshape(&sh)
        })
        .collect();
    concat(0, &expanded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(v: &[f64], shape: &[usize]) -> Arr {
        Arr::from_shape_vec(IxDyn(shape), v.to_vec()).unwrap()
    }

    /// Central finite-difference gradient of a scalar function of one leaf.
    pub fn fd_grad(f: impl Fn(&Tensor) -> Tensor, x0: &Arr, h: f64) -> Arr {
        let mut g = Arr::zeros(x0.raw_dim());
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let fp = f(&Tensor::constant(xp)).item();
            let fm = f(&Tensor::constant(xm)).item();
            g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn check_grad(f: impl Fn(&Tensor) -> Tensor, x0: &Arr, tol: f64) {
        let x = Tensor::leaf(x0.clone(), true);
        let y = f(&x);
        y.backward();
        let g = x.grad().expect("no grad");
        let gfd = fd_grad(&f, x0, 1e-5);
        for (a, b) in g.iter().zip(gfd.iter()) {
            let denom = a.abs().max(b.abs()).max(1e-6);
            assert!(
                (a - b).abs() / denom < tol,
                "grad mismatch: analytic {a} vs fd {b}"
            );
        }
    }

    #[test]
    fn add_mul_broadcast_grads() {
        let x0 = arr(&[1.0, -2.0, 3.0, 0.5, 2.0, -1.0], &[2, 3]);
        check_grad(
            |x| {
                let b = Tensor::constant(arr(&[0.5, -1.5, 2.0], &[3]));
                x.mul(&b).add(&b).sum()
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn div_grad() {
        let x0 = arr(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        check_grad(
            |x| {
                let b = Tensor::constant(arr(&[2.0, 4.0], &[2]));
                x.div(&b).sum()
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn unary_grads() {
        let x0 = arr(&[0.3, -0.7, 1.2, 2.1], &[4]);
        check_grad(|x| x.exp().sum(), &x0, 1e-6);
        check_grad(|x| x.tanh().sum(), &x0, 1e-6);
        check_grad(|x| x.sigmoid().sum(), &x0, 1e-6);
        check_grad(|x| x.softplus().sum(), &x0, 1e-6);
        check_grad(|x| x.square().sum(), &x0, 1e-6);
        let xp = arr(&[0.3, 0.7, 1.2, 2.1], &[4]);
        check_grad(|x| x.ln().sum(), &xp, 1e-5);
        check_grad(|x| x.sqrt().sum(), &xp, 1e-5);
    }

    #[test]
    fn matmul_grad() {
        let x0 = arr(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        check_grad(
            |x| {
                let w = Tensor::constant(arr(&[0.1, 0.2, -0.3, 0.4, 0.5, -0.6], &[3, 2]));
                x.matmul(&w).square().sum()
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad() {
        let x0 = arr(&[1.0, 2.0, 3.0, -1.0, 0.0, 1.0], &[2, 3]);
        let x = Tensor::constant(x0.clone());
        let s = x.softmax(1);
        for row in 0..2 {
            let sum: f64 = (0..3).map(|j| s.data()[[row, j]]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        check_grad(
            |x| {
                let w = Tensor::constant(arr(&[1.0, -2.0, 0.5], &[3]));
                x.softmax(1).mul(&w).sum()
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn reductions_and_shapes() {
        let x0 = arr(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        check_grad(|x| x.sum_axis(1, true).square().sum(), &x0, 1e-6);
        check_grad(|x| x.mean_axis(0, false).square().sum(), &x0, 1e-6);
        check_grad(|x| x.reshape(&[3, 2]).matmul(&Tensor::constant(arr(&[1.0, 2.0], &[2, 1]))).sum(), &x0, 1e-6);
        check_grad(|x| x.permute(&[1, 0]).slice_ax(0, 1, 2).sum(), &x0, 1e-6);
        check_grad(|x| x.max_axis(1).sum(), &x0, 1e-6);
        check_grad(|x| x.index_select(&[1, 0, 1]).square().sum(), &x0, 1e-6);
        check_grad(
            |x| {
                let a = x.slice_ax(0, 0, 1);
                let b = x.slice_ax(0, 1, 1);
                concat(1, &[a.clone(), b]).square().sum().add(&a.sum())
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn logsumexp_matches_naive() {
        let x0 = arr(&[1.0, 2.0, 3.0, 400.0, 401.0, 399.0], &[2, 3]);
        let x = Tensor::constant(x0.clone());
        let lse = x.logsumexp(1);
        let naive0 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((lse.data()[[0, 0]] - naive0).abs() < 1e-12);
        // large values do not overflow
        assert!(lse.data()[[1, 0]].is_finite());
        let small = arr(&[1.0, 2.0, 3.0, -1.0, 0.5, 0.0], &[2, 3]);
        check_grad(|x| x.logsumexp(1).sum(), &small, 1e-5);
    }

    #[test]
    fn no_grad_builds_no_graph() {
        let x = Tensor::leaf(arr(&[1.0, 2.0], &[2]), true);
        let y = no_grad(|| x.square().sum());
        assert!(!y.requires_grad());
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        let x = Tensor::leaf(arr(&[3.0], &[1]), true);
        let y = x.mul(&x).add(&x); // x^2 + x, dy/dx = 2x+1 = 7
        y.sum().backward();
        assert!((x.grad().unwrap()[[0]] - 7.0).abs() < 1e-12);
    }
}
