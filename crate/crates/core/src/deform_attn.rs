//! Deformable-attention primitives.
//!
//! Two variants: query-derived offsets (used by BDA, ITP, ITR) and
//! key-derived sampling (used by SGCP), plus a dense brute-force attention
//! oracle and a materialized weighted-sum oracle used only in tests.
//!
//! Conventions: reference points and sampling locations are normalized grid
//! coordinates (u along width, v along height) in [0,1]^2; offset heads
//! predict offsets in cell units, divided by the grid dimensions to reach
//! normalized units. Points outside the unit square sample zeros.

use ndarray::IxDyn;

use crate::nn::{Linear, ParamStore};
use crate::ops::bilinear_sample;
use crate::tensor::{concat, Arr, Tensor};

#[derive(Debug, Clone)]
pub struct DeformAttn {
    pub name: String,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_points: usize,
}

impl DeformAttn {
    pub fn new(name: impl Into<String>, d_model: usize, n_heads: usize, n_points: usize) -> DeformAttn {
        assert_eq!(d_model % n_heads, 0, "d_model must divide by heads");
        DeformAttn { name: name.into(), d_model, n_heads, n_points }
    }

    fn lin(&self, suffix: &str, in_dim: usize, out_dim: usize) -> Linear {
        Linear::new(format!("{}.{suffix}", self.name), in_dim, out_dim)
    }
}

/// Shared weighted-sum kernel: `sampled` (M, P, dh) combined with `weights`
/// (M, P) -> (M, dh). Used by both the deformable path and the dense oracle.
pub fn weighted_point_sum(sampled: &Tensor, weights: &Tensor) -> Tensor {
    let sh = sampled.shape().to_vec();
    let (m, p) = (sh[0], sh[1]);
    let w3 = weights.reshape(&[m, p, 1]);
    sampled.mul(&w3).sum_axis(1, false)
}

/// Value projection of the grid: (C,H,W) -> (C,H,W) through a per-cell linear map.
fn project_values(ps: &ParamStore, da: &DeformAttn, b: &Tensor) -> Tensor {
    let sh = b.shape().to_vec();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let flat = b.reshape(&[c, h * w]).transpose2(); // (HW, C)
    let v = da.lin("v", c, da.d_model).forward(ps, &flat); // (HW, D)
    v.transpose2().reshape(&[da.d_model, h, w])
}

/// Sampling locations for query-derived offsets: refs (M,2) + per-head
/// offsets in cell units, normalized by grid dims -> (M, heads, P, 2).
fn sampling_locations(ps: &ParamStore, da: &DeformAttn, queries: &Tensor, refs: &Tensor, h: usize, w: usize) -> Tensor {
    let m = queries.shape()[0];
    let off = da
        .lin("off", da.d_model, da.n_heads * da.n_points * 2)
        .forward(ps, queries)
        .reshape(&[m, da.n_heads, da.n_points, 2]);
    let norm = Tensor::constant(
        Arr::from_shape_vec(IxDyn(&[2]), vec![1.0 / w as f64, 1.0 / h as f64]).unwrap(),
    );
    refs.reshape(&[m, 1, 1, 2]).add(&off.mul(&norm))
}

/// Per-head softmax attention weights over sampling points: (M, heads, P).
fn attention_weights(ps: &ParamStore, da: &DeformAttn, queries: &Tensor) -> Tensor {
    let m = queries.shape()[0];
    da.lin("w", da.d_model, da.n_heads * da.n_points)
        .forward(ps, queries)
        .reshape(&[m, da.n_heads, da.n_points])
        .softmax(2)
}

/// Deformable cross-attention with query-derived offsets.
/// queries (M, D), refs (M, 2) normalized, b (C, H, W) with C = D.
pub fn deform_cross_attn(
    ps: &ParamStore,
    da: &DeformAttn,
    queries: &Tensor,
    refs: &Tensor,
    b: &Tensor,
) -> Tensor {
    let sh = b.shape().to_vec();
    let (h, w) = (sh[1], sh[2]);
    let m = queries.shape()[0];
    assert_eq!(refs.shape(), [m, 2], "refs must be (M,2)");
    assert_eq!(queries.shape()[1], da.d_model);

    let value = project_values(ps, da, b);
    let locs = sampling_locations(ps, da, queries, refs, h, w);
    let weights = attention_weights(ps, da, queries);

    let dh = da.d_model / da.n_heads;
    let mut heads = Vec::with_capacity(da.n_heads);
    for head in 0..da.n_heads {
        let vh = value.slice_ax(0, head * dh, dh);
        let pts = locs
            .slice_ax(1, head, 1)
            .reshape(&[m * da.n_points, 2]);
        let sampled = bilinear_sample(&vh, &pts).reshape(&[m, da.n_points, dh]);
        let wh = weights.slice_ax(1, head, 1).reshape(&[m, da.n_points]);
        heads.push(weighted_point_sum(&sampled, &wh));
    }
    let cat = concat(1, &heads);
    da.lin("o", da.d_model, da.d_model).forward(ps, &cat)
}

/// Returns the materialized sampling locations (M, heads, P, 2) of a forward
/// pass, for locality tests.
pub fn materialize_locations(
    ps: &ParamStore,
    da: &DeformAttn,
    queries: &Tensor,
    refs: &Tensor,
    h: usize,
    w: usize,
) -> Arr {
    crate::tensor::no_grad(|| sampling_locations(ps, da, queries, refs, h, w).data().clone())
}

/// Independent brute-force recomputation of `deform_cross_attn` using plain
/// ndarray arithmetic and a hand-rolled bilinear interpolation. Test oracle
/// only; never used in the model path.
pub fn deform_attn_materialized_oracle(
    ps: &ParamStore,
    da: &DeformAttn,
    queries: &Arr,
    refs: &Arr,
    b: &Arr,
) -> Arr {
    let get = |name: &str| -> Arr {
        ps.with_slot(&format!("{}.{name}", da.name), |s| s.value.clone())
            .expect("param missing; run the forward path once first")
    };
    let (c, h, w) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    let m = queries.shape()[0];
    let d = da.d_model;
    let dh = d / da.n_heads;

    // Linear stores weights as (in, out): y = x @ W + b
    let matvec = |w_: &Arr, bias: &Arr, x: &[f64]| -> Vec<f64> {
        let (i, o) = (w_.shape()[0], w_.shape()[1]);
        assert_eq!(i, x.len());
        (0..o)
            .map(|r| {
                let mut acc = bias[[r]];
                for k in 0..i {
                    acc += w_[[k, r]] * x[k];
                }
                acc
            })
            .collect()
    };

    // value projection per cell
    let (vw, vb) = (get("v.w"), get("v.b"));
    let mut value = Arr::zeros(IxDyn(&[d, h, w]));
    for i in 0..h {
        for j in 0..w {
            let x: Vec<f64> = (0..c).map(|ch| b[[ch, i, j]]).collect();
            let y = matvec(&vw, &vb, &x);
            for (ch, &v) in y.iter().enumerate() {
                value[[ch, i, j]] = v;
            }
        }
    }

    // replicate-clamped bilinear inside the unit square, zeros outside
    let sample = |u: f64, v: f64, ch0: usize, out: &mut [f64]| {
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        let x = u * w as f64 - 0.5;
        let y = v * h as f64 - 0.5;
        let j0 = x.floor();
        let i0 = y.floor();
        let tx = x - j0;
        let ty = y - i0;
        let cl = |v: f64, hi: usize| -> usize { v.clamp(0.0, hi as f64 - 1.0) as usize };
        let (j0c, j1c) = (cl(j0, w), cl(j0 + 1.0, w));
        let (i0c, i1c) = (cl(i0, h), cl(i0 + 1.0, h));
        for (o, slot) in out.iter_mut().enumerate() {
            let ch = ch0 + o;
            *slot = value[[ch, i0c, j0c]] * (1.0 - ty) * (1.0 - tx)
                + value[[ch, i0c, j1c]] * (1.0 - ty) * tx
                + value[[ch, i1c, j0c]] * ty * (1.0 - tx)
                + value[[ch, i1c, j1c]] * ty * tx;
        }
    };

    let (ow, ob) = (get("off.w"), get("off.b"));
    let (ww, wb) = (get("w.w"), get("w.b"));
    let (prw, prb) = (get("o.w"), get("o.b"));
    let mut out = Arr::zeros(IxDyn(&[m, d]));
    for q in 0..m {
        let qx: Vec<f64> = (0..d).map(|k| queries[[q, k]]).collect();
        let offs = matvec(&ow, &ob, &qx); // heads*P*2
        let wraw = matvec(&ww, &wb, &qx); // heads*P
        let mut cat = vec![0.0; d];
        for head in 0..da.n_heads {
            // softmax over points
            let logits = &wraw[head * da.n_points..(head + 1) * da.n_points];
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut acc = vec![0.0; dh];
            let mut buf = vec![0.0; dh];
            for p in 0..da.n_points {
                let base = (head * da.n_points + p) * 2;
                let u = refs[[q, 0]] + offs[base] / w as f64;
                let v = refs[[q, 1]] + offs[base + 1] / h as f64;
                sample(u, v, head * dh, &mut buf);
                let wt = exps[p] / z;
                for k in 0..dh {
                    acc[k] += wt * buf[k];
                }
            }
            cat[head * dh..(head + 1) * dh].copy_from_slice(&acc);
        }
        let y = matvec(&prw, &prb, &cat);
        for (k, &v) in y.iter().enumerate() {
            out[[q, k]] = v;
        }
    }
    out
}

/// Exact softmax attention over every cell of `b`; dense test oracle.
/// Shares the value ("v") and output ("o") projections with the deformable
/// module of the same name. Guards against large grids.
pub fn dense_attn_oracle(ps: &ParamStore, da: &DeformAttn, queries: &Tensor, b: &Tensor) -> Tensor {
    let sh = b.shape().to_vec();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    assert!(h * w <= 4096, "dense oracle restricted to small grids");
    let m = queries.shape()[0];
    let value = project_values(ps, da, b).reshape(&[da.d_model, h * w]).transpose2(); // (HW, D)
    let keys = da
        .lin("k", c, da.d_model)
        .forward(ps, &b.reshape(&[c, h * w]).transpose2()); // (HW, D)
    let scale = 1.0 / (da.d_model as f64).sqrt();
    let attn = queries.matmul(&keys.transpose2()).mul_s(scale).softmax(1); // (M, HW)
    // the same weighted-sum kernel as the deformable path, P = HW
    let sampled = value.reshape(&[1, h * w, da.d_model]); // broadcastable (M, HW, D)
    let bm = {
        // expand values to (M, HW, D) by broadcasting through mul with ones
        let ones = Tensor::constant(Arr::from_elem(IxDyn(&[m, 1, 1]), 1.0));
        sampled.mul(&ones)
    };
    let mixed = weighted_point_sum(&bm, &attn);
    da.lin("o", da.d_model, da.d_model).forward(ps, &mixed)
}

// ---------------------------------------------------------------------------
// Key-driven sampling (SGCP)
// ---------------------------------------------------------------------------

/// Hard top-K cell indices of a saliency map, ties broken by row-major index.
pub fn topk_rowmajor(saliency: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..saliency.len()).collect();
    idx.sort_by(|&a, &b| {
        saliency[b]
            .partial_cmp(&saliency[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

fn cell_center(idx: usize, h: usize, w: usize) -> (f64, f64) {
    let i = idx / w;
    let j = idx % w;
    ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64)
}

/// Differentiable soft relaxation of sequential top-K: slot k's distribution
/// is a temperature-τ softmax over cells with previously selected cells
/// suppressed (suppression mask detached). Returns soft refs (K, 2).
pub fn soft_topk_refs(logits: &Tensor, selected: &[usize], tau: f64, h: usize, w: usize) -> Tensor {
    let n = h * w;
    assert_eq!(logits.shape(), [n]);
    let centers = Tensor::constant(Arr::from_shape_fn(IxDyn(&[n, 2]), |d| {
        let (u, v) = cell_center(d[0], h, w);
        if d[1] == 0 {
            u
        } else {
            v
        }
    }));
    let mut rows = Vec::with_capacity(selected.len());
    for (slot, _) in selected.iter().enumerate() {
        let mut mask = Arr::zeros(IxDyn(&[n]));
        for &prev in &selected[..slot] {
            mask[[prev]] = -1e9;
        }
        let p = logits
            .mul_s(1.0 / tau)
            .add(&Tensor::constant(mask))
            .softmax(0)
            .reshape(&[1, n]);
        rows.push(p.matmul(&centers)); // (1,2)
    }
    concat(0, &rows)
}

pub struct KeyDrivenSampling {
    /// Hard reference points (K, 2) with straight-through soft gradients.
    pub refs: Tensor,
    /// Learned per-ref offsets in cell units (K, n_points, 2).
    pub offsets: Tensor,
    /// Selected flat cell indices, row-major, saliency-descending.
    pub indices: Vec<usize>,
}

/// Key-derived sampling: a 1x1 saliency head over `b` picks the top-K cells
/// as reference points (hard forward, straight-through soft backward) and a
/// small head maps each ref's sampled feature to per-point offsets.
pub fn key_driven_sampling(
    ps: &ParamStore,
    name: &str,
    b: &Tensor,
    k: usize,
    n_points: usize,
    tau: f64,
) -> KeyDrivenSampling {
    let sh = b.shape().to_vec();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    assert!(k * n_points <= h * w, "K*n_points must not exceed the cell count");
    let flat = b.reshape(&[c, h * w]).transpose2(); // (HW, C)
    let logits = Linear::new(format!("{name}.sal"), c, 1)
        .forward(ps, &flat)
        .reshape(&[h * w]);

    let hard_idx = topk_rowmajor(logits.data().as_slice().unwrap(), k);
    let hard = Arr::from_shape_fn(IxDyn(&[k, 2]), |d| {
        let (u, v) = cell_center(hard_idx[d[0]], h, w);
        if d[1] == 0 {
            u
        } else {
            v
        }
    });
    let soft = soft_topk_refs(&logits, &hard_idx, tau, h, w);
    // straight-through: forward value = hard, backward = soft relaxation
    let refs = Tensor::constant(hard).add(&soft.sub(&soft.detach()));

    let sampled = bilinear_sample(b, &refs); // (K, C)
    let offsets = Linear::zeroed(format!("{name}.offmap"), c, n_points * 2)
        .forward(ps, &sampled)
        .reshape(&[k, n_points, 2]);
    KeyDrivenSampling { refs, offsets, indices: hard_idx }
}

/// Finite-difference audit of the differentiable surrogate inside
/// key-driven sampling: the soft top-K refs and the offset head, both as a
/// function of the feature grid. Returns max relative error.
pub fn key_driven_sampling_probe(seed: u64) -> f64 {
    use crate::gradcheck::{max_rel_error, seeded_arr};
    let ps = ParamStore::new(seed);
    let (c, h, w, k) = (4usize, 6usize, 6usize, 3usize);
    let b0 = seeded_arr(seed + 20, &[c, h, w]);
    let probe_r = Tensor::constant(seeded_arr(seed + 21, &[k, 2]));
    let probe_o = Tensor::constant(seeded_arr(seed + 22, &[k, 2 * 2]));
    // fix the selection set from the unperturbed forward so the surrogate is
    // a smooth function on the FD neighborhood
    let flat0 = Tensor::constant(b0.clone()).reshape(&[c, h * w]).transpose2();
    let logits0 = Linear::new("kds.sal", c, 1).forward(&ps, &flat0).reshape(&[h * w]);
    let sel = topk_rowmajor(logits0.data().as_slice().unwrap(), k);
    max_rel_error(
        |b| {
            ps.clear_step();
            let flat = b.reshape(&[c, h * w]).transpose2();
            let logits = Linear::new("kds.sal", c, 1).forward(&ps, &flat).reshape(&[h * w]);
            let soft = soft_topk_refs(&logits, &sel, 1.0, h, w);
            let sampled = bilinear_sample(b, &soft);
            let off = Linear::new("kds.offmap2", c, 4).forward(&ps, &sampled);
            soft.mul(&probe_r).sum().add(&off.mul(&probe_o).sum())
        },
        &b0,
        1e-5,
    )
}
