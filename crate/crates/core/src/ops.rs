//! Structured differentiable ops: 2-D convolution and bilinear grid sampling.

use ndarray::prelude::*;

use crate::tensor::{Arr, Tensor};

/// im2col for stride-1 same-style convolution with zero padding.
/// Input (cin, h, w) -> (cin*kh*kw, h*w).
fn im2col(input: &Array3<f64>, kh: usize, kw: usize, pad: usize) -> Array2<f64> {
    let (cin, h, w) = input.dim();
    let mut col = Array2::<f64>::zeros((cin * kh * kw, h * w));
    for c in 0..cin {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (c * kh + di) * kw + dj;
                for i in 0..h {
                    let si = i as isize + di as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + dj as isize - pad as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        col[[row, i * w + j]] = input[[c, si as usize, sj as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &Array2<f64>, cin: usize, h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (c * kh + di) * kw + dj;
                for i in 0..h {
                    let si = i as isize + di as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + dj as isize - pad as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        out[[c, si as usize, sj as usize]] += col[[row, i * w + j]];
                    }
                }
            }
        }
    }
    out
}

/// Stride-1 zero-padded conv. input (cin,h,w), weight (cout,cin,kh,kw), bias (cout) -> (cout,h,w).
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, pad: usize) -> Tensor {
    let ish = input.shape().to_vec();
    let wsh = weight.shape().to_vec();
    assert_eq!(ish.len(), 3, "conv2d input must be (cin,h,w)");
    assert_eq!(wsh.len(), 4, "conv2d weight must be (cout,cin,kh,kw)");
    assert_eq!(ish[0], wsh[1], "conv2d channel mismatch");
    let (cin, h, w) = (ish[0], ish[1], ish[2]);
    let (cout, kh, kw) = (wsh[0], wsh[2], wsh[3]);

    let x3 = input.data().clone().into_dimensionality::<Ix3>().unwrap();
    let col = im2col(&x3, kh, kw, pad);
    let wmat = Array2::from_shape_vec((cout, cin * kh * kw), weight.data().iter().cloned().collect()).unwrap();
    let mut out = wmat.dot(&col); // (cout, h*w)
    let b = bias.data();
    for c in 0..cout {
        let bv = b[[c]];
        out.row_mut(c).mapv_inplace(|v| v + bv);
    }
    let out = out.into_shape_with_order((cout, h, w)).unwrap().into_dyn();

    let (pi, pw, pb) = (input.clone(), weight.clone(), bias.clone());
    Tensor::build_node(
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |g| {
            let gmat = Array2::from_shape_vec((cout, h * w), g.iter().cloned().collect()).unwrap();
            let x3 = pi.data().clone().into_dimensionality::<Ix3>().unwrap();
            let col = im2col(&x3, kh, kw, pad);
            // dW
            let dw = gmat.dot(&col.t());
            pw.accum_grad(
                &Arr::from_shape_vec(IxDyn(&[cout, cin, kh, kw]), dw.iter().cloned().collect()).unwrap(),
            );
            // db
            let db = gmat.sum_axis(Axis(1));
            pb.accum_grad(&db.into_dyn());
            // dX
            let wmat =
                Array2::from_shape_vec((cout, cin * kh * kw), pw.data().iter().cloned().collect()).unwrap();
            let dcol = wmat.t().dot(&gmat);
            let dx = col2im(&dcol, cin, h, w, kh, kw, pad);
            pi.accum_grad(&dx.into_dyn());
        }),
    )
}

struct SamplePlan {
    /// per point: (i0, i1, j0, j1, ty, tx) or None when outside [0,1]^2
    cells: Vec<Option<(usize, usize, usize, usize, f64, f64)>>,
}

fn plan_samples(pts: &Arr, h: usize, w: usize) -> SamplePlan {
    let m = pts.shape()[0];
    let mut cells = Vec::with_capacity(m);
    for p in 0..m {
        let u = pts[[p, 0]];
        let v = pts[[p, 1]];
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            cells.push(None);
            continue;
        }
        let x = u * w as f64 - 0.5;
        let y = v * h as f64 - 0.5;
        let j0f = x.floor();
        let i0f = y.floor();
        let tx = x - j0f;
        let ty = y - i0f;
        let clampw = |j: isize| j.clamp(0, w as isize - 1) as usize;
        let clamph = |i: isize| i.clamp(0, h as isize - 1) as usize;
        let j0 = clampw(j0f as isize);
        let j1 = clampw(j0f as isize + 1);
        let i0 = clamph(i0f as isize);
        let i1 = clamph(i0f as isize + 1);
        cells.push(Some((i0, i1, j0, j1, ty, tx)));
    }
    SamplePlan { cells }
}

/// Bilinear sampling of a (c,h,w) grid at m normalized points (m,2) with
/// (u,v) in [0,1]^2; u runs along width, v along height. Cell centers sit at
/// ((j+0.5)/w, (i+0.5)/h). Border neighbors are clamped (a 1x1 grid returns
/// its own value everywhere); points outside the unit square yield zeros.
/// Differentiable w.r.t. both grid values and point coordinates.
pub fn bilinear_sample(grid: &Tensor, pts: &Tensor) -> Tensor {
    let gsh = grid.shape().to_vec();
    assert_eq!(gsh.len(), 3, "bilinear_sample grid must be (c,h,w)");
    assert_eq!(pts.shape().len(), 2);
    assert_eq!(pts.shape()[1], 2);
    let (c, h, w) = (gsh[0], gsh[1], gsh[2]);
    let m = pts.shape()[0];

    let plan = plan_samples(pts.data(), h, w);
    let gd = grid.data();
    let mut out = Array2::<f64>::zeros((m, c));
    for p in 0..m {
        if let Some((i0, i1, j0, j1, ty, tx)) = plan.cells[p] {
            for ch in 0..c {
                let f00 = gd[[ch, i0, j0]];
                let f01 = gd[[ch, i0, j1]];
                let f10 = gd[[ch, i1, j0]];
                let f11 = gd[[ch, i1, j1]];
                out[[p, ch]] = (1.0 - ty) * ((1.0 - tx) * f00 + tx * f01)
                    + ty * ((1.0 - tx) * f10 + tx * f11);
            }
        }
    }

    let (pg, pp) = (grid.clone(), pts.clone());
    Tensor::build_node(
        out.into_dyn(),
        vec![grid.clone(), pts.clone()],
        Box::new(move |g| {
            let plan = plan_samples(pp.data(), h, w);
            let gd = pg.data();
            let mut dgrid = Arr::zeros(IxDyn(&[c, h, w]));
            let mut dpts = Arr::zeros(IxDyn(&[m, 2]));
            for p in 0..m {
                if let Some((i0, i1, j0, j1, ty, tx)) = plan.cells[p] {
                    let mut du = 0.0;
                    let mut dv = 0.0;
                    for ch in 0..c {
                        let go = g[[p, ch]];
                        dgrid[[ch, i0, j0]] += go * (1.0 - ty) * (1.0 - tx);
                        dgrid[[ch, i0, j1]] += go * (1.0 - ty) * tx;
                        dgrid[[ch, i1, j0]] += go * ty * (1.0 - tx);
                        dgrid[[ch, i1, j1]] += go * ty * tx;
                        let f00 = gd[[ch, i0, j0]];
                        let f01 = gd[[ch, i0, j1]];
                        let f10 = gd[[ch, i1, j0]];
                        let f11 = gd[[ch, i1, j1]];
                        let dtx = (1.0 - ty) * (f01 - f00) + ty * (f11 - f10);
                        let dty = (1.0 - tx) * (f10 - f00) + tx * (f11 - f01);
                        du += go * dtx * w as f64;
                        dv += go * dty * h as f64;
                    }
                    dpts[[p, 0]] += du;
                    dpts[[p, 1]] += dv;
                }
            }
            pg.accum_grad(&dgrid);
            pp.accum_grad(&dpts);
        }),
    )
}
