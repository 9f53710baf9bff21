//! Finite-difference gradient auditing: a shared FD helper and a registry of
//! named checks over every custom differentiable op, runnable from the CLI.

use ndarray::IxDyn;

use crate::nn::{Init, ParamStore};
use crate::ops::{bilinear_sample, conv2d};
use crate::tensor::{Arr, Tensor};

/// Central finite-difference gradient of a scalar-valued function of one
/// tensor argument.
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

/// Max relative error between the analytic gradient of `f` at `x0` and the
/// central finite difference.
pub fn max_rel_error(f: impl Fn(&Tensor) -> Tensor, x0: &Arr, h: f64) -> f64 {
    let x = Tensor::leaf(x0.clone(), true);
    let y = f(&x);
    y.backward();
    let g = x.grad().expect("no gradient reached the probe leaf");
    let gfd = fd_grad(&f, x0, h);
    g.iter()
        .zip(gfd.iter())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub const REL_TOL: f64 = 1e-3;

/// Deterministic pseudo-random array for seeding checks (no RNG dependency in
/// the hot path; a simple LCG keeps the values reproducible and well-spread).
pub fn seeded_arr(seed: u64, shape: &[usize]) -> Arr {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Arr::from_shape_fn(IxDyn(shape), |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
    })
}

fn check_bilinear(seed: u64, corrupt: bool) -> f64 {
    let grid0 = seeded_arr(seed, &[3, 6, 6]);
    let pts = Tensor::constant(
        seeded_arr(seed + 1, &[5, 2]).mapv(|v| 0.5 + 0.4 * v),
    );
    let probe = Tensor::constant(seeded_arr(seed + 2, &[5, 3]));
    let e_grid = max_rel_error(
        |g| bilinear_sample(g, &pts).mul(&probe).sum(),
        &grid0,
        1e-5,
    );
    let grid = Tensor::constant(grid0);
    let pts0 = pts.data().clone();
    let mut e_pts = max_rel_error(|p| bilinear_sample(&grid, p).mul(&probe).sum(), &pts0, 1e-5);
    if corrupt {
        e_pts += 1.0; // test hook: simulate a broken gradient
    }
    e_grid.max(e_pts)
}

fn check_deform_attn(seed: u64) -> f64 {
    use crate::deform_attn::{deform_cross_attn, DeformAttn};
    let ps = ParamStore::new(seed);
    let da = DeformAttn::new("gc.da", 8, 2, 2);
    let refs = Tensor::constant(seeded_arr(seed + 3, &[3, 2]).mapv(|v| 0.5 + 0.3 * v));
    let b0 = seeded_arr(seed + 4, &[8, 8, 8]);
    let probe = Tensor::constant(seeded_arr(seed + 5, &[3, 8]));
    let q0 = seeded_arr(seed + 6, &[3, 8]);
    let q = Tensor::constant(q0.clone());
    let e_b = max_rel_error(
        |b| {
            ps.clear_step();
            deform_cross_attn(&ps, &da, &q, &refs, b).mul(&probe).sum()
        },
        &b0,
        1e-5,
    );
    let bt = Tensor::constant(b0);
    let e_q = max_rel_error(
        |qq| {
            ps.clear_step();
            deform_cross_attn(&ps, &da, qq, &refs, &bt).mul(&probe).sum()
        },
        &q0,
        1e-5,
    );
    let refs0 = refs.data().clone();
    let e_r = max_rel_error(
        |r| {
            ps.clear_step();
            deform_cross_attn(&ps, &da, &q, r, &bt).mul(&probe).sum()
        },
        &refs0,
        1e-5,
    );
    e_b.max(e_q).max(e_r)
}

fn check_gmm_nll(seed: u64) -> f64 {
    use crate::objectives::gmm_nll_per_step;
    // raw (K,T,5) head outputs before the sigma/rho maps
    let raw0 = seeded_arr(seed + 7, &[2, 3, 5]);
    let y = Tensor::constant(seeded_arr(seed + 8, &[3, 2]).mapv(|v| v * 2.0));
    let mask = vec![true, true, true];
    let q = Tensor::constant(Arr::from_shape_vec(IxDyn(&[2]), vec![0.3, 0.7]).unwrap());
    max_rel_error(
        |raw| gmm_nll_per_step(&crate::traj_decoder::gmm_from_raw(raw), &y, &mask, &q),
        &raw0,
        1e-5,
    )
}

fn check_encoder_probe(seed: u64) -> f64 {
    let ps = ParamStore::new(seed);
    let x0 = seeded_arr(seed + 9, &[2, 5, 5]);
    let probe = Tensor::constant(seeded_arr(seed + 10, &[3, 5, 5]));
    max_rel_error(
        |x| {
            ps.clear_step();
            let w = ps.param("gc.conv.w", &[3, 2, 3, 3], Init::Xavier { fan_in: 18, fan_out: 27 });
            let b = ps.param("gc.conv.b", &[3], Init::Zeros);
            conv2d(x, &w, &b, 1).relu().mul(&probe).sum()
        },
        &x0,
        1e-5,
    )
}

fn check_key_driven(seed: u64) -> f64 {
    use crate::deform_attn::key_driven_sampling_probe;
    key_driven_sampling_probe(seed)
}

/// Runs every registered check. `corrupt` enables the fault-injection hook on
/// the bilinear check (used to prove the harness actually detects failures).
pub fn run_all(seed: u64, corrupt: bool) -> Vec<CheckReport> {
    let checks: Vec<(&'static str, f64)> = vec![
        ("bilinear_sample", check_bilinear(seed, corrupt)),
        ("deform_cross_attn", check_deform_attn(seed)),
        ("key_driven_sampling", check_key_driven(seed)),
        ("gmm_nll", check_gmm_nll(seed)),
        ("encoder_probe", check_encoder_probe(seed)),
    ];
    checks
        .into_iter()
        .map(|(name, err)| CheckReport { name, max_rel_err: err, passed: err < REL_TOL })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_registered_checks_pass() {
        let reports = run_all(0, false);
        assert!(reports.len() >= 4, "registry must list at least 4 ops");
        for r in &reports {
            assert!(r.passed, "{} failed with rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn corrupted_gradient_is_detected_and_named() {
        let reports = run_all(0, true);
        let bil = reports.iter().find(|r| r.name == "bilinear_sample").unwrap();
        assert!(!bil.passed);
        for r in reports.iter().filter(|r| r.name != "bilinear_sample") {
            assert!(r.passed);
        }
    }
}
