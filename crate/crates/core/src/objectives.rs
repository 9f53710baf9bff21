//! Training objective: total = goal + disp + dense + multi, with the
//! multimodal component (NLL, KL, entropy, aux) applied at every decoder
//! layer and averaged (deep supervision).

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::tensor::{Arr, Tensor};
use crate::traj_decoder::TrajectoryHypotheses;

/// min_k squared Euclidean distance between a goal candidate and the true
/// final position. Gradient flows to the winning candidate only.
pub fn goal_loss(goals: &Tensor, g: (f64, f64)) -> Tensor {
    let k = goals.shape()[0];
    assert_eq!(goals.shape(), [k, 2]);
    let gt = Tensor::constant(Arr::from_shape_vec(IxDyn(&[1, 2]), vec![g.0, g.1]).unwrap());
    let d2 = goals.sub(&gt).square().sum_axis(1, false); // (K,)
    let data = d2.data();
    let mut best = 0usize;
    for i in 1..k {
        if data[[i]] < data[[best]] {
            best = i;
        }
    }
    d2.slice_ax(0, best, 1).sum()
}

/// Elementwise Smooth-L1 between prediction and target tensors (same shape):
/// 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise. The branch is routed by a
/// detached mask, which is exact away from |d| = 1.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Tensor {
    let d = pred.sub(target);
    let mut mask = Arr::zeros(IxDyn(d.shape()));
    for (m, &v) in mask.iter_mut().zip(d.data().iter()) {
        *m = if v.abs() < 1.0 { 1.0 } else { 0.0 };
    }
    let near = Tensor::constant(mask);
    let far = near.mul_s(-1.0).add_s(1.0);
    let quad = d.square().mul_s(0.5);
    let lin = d.abs().add_s(-0.5);
    quad.mul(&near).add(&lin.mul(&far))
}

/// Mean Smooth-L1 between predicted displacements d̂ (K,) and the true
/// UNsquared distances ‖ĝ_k − g‖ (goal candidates are treated as constants
/// for this head's target, matching a self-distillation target).
pub fn disp_loss(d_hat: &Tensor, goals: &Tensor, g: (f64, f64)) -> Tensor {
    let gt = Tensor::constant(Arr::from_shape_vec(IxDyn(&[1, 2]), vec![g.0, g.1]).unwrap());
    let dist = goals
        .detach()
        .sub(&gt)
        .square()
        .sum_axis(1, false)
        .sqrt(); // (K,)
    smooth_l1(d_hat, &dist).mean()
}

/// Masked mean absolute error over valid (agent, step, coord) entries.
/// Returns (loss, warned) where warned is set when no entries are valid.
pub fn dense_loss(y_hat: &Tensor, y: &Arr, valid: &ndarray::Array2<bool>) -> (Tensor, bool) {
    let sh = y_hat.shape().to_vec();
    assert_eq!(y.shape(), sh.as_slice());
    let (n, t) = (sh[0], sh[1]);
    let mut mask = Arr::zeros(IxDyn(&[n, t, 1]));
    let mut count = 0usize;
    for a in 0..n {
        for s in 0..t {
            if valid[[a, s]] {
                mask[[a, s, 0]] = 1.0;
                count += 2; // two coords per valid step
            }
        }
    }
    if count == 0 {
        return (Tensor::scalar(0.0), true);
    }
    let diff = y_hat.sub(&Tensor::constant(y.clone())).abs();
    let loss = diff.mul(&Tensor::constant(mask)).sum().mul_s(1.0 / count as f64);
    (loss, false)
}

/// Per-(mode, step) log density of a bivariate normal GMM tensor (K, T, 5)
/// with columns (μx, μy, σx, σy, ρ), evaluated at y (T, 2) -> (K, T).
pub fn gmm_log_density(gmm: &Tensor, y: &Tensor) -> Tensor {
    let sh = gmm.shape().to_vec();
    let (k, t) = (sh[0], sh[1]);
    assert_eq!(sh[2], 5);
    assert_eq!(y.shape(), [t, 2]);
    let mux = gmm.slice_ax(2, 0, 1).reshape(&[k, t]);
    let muy = gmm.slice_ax(2, 1, 1).reshape(&[k, t]);
    let sx = gmm.slice_ax(2, 2, 1).reshape(&[k, t]);
    let sy = gmm.slice_ax(2, 3, 1).reshape(&[k, t]);
    let rho = gmm.slice_ax(2, 4, 1).reshape(&[k, t]);
    let yx = y.slice_ax(1, 0, 1).reshape(&[1, t]);
    let yy = y.slice_ax(1, 1, 1).reshape(&[1, t]);
    let dx = yx.sub(&mux).div(&sx);
    let dy = yy.sub(&muy).div(&sy);
    let one_m_r2 = rho.square().mul_s(-1.0).add_s(1.0);
    let z = dx
        .square()
        .add(&dy.square())
        .sub(&rho.mul(&dx).mul(&dy).mul_s(2.0));
    let log_norm = sx
        .ln()
        .add(&sy.ln())
        .add(&one_m_r2.ln().mul_s(0.5))
        .add_s((2.0 * std::f64::consts::PI).ln());
    z.div(&one_m_r2).mul_s(0.5).add(&log_norm).mul_s(-1.0)
}

/// NLL of the mixture under posterior weights q (K,), meaned over valid
/// steps: -(1/|valid|) Σ_t log Σ_k q_k N(y_t | θ_{k,t}).
pub fn gmm_nll_per_step(gmm: &Tensor, y: &Tensor, mask: &[bool], q: &Tensor) -> Tensor {
    let sh = gmm.shape().to_vec();
    let (k, t) = (sh[0], sh[1]);
    assert_eq!(mask.len(), t);
    let ld = gmm_log_density(gmm, y); // (K, T)
    let logq = q.ln().reshape(&[k, 1]);
    let ll = ld.add(&logq).logsumexp(0).reshape(&[t]); // (T,)
    let mut msk = Arr::zeros(IxDyn(&[t]));
    let mut count = 0usize;
    for (i, &v) in mask.iter().enumerate() {
        if v {
            msk[[i]] = 1.0;
            count += 1;
        }
    }
    assert!(count > 0, "gmm_nll on a fully masked target");
    ll.mul(&Tensor::constant(msk)).sum().mul_s(-1.0 / count as f64)
}

/// Final-step displacement per mode against y (last valid step), from the
/// GMM means. Returns (fde values, index of last valid step).
fn per_mode_fde(gmm: &Arr, y: &Arr, mask: &[bool]) -> (Vec<f64>, usize) {
    let k = gmm.shape()[0];
    let last = mask
        .iter()
        .rposition(|&v| v)
        .expect("no valid step for FDE");
    let fde = (0..k)
        .map(|m| {
            let dx = gmm[[m, last, 0]] - y[[last, 0]];
            let dy = gmm[[m, last, 1]] - y[[last, 1]];
            (dx * dx + dy * dy).sqrt()
        })
        .collect();
    (fde, last)
}

#[derive(Debug, Clone, Copy)]
pub struct MultiWeights {
    pub nll: f64,
    pub kl: f64,
    pub ent: f64,
    pub aux: f64,
}

impl Default for MultiWeights {
    fn default() -> Self {
        MultiWeights { nll: 1.0, kl: 1.0, ent: 0.01, aux: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MultiComponents {
    pub nll: f64,
    pub kl: f64,
    pub ent: f64,
    pub aux: f64,
}

/// Deep-supervised multimodal loss: mean over decoder layers of the weighted
/// (NLL, KL, entropy, aux) sum. Posterior q = softmax(-FDE/τ), detached.
pub fn multi_loss(
    layers: &[TrajectoryHypotheses],
    y: &Tensor,
    mask: &[bool],
    tau: f64,
    w: &MultiWeights,
) -> Result<(Tensor, MultiComponents)> {
    assert!(!layers.is_empty());
    let mut total: Option<Tensor> = None;
    let mut comps = MultiComponents::default();
    for hyp in layers {
        let gmm = &hyp.gmm;
        let k = gmm.shape()[0];
        let (fde, _) = per_mode_fde(gmm.data(), y.data(), mask);
        // posterior over modes, detached
        let mx = fde.iter().cloned().fold(f64::INFINITY, f64::min);
        let e: Vec<f64> = fde.iter().map(|f| (-(f - mx) / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        let qv: Vec<f64> = e.iter().map(|x| x / z).collect();
        let q = Tensor::constant(Arr::from_shape_vec(IxDyn(&[k]), qv.clone()).unwrap());

        let nll = gmm_nll_per_step(gmm, y, mask, &q);
        if !nll.item().is_finite() {
            return Err(Error::Model(format!(
                "non-finite NLL at decoder layer {}",
                hyp.layer_index
            )));
        }

        // KL(q ‖ p) with p = softmax(mode_logits); gradient flows into p
        let logp = hyp
            .mode_logits
            .sub(&hyp.mode_logits.logsumexp(0).reshape(&[1]));
        let kl = {
            let qt = q.clone();
            let logq = Tensor::constant(
                Arr::from_shape_vec(IxDyn(&[k]), qv.iter().map(|x| x.max(1e-300).ln()).collect())
                    .unwrap(),
            );
            qt.mul(&logq.sub(&logp)).sum()
        };

        // best mode by FDE, ties to lower index
        let best = fde
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(a.0.cmp(&b.0)))
            .unwrap()
            .0;
        let bg = gmm.slice_ax(0, best, 1); // (1, T, 5)
        let t = gmm.shape()[1];
        let sx = bg.slice_ax(2, 2, 1).reshape(&[t]);
        let sy = bg.slice_ax(2, 3, 1).reshape(&[t]);
        let rho = bg.slice_ax(2, 4, 1).reshape(&[t]);
        let mut msk = Arr::zeros(IxDyn(&[t]));
        let mut count = 0usize;
        for (i, &v) in mask.iter().enumerate() {
            if v {
                msk[[i]] = 1.0;
                count += 1;
            }
        }
        let mt = Tensor::constant(msk);
        // differential entropy of a bivariate normal:
        // log(2πe σx σy √(1−ρ²)), meaned over valid steps
        let ent = sx
            .ln()
            .add(&sy.ln())
            .add(&rho.square().mul_s(-1.0).add_s(1.0).ln().mul_s(0.5))
            .add_s(1.0 + (2.0 * std::f64::consts::PI).ln())
            .mul(&mt)
            .sum()
            .mul_s(1.0 / count as f64);
        // aux: mean Euclidean displacement of the best mode's means
        let means = bg.slice_ax(2, 0, 2).reshape(&[t, 2]);
        let aux = means
            .sub(y)
            .square()
            .sum_axis(1, false)
            .add_s(1e-12)
            .sqrt()
            .mul(&mt)
            .sum()
            .mul_s(1.0 / count as f64);

        comps.nll += nll.item();
        comps.kl += kl.item();
        comps.ent += ent.item();
        comps.aux += aux.item();
        let layer_total = nll
            .mul_s(w.nll)
            .add(&kl.mul_s(w.kl))
            .add(&ent.mul_s(w.ent))
            .add(&aux.mul_s(w.aux));
        total = Some(match total {
            Some(t0) => t0.add(&layer_total),
            None => layer_total,
        });
    }
    let n = layers.len() as f64;
    comps.nll /= n;
    comps.kl /= n;
    comps.ent /= n;
    comps.aux /= n;
    Ok((total.unwrap().mul_s(1.0 / n), comps))
}

#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub total: f64,
    pub goal: f64,
    pub disp: f64,
    pub dense: f64,
    pub multi: f64,
    pub nll: f64,
    pub kl: f64,
    pub ent: f64,
    pub aux: f64,
}

/// Unweighted sum of the four heads per the training objective; returns the
/// differentiable total plus a per-component report.
pub fn total_loss(
    goal: &Tensor,
    disp: &Tensor,
    dense: &Tensor,
    multi: &Tensor,
    comps: MultiComponents,
) -> (Tensor, LossReport) {
    let total = goal.add(disp).add(dense).add(multi);
    let report = LossReport {
        total: total.item(),
        goal: goal.item(),
        disp: disp.item(),
        dense: dense.item(),
        multi: multi.item(),
        nll: comps.nll,
        kl: comps.kl,
        ent: comps.ent,
        aux: comps.aux,
    };
    (total, report)
}

/// Complete objective for one sample: goal + displacement losses on the SGCP
/// outputs, dense loss on all agents' futures, and the per-layer multimodal
/// loss on the target agent, summed unweighted per the training objective.
pub fn sample_loss(
    pred: &crate::traj_decoder::Prediction,
    input: &crate::traj_decoder::ModelInput,
    tau: f64,
    w: &MultiWeights,
) -> Result<(Tensor, LossReport)> {
    let t_fut = input.future.shape()[1];
    // target agent is featurized first
    let mask: Vec<bool> = (0..t_fut).map(|s| input.future_valid[[0, s]]).collect();
    let last_valid = mask
        .iter()
        .rposition(|&v| v)
        .ok_or_else(|| Error::Model("target agent has no valid future".into()))?;
    let g = (input.future[[0, last_valid, 0]], input.future[[0, last_valid, 1]]);
    let y_target = Tensor::constant(Arr::from_shape_fn(IxDyn(&[t_fut, 2]), |ix| {
        input.future[[0, ix[0], ix[1]]]
    }));

    let goal = goal_loss(&pred.goals.goals, g);
    let disp = disp_loss(&pred.goals.disp_pred, &pred.goals.goals, g);
    let (dense, _warned) = dense_loss(&pred.y_dense, &input.future, &input.future_valid);
    let (multi, comps) = multi_loss(&pred.layers, &y_target, &mask, tau, w)?;
    Ok(total_loss(&goal, &disp, &dense, &multi, comps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_error, seeded_arr};
    use crate::traj_decoder::gmm_from_raw;

    fn tz(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::constant(Arr::from_shape_vec(IxDyn(shape), v.to_vec()).unwrap())
    }

    #[test]
    fn goal_loss_hand_cases() {
        // ĝ = {(0,0),(3,4)}, g = (1,1) → min(2, 13) = 2
        let goals = tz(&[0.0, 0.0, 3.0, 4.0], &[2, 2]);
        assert!((goal_loss(&goals, (1.0, 1.0)).item() - 2.0).abs() < 1e-12);
        // exact candidate → 0
        let goals2 = tz(&[5.0, 5.0, 1.0, 1.0], &[2, 2]);
        assert!(goal_loss(&goals2, (1.0, 1.0)).item() < 1e-12);
        // adding a worse candidate never increases the loss
        let goals3 = tz(&[0.0, 0.0, 3.0, 4.0, 100.0, 100.0], &[3, 2]);
        assert!(goal_loss(&goals3, (1.0, 1.0)).item() <= 2.0 + 1e-12);
    }

    #[test]
    fn disp_loss_hand_cases() {
        // K=1, d̂=0, true distance 0.5 → 0.5·0.5² = 0.125
        let goals = tz(&[0.5, 0.0], &[1, 2]);
        let d0 = tz(&[0.0], &[1]);
        assert!((disp_loss(&d0, &goals, (0.0, 0.0)).item() - 0.125).abs() < 1e-12);
        // K=1, d̂=0, true distance 2 → 2 − 0.5 = 1.5
        let goals2 = tz(&[2.0, 0.0], &[1, 2]);
        assert!((disp_loss(&d0, &goals2, (0.0, 0.0)).item() - 1.5).abs() < 1e-12);
        // exact distances → 0
        let goals3 = tz(&[3.0, 4.0, 0.0, 1.0], &[2, 2]);
        let dexact = tz(&[5.0, 1.0], &[2]);
        assert!(disp_loss(&dexact, &goals3, (0.0, 0.0)).item() < 1e-12);
    }

    #[test]
    fn dense_loss_hand_case_and_mask() {
        let y = Arr::from_shape_vec(IxDyn(&[1, 1, 2]), vec![0.0, 0.0]).unwrap();
        let yhat = tz(&[3.0, -4.0], &[1, 1, 2]);
        let valid = ndarray::Array2::from_elem((1, 1), true);
        let (l, warned) = dense_loss(&yhat, &y, &valid);
        assert!(!warned);
        assert!((l.item() - 3.5).abs() < 1e-12);
        // masking a step with huge error removes it entirely
        let y2 = Arr::zeros(IxDyn(&[1, 2, 2]));
        let yhat2 = tz(&[1.0, 1.0, 1e9, 1e9], &[1, 2, 2]);
        let mut valid2 = ndarray::Array2::from_elem((1, 2), true);
        valid2[[0, 1]] = false;
        let (l2, _) = dense_loss(&yhat2, &y2, &valid2);
        assert!((l2.item() - 1.0).abs() < 1e-12);
        // all-masked → 0 with warning
        let valid3 = ndarray::Array2::from_elem((1, 2), false);
        let (l3, warned3) = dense_loss(&yhat2, &y2, &valid3);
        assert_eq!(l3.item(), 0.0);
        assert!(warned3);
    }

    #[test]
    fn unit_gaussian_nll_at_mean_is_log_2pi() {
        // K=1, σ=1, ρ=0, means = Y → per-step NLL = log(2π)
        let t = 4;
        let mut g = Arr::zeros(IxDyn(&[1, t, 5]));
        for s in 0..t {
            g[[0, s, 0]] = 0.3 * s as f64;
            g[[0, s, 1]] = -0.1 * s as f64;
            g[[0, s, 2]] = 1.0;
            g[[0, s, 3]] = 1.0;
            g[[0, s, 4]] = 0.0;
        }
        let y = Arr::from_shape_fn(IxDyn(&[t, 2]), |d| {
            if d[1] == 0 {
                0.3 * d[0] as f64
            } else {
                -0.1 * d[0] as f64
            }
        });
        let q = tz(&[1.0], &[1]);
        let nll = gmm_nll_per_step(
            &Tensor::constant(g),
            &Tensor::constant(y),
            &vec![true; t],
            &q,
        );
        assert!((nll.item() - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-6);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let raw0 = seeded_arr(31, &[2, 3, 5]);
        let y = Tensor::constant(seeded_arr(32, &[3, 2]));
        let q = tz(&[0.4, 0.6], &[2]);
        let err = max_rel_error(
            |raw| gmm_nll_per_step(&gmm_from_raw(raw), &y, &[true, true, true], &q),
            &raw0,
            1e-5,
        );
        assert!(err < 1e-3, "rel err {err}");
    }

    fn hyp_from(gmm: Arr, logits: Vec<f64>) -> TrajectoryHypotheses {
        let k = gmm.shape()[0];
        TrajectoryHypotheses {
            gmm: Tensor::constant(gmm),
            mode_logits: tz(&logits, &[k]),
            layer_index: 0,
        }
    }

    #[test]
    fn kl_zero_when_prior_matches_posterior_and_aux_zero_on_exact() {
        let t = 3;
        // one mode exactly on Y, another far; τ=1
        let mut g = Arr::zeros(IxDyn(&[2, t, 5]));
        for s in 0..t {
            for m in 0..2 {
                g[[m, s, 2]] = 1.0;
                g[[m, s, 3]] = 1.0;
            }
            g[[1, s, 0]] = 50.0;
        }
        let y = Arr::zeros(IxDyn(&[t, 2]));
        // posterior is softmax(-FDE/τ) with FDEs (0, 50); logits (0, -50)
        // produce exactly that distribution, so KL(q ‖ p) must vanish
        let logits = vec![0.0, -50.0];
        let hyp = hyp_from(g, logits);
        let (_, comps) = multi_loss(
            &[hyp],
            &Tensor::constant(y),
            &vec![true; t],
            1.0,
            &MultiWeights::default(),
        )
        .unwrap();
        assert!(comps.kl.abs() < 1e-6, "kl {}", comps.kl);
        // aux = sqrt(0 + 1e-12) = 1e-6 per step on an exact match
        assert!(comps.aux.abs() <= 1e-6 + 1e-12, "aux {}", comps.aux);
    }

    #[test]
    fn kl_nonnegative_on_random_instances() {
        for seed in 0..20u64 {
            let raw = seeded_arr(seed, &[3, 2, 5]);
            let gmm = gmm_from_raw(&Tensor::constant(raw));
            let logits: Vec<f64> = seeded_arr(seed + 100, &[3]).iter().cloned().collect();
            let hyp = hyp_from(gmm.data().clone(), logits);
            let y = Tensor::constant(seeded_arr(seed + 200, &[2, 2]));
            let (_, comps) = multi_loss(
                &[hyp],
                &y,
                &[true, true],
                1.0,
                &MultiWeights::default(),
            )
            .unwrap();
            assert!(comps.kl >= -1e-9, "kl {}", comps.kl);
        }
    }

    #[test]
    fn entropy_term_ignores_means() {
        let t = 2;
        let mut g1 = Arr::zeros(IxDyn(&[1, t, 5]));
        for s in 0..t {
            g1[[0, s, 2]] = 1.3;
            g1[[0, s, 3]] = 0.7;
            g1[[0, s, 4]] = 0.2;
        }
        let mut g2 = g1.clone();
        for s in 0..t {
            g2[[0, s, 0]] = 9.0;
            g2[[0, s, 1]] = -4.0;
        }
        let y = Tensor::constant(Arr::zeros(IxDyn(&[t, 2])));
        let w = MultiWeights::default();
        let (_, c1) = multi_loss(&[hyp_from(g1, vec![0.0])], &y, &[true, true], 1.0, &w).unwrap();
        let (_, c2) = multi_loss(&[hyp_from(g2, vec![0.0])], &y, &[true, true], 1.0, &w).unwrap();
        assert!((c1.ent - c2.ent).abs() < 1e-12);
    }

    #[test]
    fn total_is_sum_of_components_and_gradients_are_linear() {
        let goal = Tensor::scalar(0.7);
        let disp = Tensor::scalar(0.2);
        let dense = Tensor::scalar(1.1);
        let multi = Tensor::scalar(0.4);
        let (tot, rep) = total_loss(&goal, &disp, &dense, &multi, MultiComponents::default());
        assert!((rep.total - (0.7 + 0.2 + 1.1 + 0.4)).abs() < 1e-6);
        assert!((tot.item() - rep.total).abs() < 1e-12);

        // gradient linearity through a probe parameter
        let p = Tensor::leaf(Arr::from_elem(IxDyn(&[1]), 1.5), true);
        let a = p.square().sum();
        let b = p.mul_s(3.0).sum();
        let t1 = a.add(&b);
        t1.backward();
        let g_sum = p.take_grad().unwrap();
        let a2 = p.square().sum();
        a2.backward();
        let ga = p.take_grad().unwrap();
        let b2 = p.mul_s(3.0).sum();
        b2.backward();
        let gb = p.take_grad().unwrap();
        assert!((g_sum[[0]] - (ga[[0]] + gb[[0]])).abs() < 1e-6);
    }
}
