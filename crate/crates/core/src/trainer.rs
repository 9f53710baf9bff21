//! Training loops (segmentation pretraining and end-to-end prediction),
//! evaluation over datasets, and the constant-velocity reference baseline.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{EvalAccumulator, EvalResult};
use crate::nn::{lr_at_epoch, AdamW, ParamStore};
use crate::objectives::{sample_loss, MultiWeights};
use crate::scene_sim::SceneSample;
use crate::tensor::{Arr, Tensor};
use crate::traj_decoder::{featurize, Model};

pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub per_epoch_lr: Vec<f64>,
    pub final_checkpoint: PathBuf,
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch.wrapping_mul(0x9E3779B97F4A7C15)));
    order.shuffle(&mut rng);
    order
}

fn csv_line(f: &mut fs::File, cells: &[String]) -> Result<()> {
    writeln!(f, "{}", cells.join(","))?;
    Ok(())
}

/// Initializes parameters from a checkpoint without adopting its optimizer
/// state or schedule position (used to warm-start from pretraining).
pub fn load_params_only(path: &Path, cfg: &RunConfig, ps: &ParamStore) -> Result<()> {
    let mut scratch = AdamW::new(0.0, 0.0);
    load_checkpoint(path, cfg, ps, &mut scratch)?;
    // reset the moments so training starts fresh
    for name in ps.names() {
        ps.with_slot(&name, |s| {
            s.m.fill(0.0);
            s.v.fill(0.0);
        });
    }
    Ok(())
}

/// Segmentation pretraining of the BEV encoder. Writes `pretrain_log.csv`
/// and `pretrain.bvck` into `out_dir`; returns the final per-cell accuracy
/// over the dataset.
pub fn pretrain(
    cfg: &RunConfig,
    samples: &[SceneSample],
    out_dir: &Path,
    ps: &ParamStore,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Model("pretraining requires a non-empty dataset".into()));
    }
    fs::create_dir_all(out_dir)?;
    let enc = crate::bev_encoder::BevEncoder::from_config(cfg);
    let mut opt = AdamW::new(cfg.weight_decay, cfg.grad_clip);
    let mut log = fs::File::create(out_dir.join("pretrain_log.csv"))?;
    csv_line(&mut log, &["step".into(), "epoch".into(), "lr".into(), "loss".into()])?;

    let mut step: u64 = 0;
    for epoch in 0..cfg.pretrain_epochs as u64 {
        let lr = lr_at_epoch(cfg.lr, cfg.lr_decay, cfg.lr_decay_every_epochs, epoch as usize);
        let order = epoch_order(cfg.seed, epoch, samples.len());
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&SceneSample> = chunk.iter().map(|&i| &samples[i]).collect();
            ps.clear_step();
            ps.reseed_step(cfg.seed, step);
            let loss = enc.pretrain_step(ps, &mut opt, &batch, lr, step)?;
            step += 1;
            csv_line(
                &mut log,
                &[step.to_string(), epoch.to_string(), format!("{lr:e}"), format!("{loss:.6}")],
            )?;
        }
        save_checkpoint(&out_dir.join("pretrain.bvck"), cfg, ps, &opt, epoch + 1, step)?;
    }

    // final accuracy over the clean labels
    let mut hits = 0.0;
    for s in samples {
        ps.clear_step();
        let b = enc.encode(ps, &s.raster.channels, &s.raster.spec)?;
        let logits = enc.segment(ps, &b);
        hits += crate::bev_encoder::BevEncoder::seg_accuracy(&logits, &s.seg_labels);
    }
    Ok(hits / samples.len() as f64)
}

/// End-to-end training. Writes `train_log.csv` and per-epoch checkpoints
/// (`ck_epoch_N.bvck`, plus `ck_final.bvck`) into `out_dir`. `init_from`
/// warm-starts parameters (pretrained encoder); `resume` continues an
/// interrupted run bit-exactly.
pub fn train(
    cfg: &RunConfig,
    samples: &[SceneSample],
    out_dir: &Path,
    ps: &ParamStore,
    init_from: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    if samples.is_empty() {
        return Err(Error::Model("training requires a non-empty dataset".into()));
    }
    fs::create_dir_all(out_dir)?;
    let model = Model::from_config(cfg);
    let mut opt = AdamW::new(cfg.weight_decay, cfg.grad_clip);
    let weights = MultiWeights { nll: cfg.w_nll, kl: cfg.w_kl, ent: cfg.w_ent, aux: cfg.w_aux };
    let frozen: Vec<String> = if cfg.freeze_encoder { vec!["enc.".into()] } else { vec![] };

    let mut start_epoch: u64 = 0;
    let mut step: u64 = 0;
    if let Some(path) = init_from {
        load_params_only(path, cfg, ps)?;
    }
    if let Some(path) = resume {
        let (state, _) = load_checkpoint(path, cfg, ps, &mut opt)?;
        start_epoch = state.epoch;
        step = state.step;
    }

    let log_path = out_dir.join("train_log.csv");
    let mut log = if resume.is_some() && log_path.exists() {
        fs::OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = fs::File::create(&log_path)?;
        csv_line(
            &mut f,
            &[
                "step", "epoch", "lr", "total", "goal", "disp", "dense", "multi", "nll", "kl",
                "ent", "aux",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>(),
        )?;
        f
    };

    let mut per_epoch_lr = Vec::new();
    let mut final_loss = f64::NAN;
    for epoch in start_epoch..cfg.epochs as u64 {
        let lr = lr_at_epoch(cfg.lr, cfg.lr_decay, cfg.lr_decay_every_epochs, epoch as usize);
        per_epoch_lr.push(lr);
        let order = epoch_order(cfg.seed, epoch, samples.len());
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            ps.clear_step();
            ps.reseed_step(cfg.seed, step);
            let mut batch_loss: Option<Tensor> = None;
            let mut report_acc = [0.0f64; 9];
            for &i in chunk {
                let (pred, input) = model.predict(ps, &samples[i])?;
                let (loss, rep) = sample_loss(&pred, &input, cfg.posterior_tau, &weights)?;
                if !loss.item().is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        detail: format!(
                            "; batch sample indices {:?} (scene ids {:?})",
                            chunk,
                            chunk.iter().map(|&j| samples[j].scene_id).collect::<Vec<_>>()
                        ),
                    });
                }
                for (a, v) in report_acc.iter_mut().zip([
                    rep.total, rep.goal, rep.disp, rep.dense, rep.multi, rep.nll, rep.kl,
                    rep.ent, rep.aux,
                ]) {
                    *a += v;
                }
                batch_loss = Some(match batch_loss {
                    Some(acc) => acc.add(&loss),
                    None => loss,
                });
            }
            let bn = chunk.len() as f64;
            let mean = batch_loss.unwrap().mul_s(1.0 / bn);
            mean.backward();
            let grads = ps.collect_grads();
            opt.apply(ps, &grads, lr, &frozen);
            step += 1;
            final_loss = report_acc[0] / bn;
            let mut cells = vec![step.to_string(), epoch.to_string(), format!("{lr:e}")];
            cells.extend(report_acc.iter().map(|v| format!("{:.6}", v / bn)));
            csv_line(&mut log, &cells)?;
        }
        if (epoch as usize + 1) % cfg.checkpoint_every_epochs == 0 {
            save_checkpoint(&out_dir.join(format!("ck_epoch_{}.bvck", epoch + 1)), cfg, ps, &opt, epoch + 1, step)?;
        }
    }
    let final_ck = out_dir.join("ck_final.bvck");
    save_checkpoint(&final_ck, cfg, ps, &opt, cfg.epochs as u64, step)?;
    Ok(TrainSummary { steps: step, final_loss, per_epoch_lr, final_checkpoint: final_ck })
}

/// Evaluates a model over a dataset. Returns one [`EvalResult`] per decoder
/// layer (ITP first, final refinement last); the last entry is the headline
/// metric set.
pub fn evaluate(cfg: &RunConfig, ps: &ParamStore, samples: &[SceneSample]) -> Result<Vec<EvalResult>> {
    let model = Model::from_config(cfg);
    let n_layers = cfg.itr_blocks + 1;
    let mut accs: Vec<EvalAccumulator> = (0..n_layers).map(|_| EvalAccumulator::new()).collect();
    for s in samples {
        ps.clear_step();
        let (pred, input) = model.predict(ps, s)?;
        let t_fut = input.future.shape()[1];
        let y = Arr::from_shape_fn(IxDyn(&[t_fut, 2]), |ix| input.future[[0, ix[0], ix[1]]]);
        let mask: Vec<bool> = (0..t_fut).map(|s| input.future_valid[[0, s]]).collect();
        for (acc, hyp) in accs.iter_mut().zip(&pred.layers) {
            let probs: Vec<f64> =
                hyp.mode_logits.softmax(0).data().iter().cloned().collect();
            let means = hyp.gmm.slice_ax(2, 0, 2).data().clone();
            acc.push(&means, &probs, &y, &mask);
        }
    }
    accs.iter().map(|a| a.finish()).collect()
}

/// Constant-velocity baseline: a single mode extrapolating the target's
/// current velocity in the target frame.
pub fn constant_velocity_eval(cfg: &RunConfig, samples: &[SceneSample]) -> Result<EvalResult> {
    let dt = 1.0 / cfg.hz;
    let mut acc = EvalAccumulator::new();
    for s in samples {
        let input = featurize(s);
        let cur = s.current_idx();
        let (vx, vy) = (input.state.target[[cur, 3]], input.state.target[[cur, 4]]);
        let t_fut = input.future.shape()[1];
        let traj = Arr::from_shape_fn(IxDyn(&[1, t_fut, 2]), |ix| {
            let t = (ix[1] + 1) as f64 * dt;
            if ix[2] == 0 {
                vx * t
            } else {
                vy * t
            }
        });
        let y = Arr::from_shape_fn(IxDyn(&[t_fut, 2]), |ix| input.future[[0, ix[0], ix[1]]]);
        let mask: Vec<bool> = (0..t_fut).map(|i| input.future_valid[[0, i]]).collect();
        acc.push(&traj, &[1.0], &y, &mask);
    }
    acc.finish()
}

/// Generates `n` scenes with the config's generator settings, seeded from
/// `base_seed`; scene i uses seed base_seed + i.
pub fn generate_dataset(cfg: &RunConfig, base_seed: u64, n: usize) -> Result<Vec<SceneSample>> {
    let gc = crate::scene_sim::GenConfig::from_run(cfg);
    (0..n as u64)
        .map(|i| crate::scene_sim::generate_scene(base_seed + i, &gc))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::small();
        cfg.history_sec = 0.4;
        cfg.future_sec = 0.6;
        cfg.t_history = 5;
        cfg.t_future = 6;
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.n_bev_queries = 4;
        cfg.key_points = 4;
        cfg.knn = 4;
        cfg.k_modes = 5;
        cfg.grid_h = 16;
        cfg.grid_w = 16;
        cfg.pre_encoder_layers = 1;
        cfg.bda_layers = 1;
        cfg.local_attn_layers = 1;
        cfg.sgcp_blocks = 1;
        cfg.itr_blocks = 1;
        cfg.batch_size = 2;
        cfg.epochs = 2;
        cfg.pretrain_epochs = 1;
        cfg.lr = 1e-3;
        cfg
    }

    #[test]
    fn train_logs_checkpoints_and_loss_decreases() {
        let cfg = tiny_cfg();
        let samples = generate_dataset(&cfg, 100, 4).unwrap();
        let dir = tempdir().unwrap();
        let ps = ParamStore::new(cfg.seed);
        let mut cfg2 = cfg.clone();
        cfg2.epochs = 6;
        let summary = train(&cfg2, &samples, dir.path(), &ps, None, None).unwrap();
        assert_eq!(summary.steps, 6 * 2); // 4 samples / batch 2 per epoch
        let log = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 1 + 12, "one header plus one row per step");
        assert!(lines[0].starts_with("step,epoch,lr,total"));
        // first-step loss vs last-step loss
        let total_of = |line: &str| -> f64 { line.split(',').nth(3).unwrap().parse().unwrap() };
        assert!(
            total_of(lines[12]) < total_of(lines[1]),
            "loss did not decrease: {} -> {}",
            total_of(lines[1]),
            total_of(lines[12])
        );
        assert!(dir.path().join("ck_epoch_1.bvck").exists());
        assert!(summary.final_checkpoint.exists());
    }

    #[test]
    fn resume_is_bit_exact() {
        let cfg = tiny_cfg();
        let samples = generate_dataset(&cfg, 200, 4).unwrap();

        // uninterrupted 2-epoch run
        let dir_a = tempdir().unwrap();
        let ps_a = ParamStore::new(cfg.seed);
        train(&cfg, &samples, dir_a.path(), &ps_a, None, None).unwrap();

        // 1 epoch, then resume for the second
        let dir_b = tempdir().unwrap();
        let mut cfg1 = cfg.clone();
        cfg1.epochs = 1;
        let ps_b = ParamStore::new(cfg.seed);
        let s1 = train(&cfg1, &samples, dir_b.path(), &ps_b, None, None).unwrap();
        let ps_c = ParamStore::new(cfg.seed);
        train(&cfg, &samples, dir_b.path(), &ps_c, None, Some(&s1.final_checkpoint)).unwrap();

        let a = ps_a.export();
        for (name, value, m, v) in a {
            let (v2, m2, vv2) = ps_c
                .with_slot(&name, |s| (s.value.clone(), s.m.clone(), s.v.clone()))
                .unwrap_or_else(|| panic!("missing param {name} after resume"));
            for (x, y) in value.iter().zip(v2.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {name} diverged");
            }
            for (x, y) in m.iter().zip(m2.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "moment m of {name} diverged");
            }
            for (x, y) in v.iter().zip(vv2.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "moment v of {name} diverged");
            }
        }
    }

    #[test]
    fn pretrain_improves_segmentation_accuracy() {
        let mut cfg = tiny_cfg();
        cfg.pretrain_epochs = 4;
        cfg.lr = 3e-3;
        let samples = generate_dataset(&cfg, 300, 4).unwrap();
        let dir = tempdir().unwrap();
        let ps = ParamStore::new(cfg.seed);

        // untrained accuracy
        let enc = crate::bev_encoder::BevEncoder::from_config(&cfg);
        let mut acc0 = 0.0;
        for s in &samples {
            ps.clear_step();
            let b = enc.encode(&ps, &s.raster.channels, &s.raster.spec).unwrap();
            let logits = enc.segment(&ps, &b);
            acc0 += crate::bev_encoder::BevEncoder::seg_accuracy(&logits, &s.seg_labels);
        }
        acc0 /= samples.len() as f64;

        let acc = pretrain(&cfg, &samples, dir.path(), &ps).unwrap();
        assert!(acc > acc0, "pretraining did not improve accuracy: {acc0} -> {acc}");
        assert!(dir.path().join("pretrain.bvck").exists());
        // the pretrain checkpoint can warm-start a trainer parameter store
        let ps2 = ParamStore::new(7);
        load_params_only(&dir.path().join("pretrain.bvck"), &cfg, &ps2).unwrap();
        assert!(ps2.names().iter().any(|n| n.starts_with("enc.")));
    }

    #[test]
    fn cv_baseline_and_eval_are_comparable() {
        let cfg = tiny_cfg();
        let samples = generate_dataset(&cfg, 400, 4).unwrap();
        let cv = constant_velocity_eval(&cfg, &samples).unwrap();
        assert!(cv.min_fde10.is_finite() && cv.min_ade10 >= 0.0);
        let ps = ParamStore::new(cfg.seed);
        let per_layer = evaluate(&cfg, &ps, &samples).unwrap();
        assert_eq!(per_layer.len(), cfg.itr_blocks + 1);
        for r in &per_layer {
            assert_eq!(r.n_samples, 4);
            assert!(r.min_ade10 <= r.min_ade5 + 1e-12);
        }
    }

    #[test]
    fn frozen_encoder_params_do_not_move() {
        let mut cfg = tiny_cfg();
        cfg.freeze_encoder = true;
        cfg.epochs = 1;
        let samples = generate_dataset(&cfg, 500, 2).unwrap();
        let dir = tempdir().unwrap();
        let ps = ParamStore::new(cfg.seed);
        // one forward to create encoder params, snapshot them
        let model = Model::from_config(&cfg);
        let _ = model.predict(&ps, &samples[0]).unwrap();
        let before: Vec<(String, Arr)> = ps
            .export()
            .into_iter()
            .filter(|e| e.0.starts_with("enc."))
            .map(|e| (e.0, e.1))
            .collect();
        assert!(!before.is_empty());
        train(&cfg, &samples, dir.path(), &ps, None, None).unwrap();
        for (name, old) in before {
            let now = ps.with_slot(&name, |s| s.value.clone()).unwrap();
            for (x, y) in old.iter().zip(now.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "frozen param {name} moved");
            }
        }
    }
}
