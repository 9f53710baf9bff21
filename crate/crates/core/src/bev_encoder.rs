//! BEV feature encoder: a stack of stride-1 residual conv blocks mapping the
//! raster channels to a D-channel feature grid, plus a 1x1 segmentation head
//! used for the map-segmentation pretraining task.

use ndarray::{Array2, Array3, IxDyn};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geom::GridSpec;
use crate::nn::{AdamW, Init, ParamStore};
use crate::ops::conv2d;
use crate::scene_sim::{SceneSample, N_CHANNELS};
use crate::tensor::{Arr, Tensor};

pub const N_SEG_CLASSES: usize = 5;

/// The BEV feature map B: (C, H, W) in the ego frame at the current timestamp.
#[derive(Debug, Clone)]
pub struct BevFeatureMap {
    pub features: Tensor,
    pub spec: GridSpec,
}

pub struct BevEncoder {
    pub prefix: String,
    pub in_channels: usize,
    pub d: usize,
    pub n_blocks: usize,
}

impl BevEncoder {
    pub fn from_config(cfg: &RunConfig) -> BevEncoder {
        BevEncoder {
            prefix: "enc".into(),
            in_channels: N_CHANNELS,
            d: cfg.d_model,
            n_blocks: cfg.encoder_blocks,
        }
    }

    fn conv(
        &self,
        ps: &ParamStore,
        name: &str,
        x: &Tensor,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Tensor {
        let w = ps.param(
            &format!("{}.{name}.w", self.prefix),
            &[cout, cin, k, k],
            Init::Xavier { fan_in: cin * k * k, fan_out: cout * k * k },
        );
        let b = ps.param(&format!("{}.{name}.b", self.prefix), &[cout], Init::Zeros);
        conv2d(x, &w, &b, k / 2)
    }

    /// Maps the raster to the BEV feature map. Stride 1 throughout, so the
    /// output spatial dims equal the raster dims.
    pub fn encode(&self, ps: &ParamStore, raster_channels: &Array3<f64>, spec: &GridSpec) -> Result<BevFeatureMap> {
        let sh = raster_channels.shape();
        if sh.len() != 3 || sh[0] != self.in_channels {
            return Err(Error::Model(format!(
                "raster shape {sh:?} does not match encoder input ({} channels)",
                self.in_channels
            )));
        }
        if sh[1] != spec.height_cells || sh[2] != spec.width_cells {
            return Err(Error::Model(format!(
                "raster {}x{} does not match grid spec {}x{}",
                sh[1], sh[2], spec.height_cells, spec.width_cells
            )));
        }
        let x = Tensor::constant(raster_channels.clone().into_dyn());
        let mut h = self.conv(ps, "stem", &x, self.in_channels, self.d, 3).relu();
        for blk in 0..self.n_blocks {
            let y = self.conv(ps, &format!("blk{blk}.c1"), &h, self.d, self.d, 3).relu();
            let y = self.conv(ps, &format!("blk{blk}.c2"), &y, self.d, self.d, 3);
            h = h.add(&y).relu();
        }
        Ok(BevFeatureMap { features: h, spec: *spec })
    }

    /// 1x1 projection head: per-cell class logits (N_SEG_CLASSES, H, W).
    pub fn segment(&self, ps: &ParamStore, b: &BevFeatureMap) -> Tensor {
        let w = ps.param(
            &format!("{}.seg.w", self.prefix),
            &[N_SEG_CLASSES, self.d, 1, 1],
            Init::Xavier { fan_in: self.d, fan_out: N_SEG_CLASSES },
        );
        let bias = ps.param(&format!("{}.seg.b", self.prefix), &[N_SEG_CLASSES], Init::Zeros);
        conv2d(&b.features, &w, &bias, 0)
    }

    /// Per-cell cross-entropy of seg logits against labels.
    pub fn seg_loss(logits: &Tensor, labels: &Array2<u8>) -> Tensor {
        let sh = logits.shape().to_vec();
        let (k, h, w) = (sh[0], sh[1], sh[2]);
        assert_eq!((h, w), labels.dim());
        let flat = logits.reshape(&[k, h * w]).transpose2(); // (HW, K)
        let lse = flat.logsumexp(1); // (HW, 1)
        let mut onehot = Arr::zeros(IxDyn(&[h * w, k]));
        for (idx, &lbl) in labels.iter().enumerate() {
            onehot[[idx, lbl as usize]] = 1.0;
        }
        let picked = flat.mul(&Tensor::constant(onehot)).sum_axis(1, true); // (HW,1)
        lse.sub(&picked).mean()
    }

    /// Per-cell accuracy of the argmax class.
    pub fn seg_accuracy(logits: &Tensor, labels: &Array2<u8>) -> f64 {
        let sh = logits.shape().to_vec();
        let (k, h, w) = (sh[0], sh[1], sh[2]);
        let data = logits.data();
        let mut hits = 0usize;
        for i in 0..h {
            for j in 0..w {
                let mut best = 0usize;
                for c in 1..k {
                    if data[[c, i, j]] > data[[best, i, j]] {
                        best = c;
                    }
                }
                if best == labels[[i, j]] as usize {
                    hits += 1;
                }
            }
        }
        hits as f64 / (h * w) as f64
    }

    /// One segmentation-pretraining optimization step over a batch.
    /// Returns the mean batch loss.
    pub fn pretrain_step(
        &self,
        ps: &ParamStore,
        opt: &mut AdamW,
        batch: &[&SceneSample],
        lr: f64,
        step: u64,
    ) -> Result<f64> {
        assert!(!batch.is_empty());
        ps.clear_step();
        let mut losses = Vec::with_capacity(batch.len());
        for s in batch {
            let b = self.encode(ps, &s.raster.channels, &s.raster.spec)?;
            let logits = self.segment(ps, &b);
            losses.push(Self::seg_loss(&logits, &s.seg_labels));
        }
        let loss = losses
            .iter()
            .skip(1)
            .fold(losses[0].clone(), |a, l| a.add(l))
            .mul_s(1.0 / batch.len() as f64);
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { step, detail: ": segmentation pretrain".into() });
        }
        loss.backward();
        let grads = ps.collect_grads();
        opt.apply(ps, &grads, lr, &[]);
        Ok(lv)
    }
}

/// A tiny linear probe used by gradient checks: scalar = <probe, B>.
pub fn feature_probe(b: &BevFeatureMap, probe: &Tensor) -> Tensor {
    b.features.mul(probe).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_sim::{generate_scene, GenConfig};
    use crate::gradcheck::fd_grad;

    fn small_encoder() -> BevEncoder {
        BevEncoder { prefix: "enc".into(), in_channels: N_CHANNELS, d: 8, n_blocks: 2 }
    }

    fn small_scene(seed: u64) -> SceneSample {
        let mut cfg = GenConfig::from_run(&RunConfig::default());
        cfg.grid_h = 16;
        cfg.grid_w = 16;
        cfg.noise.rate = 0.0;
        cfg.noise.occlusion = false;
        generate_scene(seed, &cfg).unwrap()
    }

    #[test]
    fn zero_params_give_zero_output() {
        let ps = ParamStore::new(0);
        let enc = small_encoder();
        let spec = GridSpec::new(10.0, 8, 8).unwrap();
        let raster = Array3::<f64>::zeros((N_CHANNELS, 8, 8));
        // force all params to zero after shape registration
        let b = enc.encode(&ps, &raster, &spec).unwrap();
        for name in ps.names() {
            ps.with_slot(&name, |s| s.value.fill(0.0));
        }
        ps.clear_step();
        let b2 = enc.encode(&ps, &raster, &spec).unwrap();
        assert!(b.features.shape() == [enc.d, 8, 8]);
        assert!(b2.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_contract_and_dim_mismatch() {
        let ps = ParamStore::new(1);
        let enc = small_encoder();
        let spec = GridSpec::new(10.0, 12, 10).unwrap();
        let raster = Array3::<f64>::zeros((N_CHANNELS, 12, 10));
        let b = enc.encode(&ps, &raster, &spec).unwrap();
        assert_eq!(b.features.shape(), [8, 12, 10]);
        let bad = Array3::<f64>::zeros((N_CHANNELS, 10, 10));
        assert!(enc.encode(&ps, &bad, &spec).is_err());
        let bad_c = Array3::<f64>::zeros((N_CHANNELS + 1, 12, 10));
        assert!(enc.encode(&ps, &bad_c, &spec).is_err());
    }

    #[test]
    fn gradient_wrt_input_matches_finite_differences() {
        let ps = ParamStore::new(7);
        let mut rng_like = 0.37;
        let x0 = Arr::from_shape_fn(IxDyn(&[2, 5, 5]), |_| {
            rng_like = (rng_like * 9.73 + 0.31) % 1.0;
            rng_like - 0.5
        });
        let probe = Tensor::constant(Arr::from_shape_fn(IxDyn(&[4, 5, 5]), |_| {
            rng_like = (rng_like * 7.19 + 0.13) % 1.0;
            rng_like - 0.5
        }));
        // scalar probe as a function of one input cell: differentiate wrt the
        // raster by treating it as a leaf
        let f = |x: &Tensor| {
            ps.clear_step();
            let w = ps.param("enc.stem.w", &[4, 2, 3, 3], Init::Xavier { fan_in: 18, fan_out: 36 });
            let bia = ps.param("enc.stem.b", &[4], Init::Zeros);
            let mut h = conv2d(x, &w, &bia, 1).relu();
            let w1 = ps.param("enc.blk0.c1.w", &[4, 4, 3, 3], Init::Xavier { fan_in: 36, fan_out: 36 });
            let b1 = ps.param("enc.blk0.c1.b", &[4], Init::Zeros);
            let w2 = ps.param("enc.blk0.c2.w", &[4, 4, 3, 3], Init::Xavier { fan_in: 36, fan_out: 36 });
            let b2 = ps.param("enc.blk0.c2.b", &[4], Init::Zeros);
            let y = conv2d(&conv2d(&h, &w1, &b1, 1).relu(), &w2, &b2, 1);
            h = h.add(&y).relu();
            h.mul(&probe).sum()
        };
        let x = Tensor::leaf(x0.clone(), true);
        let out = f(&x);
        out.backward();
        let got = x.grad().unwrap();
        let want = fd_grad(|t| f(t), &x0, 1e-5);
        for (g, w) in got.iter().zip(want.iter()) {
            let denom = w.abs().max(1e-4);
            assert!((g - w).abs() / denom < 1e-3, "grad {g} vs fd {w}");
        }
    }

    #[test]
    fn translation_equivariance_on_interior() {
        let ps = ParamStore::new(3);
        let enc = BevEncoder { prefix: "enc".into(), in_channels: 2, d: 4, n_blocks: 1 };
        let spec = GridSpec::new(5.0, 10, 10).unwrap();
        let mut v = 0.11;
        let x = Array3::from_shape_fn((2, 10, 10), |_| {
            v = (v * 5.17 + 0.29) % 1.0;
            v
        });
        // shift the input by one cell along width
        let mut xs = Array3::<f64>::zeros((2, 10, 10));
        for c in 0..2 {
            for i in 0..10 {
                for j in 1..10 {
                    xs[[c, i, j]] = x[[c, i, j - 1]];
                }
            }
        }
        let b = enc.encode(&ps, &x, &spec).unwrap();
        ps.clear_step();
        let bs = enc.encode(&ps, &xs, &spec).unwrap();
        // the 1-block encoder has receptive-field radius 3, so interior cells
        // at least 4 from each border see only shifted-identical inputs
        let (f, fs) = (b.features.data(), bs.features.data());
        for c in 0..4usize {
            for i in 3..7usize {
                for j in 4..7usize {
                    let a = f[[c, i, j - 1]];
                    let bsh = fs[[c, i, j]];
                    assert!((a - bsh).abs() < 1e-5, "equivariance broke: {a} vs {bsh}");
                }
            }
        }
    }

    #[test]
    fn seg_head_shapes_and_softmax_normalization() {
        let ps = ParamStore::new(5);
        let enc = small_encoder();
        let s = small_scene(1);
        let b = enc.encode(&ps, &s.raster.channels, &s.raster.spec).unwrap();
        let logits = enc.segment(&ps, &b);
        assert_eq!(logits.shape(), [N_SEG_CLASSES, 16, 16]);
        let probs = logits.reshape(&[N_SEG_CLASSES, 256]).softmax(0);
        let sums = probs.sum_axis(0, false);
        for &v in sums.data().iter() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn perfect_one_hot_predictions_give_near_zero_loss() {
        let s = small_scene(2);
        let (h, w) = s.seg_labels.dim();
        let mut logits = Arr::zeros(IxDyn(&[N_SEG_CLASSES, h, w]));
        for i in 0..h {
            for j in 0..w {
                logits[[s.seg_labels[[i, j]] as usize, i, j]] = 30.0;
            }
        }
        let loss = BevEncoder::seg_loss(&Tensor::constant(logits), &s.seg_labels);
        assert!(loss.item() <= 1e-3, "loss {}", loss.item());
    }

    #[test]
    fn pretrain_loss_decreases_and_zero_lr_is_noop() {
        let ps = ParamStore::new(11);
        let enc = small_encoder();
        let s = small_scene(3);
        let mut opt = AdamW::new(0.01, 5.0);
        let first = enc.pretrain_step(&ps, &mut opt, &[&s], 1e-3, 0).unwrap();
        let mut last = first;
        for step in 1..50 {
            last = enc.pretrain_step(&ps, &mut opt, &[&s], 1e-3, step).unwrap();
        }
        assert!(last < first * 0.8, "pretrain did not descend: {first} -> {last}");

        let before = ps.export();
        let _ = enc.pretrain_step(&ps, &mut opt, &[&s], 0.0, 50).unwrap();
        let after = ps.export();
        for ((n1, v1, _, _), (n2, v2, _, _)) in before.iter().zip(after.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2, "zero-lr step changed {n1}");
        }
    }

    #[test]
    fn deterministic_forward() {
        let ps = ParamStore::new(9);
        let enc = small_encoder();
        let s = small_scene(6);
        let a = enc.encode(&ps, &s.raster.channels, &s.raster.spec).unwrap();
        ps.clear_step();
        let b = enc.encode(&ps, &s.raster.channels, &s.raster.spec).unwrap();
        assert_eq!(a.features.data(), b.features.data());
    }
}
