//! Iterative deformable decoder: sparse goal candidate proposal (key-driven
//! deformable sampling), initial trajectory prediction, and iterative
//! trajectory refinement with per-layer GMM outputs for deep supervision.

use ndarray::IxDyn;

use crate::bev_encoder::BevFeatureMap;
use crate::config::RunConfig;
use crate::deform_attn::{deform_cross_attn, key_driven_sampling, DeformAttn};
use crate::geom::{sinusoidal_pe, NormalizedPoint, Pose2};
use crate::nn::{Linear, Mlp, ParamStore, TransformerBlock};
use crate::tensor::{concat, Arr, Tensor};

/// One decoder layer's multimodal hypotheses: per-mode, per-step bivariate
/// Gaussian parameters (μx, μy, σx, σy, ρ) plus mode logits.
#[derive(Debug, Clone)]
pub struct TrajectoryHypotheses {
    pub gmm: Tensor,
    pub mode_logits: Tensor,
    pub layer_index: usize,
}

#[derive(Debug, Clone)]
pub struct GoalSet {
    /// (K, 2) meters, target frame.
    pub goals: Tensor,
    /// (K,) non-negative predicted final displacement errors.
    pub disp_pred: Tensor,
}

/// Applies the stability maps to raw head outputs (K, T, 5):
/// σ = softplus(raw) + 1e-3, ρ = 0.99·tanh(raw); means pass through.
pub fn gmm_from_raw(raw: &Tensor) -> Tensor {
    let sh = raw.shape().to_vec();
    assert_eq!(sh[2], 5);
    let mu = raw.slice_ax(2, 0, 2);
    let sigma = raw.slice_ax(2, 2, 2).softplus().add_s(1e-3);
    let rho = raw.slice_ax(2, 4, 1).tanh().mul_s(0.99);
    concat(2, &[mu, sigma, rho])
}

/// Target agent's dynamic state history (t, K_attr) with K_attr = 7:
/// (x, y, yaw, vx, vy, kind code, valid).
#[derive(Debug, Clone)]
pub struct DynamicState {
    pub ego: Arr,
    pub target: Arr,
}

impl DynamicState {
    pub const K_ATTR: usize = 7;
}

pub struct TrajDecoder {
    pub d: usize,
    pub k_modes: usize,
    pub t_future: usize,
    pub n_heads: usize,
    pub n_points: usize,
    pub key_points: usize,
    pub sgcp_blocks: usize,
    pub itr_blocks: usize,
    pub ffn_mult: usize,
    pub tau: f64,
}

impl TrajDecoder {
    pub fn from_config(cfg: &RunConfig) -> TrajDecoder {
        TrajDecoder {
            d: cfg.d_model,
            k_modes: cfg.k_modes,
            t_future: cfg.t_future,
            n_heads: cfg.n_heads,
            n_points: cfg.n_points,
            key_points: cfg.key_points,
            sgcp_blocks: cfg.sgcp_blocks,
            itr_blocks: cfg.itr_blocks,
            ffn_mult: cfg.ffn_mult,
            tau: cfg.posterior_tau,
        }
    }

    fn state_mlp(&self, ps: &ParamStore, name: &str, q: &Tensor, s: &Arr) -> Tensor {
        // flatten the (t, K_attr) state and fuse with each query via MLP
        let flat: Vec<f64> = s.iter().cloned().collect();
        let sv = Tensor::constant(
            Arr::from_shape_vec(IxDyn(&[1, flat.len()]), flat).unwrap(),
        );
        let senc = Mlp::new(&format!("{name}.senc"), s.len(), self.d, self.d).forward(ps, &sv); // (1, D)
        let k = q.shape()[0];
        let ones = Tensor::constant(Arr::from_elem(IxDyn(&[k, 1]), 1.0));
        let fused = concat(1, &[q.clone(), senc.mul(&ones)]);
        Mlp::new(&format!("{name}.fuse"), 2 * self.d, self.d, self.d)
            .forward(ps, &fused)
            .add(q)
    }

    /// Sparse goal candidate proposal. Returns content queries Qc (K, D) and
    /// the goal set (target frame, meters). `target_from_ego` maps ego-frame
    /// metric coordinates into the target frame.
    pub fn sgcp(
        &self,
        ps: &ParamStore,
        seeds: &Tensor,
        state: &DynamicState,
        b: &BevFeatureMap,
        target_from_ego: &Pose2,
    ) -> (Tensor, GoalSet) {
        let k = self.k_modes;
        assert_eq!(seeds.shape(), [k, self.d]);
        let mut q = seeds.clone();
        let mut goals = Tensor::constant(Arr::zeros(IxDyn(&[k, 2])));
        for blk in 0..self.sgcp_blocks {
            let name = format!("dec.sgcp{blk}");
            // (1) fuse with ego-frame state
            q = self.state_mlp(ps, &format!("{name}.ego"), &q, &state.ego);
            // (2) key-driven deformable cross-attention against B (ego space)
            let kds = key_driven_sampling(
                ps,
                &format!("{name}.kds"),
                &b.features,
                self.key_points.min(k.max(1)),
                self.n_points,
                self.tau,
            );
            // queries attend at the key-derived refs: assign each mode the
            // refs cyclically and use the key-derived offsets as its anchors
            let n_refs = kds.indices.len();
            let idx: Vec<usize> = (0..k).map(|m| m % n_refs).collect();
            let refs = kds.refs.index_select(&idx); // (K, 2)
            let da = DeformAttn::new(format!("{name}.da"), self.d, self.n_heads, self.n_points);
            // key-derived offsets shift the refs before query-driven sampling
            let off = kds.offsets.index_select(&idx); // (K, P, 2)
            let mean_off = off.mean_axis(1, false); // (K, 2) cell units
            let norm = Tensor::constant(
                Arr::from_shape_vec(
                    IxDyn(&[2]),
                    vec![
                        1.0 / b.spec.width_cells as f64,
                        1.0 / b.spec.height_cells as f64,
                    ],
                )
                .unwrap(),
            );
            let refs_shifted = refs.add(&mean_off.mul(&norm)).clamp(0.0, 1.0);
            let attended = deform_cross_attn(ps, &da, &q, &refs_shifted, &b.features);
            q = q.add(&attended);
            // (3) fuse with target-frame state
            q = self.state_mlp(ps, &format!("{name}.tgt"), &q, &state.target);
            // (4) mode self-attention (target space)
            let blk_t = TransformerBlock::new(&format!("{name}.modes"), self.d, self.n_heads, self.ffn_mult);
            q = blk_t.forward(ps, &q, None);
            // (5) goal head, refined additively across blocks
            let dg = Linear::zeroed(format!("{name}.goal"), self.d, 2).forward(ps, &q);
            goals = goals.add(&dg);
        }
        let disp = Linear::new("dec.sgcp.disp", self.d, 1)
            .forward(ps, &q)
            .reshape(&[k])
            .softplus();
        let _ = target_from_ego;
        (q, GoalSet { goals, disp_pred: disp })
    }

    /// Initial trajectory prediction: cross-attention with the scene context,
    /// goal-anchored deformable attention on B, then expansion to (K, T, D)
    /// and the layer-0 GMM head.
    pub fn itp(
        &self,
        ps: &ParamStore,
        qc: &Tensor,
        goals: &Tensor,
        ctx_tokens: &Tensor,
        b: &BevFeatureMap,
        ego_from_target: &Pose2,
    ) -> (Tensor, TrajectoryHypotheses) {
        let k = self.k_modes;
        let t = self.t_future;
        // positional query from the goals
        let pe = sinusoidal_pe(goals, self.d).expect("pe dims");
        let pos = Mlp::new("dec.itp.pos", self.d, self.d, self.d).forward(ps, &pe);
        let mut q = qc.add(&pos);
        // cross-attention over the scene context
        let cross = TransformerBlock::new("dec.itp.cross", self.d, self.n_heads, self.ffn_mult);
        q = cross.forward_cross(ps, &q, ctx_tokens, None);
        // deformable attention on B with per-mode refs = goals (ego grid)
        let refs = goals_to_grid(goals, ego_from_target, &b.spec);
        let da = DeformAttn::new("dec.itp.da", self.d, self.n_heads, self.n_points);
        q = q.add(&deform_cross_attn(ps, &da, &q, &refs, &b.features));
        // expand D -> T*D and reshape
        let e = Mlp::new("dec.itp.expand", self.d, self.d, t * self.d)
            .forward(ps, &q)
            .reshape(&[k, t, self.d]);
        let hyp = self.gmm_head(ps, "dec.itp.head", &e, 0, None);
        (e, hyp)
    }

    /// One iterative refinement block: temporal and mode self-attention,
    /// context cross-attention, waypoint-anchored deformable attention, and a
    /// zero-initialized Δ head on the means.
    pub fn itr_block(
        &self,
        ps: &ParamStore,
        layer: usize,
        e: &Tensor,
        traj_prev: &Tensor,
        ctx_tokens: &Tensor,
        b: &BevFeatureMap,
        ego_from_target: &Pose2,
    ) -> (Tensor, TrajectoryHypotheses) {
        let k = self.k_modes;
        let t = self.t_future;
        let d = self.d;
        let name = format!("dec.itr{layer}");
        assert_eq!(e.shape(), [k, t, d]);
        assert_eq!(traj_prev.shape(), [k, t, 2]);

        // temporal PE on the step index
        let steps = Tensor::constant(Arr::from_shape_fn(IxDyn(&[t, 1]), |ix| ix[0] as f64 / t as f64));
        let tpe = sinusoidal_pe(&steps, d).expect("pe dims");

        // temporal self-attention within each mode
        let temporal = TransformerBlock::new(&format!("{name}.temporal"), d, self.n_heads, self.ffn_mult);
        let mut per_mode = Vec::with_capacity(k);
        for m in 0..k {
            let em = e.slice_ax(0, m, 1).reshape(&[t, d]).add(&tpe);
            per_mode.push(temporal.forward(ps, &em, None).reshape(&[1, t, d]));
        }
        let e1 = concat(0, &per_mode);

        // mode self-attention at each timestep
        let modes = TransformerBlock::new(&format!("{name}.modes"), d, self.n_heads, self.ffn_mult);
        let mut per_step = Vec::with_capacity(t);
        for s in 0..t {
            let es = e1.slice_ax(1, s, 1).reshape(&[k, d]);
            per_step.push(modes.forward(ps, &es, None).reshape(&[k, 1, d]));
        }
        let e2 = concat(1, &per_step);

        // context cross-attention over all (mode, step) tokens
        let flat = e2.reshape(&[k * t, d]);
        let cross = TransformerBlock::new(&format!("{name}.cross"), d, self.n_heads, self.ffn_mult);
        let flat = cross.forward_cross(ps, &flat, ctx_tokens, None);

        // deformable attention on B, one reference point per waypoint
        let refs = goals_to_grid(&traj_prev.reshape(&[k * t, 2]), ego_from_target, &b.spec);
        let da = DeformAttn::new(format!("{name}.da"), d, self.n_heads, self.n_points);
        let flat = flat.add(&deform_cross_attn(ps, &da, &flat, &refs, &b.features));
        let e3 = flat.reshape(&[k, t, d]);

        let hyp = self.gmm_head(ps, &format!("{name}.head"), &e3, layer + 1, Some(traj_prev));
        (e3, hyp)
    }

    /// GMM head over (K, T, D): raw (K, T, 5) through the stability maps.
    /// When `base_means` is given, the μ head is zero-initialized and its
    /// output is added to the base (refinement); otherwise μ is predicted
    /// directly. Mode logits are re-predicted from max-pooled mode features.
    fn gmm_head(
        &self,
        ps: &ParamStore,
        name: &str,
        e: &Tensor,
        layer_index: usize,
        base_means: Option<&Tensor>,
    ) -> TrajectoryHypotheses {
        let k = self.k_modes;
        let t = self.t_future;
        let d = self.d;
        let flat = e.reshape(&[k * t, d]);
        let raw_sr = Linear::new(format!("{name}.sr"), d, 3).forward(ps, &flat).reshape(&[k, t, 3]);
        let mu = match base_means {
            Some(base) => {
                let delta = Linear::zeroed(format!("{name}.dmu"), d, 2)
                    .forward(ps, &flat)
                    .reshape(&[k, t, 2]);
                base.add(&delta)
            }
            None => Linear::new(format!("{name}.mu"), d, 2)
                .forward(ps, &flat)
                .reshape(&[k, t, 2]),
        };
        let raw = concat(2, &[mu, raw_sr]);
        // stability maps on σ, ρ only
        let gmm = {
            let mu2 = raw.slice_ax(2, 0, 2);
            let sigma = raw.slice_ax(2, 2, 2).softplus().add_s(1e-3);
            let rho = raw.slice_ax(2, 4, 1).tanh().mul_s(0.99);
            concat(2, &[mu2, sigma, rho])
        };
        let pooled = e.max_axis(1); // (K, D)
        let logits = Linear::new(format!("{name}.logit"), d, 1)
            .forward(ps, &pooled)
            .reshape(&[k]);
        TrajectoryHypotheses { gmm, mode_logits: logits, layer_index }
    }

    /// Learned seed parameters P (K, D).
    pub fn seeds(&self, ps: &ParamStore) -> Tensor {
        ps.param(
            "dec.seeds",
            &[self.k_modes, self.d],
            crate::nn::Init::Uniform(0.1),
        )
    }
}

/// Converts target-frame metric points (M, 2) to normalized ego-grid
/// coordinates for sampling. Differentiable in the points.
pub fn goals_to_grid(points_target: &Tensor, ego_from_target: &Pose2, spec: &crate::geom::GridSpec) -> Tensor {
    let m = points_target.shape()[0];
    let (c, s) = (ego_from_target.yaw.cos(), ego_from_target.yaw.sin());
    // rotation then translation, as tensors so gradients flow
    let rot = Tensor::constant(
        Arr::from_shape_vec(IxDyn(&[2, 2]), vec![c, s, -s, c]).unwrap(),
    );
    let trans = Tensor::constant(
        Arr::from_shape_vec(IxDyn(&[1, 2]), vec![ego_from_target.x, ego_from_target.y]).unwrap(),
    );
    let ego = points_target.matmul(&rot).add(&trans); // (M, 2) ego meters
    let scale = 1.0 / (2.0 * spec.range_m);
    let _ = m;
    ego.mul_s(scale).add_s(0.5)
}

/// All outputs of one full forward pass.
pub struct Prediction {
    /// One entry per decoder stage (ITP + each ITR block), in order.
    pub layers: Vec<TrajectoryHypotheses>,
    pub goals: GoalSet,
    /// Dense single-mode futures for every agent (N_a, T, 2), target frame.
    pub y_dense: Tensor,
    /// Order of agents as featurized (target first).
    pub agent_ids: Vec<u32>,
}

/// The full pipeline: BEV encoder, scene encoder, iterative decoder.
pub struct Model {
    pub enc: crate::bev_encoder::BevEncoder,
    pub scene: crate::scene_encoder::SceneEncoder,
    pub dec: TrajDecoder,
    pub t_history: usize,
}

/// Featurized model input extracted from a [`SceneSample`].
pub struct ModelInput {
    /// (N_a, t_history, 7) target-frame histories, target agent first.
    pub histories: Arr,
    pub state: DynamicState,
    /// target_frame <- ego_frame
    pub target_from_ego: Pose2,
    /// ego_frame <- target_frame
    pub ego_from_target: Pose2,
    pub agent_ids: Vec<u32>,
    /// (N_a, T, 2) target-frame future positions with validity mask.
    pub future: Arr,
    pub future_valid: ndarray::Array2<bool>,
}

/// Converts a scene sample into normalized model inputs. Histories and
/// futures are expressed in the target agent's frame at the current step;
/// the raster stays in the ego frame it was captured in.
pub fn featurize(sample: &crate::scene_sim::SceneSample) -> ModelInput {
    let cur = sample.current_idx();
    let t_hist = sample.t_history;
    let t_fut = sample.t_future;
    let target_pose = sample.target_pose();
    let target_from_world = target_pose.invert();
    let target_from_ego = target_from_world.compose(&sample.ego_pose);
    let ego_from_target = sample.ego_pose.invert().compose(&target_pose);

    // target agent first, then the rest in track order
    let mut order: Vec<usize> = Vec::with_capacity(sample.agents.len());
    let ti = sample
        .agents
        .iter()
        .position(|a| a.agent_id == sample.target_id)
        .expect("target track missing");
    order.push(ti);
    order.extend((0..sample.agents.len()).filter(|&i| i != ti));
    let agent_ids: Vec<u32> = order.iter().map(|&i| sample.agents[i].agent_id).collect();

    let n_a = order.len();
    let frame_row = |frame: &Pose2, st: &crate::scene_sim::AgentState, kind: f64, c: usize| -> f64 {
        let p = frame.apply((st.x, st.y));
        let v = frame.rotate((st.vx, st.vy));
        match c {
            0 => p.0,
            1 => p.1,
            2 => crate::geom::wrap_angle(st.yaw + frame.yaw),
            3 => v.0,
            4 => v.1,
            5 => kind,
            _ => {
                if st.valid {
                    1.0
                } else {
                    0.0
                }
            }
        }
    };
    let histories = Arr::from_shape_fn(IxDyn(&[n_a, t_hist, DynamicState::K_ATTR]), |ix| {
        let tr = &sample.agents[order[ix[0]]];
        let st = tr.state(ix[1]);
        frame_row(&target_from_world, st, tr.kind.code(), ix[2])
    });

    // the target's own history in both frames
    let ego_from_world = sample.ego_pose.invert();
    let tt = &sample.agents[ti];
    let mk_state = |frame: &Pose2| -> Arr {
        Arr::from_shape_fn(IxDyn(&[t_hist, DynamicState::K_ATTR]), |ix| {
            frame_row(frame, tt.state(ix[0]), tt.kind.code(), ix[1])
        })
    };
    let state = DynamicState { ego: mk_state(&ego_from_world), target: mk_state(&target_from_world) };

    let future = Arr::from_shape_fn(IxDyn(&[n_a, t_fut, 2]), |ix| {
        let st = sample.agents[order[ix[0]]].state(cur + 1 + ix[1]);
        let p = target_from_world.apply((st.x, st.y));
        if ix[2] == 0 {
            p.0
        } else {
            p.1
        }
    });
    let future_valid = ndarray::Array2::from_shape_fn((n_a, t_fut), |(a, s)| {
        sample.agents[order[a]].state(cur + 1 + s).valid
    });

    ModelInput {
        histories,
        state,
        target_from_ego,
        ego_from_target,
        agent_ids,
        future,
        future_valid,
    }
}

impl Model {
    pub fn from_config(cfg: &RunConfig) -> Model {
        Model {
            enc: crate::bev_encoder::BevEncoder::from_config(cfg),
            scene: crate::scene_encoder::SceneEncoder::from_config(cfg),
            dec: TrajDecoder::from_config(cfg),
            t_history: cfg.t_history,
        }
    }

    /// Full deterministic forward pass over one sample.
    pub fn predict(
        &self,
        ps: &ParamStore,
        sample: &crate::scene_sim::SceneSample,
    ) -> crate::error::Result<(Prediction, ModelInput)> {
        let input = featurize(sample);
        let b = self.enc.encode(ps, &sample.raster.channels, &sample.raster.spec)?;
        let a = self.scene.pre_encode(ps, &input.histories);
        let g = self.scene.bda(ps, &b, &input.target_from_ego);
        let ctx = self.scene.local_self_attention(ps, &a, &g);
        let (y_dense, ctx) = self.scene.dense_future_head(ps, &ctx);

        let seeds = self.dec.seeds(ps);
        let (qc, goals) = self.dec.sgcp(ps, &seeds, &input.state, &b, &input.target_from_ego);
        let (mut e, hyp0) =
            self.dec.itp(ps, &qc, &goals.goals, &ctx.tokens, &b, &input.ego_from_target);
        let mut layers = vec![hyp0];
        for l in 0..self.dec.itr_blocks {
            let prev = layers.last().unwrap().gmm.slice_ax(2, 0, 2).detach();
            let (e1, hyp) =
                self.dec
                    .itr_block(ps, l, &e, &prev, &ctx.tokens, &b, &input.ego_from_target);
            e = e1;
            layers.push(hyp);
        }
        let agent_ids = input.agent_ids.clone();
        Ok((Prediction { layers, goals, y_dense, agent_ids }, input))
    }
}

/// Inverse check helper: normalized grid -> target-frame meters.
pub fn grid_to_target(pts: &[NormalizedPoint], ego_from_target: &Pose2, spec: &crate::geom::GridSpec) -> Vec<(f64, f64)> {
    let ego = crate::geom::grid_to_ego(spec, pts);
    let target_from_ego = ego_from_target.invert();
    ego.iter().map(|&p| target_from_ego.apply(p)).collect()
}
