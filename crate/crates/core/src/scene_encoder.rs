//! Scene context construction: a pre-encoder over agent histories, BEV
//! deformable aggregation over the feature map B, joint local self-attention
//! with spatial anchors, and the auxiliary dense-future head.

use ndarray::IxDyn;

use crate::bev_encoder::BevFeatureMap;
use crate::config::RunConfig;
use crate::deform_attn::{deform_cross_attn, DeformAttn};
use crate::geom::{grid_to_ego, sinusoidal_pe, NormalizedPoint, Pose2};
use crate::nn::{Init, Linear, Mlp, ParamStore, TransformerBlock};
use crate::tensor::{concat, Arr, Tensor};

pub const K_ATTR: usize = 7;
const MASK_NEG: f64 = -1e9;

/// One feature vector per agent plus its anchor (current position, target
/// frame). Agents whose history is entirely invalid get a zero feature and
/// are flagged.
pub struct AgentFeatureMap {
    pub features: Tensor,
    pub anchors: Arr,
    pub all_invalid: Vec<bool>,
}

/// Fixed-size set of BEV aggregate tokens with metric anchors in the target
/// frame. `refs_per_layer` records the normalized reference points after each
/// aggregation layer (all within [0,1]²).
pub struct BevAggFeature {
    pub features: Tensor,
    pub anchors: Arr,
    pub refs_per_layer: Vec<Arr>,
}

/// Concatenated scene context: agent tokens followed by BEV aggregate tokens.
pub struct SceneContext {
    pub tokens: Tensor,
    pub anchors: Arr,
    pub agent_slice: std::ops::Range<usize>,
}

pub struct SceneEncoder {
    pub d: usize,
    pub n_heads: usize,
    pub n_points: usize,
    pub ffn_mult: usize,
    pub n_bev_queries: usize,
    pub pre_layers: usize,
    pub bda_layers: usize,
    pub local_layers: usize,
    pub knn: usize,
    pub t_future: usize,
}

impl SceneEncoder {
    pub fn from_config(cfg: &RunConfig) -> SceneEncoder {
        SceneEncoder {
            d: cfg.d_model,
            n_heads: cfg.n_heads,
            n_points: cfg.n_points,
            ffn_mult: cfg.ffn_mult,
            n_bev_queries: cfg.n_bev_queries,
            pre_layers: cfg.pre_encoder_layers,
            bda_layers: cfg.bda_layers,
            local_layers: cfg.local_attn_layers,
            knn: cfg.knn,
            t_future: cfg.t_future,
        }
    }

    /// Agent history pre-encoder. `histories` is (N_a, t, K_ATTR) in the
    /// target frame; column 6 is the validity flag. Per layer: temporal
    /// self-attention within each agent (invalid steps masked as keys), then
    /// social self-attention across agents at each timestep (invalid
    /// agent-steps masked as keys). A per-step MLP and a masked max-pool over
    /// time produce one feature per agent.
    pub fn pre_encode(&self, ps: &ParamStore, histories: &Arr) -> AgentFeatureMap {
        let sh = histories.shape();
        assert_eq!(sh.len(), 3);
        assert_eq!(sh[2], K_ATTR);
        let (n_a, t) = (sh[0], sh[1]);
        let d = self.d;

        let valid = |a: usize, s: usize| histories[[a, s, 6]] > 0.5;
        let all_invalid: Vec<bool> = (0..n_a).map(|a| (0..t).all(|s| !valid(a, s))).collect();

        // embed each (agent, step) and add a temporal positional encoding
        let embed = Linear::new("pre.embed", K_ATTR, d);
        let steps = Tensor::constant(Arr::from_shape_fn(IxDyn(&[t, 1]), |ix| ix[0] as f64));
        let tpe = sinusoidal_pe(&steps, d).expect("pe dims");
        let mut per_agent: Vec<Tensor> = (0..n_a)
            .map(|a| {
                let h = Arr::from_shape_fn(IxDyn(&[t, K_ATTR]), |ix| histories[[a, ix[0], ix[1]]]);
                embed.forward(ps, &Tensor::constant(h)).add(&tpe)
            })
            .collect();

        for layer in 0..self.pre_layers {
            // temporal self-attention within each agent
            let tblk = TransformerBlock::new(&format!("pre.l{layer}.temporal"), d, self.n_heads, self.ffn_mult);
            per_agent = (0..n_a)
                .map(|a| {
                    let mask = Arr::from_shape_fn(IxDyn(&[t, t]), |ix| {
                        if valid(a, ix[1]) { 0.0 } else { MASK_NEG }
                    });
                    tblk.forward(ps, &per_agent[a], Some(&Tensor::constant(mask)))
                })
                .collect();
            // social self-attention across agents at each timestep
            let sblk = TransformerBlock::new(&format!("pre.l{layer}.social"), d, self.n_heads, self.ffn_mult);
            let mut stepped: Vec<Vec<Tensor>> = vec![Vec::with_capacity(t); n_a];
            for s in 0..t {
                let toks = concat(
                    0,
                    &(0..n_a).map(|a| per_agent[a].slice_ax(0, s, 1)).collect::<Vec<_>>(),
                );
                let mask = Arr::from_shape_fn(IxDyn(&[n_a, n_a]), |ix| {
                    if valid(ix[1], s) { 0.0 } else { MASK_NEG }
                });
                let out = sblk.forward(ps, &toks, Some(&Tensor::constant(mask)));
                for (a, dst) in stepped.iter_mut().enumerate() {
                    dst.push(out.slice_ax(0, a, 1));
                }
            }
            per_agent = stepped.into_iter().map(|rows| concat(0, &rows)).collect();
        }

        // PointNet-like head: per-step MLP, then masked max-pool over time
        let head = Mlp::new("pre.point", d, d, d);
        let feats: Vec<Tensor> = (0..n_a)
            .map(|a| {
                let x = head.forward(ps, &per_agent[a]); // (t, D)
                let pool_mask = Arr::from_shape_fn(IxDyn(&[t, 1]), |ix| {
                    if valid(a, ix[0]) { 0.0 } else { -1e30 }
                });
                let pooled = x.add(&Tensor::constant(pool_mask)).max_axis(0).reshape(&[1, d]);
                if all_invalid[a] {
                    pooled.mul_s(0.0)
                } else {
                    pooled
                }
            })
            .collect();
        let features = concat(0, &feats);

        // anchor = the agent's most recent valid position (target frame)
        let anchors = Arr::from_shape_fn(IxDyn(&[n_a, 2]), |ix| {
            let a = ix[0];
            match (0..t).rev().find(|&s| valid(a, s)) {
                Some(s) => histories[[a, s, ix[1]]],
                None => 0.0,
            }
        });
        AgentFeatureMap { features, anchors, all_invalid }
    }

    /// BEV deformable aggregation: N_m zero-initialized queries with
    /// learnable reference positions iteratively attend into B; a
    /// zero-initialized offset head refines the references each layer,
    /// clamped to [0,1]². Anchors are the final references re-expressed in
    /// the target agent's metric frame.
    pub fn bda(&self, ps: &ParamStore, b: &BevFeatureMap, target_from_ego: &Pose2) -> BevAggFeature {
        let d = self.d;
        let n_m = self.n_bev_queries;
        // learnable refs, initialized uniformly inside the unit square
        let refs0 = ps
            .param("bda.refs", &[n_m, 2], Init::Uniform(0.5))
            .add_s(0.5)
            .clamp(0.0, 1.0);
        let mut refs = refs0;
        let mut q = Tensor::zeros(&[n_m, d]);
        let mut refs_per_layer = Vec::with_capacity(self.bda_layers);
        for layer in 0..self.bda_layers {
            let name = format!("bda.l{layer}");
            let pe = sinusoidal_pe(&refs, d).expect("pe dims");
            q = q.add(&Mlp::new(&format!("{name}.pe"), d, d, d).forward(ps, &pe));
            let blk = TransformerBlock::new(&format!("{name}.self"), d, self.n_heads, self.ffn_mult);
            q = blk.forward(ps, &q, None);
            let da = DeformAttn::new(format!("{name}.da"), d, self.n_heads, self.n_points);
            q = q.add(&deform_cross_attn(ps, &da, &q, &refs, &b.features));
            // reference refinement, zero-initialized so refs start stationary
            let doff = Linear::zeroed(format!("{name}.off"), d, 2).forward(ps, &q);
            refs = refs.add(&doff).clamp(0.0, 1.0);
            refs_per_layer.push(refs.data().clone());
        }
        let features = Mlp::new("bda.out", d, d, d).forward(ps, &q);

        let pts: Vec<NormalizedPoint> = (0..n_m)
            .map(|i| NormalizedPoint { u: refs.data()[[i, 0]], v: refs.data()[[i, 1]] })
            .collect();
        let ego = grid_to_ego(&b.spec, &pts);
        let anchors = Arr::from_shape_fn(IxDyn(&[n_m, 2]), |ix| {
            let p = target_from_ego.apply(ego[ix[0]]);
            if ix[1] == 0 {
                p.0
            } else {
                p.1
            }
        });
        BevAggFeature { features, anchors, refs_per_layer }
    }

    /// Joins agent and BEV aggregate tokens into the scene context and runs
    /// local self-attention: each token attends to its k nearest tokens by
    /// anchor distance (self included), for `local_layers` rounds. The
    /// neighbor sets are computed once per forward pass.
    pub fn local_self_attention(&self, ps: &ParamStore, a: &AgentFeatureMap, g: &BevAggFeature) -> SceneContext {
        let n_a = a.features.shape()[0];
        let n_m = g.features.shape()[0];
        let n = n_a + n_m;
        let anchors = Arr::from_shape_fn(IxDyn(&[n, 2]), |ix| {
            if ix[0] < n_a {
                a.anchors[[ix[0], ix[1]]]
            } else {
                g.anchors[[ix[0] - n_a, ix[1]]]
            }
        });
        let mask = Tensor::constant(knn_mask(&anchors, self.knn));
        let mut tokens = concat(0, &[a.features.clone(), g.features.clone()]);
        for layer in 0..self.local_layers {
            let blk = TransformerBlock::new(&format!("ctx.l{layer}"), self.d, self.n_heads, self.ffn_mult);
            tokens = blk.forward(ps, &tokens, Some(&mask));
        }
        SceneContext { tokens, anchors, agent_slice: 0..n_a }
    }

    /// Auxiliary dense-future head: a per-agent MLP predicts a single-mode
    /// (T, 2) future in the target frame; the predictions are re-encoded by a
    /// zero-initialized MLP and added residually to the agent tokens.
    pub fn dense_future_head(&self, ps: &ParamStore, ctx: &SceneContext) -> (Tensor, SceneContext) {
        let d = self.d;
        let t = self.t_future;
        let n_a = ctx.agent_slice.len();
        let n = ctx.tokens.shape()[0];
        let agents = ctx.tokens.slice_ax(0, ctx.agent_slice.start, n_a);
        let y_dense = Mlp::new("dense.head", d, d, t * 2)
            .forward(ps, &agents)
            .reshape(&[n_a, t, 2]);
        let re = Mlp::zero_out("dense.re", t * 2, d, d)
            .forward(ps, &y_dense.reshape(&[n_a, t * 2]));
        let fused_agents = agents.add(&re);
        let rest = ctx.tokens.slice_ax(0, n_a, n - n_a);
        let tokens = concat(0, &[fused_agents, rest]);
        (
            y_dense,
            SceneContext {
                tokens,
                anchors: ctx.anchors.clone(),
                agent_slice: ctx.agent_slice.clone(),
            },
        )
    }

    /// Full encoder: histories -> pre-encoder, B -> aggregation, fusion.
    pub fn encode(
        &self,
        ps: &ParamStore,
        histories: &Arr,
        b: &BevFeatureMap,
        target_from_ego: &Pose2,
    ) -> (SceneContext, Tensor) {
        let a = self.pre_encode(ps, histories);
        let g = self.bda(ps, b, target_from_ego);
        let ctx = self.local_self_attention(ps, &a, &g);
        let (y_dense, fused) = self.dense_future_head(ps, &ctx);
        (fused, y_dense)
    }
}

/// Additive attention mask where each row keeps its `k` nearest anchors
/// (self included, ties broken by index) and blocks the rest. If there are
/// at most `k` tokens the mask is all-pass.
pub fn knn_mask(anchors: &Arr, k: usize) -> Arr {
    let n = anchors.shape()[0];
    let mut mask = Arr::from_elem(IxDyn(&[n, n]), MASK_NEG);
    for i in 0..n {
        for &j in knn_indices(anchors, i, k).iter() {
            mask[[i, j]] = 0.0;
        }
    }
    mask
}

/// Indices of the `k` nearest tokens to token `i` by anchor Euclidean
/// distance, self included; ties broken by lower index.
pub fn knn_indices(anchors: &Arr, i: usize, k: usize) -> Vec<usize> {
    let n = anchors.shape()[0];
    let d2 = |a: usize, b: usize| -> f64 {
        let dx = anchors[[a, 0]] - anchors[[b, 0]];
        let dy = anchors[[a, 1]] - anchors[[b, 1]];
        dx * dx + dy * dy
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d2(i, a).partial_cmp(&d2(i, b)).unwrap().then(a.cmp(&b)));
    order.truncate(k.min(n));
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::GridSpec;
    use crate::gradcheck::seeded_arr;
    use crate::nn::AdamW;

    fn enc() -> SceneEncoder {
        SceneEncoder {
            d: 16,
            n_heads: 2,
            n_points: 2,
            ffn_mult: 2,
            n_bev_queries: 6,
            pre_layers: 2,
            bda_layers: 3,
            local_layers: 2,
            knn: 4,
            t_future: 5,
        }
    }

    fn histories(seed: u64, n_a: usize, t: usize) -> Arr {
        let mut h = seeded_arr(seed, &[n_a, t, K_ATTR]);
        for a in 0..n_a {
            for s in 0..t {
                h[[a, s, 6]] = 1.0;
            }
        }
        h
    }

    fn tiny_b(seed: u64, d: usize) -> BevFeatureMap {
        BevFeatureMap {
            features: Tensor::constant(seeded_arr(seed, &[d, 8, 8])),
            spec: GridSpec::new(10.0, 8, 8).unwrap(),
        }
    }

    #[test]
    fn appending_fully_invalid_agent_leaves_others_unchanged() {
        let e = enc();
        let ps = ParamStore::new(0);
        let h3 = histories(1, 3, 5);
        let a3 = e.pre_encode(&ps, &h3);
        ps.clear_step();
        // same three agents plus one all-invalid agent
        let mut h4 = Arr::zeros(IxDyn(&[4, 5, K_ATTR]));
        for a in 0..3 {
            for s in 0..5 {
                for c in 0..K_ATTR {
                    h4[[a, s, c]] = h3[[a, s, c]];
                }
            }
        }
        for s in 0..5 {
            h4[[3, s, 0]] = 99.0; // junk values that must not leak
            h4[[3, s, 6]] = 0.0;
        }
        let a4 = e.pre_encode(&ps, &h4);
        for a in 0..3 {
            for c in 0..16 {
                let diff = (a3.features.data()[[a, c]] - a4.features.data()[[a, c]]).abs();
                assert!(diff < 1e-6, "agent {a} feature leaked: {diff}");
            }
        }
        assert!(a4.all_invalid[3]);
        assert!(!a4.all_invalid[0]);
        for c in 0..16 {
            assert_eq!(a4.features.data()[[3, c]], 0.0);
        }
    }

    #[test]
    fn zeroing_masked_timesteps_changes_nothing() {
        let e = enc();
        let ps = ParamStore::new(3);
        let mut h = histories(4, 3, 5);
        h[[1, 2, 6]] = 0.0;
        h[[2, 4, 6]] = 0.0;
        let a1 = e.pre_encode(&ps, &h);
        ps.clear_step();
        let mut hz = h.clone();
        for c in 0..6 {
            hz[[1, 2, c]] = 0.0;
            hz[[2, 4, c]] = 0.0;
        }
        let a2 = e.pre_encode(&ps, &hz);
        for (x, y) in a1.features.data().iter().zip(a2.features.data().iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn permuting_agents_permutes_features() {
        let e = enc();
        let ps = ParamStore::new(5);
        let h = histories(6, 4, 5);
        let a = e.pre_encode(&ps, &h);
        let perm = [2usize, 0, 3, 1];
        let hp = Arr::from_shape_fn(IxDyn(&[4, 5, K_ATTR]), |ix| h[[perm[ix[0]], ix[1], ix[2]]]);
        ps.clear_step();
        let ap = e.pre_encode(&ps, &hp);
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..16 {
                let diff = (ap.features.data()[[r, c]] - a.features.data()[[src, c]]).abs();
                assert!(diff < 1e-9, "row {r} col {c}: {diff}");
            }
            for c in 0..2 {
                assert_eq!(ap.anchors[[r, c]], a.anchors[[src, c]]);
            }
        }
    }

    #[test]
    fn single_agent_social_attention_is_well_defined() {
        let e = enc();
        let ps = ParamStore::new(7);
        let h = histories(8, 1, 5);
        let a = e.pre_encode(&ps, &h);
        assert_eq!(a.features.shape(), [1, 16]);
        assert!(a.features.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bda_refs_stay_in_unit_square_and_start_stationary() {
        let e = enc();
        let ps = ParamStore::new(9);
        let b = tiny_b(10, 16);
        let g = e.bda(&ps, &b, &Pose2::identity());
        assert_eq!(g.features.shape(), [6, 16]);
        assert_eq!(g.refs_per_layer.len(), 3);
        let first = &g.refs_per_layer[0];
        for layer in &g.refs_per_layer {
            for v in layer.iter() {
                assert!((0.0..=1.0).contains(v), "ref out of unit square: {v}");
            }
            // offset heads are zero-initialized: refs identical across layers
            for (x, y) in layer.iter().zip(first.iter()) {
                assert_eq!(x, y);
            }
        }
        assert!(g.anchors.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bda_center_ref_maps_to_target_origin_under_identity() {
        let spec = GridSpec::new(10.0, 8, 8).unwrap();
        let pts = [NormalizedPoint { u: 0.5, v: 0.5 }];
        let ego = grid_to_ego(&spec, &pts);
        let p = Pose2::identity().apply(ego[0]);
        assert!(p.0.abs() < 1e-12 && p.1.abs() < 1e-12);
    }

    #[test]
    fn bda_refs_migrate_toward_bright_cell_when_trained() {
        // single bright cell; train on a pull loss and check the refs end up
        // closer to it than where they started
        let e = enc();
        let ps = ParamStore::new(11);
        let mut bf = Arr::zeros(IxDyn(&[16, 8, 8]));
        for c in 0..16 {
            bf[[c, 2, 5]] = 3.0;
        }
        let b = BevFeatureMap {
            features: Tensor::constant(bf),
            spec: GridSpec::new(10.0, 8, 8).unwrap(),
        };
        let target = [(5.0 + 0.5) / 8.0, (2.0 + 0.5) / 8.0];
        let dist_of = |refs: &Arr| -> f64 {
            let n = refs.shape()[0];
            (0..n)
                .map(|i| {
                    let dx = refs[[i, 0]] - target[0];
                    let dy = refs[[i, 1]] - target[1];
                    (dx * dx + dy * dy).sqrt()
                })
                .sum::<f64>()
                / n as f64
        };
        let mut opt = AdamW::new(0.0, 1e9);
        let mut first_dist = None;
        let mut last_dist = 0.0;
        for _step in 0..100 {
            ps.clear_step();
            let g = e.bda(&ps, &b, &Pose2::identity());
            let refs = g.refs_per_layer.last().unwrap();
            if first_dist.is_none() {
                first_dist = Some(dist_of(refs));
            }
            last_dist = dist_of(refs);
            // pull loss on the differentiable final refs: recompute through
            // the graph via a fresh forward (refs_per_layer is detached data,
            // so reconstruct the tensor path)
            let loss = {
                // rebuild the final refs tensor by re-running the offsets on
                // the recorded graph: re-run bda and take its gradient path
                // through a pull objective computed on the last layer's refs
                let g2 = bda_refs_tensor(&e, &ps, &b);
                let t = Tensor::constant(
                    Arr::from_shape_vec(IxDyn(&[1, 2]), target.to_vec()).unwrap(),
                );
                g2.sub(&t).square().sum()
            };
            loss.backward();
            let grads = ps.collect_grads();
            opt.apply(&ps, &grads, 3e-3, &[]);
        }
        assert!(
            last_dist < first_dist.unwrap() - 1e-3,
            "refs did not migrate: {} -> {}",
            first_dist.unwrap(),
            last_dist
        );
    }

    // re-runs the aggregation and returns the final refs as a graph tensor
    fn bda_refs_tensor(e: &SceneEncoder, ps: &ParamStore, b: &BevFeatureMap) -> Tensor {
        let d = e.d;
        let n_m = e.n_bev_queries;
        let mut refs = ps
            .param("bda.refs", &[n_m, 2], Init::Uniform(0.5))
            .add_s(0.5)
            .clamp(0.0, 1.0);
        let mut q = Tensor::zeros(&[n_m, d]);
        for layer in 0..e.bda_layers {
            let name = format!("bda.l{layer}");
            let pe = sinusoidal_pe(&refs, d).expect("pe dims");
            q = q.add(&Mlp::new(&format!("{name}.pe"), d, d, d).forward(ps, &pe));
            let blk = TransformerBlock::new(&format!("{name}.self"), d, e.n_heads, e.ffn_mult);
            q = blk.forward(ps, &q, None);
            let da = DeformAttn::new(format!("{name}.da"), d, e.n_heads, e.n_points);
            q = q.add(&deform_cross_attn(ps, &da, &q, &refs, &b.features));
            let doff = Linear::zeroed(format!("{name}.off"), d, 2).forward(ps, &q);
            refs = refs.add(&doff).clamp(0.0, 1.0);
        }
        refs
    }

    #[test]
    fn knn_matches_sort_oracle_and_translation_invariant() {
        let anchors = seeded_arr(12, &[9, 2]).mapv(|v| v * 10.0);
        for i in 0..9 {
            let got = knn_indices(&anchors, i, 4);
            // exhaustive oracle
            let mut pairs: Vec<(f64, usize)> = (0..9)
                .map(|j| {
                    let dx = anchors[[i, 0]] - anchors[[j, 0]];
                    let dy = anchors[[i, 1]] - anchors[[j, 1]];
                    (dx * dx + dy * dy, j)
                })
                .collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = pairs.iter().take(4).map(|p| p.1).collect();
            assert_eq!(got, want);
            assert_eq!(got[0], i, "self must be the nearest neighbor");
        }
        // translation invariance
        let shifted = &anchors + 17.5;
        for i in 0..9 {
            assert_eq!(knn_indices(&anchors, i, 4), knn_indices(&shifted, i, 4));
        }
    }

    #[test]
    fn degenerate_k_equals_full_attention() {
        let e = SceneEncoder { knn: 100, ..enc() };
        let ps = ParamStore::new(13);
        let h = histories(14, 2, 5);
        let a = e.pre_encode(&ps, &h);
        let b = tiny_b(15, 16);
        let g = e.bda(&ps, &b, &Pose2::identity());
        let ctx = e.local_self_attention(&ps, &a, &g);
        // full mask: rerun with an explicit all-pass mask for comparison
        let tokens0 = concat(0, &[a.features.clone(), g.features.clone()]);
        let mut full = tokens0;
        for layer in 0..e.local_layers {
            let blk = TransformerBlock::new(&format!("ctx.l{layer}"), e.d, e.n_heads, e.ffn_mult);
            full = blk.forward(&ps, &full, None);
        }
        for (x, y) in ctx.tokens.data().iter().zip(full.data().iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn dense_future_shapes_zero_init_fusion_and_gradient_flow() {
        let e = enc();
        let ps = ParamStore::new(16);
        let h = histories(17, 3, 5);
        let b = tiny_b(18, 16);
        let a = e.pre_encode(&ps, &h);
        let g = e.bda(&ps, &b, &Pose2::identity());
        let ctx = e.local_self_attention(&ps, &a, &g);
        let (y_dense, fused) = e.dense_future_head(&ps, &ctx);
        assert_eq!(y_dense.shape(), [3, 5, 2]);
        assert_eq!(fused.tokens.shape(), ctx.tokens.shape());
        // zero-initialized re-encoder: fusion is the identity before training
        for (x, y) in fused.tokens.data().iter().zip(ctx.tokens.data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // gradient of a dense loss reaches pre-encoder parameters
        let target = Tensor::constant(seeded_arr(19, &[3, 5, 2]));
        let loss = y_dense.sub(&target).square().mean();
        loss.backward();
        let grads = ps.collect_grads();
        let emb: Vec<&(String, Arr)> = grads.iter().filter(|g| g.0 == "pre.embed.w").collect();
        assert_eq!(emb.len(), 1);
        assert!(emb[0].1.iter().any(|v| v.abs() > 0.0), "no gradient reached the embedding");
    }
}
