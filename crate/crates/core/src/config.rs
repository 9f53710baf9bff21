//! Run configuration: one flat key-value text file drives every command.
//!
//! Format: one `key = value` pair per line; `#` starts a comment. Unknown
//! keys are rejected by name.

use crate::error::{Error, Result};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    // model dims
    pub d_model: usize,
    pub n_bev_queries: usize,
    pub k_modes: usize,
    pub n_heads: usize,
    pub n_points: usize,
    pub key_points: usize,
    pub knn: usize,
    pub ffn_mult: usize,

    // layer counts
    pub pre_encoder_layers: usize,
    pub bda_layers: usize,
    pub local_attn_layers: usize,
    pub sgcp_blocks: usize,
    pub itr_blocks: usize,
    pub encoder_blocks: usize,

    // horizons
    pub history_sec: f64,
    pub future_sec: f64,
    pub hz: f64,
    pub t_history: usize,
    pub t_future: usize,

    // grid
    pub grid_h: usize,
    pub grid_w: usize,
    pub range_m: f64,

    // optimization
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every_epochs: usize,
    /// Write `ck_epoch_N.bvck` only every N epochs (the final checkpoint is
    /// always written).
    pub checkpoint_every_epochs: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub dropout: f64,
    pub freeze_encoder: bool,
    pub skip_pretrain: bool,
    pub posterior_tau: f64,

    // loss weights inside the multimodal term
    pub w_nll: f64,
    pub w_kl: f64,
    pub w_ent: f64,
    pub w_aux: f64,

    // scene generator
    pub n_scenes: usize,
    pub n_agents_min: usize,
    pub n_agents_max: usize,
    pub lane_width: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub turn_probability: f64,
    pub accel_noise: f64,
    pub lat_noise: f64,
    pub noise_rate: f64,
    pub occlusion: bool,
    pub n_obstacles_max: usize,
    pub hard_case_filter: bool,
    pub min_displacement: f64,
    pub augment_raster_noise: bool,
    pub target_ego: bool,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 0,
            d_model: 256,
            n_bev_queries: 256,
            k_modes: 10,
            n_heads: 8,
            n_points: 4,
            key_points: 16,
            knn: 16,
            ffn_mult: 4,
            pre_encoder_layers: 2,
            bda_layers: 3,
            local_attn_layers: 6,
            sgcp_blocks: 2,
            itr_blocks: 3,
            encoder_blocks: 2,
            history_sec: 2.0,
            future_sec: 6.0,
            hz: 10.0,
            t_history: 21,
            t_future: 60,
            grid_h: 96,
            grid_w: 96,
            range_m: 50.0,
            lr: 1e-4,
            lr_decay: 0.4,
            lr_decay_every_epochs: 5,
            checkpoint_every_epochs: 1,
            weight_decay: 0.01,
            grad_clip: 5.0,
            batch_size: 8,
            epochs: 30,
            pretrain_epochs: 5,
            dropout: 0.0,
            freeze_encoder: false,
            skip_pretrain: false,
            posterior_tau: 1.0,
            w_nll: 1.0,
            w_kl: 1.0,
            w_ent: 0.01,
            w_aux: 1.0,
            n_scenes: 16,
            n_agents_min: 3,
            n_agents_max: 8,
            lane_width: 3.5,
            speed_min: 2.0,
            speed_max: 12.0,
            turn_probability: 0.5,
            accel_noise: 1.5,
            lat_noise: 0.25,
            noise_rate: 0.02,
            occlusion: true,
            n_obstacles_max: 6,
            hard_case_filter: false,
            min_displacement: 3.0,
            augment_raster_noise: false,
            target_ego: false,
        }
    }
}

macro_rules! config_fields {
    ($m:ident) => {
        $m!(seed, u64);
        $m!(d_model, usize);
        $m!(n_bev_queries, usize);
        $m!(k_modes, usize);
        $m!(n_heads, usize);
        $m!(n_points, usize);
        $m!(key_points, usize);
        $m!(knn, usize);
        $m!(ffn_mult, usize);
        $m!(pre_encoder_layers, usize);
        $m!(bda_layers, usize);
        $m!(local_attn_layers, usize);
        $m!(sgcp_blocks, usize);
        $m!(itr_blocks, usize);
        $m!(encoder_blocks, usize);
        $m!(history_sec, f64);
        $m!(future_sec, f64);
        $m!(hz, f64);
        $m!(t_history, usize);
        $m!(t_future, usize);
        $m!(grid_h, usize);
        $m!(grid_w, usize);
        $m!(range_m, f64);
        $m!(lr, f64);
        $m!(lr_decay, f64);
        $m!(lr_decay_every_epochs, usize);
        $m!(checkpoint_every_epochs, usize);
        $m!(weight_decay, f64);
        $m!(grad_clip, f64);
        $m!(batch_size, usize);
        $m!(epochs, usize);
        $m!(pretrain_epochs, usize);
        $m!(dropout, f64);
        $m!(freeze_encoder, bool);
        $m!(skip_pretrain, bool);
        $m!(posterior_tau, f64);
        $m!(w_nll, f64);
        $m!(w_kl, f64);
        $m!(w_ent, f64);
        $m!(w_aux, f64);
        $m!(n_scenes, usize);
        $m!(n_agents_min, usize);
        $m!(n_agents_max, usize);
        $m!(lane_width, f64);
        $m!(speed_min, f64);
        $m!(speed_max, f64);
        $m!(turn_probability, f64);
        $m!(accel_noise, f64);
        $m!(lat_noise, f64);
        $m!(noise_rate, f64);
        $m!(occlusion, bool);
        $m!(n_obstacles_max, usize);
        $m!(hard_case_filter, bool);
        $m!(min_displacement, f64);
        $m!(augment_raster_noise, bool);
        $m!(target_ego, bool);
    };
}

trait FromCfg: Sized {
    fn parse_cfg(v: &str) -> Option<Self>;
    fn fmt_cfg(&self) -> String;
}

impl FromCfg for u64 {
    fn parse_cfg(v: &str) -> Option<Self> {
        v.parse().ok()
    }
    fn fmt_cfg(&self) -> String {
        self.to_string()
    }
}

impl FromCfg for usize {
    fn parse_cfg(v: &str) -> Option<Self> {
        v.parse().ok()
    }
    fn fmt_cfg(&self) -> String {
        self.to_string()
    }
}

impl FromCfg for f64 {
    fn parse_cfg(v: &str) -> Option<Self> {
        v.parse().ok()
    }
    fn fmt_cfg(&self) -> String {
        format!("{self:?}")
    }
}

impl FromCfg for bool {
    fn parse_cfg(v: &str) -> Option<Self> {
        match v {
            "true" | "1" | "yes" => Some(true),
            "false" | "0" | "no" => Some(false),
            _ => None,
        }
    }
    fn fmt_cfg(&self) -> String {
        self.to_string()
    }
}

impl RunConfig {
    /// Desk-scale preset: small model, short horizons, coarse grid. The same
    /// architecture end to end, sized so full training runs finish on a CPU.
    pub fn small() -> RunConfig {
        RunConfig {
            d_model: 32,
            n_bev_queries: 16,
            k_modes: 10,
            n_heads: 4,
            n_points: 2,
            key_points: 8,
            knn: 8,
            ffn_mult: 2,
            pre_encoder_layers: 1,
            bda_layers: 2,
            local_attn_layers: 2,
            sgcp_blocks: 2,
            itr_blocks: 3,
            encoder_blocks: 1,
            history_sec: 1.0,
            future_sec: 3.0,
            hz: 10.0,
            t_history: 11,
            t_future: 30,
            min_displacement: 1.0,
            grid_h: 24,
            grid_w: 24,
            range_m: 36.0,
            lr: 2e-3,
            batch_size: 4,
            epochs: 10,
            pretrain_epochs: 2,
            n_scenes: 16,
            n_agents_min: 2,
            n_agents_max: 4,
            n_obstacles_max: 3,
            noise_rate: 0.0,
            occlusion: false,
            ..RunConfig::default()
        }
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! try_set {
            ($field:ident, $ty:ty) => {
                if key == stringify!($field) {
                    self.$field = <$ty as FromCfg>::parse_cfg(value).ok_or_else(|| {
                        Error::Config(format!("bad value `{value}` for key `{key}`"))
                    })?;
                    return Ok(());
                }
            };
        }
        config_fields!(try_set);
        Err(Error::UnknownConfigKey(key.to_string()))
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| {
                    Error::Config(format!("line {}: expected `key = value`", lineno + 1))
                })?;
            cfg.set_key(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<RunConfig> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical serialized form (also the hash input).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($field:ident, $ty:ty) => {
                writeln!(out, "{} = {}", stringify!($field), FromCfg::fmt_cfg(&self.$field))
                    .unwrap();
            };
        }
        config_fields!(emit);
        out
    }

    /// FNV-1a hash of the canonical text, hex-encoded.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    pub fn validate(&self) -> Result<()> {
        macro_rules! positive {
            ($($f:ident),*) => {
                $(if self.$f == 0 {
                    return Err(Error::Config(format!("{} must be > 0", stringify!($f))));
                })*
            };
        }
        positive!(
            d_model,
            n_bev_queries,
            k_modes,
            n_heads,
            n_points,
            key_points,
            knn,
            ffn_mult,
            pre_encoder_layers,
            bda_layers,
            local_attn_layers,
            sgcp_blocks,
            itr_blocks,
            encoder_blocks,
            t_history,
            t_future,
            grid_h,
            grid_w,
            batch_size,
            checkpoint_every_epochs
        );
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config("d_model must be divisible by n_heads".into()));
        }
        if self.range_m <= 0.0 {
            return Err(Error::Config("range_m must be > 0".into()));
        }
        let want_t = (self.history_sec * self.hz).round() as usize + 1;
        let want_tf = (self.future_sec * self.hz).round() as usize;
        if self.t_history != want_t || self.t_future != want_tf {
            return Err(Error::Config(format!(
                "horizon inconsistent: t_history={} t_future={} but {}s/{}s at {} Hz give {}/{}",
                self.t_history, self.t_future, self.history_sec, self.future_sec, self.hz,
                want_t, want_tf
            )));
        }
        if self.lane_width <= 2.0 {
            return Err(Error::Config("lane_width must exceed agent width (2 m)".into()));
        }
        if self.speed_min <= 0.0 || self.speed_max < self.speed_min {
            return Err(Error::Config("speed limits must satisfy 0 < min <= max".into()));
        }
        if self.n_agents_min == 0 || self.n_agents_max < self.n_agents_min {
            return Err(Error::Config("agent count range invalid".into()));
        }
        if !(0.0..=1.0).contains(&self.turn_probability) || !(0.0..=1.0).contains(&self.noise_rate)
        {
            return Err(Error::Config("probabilities must be in [0,1]".into()));
        }
        if self.k_modes < 5 {
            return Err(Error::Config("k_modes must be >= 5 for top-5 metrics".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_text() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(cfg.hash(), parsed.hash());
    }

    #[test]
    fn unknown_key_named_in_error() {
        let err = RunConfig::parse("banana = 3").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("banana"), "{msg}");
    }

    #[test]
    fn zero_count_rejected() {
        assert!(RunConfig::parse("k_modes = 0").is_err());
    }

    #[test]
    fn inconsistent_horizon_rejected() {
        assert!(RunConfig::parse("t_history = 20").is_err());
        assert!(RunConfig::parse("hz = 5").is_err());
        // consistent alternative accepted
        let cfg = RunConfig::parse("hz = 5\nt_history = 11\nt_future = 30").unwrap();
        assert_eq!(cfg.t_history, 11);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn hash_changes_with_values() {
        let a = RunConfig::default();
        let b = RunConfig::parse("seed = 1").unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
