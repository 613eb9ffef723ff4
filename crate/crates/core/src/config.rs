//! Run configuration.
//!
//! One flat JSON object with dotted keys (`"model.c_b": 64`). Line
//! comments (`// …`) are stripped before parsing. Unknown keys are
//! errors — typos must not silently fall back to defaults. Every run
//! dumps its resolved configuration back out as `run.json`, and
//! `set`/`flatten` are kept in lockstep by a round-trip test.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::scene::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,

    // data
    pub data_root: String,
    pub data_count: usize,
    pub data_train_count: usize,

    // synth
    pub synth: SynthConfig,

    // grid (fine voxel grid)
    pub grid: GridSpec,

    // model dims
    /// Fine voxels per base-BEV cell along x and y.
    pub bev_factor: usize,
    /// Channels of the voxel feature map used for per-point lookup.
    pub c_voxel: usize,
    /// Channels of the three radar BEV scales.
    pub c_bev: [usize; 3],
    /// Camera FV channels (C_I).
    pub c_cam: usize,
    /// Fused BEV channels (F_B).
    pub c_fb: usize,
    /// Proposal feature channels (C_b).
    pub c_b: usize,
    /// Grid-encoder channels driving the GGF attention queries.
    pub c_gpe: usize,
    /// Attention heads (M) and samples per head (K).
    pub heads: usize,
    pub samples: usize,
    /// RoI grid resolution U (U³ grid points per proposal).
    pub u_grid: usize,
    /// Depth bins for the camera lift and the nearest depth in meters.
    pub depth_bins: usize,
    pub depth_min: f64,
    /// Self-attention heads in the branch fusion.
    pub sa_heads: usize,
    /// Hidden width of the refine-head MLPs.
    pub refine_hidden: usize,

    // fusion / stage2 switches
    pub fusion_mode: FusionMode,
    pub stage2_enabled: bool,
    pub stage2_pgf: bool,
    pub stage2_ggf: bool,
    pub stage2_self_attn: bool,
    pub stage2_kde: bool,

    // rpn
    pub anchor_sizes: [[f64; 3]; 4],
    pub anchor_z: [f64; 4],
    pub rpn_pos_iou: [f64; 4],
    pub rpn_neg_iou: [f64; 4],
    pub rpn_train_top_n: usize,
    pub rpn_infer_top_n: usize,
    pub rpn_proposal_nms: f64,
    pub rpn_sample_count: usize,
    pub rpn_pos_fraction: f64,
    pub rpn_match_iou: f64,

    // train
    pub lr: f64,
    pub momentum: f64,
    /// Global L2 gradient-norm ceiling per step; 0 disables clipping.
    pub clip_norm: f64,
    pub epochs: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,

    // eval
    pub conf_thresh: f64,
    pub nms_thresh: f64,
    pub region: Region,
    pub iou_thresholds: [f64; 4],
    pub recall_positions: usize,
    pub recall_iou: f64,

    pub out_dir: String,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum FusionMode {
    RgIter,
    Concat,
    RadarOnly,
    CameraOnly,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::RgIter => "rgiter",
            FusionMode::Concat => "concat",
            FusionMode::RadarOnly => "radar_only",
            FusionMode::CameraOnly => "camera_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rgiter" => Ok(FusionMode::RgIter),
            "concat" => Ok(FusionMode::Concat),
            "radar_only" => Ok(FusionMode::RadarOnly),
            "camera_only" => Ok(FusionMode::CameraOnly),
            _ => Err(Error::Config(format!(
                "fusion.mode must be rgiter|concat|radar_only|camera_only, got {s:?}"
            ))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Region {
    Entire,
    Corridor,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Entire => "entire",
            Region::Corridor => "corridor",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "entire" => Ok(Region::Entire),
            "corridor" => Ok(Region::Corridor),
            _ => Err(Error::Config(format!(
                "eval.region must be entire|corridor, got {s:?}"
            ))),
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            data_root: "data/synth".into(),
            data_count: 64,
            data_train_count: 48,
            synth: SynthConfig::default(),
            grid: GridSpec::new(
                (0.0, 51.2, 0.05),
                (-25.6, 25.6, 0.05),
                (-3.0, 2.0, 0.1),
            ),
            bev_factor: 4,
            c_voxel: 16,
            c_bev: [32, 64, 128],
            c_cam: 32,
            c_fb: 64,
            c_b: 64,
            c_gpe: 32,
            heads: 4,
            samples: 4,
            u_grid: 6,
            depth_bins: 32,
            depth_min: 1.0,
            sa_heads: 4,
            refine_hidden: 128,
            fusion_mode: FusionMode::RgIter,
            stage2_enabled: true,
            stage2_pgf: true,
            stage2_ggf: true,
            stage2_self_attn: true,
            stage2_kde: true,
            anchor_sizes: [
                [4.2, 1.8, 1.55],
                [0.7, 0.65, 1.75],
                [1.8, 0.65, 1.7],
                [7.2, 2.5, 3.0],
            ],
            anchor_z: [-0.725, -0.625, -0.65, 0.0],
            rpn_pos_iou: [0.6, 0.5, 0.5, 0.6],
            rpn_neg_iou: [0.45, 0.35, 0.35, 0.45],
            rpn_train_top_n: 128,
            rpn_infer_top_n: 100,
            rpn_proposal_nms: 0.8,
            rpn_sample_count: 64,
            rpn_pos_fraction: 0.5,
            rpn_match_iou: 0.55,
            lr: 0.01,
            momentum: 0.9,
            clip_norm: 10.0,
            epochs: 40,
            eval_every: 5,
            checkpoint_every: 10,
            conf_thresh: 0.1,
            nms_thresh: 0.01,
            region: Region::Entire,
            iou_thresholds: [0.5, 0.25, 0.25, 0.5],
            recall_positions: 40,
            recall_iou: 0.25,
            out_dir: "runs/default".into(),
        }
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Config(format!("{key}: expected a number")))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    let f = as_f64(key, v)?;
    if f < 0.0 || f.fract() != 0.0 {
        return Err(Error::Config(format!("{key}: expected a non-negative integer")));
    }
    Ok(f as usize)
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::Config(format!("{key}: expected a boolean")))
}

fn as_str<'v>(key: &str, v: &'v Value) -> Result<&'v str> {
    v.as_str()
        .ok_or_else(|| Error::Config(format!("{key}: expected a string")))
}

fn as_f64_array<const N: usize>(key: &str, v: &Value) -> Result<[f64; N]> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Config(format!("{key}: expected an array of {N} numbers")))?;
    if arr.len() != N {
        return Err(Error::Config(format!(
            "{key}: expected {N} values, got {}",
            arr.len()
        )));
    }
    let mut out = [0.0; N];
    for (i, x) in arr.iter().enumerate() {
        out[i] = as_f64(key, x)?;
    }
    Ok(out)
}

fn as_usize_array<const N: usize>(key: &str, v: &Value) -> Result<[usize; N]> {
    let f: [f64; N] = as_f64_array(key, v)?;
    let mut out = [0usize; N];
    for i in 0..N {
        if f[i] < 0.0 || f[i].fract() != 0.0 {
            return Err(Error::Config(format!("{key}: expected integers")));
        }
        out[i] = f[i] as usize;
    }
    Ok(out)
}

fn as_size_rows(key: &str, v: &Value) -> Result<[[f64; 3]; 4]> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Config(format!("{key}: expected 4 rows of [l,w,h]")))?;
    if arr.len() != 4 {
        return Err(Error::Config(format!("{key}: expected 4 rows")));
    }
    let mut out = [[0.0; 3]; 4];
    for (i, row) in arr.iter().enumerate() {
        out[i] = as_f64_array(key, row)?;
    }
    Ok(out)
}

impl Config {
    /// Apply one flat `key: value` pair.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "seed" => self.seed = as_usize(key, v)? as u64,
            "data.root" => self.data_root = as_str(key, v)?.to_string(),
            "data.count" => self.data_count = as_usize(key, v)?,
            "data.train_count" => self.data_train_count = as_usize(key, v)?,

            "synth.boxes_min" => self.synth.boxes_min = as_usize(key, v)?,
            "synth.boxes_max" => self.synth.boxes_max = as_usize(key, v)?,
            "synth.class_mix" => self.synth.class_mix = as_f64_array(key, v)?,
            "synth.points_min" => self.synth.points_per_object_min = as_usize(key, v)?,
            "synth.points_max" => self.synth.points_per_object_max = as_usize(key, v)?,
            "synth.clutter_mean" => self.synth.clutter_mean = as_f64(key, v)?,
            "synth.pos_sigma" => self.synth.pos_sigma = as_f64(key, v)?,
            "synth.doppler_sigma" => self.synth.doppler_sigma = as_f64(key, v)?,
            "synth.rcs_sigma" => self.synth.rcs_sigma = as_f64(key, v)?,
            "synth.image_width" => self.synth.image_width = as_usize(key, v)?,
            "synth.image_height" => self.synth.image_height = as_usize(key, v)?,
            "synth.cam_height" => self.synth.cam_height = as_f64(key, v)?,
            "synth.ground_z" => self.synth.ground_z = as_f64(key, v)?,
            "synth.moving_fraction" => self.synth.moving_fraction = as_f64(key, v)?,

            "grid.x_min" => self.grid.x_min = as_f64(key, v)?,
            "grid.x_max" => self.grid.x_max = as_f64(key, v)?,
            "grid.y_min" => self.grid.y_min = as_f64(key, v)?,
            "grid.y_max" => self.grid.y_max = as_f64(key, v)?,
            "grid.z_min" => self.grid.z_min = as_f64(key, v)?,
            "grid.z_max" => self.grid.z_max = as_f64(key, v)?,
            "grid.x_size" => self.grid.x_size = as_f64(key, v)?,
            "grid.y_size" => self.grid.y_size = as_f64(key, v)?,
            "grid.z_size" => self.grid.z_size = as_f64(key, v)?,

            "model.bev_factor" => self.bev_factor = as_usize(key, v)?,
            "model.c_voxel" => self.c_voxel = as_usize(key, v)?,
            "model.c_bev" => self.c_bev = as_usize_array(key, v)?,
            "model.c_cam" => self.c_cam = as_usize(key, v)?,
            "model.c_fb" => self.c_fb = as_usize(key, v)?,
            "model.c_b" => self.c_b = as_usize(key, v)?,
            "model.c_gpe" => self.c_gpe = as_usize(key, v)?,
            "model.heads" => self.heads = as_usize(key, v)?,
            "model.samples" => self.samples = as_usize(key, v)?,
            "model.u" => self.u_grid = as_usize(key, v)?,
            "model.depth_bins" => self.depth_bins = as_usize(key, v)?,
            "model.depth_min" => self.depth_min = as_f64(key, v)?,
            "model.sa_heads" => self.sa_heads = as_usize(key, v)?,
            "model.refine_hidden" => self.refine_hidden = as_usize(key, v)?,

            "fusion.mode" => self.fusion_mode = FusionMode::parse(as_str(key, v)?)?,
            "stage2.enabled" => self.stage2_enabled = as_bool(key, v)?,
            "stage2.pgf" => self.stage2_pgf = as_bool(key, v)?,
            "stage2.ggf" => self.stage2_ggf = as_bool(key, v)?,
            "stage2.self_attn" => self.stage2_self_attn = as_bool(key, v)?,
            "stage2.kde" => self.stage2_kde = as_bool(key, v)?,

            "rpn.anchor_sizes" => self.anchor_sizes = as_size_rows(key, v)?,
            "rpn.anchor_z" => self.anchor_z = as_f64_array(key, v)?,
            "rpn.pos_iou" => self.rpn_pos_iou = as_f64_array(key, v)?,
            "rpn.neg_iou" => self.rpn_neg_iou = as_f64_array(key, v)?,
            "rpn.train_top_n" => self.rpn_train_top_n = as_usize(key, v)?,
            "rpn.infer_top_n" => self.rpn_infer_top_n = as_usize(key, v)?,
            "rpn.proposal_nms" => self.rpn_proposal_nms = as_f64(key, v)?,
            "rpn.sample_count" => self.rpn_sample_count = as_usize(key, v)?,
            "rpn.pos_fraction" => self.rpn_pos_fraction = as_f64(key, v)?,
            "rpn.match_iou" => self.rpn_match_iou = as_f64(key, v)?,

            "train.lr" => self.lr = as_f64(key, v)?,
            "train.momentum" => self.momentum = as_f64(key, v)?,
            "train.clip_norm" => self.clip_norm = as_f64(key, v)?,
            "train.epochs" => self.epochs = as_usize(key, v)?,
            "train.eval_every" => self.eval_every = as_usize(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = as_usize(key, v)?,

            "eval.conf_thresh" => self.conf_thresh = as_f64(key, v)?,
            "eval.nms" => self.nms_thresh = as_f64(key, v)?,
            "eval.region" => self.region = Region::parse(as_str(key, v)?)?,
            "eval.iou_thresholds" => self.iou_thresholds = as_f64_array(key, v)?,
            "eval.recall_positions" => self.recall_positions = as_usize(key, v)?,
            "eval.recall_iou" => self.recall_iou = as_f64(key, v)?,

            "out.dir" => self.out_dir = as_str(key, v)?.to_string(),

            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// The full resolved configuration as flat dotted keys.
    pub fn flatten(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        let num = |x: f64| Value::from(x);
        let arrf = |xs: &[f64]| Value::from(xs.to_vec());
        let arru = |xs: &[usize]| Value::from(xs.to_vec());

        m.insert("seed".into(), Value::from(self.seed));
        m.insert("data.root".into(), Value::from(self.data_root.clone()));
        m.insert("data.count".into(), Value::from(self.data_count));
        m.insert("data.train_count".into(), Value::from(self.data_train_count));

        m.insert("synth.boxes_min".into(), Value::from(self.synth.boxes_min));
        m.insert("synth.boxes_max".into(), Value::from(self.synth.boxes_max));
        m.insert("synth.class_mix".into(), arrf(&self.synth.class_mix));
        m.insert("synth.points_min".into(), Value::from(self.synth.points_per_object_min));
        m.insert("synth.points_max".into(), Value::from(self.synth.points_per_object_max));
        m.insert("synth.clutter_mean".into(), num(self.synth.clutter_mean));
        m.insert("synth.pos_sigma".into(), num(self.synth.pos_sigma));
        m.insert("synth.doppler_sigma".into(), num(self.synth.doppler_sigma));
        m.insert("synth.rcs_sigma".into(), num(self.synth.rcs_sigma));
        m.insert("synth.image_width".into(), Value::from(self.synth.image_width));
        m.insert("synth.image_height".into(), Value::from(self.synth.image_height));
        m.insert("synth.cam_height".into(), num(self.synth.cam_height));
        m.insert("synth.ground_z".into(), num(self.synth.ground_z));
        m.insert("synth.moving_fraction".into(), num(self.synth.moving_fraction));

        m.insert("grid.x_min".into(), num(self.grid.x_min));
        m.insert("grid.x_max".into(), num(self.grid.x_max));
        m.insert("grid.y_min".into(), num(self.grid.y_min));
        m.insert("grid.y_max".into(), num(self.grid.y_max));
        m.insert("grid.z_min".into(), num(self.grid.z_min));
        m.insert("grid.z_max".into(), num(self.grid.z_max));
        m.insert("grid.x_size".into(), num(self.grid.x_size));
        m.insert("grid.y_size".into(), num(self.grid.y_size));
        m.insert("grid.z_size".into(), num(self.grid.z_size));

        m.insert("model.bev_factor".into(), Value::from(self.bev_factor));
        m.insert("model.c_voxel".into(), Value::from(self.c_voxel));
        m.insert("model.c_bev".into(), arru(&self.c_bev));
        m.insert("model.c_cam".into(), Value::from(self.c_cam));
        m.insert("model.c_fb".into(), Value::from(self.c_fb));
        m.insert("model.c_b".into(), Value::from(self.c_b));
        m.insert("model.c_gpe".into(), Value::from(self.c_gpe));
        m.insert("model.heads".into(), Value::from(self.heads));
        m.insert("model.samples".into(), Value::from(self.samples));
        m.insert("model.u".into(), Value::from(self.u_grid));
        m.insert("model.depth_bins".into(), Value::from(self.depth_bins));
        m.insert("model.depth_min".into(), num(self.depth_min));
        m.insert("model.sa_heads".into(), Value::from(self.sa_heads));
        m.insert("model.refine_hidden".into(), Value::from(self.refine_hidden));

        m.insert("fusion.mode".into(), Value::from(self.fusion_mode.as_str()));
        m.insert("stage2.enabled".into(), Value::from(self.stage2_enabled));
        m.insert("stage2.pgf".into(), Value::from(self.stage2_pgf));
        m.insert("stage2.ggf".into(), Value::from(self.stage2_ggf));
        m.insert("stage2.self_attn".into(), Value::from(self.stage2_self_attn));
        m.insert("stage2.kde".into(), Value::from(self.stage2_kde));

        let sizes: Vec<Value> = self
            .anchor_sizes
            .iter()
            .map(|row| Value::from(row.to_vec()))
            .collect();
        m.insert("rpn.anchor_sizes".into(), Value::from(sizes));
        m.insert("rpn.anchor_z".into(), arrf(&self.anchor_z));
        m.insert("rpn.pos_iou".into(), arrf(&self.rpn_pos_iou));
        m.insert("rpn.neg_iou".into(), arrf(&self.rpn_neg_iou));
        m.insert("rpn.train_top_n".into(), Value::from(self.rpn_train_top_n));
        m.insert("rpn.infer_top_n".into(), Value::from(self.rpn_infer_top_n));
        m.insert("rpn.proposal_nms".into(), num(self.rpn_proposal_nms));
        m.insert("rpn.sample_count".into(), Value::from(self.rpn_sample_count));
        m.insert("rpn.pos_fraction".into(), num(self.rpn_pos_fraction));
        m.insert("rpn.match_iou".into(), num(self.rpn_match_iou));

        m.insert("train.lr".into(), num(self.lr));
        m.insert("train.momentum".into(), num(self.momentum));
        m.insert("train.clip_norm".into(), num(self.clip_norm));
        m.insert("train.epochs".into(), Value::from(self.epochs));
        m.insert("train.eval_every".into(), Value::from(self.eval_every));
        m.insert("train.checkpoint_every".into(), Value::from(self.checkpoint_every));

        m.insert("eval.conf_thresh".into(), num(self.conf_thresh));
        m.insert("eval.nms".into(), num(self.nms_thresh));
        m.insert("eval.region".into(), Value::from(self.region.as_str()));
        m.insert("eval.iou_thresholds".into(), arrf(&self.iou_thresholds));
        m.insert("eval.recall_positions".into(), Value::from(self.recall_positions));
        m.insert("eval.recall_iou".into(), num(self.recall_iou));

        m.insert("out.dir".into(), Value::from(self.out_dir.clone()));
        m
    }

    /// Parse a config file over the defaults.
    pub fn from_file(path: &Path) -> Result<Config> {
        let body = fs::read_to_string(path)?;
        let mut cfg = Config::default();
        cfg.apply_json(&body)
            .map_err(|e| Error::format(path.display(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a JSON object (comments allowed) over the current values.
    pub fn apply_json(&mut self, body: &str) -> Result<()> {
        let clean = strip_comments(body);
        let value: Value = serde_json::from_str(&clean)
            .map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("top level must be an object".into()))?;
        for (k, v) in obj {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate();
        let mix: f64 = self.synth.class_mix.iter().sum();
        if (mix - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("synth.class_mix sums to {mix}, expected 1")));
        }
        if self.data_train_count > self.data_count {
            return Err(Error::Config("data.train_count exceeds data.count".into()));
        }
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        if nx % self.bev_factor != 0 || ny % self.bev_factor != 0 {
            return Err(Error::Config(format!(
                "grid cells {nx}×{ny} not divisible by model.bev_factor {}",
                self.bev_factor
            )));
        }
        let (bx, by) = (nx / self.bev_factor, ny / self.bev_factor);
        if bx % 4 != 0 || by % 4 != 0 {
            return Err(Error::Config(format!(
                "base BEV {bx}×{by} must be divisible by 4 (three pyramid scales)"
            )));
        }
        if self.synth.image_width % 4 != 0 || self.synth.image_height % 4 != 0 {
            return Err(Error::Config("image extents must be divisible by 4".into()));
        }
        for (name, v) in [
            ("model.c_voxel", self.c_voxel),
            ("model.c_cam", self.c_cam),
            ("model.c_fb", self.c_fb),
            ("model.c_b", self.c_b),
            ("model.c_gpe", self.c_gpe),
            ("model.heads", self.heads),
            ("model.samples", self.samples),
            ("model.u", self.u_grid),
            ("model.depth_bins", self.depth_bins),
            ("model.sa_heads", self.sa_heads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.c_b % self.sa_heads != 0 {
            return Err(Error::Config(format!(
                "model.c_b {} must be divisible by model.sa_heads {}",
                self.c_b, self.sa_heads
            )));
        }
        for t in self.iou_thresholds {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config("eval.iou_thresholds must be in (0,1]".into()));
            }
        }
        Ok(())
    }

    /// The base BEV grid (k=0 scale): x/y cells `bev_factor`× the voxel
    /// pitch, one z slab.
    pub fn base_bev_grid(&self) -> GridSpec {
        self.grid.coarsen_xy(self.bev_factor)
    }

    /// The fused-map grid (k=1 scale), where the RPN runs.
    pub fn fb_grid(&self) -> GridSpec {
        self.grid.coarsen_xy(self.bev_factor * 2)
    }

    /// Write the resolved config to `<out_dir>/run.json` (atomic).
    pub fn write_run_json(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let map = self.flatten();
        let body = serde_json::to_string_pretty(&map)
            .map_err(|e| Error::Config(format!("run.json serialization: {e}")))?;
        let tmp = dir.join("run.json.tmp");
        fs::write(&tmp, body)?;
        fs::rename(tmp, dir.join("run.json"))?;
        Ok(())
    }
}

/// Remove `//` line comments outside string literals.
fn strip_comments(src: &str) -> String {
    let mut out = String::with_capacity(src.len());
    let mut chars = src.chars().peekable();
    let mut in_string = false;
    let mut escaped = false;
    while let Some(c) = chars.next() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                out.push(c);
            }
            '/' if chars.peek() == Some(&'/') => {
                for c2 in chars.by_ref() {
                    if c2 == '\n' {
                        out.push('\n');
                        break;
                    }
                }
            }
            _ => out.push(c),
        }
    }
    out
}
