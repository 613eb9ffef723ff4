//! Training loop: one scene per optimizer step, momentum SGD with a
//! cosine learning-rate schedule, periodic validation, an atomically
//! rewritten per-epoch CSV log, and checkpointing.
//!
//! Every stochastic choice (epoch ordering, proposal sampling) is keyed
//! off the persisted optimizer step counter, never off in-memory loop
//! state. Resuming from a checkpoint therefore replays exactly the
//! steps an uninterrupted run would have taken: loading the same file
//! twice and training onward produces bit-identical trajectories.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{atomic_write, evaluate, proposal_recall, FramePair};
use crate::model::backbone::lift_geometry;
use crate::model::detector::{detector_anchors, infer, propose, train_forward};
use crate::model::Ctx;
use crate::scene::Scene;
use crate::tensor::{ParamStore, Tape};
use crate::util::rng::stream;

/// `lr/2 · (1 + cos(π·t/T))`: starts at `lr`, ends near zero.
pub fn cosine_lr(base: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let frac = (step.min(total_steps) as f64) / total_steps as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// One epoch's log line. `recall` and `map` are present only on epochs
/// where validation ran.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub l_rpn: f64,
    pub l_refine: f64,
    pub l_total: f64,
    pub recall: Option<f64>,
    pub map: Option<f64>,
}

pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best_map: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Default)]
pub struct TrainOpts {
    /// Where `train_log.csv` and checkpoints go; `None` disables both.
    pub out_dir: Option<PathBuf>,
    /// Stop as soon as an evaluated epoch reaches this validation mAP.
    pub stop_at_map: Option<f64>,
    /// Print one line per epoch.
    pub verbose: bool,
}

/// Rescale the whole gradient so its global L2 norm stays under `max`.
/// One anomalous step (a hard scene, an unlucky proposal draw) otherwise
/// throws SGD-with-momentum far enough to wreck the run.
pub fn clip_grad_norm(updates: &mut [(usize, Vec<f64>)], max: f64) {
    if max <= 0.0 {
        return;
    }
    let sq: f64 = updates
        .iter()
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max {
        let s = max / norm;
        for (_, g) in updates.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Detections for every scene, as evaluation frame pairs.
pub fn run_inference(cfg: &Config, store: &mut ParamStore, scenes: &[Scene]) -> Vec<FramePair> {
    let anchors = detector_anchors(cfg);
    scenes
        .iter()
        .map(|scene| {
            let geom = lift_geometry(cfg, &scene.calib);
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, store, cfg.seed);
            let dets = infer(&mut ctx, cfg, scene, &anchors, &geom);
            FramePair {
                dets,
                gts: scene.boxes.clone(),
            }
        })
        .collect()
}

/// Stage-1 proposals for every scene, for recall measurements.
pub fn run_proposals(cfg: &Config, store: &mut ParamStore, scenes: &[Scene]) -> Vec<FramePair> {
    let anchors = detector_anchors(cfg);
    scenes
        .iter()
        .map(|scene| {
            let geom = lift_geometry(cfg, &scene.calib);
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, store, cfg.seed);
            let dets = propose(&mut ctx, cfg, scene, &anchors, &geom);
            FramePair {
                dets,
                gts: scene.boxes.clone(),
            }
        })
        .collect()
}

fn write_log(dir: &Path, history: &[EpochStats]) -> Result<()> {
    let mut csv = String::from("epoch,lr,l_rpn,l_refine,l_total,recall,map\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for s in history {
        csv.push_str(&format!(
            "{},{:.8},{:.6},{:.6},{:.6},{},{}\n",
            s.epoch,
            s.lr,
            s.l_rpn,
            s.l_refine,
            s.l_total,
            opt(s.recall),
            opt(s.map),
        ));
    }
    atomic_write(&dir.join("train_log.csv"), csv.as_bytes())
}

/// Train `store` on `train_scenes`, validating on `val_scenes`. The
/// epoch count, learning rate, momentum, and cadences come from `cfg`.
/// A partially trained `store` (nonzero step counter) resumes at the
/// epoch its counter implies.
pub fn train_loop(
    cfg: &Config,
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    store: &mut ParamStore,
    opts: &TrainOpts,
) -> Result<TrainOutcome> {
    if train_scenes.is_empty() {
        return Err(Error::Config("training requires at least one scene".into()));
    }
    let anchors = detector_anchors(cfg);
    let steps_per_epoch = train_scenes.len() as u64;
    let total_steps = cfg.epochs as u64 * steps_per_epoch;
    let start_epoch = (store.step / steps_per_epoch) as usize;

    let mut history: Vec<EpochStats> = Vec::new();
    let mut best_map = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut stopped_early = false;

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &format!("train/order/{epoch:06}")));

        let lr_epoch = cosine_lr(cfg.lr, store.step, total_steps);
        let (mut sum_rpn, mut sum_refine, mut sum_total) = (0.0, 0.0, 0.0);
        for &si in &order {
            let scene = &train_scenes[si];
            let geom = lift_geometry(cfg, &scene.calib);
            let step = store.step;
            let lr = cosine_lr(cfg.lr, step, total_steps);
            let mut rng = stream(cfg.seed, &format!("train/step/{step:010}"));
            let mut tape = Tape::new();
            let mut updates = {
                let mut ctx = Ctx::new(&mut tape, store, cfg.seed);
                let fwd = train_forward(&mut ctx, cfg, scene, &anchors, &geom, &mut rng);
                sum_rpn += fwd.stats.l_rpn;
                sum_refine += fwd.stats.l_refine;
                sum_total += fwd.stats.total;
                let grads = ctx.tape.backward(fwd.total);
                ctx.collect_grads(&grads)
            };
            clip_grad_norm(&mut updates, cfg.clip_norm);
            store.sgd_step(&updates, lr, cfg.momentum);
        }

        let n = train_scenes.len() as f64;
        let epoch1 = epoch + 1; // 1-based in logs
        let last_epoch = epoch1 == cfg.epochs;
        let eval_now = !val_scenes.is_empty()
            && cfg.eval_every > 0
            && (epoch1 % cfg.eval_every == 0 || last_epoch);

        let (recall, map) = if eval_now {
            let det_frames = run_inference(cfg, store, val_scenes);
            let summary = evaluate(
                &det_frames,
                &cfg.iou_thresholds,
                cfg.region,
                cfg.recall_positions,
            );
            let prop_frames = run_proposals(cfg, store, val_scenes);
            let rec = proposal_recall(&prop_frames, cfg.recall_iou);
            (Some(rec), Some(summary.map))
        } else {
            (None, None)
        };

        let stats = EpochStats {
            epoch: epoch1,
            lr: lr_epoch,
            l_rpn: sum_rpn / n,
            l_refine: sum_refine / n,
            l_total: sum_total / n,
            recall,
            map,
        };
        if opts.verbose {
            let fmt_opt =
                |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            println!(
                "epoch {:4}  lr {:.5}  rpn {:.4}  refine {:.4}  total {:.4}  recall {}  mAP {}",
                stats.epoch,
                stats.lr,
                stats.l_rpn,
                stats.l_refine,
                stats.l_total,
                fmt_opt(stats.recall),
                fmt_opt(stats.map),
            );
        }
        history.push(stats.clone());

        if let Some(dir) = &opts.out_dir {
            write_log(dir, &history)?;
            let improved = map.map_or(false, |m| m > best_map);
            if improved {
                store.save(&dir.join("best.ckpt"))?;
            }
            if cfg.checkpoint_every > 0 && (epoch1 % cfg.checkpoint_every == 0 || last_epoch) {
                store.save(&dir.join(format!("ckpt_{epoch1:04}.ckpt")))?;
                store.save(&dir.join("last.ckpt"))?;
            }
        }
        if let Some(m) = map {
            if m > best_map {
                best_map = m;
                best_epoch = epoch1;
            }
        }
        if let (Some(target), Some(m)) = (opts.stop_at_map, map) {
            if m >= target {
                stopped_early = true;
                if let Some(dir) = &opts.out_dir {
                    store.save(&dir.join("last.ckpt"))?;
                }
                break;
            }
        }
    }

    Ok(TrainOutcome {
        history,
        best_map: if best_map.is_finite() { best_map } else { 0.0 },
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::synth::generate_scene;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.apply_json(
            r#"{
                "grid.x_max": 12.8, "grid.y_min": -6.4, "grid.y_max": 6.4,
                "grid.x_size": 0.2, "grid.y_size": 0.2, "grid.z_size": 0.2,
                "model.bev_factor": 4,
                "model.c_voxel": 4, "model.c_bev": [4, 6, 8], "model.c_cam": 4,
                "model.c_fb": 8, "model.c_b": 6, "model.c_gpe": 5,
                "model.heads": 2, "model.samples": 2, "model.u": 2,
                "model.sa_heads": 2, "model.refine_hidden": 12,
                "model.depth_bins": 6,
                "rpn.train_top_n": 8, "rpn.infer_top_n": 8,
                "rpn.sample_count": 6,
                "synth.image_width": 32, "synth.image_height": 24,
                "synth.boxes_max": 3,
                "train.epochs": 4, "train.eval_every": 2,
                "train.checkpoint_every": 2, "train.lr": 0.002
            }"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        cfg
    }

    fn scenes(cfg: &Config, n: usize, seed: u64) -> Vec<Scene> {
        (0..n)
            .map(|i| generate_scene(&cfg.synth, &cfg.grid, seed, i as u32))
            .collect()
    }

    #[test]
    fn cosine_schedule_has_the_right_endpoints() {
        assert!((cosine_lr(0.01, 0, 100) - 0.01).abs() < 1e-15);
        assert!((cosine_lr(0.01, 50, 100) - 0.005).abs() < 1e-15);
        assert!(cosine_lr(0.01, 100, 100).abs() < 1e-15);
        // Steps past the horizon clamp instead of rising again.
        assert!(cosine_lr(0.01, 150, 100).abs() < 1e-15);
        assert_eq!(cosine_lr(0.01, 3, 0), 0.01);
    }

    #[test]
    fn losses_fall_when_overfitting_two_scenes() {
        let cfg = tiny_cfg();
        let data = scenes(&cfg, 2, 11);
        let mut store = ParamStore::new();
        let out = train_loop(&cfg, &data, &data, &mut store, &TrainOpts::default()).unwrap();
        assert_eq!(out.history.len(), 4);
        let first = out.history.first().unwrap().l_total;
        let last = out.history.last().unwrap().l_total;
        assert!(first.is_finite() && last.is_finite());
        assert!(last < first, "loss should fall: {first} -> {last}");
        // Epochs 2 and 4 evaluated, 1 and 3 did not.
        assert!(out.history[0].map.is_none() && out.history[1].map.is_some());
        assert!(out.history[2].map.is_none() && out.history[3].map.is_some());
    }

    #[test]
    fn resuming_from_a_checkpoint_is_deterministic() {
        let cfg = tiny_cfg();
        let data = scenes(&cfg, 2, 12);
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");

        // Phase 1: two epochs, then stop (checkpoint lands at epoch 2).
        let mut cfg_half = cfg.clone();
        cfg_half.apply_json(r#"{"train.epochs": 2}"#).unwrap();
        let mut store = ParamStore::new();
        let opts = TrainOpts {
            out_dir: Some(out_a.clone()),
            ..TrainOpts::default()
        };
        train_loop(&cfg_half, &data, &data, &mut store, &opts).unwrap();
        let ckpt = out_a.join("last.ckpt");
        assert!(ckpt.exists());

        // Phase 2, twice: resume from the identical file and finish.
        let finish = |tag: &str| {
            let mut s = ParamStore::load(&ckpt).unwrap();
            assert_eq!(s.step, 4, "two epochs of two scenes");
            let d = dir.path().join(tag);
            let o = TrainOpts {
                out_dir: Some(d.clone()),
                ..TrainOpts::default()
            };
            let out = train_loop(&cfg, &data, &data, &mut s, &o).unwrap();
            let hist: Vec<EpochStats> = out.history.clone();
            (hist, std::fs::read(d.join("last.ckpt")).unwrap())
        };
        let (h1, bytes1) = finish("b");
        let (h2, bytes2) = finish("c");
        assert_eq!(h1.len(), 2, "resumed at epoch 3 of 4");
        assert_eq!(h1[0].epoch, 3);
        assert_eq!(h1, h2, "identical resumed trajectories");
        assert_eq!(bytes1, bytes2, "identical resumed checkpoints");
    }

    #[test]
    fn csv_log_is_rewritten_each_epoch() {
        let mut cfg = tiny_cfg();
        cfg.apply_json(r#"{"train.epochs": 2, "train.eval_every": 1}"#)
            .unwrap();
        let data = scenes(&cfg, 1, 13);
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        let opts = TrainOpts {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOpts::default()
        };
        let out = train_loop(&cfg, &data, &data, &mut store, &opts).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines[0], "epoch,lr,l_rpn,l_refine,l_total,recall,map");
        assert_eq!(lines.len(), 3, "header plus one row per epoch");
        for row in &lines[1..] {
            assert_eq!(row.split(',').count(), 7);
        }
        // Evaluated every epoch, so recall/map cells are non-empty.
        assert!(out.history.iter().all(|s| s.map.is_some()));
        assert!(!lines[1].ends_with(','));
    }

    #[test]
    fn early_stopping_halts_at_the_target() {
        let mut cfg = tiny_cfg();
        cfg.apply_json(r#"{"train.epochs": 50, "train.eval_every": 1}"#)
            .unwrap();
        let data = scenes(&cfg, 1, 14);
        let mut store = ParamStore::new();
        let opts = TrainOpts {
            stop_at_map: Some(0.0), // any evaluated epoch qualifies
            ..TrainOpts::default()
        };
        let out = train_loop(&cfg, &data, &data, &mut store, &opts).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.history.len(), 1, "stopped after the first evaluation");
    }
}
