//! Command-line operator surface: dataset generation, training,
//! evaluation, inference, gradient checking, and ablation sweeps, all
//! driven by one flat JSON config (`//` comments allowed, dotted keys,
//! unknown keys rejected).
//!
//! Every command resolves its configuration first and writes it to
//! `run.json` in the command's output directory, so any run can be
//! reproduced from that file alone. `CVFK_THREADS` caps the worker
//! threads used for per-frame work (dataset generation, inference).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use radcam::config::Config;
use radcam::error::{Error, Result};
use radcam::eval::{
    atomic_write, evaluate, proposal_recall, save_detections, write_metrics_csv, write_pr_svg,
    FramePair,
};
use radcam::model::gradcases;
use radcam::model::train::{run_inference, run_proposals, train_loop, TrainOpts};
use radcam::scene::io::{frame_name, generate_dataset_threads, load_manifest, load_scene};
use radcam::scene::Scene;
use radcam::tensor::ParamStore;

#[derive(Parser)]
#[command(
    name = "radcam",
    version,
    about = "Two-stage radar+camera 3D object detection, end to end on the CPU"
)]
struct Cli {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset tree and its manifest.
    Datagen,
    /// Train the detector; writes per-epoch CSV, checkpoints, run.json.
    Train {
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once an evaluated epoch reaches this validation mAP.
        #[arg(long)]
        stop_at_map: Option<f64>,
    },
    /// Evaluate a checkpoint: metrics CSV, PR-curve SVG, console table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frames to use: train, val, or all.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Run detection and write one result file per frame.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frames to use: train, val, or all.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Finite-difference gradient checks; prints a pass/fail table.
    Gradcheck {
        /// Only run cases whose name contains this substring.
        #[arg(long)]
        only: Option<String>,
    },
    /// Sweep the fusion/refinement switch matrix and compare variants.
    Ablate {
        /// Comma-separated seeds; the table reports per-seed values
        /// and the median.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Worker-thread cap: `CVFK_THREADS` when set, else the machine's
/// available parallelism.
fn worker_count() -> usize {
    std::env::var("CVFK_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &Config) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_dataset(cfg: &Config) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let root = Path::new(&cfg.data_root);
    let manifest = load_manifest(root)?;
    let load_ids = |ids: &[u32]| -> Result<Vec<Scene>> {
        ids.iter().map(|&id| load_scene(root, id)).collect()
    };
    Ok((load_ids(&manifest.train)?, load_ids(&manifest.val)?))
}

fn load_split(cfg: &Config, split: &str) -> Result<Vec<Scene>> {
    let (train, val) = load_dataset(cfg)?;
    match split {
        "train" => Ok(train),
        "val" => Ok(val),
        "all" => {
            let mut all = train;
            all.extend(val);
            Ok(all)
        }
        other => Err(Error::Config(format!(
            "unknown split {other:?} (expected train, val, or all)"
        ))),
    }
}

/// Fan per-frame inference out over worker threads; chunking preserves
/// frame order and each worker gets its own copy of the weights.
fn parallel_frames(
    cfg: &Config,
    store: &ParamStore,
    scenes: &[Scene],
    threads: usize,
    f: fn(&Config, &mut ParamStore, &[Scene]) -> Vec<FramePair>,
) -> Vec<FramePair> {
    if scenes.is_empty() {
        return Vec::new();
    }
    let workers = threads.max(1).min(scenes.len());
    if workers == 1 {
        let mut local = store.clone();
        return f(cfg, &mut local, scenes);
    }
    let chunk = scenes.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = scenes
            .chunks(chunk)
            .map(|part| {
                let mut local = store.clone();
                s.spawn(move || f(cfg, &mut local, part))
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("inference worker panicked"))
            .collect()
    })
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    let threads = worker_count();
    match cli.cmd {
        Cmd::Datagen => {
            let root = PathBuf::from(&cfg.data_root);
            let manifest = generate_dataset_threads(
                &cfg.synth,
                &cfg.grid,
                cfg.seed,
                cfg.data_count,
                cfg.data_train_count,
                &root,
                threads,
            )?;
            cfg.write_run_json(&root)?;
            println!(
                "wrote {} frames ({} train, {} val) under {}",
                manifest.train.len() + manifest.val.len(),
                manifest.train.len(),
                manifest.val.len(),
                root.display()
            );
        }
        Cmd::Train {
            resume,
            stop_at_map,
        } => {
            let out = out_dir(&cfg)?;
            cfg.write_run_json(&out)?;
            let (train_scenes, val_scenes) = load_dataset(&cfg)?;
            let mut store = match resume {
                Some(path) => ParamStore::load(&path)?,
                None => ParamStore::new(),
            };
            let opts = TrainOpts {
                out_dir: Some(out.clone()),
                stop_at_map,
                verbose: true,
            };
            let outcome = train_loop(&cfg, &train_scenes, &val_scenes, &mut store, &opts)?;
            store.save(&out.join("last.ckpt"))?;
            if outcome.best_epoch > 0 {
                println!(
                    "done: best val mAP {:.4} at epoch {}{}",
                    outcome.best_map,
                    outcome.best_epoch,
                    if outcome.stopped_early {
                        " (stopped early)"
                    } else {
                        ""
                    }
                );
            } else {
                println!("done: {} epochs, no evaluation ran", outcome.history.len());
            }
        }
        Cmd::Eval { checkpoint, split } => {
            let out = out_dir(&cfg)?;
            cfg.write_run_json(&out)?;
            let scenes = load_split(&cfg, &split)?;
            let store = ParamStore::load(&checkpoint)?;
            let frames = parallel_frames(&cfg, &store, &scenes, threads, run_inference);
            let summary = evaluate(
                &frames,
                &cfg.iou_thresholds,
                cfg.region,
                cfg.recall_positions,
            );
            let props = parallel_frames(&cfg, &store, &scenes, threads, run_proposals);
            let recall = proposal_recall(&props, cfg.recall_iou);
            write_metrics_csv(&out.join("metrics.csv"), &summary)?;
            write_pr_svg(&out.join("pr_curves.svg"), &summary)?;
            println!("split {} ({} frames), region {}", split, scenes.len(), cfg.region.as_str());
            println!("{:<12} {:>8} {:>10} {:>10}", "class", "ap", "gt_count", "det_count");
            for c in &summary.per_class {
                println!(
                    "{:<12} {:>8.4} {:>10} {:>10}",
                    c.class.name(),
                    c.ap,
                    c.gt_count,
                    c.det_count
                );
            }
            println!("mAP {:.4}   proposal recall@{:.2} {:.4}", summary.map, cfg.recall_iou, recall);
            for w in &summary.warnings {
                println!("note: {w}");
            }
        }
        Cmd::Infer { checkpoint, split } => {
            let out = out_dir(&cfg)?;
            cfg.write_run_json(&out)?;
            let scenes = load_split(&cfg, &split)?;
            let store = ParamStore::load(&checkpoint)?;
            let frames = parallel_frames(&cfg, &store, &scenes, threads, run_inference);
            let det_dir = out.join("detections");
            fs::create_dir_all(&det_dir)?;
            let mut total = 0usize;
            for (scene, fp) in scenes.iter().zip(&frames) {
                total += fp.dets.len();
                save_detections(
                    &det_dir.join(format!("{}.txt", frame_name(scene.frame_id))),
                    &fp.dets,
                )?;
            }
            println!(
                "wrote {} detections across {} frames to {}",
                total,
                scenes.len(),
                det_dir.display()
            );
        }
        Cmd::Gradcheck { only } => {
            let reports = gradcases::run_filtered(only.as_deref());
            if reports.is_empty() {
                return Err(Error::Config(format!(
                    "no gradient-check cases match {:?}",
                    only.unwrap_or_default()
                )));
            }
            println!("{:<24} {:>12} {:>7}  status", "case", "max_rel_err", "probes");
            let mut all_ok = true;
            for r in &reports {
                let ok = r.passed();
                all_ok &= ok;
                println!(
                    "{:<24} {:>12.3e} {:>7}  {}",
                    r.name,
                    r.max_rel_err,
                    r.probes,
                    if ok { "PASS" } else { "FAIL" }
                );
            }
            println!(
                "{} of {} cases passed",
                reports.iter().filter(|r| r.passed()).count(),
                reports.len()
            );
            if !all_ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Ablate { seeds } => {
            let out = out_dir(&cfg)?;
            cfg.write_run_json(&out)?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::Config(format!("bad seed {s:?}")))
                })
                .collect::<Result<_>>()?;
            if seeds.is_empty() {
                return Err(Error::Config("ablate needs at least one seed".into()));
            }
            let (train_scenes, val_scenes) = load_dataset(&cfg)?;
            let variants: &[(&str, &str)] = &[
                ("full", r#"{"fusion.mode": "rgiter", "stage2.enabled": true}"#),
                ("stage1_only", r#"{"fusion.mode": "rgiter", "stage2.enabled": false}"#),
                ("concat", r#"{"fusion.mode": "concat", "stage2.enabled": true}"#),
                ("radar_only", r#"{"fusion.mode": "radar_only", "stage2.enabled": true}"#),
                ("camera_only", r#"{"fusion.mode": "camera_only", "stage2.enabled": true}"#),
            ];
            let mut csv = String::from("variant,seed,map,recall\n");
            let mut table: Vec<(String, f64, f64)> = Vec::new();
            for (name, patch) in variants {
                let mut maps = Vec::new();
                let mut recalls = Vec::new();
                for &seed in &seeds {
                    let mut vcfg = cfg.clone();
                    vcfg.apply_json(patch)?;
                    vcfg.seed = seed;
                    vcfg.validate()?;
                    let mut store = ParamStore::new();
                    let outcome = train_loop(
                        &vcfg,
                        &train_scenes,
                        &val_scenes,
                        &mut store,
                        &TrainOpts::default(),
                    )?;
                    let last = outcome.history.last().ok_or_else(|| {
                        Error::Config("ablate ran zero epochs; set train.epochs".into())
                    })?;
                    let (map, recall) = match (last.map, last.recall) {
                        (Some(m), Some(r)) => (m, r),
                        _ => {
                            // Final epoch was not an eval epoch; measure now.
                            let frames =
                                parallel_frames(&vcfg, &store, &val_scenes, threads, run_inference);
                            let summary = evaluate(
                                &frames,
                                &vcfg.iou_thresholds,
                                vcfg.region,
                                vcfg.recall_positions,
                            );
                            let props =
                                parallel_frames(&vcfg, &store, &val_scenes, threads, run_proposals);
                            (summary.map, proposal_recall(&props, vcfg.recall_iou))
                        }
                    };
                    println!("{name} seed {seed}: mAP {map:.4} recall {recall:.4}");
                    csv.push_str(&format!("{name},{seed},{map:.6},{recall:.6}\n"));
                    maps.push(map);
                    recalls.push(recall);
                }
                let (m_map, m_rec) = (median(&maps), median(&recalls));
                csv.push_str(&format!("{name},median,{m_map:.6},{m_rec:.6}\n"));
                table.push((name.to_string(), m_map, m_rec));
            }
            atomic_write(&out.join("ablation.csv"), csv.as_bytes())?;
            println!("\n{:<12} {:>10} {:>10}  ({} seeds, medians)", "variant", "mAP", "recall", seeds.len());
            for (name, m, r) in &table {
                println!("{name:<12} {m:>10.4} {r:>10.4}");
            }
            println!("table written to {}", out.join("ablation.csv").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
