//! On-disk dataset format.
//!
//! A dataset is a directory:
//!
//! ```text
//! root/
//!   dataset.json        manifest: classes, grid, image size, splits
//!   points/NNNNNN.txt    one radar point per line: x y z doppler rcs
//!   labels/NNNNNN.txt    one box per line: class x y z l w h yaw
//!   calib/NNNNNN.txt     12 whitespace-separated reals (row-major 3×4)
//!   image/NNNNNN.ppm     binary P6, maxval 255
//! ```
//!
//! Reals are text-encoded at 9 significant digits; loading a saved
//! scene and saving it again reproduces the files byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, Calibration, Class, GridSpec};
use crate::scene::synth::{generate_scene, SynthConfig};
use crate::scene::{PointCloud, Scene};
use crate::tensor::Array;

pub fn frame_name(id: u32) -> String {
    format!("{id:06}")
}

/// 9-significant-digit text encoding used for all dataset reals.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.8e}")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub grid: GridSpec,
    pub image_width: usize,
    pub image_height: usize,
    pub train: Vec<u32>,
    pub val: Vec<u32>,
}

impl DatasetManifest {
    pub fn all_frames(&self) -> Vec<u32> {
        let mut v = self.train.clone();
        v.extend_from_slice(&self.val);
        v
    }
}

pub fn save_manifest(m: &DatasetManifest, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    let body = serde_json::to_string_pretty(m)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    let tmp = root.join("dataset.json.tmp");
    fs::write(&tmp, body)?;
    fs::rename(&tmp, root.join("dataset.json"))?;
    Ok(())
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("dataset.json");
    let body = fs::read_to_string(&path)?;
    serde_json::from_str(&body).map_err(|e| Error::format(path.display(), e.to_string()))
}

pub fn save_scene(scene: &Scene, root: &Path) -> Result<()> {
    let name = frame_name(scene.frame_id);
    for sub in ["points", "labels", "calib", "image"] {
        fs::create_dir_all(root.join(sub))?;
    }

    let mut pts = String::new();
    for i in 0..scene.cloud.len() {
        let p = scene.cloud.xyz[i];
        pts.push_str(&format!(
            "{} {} {} {} {}\n",
            fmt_real(p[0]),
            fmt_real(p[1]),
            fmt_real(p[2]),
            fmt_real(scene.cloud.doppler[i]),
            fmt_real(scene.cloud.rcs[i]),
        ));
    }
    fs::write(root.join("points").join(format!("{name}.txt")), pts)?;

    let mut labels = String::new();
    for b in &scene.boxes {
        labels.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            b.class.name(),
            fmt_real(b.x),
            fmt_real(b.y),
            fmt_real(b.z),
            fmt_real(b.l),
            fmt_real(b.w),
            fmt_real(b.h),
            fmt_real(b.yaw),
        ));
    }
    fs::write(root.join("labels").join(format!("{name}.txt")), labels)?;

    let calib_line = scene
        .calib
        .t
        .iter()
        .map(|&v| fmt_real(v))
        .collect::<Vec<_>>()
        .join(" ");
    fs::write(
        root.join("calib").join(format!("{name}.txt")),
        calib_line + "\n",
    )?;

    write_ppm(&scene.image, &root.join("image").join(format!("{name}.ppm")))?;
    Ok(())
}

pub fn load_scene(root: &Path, frame_id: u32) -> Result<Scene> {
    let name = frame_name(frame_id);
    let cloud = load_points(&root.join("points").join(format!("{name}.txt")))?;
    let boxes = load_labels(&root.join("labels").join(format!("{name}.txt")))?;
    let calib = load_calib(&root.join("calib").join(format!("{name}.txt")))?;
    let image = read_ppm(&root.join("image").join(format!("{name}.ppm")))?;
    Ok(Scene {
        frame_id,
        boxes,
        cloud,
        image,
        calib,
    })
}

fn parse_real(tok: &str, path: &Path, line_no: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| {
        Error::format(
            path.display(),
            format!("line {line_no}: bad real value {tok:?}"),
        )
    })
}

pub fn load_points(path: &Path) -> Result<PointCloud> {
    let body = fs::read_to_string(path)?;
    let mut cloud = PointCloud::default();
    for (i, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 5 {
            return Err(Error::format(
                path.display(),
                format!("line {}: expected 5 fields, got {}", i + 1, toks.len()),
            ));
        }
        let mut vals = [0.0; 5];
        for (k, t) in toks.iter().enumerate() {
            vals[k] = parse_real(t, path, i + 1)?;
        }
        cloud.push([vals[0], vals[1], vals[2]], vals[3], vals[4]);
    }
    Ok(cloud)
}

pub fn load_labels(path: &Path) -> Result<Vec<Box3D>> {
    let body = fs::read_to_string(path)?;
    let mut boxes = Vec::new();
    for (i, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(Error::format(
                path.display(),
                format!("line {}: expected 8 fields, got {}", i + 1, toks.len()),
            ));
        }
        let class = Class::from_name(toks[0]).ok_or_else(|| {
            Error::format(
                path.display(),
                format!("line {}: unknown class {:?}", i + 1, toks[0]),
            )
        })?;
        let mut vals = [0.0; 7];
        for (k, t) in toks[1..].iter().enumerate() {
            vals[k] = parse_real(t, path, i + 1)?;
        }
        boxes.push(Box3D::new(
            vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], vals[6], class,
        ));
    }
    Ok(boxes)
}

pub fn load_calib(path: &Path) -> Result<Calibration> {
    let body = fs::read_to_string(path)?;
    let toks: Vec<&str> = body.split_whitespace().collect();
    if toks.len() != 12 {
        return Err(Error::format(
            path.display(),
            format!("expected 12 calibration values, got {}", toks.len()),
        ));
    }
    let mut t = [0.0; 12];
    for (k, tok) in toks.iter().enumerate() {
        t[k] = parse_real(tok, path, 1)?;
    }
    Ok(Calibration::new(t))
}

/// Binary P6 with maxval 255; values quantized from [0,1].
pub fn write_ppm(image: &Array, path: &Path) -> Result<()> {
    let (h, w, c) = image.dims3();
    assert_eq!(c, 3, "ppm image must have 3 channels");
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(h * w * 3);
    for &v in &image.data {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Array> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::format(path.display(), msg.to_string());
    // Header: magic, width, height, maxval, single whitespace, raster.
    let mut pos = 0usize;
    let mut fields: Vec<String> = Vec::new();
    while fields.len() < 4 {
        // Skip whitespace and comments.
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary P6 file"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    if fields[3] != "255" {
        return Err(bad("unsupported maxval (expected 255)"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + h * w * 3 {
        return Err(bad("truncated raster"));
    }
    let data = bytes[pos..pos + h * w * 3]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(Array::new(vec![h, w, 3], data))
}

/// Generate `count` frames under `root` with an index split: the first
/// `train_count` frames are train, the rest val.
pub fn generate_dataset(
    cfg: &SynthConfig,
    grid: &GridSpec,
    seed: u64,
    count: usize,
    train_count: usize,
    root: &Path,
) -> Result<DatasetManifest> {
    generate_dataset_threads(cfg, grid, seed, count, train_count, root, 1)
}

/// [`generate_dataset`] fanned out over worker threads. Every frame is
/// generated from its own RNG stream, so the tree is byte-identical for
/// any thread count.
pub fn generate_dataset_threads(
    cfg: &SynthConfig,
    grid: &GridSpec,
    seed: u64,
    count: usize,
    train_count: usize,
    root: &Path,
    threads: usize,
) -> Result<DatasetManifest> {
    assert!(train_count <= count, "train split larger than dataset");
    fs::create_dir_all(root)?;
    let workers = threads.max(1).min(count.max(1));
    if workers <= 1 {
        for frame in 0..count as u32 {
            save_scene(&generate_scene(cfg, grid, seed, frame), root)?;
        }
    } else {
        std::thread::scope(|s| -> Result<()> {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    s.spawn(move || -> Result<()> {
                        let mut frame = w;
                        while frame < count {
                            save_scene(&generate_scene(cfg, grid, seed, frame as u32), root)?;
                            frame += workers;
                        }
                        Ok(())
                    })
                })
                .collect();
            for h in handles {
                h.join().expect("dataset worker panicked")?;
            }
            Ok(())
        })?;
    }
    let (train, val): (Vec<u32>, Vec<u32>) =
        (0..count as u32).partition(|&f| (f as usize) < train_count);
    let manifest = DatasetManifest {
        classes: crate::geometry::CLASSES.iter().map(|c| c.name().to_string()).collect(),
        grid: grid.clone(),
        image_width: cfg.image_width,
        image_height: cfg.image_height,
        train,
        val,
    };
    save_manifest(&manifest, root)?;
    Ok(manifest)
}
