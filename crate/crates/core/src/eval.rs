//! Rotated-box overlap, average precision, recall, and result writers.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::config::Region;
use crate::error::{Error, Result};
use crate::geometry::{Box3D, Class, CLASSES};
use crate::scene::io::fmt_real;

// ── rotated IoU ────────────────────────────────────────────────────────

/// Area of the intersection of two convex CCW polygons
/// (Sutherland–Hodgman clipping followed by the shoelace formula).
pub fn convex_intersection_area(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let mut poly: Vec<[f64; 2]> = a.to_vec();
    for i in 0..b.len() {
        if poly.is_empty() {
            return 0.0;
        }
        let e0 = b[i];
        let e1 = b[(i + 1) % b.len()];
        // Inside = left of the directed edge e0→e1 (CCW polygon).
        let inside = |p: [f64; 2]| -> f64 {
            (e1[0] - e0[0]) * (p[1] - e0[1]) - (e1[1] - e0[1]) * (p[0] - e0[0])
        };
        let mut clipped: Vec<[f64; 2]> = Vec::with_capacity(poly.len() + 4);
        for j in 0..poly.len() {
            let cur = poly[j];
            let nxt = poly[(j + 1) % poly.len()];
            let (dc, dn) = (inside(cur), inside(nxt));
            if dc >= 0.0 {
                clipped.push(cur);
            }
            if (dc > 0.0 && dn < 0.0) || (dc < 0.0 && dn > 0.0) {
                let t = dc / (dc - dn);
                clipped.push([
                    cur[0] + t * (nxt[0] - cur[0]),
                    cur[1] + t * (nxt[1] - cur[1]),
                ]);
            }
        }
        poly = clipped;
    }
    shoelace(&poly)
}

fn shoelace(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        s += p[0] * q[1] - q[0] * p[1];
    }
    s.abs() / 2.0
}

fn corners(b: &Box3D) -> [[f64; 2]; 4] {
    b.bev_corners().map(|(x, y)| [x, y])
}

/// Bird's-eye-view IoU of two rotated boxes.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = convex_intersection_area(&corners(a), &corners(b));
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// 3D IoU: BEV intersection × vertical overlap over the union volume.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter_bev = convex_intersection_area(&corners(a), &corners(b));
    let zlo = (a.z - a.h / 2.0).max(b.z - b.h / 2.0);
    let zhi = (a.z + a.h / 2.0).min(b.z + b.h / 2.0);
    let inter = inter_bev * (zhi - zlo).max(0.0);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

// ── Monte-Carlo oracles ────────────────────────────────────────────────

fn in_bev(b: &Box3D, x: f64, y: f64) -> bool {
    let l = b.world_to_local([x, y, b.z]);
    l[0].abs() <= b.l / 2.0 && l[1].abs() <= b.w / 2.0
}

/// BEV IoU estimated by uniform sampling over the joint bounding box.
pub fn mc_bev_iou(a: &Box3D, b: &Box3D, samples: usize, rng: &mut impl Rng) -> f64 {
    let ca = corners(a);
    let cb = corners(b);
    let xs = ca.iter().chain(cb.iter()).map(|p| p[0]);
    let ys = ca.iter().chain(cb.iter()).map(|p| p[1]);
    let (x0, x1) = (xs.clone().fold(f64::MAX, f64::min), xs.fold(f64::MIN, f64::max));
    let (y0, y1) = (ys.clone().fold(f64::MAX, f64::min), ys.fold(f64::MIN, f64::max));
    let (mut na, mut nb, mut nab) = (0u64, 0u64, 0u64);
    for _ in 0..samples {
        let x = x0 + rng.gen::<f64>() * (x1 - x0);
        let y = y0 + rng.gen::<f64>() * (y1 - y0);
        let ia = in_bev(a, x, y);
        let ib = in_bev(b, x, y);
        na += ia as u64;
        nb += ib as u64;
        nab += (ia && ib) as u64;
    }
    let union = na + nb - nab;
    if union == 0 {
        0.0
    } else {
        nab as f64 / union as f64
    }
}

/// 3D IoU estimated by uniform sampling over the joint bounding volume.
pub fn mc_iou3d(a: &Box3D, b: &Box3D, samples: usize, rng: &mut impl Rng) -> f64 {
    let ca = corners(a);
    let cb = corners(b);
    let xs = ca.iter().chain(cb.iter()).map(|p| p[0]);
    let ys = ca.iter().chain(cb.iter()).map(|p| p[1]);
    let (x0, x1) = (xs.clone().fold(f64::MAX, f64::min), xs.fold(f64::MIN, f64::max));
    let (y0, y1) = (ys.clone().fold(f64::MAX, f64::min), ys.fold(f64::MIN, f64::max));
    let z0 = (a.z - a.h / 2.0).min(b.z - b.h / 2.0);
    let z1 = (a.z + a.h / 2.0).max(b.z + b.h / 2.0);
    let (mut na, mut nb, mut nab) = (0u64, 0u64, 0u64);
    for _ in 0..samples {
        let p = [
            x0 + rng.gen::<f64>() * (x1 - x0),
            y0 + rng.gen::<f64>() * (y1 - y0),
            z0 + rng.gen::<f64>() * (z1 - z0),
        ];
        let ia = a.contains(p);
        let ib = b.contains(p);
        na += ia as u64;
        nb += ib as u64;
        nab += (ia && ib) as u64;
    }
    let union = na + nb - nab;
    if union == 0 {
        0.0
    } else {
        nab as f64 / union as f64
    }
}

// ── region filter ──────────────────────────────────────────────────────

/// The near-field camera corridor: box centers with lateral offset under
/// 4 m and forward distance under 25 m of the rig.
pub fn in_region(b: &Box3D, region: Region) -> bool {
    match region {
        Region::Entire => true,
        Region::Corridor => b.y > -4.0 && b.y < 4.0 && b.x > 0.0 && b.x < 25.0,
    }
}

// ── average precision ──────────────────────────────────────────────────

/// One frame's detections (scored) and ground truth.
#[derive(Clone, Debug, Default)]
pub struct FramePair {
    pub dets: Vec<Box3D>,
    pub gts: Vec<Box3D>,
}

#[derive(Clone, Debug)]
pub struct ClassEval {
    pub class: Class,
    pub ap: f64,
    pub gt_count: usize,
    pub det_count: usize,
    /// (recall, precision) at each detection rank, for PR curves.
    pub curve: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub per_class: Vec<ClassEval>,
    /// Mean AP over classes that have ground truth.
    pub map: f64,
    pub warnings: Vec<String>,
}

/// Greedy ranked matching for one class: walk detections by descending
/// score, match each to the not-yet-matched same-frame ground truth with
/// the highest 3D IoU; a match below the threshold is a false positive.
fn class_pr(frames: &[FramePair], class: Class, iou_thresh: f64) -> (Vec<(f64, f64)>, usize, usize) {
    // (score, frame index, det index)
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    let mut gt_count = 0usize;
    for (fi, fp) in frames.iter().enumerate() {
        for (di, d) in fp.dets.iter().enumerate() {
            if d.class == class {
                ranked.push((d.score.expect("detection without score"), fi, di));
            }
        }
        gt_count += fp.gts.iter().filter(|g| g.class == class).count();
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut matched: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gts.len()]).collect();
    let mut curve = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp_count) = (0usize, 0usize);
    for &(_, fi, di) in &ranked {
        let det = &frames[fi].dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in frames[fi].gts.iter().enumerate() {
            if gt.class != class || matched[fi][gi] {
                continue;
            }
            let iou = iou3d(det, gt);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou >= iou_thresh => {
                matched[fi][gi] = true;
                tp += 1;
            }
            _ => fp_count += 1,
        }
        let recall = if gt_count == 0 {
            0.0
        } else {
            tp as f64 / gt_count as f64
        };
        let precision = tp as f64 / (tp + fp_count) as f64;
        curve.push((recall, precision));
    }
    (curve, gt_count, ranked.len())
}

/// 40-point interpolated AP over recall positions 1/40 … 40/40.
pub fn average_precision(curve: &[(f64, f64)], positions: usize) -> f64 {
    if positions == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 1..=positions {
        let r = j as f64 / positions as f64;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        total += p;
    }
    total / positions as f64
}

/// Evaluate detections against ground truth. `iou_thresholds` is indexed
/// by class id; classes without any ground truth in `region` are skipped
/// (with a warning) rather than dragging the mean to zero.
pub fn evaluate(
    frames: &[FramePair],
    iou_thresholds: &[f64; 4],
    region: Region,
    recall_positions: usize,
) -> EvalSummary {
    let filtered: Vec<FramePair> = frames
        .iter()
        .map(|f| FramePair {
            dets: f.dets.iter().filter(|b| in_region(b, region)).cloned().collect(),
            gts: f.gts.iter().filter(|b| in_region(b, region)).cloned().collect(),
        })
        .collect();

    let mut per_class = Vec::new();
    let mut warnings = Vec::new();
    let mut ap_sum = 0.0;
    let mut ap_n = 0usize;
    for &class in CLASSES.iter() {
        let (curve, gt_count, det_count) =
            class_pr(&filtered, class, iou_thresholds[class.id()]);
        if gt_count == 0 {
            warnings.push(format!(
                "class {} has no ground truth in region {}; excluded from mAP",
                class.name(),
                region.as_str()
            ));
            continue;
        }
        let ap = average_precision(&curve, recall_positions);
        ap_sum += ap;
        ap_n += 1;
        per_class.push(ClassEval {
            class,
            ap,
            gt_count,
            det_count,
            curve,
        });
    }
    EvalSummary {
        per_class,
        map: if ap_n == 0 { 0.0 } else { ap_sum / ap_n as f64 },
        warnings,
    }
}

/// Fraction of ground-truth boxes covered by at least one proposal at
/// the given 3D IoU, class-agnostic.
pub fn proposal_recall(frames: &[FramePair], iou_thresh: f64) -> f64 {
    let (mut covered, mut total) = (0usize, 0usize);
    for f in frames {
        for gt in &f.gts {
            total += 1;
            if f.dets.iter().any(|p| iou3d(p, gt) >= iou_thresh) {
                covered += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        covered as f64 / total as f64
    }
}

// ── detection file IO ──────────────────────────────────────────────────

/// One detection per line: `class score x y z l w h yaw`.
pub fn save_detections(path: &Path, dets: &[Box3D]) -> Result<()> {
    let mut body = String::new();
    for d in dets {
        let score = d.score.expect("detection without score");
        body.push_str(&format!(
            "{} {} {} {} {} {} {} {} {}\n",
            d.class.name(),
            fmt_real(score),
            fmt_real(d.x),
            fmt_real(d.y),
            fmt_real(d.z),
            fmt_real(d.l),
            fmt_real(d.w),
            fmt_real(d.h),
            fmt_real(d.yaw),
        ));
    }
    atomic_write(path, body.as_bytes())
}

pub fn load_detections(path: &Path) -> Result<Vec<Box3D>> {
    let body = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 9 {
            return Err(Error::format(
                path.display(),
                format!("line {}: expected 9 fields, got {}", ln + 1, toks.len()),
            ));
        }
        let class = Class::from_name(toks[0]).ok_or_else(|| {
            Error::format(path.display(), format!("line {}: unknown class {}", ln + 1, toks[0]))
        })?;
        let mut vals = [0.0; 8];
        for (i, t) in toks[1..].iter().enumerate() {
            vals[i] = t.parse::<f64>().map_err(|e| {
                Error::format(path.display(), format!("line {}: {e}", ln + 1))
            })?;
        }
        let [score, x, y, z, l, w, h, yaw] = vals;
        out.push(Box3D::new(x, y, z, l, w, h, yaw, class).with_score(score));
    }
    Ok(out)
}

// ── report writers ─────────────────────────────────────────────────────

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// `metrics.csv`: one row per evaluated class plus an mAP row.
pub fn write_metrics_csv(path: &Path, summary: &EvalSummary) -> Result<()> {
    let mut body = String::from("class,ap,gt_count,det_count\n");
    for c in &summary.per_class {
        body.push_str(&format!(
            "{},{:.6},{},{}\n",
            c.class.name(),
            c.ap,
            c.gt_count,
            c.det_count
        ));
    }
    body.push_str(&format!("mAP,{:.6},,\n", summary.map));
    atomic_write(path, body.as_bytes())
}

/// Precision–recall curves for every evaluated class, one SVG.
pub fn write_pr_svg(path: &Path, summary: &EvalSummary) -> Result<()> {
    let (w, h, m) = (480.0, 360.0, 48.0);
    let colors = ["#c0392b", "#27ae60", "#2980b9", "#d4a017"];
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>\n",
        w - 2.0 * m,
        h - 2.0 * m
    ));
    let to_x = |r: f64| m + r * (w - 2.0 * m);
    let to_y = |p: f64| h - m - p * (h - 2.0 * m);
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{t}</text>\n",
            to_x(t),
            h - m + 16.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{t}</text>\n",
            m - 6.0,
            to_y(t) + 4.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">recall</text>\n",
        w / 2.0,
        h - 8.0
    ));
    for (i, c) in summary.per_class.iter().enumerate() {
        let color = colors[c.class.id() % colors.len()];
        let mut pts = String::from(format!("{:.1},{:.1}", to_x(0.0), to_y(1.0)));
        for &(r, p) in &c.curve {
            pts.push_str(&format!(" {:.1},{:.1}", to_x(r), to_y(p)));
        }
        s.push_str(&format!(
            "<polyline points=\"{pts}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n"
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{} AP {:.3}</text>\n",
            m + 8.0,
            m + 16.0 + 16.0 * i as f64,
            c.class.name(),
            c.ap
        ));
    }
    s.push_str("</svg>\n");
    atomic_write(path, s.as_bytes())
}
