//! Stand-in for the roadside LiDAR detector: noisy 2D-pose detections from
//! ground truth, corner-to-pose conversion, oriented-box IoU, average
//! precision scoring and detection-log replay.

use std::f64::consts::{PI, TAU};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::VehicleState;
use crate::geom::{wrap_angle, wrap_orientation, OrientedBox, Point2};
use crate::road_map::Region;
use crate::v2x::AgentId;

/// One detected box: estimated 2D pose plus dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub length: f64,
    pub width: f64,
    pub t: f64,
}

impl Detection {
    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn as_box(&self) -> OrientedBox {
        OrientedBox::new(self.position(), self.psi, self.length, self.width)
    }
}

/// Detection plus the confidence used by the AP machinery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredDetection {
    pub detection: Detection,
    pub score: f64,
}

/// Failure-mode parameters of the detection oracle.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    /// Per-axis Gaussian position noise, meters.
    pub sigma_pos: f64,
    /// Gaussian heading noise, radians.
    pub sigma_psi: f64,
    /// Miss probability per true object per frame.
    pub p_fn: f64,
    /// Expected false positives per frame (Poisson).
    pub fp_rate: f64,
    /// Where false positives may appear.
    pub fp_region: Region,
    pub seed: u64,
}

impl NoiseModel {
    /// Perfect detector.
    pub fn noiseless(fp_region: Region, seed: u64) -> Self {
        NoiseModel {
            sigma_pos: 0.0,
            sigma_psi: 0.0,
            p_fn: 0.0,
            fp_rate: 0.0,
            fp_region,
            seed,
        }
    }

    /// Documented "realistic LiDAR" preset: 2 cm position noise, 3 degree
    /// heading noise, 2% misses, 0.05 false positives per frame. These are
    /// repository calibration values, not measurements.
    pub fn lidar_preset(fp_region: Region, seed: u64) -> Self {
        NoiseModel {
            sigma_pos: 0.02,
            sigma_psi: 3.0_f64.to_radians(),
            p_fn: 0.02,
            fp_rate: 0.05,
            fp_region,
            seed,
        }
    }
}

/// Ground truth for one sensing instant.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFrame {
    pub t: f64,
    pub vehicles: Vec<TruthVehicle>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthVehicle {
    pub id: AgentId,
    pub state: VehicleState,
    pub length: f64,
    pub width: f64,
    pub is_cav: bool,
}

impl TruthVehicle {
    pub fn as_box(&self) -> OrientedBox {
        OrientedBox::new(self.state.position(), self.state.psi, self.length, self.width)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PerceptionError {
    #[error("corner set is degenerate (zero area)")]
    DegenerateCorners,
    #[error("corners deviate from a rectangle by more than 5% side length")]
    NotARectangle,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("detection log line {line}: {msg}")]
    LogParse { line: usize, msg: String },
    #[error("detection log line {line}: frame times must increase")]
    OutOfOrderFrames { line: usize },
    #[error("detections and truth have different frame counts ({0} vs {1})")]
    FrameCountMismatch(usize, usize),
}

/// Default footprint given to false-positive detections.
const FP_LENGTH: f64 = 0.30;
const FP_WIDTH: f64 = 0.15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn frame_rng(seed: u64, t: f64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(t.to_bits())))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0, 1]
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Senses one ground-truth frame. Deterministic in
/// `(frame, noise, coverage)` including the embedded seed.
///
/// Vehicles outside `coverage` are never reported. Each covered vehicle is
/// missed with probability `p_fn`, otherwise reported with Gaussian pose
/// noise (the 2D offset is clipped at `6 * sigma_pos`). A Poisson number
/// of false positives is placed uniformly in the false-positive region.
pub fn sense_scored(
    frame: &GroundTruthFrame,
    noise: &NoiseModel,
    coverage: &Region,
) -> Vec<ScoredDetection> {
    let mut rng = frame_rng(noise.seed, frame.t);
    let mut out = Vec::new();
    for v in &frame.vehicles {
        let pos = v.state.position();
        let miss: f64 = rng.gen();
        if !coverage.contains(pos) {
            continue;
        }
        if miss < noise.p_fn {
            continue;
        }
        let mut dx = gaussian(&mut rng) * noise.sigma_pos;
        let mut dy = gaussian(&mut rng) * noise.sigma_pos;
        let r = dx.hypot(dy);
        let clip = 6.0 * noise.sigma_pos;
        if r > clip && r > 0.0 {
            dx *= clip / r;
            dy *= clip / r;
        }
        let dpsi = (gaussian(&mut rng) * noise.sigma_psi)
            .clamp(-6.0 * noise.sigma_psi, 6.0 * noise.sigma_psi);
        let err = dx.hypot(dy);
        let score = if noise.sigma_pos > 0.0 {
            1.0 - err / clip
        } else {
            1.0
        };
        out.push(ScoredDetection {
            detection: Detection {
                x: v.state.x + dx,
                y: v.state.y + dy,
                psi: wrap_angle(v.state.psi + dpsi),
                length: v.length,
                width: v.width,
                t: frame.t,
            },
            score,
        });
    }
    // false positives
    let n_fp = poisson(&mut rng, noise.fp_rate);
    let (lo, hi) = noise.fp_region.polygon.bbox();
    for _ in 0..n_fp {
        let mut p = Point2::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0);
        for _ in 0..1000 {
            let cand = Point2::new(rng.gen_range(lo.x..=hi.x), rng.gen_range(lo.y..=hi.y));
            if noise.fp_region.contains(cand) {
                p = cand;
                break;
            }
        }
        let psi = rng.gen_range(-PI..PI);
        let score: f64 = rng.gen();
        out.push(ScoredDetection {
            detection: Detection {
                x: p.x,
                y: p.y,
                psi,
                length: FP_LENGTH,
                width: FP_WIDTH,
                t: frame.t,
            },
            score,
        });
    }
    out
}

/// [`sense_scored`] without the confidences.
pub fn sense(frame: &GroundTruthFrame, noise: &NoiseModel, coverage: &Region) -> Vec<Detection> {
    sense_scored(frame, noise, coverage)
        .into_iter()
        .map(|d| d.detection)
        .collect()
}

fn poisson(rng: &mut ChaCha8Rng, rate: f64) -> usize {
    let l = (-rate).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        k += 1;
        p *= rng.gen::<f64>();
        if p <= l {
            return k - 1;
        }
        if k > 10_000 {
            return k - 1; // rate would have to be absurd
        }
    }
}

/// Converts four ordered box corners into a center/heading/extent tuple.
/// The heading is the orientation of the longer side wrapped to
/// `(-pi/2, pi/2]`, and `length >= width`.
pub fn corners_to_pose(corners: &[Point2; 4]) -> Result<OrientedBox, PerceptionError> {
    let center = (corners[0] + corners[1] + corners[2] + corners[3]) * 0.25;
    let e: Vec<Point2> = (0..4)
        .map(|i| corners[(i + 1) % 4] - corners[i])
        .collect();
    // shoelace over the quad
    let mut area = 0.0;
    for i in 0..4 {
        area += corners[i].cross(corners[(i + 1) % 4]);
    }
    if area.abs() / 2.0 < 1e-12 {
        return Err(PerceptionError::DegenerateCorners);
    }
    let pair_a = (e[0].norm(), e[2].norm()); // opposite sides
    let pair_b = (e[1].norm(), e[3].norm());
    for (l1, l2) in [pair_a, pair_b] {
        let mean = (l1 + l2) / 2.0;
        if mean <= 0.0 || (l1 - l2).abs() / mean > 0.05 {
            return Err(PerceptionError::NotARectangle);
        }
    }
    let len_a = (pair_a.0 + pair_a.1) / 2.0;
    let len_b = (pair_b.0 + pair_b.1) / 2.0;
    // average the opposite (anti-parallel) edge directions
    let dir_a = e[0] - e[2];
    let dir_b = e[1] - e[3];
    let (length, width, dir) = if len_a >= len_b {
        (len_a, len_b, dir_a)
    } else {
        (len_b, len_a, dir_b)
    };
    let psi = wrap_orientation(dir.y.atan2(dir.x));
    Ok(OrientedBox::new(center, psi, length, width))
}

/// Exact intersection-over-union of two oriented boxes.
pub fn oriented_iou(a: &Detection, b: &Detection) -> f64 {
    box_iou(&a.as_box(), &b.as_box())
}

pub fn box_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Single-class average precision at each IoU threshold.
///
/// Matching is greedy per frame in descending score order; the
/// precision-recall curve is integrated with all-point interpolation.
/// Empty ground truth yields AP 0 with a warning.
pub fn evaluate_ap(
    detections: &[Vec<ScoredDetection>],
    truth: &[GroundTruthFrame],
    iou_thresholds: &[f64],
) -> Result<Vec<f64>, PerceptionError> {
    if detections.len() != truth.len() {
        return Err(PerceptionError::FrameCountMismatch(
            detections.len(),
            truth.len(),
        ));
    }
    let total_truth: usize = truth.iter().map(|f| f.vehicles.len()).sum();
    if total_truth == 0 {
        if detections.iter().any(|d| !d.is_empty()) {
            log::warn!("evaluate_ap: no ground truth but detections present; AP = 0");
        }
        return Ok(vec![0.0; iou_thresholds.len()]);
    }

    // flatten and order by descending score, stable on (frame, index)
    let mut order: Vec<(usize, usize, f64)> = Vec::new();
    for (fi, frame) in detections.iter().enumerate() {
        for (di, d) in frame.iter().enumerate() {
            order.push((fi, di, d.score));
        }
    }
    order.sort_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    let truth_boxes: Vec<Vec<OrientedBox>> = truth
        .iter()
        .map(|f| f.vehicles.iter().map(|v| v.as_box()).collect())
        .collect();

    let mut aps = Vec::with_capacity(iou_thresholds.len());
    for &tau in iou_thresholds {
        let mut used: Vec<Vec<bool>> = truth_boxes.iter().map(|f| vec![false; f.len()]).collect();
        let mut tp_flags = Vec::with_capacity(order.len());
        for &(fi, di, _) in &order {
            let dbox = detections[fi][di].detection.as_box();
            let mut best: Option<(usize, f64)> = None;
            for (ti, tbox) in truth_boxes[fi].iter().enumerate() {
                if used[fi][ti] {
                    continue;
                }
                let iou = box_iou(&dbox, tbox);
                if iou >= tau && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((ti, iou));
                }
            }
            match best {
                Some((ti, _)) => {
                    used[fi][ti] = true;
                    tp_flags.push(true);
                }
                None => tp_flags.push(false),
            }
        }
        aps.push(ap_from_flags(&tp_flags, total_truth));
    }
    Ok(aps)
}

fn ap_from_flags(tp_flags: &[bool], total_truth: usize) -> f64 {
    let n = tp_flags.len();
    if n == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut cum_tp = 0usize;
    for (i, &tp) in tp_flags.iter().enumerate() {
        if tp {
            cum_tp += 1;
        }
        precision.push(cum_tp as f64 / (i + 1) as f64);
        recall.push(cum_tp as f64 / total_truth as f64);
    }
    // precision envelope (monotone from the right)
    for i in (0..n - 1).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    ap
}

/// One replayed frame of a detection log.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFrame {
    pub t: f64,
    pub detections: Vec<ScoredDetection>,
}

/// Reads a detection log. Format: `frame <t> <count>` header lines, each
/// followed by `count` lines of `x y psi length width score`. Frame times
/// must be strictly increasing; `#` lines are comments.
pub fn replay_log(path: impl AsRef<Path>) -> Result<Vec<DetectionFrame>, PerceptionError> {
    let file = std::fs::File::open(path)?;
    parse_log(std::io::BufReader::new(file))
}

pub fn parse_log(reader: impl BufRead) -> Result<Vec<DetectionFrame>, PerceptionError> {
    let mut frames: Vec<DetectionFrame> = Vec::new();
    let mut pending: usize = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if pending == 0 {
            if fields.len() != 3 || fields[0] != "frame" {
                return Err(PerceptionError::LogParse {
                    line: lineno,
                    msg: "expected `frame <t> <count>`".into(),
                });
            }
            let t: f64 = fields[1].parse().map_err(|e| PerceptionError::LogParse {
                line: lineno,
                msg: format!("bad frame time: {e}"),
            })?;
            let count: usize = fields[2].parse().map_err(|e| PerceptionError::LogParse {
                line: lineno,
                msg: format!("bad detection count: {e}"),
            })?;
            if let Some(last) = frames.last() {
                if t <= last.t {
                    return Err(PerceptionError::OutOfOrderFrames { line: lineno });
                }
            }
            frames.push(DetectionFrame {
                t,
                detections: Vec::with_capacity(count),
            });
            pending = count;
        } else {
            if fields.len() != 6 {
                return Err(PerceptionError::LogParse {
                    line: lineno,
                    msg: "expected 6 fields: x y psi length width score".into(),
                });
            }
            let mut vals = [0.0f64; 6];
            for (i, f) in fields.iter().enumerate() {
                vals[i] = f.parse().map_err(|e| PerceptionError::LogParse {
                    line: lineno,
                    msg: format!("bad number `{f}`: {e}"),
                })?;
            }
            let frame = frames.last_mut().unwrap();
            frame.detections.push(ScoredDetection {
                detection: Detection {
                    x: vals[0],
                    y: vals[1],
                    psi: vals[2],
                    length: vals[3],
                    width: vals[4],
                    t: frame.t,
                },
                score: vals[5],
            });
            pending -= 1;
        }
    }
    if pending != 0 {
        return Err(PerceptionError::LogParse {
            line: 0,
            msg: format!("log truncated: {pending} detection lines missing"),
        });
    }
    Ok(frames)
}

/// Writes frames in the format [`replay_log`] reads. Floats use the
/// shortest round-trippable form, so a write/read cycle is lossless.
pub fn write_log(frames: &[DetectionFrame], mut w: impl Write) -> std::io::Result<()> {
    for f in frames {
        writeln!(w, "frame {:?} {}", f.t, f.detections.len())?;
        for d in &f.detections {
            writeln!(
                w,
                "{:?} {:?} {:?} {:?} {:?} {:?}",
                d.detection.x, d.detection.y, d.detection.psi, d.detection.length,
                d.detection.width, d.score
            )?;
        }
    }
    Ok(())
}
