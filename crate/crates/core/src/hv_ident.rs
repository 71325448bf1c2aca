//! Isolates human-driven vehicles from raw infrastructure detections.
//!
//! Three steps per management tick: (1) drop detections that match a
//! connected vehicle's broadcast position, (2) drop detections that match
//! no remembered HV, (3) predict candidate routes for the survivors and
//! update the memory.
//!
//! Step 2 as stated can never acquire the first HV, so an explicit
//! bootstrap exists: while the memory is completely empty, a detection
//! near an entry route that persists at a consistent position for two
//! consecutive ticks is admitted as a new HV.

use crate::geom::Point2;
use crate::perception::Detection;
use crate::road_map::{PathRef, RoadGraph};
use crate::v2x::CavMessage;

/// Distance gates, meters. Read from the scenario file.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct HvThresholds {
    /// A detection closer than this to a broadcast position is a CAV.
    pub tau_cav: f64,
    /// A detection farther than this from every remembered HV is a false
    /// positive.
    pub tau_fp: f64,
    /// Candidate routes farther than this from the HV pose are discarded.
    pub tau_p: f64,
    /// How long an unmatched HV survives in memory, seconds.
    pub grace: f64,
}

impl Default for HvThresholds {
    fn default() -> Self {
        HvThresholds {
            tau_cav: 0.135,
            tau_fp: 0.135,
            tau_p: 0.20,
            grace: 0.5,
        }
    }
}

/// A tracked human-driven vehicle with its route hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct HvEstimate {
    pub track_id: u32,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub candidate_paths: Vec<PathRef>,
    pub first_seen: f64,
    pub last_seen: f64,
}

impl HvEstimate {
    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

/// A bootstrap candidate seen once, awaiting its second consistent frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingHv {
    pub x: f64,
    pub y: f64,
    pub first_seen: f64,
}

impl PendingHv {
    fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

/// Tracker state carried between ticks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HvMemory {
    pub estimates: Vec<HvEstimate>,
    pub pending: Vec<PendingHv>,
    next_track_id: u32,
}

impl HvMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Memory preloaded with rows, e.g. for replaying a known tracker
    /// state. Track ids for later acquisitions continue past the rows.
    pub fn with_rows(estimates: Vec<HvEstimate>, pending: Vec<PendingHv>) -> Self {
        let next_track_id = estimates.iter().map(|e| e.track_id + 1).max().unwrap_or(0);
        HvMemory {
            estimates,
            pending,
            next_track_id,
        }
    }

    /// True when nothing is tracked or pending (bootstrap mode).
    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty() && self.pending.is_empty()
    }
}

/// Step 1: removes every detection strictly closer than `tau_cav` to some
/// broadcast CAV position. Survivor order is preserved; with no messages
/// at all everything survives.
pub fn filter_cavs(
    detections: &[Detection],
    cav_messages: &[CavMessage],
    tau_cav: f64,
) -> Vec<Detection> {
    detections
        .iter()
        .filter(|d| {
            cav_messages
                .iter()
                .all(|m| d.position().dist(m.position()) >= tau_cav)
        })
        .copied()
        .collect()
}

/// Step 2: keeps a detection iff it is strictly closer than `tau_fp` to
/// some remembered HV (tracked or pending). With a completely empty
/// memory every detection is retained so the tracker can bootstrap.
pub fn reject_fps(detections: &[Detection], memory: &HvMemory, tau_fp: f64) -> Vec<Detection> {
    if memory.is_empty() {
        return detections.to_vec();
    }
    detections
        .iter()
        .filter(|d| {
            let p = d.position();
            memory
                .estimates
                .iter()
                .map(|e| e.position())
                .chain(memory.pending.iter().map(|e| e.position()))
                .any(|q| p.dist(q) < tau_fp)
        })
        .copied()
        .collect()
}

/// Greedy one-to-one matching over all pairs below `gate`, by ascending
/// distance; ties broken by lower detection index, then lower row index.
/// Returns `row_of[det_index]`.
fn associate(dets: &[Detection], rows: &[Point2], gate: f64) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, r) in rows.iter().enumerate() {
            let dist = d.position().dist(*r);
            if dist < gate {
                pairs.push((dist, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut det_match = vec![None; dets.len()];
    let mut row_used = vec![false; rows.len()];
    for (_, i, j) in pairs {
        if det_match[i].is_none() && !row_used[j] {
            det_match[i] = Some(j);
            row_used[j] = true;
        }
    }
    det_match
}

/// Step 3 plus memory update: associates surviving detections with
/// remembered HVs, prunes candidate routes against `tau_p`, confirms
/// pending bootstrap candidates and ages out unmatched rows.
pub fn predict_paths(
    hv_detections: &[Detection],
    graph: &RoadGraph,
    memory: &HvMemory,
    thresholds: &HvThresholds,
    t: f64,
) -> (Vec<HvEstimate>, HvMemory) {
    let bootstrap = memory.is_empty();
    let est_rows: Vec<Point2> = memory.estimates.iter().map(|e| e.position()).collect();
    let est_match = associate(hv_detections, &est_rows, thresholds.tau_fp);

    // unmatched detections get a shot at the pending candidates
    let leftovers: Vec<usize> = (0..hv_detections.len())
        .filter(|&i| est_match[i].is_none())
        .collect();
    let leftover_dets: Vec<Detection> = leftovers.iter().map(|&i| hv_detections[i]).collect();
    let pend_rows: Vec<Point2> = memory.pending.iter().map(|p| p.position()).collect();
    let pend_match = associate(&leftover_dets, &pend_rows, thresholds.tau_fp);

    let mut next_track_id = memory.next_track_id;
    let mut outputs: Vec<(usize, HvEstimate)> = Vec::new();
    let mut new_pending: Vec<PendingHv> = Vec::new();

    for (i, det) in hv_detections.iter().enumerate() {
        if let Some(j) = est_match[i] {
            let prev = &memory.estimates[j];
            let kept: Vec<PathRef> = prev
                .candidate_paths
                .iter()
                .filter(|p| p.distance_to(det.position()) <= thresholds.tau_p)
                .cloned()
                .collect();
            outputs.push((
                i,
                HvEstimate {
                    track_id: prev.track_id,
                    x: det.x,
                    y: det.y,
                    psi: det.psi,
                    candidate_paths: kept,
                    first_seen: prev.first_seen,
                    last_seen: t,
                },
            ));
            continue;
        }
        let li = leftovers.iter().position(|&k| k == i).unwrap();
        if let Some(pj) = pend_match[li] {
            // second consistent frame: admit as a new HV
            let pend = &memory.pending[pj];
            let candidates = graph.candidate_paths_from_entry(det.position(), thresholds.tau_p);
            outputs.push((
                i,
                HvEstimate {
                    track_id: next_track_id,
                    x: det.x,
                    y: det.y,
                    psi: det.psi,
                    candidate_paths: candidates,
                    first_seen: pend.first_seen,
                    last_seen: t,
                },
            ));
            next_track_id += 1;
            continue;
        }
        if bootstrap {
            // first sighting: remember it if it lies on some entry route
            let near_entry = !graph
                .candidate_paths_from_entry(det.position(), thresholds.tau_p)
                .is_empty();
            if near_entry {
                new_pending.push(PendingHv {
                    x: det.x,
                    y: det.y,
                    first_seen: t,
                });
            }
        }
        // otherwise: within the FP gate of a row somebody else claimed, and
        // unmatched everywhere -> removed
    }

    let estimates: Vec<HvEstimate> = outputs.iter().map(|(_, e)| e.clone()).collect();

    // memory update: fresh outputs plus unmatched rows inside the grace
    // window, ordered by track id
    let matched_rows: Vec<usize> = est_match.iter().flatten().copied().collect();
    let mut mem_estimates: Vec<HvEstimate> = estimates.clone();
    for (j, prev) in memory.estimates.iter().enumerate() {
        if !matched_rows.contains(&j) && t - prev.last_seen <= thresholds.grace + 1e-9 {
            mem_estimates.push(prev.clone());
        }
    }
    mem_estimates.sort_by_key(|e| e.track_id);

    (
        estimates,
        HvMemory {
            estimates: mem_estimates,
            pending: new_pending,
            next_track_id,
        },
    )
}

/// The full identification pipeline for one tick: CAV filtering, FP
/// rejection, path prediction and memory update. Returns the estimates
/// for time `t` and the updated memory.
pub fn identify_hvs(
    detections: &[Detection],
    cav_messages: &[CavMessage],
    memory: &HvMemory,
    thresholds: &HvThresholds,
    graph: &RoadGraph,
    t: f64,
) -> (Vec<HvEstimate>, HvMemory) {
    let step1 = filter_cavs(detections, cav_messages, thresholds.tau_cav);
    let step2 = reject_fps(&step1, memory, thresholds.tau_fp);
    predict_paths(&step2, graph, memory, thresholds, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::VehicleState;
    use crate::v2x::make_cav_message;

    fn det(x: f64, y: f64, t: f64) -> Detection {
        Detection {
            x,
            y,
            psi: 0.0,
            length: 0.30,
            width: 0.15,
            t,
        }
    }

    fn cav_msg(x: f64, y: f64, id: u32) -> CavMessage {
        let state = VehicleState::new(x, y, 0.0, 0.2);
        let path = PathRef::trivial(Point2::new(x, y));
        make_cav_message(&state, &path, id, 0.0)
    }

    /// Small map: approach from the south forking into a straight and a
    /// left exit through a square region around the origin.
    fn mini_graph() -> RoadGraph {
        let text = "\
roadmap v1
[nodes]
0 0.0 -2.0
1 0.0 -0.6
2 0.0 2.0
3 -2.0 0.0
[segments]
0 0 1 0.0 -2.0 0.0 -1.5 0.0 -1.0 0.0 -0.6
1 1 2 0.0 -0.6 0.0 0.0 0.0 0.7 0.0 1.4 0.0 2.0
2 1 3 0.0 -0.6 0.0 -0.3 -0.12 -0.05 -0.35 0.0 -1.0 0.0 -1.5 0.0 -2.0 0.0
[regions]
intersection -0.5 -0.5 0.5 -0.5 0.5 0.5 -0.5 0.5
";
        RoadGraph::parse(text).unwrap()
    }

    fn memory_with(estimates: Vec<HvEstimate>) -> HvMemory {
        HvMemory {
            estimates,
            pending: Vec::new(),
            next_track_id: 100,
        }
    }

    fn estimate(track_id: u32, x: f64, y: f64, cands: Vec<PathRef>, seen: f64) -> HvEstimate {
        HvEstimate {
            track_id,
            x,
            y,
            psi: 0.0,
            candidate_paths: cands,
            first_seen: seen,
            last_seen: seen,
        }
    }

    #[test]
    fn filter_removes_close_keeps_boundary() {
        let dets = vec![det(0.0, 0.0, 0.0), det(1.0, 0.0, 0.0), det(0.135, 0.0, 0.0)];
        let msgs = vec![cav_msg(0.10, 0.0, 1)];
        let out = filter_cavs(&dets, &msgs, 0.135);
        // first is 0.10 m away -> removed; third is exactly 0.135 from
        // (0.10, 0) minus... compute: |0.135-0.10| = 0.035 -> removed too
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].x, 1.0);

        // exact boundary: strict inequality keeps it
        let msgs = vec![cav_msg(0.0, 0.0, 1)];
        let dets = vec![det(0.135, 0.0, 0.0)];
        assert_eq!(filter_cavs(&dets, &msgs, 0.135).len(), 1);
    }

    #[test]
    fn filter_no_messages_keeps_all() {
        let dets = vec![det(0.0, 0.0, 0.0), det(1.0, 1.0, 0.0)];
        assert_eq!(filter_cavs(&dets, &[], 0.135).len(), 2);
    }

    #[test]
    fn reject_keeps_near_previous_hv() {
        let mem = memory_with(vec![estimate(0, 0.0, 0.0, vec![], 0.0)]);
        let dets = vec![det(0.05, 0.0, 0.1), det(0.50, 0.0, 0.1)];
        let out = reject_fps(&dets, &mem, 0.135);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].x, 0.05);
    }

    #[test]
    fn reject_bootstrap_retains_all() {
        let mem = HvMemory::new();
        let dets = vec![det(0.3, -0.7, 0.0)];
        assert_eq!(reject_fps(&dets, &mem, 0.135).len(), 1);
    }

    #[test]
    fn step_order_is_cav_first() {
        // detection near both a CAV message and a previous HV: step 1 wins
        let g = mini_graph();
        let mem = memory_with(vec![estimate(0, 0.0, -1.0, vec![], 0.0)]);
        let dets = vec![det(0.02, -1.0, 0.1)];
        let msgs = vec![cav_msg(0.0, -1.0, 1)];
        let (out, _) = identify_hvs(&dets, &msgs, &mem, &HvThresholds::default(), &g, 0.1);
        assert!(out.is_empty());
    }

    #[test]
    fn bootstrap_two_frame_confirmation() {
        let g = mini_graph();
        let thr = HvThresholds::default();
        let mem = HvMemory::new();

        // frame 1: on the approach lane, nearest node behind it so the
        // entry routes pass through the detection; seeded as pending
        let dets1 = vec![det(0.0, -1.5, 0.0)];
        let (out1, mem1) = identify_hvs(&dets1, &[], &mem, &thr, &g, 0.0);
        assert!(out1.is_empty());
        assert_eq!(mem1.pending.len(), 1);

        // frame 2: consistent position -> confirmed with candidates
        let dets2 = vec![det(0.0, -1.45, 0.1)];
        let (out2, mem2) = identify_hvs(&dets2, &[], &mem1, &thr, &g, 0.1);
        assert_eq!(out2.len(), 1);
        assert_eq!(out2[0].first_seen, 0.0);
        assert_eq!(out2[0].candidate_paths.len(), 2); // straight + left
        assert_eq!(mem2.estimates.len(), 1);
        assert!(mem2.pending.is_empty());
    }

    #[test]
    fn bootstrap_requires_entry_route() {
        let g = mini_graph();
        let thr = HvThresholds::default();
        // far from every route: never seeded
        let dets = vec![det(1.8, 1.8, 0.0)];
        let (out, mem1) = identify_hvs(&dets, &[], &HvMemory::new(), &thr, &g, 0.0);
        assert!(out.is_empty());
        assert!(mem1.pending.is_empty());
    }

    #[test]
    fn pending_dies_without_second_frame() {
        let g = mini_graph();
        let thr = HvThresholds::default();
        let dets1 = vec![det(0.0, -1.5, 0.0)];
        let (_, mem1) = identify_hvs(&dets1, &[], &HvMemory::new(), &thr, &g, 0.0);
        assert_eq!(mem1.pending.len(), 1);
        // nothing in frame 2
        let (_, mem2) = identify_hvs(&[], &[], &mem1, &thr, &g, 0.1);
        assert!(mem2.is_empty());
    }

    #[test]
    fn tracked_candidates_prune_monotonically() {
        let g = mini_graph();
        let thr = HvThresholds::default();
        let straight = g.path_from_segments(&[0, 1]).unwrap();
        let left = g.path_from_segments(&[0, 2]).unwrap();
        let mem = memory_with(vec![estimate(
            3,
            -0.25,
            -0.1,
            vec![straight.clone(), left.clone()],
            0.0,
        )]);
        // drifted further left: the straight route is now > tau_p away
        let dets = vec![det(-0.33, -0.01, 0.1)];
        let (out, _) = identify_hvs(&dets, &[], &mem, &thr, &g, 0.1);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].track_id, 3);
        assert_eq!(out[0].candidate_paths.len(), 1);
        assert_eq!(out[0].candidate_paths[0].segment_ids(), left.segment_ids());
        assert!(straight.distance_to(Point2::new(-0.33, -0.01)) > thr.tau_p);
    }

    #[test]
    fn memory_ages_out_after_grace() {
        let g = mini_graph();
        let thr = HvThresholds::default();
        let mem = memory_with(vec![estimate(7, 0.0, 0.0, vec![], 1.0)]);
        // five ticks of dropout: still remembered
        let mut m = mem;
        for k in 1..=5 {
            let (out, next) = identify_hvs(&[], &[], &m, &thr, &g, 1.0 + 0.1 * k as f64);
            assert!(out.is_empty());
            m = next;
            assert_eq!(m.estimates.len(), 1, "dropped too early at tick {k}");
        }
        // sixth tick: gone
        let (_, m6) = identify_hvs(&[], &[], &m, &thr, &g, 1.6);
        assert!(m6.estimates.is_empty());
    }

    #[test]
    fn dropout_then_reacquire_keeps_track() {
        let g = mini_graph();
        let thr = HvThresholds::default();
        let mem = memory_with(vec![estimate(7, 0.0, -0.3, vec![], 1.0)]);
        let (_, m1) = identify_hvs(&[], &[], &mem, &thr, &g, 1.1);
        let dets = vec![det(0.0, -0.25, 1.2)];
        let (out, m2) = identify_hvs(&dets, &[], &m1, &thr, &g, 1.2);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].track_id, 7);
        assert_eq!(m2.estimates.len(), 1);
        assert_eq!(m2.estimates[0].last_seen, 1.2);
    }

    #[test]
    fn association_tie_breaks_by_lower_index() {
        let g = mini_graph();
        let thr = HvThresholds::default();
        let mem = memory_with(vec![estimate(1, 0.0, 0.0, vec![], 0.0)]);
        // two detections exactly equidistant from the single row
        let dets = vec![det(0.05, 0.0, 0.1), det(-0.05, 0.0, 0.1)];
        let (out, _) = identify_hvs(&dets, &[], &mem, &thr, &g, 0.1);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].x, 0.05); // detection 0 won the tie
    }

    #[test]
    fn losers_of_association_are_removed() {
        let g = mini_graph();
        let thr = HvThresholds::default();
        let mem = memory_with(vec![estimate(1, 0.0, -0.3, vec![], 0.0)]);
        // both within tau_fp of the same row; nearest is associated, the
        // other has no other row and is removed
        let dets = vec![det(0.0, -0.33, 0.1), det(0.0, -0.20, 0.1)];
        let (out, mem2) = identify_hvs(&dets, &[], &mem, &thr, &g, 0.1);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].y, -0.33);
        assert_eq!(mem2.estimates.len(), 1);
    }

    #[test]
    fn outputs_use_input_poses_only() {
        let g = mini_graph();
        let thr = HvThresholds::default();
        let mem = memory_with(vec![estimate(1, 0.1, -0.4, vec![], 0.0)]);
        let dets = vec![det(0.12, -0.38, 0.1)];
        let (out, _) = identify_hvs(&dets, &[], &mem, &thr, &g, 0.1);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].x, out[0].y), (0.12, -0.38));
    }

    #[test]
    fn removing_cav_detection_does_not_change_output() {
        let g = mini_graph();
        let thr = HvThresholds::default();
        let mem = memory_with(vec![estimate(1, 0.0, -0.3, vec![], 0.0)]);
        let msgs = vec![cav_msg(0.3, 0.3, 9)];
        let hv_det = det(0.0, -0.28, 0.1);
        let cav_det = det(0.31, 0.3, 0.1); // within tau_cav of its message
        let (full, _) = identify_hvs(&[hv_det, cav_det], &msgs, &mem, &thr, &g, 0.1);
        let (dropped, _) = identify_hvs(&[hv_det], &msgs, &mem, &thr, &g, 0.1);
        assert_eq!(full, dropped);
    }
}
