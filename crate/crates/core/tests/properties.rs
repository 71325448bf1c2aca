//! Property tests for the geometric and numeric invariants, plus the
//! independent oracles for routing, point-to-path distance and average
//! precision.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossway_core::dynamics::{idm_velocity, predict_trajectory, IdmParams, VehicleState};
use crossway_core::geom::{OrientedBox, Point2};
use crossway_core::perception::{
    box_iou, evaluate_ap, sense_scored, GroundTruthFrame, NoiseModel, ScoredDetection,
    TruthVehicle,
};
use crossway_core::road_map::{Node, Region, RoadGraph, Segment};

fn bundled_map() -> RoadGraph {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../maps/four_way.map");
    RoadGraph::load(path).unwrap()
}

// ---------------------------------------------------------------------
// routing: Dijkstra against exhaustive path enumeration
// ---------------------------------------------------------------------

/// Random connected digraph with at most 8 nodes: a random spanning chain
/// plus extra random edges.
fn random_graph(seed: u64) -> RoadGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=8u32);
    let nodes: Vec<Node> = (0..n)
        .map(|id| Node {
            id,
            position: Point2::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)),
        })
        .collect();
    let mut segments = Vec::new();
    let mut sid = 0;
    let add = |from: u32, to: u32, sid: &mut u32, segs: &mut Vec<Segment>, nodes: &[Node]| {
        if from == to {
            return;
        }
        let a = nodes[from as usize].position;
        let b = nodes[to as usize].position;
        if a.dist(b) < 1e-6 {
            return;
        }
        // 3-point polyline with a mild detour so lengths vary
        let mid = (a + b) * 0.5 + Point2::new(0.0, 0.3);
        segs.push(Segment::new(*sid, from, to, vec![a, mid, b]));
        *sid += 1;
    };
    // chain over a shuffled node order keeps everything connected
    let mut order: Vec<u32> = (0..n).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    for w in order.windows(2) {
        add(w[0], w[1], &mut sid, &mut segments, &nodes);
    }
    for _ in 0..rng.gen_range(0..=2 * n) {
        let from = rng.gen_range(0..n);
        let to = rng.gen_range(0..n);
        add(from, to, &mut sid, &mut segments, &nodes);
    }
    RoadGraph::new(nodes, segments, vec![]).unwrap()
}

/// All simple paths from `start` to `goal`, with their arclengths.
fn enumerate_paths(g: &RoadGraph, start: u32, goal: u32) -> Vec<(Vec<u32>, f64)> {
    fn go(
        g: &RoadGraph,
        node: u32,
        goal: u32,
        visited: &mut Vec<u32>,
        stack: &mut Vec<u32>,
        acc: f64,
        out: &mut Vec<(Vec<u32>, f64)>,
    ) {
        if node == goal {
            out.push((stack.clone(), acc));
            return;
        }
        for seg in g.outgoing(node) {
            if visited.contains(&seg.to_node) {
                continue;
            }
            visited.push(seg.to_node);
            stack.push(seg.id);
            go(g, seg.to_node, goal, visited, stack, acc + seg.length(), out);
            stack.pop();
            visited.pop();
        }
    }
    let mut out = Vec::new();
    go(g, start, goal, &mut vec![start], &mut Vec::new(), 0.0, &mut out);
    out
}

#[test]
fn dijkstra_matches_enumeration() {
    let mut checked = 0;
    for seed in 0..120u64 {
        let g = random_graph(seed);
        let ids: Vec<u32> = g.nodes().map(|n| n.id).collect();
        for &start in &ids {
            for &goal in &ids {
                if start == goal {
                    continue;
                }
                let all = enumerate_paths(&g, start, goal);
                let got = g.shortest_path(start, goal);
                if all.is_empty() {
                    assert!(got.is_err(), "seed {seed}: found a path where none exists");
                    continue;
                }
                let best = all
                    .iter()
                    .map(|(_, l)| *l)
                    .fold(f64::INFINITY, f64::min);
                let p = got.unwrap_or_else(|e| panic!("seed {seed} {start}->{goal}: {e}"));
                let len: f64 = p
                    .segment_ids()
                    .iter()
                    .map(|sid| g.segment(*sid).unwrap().length())
                    .sum();
                assert!(
                    (len - best).abs() < 1e-9,
                    "seed {seed} {start}->{goal}: dijkstra {len} vs enumerated {best}"
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 500);
}

// ---------------------------------------------------------------------
// path geometry
// ---------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_to_path_is_lipschitz(
        px in -1.0..7.0f64, py in -1.0..6.5f64,
        qx in -1.0..7.0f64, qy in -1.0..6.5f64,
    ) {
        let g = bundled_map();
        let path = g.shortest_path(8, 14).unwrap();
        let p = Point2::new(px, py);
        let q = Point2::new(qx, qy);
        let dp = path.distance_to(p);
        let dq = path.distance_to(q);
        prop_assert!(dp >= 0.0);
        prop_assert!((dp - dq).abs() <= p.dist(q) + 1e-12);
    }

    #[test]
    fn distance_zero_iff_on_polyline(idx in 0usize..400, t in 0.0..1.0f64) {
        let g = bundled_map();
        let path = g.shortest_path(8, 10).unwrap();
        let pts = path.polyline();
        let i = idx % (pts.len() - 1);
        let on = pts[i] + (pts[i + 1] - pts[i]) * t;
        prop_assert!(path.distance_to(on) <= 1e-9);
        // a point pushed off by 5 cm is never "on"
        let off = on + Point2::new(0.0, 0.05);
        prop_assert!(path.distance_to(off) > 1e-9);
    }

    #[test]
    fn pose_chord_never_exceeds_arclength(s1 in 0.0..1.0f64, s2 in 0.0..1.0f64) {
        let g = bundled_map();
        let path = g.shortest_path(12, 9).unwrap(); // includes the turn arc
        let total = path.total_length();
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let (p1, _) = path.pose_at(lo * total).unwrap();
        let (p2, _) = path.pose_at(hi * total).unwrap();
        prop_assert!(p1.dist(p2) <= (hi - lo) * total + 1e-9);
    }

    #[test]
    fn candidates_monotone_in_tau(x in 1.0..5.0f64, y in 0.6..4.9f64, t1 in 0.05..0.3f64, dt in 0.0..0.5f64) {
        let g = bundled_map();
        let pos = Point2::new(x, y);
        let small = g.candidate_paths_from_entry(pos, t1);
        let large = g.candidate_paths_from_entry(pos, t1 + dt);
        for p in &small {
            prop_assert!(
                large.iter().any(|q| q.segment_ids() == p.segment_ids()),
                "enlarging tau dropped a candidate"
            );
        }
    }

    #[test]
    fn predict_length_is_exact(h in 1usize..60, v in 0.0..0.6f64, x in 0.8..5.2f64) {
        let g = bundled_map();
        let path = g.shortest_path(8, 10).unwrap();
        let state = VehicleState::new(x, 2.3, 0.0, v);
        prop_assert_eq!(predict_trajectory(&state, &path, v, h, 0.1).len(), h);
    }

    #[test]
    fn idm_never_leaves_bounds(
        ego in 0.0..0.5f64,
        gap in 0.01..5.0f64,
        leader in 0.0..0.5f64,
    ) {
        let p = IdmParams::default();
        let v = idm_velocity(ego, gap, leader, &p, 0.1);
        prop_assert!((0.0..=p.desired_speed).contains(&v));
    }

    #[test]
    fn iou_symmetric_and_rigid_invariant(
        ax in -1.0..1.0f64, ay in -1.0..1.0f64, ah in -3.2..3.2f64,
        bx in -1.0..1.0f64, by in -1.0..1.0f64, bh in -3.2..3.2f64,
        tx in -5.0..5.0f64, ty in -5.0..5.0f64, rot in -3.2..3.2f64,
    ) {
        let a = OrientedBox::new(Point2::new(ax, ay), ah, 0.3, 0.15);
        let b = OrientedBox::new(Point2::new(bx, by), bh, 0.4, 0.2);
        let ab = box_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - box_iou(&b, &a)).abs() < 1e-12);
        prop_assert!((box_iou(&a, &a) - 1.0).abs() < 1e-12);

        // rigid transform of both boxes preserves the overlap ratio
        let (s, c) = rot.sin_cos();
        let rigid = |obb: &OrientedBox| {
            let p = obb.center;
            OrientedBox::new(
                Point2::new(p.x * c - p.y * s + tx, p.x * s + p.y * c + ty),
                obb.heading + rot,
                obb.length,
                obb.width,
            )
        };
        let ab2 = box_iou(&rigid(&a), &rigid(&b));
        prop_assert!((ab - ab2).abs() < 1e-9, "iou {ab} vs transformed {ab2}");
    }
}

// ---------------------------------------------------------------------
// point-to-path distance against a dense-sampling oracle
// ---------------------------------------------------------------------

#[test]
fn distance_matches_dense_sampling() {
    let g = bundled_map();
    let path = g.shortest_path(12, 9).unwrap();
    let total = path.total_length();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let p = Point2::new(rng.gen_range(0.0..6.0), rng.gen_range(0.0..5.5));
        let fast = path.distance_to(p);
        // brute force over 10^4 evenly spaced polyline samples
        let mut brute = f64::INFINITY;
        for i in 0..=10_000 {
            let s = total * i as f64 / 10_000.0;
            let (q, _) = path.pose_at(s).unwrap();
            brute = brute.min(p.dist(q));
        }
        assert!(
            (fast - brute).abs() < 1e-3,
            "point {p:?}: exact {fast} vs sampled {brute}"
        );
        assert!(fast <= brute + 1e-12);
    }
}

// ---------------------------------------------------------------------
// average precision against an independently coded reference
// ---------------------------------------------------------------------

/// Second AP implementation with a different shape: explicit recall grid
/// and an O(n^2) max-precision scan.
fn reference_ap(
    detections: &[Vec<ScoredDetection>],
    truth: &[GroundTruthFrame],
    tau: f64,
) -> f64 {
    #[derive(Clone, Copy)]
    struct Flat {
        frame: usize,
        index: usize,
        score: f64,
    }
    let mut flat = Vec::new();
    for (fi, frame) in detections.iter().enumerate() {
        for (di, d) in frame.iter().enumerate() {
            flat.push(Flat {
                frame: fi,
                index: di,
                score: d.score,
            });
        }
    }
    flat.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.frame.cmp(&b.frame))
            .then(a.index.cmp(&b.index))
    });
    let total_truth: usize = truth.iter().map(|f| f.vehicles.len()).sum();
    if total_truth == 0 {
        return 0.0;
    }
    let mut taken: Vec<Vec<bool>> = truth.iter().map(|f| vec![false; f.vehicles.len()]).collect();
    let mut tp = Vec::new();
    for f in &flat {
        let dbox = detections[f.frame][f.index].detection.as_box();
        let mut best_iou = -1.0;
        let mut best_ti = None;
        for (ti, v) in truth[f.frame].vehicles.iter().enumerate() {
            if taken[f.frame][ti] {
                continue;
            }
            let iou = box_iou(&dbox, &v.as_box());
            if iou >= tau && iou > best_iou {
                best_iou = iou;
                best_ti = Some(ti);
            }
        }
        if let Some(ti) = best_ti {
            taken[f.frame][ti] = true;
            tp.push(true);
        } else {
            tp.push(false);
        }
    }
    // precision/recall points, then an O(n^2) interpolated sum
    let n = tp.len();
    let mut cum = 0usize;
    let mut pr: Vec<(f64, f64)> = Vec::with_capacity(n);
    for (i, &hit) in tp.iter().enumerate() {
        if hit {
            cum += 1;
        }
        pr.push((cum as f64 / total_truth as f64, cum as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..n {
        let (r, _) = pr[i];
        if r > prev_r {
            // max precision at any recall >= r
            let pmax = pr[i..]
                .iter()
                .map(|(_, p)| *p)
                .fold(0.0f64, f64::max);
            ap += (r - prev_r) * pmax;
            prev_r = r;
        }
    }
    ap
}

#[test]
fn ap_matches_reference_implementation() {
    let region = Region {
        name: "cov".into(),
        polygon: crossway_core::geom::Polygon::rect(-5.0, -5.0, 5.0, 5.0),
    };
    let mut noise = NoiseModel::lidar_preset(region.clone(), 77);
    noise.p_fn = 0.10;
    noise.sigma_pos = 0.01;
    let mut dets = Vec::new();
    let mut truth = Vec::new();
    for i in 0..300 {
        let t = i as f64 * 0.05;
        let frame = GroundTruthFrame {
            t,
            vehicles: vec![
                TruthVehicle {
                    id: 0,
                    state: VehicleState::new(-2.0 + 0.01 * i as f64, 0.0, 0.1, 0.2),
                    length: 0.30,
                    width: 0.15,
                    is_cav: true,
                },
                TruthVehicle {
                    id: 1,
                    state: VehicleState::new(1.0, -2.0 + 0.012 * i as f64, 1.4, 0.2),
                    length: 0.30,
                    width: 0.15,
                    is_cav: false,
                },
            ],
        };
        dets.push(sense_scored(&frame, &noise, &region));
        truth.push(frame);
    }
    let taus = [0.3, 0.5, 0.7];
    let got = evaluate_ap(&dets, &truth, &taus).unwrap();
    for (i, &tau) in taus.iter().enumerate() {
        let want = reference_ap(&dets, &truth, tau);
        assert!(
            (got[i] - want).abs() < 1e-9,
            "AP@{tau}: {} vs reference {want}",
            got[i]
        );
    }
    // the miss rate keeps recall (and so AP) strictly below 1
    assert!(got[0] < 1.0 && got[0] > 0.5, "AP@0.3 = {}", got[0]);
}

#[test]
fn ap_empty_truth_warns_zero() {
    let region = Region {
        name: "cov".into(),
        polygon: crossway_core::geom::Polygon::rect(-5.0, -5.0, 5.0, 5.0),
    };
    let noise = NoiseModel::noiseless(region.clone(), 5);
    let frame = GroundTruthFrame {
        t: 0.0,
        vehicles: vec![TruthVehicle {
            id: 0,
            state: VehicleState::new(0.0, 0.0, 0.0, 0.0),
            length: 0.3,
            width: 0.15,
            is_cav: false,
        }],
    };
    let dets = vec![sense_scored(&frame, &noise, &region)];
    let empty_truth = vec![GroundTruthFrame {
        t: 0.0,
        vehicles: vec![],
    }];
    let aps = evaluate_ap(&dets, &empty_truth, &[0.5]).unwrap();
    assert_eq!(aps, vec![0.0]);
}
