//! Directed road graph with per-segment waypoints, named regions,
//! deterministic shortest-path routing and path-geometry queries.
//!
//! The graph is immutable after load and safe to share across threads.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, BTreeMap, BTreeSet};
use std::path::Path;

use crate::geom::{
    point_segment_distance, project_on_segment, Point2, Polygon, PolygonError,
};

pub type NodeId = u32;
pub type SegmentId = u32;

/// Junction of the road graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub position: Point2,
}

/// Directed drivable edge with its waypoint polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: SegmentId,
    pub from_node: NodeId,
    pub to_node: NodeId,
    pub waypoints: Vec<Point2>,
    length: f64,
}

impl Segment {
    pub fn new(id: SegmentId, from_node: NodeId, to_node: NodeId, waypoints: Vec<Point2>) -> Self {
        let length = polyline_length(&waypoints);
        Segment {
            id,
            from_node,
            to_node,
            waypoints,
            length,
        }
    }

    /// Total polyline arclength.
    pub fn length(&self) -> f64 {
        self.length
    }
}

/// Named polygonal area of the map (e.g. the managed junction area or the
/// roadside-unit coverage area).
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub name: String,
    pub polygon: Polygon,
}

impl Region {
    /// Boundary-inclusive point-in-region test.
    pub fn contains(&self, p: Point2) -> bool {
        self.polygon.contains(p)
    }
}

/// Region name used for management gating and candidate-path generation.
pub const INTERSECTION_REGION: &str = "intersection";
/// Region name for the roadside-unit communication coverage.
pub const V2I_REGION: &str = "v2i_coverage";

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error("i/o error reading map: {0}")]
    Io(#[from] std::io::Error),
    #[error("map line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing or unsupported version header (expected `roadmap v1`)")]
    BadVersionHeader,
    #[error("map has no nodes")]
    EmptyNodes,
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("duplicate segment id {0}")]
    DuplicateSegment(SegmentId),
    #[error("duplicate region name `{0}`")]
    DuplicateRegion(String),
    #[error("segment {segment} references missing node {node}")]
    DanglingNode { segment: SegmentId, node: NodeId },
    #[error("segment {0} needs at least 2 waypoints")]
    TooFewWaypoints(SegmentId),
    #[error("segment {segment}: {end} waypoint is {gap:.4} m from its node (max 0.01)")]
    OpenPolyline {
        segment: SegmentId,
        end: &'static str,
        gap: f64,
    },
    #[error("segment {0} has repeated consecutive waypoints")]
    RepeatedWaypoint(SegmentId),
    #[error("non-finite coordinate in {0}")]
    NonFinite(String),
    #[error("graph is not connected: node {0} is isolated from the rest")]
    Disconnected(NodeId),
    #[error("region `{name}`: {source}")]
    BadRegion {
        name: String,
        source: PolygonError,
    },
    #[error("no path from node {from} to node {to}")]
    NoPath { from: NodeId, to: NodeId },
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("unknown segment id {0}")]
    UnknownSegment(SegmentId),
    #[error("arclength {s:.4} outside [0, {total:.4}]")]
    ArclengthOutOfRange { s: f64, total: f64 },
    #[error("segments {a} -> {b} are not connected end to start")]
    DisjointSegments { a: SegmentId, b: SegmentId },
}

/// A concrete route: ordered segment ids plus the concatenated waypoint
/// polyline and its cumulative arclength table.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRef {
    segment_ids: Vec<SegmentId>,
    polyline: Vec<Point2>,
    cumulative: Vec<f64>,
}

impl PathRef {
    /// Zero-length path anchored at one point (start == goal routes).
    pub fn trivial(at: Point2) -> Self {
        PathRef {
            segment_ids: Vec::new(),
            polyline: vec![at],
            cumulative: vec![0.0],
        }
    }

    fn from_polyline(segment_ids: Vec<SegmentId>, polyline: Vec<Point2>) -> Self {
        let mut cumulative = Vec::with_capacity(polyline.len());
        let mut acc = 0.0;
        for (i, p) in polyline.iter().enumerate() {
            if i > 0 {
                acc += p.dist(polyline[i - 1]);
            }
            cumulative.push(acc);
        }
        PathRef {
            segment_ids,
            polyline,
            cumulative,
        }
    }

    pub fn segment_ids(&self) -> &[SegmentId] {
        &self.segment_ids
    }

    pub fn polyline(&self) -> &[Point2] {
        &self.polyline
    }

    pub fn total_length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.segment_ids.is_empty()
    }

    pub fn start(&self) -> Point2 {
        self.polyline[0]
    }

    pub fn end(&self) -> Point2 {
        *self.polyline.last().unwrap()
    }

    /// Minimum Euclidean distance from `p` to the polyline
    /// (point-to-segment, not point-to-vertex).
    pub fn distance_to(&self, p: Point2) -> f64 {
        if self.polyline.len() == 1 {
            return p.dist(self.polyline[0]);
        }
        let mut best = f64::INFINITY;
        for w in self.polyline.windows(2) {
            best = best.min(point_segment_distance(p, w[0], w[1]));
        }
        best
    }

    /// Projects `p` onto the polyline; returns (arclength of the foot
    /// point, distance to it).
    pub fn project(&self, p: Point2) -> (f64, f64) {
        if self.polyline.len() == 1 {
            return (0.0, p.dist(self.polyline[0]));
        }
        let mut best_d = f64::INFINITY;
        let mut best_s = 0.0;
        for (i, w) in self.polyline.windows(2).enumerate() {
            let (foot, t) = project_on_segment(p, w[0], w[1]);
            let d = p.dist(foot);
            if d < best_d {
                best_d = d;
                best_s = self.cumulative[i] + t * (self.cumulative[i + 1] - self.cumulative[i]);
            }
        }
        (best_s, best_d)
    }

    /// Pose at arclength `s`: linearly interpolated position and the
    /// heading of the containing polyline segment. At a waypoint joint the
    /// heading is taken from the outgoing segment.
    pub fn pose_at(&self, s: f64) -> Result<(Point2, f64), MapError> {
        let total = self.total_length();
        if !(0.0..=total + 1e-9).contains(&s) {
            return Err(MapError::ArclengthOutOfRange { s, total });
        }
        if self.polyline.len() == 1 {
            return Ok((self.polyline[0], 0.0));
        }
        let s = s.min(total);
        // first index with cumulative > s gives the containing segment;
        // exact waypoint hits therefore use the following segment
        let idx = match self.cumulative.iter().position(|&c| c > s) {
            Some(i) => i - 1,
            None => self.polyline.len() - 2,
        };
        let a = self.polyline[idx];
        let b = self.polyline[idx + 1];
        let seg_len = self.cumulative[idx + 1] - self.cumulative[idx];
        let t = if seg_len > 0.0 {
            (s - self.cumulative[idx]) / seg_len
        } else {
            0.0
        };
        let dir = b - a;
        Ok((a + dir * t, dir.y.atan2(dir.x)))
    }
}

/// Immutable directed road network.
#[derive(Debug, Clone)]
pub struct RoadGraph {
    nodes: BTreeMap<NodeId, Node>,
    segments: BTreeMap<SegmentId, Segment>,
    regions: BTreeMap<String, Region>,
    outgoing: BTreeMap<NodeId, Vec<SegmentId>>,
}

impl RoadGraph {
    /// Builds and validates a graph from parts.
    pub fn new(
        nodes: Vec<Node>,
        segments: Vec<Segment>,
        regions: Vec<Region>,
    ) -> Result<Self, MapError> {
        if nodes.is_empty() {
            return Err(MapError::EmptyNodes);
        }
        let mut node_map = BTreeMap::new();
        for n in nodes {
            if !n.position.is_finite() {
                return Err(MapError::NonFinite(format!("node {}", n.id)));
            }
            if node_map.insert(n.id, n).is_some() {
                return Err(MapError::DuplicateNode(n.id));
            }
        }
        let mut seg_map = BTreeMap::new();
        let mut outgoing: BTreeMap<NodeId, Vec<SegmentId>> = BTreeMap::new();
        for s in segments {
            for &nid in &[s.from_node, s.to_node] {
                if !node_map.contains_key(&nid) {
                    return Err(MapError::DanglingNode {
                        segment: s.id,
                        node: nid,
                    });
                }
            }
            if s.waypoints.len() < 2 {
                return Err(MapError::TooFewWaypoints(s.id));
            }
            if s.waypoints.iter().any(|w| !w.is_finite()) {
                return Err(MapError::NonFinite(format!("segment {}", s.id)));
            }
            for w in s.waypoints.windows(2) {
                if w[0].dist(w[1]) < 1e-9 {
                    return Err(MapError::RepeatedWaypoint(s.id));
                }
            }
            let start_gap = s.waypoints[0].dist(node_map[&s.from_node].position);
            if start_gap > 0.01 {
                return Err(MapError::OpenPolyline {
                    segment: s.id,
                    end: "first",
                    gap: start_gap,
                });
            }
            let end_gap = s.waypoints.last().unwrap().dist(node_map[&s.to_node].position);
            if end_gap > 0.01 {
                return Err(MapError::OpenPolyline {
                    segment: s.id,
                    end: "last",
                    gap: end_gap,
                });
            }
            outgoing.entry(s.from_node).or_default().push(s.id);
            let id = s.id;
            if seg_map.insert(id, s).is_some() {
                return Err(MapError::DuplicateSegment(id));
            }
        }
        let mut region_map = BTreeMap::new();
        for r in regions {
            let name = r.name.clone();
            if region_map.insert(name.clone(), r).is_some() {
                return Err(MapError::DuplicateRegion(name));
            }
        }
        let graph = RoadGraph {
            nodes: node_map,
            segments: seg_map,
            regions: region_map,
            outgoing,
        };
        graph.check_connected()?;
        Ok(graph)
    }

    /// Undirected reachability over drivable segments.
    fn check_connected(&self) -> Result<(), MapError> {
        if self.segments.is_empty() {
            // single-node maps are trivially connected, anything else is not
            if self.nodes.len() > 1 {
                return Err(MapError::Disconnected(
                    *self.nodes.keys().nth(1).unwrap(),
                ));
            }
            return Ok(());
        }
        let mut adj: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for s in self.segments.values() {
            adj.entry(s.from_node).or_default().push(s.to_node);
            adj.entry(s.to_node).or_default().push(s.from_node);
        }
        let start = *self.nodes.keys().next().unwrap();
        let mut seen = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            for &m in adj.get(&n).into_iter().flatten() {
                if seen.insert(m) {
                    stack.push(m);
                }
            }
        }
        for &id in self.nodes.keys() {
            if !seen.contains(&id) {
                return Err(MapError::Disconnected(id));
            }
        }
        Ok(())
    }

    /// Loads a map file (see the repository README for the format).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MapError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parses map text. Requires a `roadmap v1` version header.
    pub fn parse(text: &str) -> Result<Self, MapError> {
        #[derive(PartialEq)]
        enum Section {
            Preamble,
            Nodes,
            Segments,
            Regions,
        }
        let mut section = Section::Preamble;
        let mut version_seen = false;
        let mut nodes = Vec::new();
        let mut segments = Vec::new();
        let mut regions = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = lineno + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !version_seen {
                if line == "roadmap v1" {
                    version_seen = true;
                    continue;
                }
                return Err(MapError::BadVersionHeader);
            }
            match line {
                "[nodes]" => {
                    section = Section::Nodes;
                    continue;
                }
                "[segments]" => {
                    section = Section::Segments;
                    continue;
                }
                "[regions]" => {
                    section = Section::Regions;
                    continue;
                }
                _ => {}
            }
            let parse_err = |msg: String| MapError::Parse { line: lineno, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            match section {
                Section::Preamble => {
                    return Err(parse_err(format!("unexpected line before any section: `{line}`")));
                }
                Section::Nodes => {
                    if fields.len() != 3 {
                        return Err(parse_err("node line needs: id x y".into()));
                    }
                    let id = fields[0]
                        .parse()
                        .map_err(|e| parse_err(format!("bad node id: {e}")))?;
                    let x = parse_f64(fields[1], lineno)?;
                    let y = parse_f64(fields[2], lineno)?;
                    nodes.push(Node {
                        id,
                        position: Point2::new(x, y),
                    });
                }
                Section::Segments => {
                    if fields.len() < 3 || fields.len() % 2 == 0 {
                        return Err(parse_err(
                            "segment line needs: id from to x1 y1 x2 y2 ...".into(),
                        ));
                    }
                    let id: SegmentId = fields[0]
                        .parse()
                        .map_err(|e| parse_err(format!("bad segment id: {e}")))?;
                    let from_node = fields[1]
                        .parse()
                        .map_err(|e| parse_err(format!("bad from-node id: {e}")))?;
                    let to_node = fields[2]
                        .parse()
                        .map_err(|e| parse_err(format!("bad to-node id: {e}")))?;
                    let mut waypoints = Vec::with_capacity((fields.len() - 3) / 2);
                    for pair in fields[3..].chunks(2) {
                        waypoints.push(Point2::new(
                            parse_f64(pair[0], lineno)?,
                            parse_f64(pair[1], lineno)?,
                        ));
                    }
                    segments.push(Segment::new(id, from_node, to_node, waypoints));
                }
                Section::Regions => {
                    if fields.len() < 7 || fields.len() % 2 == 0 {
                        return Err(parse_err(
                            "region line needs: name x1 y1 x2 y2 x3 y3 ...".into(),
                        ));
                    }
                    let name = fields[0].to_string();
                    let mut vertices = Vec::with_capacity((fields.len() - 1) / 2);
                    for pair in fields[1..].chunks(2) {
                        vertices.push(Point2::new(
                            parse_f64(pair[0], lineno)?,
                            parse_f64(pair[1], lineno)?,
                        ));
                    }
                    let polygon = Polygon::new(vertices).map_err(|source| MapError::BadRegion {
                        name: name.clone(),
                        source,
                    })?;
                    regions.push(Region { name, polygon });
                }
            }
        }
        if !version_seen {
            return Err(MapError::BadVersionHeader);
        }
        Self::new(nodes, segments, regions)
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn segment(&self, id: SegmentId) -> Option<&Segment> {
        self.segments.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.values()
    }

    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.get(name)
    }

    /// Segments leaving `node`, in id order.
    pub fn outgoing(&self, node: NodeId) -> impl Iterator<Item = &Segment> {
        self.outgoing
            .get(&node)
            .into_iter()
            .flatten()
            .map(|sid| &self.segments[sid])
    }

    pub fn intersection_region(&self) -> Option<&Region> {
        self.regions.get(INTERSECTION_REGION)
    }

    /// Bounding extent (width, height) over nodes, waypoints and region
    /// vertices.
    pub fn extent(&self) -> (f64, f64) {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut take = |p: Point2| {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        };
        for n in self.nodes.values() {
            take(n.position);
        }
        for s in self.segments.values() {
            for &w in &s.waypoints {
                take(w);
            }
        }
        for r in self.regions.values() {
            for &v in r.polygon.vertices() {
                take(v);
            }
        }
        (hi.x - lo.x, hi.y - lo.y)
    }

    /// Node closest to `p` (Euclidean, ties by lower id).
    pub fn nearest_node(&self, p: Point2) -> NodeId {
        let mut best = (*self.nodes.keys().next().unwrap(), f64::INFINITY);
        for n in self.nodes.values() {
            let d = n.position.dist(p);
            if d < best.1 {
                best = (n.id, d);
            }
        }
        best.0
    }

    /// Builds a `PathRef` from consecutive segment ids, checking
    /// end-to-start continuity.
    pub fn path_from_segments(&self, ids: &[SegmentId]) -> Result<PathRef, MapError> {
        let mut polyline: Vec<Point2> = Vec::new();
        let mut prev: Option<&Segment> = None;
        for &id in ids {
            let seg = self.segments.get(&id).ok_or(MapError::UnknownSegment(id))?;
            if let Some(p) = prev {
                if p.to_node != seg.from_node {
                    return Err(MapError::DisjointSegments { a: p.id, b: seg.id });
                }
            }
            for &w in &seg.waypoints {
                // joints repeat the shared node position; drop duplicates so
                // the cumulative table stays strictly increasing
                if polyline.last().map_or(true, |&l| l.dist(w) > 1e-9) {
                    polyline.push(w);
                }
            }
            prev = Some(seg);
        }
        if polyline.is_empty() {
            return Err(MapError::EmptyNodes);
        }
        Ok(PathRef::from_polyline(ids.to_vec(), polyline))
    }

    /// Dijkstra over segment arclengths. Among equal-cost routes the
    /// lexicographically smallest segment-id sequence wins, so results are
    /// reproducible across runs.
    pub fn shortest_path(&self, start: NodeId, goal: NodeId) -> Result<PathRef, MapError> {
        let start_node = self.nodes.get(&start).ok_or(MapError::UnknownNode(start))?;
        self.nodes.get(&goal).ok_or(MapError::UnknownNode(goal))?;
        if start == goal {
            return Ok(PathRef::trivial(start_node.position));
        }

        #[derive(PartialEq)]
        struct Entry {
            dist: f64,
            path: Vec<SegmentId>,
            node: NodeId,
        }
        impl Eq for Entry {}
        impl Ord for Entry {
            fn cmp(&self, other: &Self) -> Ordering {
                // reversed: BinaryHeap is a max-heap, we need the smallest
                // (dist, path) first
                other
                    .dist
                    .total_cmp(&self.dist)
                    .then_with(|| other.path.cmp(&self.path))
                    .then_with(|| other.node.cmp(&self.node))
            }
        }
        impl PartialOrd for Entry {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }

        let mut best: BTreeMap<NodeId, (f64, Vec<SegmentId>)> = BTreeMap::new();
        best.insert(start, (0.0, Vec::new()));
        let mut heap = BinaryHeap::new();
        heap.push(Entry {
            dist: 0.0,
            path: Vec::new(),
            node: start,
        });

        while let Some(entry) = heap.pop() {
            if entry.node == goal {
                return self.path_from_segments(&entry.path);
            }
            if let Some((d, p)) = best.get(&entry.node) {
                if entry.dist > *d || (entry.dist == *d && entry.path > *p) {
                    continue;
                }
            }
            for &sid in self.outgoing.get(&entry.node).into_iter().flatten() {
                let seg = &self.segments[&sid];
                let dist = entry.dist + seg.length;
                let mut path = entry.path.clone();
                path.push(sid);
                let improved = match best.get(&seg.to_node) {
                    None => true,
                    Some((d, p)) => dist < *d || (dist == *d && path < *p),
                };
                if improved {
                    best.insert(seg.to_node, (dist, path.clone()));
                    heap.push(Entry {
                        dist,
                        path,
                        node: seg.to_node,
                    });
                }
            }
        }
        Err(MapError::NoPath {
            from: start,
            to: goal,
        })
    }

    /// Candidate routes for a vehicle observed at `position`: all simple
    /// segment sequences from the nearest node that pass through the
    /// intersection region and end at the first node beyond it, keeping only
    /// those whose polyline stays within `tau_p` of the position.
    ///
    /// Returns an empty list when the map has no intersection region.
    pub fn candidate_paths_from_entry(&self, position: Point2, tau_p: f64) -> Vec<PathRef> {
        let Some(region) = self.intersection_region() else {
            return Vec::new();
        };
        let start = self.nearest_node(position);
        let mut found: Vec<PathRef> = Vec::new();
        let mut stack: Vec<SegmentId> = Vec::new();
        let mut visited: Vec<NodeId> = vec![start];
        self.dfs_candidates(start, region, false, &mut stack, &mut visited, &mut found);
        found
            .into_iter()
            .filter(|p| p.distance_to(position) <= tau_p)
            .collect()
    }

    fn dfs_candidates(
        &self,
        node: NodeId,
        region: &Region,
        entered: bool,
        stack: &mut Vec<SegmentId>,
        visited: &mut Vec<NodeId>,
        found: &mut Vec<PathRef>,
    ) {
        const MAX_SEGMENTS: usize = 8;
        if stack.len() >= MAX_SEGMENTS {
            return;
        }
        for &sid in self.outgoing.get(&node).into_iter().flatten() {
            let seg = &self.segments[&sid];
            if visited.contains(&seg.to_node) {
                continue;
            }
            stack.push(sid);
            visited.push(seg.to_node);
            let entered_now =
                entered || seg.waypoints.iter().any(|&w| region.contains(w));
            let end_outside = !region.contains(self.nodes[&seg.to_node].position);
            if entered_now && end_outside {
                if let Ok(p) = self.path_from_segments(stack) {
                    found.push(p);
                }
            } else {
                self.dfs_candidates(seg.to_node, region, entered_now, stack, visited, found);
            }
            visited.pop();
            stack.pop();
        }
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64, MapError> {
    let v: f64 = s.parse().map_err(|e| MapError::Parse {
        line,
        msg: format!("bad number `{s}`: {e}"),
    })?;
    if !v.is_finite() {
        return Err(MapError::Parse {
            line,
            msg: format!("non-finite number `{s}`"),
        });
    }
    Ok(v)
}

fn polyline_length(pts: &[Point2]) -> f64 {
    pts.windows(2).map(|w| w[0].dist(w[1])).sum()
}
