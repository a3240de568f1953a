//! Obstacle-respecting shortest-path distances.
//!
//! The free space is the union of free cells. Shortest paths among
//! axis-aligned square obstacles bend only at obstacle corners, so distances
//! are computed on a visibility graph whose vertices are the convex wall
//! corners (and diagonal pinch points). A segment is traversable when it
//! does not pass through the interior of any wall cell.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::pose::Pose;
use super::scene::SceneGrid;
use super::WorldError;

const EPS: f64 = 1e-9;

type Point = (f64, f64);

fn dist(a: Point, b: Point) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Midpoint of the part of segment `p`–`q` inside the closed square, if
/// that part has positive length.
fn chord_midpoint(p: Point, q: Point, min: Point, max: Point) -> Option<Point> {
    let (dx, dy) = (q.0 - p.0, q.1 - p.1);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (pk, qk) in [(-dx, p.0 - min.0), (dx, max.0 - p.0), (-dy, p.1 - min.1), (dy, max.1 - p.1)] {
        if pk == 0.0 {
            if qk < 0.0 {
                return None;
            }
        } else {
            let r = qk / pk;
            if pk < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t1 - t0 <= 1e-12 {
        return None;
    }
    let tm = 0.5 * (t0 + t1);
    Some((p.0 + tm * dx, p.1 + tm * dy))
}

/// Whether the straight segment between two points stays in free space.
/// Running along a wall face is allowed unless the cell across the face is
/// also a wall.
pub fn segment_clear(scene: &SceneGrid, p: Point, q: Point) -> bool {
    let cs = scene.cell_size;
    let extent = (scene.width as f64 * cs, scene.height as f64 * cs);
    let inside = |a: Point| a.0 >= 0.0 && a.1 >= 0.0 && a.0 <= extent.0 && a.1 <= extent.1;
    if !inside(p) || !inside(q) {
        return false;
    }
    let cx0 = ((p.0.min(q.0) / cs).floor() as i64 - 1).max(0) as usize;
    let cx1 = ((p.0.max(q.0) / cs).floor() as usize + 1).min(scene.width - 1);
    let cy0 = ((p.1.min(q.1) / cs).floor() as i64 - 1).max(0) as usize;
    let cy1 = ((p.1.max(q.1) / cs).floor() as usize + 1).min(scene.height - 1);
    for cy in cy0..=cy1 {
        for cx in cx0..=cx1 {
            if !scene.is_wall(cx, cy) {
                continue;
            }
            let min = (cx as f64 * cs, cy as f64 * cs);
            let max = (min.0 + cs, min.1 + cs);
            let Some((mx, my)) = chord_midpoint(p, q, min, max) else {
                continue;
            };
            let in_x = mx > min.0 + EPS && mx < max.0 - EPS;
            let in_y = my > min.1 + EPS && my < max.1 - EPS;
            let (cx, cy) = (cx as i64, cy as i64);
            let blocked = match (in_x, in_y) {
                (true, true) => true,
                (true, false) => scene.is_wall_i(cx, if my - min.1 <= EPS { cy - 1 } else { cy + 1 }),
                (false, true) => scene.is_wall_i(if mx - min.0 <= EPS { cx - 1 } else { cx + 1 }, cy),
                (false, false) => false,
            };
            if blocked {
                return false;
            }
        }
    }
    true
}

/// Visibility graph over wall corners of one scene.
#[derive(Debug, Clone)]
pub struct NavGraph {
    vertices: Vec<Point>,
    adj: Vec<Vec<(usize, f64)>>,
}

impl NavGraph {
    pub fn build(scene: &SceneGrid) -> Self {
        let cs = scene.cell_size;
        let mut vertices = Vec::new();
        for j in 1..scene.height {
            for i in 1..scene.width {
                let nw = scene.is_wall(i - 1, j - 1);
                let ne = scene.is_wall(i, j - 1);
                let sw = scene.is_wall(i - 1, j);
                let se = scene.is_wall(i, j);
                let walls = [nw, ne, sw, se].iter().filter(|w| **w).count();
                let pinch = walls == 2 && nw == se;
                if walls == 1 || pinch {
                    vertices.push((i as f64 * cs, j as f64 * cs));
                }
            }
        }
        let mut adj = vec![Vec::new(); vertices.len()];
        for a in 0..vertices.len() {
            for b in a + 1..vertices.len() {
                if segment_clear(scene, vertices[a], vertices[b]) {
                    let d = dist(vertices[a], vertices[b]);
                    adj[a].push((b, d));
                    adj[b].push((a, d));
                }
            }
        }
        Self { vertices, adj }
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, ties broken by vertex id
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Distances to one fixed target, answering queries from any free point.
#[derive(Debug, Clone)]
pub struct GoalField {
    target: Point,
    vertex_dist: Vec<f64>,
}

impl GoalField {
    pub fn new(scene: &SceneGrid, graph: &NavGraph, target: Point) -> Self {
        let n = graph.vertices.len();
        let mut best = vec![f64::INFINITY; n];
        let mut heap = BinaryHeap::new();
        for (v, &pt) in graph.vertices.iter().enumerate() {
            if segment_clear(scene, target, pt) {
                best[v] = dist(target, pt);
                heap.push(Entry(best[v], v));
            }
        }
        while let Some(Entry(d, v)) = heap.pop() {
            if d > best[v] {
                continue;
            }
            for &(u, w) in &graph.adj[v] {
                let nd = d + w;
                if nd < best[u] {
                    best[u] = nd;
                    heap.push(Entry(nd, u));
                }
            }
        }
        Self { target, vertex_dist: best }
    }

    pub fn target(&self) -> Point {
        self.target
    }

    /// Geodesic distance from `p` to the target; `+inf` when unreachable.
    pub fn distance_from(&self, scene: &SceneGrid, graph: &NavGraph, p: Point) -> f64 {
        if segment_clear(scene, p, self.target) {
            return dist(p, self.target);
        }
        let mut cands: Vec<(f64, usize)> = self
            .vertex_dist
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_finite())
            .map(|(v, &d)| (d + dist(p, graph.vertices[v]), v))
            .collect();
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        // The bound is exact for a visible vertex, so the first visible
        // candidate in ascending order is the minimum.
        cands.into_iter().find(|&(_, v)| segment_clear(scene, p, graph.vertices[v])).map_or(f64::INFINITY, |(d, _)| d)
    }

    /// First point to head for on a shortest path from `p`: the target
    /// itself when visible, otherwise a wall corner.
    pub fn next_waypoint(&self, scene: &SceneGrid, graph: &NavGraph, p: Point) -> Option<Point> {
        if segment_clear(scene, p, self.target) {
            return Some(self.target);
        }
        let mut cands: Vec<(f64, usize)> = self
            .vertex_dist
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_finite())
            .map(|(v, &d)| (d + dist(p, graph.vertices[v]), v))
            .collect();
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cands.into_iter().find(|&(_, v)| segment_clear(scene, p, graph.vertices[v])).map(|(_, v)| graph.vertices[v])
    }
}

/// Shortest obstacle-respecting path length between two free poses.
pub fn geodesic_distance(scene: &SceneGrid, from: &Pose, to: &Pose) -> Result<f64, WorldError> {
    let graph = NavGraph::build(scene);
    geodesic_distance_with(scene, &graph, from, to)
}

pub fn geodesic_distance_with(scene: &SceneGrid, graph: &NavGraph, from: &Pose, to: &Pose) -> Result<f64, WorldError> {
    for p in [from, to] {
        if !scene.is_free_point(p.x, p.y) {
            return Err(WorldError::NotFree { x: p.x, y: p.y });
        }
    }
    let field = GoalField::new(scene, graph, to.position());
    let d = field.distance_from(scene, graph, from.position());
    if d.is_finite() {
        Ok(d)
    } else {
        Err(WorldError::Unreachable { scene_id: scene.scene_id.clone() })
    }
}
